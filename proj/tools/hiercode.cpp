// hiercode command-line tool.
//
//   hiercode synth   --out data/
//   hiercode stats   --data data/
//   hiercode embed   --data data/ --features data/features.hcf --out fused.hcf
//   hiercode train   --embeddings fused.hcf --out run/
//   hiercode encode  --checkpoint run/selected.hqk --embeddings fused.hcf --data data/ --out codes.txt
//   hiercode graph   --checkpoint run/selected.hqk --embeddings fused.hcf --out layers.dot
//   hiercode quality --checkpoint run/selected.hqk --embeddings fused.hcf --data data/ --tree run/tree.json --labels data/labels.json
//   hiercode rerank  --checkpoint run/selected.hqk --embeddings fused.hcf --data data/ --struct fused.hcf.struct --split test --k 1,3,10

#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "hiercode/hiercode.hpp"

namespace fs = std::filesystem;
using namespace hiercode;

namespace {

Tensor load_embeddings(const std::string& path) {
  const FeatureTable t = load_features(path);
  if (!t.complete()) fail<IoError>("'", path, "' has entities without vectors; the quantizer needs every row");
  return t.vectors;
}

CodeTable codes_for(const Checkpoint& cp, const Tensor& emb) {
  if (emb.dim(1) != cp.model.dim)
    fail<ShapeError>("embedding width ", emb.dim(1), " does not match checkpoint dim ", cp.model.dim);
  return encode_codes(cp.params, cp.model, emb);
}

void check_rows(const KgDataset& ds, const Tensor& emb) {
  if (emb.rows() != ds.num_entities())
    fail<ShapeError>("embeddings have ", emb.rows(), " rows but the dataset has ", ds.num_entities(), " entities");
}

std::vector<std::size_t> parse_ks(const std::string& s) {
  std::vector<std::size_t> ks;
  for (const auto& f : detail::split_fields(s, ',')) {
    std::size_t pos = 0;
    const auto k = std::stoul(f, &pos);
    if (pos != f.size() || k == 0) fail<Error>("bad --k entry '", f, "'");
    ks.push_back(k);
  }
  return ks;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Hierarchical residual-quantized codes for knowledge-graph entities"};
  app.require_subcommand(1);

  // synth
  SynthConfig sc;
  std::string synth_out;
  auto* synth = app.add_subcommand("synth", "Write a planted hierarchical toy KG with features and labels");
  synth->add_option("--out", synth_out, "Output directory")->required();
  synth->add_option("--seed", sc.seed);
  synth->add_option("--super", sc.n_super, "Super-clusters");
  synth->add_option("--sub", sc.n_sub, "Sub-clusters per super-cluster");
  synth->add_option("--per-leaf", sc.per_leaf, "Entities per sub-cluster");
  synth->add_option("--dim", sc.dim, "Feature width");
  synth->add_option("--sigma", sc.sigma);
  synth->add_option("--holdout", sc.holdout, "Fraction of triples for each of valid and test");

  // stats
  std::string data_dir;
  auto* stats_cmd = app.add_subcommand("stats", "Print dataset counts as JSON");
  stats_cmd->add_option("--data", data_dir, "Triple file or dataset directory")->required();

  // embed
  StructTrainConfig st;
  std::string backbone = "translate", features_path, embed_out, struct_out;
  double rho = 0.5;
  bool fallback = false;
  auto* embed = app.add_subcommand("embed", "Train structural embeddings and fuse them with text features");
  embed->add_option("--data", data_dir, "Dataset directory")->required();
  embed->add_option("--backbone", backbone, "translate | rotate | complex | distmult");
  embed->add_option("--dim", st.dim);
  embed->add_option("--rho", rho, "Weight of the structural part");
  embed->add_option("--steps", st.steps);
  embed->add_option("--seed", st.seed);
  embed->add_option("--lr", st.lr);
  embed->add_option("--margin", st.margin);
  embed->add_option("--features", features_path, "Text features (.hcf or .json); omitted means structural only");
  embed->add_flag("--fallback", fallback, "Use the structural vector where text is missing");
  embed->add_option("--out", embed_out, "Fused embeddings (feature file)")->required();
  embed->add_option("--struct-out", struct_out, "Structural embedding file (default: <out>.struct)");

  // train
  ModelConfig model;
  TrainConfig tc;
  HierarchyConfig hc;
  std::string emb_path, train_out, linkage = "average";
  auto* train = app.add_subcommand("train", "Build the hierarchy tree and train the quantizer");
  train->add_option("--embeddings", emb_path, "Fused embeddings (feature file)")->required();
  train->add_option("--out", train_out, "Run directory for checkpoints, entropy.csv and tree.json")->required();
  train->add_option("--hidden", model.hidden, "Encoder hidden widths")->delimiter(',');
  train->add_option("--levels", model.levels, "Code levels m");
  train->add_option("--codebook-size", model.codebook_size, "Codes per level K");
  train->add_option("--recon", model.recon_count, "Reconstruction queries L");
  train->add_option("--decoder-layers", model.decoder_layers);
  train->add_option("--decoder-heads", model.decoder_heads);
  train->add_option("--ffn-mult", model.ffn_mult);
  train->add_option("--steps", tc.steps);
  train->add_option("--batch-size", tc.batch_size, "0 = all entities");
  train->add_option("--lr", tc.lr);
  train->add_option("--seed", tc.seed);
  train->add_option("--alpha", tc.alpha, "Commitment weight");
  train->add_option("--tau", tc.gse.tau);
  train->add_option("--lambda1", tc.gse.lambda1);
  train->add_option("--lambda2", tc.gse.lambda2);
  train->add_option("--n-max", tc.gse.n_max, "Neighbor centroids per entity");
  train->add_option("--use-l1", tc.gse.use_l1);
  train->add_option("--use-l2", tc.gse.use_l2);
  train->add_flag("--exclude-self-l2", tc.gse.exclude_self_l2);
  train->add_option("--use-gsr", tc.use_gsr);
  train->add_option("--lambda-s", tc.lambda_s);
  train->add_option("--lambda-h", tc.lambda_h);
  train->add_flag("--prose-indexing", tc.prose_indexing);
  train->add_option("--dead-reset", tc.dead_reset);
  train->add_option("--kmeans-iters", tc.kmeans_iters);
  train->add_option("--eval-every", tc.eval_every);
  train->add_option("--linkage", linkage, "average | complete | ward");
  train->add_option("--tree-levels", hc.levels, "Tree levels including the root");
  train->add_option("--leaf-count", hc.leaf_count, "Clusters at the deepest tree level");

  // encode / graph / quality / rerank
  std::string ckpt_path, out_path, tree_path, labels_path, split = "test", ks = "1,3,10", json_out;
  auto* encode = app.add_subcommand("encode", "Write entity code tokens");
  encode->add_option("--checkpoint", ckpt_path)->required();
  encode->add_option("--embeddings", emb_path)->required();
  encode->add_option("--data", data_dir, "Dataset directory (entity names)")->required();
  encode->add_option("--out", out_path, "codes.txt")->required();

  auto* graph = app.add_subcommand("graph", "Export the code layer graph");
  graph->add_option("--checkpoint", ckpt_path)->required();
  graph->add_option("--embeddings", emb_path)->required();
  graph->add_option("--out", out_path, "DOT file")->required();
  graph->add_option("--json", json_out, "Also write the graph as JSON");

  auto* quality = app.add_subcommand("quality", "Code agreement with the tree and planted labels");
  quality->add_option("--checkpoint", ckpt_path)->required();
  quality->add_option("--embeddings", emb_path)->required();
  quality->add_option("--tree", tree_path, "tree.json from train")->required();
  quality->add_option("--data", data_dir, "Dataset directory (needed with --labels)");
  quality->add_option("--labels", labels_path, "labels.json");

  auto* rerank = app.add_subcommand("rerank", "Filtered tail ranking with reconstructed embeddings");
  rerank->add_option("--checkpoint", ckpt_path)->required();
  rerank->add_option("--embeddings", emb_path)->required();
  rerank->add_option("--data", data_dir)->required();
  rerank->add_option("--struct", struct_out, "Structural embedding file from embed")->required();
  rerank->add_option("--split", split, "train | valid | test");
  rerank->add_option("--k", ks, "Comma-separated Hits@k cutoffs");

  CLI11_PARSE(app, argc, argv);

  try {
    if (synth->parsed()) {
      const SynthKg kg = synth_hier_kg(sc);
      save_triples(kg.dataset, synth_out);
      save_features(FeatureTable::from_rows(kg.features), (fs::path(synth_out) / "features.hcf").string());
      io::write_text((fs::path(synth_out) / "labels.json").string(), kg.labels_json().dump() + "\n");
      std::cout << stats(kg.dataset).to_json().dump(2) << "\n";
    } else if (stats_cmd->parsed()) {
      const KgDataset ds = load_triples(data_dir);
      for (const auto& w : ds.warnings) std::cerr << "warning: " << w << "\n";
      std::cout << stats(ds).to_json().dump(2) << "\n";
    } else if (embed->parsed()) {
      const KgDataset ds = load_triples(data_dir);
      st.backbone = parse_backbone(backbone);
      const auto res = train_struct(ds, st);
      std::cerr << "structural loss " << res.loss_trace.front() << " -> " << res.loss_trace.back() << "\n";
      FeatureTable out;
      if (features_path.empty()) {
        out.vectors = res.embedding.entities;
        out.present.assign(ds.num_entities(), 1);
      } else {
        const FeatureTable text = fs::path(features_path).extension() == ".json"
                                      ? features_from_json(nlohmann::json::parse(io::read_text(features_path)), ds)
                                      : load_features(features_path);
        const auto fused = fuse(res.embedding, text, {rho, fallback});
        out.vectors = fused.vectors;
        out.present.assign(ds.num_entities(), 1);
      }
      save_features(out, embed_out);
      save_struct(res.embedding, struct_out.empty() ? embed_out + ".struct" : struct_out);
    } else if (train->parsed()) {
      const Tensor emb = load_embeddings(emb_path);
      model.dim = emb.dim(1);
      hc.linkage = parse_linkage(linkage);
      tc.checkpoint_dir = train_out;
      const HierarchyTree tree = build_tree(emb, hc);
      fs::create_directories(train_out);
      io::write_text((fs::path(train_out) / "tree.json").string(), tree_to_json(tree).dump() + "\n");
      Trainer trainer(model, tc, emb, tree);
      for (const auto& w : trainer.warnings()) std::cerr << "warning: " << w << "\n";
      const RunResult res = trainer.run();
      std::cout << res.log.to_csv();
      std::cerr << "selected step " << res.selected.step << " (Y = " << res.selected.entropy << ")\n";
    } else if (encode->parsed()) {
      const KgDataset ds = load_triples(data_dir);
      const Tensor emb = load_embeddings(emb_path);
      check_rows(ds, emb);
      const Checkpoint cp = load_checkpoint(ckpt_path);
      io::write_text(out_path, export_codes(codes_for(cp, emb), ds.entities, cp.model.codebook_size).to_text());
    } else if (graph->parsed()) {
      const Checkpoint cp = load_checkpoint(ckpt_path);
      const LayerGraph g = export_layer_graph(codes_for(cp, load_embeddings(emb_path)), cp.model.codebook_size);
      io::write_text(out_path, g.to_dot());
      if (!json_out.empty()) io::write_text(json_out, g.to_json().dump(2) + "\n");
    } else if (quality->parsed()) {
      const Checkpoint cp = load_checkpoint(ckpt_path);
      const Tensor emb = load_embeddings(emb_path);
      const HierarchyTree tree = tree_from_json(nlohmann::json::parse(io::read_text(tree_path)));
      std::optional<PlantedLabels> planted;
      if (!labels_path.empty()) {
        if (data_dir.empty()) fail<Error>("--labels needs --data for entity names");
        const KgDataset ds = load_triples(data_dir);
        check_rows(ds, emb);
        planted = PlantedLabels::from_json(nlohmann::json::parse(io::read_text(labels_path)), ds.entities);
      }
      std::cout << code_quality(codes_for(cp, emb), cp.model.codebook_size, tree, planted).to_json().dump(2) << "\n";
    } else if (rerank->parsed()) {
      const KgDataset ds = load_triples(data_dir);
      const Tensor emb = load_embeddings(emb_path);
      check_rows(ds, emb);
      const Checkpoint cp = load_checkpoint(ckpt_path);
      const StructEmbedding se = load_struct(struct_out);
      const Tensor recon = reconstruct_entities(cp.params, cp.model, codes_for(cp, emb));
      const Split sp = parse_split(split);
      const auto k = parse_ks(ks);
      nlohmann::json j = {{"reconstructed", rerank_eval(ds, se, recon, sp, k).to_json()},
                          {"backbone", backbone_eval(ds, se, sp, k).to_json()},
                          {"random_mrr", random_mrr(ds, sp)}};
      std::cout << j.dump(2) << "\n";
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
