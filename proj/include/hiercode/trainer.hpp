#pragma once

// Joint optimization of L_Q + L_GSE + L_GSR with codebook-entropy tracking and
// max-entropy checkpoint selection.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <iomanip>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "hiercode/autodiff.hpp"
#include "hiercode/checkpoint.hpp"
#include "hiercode/error.hpp"
#include "hiercode/gse.hpp"
#include "hiercode/gsr.hpp"
#include "hiercode/hierarchy.hpp"
#include "hiercode/model.hpp"
#include "hiercode/rq.hpp"
#include "hiercode/tensor.hpp"

namespace hiercode {

struct TrainConfig {
  std::size_t steps = 300;
  std::size_t batch_size = 0;  // 0 means every entity in one batch
  double lr = 1e-3;
  std::uint64_t seed = 0;
  double alpha = 0.25;
  GseConfig gse;
  bool use_gsr = true;
  double lambda_s = 0.05;
  double lambda_h = 1.0;
  bool prose_indexing = false;
  bool dead_reset = true;
  double reset_noise = 1e-3;
  std::size_t kmeans_iters = 10;
  std::size_t eval_every = 50;
  std::string checkpoint_dir;  // empty keeps checkpoints in memory only
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;

  void validate(std::size_t num_entities) const {
    require(steps >= 1, "train.steps must be >= 1");
    require(lr > 0.0, "train.lr must be > 0, got ", lr);
    require(batch_size <= num_entities, "train.batch_size ", batch_size, " exceeds entity count ", num_entities);
    require(eval_every >= 1, "train.eval_every must be >= 1");
    require(alpha >= 0.0, "train.alpha must be >= 0");
    require(lambda_s >= 0.0 && lambda_h >= 0.0, "GSR weights must be >= 0");
    require(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0 && adam_eps > 0.0, "invalid Adam constants");
    gse.validate();
  }

  std::vector<std::string> warnings() const {
    std::vector<std::string> w;
    if (use_gsr && lambda_s >= lambda_h) {
      std::ostringstream os;
      os << "lambda_s (" << lambda_s << ") is not smaller than lambda_h (" << lambda_h
         << "); the leaf target is already covered by the alignment loss";
      w.push_back(os.str());
    }
    return w;
  }
};

// ---------------------------------------------------------------------------
// Entropy

struct EntropyReport {
  std::vector<double> per_level;
  double mean = 0.0;  // Y
  std::vector<double> utilization;
};

// Natural-log Shannon entropy of each level's usage frequencies, and their mean.
// Equal counts are grouped so that k equally used codes give exactly log k.
inline EntropyReport codebook_entropy(const UsageCounts& usage) {
  if (usage.counts.empty()) fail<Error>("codebook_entropy: no levels");
  EntropyReport rep;
  for (std::size_t l = 0; l < usage.counts.size(); ++l) {
    const auto& lv = usage.counts[l];
    std::vector<std::uint64_t> nz;
    for (auto c : lv)
      if (c > 0) nz.push_back(c);
    if (nz.empty()) fail<Error>("codebook_entropy: level ", l, " has no assignments");
    const double total = static_cast<double>(std::accumulate(nz.begin(), nz.end(), std::uint64_t{0}));
    std::sort(nz.begin(), nz.end());
    double h = 0.0;
    for (std::size_t i = 0; i < nz.size();) {
      std::size_t j = i;
      while (j < nz.size() && nz[j] == nz[i]) ++j;
      const double c = static_cast<double>(nz[i]);
      h += (static_cast<double>(j - i) * c / total) * std::log(total / c);
      i = j;
    }
    rep.per_level.push_back(h);
    rep.utilization.push_back(static_cast<double>(nz.size()) / static_cast<double>(lv.size()));
  }
  const double first = rep.per_level.front();
  double drift = 0.0;
  for (double h : rep.per_level) drift += h - first;
  rep.mean = first + drift / static_cast<double>(rep.per_level.size());
  return rep;
}

struct EntropyEntry {
  std::uint64_t step = 0;
  std::vector<double> per_level;
  double mean = 0.0;
  std::vector<double> utilization;
};

struct EntropyLog {
  std::vector<EntropyEntry> entries;

  void add(std::uint64_t step, const EntropyReport& r) { entries.push_back({step, r.per_level, r.mean, r.utilization}); }

  std::string to_csv() const {
    std::ostringstream os;
    os << std::setprecision(17);
    const std::size_t m = entries.empty() ? 0 : entries.front().per_level.size();
    os << "step";
    for (std::size_t l = 0; l < m; ++l) os << ",H" << l;
    os << ",Y";
    for (std::size_t l = 0; l < m; ++l) os << ",util" << l;
    os << '\n';
    for (const auto& e : entries) {
      os << e.step;
      for (double h : e.per_level) os << ',' << h;
      os << ',' << e.mean;
      for (double u : e.utilization) os << ',' << u;
      os << '\n';
    }
    return os.str();
  }
};

// Index of the entry with the highest Y; the later step wins ties.
inline std::size_t select_entry(const EntropyLog& log) {
  if (log.entries.empty()) fail<Error>("select_checkpoint: empty entropy log");
  std::size_t best = 0;
  for (std::size_t i = 1; i < log.entries.size(); ++i) {
    const auto& a = log.entries[i];
    const auto& b = log.entries[best];
    if (a.mean > b.mean || (a.mean == b.mean && a.step > b.step)) best = i;
  }
  return best;
}

inline const Checkpoint& select_checkpoint(const EntropyLog& log, const std::vector<Checkpoint>& checkpoints) {
  if (checkpoints.empty()) fail<Error>("select_checkpoint: no checkpoints");
  const std::uint64_t step = log.entries.at(select_entry(log)).step;
  for (const auto& c : checkpoints)
    if (c.step == step) return c;
  fail<Error>("select_checkpoint: no checkpoint recorded for step ", step);
}

// Steps (after that many updates) at which entropy is evaluated and a
// checkpoint taken: anchored on the final step, stepping back by eval_every.
inline std::vector<std::uint64_t> eval_schedule(std::size_t steps, std::size_t eval_every) {
  require(eval_every >= 1, "eval_every must be >= 1");
  std::vector<std::uint64_t> out;
  for (std::size_t back = 0; back <= steps; back += eval_every) out.push_back(steps - back);
  std::reverse(out.begin(), out.end());
  return out;
}

// ---------------------------------------------------------------------------
// Objective

// Per-row targets for one batch: the fused embeddings s, each entity's own
// leaf centroid, its sibling centroids, and the GSR ancestor targets [B, A, d].
struct BatchTargets {
  Tensor s;
  Tensor centroids;
  std::vector<std::vector<std::vector<double>>> neighbors;
  Tensor ancestors;
};

struct ObjectiveNodes {
  QuantizerNodes q;
  ad::Var l_q;
  std::optional<GseNodes> gse;
  std::optional<ad::Var> gsr;
  ad::Var total;
};

// L_Q + L_GSE + L_GSR for a batch whose codes are already fixed. Parameters are
// graph inputs named as in the parameter set.
inline ObjectiveNodes build_objective(ad::Graph& g, const ModelConfig& model, const TrainConfig& cfg,
                                      const BatchTargets& t, const std::vector<std::vector<std::size_t>>& codes) {
  const std::size_t b = t.s.dim(0);
  ObjectiveNodes o;
  const ad::Var z = build_encoder(g, g.constant(t.s), model.encoder());
  std::vector<ad::Var> books;
  for (std::size_t l = 0; l < model.levels; ++l) books.push_back(g.input(codebook_name(l)));
  o.q = build_quantizer(g, z, books, codes);
  o.l_q = build_loss_q(g, o.q, cfg.alpha, b);
  if (cfg.gse.use_l1 || cfg.gse.use_l2) o.gse = build_loss_gse(g, o.q.surrogates, t.centroids, t.neighbors, cfg.gse);
  if (cfg.use_gsr) {
    const ad::Var out = build_decode(g, o.q.surrogates, b, model.decoder());
    o.gsr = build_loss_gsr(g, out, t.s, t.ancestors, model.recon_count, {cfg.lambda_s, cfg.lambda_h, cfg.prose_indexing});
  }
  ad::Var total = o.l_q;
  if (o.gse) total = g.add(total, o.gse->total);
  if (o.gsr) total = g.add(total, *o.gsr);
  o.total = g.label(total, "loss_total");
  return o;
}

// ---------------------------------------------------------------------------
// Training

struct LossBreakdown {
  double l_q = 0.0;
  double l1 = 0.0;
  double l2 = 0.0;
  double gsr = 0.0;
  double total = 0.0;
};

struct RunResult {
  ParamSet final_params;
  EntropyLog log;
  std::vector<Checkpoint> checkpoints;
  Checkpoint selected;
  std::vector<LossBreakdown> losses;  // one per step
};

class Trainer {
 public:
  Trainer(ModelConfig model, TrainConfig cfg, Tensor embeddings, const HierarchyTree& tree)
      : model_(std::move(model)), cfg_(std::move(cfg)), embeddings_(std::move(embeddings)), rng_(cfg_.seed) {
    model_.validate();
    if (embeddings_.rank() != 2 || embeddings_.dim(1) != model_.dim)
      fail<ShapeError>("trainer: embeddings ", shape_str(embeddings_.shape), " do not match model dim ", model_.dim);
    const std::size_t n = embeddings_.dim(0);
    cfg_.validate(n);
    if (tree.num_entities() != n) fail<Error>("trainer: tree covers ", tree.num_entities(), " entities, expected ", n);

    const std::size_t targets = cfg_.prose_indexing ? model_.recon_count + 1 : model_.recon_count;
    for (std::size_t e = 0; e < n; ++e) {
      own_centroid_.push_back(tree.nodes[tree.leaf_of[e]].centroid);
      if (own_centroid_.back().size() != model_.dim)
        fail<ShapeError>("trainer: tree centroids have dimension ", own_centroid_.back().size(), ", model dim is ", model_.dim);
      neighbors_.push_back(neighbor_set(tree, e, cfg_.gse.n_max));
      ancestors_.push_back(targets == 0 ? std::vector<std::vector<double>>{} : ancestors(tree, e, targets));
    }

    init_encoder(params_, model_.encoder(), rng_);
    const Tensor z = encode(embeddings_, params_, model_.encoder());
    init_codebooks(z, model_.levels, model_.codebook_size, cfg_.kmeans_iters, rng_).store(params_);
    init_decoder(params_, model_.decoder(), rng_);
    epoch_usage_ = UsageCounts(model_.levels, model_.codebook_size);
  }

  const ModelConfig& model() const { return model_; }
  const TrainConfig& config() const { return cfg_; }
  const ParamSet& params() const { return params_; }
  ParamSet& params() { return params_; }
  std::uint64_t step() const { return step_; }
  std::vector<std::string> warnings() const { return cfg_.warnings(); }

  struct StepGradients {
    LossBreakdown loss;
    ad::Gradients grads;
  };

  // Losses and gradients for a batch without touching any state.
  StepGradients gradients(const std::vector<std::size_t>& batch) const {
    Forward f = forward(batch);
    return {f.loss, ad::backward(f.g, f.ev)};
  }

  LossBreakdown train_step(const std::vector<std::size_t>& batch) {
    Forward f = forward(batch);
    const ad::Gradients grads = ad::backward(f.g, f.ev);
    ++step_;
    adam_update(grads);
    epoch_usage_.record(f.codes);
    if (end_of_epoch(batch.size())) {
      if (cfg_.dead_reset) reset_dead_codes(f);
      epoch_usage_.clear();
    }
    return f.loss;
  }

  std::vector<std::vector<std::size_t>> codes() const { return encode_codes(params_, model_, embeddings_); }

  EntropyReport evaluate() const {
    UsageCounts usage(model_.levels, model_.codebook_size);
    usage.record(codes());
    return codebook_entropy(usage);
  }

  Checkpoint snapshot(double entropy) const { return {step_, entropy, model_, params_}; }

  // Next batch of entity ids under the configured batching.
  std::vector<std::size_t> next_batch() {
    const std::size_t n = embeddings_.dim(0);
    if (cfg_.batch_size == 0 || cfg_.batch_size >= n) {
      std::vector<std::size_t> all(n);
      std::iota(all.begin(), all.end(), std::size_t{0});
      return all;
    }
    if (cursor_ >= order_.size()) {
      order_.resize(n);
      std::iota(order_.begin(), order_.end(), std::size_t{0});
      std::shuffle(order_.begin(), order_.end(), rng_);
      cursor_ = 0;
    }
    const std::size_t len = std::min(cfg_.batch_size, order_.size() - cursor_);
    std::vector<std::size_t> b(order_.begin() + static_cast<std::ptrdiff_t>(cursor_),
                               order_.begin() + static_cast<std::ptrdiff_t>(cursor_ + len));
    cursor_ += len;
    return b;
  }

  RunResult run() {
    RunResult out;
    const auto schedule = eval_schedule(cfg_.steps, cfg_.eval_every);
    std::size_t next_eval = 0;
    std::size_t written = 0;
    if (!cfg_.checkpoint_dir.empty()) std::filesystem::create_directories(cfg_.checkpoint_dir);
    for (std::size_t s = 0;; ++s) {
      if (next_eval < schedule.size() && schedule[next_eval] == s) {
        ++next_eval;
        const EntropyReport rep = evaluate();
        out.log.add(s, rep);
        out.checkpoints.push_back(snapshot(rep.mean));
        if (!cfg_.checkpoint_dir.empty()) {
          const std::string path = checkpoint_path(cfg_.checkpoint_dir, s);
          try {
            save_checkpoint(out.checkpoints.back(), path);
          } catch (const IoError& e) {
            fail<IoError>(e.what(), " (partial state: ", written, " checkpoint(s) already written to '",
                          cfg_.checkpoint_dir, "', training stopped after step ", s, ")");
          }
          ++written;
        }
      }
      if (s == cfg_.steps) break;
      out.losses.push_back(train_step(next_batch()));
    }
    out.final_params = params_;
    out.selected = select_checkpoint(out.log, out.checkpoints);
    if (!cfg_.checkpoint_dir.empty()) {
      const std::filesystem::path dir(cfg_.checkpoint_dir);
      io::write_text((dir / "entropy.csv").string(), out.log.to_csv());
      save_checkpoint(out.selected, (dir / "selected.hqk").string());
    }
    return out;
  }

  static std::string checkpoint_path(const std::string& dir, std::uint64_t step) {
    std::ostringstream name;
    name << "step_" << std::setw(6) << std::setfill('0') << step << ".hqk";
    return (std::filesystem::path(dir) / name.str()).string();
  }

 private:
  struct Forward {
    ad::Graph g;
    ad::Evaluation ev;
    LossBreakdown loss;
    std::vector<std::vector<std::size_t>> codes;  // [level][batch row]
    QuantizerNodes q;
  };

  Forward forward(const std::vector<std::size_t>& batch) const {
    if (batch.empty()) fail<Error>("train_step: empty batch");
    const std::size_t b = batch.size(), d = model_.dim, n = embeddings_.dim(0);
    Tensor s(Shape{b, d});
    for (std::size_t i = 0; i < b; ++i) {
      if (batch[i] >= n) fail<Error>("train_step: entity id ", batch[i], " out of range");
      auto src = embeddings_.row(batch[i]);
      std::copy(src.begin(), src.end(), s.row(i).begin());
    }

    Forward f;
    f.codes = assign_codes(encode(s, params_, model_.encoder()), codebooks_of(params_, model_));
    BatchTargets t;
    t.s = std::move(s);
    t.centroids = Tensor(Shape{b, d});
    for (std::size_t i = 0; i < b; ++i) {
      std::copy(own_centroid_[batch[i]].begin(), own_centroid_[batch[i]].end(), t.centroids.row(i).begin());
      t.neighbors.push_back(neighbors_[batch[i]]);
    }
    const std::size_t a = ancestors_.front().size();
    t.ancestors = Tensor(Shape{b, a, d});
    for (std::size_t i = 0; i < b; ++i)
      for (std::size_t k = 0; k < a; ++k)
        std::copy(ancestors_[batch[i]][k].begin(), ancestors_[batch[i]][k].end(),
                  t.ancestors.data.begin() + static_cast<std::ptrdiff_t>((i * a + k) * d));
    ad::Graph& g = f.g;
    const ObjectiveNodes o = build_objective(g, model_, cfg_, t, f.codes);
    f.q = o.q;
    const ad::Var lq = o.l_q;
    const auto& gse = o.gse;
    const auto& gsr = o.gsr;
    const ad::Var total = o.total;

    try {
      f.ev = ad::eval(g, params_, total);
    } catch (const NonFiniteError& e) {
      fail<NonFiniteError>("training step ", step_ + 1, ": ", e.what());
    }
    f.loss.l_q = f.ev.value(lq).item();
    if (gse && gse->has_l1) f.loss.l1 = f.ev.value(gse->l1).item();
    if (gse && gse->has_l2) f.loss.l2 = f.ev.value(gse->l2).item();
    if (gsr) f.loss.gsr = f.ev.value(*gsr).item();
    f.loss.total = f.ev.output().item();
    return f;
  }

  void adam_update(const ad::Gradients& grads) {
    ++adam_t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(adam_t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(adam_t_));
    for (const auto& [name, grad] : grads) {
      Tensor& p = params_.at(name);
      Tensor& m = adam_m_.try_emplace(name, Tensor(p.shape, 0.0)).first->second;
      Tensor& v = adam_v_.try_emplace(name, Tensor(p.shape, 0.0)).first->second;
      for (std::size_t i = 0; i < p.size(); ++i) {
        const double gi = grad.data[i];
        m.data[i] = cfg_.beta1 * m.data[i] + (1.0 - cfg_.beta1) * gi;
        v.data[i] = cfg_.beta2 * v.data[i] + (1.0 - cfg_.beta2) * gi * gi;
        p.data[i] -= cfg_.lr * (m.data[i] / c1) / (std::sqrt(v.data[i] / c2) + cfg_.adam_eps);
      }
      if (!p.all_finite()) fail<NonFiniteError>("training step ", step_, ": parameter '", name, "' became non-finite");
    }
  }

  bool end_of_epoch(std::size_t batch_len) {
    const std::size_t n = embeddings_.dim(0);
    if (cfg_.batch_size == 0 || cfg_.batch_size >= n) return true;
    seen_ += batch_len;
    if (seen_ < n) return false;
    seen_ = 0;
    return true;
  }

  // Codes unused over the epoch are moved onto a random residual of the last
  // batch at their level, plus a little noise; their Adam moments restart.
  void reset_dead_codes(const Forward& f) {
    std::normal_distribution<double> noise(0.0, cfg_.reset_noise);
    for (std::size_t l = 0; l < model_.levels; ++l) {
      const Tensor& residual = f.ev.value(f.q.residuals[l]);
      Tensor& book = params_.at(codebook_name(l));
      std::uniform_int_distribution<std::size_t> pick(0, residual.rows() - 1);
      for (std::size_t k = 0; k < model_.codebook_size; ++k) {
        if (epoch_usage_.counts[l][k] != 0) continue;
        auto src = residual.row(pick(rng_));
        auto dst = book.row(k);
        for (std::size_t j = 0; j < dst.size(); ++j) dst[j] = src[j] + noise(rng_);
        for (auto* moments : {&adam_m_, &adam_v_})
          if (auto it = moments->find(codebook_name(l)); it != moments->end())
            std::fill(it->second.row(k).begin(), it->second.row(k).end(), 0.0);
      }
    }
  }

  ModelConfig model_;
  TrainConfig cfg_;
  Tensor embeddings_;
  std::vector<std::vector<double>> own_centroid_;
  std::vector<std::vector<std::vector<double>>> neighbors_;
  std::vector<std::vector<std::vector<double>>> ancestors_;
  ParamSet params_;
  std::map<std::string, Tensor> adam_m_, adam_v_;
  std::uint64_t adam_t_ = 0;
  std::uint64_t step_ = 0;
  std::mt19937_64 rng_;
  UsageCounts epoch_usage_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
  std::size_t seen_ = 0;
};

}  // namespace hiercode
