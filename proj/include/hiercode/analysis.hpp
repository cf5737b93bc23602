#pragma once

// Code exports and diagnostics: token strings, the level-to-level code graph,
// clustering agreement metrics, and filtered link-prediction ranking.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <iterator>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <tuple>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "hiercode/error.hpp"
#include "hiercode/hierarchy.hpp"
#include "hiercode/kg_data.hpp"
#include "hiercode/struct_embedding.hpp"
#include "hiercode/tensor.hpp"

namespace hiercode {

using CodeTable = std::vector<std::vector<std::size_t>>;  // [level][entity]

// ---------------------------------------------------------------------------
// Tokens

// Bijective base-26 over a..z: 1 -> "a", 26 -> "z", 27 -> "aa".
inline std::string bijective26(std::uint64_t n) {
  require(n >= 1, "bijective26: value must be >= 1");
  std::string s;
  while (n > 0) {
    --n;
    s.push_back(static_cast<char>('a' + n % 26));
    n /= 26;
  }
  std::reverse(s.begin(), s.end());
  return s;
}

inline std::uint64_t parse_bijective26(std::string_view s) {
  if (s.empty()) fail<Error>("empty base-26 string");
  std::uint64_t n = 0;
  for (char c : s) {
    if (c < 'a' || c > 'z') fail<Error>("invalid base-26 digit '", c, "' in '", s, "'");
    n = n * 26 + static_cast<std::uint64_t>(c - 'a' + 1);
  }
  return n;
}

inline std::string code_token(std::size_t level, std::size_t index, std::size_t k) {
  if (index >= k) fail<Error>("code index ", index, " out of range for codebook size ", k);
  return "<#" + bijective26(static_cast<std::uint64_t>(level) * k + index + 1) + ">";
}

struct TokenCode {
  std::size_t level = 0;
  std::size_t index = 0;
  friend bool operator==(const TokenCode&, const TokenCode&) = default;
};

inline TokenCode parse_code_token(std::string_view tok, std::size_t k) {
  if (tok.size() < 4 || tok.substr(0, 2) != "<#" || tok.back() != '>') fail<Error>("malformed code token '", tok, "'");
  const std::uint64_t v = parse_bijective26(tok.substr(2, tok.size() - 3)) - 1;
  return {static_cast<std::size_t>(v / k), static_cast<std::size_t>(v % k)};
}

struct TokenCodeFile {
  std::vector<std::pair<std::string, std::vector<std::string>>> entries;

  std::string to_text() const {
    std::string out;
    for (const auto& [name, toks] : entries) {
      out += name;
      out += '\t';
      for (const auto& t : toks) out += t;
      out += '\n';
    }
    return out;
  }

  static TokenCodeFile parse(const std::string& text) {
    TokenCodeFile f;
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (line.empty()) continue;
      const auto tab = line.find('\t');
      if (tab == std::string::npos) fail<IoError>("codes line ", lineno, ": missing tab");
      std::vector<std::string> toks;
      for (std::size_t p = tab + 1; p < line.size();) {
        const auto close = line.find('>', p);
        if (line.compare(p, 2, "<#") != 0 || close == std::string::npos)
          fail<IoError>("codes line ", lineno, ": malformed token at column ", p + 1);
        toks.push_back(line.substr(p, close - p + 1));
        p = close + 1;
      }
      f.entries.emplace_back(line.substr(0, tab), std::move(toks));
    }
    return f;
  }
};

inline TokenCodeFile export_codes(const CodeTable& codes, const Vocabulary& entities, std::size_t k) {
  const std::size_t n = entities.size();
  for (std::size_t l = 0; l < codes.size(); ++l)
    if (codes[l].size() < n) fail<Error>("export_codes: no level-", l, " code for entity '", entities.name(static_cast<std::uint32_t>(codes[l].size())), "'");
  TokenCodeFile f;
  for (std::size_t e = 0; e < n; ++e) {
    std::vector<std::string> toks;
    for (std::size_t l = 0; l < codes.size(); ++l) toks.push_back(code_token(l, codes[l][e], k));
    f.entries.emplace_back(entities.name(static_cast<std::uint32_t>(e)), std::move(toks));
  }
  return f;
}

// ---------------------------------------------------------------------------
// Layer graph

struct LayerGraph {
  std::size_t levels = 0;
  std::size_t codebook_size = 0;
  std::size_t entities = 0;
  std::map<std::pair<std::size_t, std::size_t>, std::uint64_t> degree;  // (level, code) -> usage
  std::map<std::tuple<std::size_t, std::size_t, std::size_t>, std::uint64_t> edges;  // (level, from, to) -> weight

  nlohmann::json to_json() const {
    nlohmann::json nodes = nlohmann::json::array(), links = nlohmann::json::array();
    for (const auto& [key, d] : degree) nodes.push_back({{"level", key.first}, {"code", key.second}, {"degree", d}});
    for (const auto& [key, w] : edges)
      links.push_back({{"level", std::get<0>(key)}, {"from", std::get<1>(key)}, {"to", std::get<2>(key)}, {"weight", w}});
    return {{"levels", levels}, {"codebook_size", codebook_size}, {"entities", entities}, {"nodes", nodes}, {"edges", links}};
  }

  std::string to_dot() const {
    static constexpr const char* palette[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728",
                                              "#9467bd", "#8c564b", "#e377c2", "#17becf"};
    std::ostringstream os;
    os << "digraph codes {\n  rankdir=LR;\n  node [shape=circle, style=filled, fontcolor=white];\n";
    for (std::size_t l = 0; l < levels; ++l) {
      os << "  subgraph level" << l << " {\n    rank=same;\n";
      for (const auto& [key, d] : degree)
        if (key.first == l)
          os << "    L" << l << "_" << key.second << " [label=\"" << key.second << "\", fillcolor=\""
             << palette[l % std::size(palette)] << "\", width=" << 0.3 + 0.05 * std::sqrt(static_cast<double>(d))
             << ", tooltip=\"level " << l << ", usage " << d << "\"];\n";
      os << "  }\n";
    }
    for (const auto& [key, w] : edges)
      os << "  L" << std::get<0>(key) << "_" << std::get<1>(key) << " -> L" << std::get<0>(key) + 1 << "_"
         << std::get<2>(key) << " [weight=" << w << ", penwidth=" << 0.5 + std::log1p(static_cast<double>(w)) << "];\n";
    os << "}\n";
    return os.str();
  }
};

inline LayerGraph export_layer_graph(const CodeTable& codes, std::size_t k) {
  LayerGraph g;
  g.levels = codes.size();
  g.codebook_size = k;
  g.entities = codes.empty() ? 0 : codes[0].size();
  for (std::size_t l = 0; l < codes.size(); ++l) {
    if (codes[l].size() != g.entities) fail<ShapeError>("export_layer_graph: ragged code table at level ", l);
    for (std::size_t e = 0; e < g.entities; ++e) {
      ++g.degree[{l, codes[l][e]}];
      if (l + 1 < codes.size()) ++g.edges[{l, codes[l][e], codes[l + 1][e]}];
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// Agreement metrics

// Natural-log mutual information normalized by the arithmetic mean of the two
// entropies. Two single-cluster partitions count as identical (1).
inline double nmi(const std::vector<std::size_t>& a, const std::vector<std::size_t>& b) {
  if (a.size() != b.size()) fail<ShapeError>("nmi: label vectors of length ", a.size(), " and ", b.size());
  if (a.empty()) fail<Error>("nmi: empty labelling");
  const double n = static_cast<double>(a.size());
  std::map<std::size_t, double> ca, cb;
  std::map<std::pair<std::size_t, std::size_t>, double> joint;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ca[a[i]] += 1.0;
    cb[b[i]] += 1.0;
    joint[{a[i], b[i]}] += 1.0;
  }
  auto entropy = [&](const std::map<std::size_t, double>& c) {
    double h = 0.0;
    for (const auto& [_, x] : c) h -= (x / n) * std::log(x / n);
    return h;
  };
  const double ha = entropy(ca), hb = entropy(cb);
  if (ca.size() == 1 && cb.size() == 1) return 1.0;
  double mi = 0.0;
  for (const auto& [key, x] : joint) mi += (x / n) * std::log(n * x / (ca[key.first] * cb[key.second]));
  const double denom = 0.5 * (ha + hb);
  return denom > 0.0 ? std::clamp(mi / denom, 0.0, 1.0) : 0.0;
}

// Among entity pairs sharing `coarse`, the fraction that also share `group`.
// With no such pairs the value is 1.
inline double prefix_purity(const std::vector<std::size_t>& coarse, const std::vector<std::size_t>& group) {
  if (coarse.size() != group.size()) fail<ShapeError>("prefix_purity: label vectors differ in length");
  std::map<std::size_t, double> by_code;
  std::map<std::pair<std::size_t, std::size_t>, double> by_both;
  for (std::size_t i = 0; i < coarse.size(); ++i) {
    by_code[coarse[i]] += 1.0;
    by_both[{coarse[i], group[i]}] += 1.0;
  }
  double pairs = 0.0, agree = 0.0;
  for (const auto& [_, c] : by_code) pairs += c * (c - 1.0) / 2.0;
  for (const auto& [_, c] : by_both) agree += c * (c - 1.0) / 2.0;
  return pairs > 0.0 ? agree / pairs : 1.0;
}

struct PlantedLabels {
  std::vector<std::size_t> super;
  std::vector<std::size_t> sub;

  // {"entities": [...], "super": [...], "sub": [...]}, reordered onto `entities`.
  static PlantedLabels from_json(const nlohmann::json& j, const Vocabulary& entities) {
    const auto names = j.at("entities").get<std::vector<std::string>>();
    const auto sup = j.at("super").get<std::vector<std::size_t>>();
    const auto sub = j.at("sub").get<std::vector<std::size_t>>();
    if (sup.size() != names.size() || sub.size() != names.size()) fail<IoError>("labels: list lengths differ");
    PlantedLabels p;
    p.super.assign(entities.size(), 0);
    p.sub.assign(entities.size(), 0);
    std::vector<unsigned char> seen(entities.size(), 0);
    for (std::size_t i = 0; i < names.size(); ++i) {
      if (!entities.contains(names[i])) continue;
      const auto id = entities.id(names[i]);
      p.super[id] = sup[i];
      p.sub[id] = sub[i];
      seen[id] = 1;
    }
    for (std::size_t e = 0; e < seen.size(); ++e)
      if (!seen[e]) fail<IoError>("labels: no label for entity '", entities.name(static_cast<std::uint32_t>(e)), "'");
    return p;
  }
};

struct QualityReport {
  double nmi_first_vs_coarse = 0.0;  // level-0 codes vs the first cut below the root
  double nmi_last_vs_leaf = 0.0;     // last-level codes vs the leaf cut
  double prefix_purity = 0.0;
  std::vector<double> utilization;
  std::vector<double> nmi_super;  // per level, when planted labels are given
  std::vector<double> nmi_sub;

  nlohmann::json to_json() const {
    nlohmann::json j = {{"nmi_level0_vs_tree_level1", nmi_first_vs_coarse},
                        {"nmi_last_vs_tree_leaf", nmi_last_vs_leaf},
                        {"prefix_purity", prefix_purity},
                        {"utilization", utilization}};
    if (!nmi_super.empty()) {
      j["nmi_super"] = nmi_super;
      j["nmi_sub"] = nmi_sub;
    }
    return j;
  }
};

inline QualityReport code_quality(const CodeTable& codes, std::size_t k, const HierarchyTree& tree,
                                  const std::optional<PlantedLabels>& planted = std::nullopt) {
  if (codes.empty()) fail<Error>("code_quality: no code levels");
  const std::size_t coarse_level = std::min<std::size_t>(1, tree.num_levels() - 1);
  const auto coarse = tree.level_labels(coarse_level);
  const auto leaf = tree.level_labels(tree.num_levels() - 1);
  QualityReport r;
  r.nmi_first_vs_coarse = nmi(codes.front(), coarse);
  r.nmi_last_vs_leaf = nmi(codes.back(), leaf);
  r.prefix_purity = prefix_purity(codes.front(), coarse);
  for (const auto& lv : codes) {
    std::set<std::size_t> used(lv.begin(), lv.end());
    r.utilization.push_back(static_cast<double>(used.size()) / static_cast<double>(k));
  }
  if (planted) {
    for (const auto& lv : codes) {
      r.nmi_super.push_back(nmi(lv, planted->super));
      r.nmi_sub.push_back(nmi(lv, planted->sub));
    }
  }
  return r;
}

// ---------------------------------------------------------------------------
// Filtered ranking

struct RankingMetrics {
  double mrr = 0.0;
  std::map<std::size_t, double> hits;
  std::size_t queries = 0;

  nlohmann::json to_json() const {
    nlohmann::json h = nlohmann::json::object();
    for (const auto& [k, v] : hits) h[std::to_string(k)] = v;
    return {{"mrr", mrr}, {"hits", h}, {"queries", queries}};
  }
};

using TripleScorer = std::function<double(EntityId, RelationId, EntityId)>;

namespace detail {

inline std::map<std::pair<EntityId, RelationId>, std::set<EntityId>> known_tails(const KgDataset& ds) {
  std::map<std::pair<EntityId, RelationId>, std::set<EntityId>> out;
  for (const auto* split : {&ds.train, &ds.valid, &ds.test})
    for (const auto& t : *split) out[{t.head, t.relation}].insert(t.tail);
  return out;
}

}  // namespace detail

// Tail prediction for every triple of `split`: candidates are all entities,
// other known true tails are removed, and the rank counts half of any ties.
inline std::vector<double> tail_ranks(const KgDataset& ds, Split split, const TripleScorer& scorer) {
  const auto known = detail::known_tails(ds);
  const auto n = static_cast<EntityId>(ds.num_entities());
  std::vector<double> ranks;
  for (const auto& q : ds.split(split)) {
    const auto& filt = known.at({q.head, q.relation});
    const double target = scorer(q.head, q.relation, q.tail);
    double greater = 0.0, ties = 0.0;
    for (EntityId c = 0; c < n; ++c) {
      if (c == q.tail || filt.count(c)) continue;
      const double s = scorer(q.head, q.relation, c);
      if (s > target) greater += 1.0;
      else if (s == target) ties += 1.0;
    }
    ranks.push_back(1.0 + greater + 0.5 * ties);
  }
  return ranks;
}

inline RankingMetrics metrics_from_ranks(const std::vector<double>& ranks, const std::vector<std::size_t>& ks) {
  RankingMetrics m;
  m.queries = ranks.size();
  for (auto k : ks) m.hits[k] = 0.0;
  if (ranks.empty()) return m;
  for (double r : ranks) {
    m.mrr += 1.0 / r;
    for (auto k : ks)
      if (r <= static_cast<double>(k)) m.hits[k] += 1.0;
  }
  const double n = static_cast<double>(ranks.size());
  m.mrr /= n;
  for (auto& [_, h] : m.hits) h /= n;
  return m;
}

inline RankingMetrics rank_eval(const KgDataset& ds, Split split, const TripleScorer& scorer,
                                const std::vector<std::size_t>& ks) {
  return metrics_from_ranks(tail_ranks(ds, split, scorer), ks);
}

// The structural backbone's own filtered metrics.
inline RankingMetrics backbone_eval(const KgDataset& ds, const StructEmbedding& emb, Split split,
                                    const std::vector<std::size_t>& ks) {
  return rank_eval(ds, split, [&](EntityId h, RelationId r, EntityId t) { return emb.score(h, r, t); }, ks);
}

// Filtered metrics with the backbone scorer applied to reconstructed entity
// vectors (one row per entity) and the backbone's relation table.
inline RankingMetrics rerank_eval(const KgDataset& ds, const StructEmbedding& emb, const Tensor& reconstructed,
                                  Split split, const std::vector<std::size_t>& ks) {
  if (reconstructed.rank() != 2 || reconstructed.dim(0) != ds.num_entities() || reconstructed.dim(1) != emb.dim())
    fail<ShapeError>("rerank_eval: reconstructed table ", shape_str(reconstructed.shape), " does not match [",
                     ds.num_entities(), ",", emb.dim(), "]");
  return rank_eval(
      ds, split,
      [&](EntityId h, RelationId r, EntityId t) {
        return score(emb.backbone, reconstructed.row(h), emb.relations.row(r), reconstructed.row(t));
      },
      ks);
}

// Expected MRR of a uniformly random ranking: a query with n candidates left
// after filtering contributes H(n) / n.
inline double random_mrr(const KgDataset& ds, Split split) {
  const auto known = detail::known_tails(ds);
  const auto& queries = ds.split(split);
  if (queries.empty()) return 0.0;
  double total = 0.0;
  for (const auto& q : queries) {
    const std::size_t filtered = known.at({q.head, q.relation}).size() - 1;
    const std::size_t n = ds.num_entities() - filtered;
    double h = 0.0;
    for (std::size_t i = 1; i <= n; ++i) h += 1.0 / static_cast<double>(i);
    total += h / static_cast<double>(n);
  }
  return total / static_cast<double>(queries.size());
}

}  // namespace hiercode
