#pragma once

// Knowledge-graph triples: loading, saving, statistics, and a planted
// two-level synthetic generator.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "hiercode/error.hpp"

namespace hiercode {

using EntityId = std::uint32_t;
using RelationId = std::uint32_t;

class Vocabulary {
 public:
  Vocabulary() = default;
  explicit Vocabulary(std::vector<std::string> names) {
    for (auto& n : names) add(std::move(n));
  }

  std::uint32_t add(std::string name) {
    auto [it, inserted] = ids_.try_emplace(name, static_cast<std::uint32_t>(names_.size()));
    if (inserted) names_.push_back(std::move(name));
    return it->second;
  }
  bool contains(const std::string& name) const { return ids_.count(name) != 0; }
  std::uint32_t id(const std::string& name) const {
    auto it = ids_.find(name);
    if (it == ids_.end()) fail<Error>("unknown name '", name, "'");
    return it->second;
  }
  const std::string& name(std::uint32_t id) const { return names_.at(id); }
  std::size_t size() const { return names_.size(); }
  const std::vector<std::string>& names() const { return names_; }

  friend bool operator==(const Vocabulary& a, const Vocabulary& b) { return a.names_ == b.names_; }

 private:
  std::vector<std::string> names_;
  std::unordered_map<std::string, std::uint32_t> ids_;
};

struct Triple {
  EntityId head = 0;
  RelationId relation = 0;
  EntityId tail = 0;

  friend auto operator<=>(const Triple&, const Triple&) = default;
};

enum class Split { Train, Valid, Test };

inline const char* split_name(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Valid: return "valid";
    case Split::Test: return "test";
  }
  return "?";
}

inline Split parse_split(const std::string& s) {
  if (s == "train") return Split::Train;
  if (s == "valid") return Split::Valid;
  if (s == "test") return Split::Test;
  fail<ConfigError>("unknown split '", s, "' (expected train, valid or test)");
}

struct KgDataset {
  Vocabulary entities;
  Vocabulary relations;
  std::vector<Triple> train, valid, test;
  // Entities referenced by valid/test but never by train.
  std::vector<EntityId> unseen_in_train;
  std::vector<std::string> warnings;

  const std::vector<Triple>& split(Split s) const {
    return s == Split::Train ? train : s == Split::Valid ? valid : test;
  }
  std::vector<Triple>& split(Split s) { return s == Split::Train ? train : s == Split::Valid ? valid : test; }
  std::size_t num_entities() const { return entities.size(); }
  std::size_t num_relations() const { return relations.size(); }

  friend bool operator==(const KgDataset& a, const KgDataset& b) {
    return a.entities == b.entities && a.relations == b.relations && a.train == b.train && a.valid == b.valid &&
           a.test == b.test;
  }
};

struct DatasetStats {
  std::size_t entities = 0, relations = 0, train = 0, valid = 0, test = 0, unseen_in_train = 0;

  nlohmann::json to_json() const {
    return {{"entities", entities}, {"relations", relations}, {"train", train},
            {"valid", valid},       {"test", test},           {"unseen_in_train", unseen_in_train}};
  }
  friend bool operator==(const DatasetStats&, const DatasetStats&) = default;
};

inline DatasetStats stats(const KgDataset& ds) {
  return {ds.entities.size(), ds.relations.size(), ds.train.size(), ds.valid.size(), ds.test.size(),
          ds.unseen_in_train.size()};
}

namespace detail {

struct RawTriple {
  std::string head, relation, tail;
};

inline std::vector<std::string> split_fields(const std::string& line, char delimiter) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == delimiter) {
      out.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  out.push_back(std::move(cur));
  return out;
}

inline std::vector<RawTriple> read_raw(const std::string& path, char delimiter) {
  std::ifstream in(path);
  if (!in) fail<IoError>("cannot open triple file '", path, "'");
  std::vector<RawTriple> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto f = split_fields(line, delimiter);
    if (f.size() != 3 || f[0].empty() || f[1].empty() || f[2].empty())
      fail<IoError>(path, ":", lineno, ": expected 3 fields, found ", f.size());
    out.push_back({std::move(f[0]), std::move(f[1]), std::move(f[2])});
  }
  return out;
}

inline std::vector<std::string> read_names(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail<IoError>("cannot open '", path, "'");
  std::vector<std::string> out;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) out.push_back(line);
  }
  return out;
}

}  // namespace detail

// Loads a dataset. `path` is either a single triple file (train split only) or
// a directory holding train.txt and optionally valid.txt, test.txt,
// entities.txt and relations.txt. Ids are assigned in sorted-name order, so
// they do not depend on line order.
inline KgDataset load_triples(const std::string& path, char delimiter = '\t') {
  namespace fs = std::filesystem;
  std::map<Split, std::vector<detail::RawTriple>> raw;
  std::set<std::string> entity_names, relation_names;
  if (fs::is_directory(path)) {
    const fs::path dir(path);
    if (!fs::exists(dir / "train.txt")) fail<IoError>("directory '", path, "' has no train.txt");
    for (Split s : {Split::Train, Split::Valid, Split::Test}) {
      const fs::path f = dir / (std::string(split_name(s)) + ".txt");
      if (fs::exists(f)) raw[s] = detail::read_raw(f.string(), delimiter);
    }
    if (fs::exists(dir / "entities.txt"))
      for (auto& n : detail::read_names((dir / "entities.txt").string())) entity_names.insert(n);
    if (fs::exists(dir / "relations.txt"))
      for (auto& n : detail::read_names((dir / "relations.txt").string())) relation_names.insert(n);
  } else {
    raw[Split::Train] = detail::read_raw(path, delimiter);
  }

  std::set<std::string> train_refs, eval_refs;
  for (auto& [s, list] : raw)
    for (const auto& t : list) {
      auto& refs = s == Split::Train ? train_refs : eval_refs;
      refs.insert(t.head);
      refs.insert(t.tail);
      relation_names.insert(t.relation);
    }
  std::set<std::string> all_entities = entity_names;
  all_entities.insert(train_refs.begin(), train_refs.end());
  all_entities.insert(eval_refs.begin(), eval_refs.end());

  KgDataset ds;
  for (const auto& n : all_entities) ds.entities.add(n);
  for (const auto& n : relation_names) ds.relations.add(n);
  for (const auto& n : eval_refs)
    if (!train_refs.count(n)) {
      ds.unseen_in_train.push_back(ds.entities.id(n));
      ds.warnings.push_back("entity '" + n + "' appears only in valid/test");
    }

  std::set<Triple> seen;
  for (auto& [s, list] : raw) {
    auto& dst = ds.split(s);
    dst.reserve(list.size());
    std::set<Triple> here;
    for (const auto& t : list) {
      Triple tr{ds.entities.id(t.head), ds.relations.id(t.relation), ds.entities.id(t.tail)};
      if (seen.count(tr)) fail<IoError>("triple (", t.head, ", ", t.relation, ", ", t.tail, ") appears in more than one split");
      here.insert(tr);
      dst.push_back(tr);
    }
    seen.insert(here.begin(), here.end());
  }
  return ds;
}

inline void save_triples(const KgDataset& ds, const std::string& dir, char delimiter = '\t') {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  auto write_split = [&](Split s) {
    const fs::path f = fs::path(dir) / (std::string(split_name(s)) + ".txt");
    std::ofstream out(f);
    if (!out) fail<IoError>("cannot write '", f.string(), "'");
    for (const auto& t : ds.split(s))
      out << ds.entities.name(t.head) << delimiter << ds.relations.name(t.relation) << delimiter
          << ds.entities.name(t.tail) << '\n';
  };
  for (Split s : {Split::Train, Split::Valid, Split::Test}) write_split(s);
  auto write_names = [&](const std::string& file, const Vocabulary& v) {
    std::ofstream out(fs::path(dir) / file);
    if (!out) fail<IoError>("cannot write '", file, "'");
    for (const auto& n : v.names()) out << n << '\n';
  };
  write_names("entities.txt", ds.entities);
  write_names("relations.txt", ds.relations);
}

// Planted two-level Gaussian mixture with matching relational structure.
struct SynthConfig {
  std::uint64_t seed = 7;
  std::size_t n_super = 4;
  std::size_t n_sub = 4;  // sub-clusters per super-cluster
  std::size_t per_leaf = 50;
  std::size_t dim = 16;
  double sigma = 1.0;       // expected distance of a point from its sub-cluster mean
  double super_sep = 6.0;   // minimum distance between super-cluster means, in sigma
  double sub_sep = 2.0;     // minimum distance between sibling sub-cluster means, in sigma
  double holdout = 0.05;    // fraction of triples sent to each of valid and test
};

struct SynthKg {
  KgDataset dataset;
  std::vector<std::vector<double>> features;  // row per entity id
  std::vector<std::uint32_t> super_label;
  std::vector<std::uint32_t> sub_label;  // global leaf class in [0, n_super * n_sub)
  std::vector<std::vector<double>> super_means;
  std::vector<std::vector<double>> sub_means;
  std::size_t generated_train = 0, generated_valid = 0, generated_test = 0;

  nlohmann::json labels_json() const {
    return {{"entities", dataset.entities.names()}, {"super", super_label}, {"sub", sub_label}};
  }
};

namespace detail {

// Places `count` points around `center` at radius `radius`, rejecting draws
// until every pair is at least `min_sep` apart; grows the radius when stuck.
template <typename Rng>
std::vector<std::vector<double>> separated_points(std::size_t count, std::size_t dim, const std::vector<double>& center,
                                                  double radius, double min_sep, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  for (int attempt = 0;; ++attempt) {
    if (attempt > 0 && attempt % 200 == 0) radius *= 1.1;
    std::vector<std::vector<double>> pts;
    for (std::size_t i = 0; i < count; ++i) {
      std::vector<double> u(dim);
      double norm = 0.0;
      for (auto& x : u) {
        x = normal(rng);
        norm += x * x;
      }
      norm = std::sqrt(norm);
      for (std::size_t j = 0; j < dim; ++j) u[j] = center[j] + radius * u[j] / norm;
      pts.push_back(std::move(u));
    }
    bool ok = true;
    for (std::size_t i = 0; i < count && ok; ++i)
      for (std::size_t j = i + 1; j < count && ok; ++j) {
        double d2 = 0.0;
        for (std::size_t c = 0; c < dim; ++c) d2 += (pts[i][c] - pts[j][c]) * (pts[i][c] - pts[j][c]);
        ok = std::sqrt(d2) >= min_sep;
      }
    if (ok) return pts;
  }
}

}  // namespace detail

inline SynthKg synth_hier_kg(const SynthConfig& cfg) {
  require(cfg.n_super >= 1 && cfg.n_sub >= 1 && cfg.per_leaf >= 1 && cfg.dim >= 1, "synthetic counts must be >= 1");
  require(cfg.holdout >= 0.0 && cfg.holdout < 0.5, "holdout fraction must lie in [0, 0.5)");
  std::mt19937_64 rng(cfg.seed);
  SynthKg out;
  const double s = cfg.sigma;
  const std::vector<double> origin(cfg.dim, 0.0);
  // Radius r puts random directions ~sqrt(2)*r apart in high dimension.
  out.super_means = detail::separated_points(cfg.n_super, cfg.dim, origin, cfg.super_sep * s, cfg.super_sep * s, rng);
  for (std::size_t a = 0; a < cfg.n_super; ++a) {
    auto subs = detail::separated_points(cfg.n_sub, cfg.dim, out.super_means[a], cfg.sub_sep * s, cfg.sub_sep * s, rng);
    // Shift the group so the sub-cluster means average to the super mean.
    std::vector<double> shift(cfg.dim, 0.0);
    for (const auto& m : subs)
      for (std::size_t j = 0; j < cfg.dim; ++j) shift[j] += m[j] / static_cast<double>(cfg.n_sub);
    for (auto& m : subs)
      for (std::size_t j = 0; j < cfg.dim; ++j) m[j] += out.super_means[a][j] - shift[j];
    for (auto& m : subs) out.sub_means.push_back(std::move(m));
  }

  const std::size_t n_leaf = cfg.n_super * cfg.n_sub;
  const std::size_t n = n_leaf * cfg.per_leaf;
  const int width = static_cast<int>(std::to_string(n).size());
  std::normal_distribution<double> noise(0.0, s / std::sqrt(static_cast<double>(cfg.dim)));
  std::vector<std::string> names;
  for (std::size_t e = 0; e < n; ++e) {
    std::ostringstream oss;
    oss << "e" << std::setw(width) << std::setfill('0') << e;
    names.push_back(oss.str());
    const std::size_t leaf = e / cfg.per_leaf;
    out.sub_label.push_back(static_cast<std::uint32_t>(leaf));
    out.super_label.push_back(static_cast<std::uint32_t>(leaf / cfg.n_sub));
    std::vector<double> x = out.sub_means[leaf];
    for (auto& v : x) v += noise(rng);
    out.features.push_back(std::move(x));
  }
  out.dataset.entities = Vocabulary(names);
  out.dataset.relations = Vocabulary({"same_sub", "same_super"});

  std::vector<Triple> all;
  for (std::size_t leaf = 0; leaf < n_leaf; ++leaf)
    for (std::size_t i = 0; i < cfg.per_leaf; ++i)
      for (std::size_t j = 0; j < cfg.per_leaf; ++j)
        if (i != j)
          all.push_back({static_cast<EntityId>(leaf * cfg.per_leaf + i), 0,
                         static_cast<EntityId>(leaf * cfg.per_leaf + j)});
  // One random member of every sibling sub-cluster per entity.
  std::uniform_int_distribution<std::size_t> pick(0, cfg.per_leaf - 1);
  for (std::size_t e = 0; e < n; ++e) {
    const std::size_t leaf = e / cfg.per_leaf;
    const std::size_t first = (leaf / cfg.n_sub) * cfg.n_sub;
    for (std::size_t other = first; other < first + cfg.n_sub; ++other)
      if (other != leaf)
        all.push_back({static_cast<EntityId>(e), 1, static_cast<EntityId>(other * cfg.per_leaf + pick(rng))});
  }
  std::sort(all.begin(), all.end());
  all.erase(std::unique(all.begin(), all.end()), all.end());
  std::shuffle(all.begin(), all.end(), rng);
  const auto held = static_cast<std::size_t>(std::floor(cfg.holdout * static_cast<double>(all.size())));
  out.dataset.valid.assign(all.begin(), all.begin() + held);
  out.dataset.test.assign(all.begin() + held, all.begin() + 2 * held);
  out.dataset.train.assign(all.begin() + 2 * held, all.end());
  out.generated_valid = held;
  out.generated_test = held;
  out.generated_train = all.size() - 2 * held;
  std::vector<unsigned char> in_train(n, 0);
  for (const auto& t : out.dataset.train) in_train[t.head] = in_train[t.tail] = 1;
  for (std::size_t e = 0; e < n; ++e)
    if (!in_train[e]) out.dataset.unseen_in_train.push_back(static_cast<EntityId>(e));
  return out;
}

}  // namespace hiercode
