#pragma once

// Hierarchy tree over entity embeddings: agglomerative clustering, cut at a
// geometric schedule of cluster counts, exposing per-entity leaf centroids,
// ancestor chains and sibling-leaf neighbor sets.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "hiercode/error.hpp"
#include "hiercode/tensor.hpp"

namespace hiercode {

enum class Linkage { Average, Complete, Ward };

inline Linkage parse_linkage(const std::string& s) {
  if (s == "average") return Linkage::Average;
  if (s == "complete") return Linkage::Complete;
  if (s == "ward") return Linkage::Ward;
  fail<ConfigError>("unknown linkage '", s, "' (average, complete, ward)");
}

inline const char* linkage_name(Linkage l) {
  switch (l) {
    case Linkage::Average: return "average";
    case Linkage::Complete: return "complete";
    case Linkage::Ward: return "ward";
  }
  return "?";
}

// One agglomeration step. Cluster ids follow the usual dendrogram convention:
// 0..n-1 are singletons, n+i is the cluster created by merge i.
struct Merge {
  std::size_t a = 0, b = 0;  // a < b
  double distance = 0.0;
  std::size_t size = 0;
};

// Agglomerative clustering on Euclidean distance with Lance-Williams updates.
// Ties go to the pair with the smaller (min id, max id).
inline std::vector<Merge> agglomerate(const Tensor& points, Linkage linkage) {
  const std::size_t n = points.rows();
  std::vector<Merge> merges;
  if (n < 2) return merges;
  std::vector<double> dist(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      const double d2 = squared_distance(points.row(i), points.row(j));
      // Ward works on squared distances.
      dist[i * n + j] = dist[j * n + i] = linkage == Linkage::Ward ? d2 : std::sqrt(d2);
    }
  std::vector<std::size_t> node(n), size(n, 1);
  std::iota(node.begin(), node.end(), std::size_t{0});
  std::vector<unsigned char> active(n, 1);
  std::vector<std::size_t> nn(n, 0);
  std::vector<double> nd(n, 0.0);

  auto better = [&](double d, std::size_t cand, double best_d, std::size_t best) {
    return d < best_d || (d == best_d && node[cand] < node[best]);
  };
  auto refresh = [&](std::size_t i) {
    nd[i] = std::numeric_limits<double>::infinity();
    nn[i] = i;
    for (std::size_t j = 0; j < n; ++j)
      if (j != i && active[j] && (nn[i] == i || better(dist[i * n + j], j, nd[i], nn[i]))) {
        nn[i] = j;
        nd[i] = dist[i * n + j];
      }
  };
  for (std::size_t i = 0; i < n; ++i) refresh(i);

  for (std::size_t step = 0; step + 1 < n; ++step) {
    std::size_t bi = n;
    for (std::size_t i = 0; i < n; ++i) {
      if (!active[i]) continue;
      if (bi == n) {
        bi = i;
        continue;
      }
      const auto key_i = std::minmax(node[i], node[nn[i]]);
      const auto key_b = std::minmax(node[bi], node[nn[bi]]);
      if (nd[i] < nd[bi] || (nd[i] == nd[bi] && key_i < key_b)) bi = i;
    }
    std::size_t x = bi, y = nn[bi];
    if (node[x] > node[y]) std::swap(x, y);
    const double dxy = dist[x * n + y];
    merges.push_back({node[x], node[y], linkage == Linkage::Ward ? std::sqrt(dxy) : dxy, size[x] + size[y]});

    // Merged cluster reuses slot x.
    for (std::size_t k = 0; k < n; ++k) {
      if (!active[k] || k == x || k == y) continue;
      const double dkx = dist[k * n + x], dky = dist[k * n + y];
      const double nx = static_cast<double>(size[x]), ny = static_cast<double>(size[y]),
                   nk = static_cast<double>(size[k]);
      double v = 0.0;
      switch (linkage) {
        case Linkage::Average: v = (nx * dkx + ny * dky) / (nx + ny); break;
        case Linkage::Complete: v = std::max(dkx, dky); break;
        case Linkage::Ward: v = ((nx + nk) * dkx + (ny + nk) * dky - nk * dxy) / (nx + ny + nk); break;
      }
      dist[k * n + x] = dist[x * n + k] = v;
    }
    active[y] = 0;
    size[x] += size[y];
    node[x] = n + step;
    for (std::size_t k = 0; k < n; ++k) {
      if (!active[k] || k == x) continue;
      if (nn[k] == x || nn[k] == y) {
        refresh(k);
      } else if (better(dist[k * n + x], x, nd[k], nn[k])) {
        nn[k] = x;
        nd[k] = dist[k * n + x];
      }
    }
    refresh(x);
  }
  return merges;
}

// Flat partition after applying the first n - clusters merges. Labels are
// 0..clusters-1, numbered by smallest member index.
inline std::vector<std::size_t> cut_dendrogram(std::size_t n, const std::vector<Merge>& merges, std::size_t clusters) {
  require(clusters >= 1 && clusters <= n, "cut_dendrogram: cluster count ", clusters, " outside [1, ", n, "]");
  std::vector<std::size_t> parent(2 * n);
  std::iota(parent.begin(), parent.end(), std::size_t{0});
  auto find = [&](std::size_t x) {
    while (parent[x] != x) x = parent[x] = parent[parent[x]];
    return x;
  };
  for (std::size_t i = 0; i < n - clusters; ++i) {
    parent[find(merges[i].a)] = n + i;
    parent[find(merges[i].b)] = n + i;
  }
  std::vector<std::size_t> label(n), root_label(2 * n, n);
  std::size_t next = 0;
  for (std::size_t e = 0; e < n; ++e) {
    const std::size_t r = find(e);
    if (root_label[r] == n) root_label[r] = next++;
    label[e] = root_label[r];
  }
  return label;
}

// Cluster counts per level, root (1) first, leaf_count last; geometric in
// between and strictly increasing.
inline std::vector<std::size_t> level_schedule(std::size_t leaf_count, std::size_t levels) {
  require(levels >= 2, "hierarchy needs at least 2 levels, got ", levels);
  require(leaf_count >= levels, "leaf_count ", leaf_count, " cannot fill ", levels, " distinct levels");
  std::vector<std::size_t> counts(levels);
  counts[0] = 1;
  counts[levels - 1] = leaf_count;
  for (std::size_t l = 1; l + 1 < levels; ++l) {
    const double g = std::pow(static_cast<double>(leaf_count), static_cast<double>(l) / static_cast<double>(levels - 1));
    std::size_t c = static_cast<std::size_t>(std::llround(g));
    c = std::max(c, counts[l - 1] + 1);
    c = std::min(c, leaf_count - (levels - 1 - l));
    counts[l] = c;
  }
  return counts;
}

struct HierarchyNode {
  std::size_t id = 0;
  std::size_t level = 0;
  std::optional<std::size_t> parent;
  std::vector<std::size_t> children;
  std::vector<std::size_t> members;  // entity ids, ascending
  std::vector<double> centroid;
};

struct HierarchyConfig {
  Linkage linkage = Linkage::Average;
  std::size_t levels = 3;       // L_H, root included
  std::size_t leaf_count = 16;
};

struct HierarchyTree {
  std::vector<HierarchyNode> nodes;
  std::vector<std::vector<std::size_t>> level_nodes;  // level 0 is the root
  std::vector<std::size_t> leaf_of;                   // entity -> leaf node

  std::size_t num_levels() const { return level_nodes.size(); }
  std::size_t num_entities() const { return leaf_of.size(); }
  const HierarchyNode& root() const { return nodes.at(level_nodes.at(0).at(0)); }

  // Partition of entities at a level, labelled by position within level_nodes.
  std::vector<std::size_t> level_labels(std::size_t level) const {
    std::vector<std::size_t> out(leaf_of.size());
    const auto& ids = level_nodes.at(level);
    for (std::size_t k = 0; k < ids.size(); ++k)
      for (std::size_t e : nodes[ids[k]].members) out[e] = k;
    return out;
  }

  const HierarchyNode& node_at(std::size_t entity, std::size_t level) const {
    std::size_t id = leaf_of.at(entity);
    while (nodes[id].level > level) id = *nodes[id].parent;
    return nodes[id];
  }
};

inline HierarchyTree build_tree(const Tensor& embeddings, const HierarchyConfig& cfg) {
  require(cfg.levels >= 2, "hierarchy needs at least 2 levels, got ", cfg.levels);
  if (embeddings.rank() != 2) fail<ShapeError>("build_tree expects an [entities, dim] matrix");
  const std::size_t n = embeddings.dim(0), d = embeddings.dim(1);
  require(n >= 1, "build_tree: no entities");

  auto centroid_of = [&](const std::vector<std::size_t>& members) {
    std::vector<double> c(d, 0.0);
    for (std::size_t e : members)
      for (std::size_t j = 0; j < d; ++j) c[j] += embeddings(e, j);
    for (auto& x : c) x /= static_cast<double>(members.size());
    return c;
  };

  HierarchyTree tree;
  if (n == 1) {
    HierarchyNode only;
    only.members = {0};
    only.centroid = centroid_of(only.members);
    tree.nodes.push_back(std::move(only));
    tree.level_nodes.assign(1, {0});
    tree.leaf_of = {0};
    return tree;
  }

  require(cfg.leaf_count <= n, "leaf_count ", cfg.leaf_count, " exceeds entity count ", n);
  const auto counts = level_schedule(cfg.leaf_count, cfg.levels);
  const auto merges = agglomerate(embeddings, cfg.linkage);

  std::vector<std::size_t> prev_labels;
  std::vector<std::size_t> prev_ids;
  for (std::size_t level = 0; level < counts.size(); ++level) {
    const auto labels = cut_dendrogram(n, merges, counts[level]);
    std::vector<std::vector<std::size_t>> members(counts[level]);
    for (std::size_t e = 0; e < n; ++e) members[labels[e]].push_back(e);
    std::vector<std::size_t> ids;
    for (std::size_t k = 0; k < counts[level]; ++k) {
      HierarchyNode node;
      node.id = tree.nodes.size();
      node.level = level;
      node.members = std::move(members[k]);
      node.centroid = centroid_of(node.members);
      if (level > 0) {
        const std::size_t p = prev_ids[prev_labels[node.members.front()]];
        node.parent = p;
        tree.nodes[p].children.push_back(node.id);
      }
      ids.push_back(node.id);
      tree.nodes.push_back(std::move(node));
    }
    tree.level_nodes.push_back(ids);
    prev_labels = labels;
    prev_ids = std::move(ids);
  }
  tree.leaf_of.resize(n);
  for (std::size_t e = 0; e < n; ++e) tree.leaf_of[e] = prev_ids[prev_labels[e]];
  return tree;
}

// h_0 = leaf centroid, h_1 = its parent's centroid, ...; the root centroid is
// repeated once the chain runs out.
inline std::vector<std::vector<double>> ancestors(const HierarchyTree& tree, std::size_t entity, std::size_t count) {
  require(count >= 1, "ancestors: count must be >= 1");
  if (entity >= tree.leaf_of.size()) fail<Error>("ancestors: unknown entity ", entity);
  std::vector<std::vector<double>> out;
  std::size_t id = tree.leaf_of[entity];
  while (out.size() < count) {
    out.push_back(tree.nodes[id].centroid);
    if (tree.nodes[id].parent) id = *tree.nodes[id].parent;
  }
  return out;
}

// Centroids of the sibling leaves of the entity's leaf (same parent), nearest
// to the entity's own leaf centroid first, at most n_max of them.
inline std::vector<std::vector<double>> neighbor_set(const HierarchyTree& tree, std::size_t entity, std::size_t n_max) {
  if (entity >= tree.leaf_of.size()) fail<Error>("neighbor_set: unknown entity ", entity);
  const auto& leaf = tree.nodes[tree.leaf_of[entity]];
  if (!leaf.parent) return {};
  std::vector<std::pair<double, std::size_t>> cand;
  for (std::size_t sib : tree.nodes[*leaf.parent].children)
    if (sib != leaf.id) cand.emplace_back(squared_distance(tree.nodes[sib].centroid, leaf.centroid), sib);
  std::sort(cand.begin(), cand.end());
  std::vector<std::vector<double>> out;
  for (std::size_t k = 0; k < cand.size() && k < n_max; ++k) out.push_back(tree.nodes[cand[k].second].centroid);
  return out;
}

inline nlohmann::json tree_to_json(const HierarchyTree& tree) {
  nlohmann::json nodes = nlohmann::json::array();
  for (const auto& n : tree.nodes) {
    nodes.push_back({{"id", n.id},
                     {"level", n.level},
                     {"parent", n.parent ? nlohmann::json(*n.parent) : nlohmann::json(nullptr)},
                     {"children", n.children},
                     {"members", n.members},
                     {"centroid", n.centroid}});
  }
  return {{"levels", tree.level_nodes}, {"leaf_of", tree.leaf_of}, {"nodes", nodes}};
}

inline HierarchyTree tree_from_json(const nlohmann::json& j) {
  HierarchyTree t;
  t.level_nodes = j.at("levels").get<std::vector<std::vector<std::size_t>>>();
  t.leaf_of = j.at("leaf_of").get<std::vector<std::size_t>>();
  for (const auto& jn : j.at("nodes")) {
    HierarchyNode n;
    n.id = jn.at("id").get<std::size_t>();
    n.level = jn.at("level").get<std::size_t>();
    if (!jn.at("parent").is_null()) n.parent = jn.at("parent").get<std::size_t>();
    n.children = jn.at("children").get<std::vector<std::size_t>>();
    n.members = jn.at("members").get<std::vector<std::size_t>>();
    n.centroid = jn.at("centroid").get<std::vector<double>>();
    if (n.id != t.nodes.size()) fail<IoError>("tree JSON: node ids must be dense and ordered");
    t.nodes.push_back(std::move(n));
  }
  return t;
}

}  // namespace hiercode
