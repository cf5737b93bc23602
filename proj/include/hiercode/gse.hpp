#pragma once

// Granular semantic enhancement: contrastive coarse-to-fine alignment of the
// per-level surrogates with each entity's cluster centroid, and separation
// from the centroids of sibling clusters.

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "hiercode/autodiff.hpp"
#include "hiercode/error.hpp"
#include "hiercode/tensor.hpp"

namespace hiercode {

struct GseConfig {
  double tau = 0.07;
  double lambda1 = 0.8;
  double lambda2 = 0.4;
  std::size_t n_max = 5;
  bool use_l1 = true;
  bool use_l2 = true;
  // Leave the entity itself out of the separation-loss denominator.
  bool exclude_self_l2 = false;

  void validate() const {
    require(tau > 0.0, "gse.tau must be > 0, got ", tau);
    require(lambda1 > 0.0 && lambda1 < 1.0, "gse.lambda1 must lie in (0, 1), got ", lambda1);
    require(lambda2 > 0.0 && lambda2 < 1.0, "gse.lambda2 must lie in (0, 1), got ", lambda2);
  }
};

// lambda1^(i+1) / m for levels i = 0..m-1; strictly decreasing.
inline std::vector<double> l1_level_weights(std::size_t m, double lambda1) {
  std::vector<double> w(m);
  for (std::size_t i = 0; i < m; ++i) w[i] = std::pow(lambda1, static_cast<double>(i + 1)) / static_cast<double>(m);
  return w;
}

// lambda2^(m-i) / m for levels i = 0..m-1; strictly increasing.
inline std::vector<double> l2_level_weights(std::size_t m, double lambda2) {
  std::vector<double> w(m);
  for (std::size_t i = 0; i < m; ++i) w[i] = std::pow(lambda2, static_cast<double>(m - i)) / static_cast<double>(m);
  return w;
}

namespace detail {

inline Tensor transpose_copy(const Tensor& m) {
  Tensor t(Shape{m.dim(1), m.dim(0)});
  for (std::size_t i = 0; i < m.dim(0); ++i)
    for (std::size_t j = 0; j < m.dim(1); ++j) t(j, i) = m(i, j);
  return t;
}

inline void check_batch(std::span<const ad::Var> surrogates, const Tensor& centroids) {
  if (surrogates.empty()) fail<ShapeError>("GSE loss needs at least one level");
  if (centroids.rank() != 2 || centroids.dim(0) == 0) fail<ShapeError>("GSE loss needs a non-empty [B, d] centroid matrix");
}

// log sum_{e'} exp(v_i . mu_{e'} / tau) per entity, shape [B].
inline ad::Var batch_lse(ad::Graph& g, ad::Var v, ad::Var centroids_t, double tau, bool exclude_self, std::size_t batch) {
  std::vector<unsigned char> mask;
  if (exclude_self) {
    require(batch >= 2, "excluding the entity itself from the denominator needs a batch of at least 2");
    mask.assign(batch * batch, 1);
    for (std::size_t e = 0; e < batch; ++e) mask[e * batch + e] = 0;
  }
  return g.logsumexp(g.matmul(v, centroids_t), tau, std::move(mask));
}

}  // namespace detail

// -(1/|E|) sum_e sum_i lambda1^(i+1)/m * log softmax_e(v_i . mu / tau), where
// the softmax runs over the centroids of every entity in the batch.
// `shared_lse`, when given, holds the per-level denominators already built
// for the same batch.
inline ad::Var build_loss_l1(ad::Graph& g, std::span<const ad::Var> surrogates, const Tensor& centroids,
                             const GseConfig& cfg, std::span<const ad::Var> shared_lse = {}) {
  cfg.validate();
  detail::check_batch(surrogates, centroids);
  const std::size_t batch = centroids.dim(0), m = surrogates.size();
  const auto w = l1_level_weights(m, cfg.lambda1);
  const ad::Var mu = g.constant(centroids);
  const ad::Var mu_t = g.constant(detail::transpose_copy(centroids));
  ad::Var total{};
  for (std::size_t i = 0; i < m; ++i) {
    const ad::Var own = g.scale(g.sum_last(g.mul(surrogates[i], mu)), 1.0 / cfg.tau);
    const ad::Var lse =
        shared_lse.empty() ? detail::batch_lse(g, surrogates[i], mu_t, cfg.tau, false, batch) : shared_lse[i];
    const ad::Var level = g.scale(g.sum(g.sub(own, lse)), -w[i] / static_cast<double>(batch));
    total = i == 0 ? level : g.add(total, level);
  }
  return g.label(total, "loss_l1");
}

// +(1/|E|) sum_e sum_i lambda2^(m-i)/(m |N_e|) sum_{n in N_e} log[exp(v_i . n / tau) / sum_{e'} exp(v_i . mu_{e'} / tau)].
// Entities with an empty neighbor set contribute nothing.
inline ad::Var build_loss_l2(ad::Graph& g, std::span<const ad::Var> surrogates, const Tensor& centroids,
                             const std::vector<std::vector<std::vector<double>>>& neighbors, const GseConfig& cfg,
                             std::span<const ad::Var> shared_lse = {}) {
  cfg.validate();
  detail::check_batch(surrogates, centroids);
  const std::size_t batch = centroids.dim(0), m = surrogates.size(), d = centroids.dim(1);
  if (neighbors.size() != batch) fail<ShapeError>("loss_l2: ", neighbors.size(), " neighbor sets for a batch of ", batch);
  // The log-denominator does not depend on n, so the inner average over N_e
  // collapses onto the mean neighbor centroid.
  Tensor mean_nb(Shape{batch, d});
  Tensor has_nb(Shape{batch});
  for (std::size_t e = 0; e < batch; ++e) {
    if (neighbors[e].empty()) continue;
    has_nb.data[e] = 1.0;
    auto row = mean_nb.row(e);
    for (const auto& n : neighbors[e]) {
      if (n.size() != d) fail<ShapeError>("loss_l2: neighbor centroid of dimension ", n.size(), ", expected ", d);
      for (std::size_t j = 0; j < d; ++j) row[j] += n[j];
    }
    for (auto& x : row) x /= static_cast<double>(neighbors[e].size());
  }
  const auto w = l2_level_weights(m, cfg.lambda2);
  const ad::Var nb = g.constant(std::move(mean_nb));
  const ad::Var mask = g.constant(std::move(has_nb));
  const ad::Var mu_t = g.constant(detail::transpose_copy(centroids));
  ad::Var total{};
  for (std::size_t i = 0; i < m; ++i) {
    const ad::Var toward = g.scale(g.sum_last(g.mul(surrogates[i], nb)), 1.0 / cfg.tau);
    const ad::Var lse = shared_lse.empty()
                            ? detail::batch_lse(g, surrogates[i], mu_t, cfg.tau, cfg.exclude_self_l2, batch)
                            : shared_lse[i];
    const ad::Var level = g.scale(g.sum(g.mul(g.sub(toward, lse), mask)), w[i] / static_cast<double>(batch));
    total = i == 0 ? level : g.add(total, level);
  }
  return g.label(total, "loss_l2");
}

struct GseNodes {
  ad::Var l1, l2, total;
  bool has_l1 = false, has_l2 = false;
};

// L_GSE = L1 + L2, honoring the per-term ablation switches. With both terms
// disabled, `total` is a constant zero.
inline GseNodes build_loss_gse(ad::Graph& g, std::span<const ad::Var> surrogates, const Tensor& centroids,
                               const std::vector<std::vector<std::vector<double>>>& neighbors, const GseConfig& cfg) {
  GseNodes out;
  // Both terms share the full-batch denominator unless L2 leaves the entity out.
  std::vector<ad::Var> lse;
  if (cfg.use_l1 && cfg.use_l2 && !cfg.exclude_self_l2) {
    cfg.validate();
    detail::check_batch(surrogates, centroids);
    const ad::Var mu_t = g.constant(detail::transpose_copy(centroids));
    for (ad::Var v : surrogates) lse.push_back(detail::batch_lse(g, v, mu_t, cfg.tau, false, centroids.dim(0)));
  }
  if (cfg.use_l1) {
    out.l1 = build_loss_l1(g, surrogates, centroids, cfg, lse);
    out.has_l1 = true;
  }
  if (cfg.use_l2) {
    out.l2 = build_loss_l2(g, surrogates, centroids, neighbors, cfg, lse);
    out.has_l2 = true;
  }
  if (out.has_l1 && out.has_l2) out.total = g.add(out.l1, out.l2);
  else if (out.has_l1) out.total = out.l1;
  else if (out.has_l2) out.total = out.l2;
  else out.total = g.constant(Tensor::scalar(0.0));
  return out;
}

namespace detail {

inline std::vector<ad::Var> bind_surrogates(ad::Graph& g, ad::Bindings& in, const std::vector<Tensor>& surrogates) {
  std::vector<ad::Var> vars;
  for (std::size_t i = 0; i < surrogates.size(); ++i) {
    const std::string name = "v." + std::to_string(i);
    vars.push_back(g.input(name));
    in[name] = surrogates[i];
  }
  return vars;
}

}  // namespace detail

// Value-level entry points; surrogates[i] is the [B, d] batch for level i.
inline double loss_l1(const std::vector<Tensor>& surrogates, const Tensor& centroids, const GseConfig& cfg) {
  ad::Graph g;
  ad::Bindings in;
  const auto vars = detail::bind_surrogates(g, in, surrogates);
  return ad::eval(g, in, build_loss_l1(g, vars, centroids, cfg)).output().item();
}

inline double loss_l2(const std::vector<Tensor>& surrogates, const Tensor& centroids,
                      const std::vector<std::vector<std::vector<double>>>& neighbors, const GseConfig& cfg) {
  ad::Graph g;
  ad::Bindings in;
  const auto vars = detail::bind_surrogates(g, in, surrogates);
  return ad::eval(g, in, build_loss_l2(g, vars, centroids, neighbors, cfg)).output().item();
}

inline double loss_gse(const std::vector<Tensor>& surrogates, const Tensor& centroids,
                       const std::vector<std::vector<std::vector<double>>>& neighbors, const GseConfig& cfg) {
  ad::Graph g;
  ad::Bindings in;
  const auto vars = detail::bind_surrogates(g, in, surrogates);
  return ad::eval(g, in, build_loss_gse(g, vars, centroids, neighbors, cfg).total).output().item();
}

}  // namespace hiercode
