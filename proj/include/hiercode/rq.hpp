#pragma once

// Residual quantization: encoder MLP, nearest-code assignment, the residual
// recursion with straight-through surrogates, and the commitment loss.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "hiercode/autodiff.hpp"
#include "hiercode/error.hpp"
#include "hiercode/tensor.hpp"

namespace hiercode {

using ParamSet = ad::Bindings;

struct EncoderConfig {
  std::size_t in_dim = 16;
  std::vector<std::size_t> hidden{64, 64};
  std::size_t out_dim = 16;

  std::size_t num_layers() const { return hidden.size() + 1; }
  std::size_t width(std::size_t k) const {  // width of activation k (0 = input)
    return k == 0 ? in_dim : k <= hidden.size() ? hidden[k - 1] : out_dim;
  }
};

inline std::string encoder_weight(std::size_t k) { return "enc." + std::to_string(k) + ".w"; }
inline std::string encoder_bias(std::size_t k) { return "enc." + std::to_string(k) + ".b"; }
inline std::string codebook_name(std::size_t level) { return "cb." + std::to_string(level); }

template <typename Rng>
void init_encoder(ParamSet& params, const EncoderConfig& cfg, Rng& rng) {
  for (std::size_t k = 0; k < cfg.num_layers(); ++k) {
    const std::size_t fan_in = cfg.width(k), fan_out = cfg.width(k + 1);
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    params[encoder_weight(k)] = Tensor::uniform(Shape{fan_in, fan_out}, -bound, bound, rng);
    params[encoder_bias(k)] = Tensor(Shape{fan_out}, 0.0);
  }
}

// Linear layers with relu between them; the last layer is linear.
inline ad::Var build_encoder(ad::Graph& g, ad::Var s, const EncoderConfig& cfg) {
  ad::Var h = s;
  for (std::size_t k = 0; k < cfg.num_layers(); ++k) {
    h = g.add(g.matmul(h, g.input(encoder_weight(k))), g.input(encoder_bias(k)));
    if (k + 1 < cfg.num_layers()) h = g.relu(h);
  }
  return g.label(h, "z");
}

// z = MLP(s) for a batch of rows.
inline Tensor encode(const Tensor& s, const ParamSet& params, const EncoderConfig& cfg) {
  if (s.rank() != 2 || s.dim(1) != cfg.in_dim)
    fail<ShapeError>("encode: input shape ", shape_str(s.shape), " does not match encoder input width ", cfg.in_dim);
  ad::Graph g;
  const ad::Var z = build_encoder(g, g.input("s", false), cfg);
  ParamSet bound = params;
  bound["s"] = s;
  return ad::eval(g, bound, z).output();
}

struct Codebooks {
  std::vector<Tensor> levels;  // each [K, d]

  std::size_t num_levels() const { return levels.size(); }
  std::size_t size() const { return levels.empty() ? 0 : levels[0].dim(0); }
  std::size_t dim() const { return levels.empty() ? 0 : levels[0].dim(1); }

  static Codebooks from_params(const ParamSet& params, std::size_t m) {
    Codebooks c;
    for (std::size_t l = 0; l < m; ++l) c.levels.push_back(params.at(codebook_name(l)));
    return c;
  }
  void store(ParamSet& params) const {
    for (std::size_t l = 0; l < levels.size(); ++l) params[codebook_name(l)] = levels[l];
  }
};

// Index of the codebook row nearest to r; the lowest index wins ties.
inline std::size_t assign(std::span<const double> r, const Tensor& codebook) {
  if (codebook.rank() != 2 || codebook.dim(0) == 0) fail<Error>("assign: empty codebook");
  if (codebook.dim(1) != r.size())
    fail<ShapeError>("assign: residual dimension ", r.size(), " vs codebook ", shape_str(codebook.shape));
  std::size_t best = 0;
  double best_d = squared_distance(r, codebook.row(0));
  for (std::size_t k = 1; k < codebook.dim(0); ++k) {
    const double d = squared_distance(r, codebook.row(k));
    if (d < best_d) {
      best_d = d;
      best = k;
    }
  }
  return best;
}

struct CodeAssignment {
  std::size_t entity = 0;
  std::vector<std::size_t> codes;                // c_0..c_{m-1}
  std::vector<std::vector<double>> residuals;   // r_0..r_m
  std::vector<std::vector<double>> surrogates;  // forward values of the surrogates, equal to the chosen rows
};

inline CodeAssignment quantize(std::span<const double> z, const Codebooks& books, std::size_t entity = 0) {
  if (books.num_levels() == 0) fail<Error>("quantize: no codebook levels");
  CodeAssignment a;
  a.entity = entity;
  a.residuals.emplace_back(z.begin(), z.end());
  for (const Tensor& cb : books.levels) {
    const auto& r = a.residuals.back();
    const std::size_t c = assign(r, cb);
    auto v = cb.row(c);
    std::vector<double> next(r.size());
    for (std::size_t j = 0; j < r.size(); ++j) next[j] = r[j] - v[j];
    a.codes.push_back(c);
    a.surrogates.emplace_back(v.begin(), v.end());
    a.residuals.push_back(std::move(next));
  }
  return a;
}

// Codes for every row of z, as codes[level][row].
inline std::vector<std::vector<std::size_t>> assign_codes(const Tensor& z, const Codebooks& books) {
  std::vector<std::vector<std::size_t>> codes(books.num_levels(), std::vector<std::size_t>(z.rows()));
  for (std::size_t i = 0; i < z.rows(); ++i) {
    const auto a = quantize(z.row(i), books, i);
    for (std::size_t l = 0; l < a.codes.size(); ++l) codes[l][i] = a.codes[l];
  }
  return codes;
}

struct UsageCounts {
  std::vector<std::vector<std::uint64_t>> counts;  // [level][code]

  UsageCounts() = default;
  UsageCounts(std::size_t levels, std::size_t k) : counts(levels, std::vector<std::uint64_t>(k, 0)) {}

  void record(const CodeAssignment& a) {
    for (std::size_t l = 0; l < a.codes.size(); ++l) ++counts.at(l).at(a.codes[l]);
  }
  void record(const std::vector<std::vector<std::size_t>>& codes) {
    for (std::size_t l = 0; l < codes.size(); ++l)
      for (std::size_t c : codes[l]) ++counts.at(l).at(c);
  }
  std::uint64_t total() const {
    std::uint64_t t = 0;
    for (const auto& lv : counts)
      for (auto c : lv) t += c;
    return t;
  }
  void clear() {
    for (auto& lv : counts) std::fill(lv.begin(), lv.end(), 0);
  }
};

// Lloyd's k-means with k-means++ seeding. When k exceeds the number of
// distinct rows, the extra centers are jittered copies of data rows.
template <typename Rng>
Tensor kmeans(const Tensor& points, std::size_t k, std::size_t iterations, Rng& rng) {
  const std::size_t n = points.rows(), d = points.row_size();
  require(n >= 1 && k >= 1, "kmeans needs points and k >= 1");
  Tensor centers(Shape{k, d});
  auto sq_dist = [&](std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) s += (a[j] - b[j]) * (a[j] - b[j]);
    return s;
  };
  std::uniform_int_distribution<std::size_t> any(0, n - 1);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> jitter(0.0, 1e-3);
  std::vector<double> nearest(n, std::numeric_limits<double>::infinity());
  for (std::size_t c = 0; c < k; ++c) {
    double total = 0.0;
    for (double x : nearest) total += c == 0 ? 0.0 : x;
    std::size_t pick = any(rng);
    if (c > 0 && total > 0.0) {
      double u = unit(rng) * total;
      for (pick = 0; pick + 1 < n; ++pick) {
        if (u < nearest[pick]) break;
        u -= nearest[pick];
      }
      while (nearest[pick] == 0.0) --pick;  // rounding can overrun onto a zero-weight row
    }
    auto src = points.row(pick);
    auto dst = centers.row(c);
    std::copy(src.begin(), src.end(), dst.begin());
    if (c > 0 && total == 0.0)
      for (auto& x : dst) x += jitter(rng);
    for (std::size_t i = 0; i < n; ++i) nearest[i] = std::min(nearest[i], sq_dist(points.row(i), centers.row(c)));
  }
  std::vector<std::size_t> label(n);
  for (std::size_t it = 0; it < iterations; ++it) {
    for (std::size_t i = 0; i < n; ++i) label[i] = assign(points.row(i), centers);
    Tensor sums(Shape{k, d});
    std::vector<std::size_t> count(k, 0);
    for (std::size_t i = 0; i < n; ++i) {
      ++count[label[i]];
      auto p = points.row(i);
      auto s = sums.row(label[i]);
      for (std::size_t j = 0; j < d; ++j) s[j] += p[j];
    }
    for (std::size_t c = 0; c < k; ++c) {
      if (count[c] == 0) continue;
      auto s = sums.row(c);
      auto dst = centers.row(c);
      for (std::size_t j = 0; j < d; ++j) dst[j] = s[j] / static_cast<double>(count[c]);
    }
  }
  return centers;
}

// k-means on level-0 residuals, then recursively on each next level's residuals.
template <typename Rng>
Codebooks init_codebooks(const Tensor& z, std::size_t levels, std::size_t k, std::size_t iterations, Rng& rng) {
  Codebooks books;
  Tensor residual = z;
  for (std::size_t l = 0; l < levels; ++l) {
    books.levels.push_back(kmeans(residual, k, iterations, rng));
    for (std::size_t i = 0; i < residual.rows(); ++i) {
      auto r = residual.row(i);
      auto v = books.levels.back().row(assign(r, books.levels.back()));
      for (std::size_t j = 0; j < r.size(); ++j) r[j] -= v[j];
    }
  }
  return books;
}

// Graph handles for one batch pushed through the residual recursion.
struct QuantizerNodes {
  std::vector<ad::Var> residuals;   // r_0..r_m, each [B, d]
  std::vector<ad::Var> selected;    // chosen codebook rows v_l, differentiable w.r.t. the codebook
  std::vector<ad::Var> surrogates;  // straight-through surrogates
};

// codes[level][row] fixes the selected rows. The residual chain subtracts
// sg[v], so codebooks only receive gradient through the commitment term that
// reads `selected` directly.
inline QuantizerNodes build_quantizer(ad::Graph& g, ad::Var z, const std::vector<ad::Var>& codebooks,
                                      const std::vector<std::vector<std::size_t>>& codes) {
  if (codes.size() != codebooks.size()) fail<ShapeError>("build_quantizer: ", codes.size(), " code levels for ", codebooks.size(), " codebooks");
  QuantizerNodes q;
  q.residuals.push_back(z);
  for (std::size_t l = 0; l < codebooks.size(); ++l) {
    const ad::Var r = q.residuals.back();
    const ad::Var v = g.gather(codebooks[l], codes[l]);
    const ad::Var v_stop = g.stop_gradient(v);
    // r + sg[v - r], arranged as sg[v] + (r - sg[r]) so the forward value is
    // exactly the codebook row while the gradient is the identity on r.
    q.surrogates.push_back(g.label(g.add(v_stop, g.sub(r, g.stop_gradient(r))), "surrogate." + std::to_string(l)));
    q.selected.push_back(v);
    q.residuals.push_back(g.sub(r, v_stop));
  }
  return q;
}

// Batch mean of sum_l ||sg[r_l] - v_l||^2 + alpha ||r_l - sg[v_l]||^2.
inline ad::Var build_loss_q(ad::Graph& g, const QuantizerNodes& q, double alpha, std::size_t batch) {
  require(alpha >= 0.0, "commitment weight alpha must be >= 0, got ", alpha);
  require(batch >= 1, "loss_q: empty batch");
  std::vector<ad::Var> terms;
  for (std::size_t l = 0; l < q.selected.size(); ++l) {
    const ad::Var r = q.residuals[l];
    const ad::Var v = q.selected[l];
    const ad::Var codebook_term = g.squared_norm(g.sub(g.stop_gradient(r), v));
    const ad::Var commit_term = g.scale(g.squared_norm(g.sub(r, g.stop_gradient(v))), alpha);
    terms.push_back(g.add(codebook_term, commit_term));
  }
  ad::Var total = terms.front();
  for (std::size_t l = 1; l < terms.size(); ++l) total = g.add(total, terms[l]);
  return g.label(g.scale(total, 1.0 / static_cast<double>(batch)), "loss_q");
}

// L_Q for one assignment, from its residual trace and chosen rows.
inline double loss_q(const CodeAssignment& a, double alpha) {
  ad::Graph g;
  QuantizerNodes q;
  ad::Bindings in;
  for (std::size_t l = 0; l < a.codes.size(); ++l) {
    const std::string rn = "r." + std::to_string(l), vn = "v." + std::to_string(l);
    q.residuals.push_back(g.input(rn));
    q.selected.push_back(g.input(vn));
    in[rn] = Tensor(Shape{1, a.residuals[l].size()}, a.residuals[l]);
    in[vn] = Tensor(Shape{1, a.surrogates[l].size()}, a.surrogates[l]);
  }
  return ad::eval(g, in, build_loss_q(g, q, alpha, 1)).output().item();
}

}  // namespace hiercode
