#pragma once

// Generative structural reconstruction: a small pre-norm causal transformer
// reads the per-level surrogates followed by learnable query slots, and the
// outputs at the query slots reconstruct the entity embedding and its
// ancestor centroids.

#include <cmath>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "hiercode/autodiff.hpp"
#include "hiercode/error.hpp"
#include "hiercode/rq.hpp"
#include "hiercode/tensor.hpp"

namespace hiercode {

struct DecoderConfig {
  std::size_t dim = 16;       // model width, equal to the code dimension
  std::size_t out_dim = 16;   // reconstruction target width
  std::size_t levels = 3;     // m, number of surrogate slots
  std::size_t recon_count = 5;  // L; there are L + 1 query slots
  std::size_t layers = 2;
  std::size_t heads = 4;
  std::size_t ffn_mult = 4;

  std::size_t num_queries() const { return recon_count + 1; }
  std::size_t seq_len() const { return levels + num_queries(); }
  void validate() const {
    require(levels >= 1, "decoder needs at least one code level");
    require(heads >= 1 && dim % heads == 0, "decoder heads (", heads, ") must divide dim (", dim, ")");
    require(ffn_mult >= 1, "decoder ffn_mult must be >= 1");
  }
};

namespace detail {
inline std::string dec(std::size_t layer, const char* what) {
  return "dec." + std::to_string(layer) + "." + what;
}
}  // namespace detail

template <typename Rng>
void init_decoder(ParamSet& params, const DecoderConfig& cfg, Rng& rng) {
  cfg.validate();
  const std::size_t d = cfg.dim, f = cfg.dim * cfg.ffn_mult;
  auto glorot = [&](std::size_t in, std::size_t out) {
    const double b = std::sqrt(6.0 / static_cast<double>(in + out));
    return Tensor::uniform(Shape{in, out}, -b, b, rng);
  };
  params["dec.query"] = Tensor::uniform(Shape{cfg.num_queries(), d}, -0.5, 0.5, rng);
  params["dec.pos"] = Tensor::uniform(Shape{cfg.seq_len(), d}, -0.1, 0.1, rng);
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    params[detail::dec(l, "ln1.g")] = Tensor(Shape{d}, 1.0);
    params[detail::dec(l, "ln1.b")] = Tensor(Shape{d}, 0.0);
    params[detail::dec(l, "wq")] = glorot(d, d);
    params[detail::dec(l, "wk")] = glorot(d, d);
    params[detail::dec(l, "wv")] = glorot(d, d);
    params[detail::dec(l, "wo")] = glorot(d, d);
    params[detail::dec(l, "ln2.g")] = Tensor(Shape{d}, 1.0);
    params[detail::dec(l, "ln2.b")] = Tensor(Shape{d}, 0.0);
    params[detail::dec(l, "ff1.w")] = glorot(d, f);
    params[detail::dec(l, "ff1.b")] = Tensor(Shape{f}, 0.0);
    params[detail::dec(l, "ff2.w")] = glorot(f, d);
    params[detail::dec(l, "ff2.b")] = Tensor(Shape{d}, 0.0);
  }
  params["dec.lnf.g"] = Tensor(Shape{d}, 1.0);
  params["dec.lnf.b"] = Tensor(Shape{d}, 0.0);
  params["dec.out.w"] = glorot(d, cfg.out_dim);
  params["dec.out.b"] = Tensor(Shape{cfg.out_dim}, 0.0);
}

// Runs the decoder stack over a [B, T, dim] sequence (positions already
// added) and returns the projected [B, T, out_dim] outputs at every position.
inline ad::Var build_decoder_stack(ad::Graph& g, ad::Var x, std::size_t batch, const DecoderConfig& cfg) {
  cfg.validate();
  const std::size_t t = cfg.seq_len(), d = cfg.dim;
  const Shape flat{batch * t, d}, seq{batch, t, d};
  const auto mask = ad::causal_mask(t);
  auto proj = [&](ad::Var h, const std::string& w) { return g.reshape(g.matmul(g.reshape(h, flat), g.input(w)), seq); };
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    const ad::Var h = g.layer_norm(x, g.input(detail::dec(l, "ln1.g")), g.input(detail::dec(l, "ln1.b")));
    const ad::Var att = g.attention(proj(h, detail::dec(l, "wq")), proj(h, detail::dec(l, "wk")),
                                    proj(h, detail::dec(l, "wv")), cfg.heads, mask);
    x = g.add(x, proj(att, detail::dec(l, "wo")));
    const ad::Var h2 = g.reshape(g.layer_norm(x, g.input(detail::dec(l, "ln2.g")), g.input(detail::dec(l, "ln2.b"))), flat);
    const ad::Var ff = g.relu(g.add(g.matmul(h2, g.input(detail::dec(l, "ff1.w"))), g.input(detail::dec(l, "ff1.b"))));
    const ad::Var ff2 = g.add(g.matmul(ff, g.input(detail::dec(l, "ff2.w"))), g.input(detail::dec(l, "ff2.b")));
    x = g.add(x, g.reshape(ff2, seq));
  }
  const ad::Var hf = g.reshape(g.layer_norm(x, g.input("dec.lnf.g"), g.input("dec.lnf.b")), flat);
  const ad::Var out = g.add(g.matmul(hf, g.input("dec.out.w")), g.input("dec.out.b"));
  return g.reshape(out, Shape{batch, t, cfg.out_dim});
}

// Input sequence [v_0 .. v_{m-1}, q_0 .. q_L] plus learned positions, [B, T, dim].
inline ad::Var build_decoder_input(ad::Graph& g, std::span<const ad::Var> surrogates, std::size_t batch,
                                   const DecoderConfig& cfg) {
  if (surrogates.size() != cfg.levels)
    fail<ShapeError>("decoder expects ", cfg.levels, " surrogate levels, got ", surrogates.size());
  std::vector<ad::Var> parts;
  for (ad::Var v : surrogates) parts.push_back(g.reshape(v, Shape{batch, 1, cfg.dim}));
  std::vector<std::size_t> tile;
  tile.reserve(batch * cfg.num_queries());
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t j = 0; j < cfg.num_queries(); ++j) tile.push_back(j);
  parts.push_back(g.reshape(g.gather(g.input("dec.query"), std::move(tile)), Shape{batch, cfg.num_queries(), cfg.dim}));
  return g.add(g.concat(parts, 1), g.input("dec.pos"));
}

// Outputs o_0..o_L at the query slots, [B, L+1, out_dim].
inline ad::Var build_decode(ad::Graph& g, std::span<const ad::Var> surrogates, std::size_t batch,
                            const DecoderConfig& cfg) {
  const ad::Var all = build_decoder_stack(g, build_decoder_input(g, surrogates, batch, cfg), batch, cfg);
  const std::size_t t = cfg.seq_len();
  std::vector<std::size_t> rows;
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t j = 0; j < cfg.num_queries(); ++j) rows.push_back(b * t + cfg.levels + j);
  const ad::Var flat = g.reshape(all, Shape{batch * t, cfg.out_dim});
  return g.label(g.reshape(g.gather(flat, std::move(rows)), Shape{batch, cfg.num_queries(), cfg.out_dim}), "gsr.outputs");
}

struct GsrWeights {
  double lambda_s = 1.0;
  double lambda_h = 1.0;
  // Pair o_i with h_i (i >= 1) instead of h_{i-1}; needs L+1 ancestor targets.
  bool prose_indexing = false;
};

// Batch mean of ||o_0 - s||^2 + lambda_s ||o_1 - h_0||^2 + lambda_h sum_{i>=2} ||o_i - h_{i-1}||^2.
// `ancestors` is [B, A, out_dim] with A = L (or L + 1 under prose indexing).
inline ad::Var build_loss_gsr(ad::Graph& g, ad::Var outputs, const Tensor& entity, const Tensor& ancestors,
                              std::size_t recon_count, const GsrWeights& w) {
  if (entity.rank() != 2) fail<ShapeError>("loss_gsr: entity targets must be [B, d]");
  const std::size_t batch = entity.dim(0), d = entity.dim(1), q = recon_count + 1;
  const std::size_t want = w.prose_indexing ? recon_count + 1 : recon_count;
  if (ancestors.rank() != 3 || ancestors.dim(0) != batch || ancestors.dim(1) != want || ancestors.dim(2) != d)
    fail<ShapeError>("loss_gsr: ancestor targets ", shape_str(ancestors.shape), " do not match [", batch, ",", want,
                     ",", d, "] for ", q, " outputs");
  Tensor target(Shape{batch * q, d});
  Tensor weight(Shape{batch * q});
  for (std::size_t b = 0; b < batch; ++b) {
    auto src = entity.row(b);
    std::copy(src.begin(), src.end(), target.row(b * q).begin());
    weight.data[b * q] = 1.0;
    for (std::size_t i = 1; i < q; ++i) {
      const std::size_t a = w.prose_indexing ? i : i - 1;
      const double* h = ancestors.data.data() + (b * want + a) * d;
      std::copy(h, h + d, target.row(b * q + i).begin());
      weight.data[b * q + i] = i == 1 ? w.lambda_s : w.lambda_h;
    }
  }
  const ad::Var diff = g.sub(g.reshape(outputs, Shape{batch * q, d}), g.constant(std::move(target)));
  const ad::Var per_row = g.sum_last(g.mul(diff, diff));
  const ad::Var total = g.sum(g.mul(per_row, g.constant(std::move(weight))));
  return g.label(g.scale(total, 1.0 / static_cast<double>(batch)), "loss_gsr");
}

// Value-level decode: surrogates[i] is the [B, dim] batch for level i.
inline Tensor decode(const std::vector<Tensor>& surrogates, const ParamSet& params, const DecoderConfig& cfg) {
  if (surrogates.empty()) fail<ShapeError>("decode: no surrogate levels");
  ad::Graph g;
  ad::Bindings in = params;
  std::vector<ad::Var> vars;
  for (std::size_t i = 0; i < surrogates.size(); ++i) {
    const std::string name = "v." + std::to_string(i);
    vars.push_back(g.input(name, false));
    in[name] = surrogates[i];
  }
  return ad::eval(g, in, build_decode(g, vars, surrogates[0].dim(0), cfg)).output();
}

// loss_gsr on explicit outputs (o as [B, L+1, d]).
inline double loss_gsr(const Tensor& outputs, const Tensor& entity, const Tensor& ancestors, std::size_t recon_count,
                       const GsrWeights& w) {
  ad::Graph g;
  const ad::Var o = g.input("o");
  return ad::eval(g, {{"o", outputs}}, build_loss_gsr(g, o, entity, ancestors, recon_count, w)).output().item();
}

}  // namespace hiercode
