#pragma once

// Structural knowledge-graph embeddings: four scoring backbones, margin-ranking
// training with uniform corruption, and a binary container.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "hiercode/binary_io.hpp"
#include "hiercode/kg_data.hpp"
#include "hiercode/tensor.hpp"

namespace hiercode {

enum class Backbone : std::uint32_t { Translate = 0, Rotate = 1, ComplexBilinear = 2, BilinearDiag = 3 };

inline const char* backbone_name(Backbone b) {
  switch (b) {
    case Backbone::Translate: return "translate";
    case Backbone::Rotate: return "rotate";
    case Backbone::ComplexBilinear: return "complex";
    case Backbone::BilinearDiag: return "distmult";
  }
  return "?";
}

inline Backbone parse_backbone(const std::string& s) {
  if (s == "translate" || s == "transe") return Backbone::Translate;
  if (s == "rotate") return Backbone::Rotate;
  if (s == "complex") return Backbone::ComplexBilinear;
  if (s == "distmult" || s == "bilinear-diag") return Backbone::BilinearDiag;
  fail<ConfigError>("unknown backbone '", s, "' (translate, rotate, complex, distmult)");
}

// Width of a relation vector for entity dimension d.
inline std::size_t relation_dim(Backbone b, std::size_t d) { return b == Backbone::Rotate ? d / 2 : d; }

// Plausibility of (h, r, t); larger is more plausible. Complex-valued
// backbones store the real parts in the first half and imaginary parts in the
// second half of each entity vector. Rotation relations are phases.
inline double score(Backbone b, std::span<const double> h, std::span<const double> r, std::span<const double> t) {
  const std::size_t d = h.size();
  switch (b) {
    case Backbone::Translate: {
      double s = 0.0;
      for (std::size_t i = 0; i < d; ++i) {
        const double x = h[i] + r[i] - t[i];
        s += x * x;
      }
      return -std::sqrt(s);
    }
    case Backbone::Rotate: {
      const std::size_t half = d / 2;
      double s = 0.0;
      for (std::size_t k = 0; k < half; ++k) {
        const double c = std::cos(r[k]), sn = std::sin(r[k]);
        const double a = h[k] * c - h[k + half] * sn - t[k];
        const double bb = h[k] * sn + h[k + half] * c - t[k + half];
        s += std::sqrt(a * a + bb * bb);
      }
      return -s;
    }
    case Backbone::ComplexBilinear: {
      const std::size_t half = d / 2;
      double s = 0.0;
      for (std::size_t k = 0; k < half; ++k) {
        const double hr = h[k], hi = h[k + half], rr = r[k], ri = r[k + half], tr = t[k], ti = t[k + half];
        s += hr * rr * tr + hi * rr * ti + hr * ri * ti - hi * ri * tr;
      }
      return s;
    }
    case Backbone::BilinearDiag: {
      double s = 0.0;
      for (std::size_t i = 0; i < d; ++i) s += h[i] * r[i] * t[i];
      return s;
    }
  }
  return 0.0;
}

// Adds coeff * d score / d{h,r,t} into the gradient spans.
inline void score_grad(Backbone b, std::span<const double> h, std::span<const double> r, std::span<const double> t,
                       double coeff, std::span<double> gh, std::span<double> gr, std::span<double> gt) {
  const std::size_t d = h.size();
  switch (b) {
    case Backbone::Translate: {
      double n2 = 0.0;
      for (std::size_t i = 0; i < d; ++i) n2 += (h[i] + r[i] - t[i]) * (h[i] + r[i] - t[i]);
      const double n = std::sqrt(n2);
      if (n == 0.0) return;
      for (std::size_t i = 0; i < d; ++i) {
        const double g = -coeff * (h[i] + r[i] - t[i]) / n;
        gh[i] += g;
        gr[i] += g;
        gt[i] -= g;
      }
      return;
    }
    case Backbone::Rotate: {
      const std::size_t half = d / 2;
      for (std::size_t k = 0; k < half; ++k) {
        const double c = std::cos(r[k]), sn = std::sin(r[k]);
        const double hr = h[k], hi = h[k + half];
        const double a = hr * c - hi * sn - t[k];
        const double bb = hr * sn + hi * c - t[k + half];
        const double m = std::sqrt(a * a + bb * bb);
        if (m == 0.0) continue;
        const double ga = -coeff * a / m, gb = -coeff * bb / m;
        gh[k] += ga * c + gb * sn;
        gh[k + half] += -ga * sn + gb * c;
        gr[k] += ga * (-hr * sn - hi * c) + gb * (hr * c - hi * sn);
        gt[k] -= ga;
        gt[k + half] -= gb;
      }
      return;
    }
    case Backbone::ComplexBilinear: {
      const std::size_t half = d / 2;
      for (std::size_t k = 0; k < half; ++k) {
        const double hr = h[k], hi = h[k + half], rr = r[k], ri = r[k + half], tr = t[k], ti = t[k + half];
        gh[k] += coeff * (rr * tr + ri * ti);
        gh[k + half] += coeff * (rr * ti - ri * tr);
        gr[k] += coeff * (hr * tr + hi * ti);
        gr[k + half] += coeff * (hr * ti - hi * tr);
        gt[k] += coeff * (hr * rr - hi * ri);
        gt[k + half] += coeff * (hi * rr + hr * ri);
      }
      return;
    }
    case Backbone::BilinearDiag: {
      for (std::size_t i = 0; i < d; ++i) {
        gh[i] += coeff * r[i] * t[i];
        gr[i] += coeff * h[i] * t[i];
        gt[i] += coeff * h[i] * r[i];
      }
      return;
    }
  }
}

struct StructEmbedding {
  Backbone backbone = Backbone::Translate;
  Tensor entities;   // [|E|, d]
  Tensor relations;  // [|R|, relation_dim]

  std::size_t dim() const { return entities.dim(1); }
  double score(EntityId h, RelationId r, EntityId t) const {
    return hiercode::score(backbone, entities.row(h), relations.row(r), entities.row(t));
  }
};

struct StructTrainConfig {
  Backbone backbone = Backbone::Translate;
  std::size_t dim = 16;
  double margin = 1.0;
  std::size_t neg_per_pos = 4;
  double lr = 0.01;
  std::size_t steps = 500;
  std::uint64_t seed = 0;
  std::size_t batch_size = 128;
};

struct StructTrainResult {
  StructEmbedding embedding;
  std::vector<double> loss_trace;  // mean hinge loss per step
};

inline double wrap_phase(double x) {
  constexpr double pi = std::numbers::pi;
  x = std::fmod(x + pi, 2.0 * pi);
  if (x < 0.0) x += 2.0 * pi;
  return x - pi;
}

// Margin ranking: max(0, margin - f(pos) + f(neg)), one uniform head-or-tail
// corruption per negative, Adam on dense tables. Translate-backbone entities
// are projected back onto the unit ball after every step.
inline StructTrainResult train_struct(const KgDataset& ds, const StructTrainConfig& cfg) {
  require(cfg.steps >= 1, "train_struct: steps must be >= 1");
  require(cfg.dim >= 1, "train_struct: dim must be >= 1");
  require(!((cfg.backbone == Backbone::Rotate || cfg.backbone == Backbone::ComplexBilinear) && cfg.dim % 2 != 0),
          "train_struct: backbone '", backbone_name(cfg.backbone), "' needs an even dim, got ", cfg.dim);
  require(!ds.train.empty(), "train_struct: empty train split");
  require(cfg.lr > 0.0 && cfg.margin >= 0.0 && cfg.neg_per_pos >= 1 && cfg.batch_size >= 1,
          "train_struct: lr, margin, neg_per_pos and batch_size must be positive");

  std::mt19937_64 rng(cfg.seed);
  const std::size_t ne = ds.num_entities(), nr = ds.num_relations(), d = cfg.dim;
  const std::size_t dr = relation_dim(cfg.backbone, d);
  const double bound = 6.0 / std::sqrt(static_cast<double>(d));
  StructTrainResult res;
  auto& emb = res.embedding;
  emb.backbone = cfg.backbone;
  emb.entities = Tensor::uniform(Shape{ne, d}, -bound, bound, rng);
  emb.relations = cfg.backbone == Backbone::Rotate
                      ? Tensor::uniform(Shape{nr, dr}, -std::numbers::pi, std::numbers::pi, rng)
                      : Tensor::uniform(Shape{nr, dr}, -bound, bound, rng);

  auto project = [&](std::size_t e) {
    if (cfg.backbone != Backbone::Translate) return;
    auto row = emb.entities.row(e);
    double n = std::sqrt(dot(row, row));
    if (n > 1.0)
      for (auto& x : row) x /= n;
  };
  for (std::size_t e = 0; e < ne; ++e) project(e);

  Tensor ge(emb.entities.shape), gr(emb.relations.shape);
  Tensor me(ge.shape), ve(ge.shape), mr(gr.shape), vr(gr.shape);
  constexpr double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
  std::uniform_int_distribution<std::size_t> pick_triple(0, ds.train.size() - 1);
  std::uniform_int_distribution<std::size_t> pick_entity(0, ne - 1);
  std::bernoulli_distribution coin(0.5);

  for (std::size_t step = 1; step <= cfg.steps; ++step) {
    std::fill(ge.data.begin(), ge.data.end(), 0.0);
    std::fill(gr.data.begin(), gr.data.end(), 0.0);
    double loss = 0.0;
    const std::size_t pairs = cfg.batch_size * cfg.neg_per_pos;
    const double w = 1.0 / static_cast<double>(pairs);
    for (std::size_t b = 0; b < cfg.batch_size; ++b) {
      const Triple pos = ds.train[pick_triple(rng)];
      const double fp = emb.score(pos.head, pos.relation, pos.tail);
      for (std::size_t k = 0; k < cfg.neg_per_pos; ++k) {
        Triple neg = pos;
        (coin(rng) ? neg.head : neg.tail) = static_cast<EntityId>(pick_entity(rng));
        const double fn = emb.score(neg.head, neg.relation, neg.tail);
        const double hinge = cfg.margin - fp + fn;
        if (hinge <= 0.0) continue;
        loss += hinge * w;
        // d loss / d f(pos) = -w, d loss / d f(neg) = +w
        score_grad(cfg.backbone, emb.entities.row(pos.head), emb.relations.row(pos.relation),
                   emb.entities.row(pos.tail), -w, ge.row(pos.head), gr.row(pos.relation), ge.row(pos.tail));
        score_grad(cfg.backbone, emb.entities.row(neg.head), emb.relations.row(neg.relation),
                   emb.entities.row(neg.tail), w, ge.row(neg.head), gr.row(neg.relation), ge.row(neg.tail));
      }
    }
    if (!std::isfinite(loss)) fail<NonFiniteError>("train_struct: non-finite loss at step ", step);
    res.loss_trace.push_back(loss);

    const double c1 = 1.0 - std::pow(beta1, static_cast<double>(step));
    const double c2 = 1.0 - std::pow(beta2, static_cast<double>(step));
    auto adam = [&](Tensor& p, const Tensor& g, Tensor& m, Tensor& v) {
      for (std::size_t i = 0; i < p.size(); ++i) {
        m.data[i] = beta1 * m.data[i] + (1.0 - beta1) * g.data[i];
        v.data[i] = beta2 * v.data[i] + (1.0 - beta2) * g.data[i] * g.data[i];
        p.data[i] -= cfg.lr * (m.data[i] / c1) / (std::sqrt(v.data[i] / c2) + adam_eps);
      }
    };
    adam(emb.entities, ge, me, ve);
    adam(emb.relations, gr, mr, vr);
    for (std::size_t e = 0; e < ne; ++e) project(e);
    if (cfg.backbone == Backbone::Rotate)
      for (auto& x : emb.relations.data) x = wrap_phase(x);
  }
  return res;
}

inline constexpr std::uint32_t kStructMagic = 0x45534348;  // "HCSE"
inline constexpr std::uint32_t kStructVersion = 1;

inline std::vector<char> encode_struct(const StructEmbedding& s) {
  io::ByteWriter w;
  w.u32(kStructMagic);
  w.u32(kStructVersion);
  w.u32(static_cast<std::uint32_t>(s.backbone));
  w.u32(static_cast<std::uint32_t>(s.entities.dim(0)));
  w.u32(static_cast<std::uint32_t>(s.entities.dim(1)));
  w.u32(static_cast<std::uint32_t>(s.relations.dim(0)));
  w.u32(static_cast<std::uint32_t>(s.relations.dim(1)));
  for (double x : s.entities.data) w.f64(x);
  for (double x : s.relations.data) w.f64(x);
  return w.take();
}

inline StructEmbedding decode_struct(const std::vector<char>& bytes, const std::string& what = "struct embedding") {
  io::ByteReader r(bytes, what);
  if (r.u32() != kStructMagic) fail<IoError>(what, ": bad magic");
  if (const auto v = r.u32(); v != kStructVersion) fail<IoError>(what, ": unsupported version ", v);
  StructEmbedding s;
  const auto tag = r.u32();
  if (tag > 3) fail<IoError>(what, ": unknown backbone tag ", tag);
  s.backbone = static_cast<Backbone>(tag);
  const std::size_t ne = r.u32(), d = r.u32(), nr = r.u32(), dr = r.u32();
  if (r.remaining() != (ne * d + nr * dr) * 8) fail<IoError>(what, ": payload size does not match header");
  s.entities = Tensor(Shape{ne, d});
  s.relations = Tensor(Shape{nr, dr});
  for (auto& x : s.entities.data) x = r.f64();
  for (auto& x : s.relations.data) x = r.f64();
  return s;
}

inline void save_struct(const StructEmbedding& s, const std::string& path) { io::write_file(path, encode_struct(s)); }
inline StructEmbedding load_struct(const std::string& path) { return decode_struct(io::read_file(path), path); }

}  // namespace hiercode
