#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "hiercode/fusion.hpp"
#include "hiercode/kg_data.hpp"
#include "hiercode/struct_embedding.hpp"
#include "support/generators.hpp"

namespace hiercode {
namespace {

using testing::Gen;

TEST(Fuse, Boundaries) {
  Gen gen(1);
  const Tensor s = gen.tensor({5, 3});
  const auto text = FeatureTable::from_rows({gen.vec(3), gen.vec(3), gen.vec(3), gen.vec(3), gen.vec(3)});
  EXPECT_EQ(fuse(s, text, {1.0}).vectors, s);
  EXPECT_EQ(fuse(s, text, {0.0}).vectors, text.vectors);
}

TEST(Fuse, HalfwayExample) {
  const auto out = fuse(Tensor::matrix({{2, 0}}), FeatureTable::from_rows({{0, 2}}), {0.5});
  EXPECT_EQ(out.vectors.data, (std::vector<double>{1, 1}));
}

TEST(Fuse, LinearInBothArguments) {
  Gen gen(2);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = gen.index(1, 6), d = gen.index(1, 5);
    const double rho = gen.uniform(0, 1);
    const Tensor a = gen.grid_tensor({n, d}), c = gen.grid_tensor({n, d});
    const Tensor b = gen.grid_tensor({n, d}), e = gen.grid_tensor({n, d});
    Tensor ac(a.shape), be(b.shape);
    for (std::size_t i = 0; i < a.size(); ++i) {
      ac.data[i] = a.data[i] + c.data[i];
      be.data[i] = b.data[i] + e.data[i];
    }
    auto ft = [](const Tensor& t) {
      FeatureTable f;
      f.vectors = t;
      f.present.assign(t.dim(0), 1);
      return f;
    };
    const auto lhs1 = fuse(a, ft(b), {rho}).vectors, lhs2 = fuse(c, ft(e), {rho}).vectors;
    const auto rhs = fuse(ac, ft(be), {rho}).vectors;
    for (std::size_t i = 0; i < rhs.size(); ++i) EXPECT_NEAR(lhs1.data[i] + lhs2.data[i], rhs.data[i], 1e-12);
  }
}

TEST(Fuse, Errors) {
  const auto text = FeatureTable::from_rows({{0, 2}});
  EXPECT_THROW(fuse(Tensor::matrix({{2, 0}}), text, {1.5}), ConfigError);
  EXPECT_THROW(fuse(Tensor::matrix({{2, 0}}), text, {-0.1}), ConfigError);
  EXPECT_THROW(fuse(Tensor::matrix({{2, 0, 1}}), text, {0.5}), ShapeError);
}

TEST(Fuse, MissingTextNeedsFallback) {
  FeatureTable text = FeatureTable::from_rows({{0, 2}, {4, 4}});
  text.present[1] = 0;
  const Tensor s = Tensor::matrix({{2, 0}, {6, 8}});
  EXPECT_THROW(fuse(s, text, {0.5, false}), Error);
  const auto out = fuse(s, text, {0.5, true});
  EXPECT_EQ(out.used_fallback, (std::vector<unsigned char>{0, 1}));
  EXPECT_EQ(out.vectors.data, (std::vector<double>{1, 1, 6, 8}));
}

TEST(Score, HandValues) {
  const std::vector<double> h{1, 0}, t{0, 1};
  EXPECT_DOUBLE_EQ(score(Backbone::Translate, h, std::vector<double>{-1, 1}, t), 0.0);
  EXPECT_DOUBLE_EQ(score(Backbone::Translate, h, std::vector<double>{0, 0}, t), -std::sqrt(2.0));
  EXPECT_DOUBLE_EQ(score(Backbone::BilinearDiag, std::vector<double>{1, 2}, std::vector<double>{3, 4}, std::vector<double>{5, 6}),
                   1 * 3 * 5 + 2 * 4 * 6);
  // Rotating 1 + 0i by pi/2 lands on 0 + 1i.
  EXPECT_NEAR(score(Backbone::Rotate, h, std::vector<double>{std::numbers::pi / 2}, t), 0.0, 1e-15);
  // Re(h * r * conj(t)) with h = 1 + 2i, r = 3 - i, t = 2 + i: h r = 5 + 5i, times (2 - i) = 15 + 5i.
  EXPECT_DOUBLE_EQ(score(Backbone::ComplexBilinear, std::vector<double>{1, 2}, std::vector<double>{3, -1},
                         std::vector<double>{2, 1}),
                   15.0);
}

TEST(Score, GradientsMatchFiniteDifferences) {
  Gen gen(3);
  for (Backbone b : {Backbone::Translate, Backbone::Rotate, Backbone::ComplexBilinear, Backbone::BilinearDiag}) {
    for (int trial = 0; trial < 20; ++trial) {
      const std::size_t d = 2 * gen.index(1, 3);
      auto h = gen.vec(d), t = gen.vec(d), r = gen.vec(relation_dim(b, d));
      std::vector<double> gh(d, 0.0), gt(d, 0.0), gr(r.size(), 0.0);
      score_grad(b, h, r, t, 1.0, gh, gr, gt);
      auto check = [&](std::vector<double>& x, const std::vector<double>& g) {
        for (std::size_t i = 0; i < x.size(); ++i) {
          const double keep = x[i];
          x[i] = keep + 1e-6;
          const double up = score(b, h, r, t);
          x[i] = keep - 1e-6;
          const double down = score(b, h, r, t);
          x[i] = keep;
          EXPECT_NEAR(g[i], (up - down) / 2e-6, 1e-5) << backbone_name(b);
        }
      };
      check(h, gh);
      check(t, gt);
      check(r, gr);
    }
  }
}

KgDataset small_kg() {
  SynthConfig cfg;
  cfg.per_leaf = 10;
  cfg.seed = 5;
  return synth_hier_kg(cfg).dataset;
}

TEST(TrainStruct, Preconditions) {
  const auto ds = small_kg();
  StructTrainConfig cfg;
  cfg.steps = 0;
  EXPECT_THROW(train_struct(ds, cfg), ConfigError);
  cfg.steps = 1;
  cfg.backbone = Backbone::Rotate;
  cfg.dim = 5;
  EXPECT_THROW(train_struct(ds, cfg), ConfigError);
  KgDataset empty;
  empty.entities = Vocabulary({"a"});
  empty.relations = Vocabulary({"r"});
  EXPECT_THROW(train_struct(empty, StructTrainConfig{}), ConfigError);
}

TEST(TrainStruct, DeterministicUnderSeed) {
  const auto ds = small_kg();
  StructTrainConfig cfg;
  cfg.steps = 30;
  cfg.seed = 9;
  const auto a = train_struct(ds, cfg), b = train_struct(ds, cfg);
  EXPECT_EQ(encode_struct(a.embedding), encode_struct(b.embedding));
  EXPECT_EQ(a.loss_trace, b.loss_trace);
}

TEST(TrainStruct, EveryBackboneTrainsFinite) {
  const auto ds = small_kg();
  for (Backbone b : {Backbone::Translate, Backbone::Rotate, Backbone::ComplexBilinear, Backbone::BilinearDiag}) {
    StructTrainConfig cfg;
    cfg.backbone = b;
    cfg.steps = 60;
    const auto res = train_struct(ds, cfg);
    ASSERT_EQ(res.loss_trace.size(), 60u);
    for (double l : res.loss_trace) EXPECT_TRUE(std::isfinite(l));
    EXPECT_TRUE(res.embedding.entities.all_finite());
    EXPECT_LT(res.loss_trace.back(), res.loss_trace.front()) << backbone_name(b);
    if (b == Backbone::Rotate)
      for (double p : res.embedding.relations.data) {
        EXPECT_GE(p, -std::numbers::pi);
        EXPECT_LT(p, std::numbers::pi);
      }
  }
}

TEST(TrainStruct, TranslateSeparatesTrueFromCorrupted) {
  SynthConfig sc;
  const auto kg = synth_hier_kg(sc);
  StructTrainConfig cfg;
  cfg.dim = 16;
  cfg.steps = 500;
  const auto res = train_struct(kg.dataset, cfg);
  std::mt19937_64 rng(77);
  std::uniform_int_distribution<std::size_t> pick(0, kg.dataset.train.size() - 1), ent(0, kg.dataset.num_entities() - 1);
  std::bernoulli_distribution coin(0.5);
  double pos = 0.0, neg = 0.0;
  int satisfied = 0, ordered = 0;
  for (int i = 0; i < 1000; ++i) {
    const Triple t = kg.dataset.train[pick(rng)];
    Triple c = t;
    (coin(rng) ? c.head : c.tail) = static_cast<EntityId>(ent(rng));
    const double fp = res.embedding.score(t.head, t.relation, t.tail), fn = res.embedding.score(c.head, c.relation, c.tail);
    pos += fp;
    neg += fn;
    satisfied += fp - fn >= cfg.margin ? 1 : 0;
    ordered += fp > fn ? 1 : 0;
  }
  EXPECT_GT(pos, neg);
  EXPECT_GE(ordered, 900);
  // Corruptions inside the true tail's own cluster are nearly true triples and
  // often stay within the margin.
  EXPECT_GE(satisfied, 750);
}

TEST(StructEmbedding, SerializationRoundTrip) {
  const auto ds = small_kg();
  StructTrainConfig cfg;
  cfg.backbone = Backbone::Rotate;
  cfg.steps = 5;
  const auto emb = train_struct(ds, cfg).embedding;
  const auto back = decode_struct(encode_struct(emb));
  EXPECT_EQ(back.backbone, emb.backbone);
  EXPECT_EQ(back.entities, emb.entities);
  EXPECT_EQ(back.relations, emb.relations);
  auto bytes = encode_struct(emb);
  bytes.resize(bytes.size() - 3);
  EXPECT_THROW(decode_struct(bytes), IoError);
}

}  // namespace
}  // namespace hiercode
