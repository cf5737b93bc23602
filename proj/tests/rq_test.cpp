#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "hiercode/rq.hpp"
#include "support/generators.hpp"
#include "support/oracles.hpp"

namespace hiercode {
namespace {

using testing::Gen;

std::vector<std::vector<double>> rows_of(const Tensor& t) {
  std::vector<std::vector<double>> out;
  for (std::size_t i = 0; i < t.rows(); ++i) out.emplace_back(t.row(i).begin(), t.row(i).end());
  return out;
}

TEST(Encode, ZeroWeightsGiveZero) {
  EncoderConfig cfg{3, {4}, 2};
  ParamSet p;
  for (std::size_t k = 0; k < cfg.num_layers(); ++k) {
    p[encoder_weight(k)] = Tensor({cfg.width(k), cfg.width(k + 1)}, 0.0);
    p[encoder_bias(k)] = Tensor({cfg.width(k + 1)}, 0.0);
  }
  const Tensor z = encode(Tensor::matrix({{1, 2, 3}, {-4, 5, 6}}), p, cfg);
  for (double x : z.data) EXPECT_EQ(x, 0.0);
}

TEST(Encode, IdentityLayerThenRelu) {
  // Identity hidden layer followed by relu, then an identity output layer.
  EncoderConfig cfg{2, {2}, 2};
  ParamSet p;
  p[encoder_weight(0)] = Tensor::matrix({{1, 0}, {0, 1}});
  p[encoder_bias(0)] = Tensor::vector({0, 0});
  p[encoder_weight(1)] = Tensor::matrix({{1, 0}, {0, 1}});
  p[encoder_bias(1)] = Tensor::vector({0, 0});
  EXPECT_EQ(encode(Tensor::matrix({{1, -1}}), p, cfg).data, (std::vector<double>{1, 0}));
}

TEST(Encode, DimensionMismatch) {
  EncoderConfig cfg{3, {4}, 2};
  ParamSet p;
  std::mt19937_64 rng(1);
  init_encoder(p, cfg, rng);
  EXPECT_THROW(encode(Tensor::matrix({{1, 2}}), p, cfg), ShapeError);
}

TEST(Encode, WeightsPassGradCheck) {
  Gen gen(4);
  for (int trial = 0; trial < 20; ++trial) {
    EncoderConfig cfg{gen.index(1, 4), {gen.index(1, 4), gen.index(1, 4)}, gen.index(1, 4)};
    ParamSet p;
    init_encoder(p, cfg, gen.rng());
    for (std::size_t k = 0; k < cfg.num_layers(); ++k) p[encoder_bias(k)] = gen.tensor({cfg.width(k + 1)}, -0.5, 0.5);
    ad::Graph g;
    const std::size_t b = gen.index(1, 4);
    p["s"] = gen.tensor({b, cfg.in_dim});
    p["w"] = gen.tensor({b, cfg.out_dim});
    const auto root = g.sum(g.mul(build_encoder(g, g.input("s", false), cfg), g.input("w", false)));
    for (std::size_t k = 0; k < cfg.num_layers(); ++k) {
      EXPECT_LT(ad::grad_check(g, p, root, encoder_weight(k)), 1e-4);
      EXPECT_LT(ad::grad_check(g, p, root, encoder_bias(k)), 1e-4);
    }
  }
}

TEST(Assign, Examples) {
  const Tensor rows = Tensor::matrix({{1, 0}, {0, 1}});
  EXPECT_EQ(assign(std::vector<double>{0.9, 0.1}, rows), 0u);
  EXPECT_EQ(assign(std::vector<double>{0.5, 0.5}, rows), 0u);
  EXPECT_EQ(assign(std::vector<double>{0.2, 0.9}, rows), 1u);
  EXPECT_EQ(assign(std::vector<double>{7, -3}, Tensor::matrix({{0, 0}})), 0u);
}

TEST(Assign, Errors) {
  EXPECT_THROW(assign(std::vector<double>{1}, Tensor({0, 1})), Error);
  EXPECT_THROW(assign(std::vector<double>{1, 2, 3}, Tensor::matrix({{1, 0}})), ShapeError);
}

TEST(Assign, MatchesExhaustiveScan) {
  Gen gen(12);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t k = gen.index(1, 12), d = gen.index(1, 4);
    // Grid values make exact ties common.
    const Tensor book = gen.grid_tensor({k, d}, 2);
    const Tensor r = gen.grid_tensor({d}, 2);
    const std::vector<double> rv(r.data);
    EXPECT_EQ(assign(rv, book), oracle::nearest(rv, rows_of(book)));
  }
}

TEST(Quantize, HandTracedExample) {
  Codebooks books;
  books.levels = {Tensor::matrix({{3, 3}, {0, 0}}), Tensor::matrix({{0, 1}, {1, 0}})};
  const auto a = quantize(std::vector<double>{3, 4}, books);
  EXPECT_EQ(a.codes, (std::vector<std::size_t>{0, 0}));
  ASSERT_EQ(a.residuals.size(), 3u);
  EXPECT_EQ(a.residuals[1], (std::vector<double>{0, 1}));
  EXPECT_EQ(a.residuals[2], (std::vector<double>{0, 0}));
  EXPECT_EQ(a.surrogates[0], (std::vector<double>{3, 3}));
}

TEST(Quantize, ExactMatchLeavesZeroResidual) {
  Codebooks books;
  books.levels = {Tensor::matrix({{0.1, -2.5}, {1.75, 3.3}})};
  const auto a = quantize(std::vector<double>{1.75, 3.3}, books);
  EXPECT_EQ(a.residuals[1], (std::vector<double>{0, 0}));
}

TEST(Quantize, TelescopesAndRecordsChosenRows) {
  Gen gen(21);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t m = gen.index(1, 4), k = gen.index(1, 8), d = gen.index(1, 5);
    Codebooks books;
    for (std::size_t l = 0; l < m; ++l) books.levels.push_back(gen.tensor({k, d}, -2, 2));
    const auto z = gen.vec(d, -3, 3);
    const auto a = quantize(z, books);
    double err = 0.0, norm = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      double sum = a.residuals[m][j];
      for (std::size_t l = 0; l < m; ++l) sum += a.surrogates[l][j];
      err = std::max(err, std::abs(sum - z[j]));
      norm = std::max(norm, std::abs(z[j]));
    }
    EXPECT_LE(err, 1e-9 * std::max(norm, 1.0));
    for (std::size_t l = 0; l < m; ++l) {
      const auto row = books.levels[l].row(a.codes[l]);
      EXPECT_TRUE(std::equal(row.begin(), row.end(), a.surrogates[l].begin()));
      for (std::size_t j = 0; j < d; ++j) EXPECT_EQ(a.residuals[l + 1][j], a.residuals[l][j] - row[j]);
    }
  }
}

TEST(Quantizer, SurrogateForwardEqualsCodebookRow) {
  Gen gen(5);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t m = gen.index(1, 3), k = gen.index(2, 5), d = gen.index(1, 4), b = gen.index(1, 4);
    ad::Graph g;
    ad::Bindings in;
    in["z"] = gen.tensor({b, d}, -2, 2);
    Codebooks books;
    std::vector<ad::Var> cbs;
    for (std::size_t l = 0; l < m; ++l) {
      books.levels.push_back(gen.tensor({k, d}));
      in[codebook_name(l)] = books.levels.back();
      cbs.push_back(g.input(codebook_name(l)));
    }
    const auto codes = assign_codes(in["z"], books);
    const auto q = build_quantizer(g, g.input("z"), cbs, codes);
    ad::Var sum = g.sum(q.surrogates[0]);
    for (std::size_t l = 1; l < m; ++l) sum = g.add(sum, g.sum(q.surrogates[l]));
    const auto ev = ad::eval(g, in, sum);
    for (std::size_t l = 0; l < m; ++l)
      for (std::size_t i = 0; i < b; ++i) {
        const auto row = books.levels[l].row(codes[l][i]);
        const auto got = ev.value(q.surrogates[l]).row(i);
        EXPECT_TRUE(std::equal(row.begin(), row.end(), got.begin()));
      }
    // Each surrogate passes an identity gradient to z: m in total.
    const auto grads = ad::backward(g, ev);
    for (double gz : grads.at("z").data) EXPECT_EQ(gz, static_cast<double>(m));
    EXPECT_LT(ad::grad_check(g, in, sum, "z", 1e-5, true), 1e-4);
  }
}

TEST(LossQ, Examples) {
  CodeAssignment a;
  a.codes = {0};
  a.residuals = {{1, 0}, {1, 0}};
  a.surrogates = {{0, 0}};
  EXPECT_DOUBLE_EQ(loss_q(a, 0.25), 1.25);
  a.surrogates = {{1, 0}};
  EXPECT_EQ(loss_q(a, 0.25), 0.0);
}

TEST(LossQ, GradientRouting) {
  Gen gen(6);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t d = gen.index(1, 4);
    const double alpha = gen.uniform(0.0, 1.0);
    ad::Graph g;
    QuantizerNodes q;
    q.residuals = {g.input("r")};
    q.selected = {g.input("v")};
    const ad::Bindings in{{"r", gen.tensor({1, d})}, {"v", gen.tensor({1, d})}};
    const auto root = build_loss_q(g, q, alpha, 1);
    const auto grads = ad::backward(g, ad::eval(g, in, root));
    for (std::size_t j = 0; j < d; ++j) {
      const double r = in.at("r").data[j], v = in.at("v").data[j];
      EXPECT_NEAR(grads.at("v").data[j], 2.0 * (v - r), 1e-12);
      EXPECT_NEAR(grads.at("r").data[j], 2.0 * alpha * (r - v), 1e-12);
    }
    EXPECT_LT(ad::grad_check(g, in, root, "v", 1e-5, true), 1e-4);
    EXPECT_LT(ad::grad_check(g, in, root, "r", 1e-5, true), 1e-4);
  }
}

TEST(LossQ, NegativeAlphaRejected) {
  CodeAssignment a;
  a.codes = {0};
  a.residuals = {{1}, {1}};
  a.surrogates = {{0}};
  EXPECT_THROW(loss_q(a, -0.1), ConfigError);
}

TEST(Usage, CountsSumToEntitiesTimesLevels) {
  Gen gen(7);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t m = gen.index(1, 4), k = gen.index(1, 6), d = gen.index(1, 3), n = gen.index(1, 30);
    Codebooks books;
    for (std::size_t l = 0; l < m; ++l) books.levels.push_back(gen.tensor({k, d}));
    UsageCounts usage(m, k);
    usage.record(assign_codes(gen.tensor({n, d}), books));
    EXPECT_EQ(usage.total(), n * m);
    usage.clear();
    EXPECT_EQ(usage.total(), 0u);
  }
}

TEST(KMeans, SeparatedBlobsFoundExactly) {
  std::vector<std::vector<double>> pts;
  for (int c = 0; c < 3; ++c)
    for (int i = 0; i < 5; ++i) pts.push_back({10.0 * c + 0.01 * i, -5.0 * c});
  std::mt19937_64 rng(3);
  const Tensor centers = kmeans(Tensor::from_rows(pts), 3, 10, rng);
  std::vector<double> xs;
  for (std::size_t c = 0; c < 3; ++c) xs.push_back(centers(c, 0));
  std::sort(xs.begin(), xs.end());
  EXPECT_NEAR(xs[0], 0.02, 1e-12);
  EXPECT_NEAR(xs[1], 10.02, 1e-12);
  EXPECT_NEAR(xs[2], 20.02, 1e-12);
}

TEST(KMeans, MoreCentersThanPointsStaysFinite) {
  std::mt19937_64 rng(4);
  const Tensor centers = kmeans(Tensor::matrix({{0, 0}, {1, 1}}), 5, 10, rng);
  EXPECT_EQ(centers.dim(0), 5u);
  EXPECT_TRUE(centers.all_finite());
}

TEST(InitCodebooks, DeterministicAndShaped) {
  Gen gen(8);
  const Tensor z = gen.tensor({40, 3});
  std::mt19937_64 a(9), b(9);
  const auto x = init_codebooks(z, 3, 4, 10, a), y = init_codebooks(z, 3, 4, 10, b);
  ASSERT_EQ(x.num_levels(), 3u);
  EXPECT_EQ(x.size(), 4u);
  EXPECT_EQ(x.dim(), 3u);
  for (std::size_t l = 0; l < 3; ++l) EXPECT_EQ(x.levels[l], y.levels[l]);
}

TEST(InitCodebooks, ReducesResidualEnergy) {
  Gen gen(10);
  const Tensor z = gen.tensor({60, 4}, -3, 3);
  std::mt19937_64 rng(1);
  const auto books = init_codebooks(z, 3, 8, 10, rng);
  double before = 0.0, after = 0.0;
  for (std::size_t i = 0; i < z.rows(); ++i) {
    const auto a = quantize(z.row(i), books, i);
    for (std::size_t j = 0; j < 4; ++j) {
      before += a.residuals[0][j] * a.residuals[0][j];
      after += a.residuals[3][j] * a.residuals[3][j];
    }
  }
  EXPECT_LT(after, 0.5 * before);
}

}  // namespace
}  // namespace hiercode
