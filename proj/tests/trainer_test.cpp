#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <set>

#include "hiercode/kg_data.hpp"
#include "hiercode/trainer.hpp"
#include "support/generators.hpp"
#include "support/oracles.hpp"
#include "support/tempdir.hpp"

namespace hiercode {
namespace {

using testing::Gen;
using testing::TempDir;

UsageCounts usage_of(std::vector<std::vector<std::uint64_t>> counts) {
  UsageCounts u;
  u.counts = std::move(counts);
  return u;
}

EntropyLog log_of(const std::vector<double>& ys, std::uint64_t every = 50) {
  EntropyLog log;
  for (std::size_t i = 0; i < ys.size(); ++i) log.entries.push_back({i * every, {ys[i]}, ys[i], {1.0}});
  return log;
}

struct Small {
  SynthKg kg;
  Tensor emb;
  HierarchyTree tree;
  ModelConfig model;
  TrainConfig train;
};

Small small(std::uint64_t seed = 1) {
  Small s;
  SynthConfig sc;
  sc.seed = seed;
  sc.per_leaf = 5;
  sc.dim = 8;
  s.kg = synth_hier_kg(sc);
  s.emb = Tensor::from_rows(s.kg.features);
  HierarchyConfig hc;
  hc.levels = 3;
  hc.leaf_count = 16;
  s.tree = build_tree(s.emb, hc);
  s.model.dim = 8;
  s.model.hidden = {16};
  s.model.levels = 2;
  s.model.codebook_size = 8;
  s.model.recon_count = 2;
  s.model.decoder_layers = 1;
  s.model.decoder_heads = 2;
  s.model.ffn_mult = 2;
  s.train.steps = 6;
  s.train.eval_every = 2;
  s.train.seed = seed;
  s.train.gse.tau = 0.5;
  return s;
}

TEST(Entropy, Examples) {
  EXPECT_NEAR(codebook_entropy(usage_of({{5, 5, 5, 5}})).mean, std::log(4.0), 1e-15);
  EXPECT_EQ(codebook_entropy(usage_of({{0, 9, 0, 0}})).mean, 0.0);
  EXPECT_NEAR(codebook_entropy(usage_of({{3, 3, 0, 0}})).mean, 0.6931, 5e-5);
  const auto r = codebook_entropy(usage_of({{3, 3, 0, 0}, {1, 1, 1, 1}}));
  EXPECT_NEAR(r.mean, 0.5 * (std::log(2.0) + std::log(4.0)), 1e-15);
  EXPECT_EQ(r.utilization, (std::vector<double>{0.5, 1.0}));
}

TEST(Entropy, UniformIsExactlyLogK) {
  for (std::size_t k : {1u, 2u, 3u, 7u, 64u, 1024u}) {
    for (std::uint64_t c : {1u, 13u}) {
      const auto r = codebook_entropy(usage_of({std::vector<std::uint64_t>(k, c), std::vector<std::uint64_t>(k, c)}));
      EXPECT_EQ(r.mean, std::log(static_cast<double>(k))) << "K=" << k;
    }
  }
}

TEST(Entropy, MatchesDirectSummation) {
  Gen gen(1);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t m = gen.index(1, 4), k = gen.index(1, 20);
    std::vector<std::vector<std::uint64_t>> counts(m, std::vector<std::uint64_t>(k));
    for (auto& lv : counts) {
      for (auto& c : lv) c = gen.coin(0.3) ? 0 : gen.index(0, 50);
      lv[gen.index(0, k - 1)] += 1;
    }
    const auto r = codebook_entropy(usage_of(counts));
    double sum = 0.0;
    for (std::size_t l = 0; l < m; ++l) {
      const double h = oracle::entropy(counts[l]);
      EXPECT_NEAR(r.per_level[l], h, 1e-12);
      sum += h;
    }
    EXPECT_NEAR(r.mean, sum / static_cast<double>(m), 1e-12);
    EXPECT_GE(r.mean, 0.0);
    EXPECT_LE(r.mean, std::log(static_cast<double>(k)) + 1e-12);
  }
}

TEST(Entropy, EmptyLevelIsError) {
  EXPECT_THROW(codebook_entropy(usage_of({{1, 2}, {0, 0}})), Error);
  EXPECT_THROW(codebook_entropy(usage_of({})), Error);
}

TEST(Select, PicksLargestEntropy) {
  const auto log = log_of({1.2285, 1.7339, 1.9421, 2.2156});
  EXPECT_EQ(log.entries[select_entry(log)].mean, 2.2156);
  EXPECT_EQ(select_entry(log_of({0.5})), 0u);
  EXPECT_EQ(select_entry(log_of({2.2156, 1.0, 0.3})), 0u);
  EXPECT_THROW(select_entry(EntropyLog{}), Error);
}

TEST(Select, TiesGoToLaterStep) {
  EntropyLog log;
  log.entries.push_back({100, {1.0}, 1.0, {1.0}});
  log.entries.push_back({200, {1.0}, 1.0, {1.0}});
  EXPECT_EQ(log.entries[select_entry(log)].step, 200u);
}

TEST(Select, ArgmaxOfAnyLog) {
  Gen gen(2);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> ys(gen.index(1, 12));
    for (auto& y : ys) y = static_cast<double>(gen.index(0, 5)) / 2.0;
    const auto log = log_of(ys);
    const std::size_t got = select_entry(log);
    const double best = *std::max_element(ys.begin(), ys.end());
    EXPECT_EQ(ys[got], best);
    for (std::size_t i = got + 1; i < ys.size(); ++i) EXPECT_LT(ys[i], best);
  }
}

TEST(Select, CheckpointLookup) {
  const auto log = log_of({1.0, 3.0, 2.0});
  std::vector<Checkpoint> cps;
  for (std::uint64_t s : {0u, 50u, 100u}) cps.push_back({s, 0.0, {}, {}});
  EXPECT_EQ(select_checkpoint(log, cps).step, 50u);
  EXPECT_THROW(select_checkpoint(log, {}), Error);
}

TEST(Schedule, LengthAndAnchoring) {
  for (std::size_t steps : {1u, 7u, 50u, 300u, 301u})
    for (std::size_t every : {1u, 3u, 50u, 1000u}) {
      const auto s = eval_schedule(steps, every);
      EXPECT_EQ(s.size(), steps / every + 1);
      EXPECT_EQ(s.back(), steps);
      for (std::size_t i = 1; i < s.size(); ++i) EXPECT_EQ(s[i] - s[i - 1], every);
    }
  EXPECT_EQ(eval_schedule(10, 20), (std::vector<std::uint64_t>{10}));
  EXPECT_EQ(eval_schedule(300, 50), (std::vector<std::uint64_t>{0, 50, 100, 150, 200, 250, 300}));
}

TEST(Config, Validation) {
  TrainConfig c;
  EXPECT_NO_THROW(c.validate(10));
  c.steps = 0;
  EXPECT_THROW(c.validate(10), ConfigError);
  c = {};
  c.lr = 0.0;
  EXPECT_THROW(c.validate(10), ConfigError);
  c = {};
  c.batch_size = 11;
  EXPECT_THROW(c.validate(10), ConfigError);
}

TEST(TrainStep, LqOnlyAblation) {
  Small s = small();
  s.train.gse.use_l1 = s.train.gse.use_l2 = false;
  s.train.use_gsr = false;
  Trainer t(s.model, s.train, s.emb, s.tree);
  for (int i = 0; i < 3; ++i) {
    const auto loss = t.train_step(t.next_batch());
    EXPECT_EQ(loss.l1, 0.0);
    EXPECT_EQ(loss.gsr, 0.0);
    EXPECT_NEAR(loss.total, loss.l_q, 1e-12);
  }
}

TEST(TrainStep, DecompositionSumsToTotal) {
  Gen gen(3);
  for (int trial = 0; trial < 6; ++trial) {
    Small s = small(static_cast<std::uint64_t>(trial));
    s.train.gse.use_l1 = gen.coin();
    s.train.gse.use_l2 = gen.coin();
    s.train.use_gsr = gen.coin();
    s.train.batch_size = gen.coin() ? 0 : 24;
    Trainer t(s.model, s.train, s.emb, s.tree);
    for (int i = 0; i < 3; ++i) {
      const auto l = t.train_step(t.next_batch());
      EXPECT_NEAR(l.total, l.l_q + l.l1 + l.l2 + l.gsr, 1e-12);
      for (double x : {l.l_q, l.l1, l.l2, l.gsr, l.total}) EXPECT_TRUE(std::isfinite(x));
    }
  }
}

// With GSE and GSR disabled, codebook rows see only 2(v - r)/B and the
// encoder output sees only 2 alpha (r - v)/B, summed over levels.
TEST(TrainStep, GradientFlowAudit) {
  Small s = small(4);
  s.train.gse.use_l1 = s.train.gse.use_l2 = false;
  s.train.use_gsr = false;
  s.train.alpha = 0.25;
  Trainer t(s.model, s.train, s.emb, s.tree);
  const std::size_t n = s.emb.rows(), d = s.model.dim, m = s.model.levels;
  std::vector<std::size_t> batch(n);
  std::iota(batch.begin(), batch.end(), std::size_t{0});
  const auto sg = t.gradients(batch);

  const Tensor z = encode(s.emb, t.params(), s.model.encoder());
  const Codebooks books = codebooks_of(t.params(), s.model);
  std::vector<Tensor> want_cb(m, Tensor({s.model.codebook_size, d}, 0.0));
  std::vector<double> want_bias(d, 0.0);
  const double inv_b = 1.0 / static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto a = quantize(z.row(i), books, i);
    for (std::size_t l = 0; l < m; ++l)
      for (std::size_t j = 0; j < d; ++j) {
        const double diff = a.surrogates[l][j] - a.residuals[l][j];
        want_cb[l](a.codes[l], j) += 2.0 * diff * inv_b;
        want_bias[j] -= 2.0 * s.train.alpha * diff * inv_b;
      }
  }
  for (std::size_t l = 0; l < m; ++l) {
    const Tensor& got = sg.grads.at(codebook_name(l));
    for (std::size_t k = 0; k < got.size(); ++k) EXPECT_NEAR(got.data[k], want_cb[l].data[k], 1e-12);
  }
  const Tensor& bias = sg.grads.at(encoder_bias(s.model.hidden.size()));
  for (std::size_t j = 0; j < d; ++j) EXPECT_NEAR(bias.data[j], want_bias[j], 1e-12);

  // No commitment weight: codebook gradients unchanged, encoder gets nothing.
  s.train.alpha = 0.0;
  Trainer t0(s.model, s.train, s.emb, s.tree);
  const auto g0 = t0.gradients(batch);
  for (std::size_t l = 0; l < m; ++l) EXPECT_EQ(g0.grads.at(codebook_name(l)), sg.grads.at(codebook_name(l)));
  for (std::size_t k = 0; k < s.model.encoder().num_layers(); ++k)
    for (double x : g0.grads.at(encoder_weight(k)).data) EXPECT_EQ(x, 0.0);
}

TEST(TrainStep, GradientsLeaveStateUntouched) {
  Small s = small(5);
  Trainer t(s.model, s.train, s.emb, s.tree);
  const ParamSet before = t.params();
  (void)t.gradients(t.next_batch());
  EXPECT_EQ(t.params(), before);
  EXPECT_EQ(t.step(), 0u);
}

TEST(TrainStep, EmptyOrBadBatchRejected) {
  Small s = small();
  Trainer t(s.model, s.train, s.emb, s.tree);
  EXPECT_THROW(t.train_step({}), Error);
  EXPECT_THROW(t.train_step({s.emb.rows()}), Error);
}

TEST(Trainer, MismatchedInputsRejected) {
  Small s = small();
  ModelConfig wide = s.model;
  wide.dim = 10;
  EXPECT_THROW(Trainer(wide, s.train, s.emb, s.tree), ShapeError);
  HierarchyConfig hc;
  hc.levels = 2;
  hc.leaf_count = 2;
  const auto other = build_tree(Tensor::matrix({{0, 0, 0, 0, 0, 0, 0, 0}, {1, 1, 1, 1, 1, 1, 1, 1}}), hc);
  EXPECT_THROW(Trainer(s.model, s.train, s.emb, other), Error);
}

TEST(Trainer, MinibatchesCoverEachEpoch) {
  Small s = small();
  s.train.batch_size = 24;
  Trainer t(s.model, s.train, s.emb, s.tree);
  for (int epoch = 0; epoch < 2; ++epoch) {
    std::multiset<std::size_t> seen;
    std::vector<std::size_t> sizes;
    while (seen.size() < s.emb.rows()) {
      const auto b = t.next_batch();
      sizes.push_back(b.size());
      seen.insert(b.begin(), b.end());
    }
    EXPECT_EQ(sizes, (std::vector<std::size_t>{24, 24, 24, 8}));
    EXPECT_EQ(std::set<std::size_t>(seen.begin(), seen.end()).size(), s.emb.rows());
  }
}

TEST(Trainer, DeadCodesReset) {
  for (bool reset : {true, false}) {
    Small s = small(6);
    s.train.dead_reset = reset;
    Trainer t(s.model, s.train, s.emb, s.tree);
    auto& book = t.params().at(codebook_name(0));
    for (std::size_t j = 0; j < s.model.dim; ++j) book(3, j) = 1e6;
    t.train_step(t.next_batch());
    const double far = std::abs(t.params().at(codebook_name(0))(3, 0));
    if (reset) EXPECT_LT(far, 1e3);
    else EXPECT_EQ(far, 1e6);
  }
}

TEST(Run, LogLengthAndSelection) {
  Small s = small(7);
  s.train.steps = 7;
  s.train.eval_every = 3;
  Trainer t(s.model, s.train, s.emb, s.tree);
  const auto res = t.run();
  ASSERT_EQ(res.log.entries.size(), 3u);
  EXPECT_EQ(res.log.entries[0].step, 1u);
  EXPECT_EQ(res.log.entries[2].step, 7u);
  EXPECT_EQ(res.checkpoints.size(), 3u);
  EXPECT_EQ(res.losses.size(), 7u);
  double best = 0.0;
  for (const auto& e : res.log.entries) best = std::max(best, e.mean);
  EXPECT_EQ(res.selected.entropy, best);
  for (const auto& e : res.log.entries) {
    EXPECT_LE(e.mean, std::log(static_cast<double>(s.model.codebook_size)) + 1e-12);
    for (double u : e.utilization) {
      EXPECT_GE(u, 0.0);
      EXPECT_LE(u, 1.0);
    }
  }
}

TEST(Run, EvalEveryBeyondStepsGivesOneCheckpoint) {
  Small s = small(8);
  s.train.steps = 3;
  s.train.eval_every = 10;
  const auto res = Trainer(s.model, s.train, s.emb, s.tree).run();
  ASSERT_EQ(res.log.entries.size(), 1u);
  EXPECT_EQ(res.log.entries[0].step, 3u);
  EXPECT_EQ(res.selected.step, 3u);
}

TEST(Run, DeterministicUnderSeed) {
  Small s = small(9);
  const auto a = Trainer(s.model, s.train, s.emb, s.tree).run();
  const auto b = Trainer(s.model, s.train, s.emb, s.tree).run();
  EXPECT_EQ(encode_checkpoint(a.selected), encode_checkpoint(b.selected));
  EXPECT_EQ(a.log.to_csv(), b.log.to_csv());
  s.train.seed = 10;
  const auto c = Trainer(s.model, s.train, s.emb, s.tree).run();
  EXPECT_NE(encode_checkpoint(a.selected), encode_checkpoint(c.selected));
}

TEST(Run, WritesCheckpointsAndCsv) {
  Small s = small(11);
  TempDir dir;
  s.train.checkpoint_dir = dir.file("ckpt");
  const auto res = Trainer(s.model, s.train, s.emb, s.tree).run();
  for (const auto& e : res.log.entries) {
    const auto c = load_checkpoint(Trainer::checkpoint_path(s.train.checkpoint_dir, e.step));
    EXPECT_EQ(c.step, e.step);
    EXPECT_EQ(c.entropy, e.mean);
  }
  const auto sel = load_checkpoint(dir.file("ckpt/selected.hqk"));
  EXPECT_EQ(encode_codes(sel.params, sel.model, s.emb), encode_codes(res.selected.params, res.selected.model, s.emb));
  EXPECT_EQ(io::read_text(dir.file("ckpt/entropy.csv")), res.log.to_csv());
}

TEST(Run, CheckpointWriteFailureNamesPartialState) {
  Small s = small(12);
  TempDir dir;
  s.train.checkpoint_dir = dir.file("ckpt");
  // A directory squatting on the step-4 file name makes that write fail.
  std::filesystem::create_directories(Trainer::checkpoint_path(s.train.checkpoint_dir, 4));
  try {
    Trainer(s.model, s.train, s.emb, s.tree).run();
    FAIL() << "expected IoError";
  } catch (const IoError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("partial state: 2 checkpoint(s)"), std::string::npos) << msg;
    EXPECT_NE(msg.find("after step 4"), std::string::npos) << msg;
  }
}

TEST(EntropyLogCsv, Layout) {
  EntropyLog log;
  log.entries.push_back({0, {0.5, 0.25}, 0.375, {0.5, 1.0}});
  log.entries.push_back({50, {1.0, 2.0}, 1.5, {1.0, 1.0}});
  EXPECT_EQ(log.to_csv(), "step,H0,H1,Y,util0,util1\n0,0.5,0.25,0.375,0.5,1\n50,1,2,1.5,1,1\n");
}

TEST(Checkpoint, RoundTripReproducesCodes) {
  Small s = small(13);
  Trainer t(s.model, s.train, s.emb, s.tree);
  for (int i = 0; i < 3; ++i) t.train_step(t.next_batch());
  const auto cp = t.snapshot(t.evaluate().mean);
  TempDir dir;
  save_checkpoint(cp, dir.file("c.hqk"));
  const auto back = load_checkpoint(dir.file("c.hqk"));
  EXPECT_EQ(back.model, cp.model);
  EXPECT_EQ(back.step, 3u);
  EXPECT_EQ(encode_codes(back.params, back.model, s.emb), t.codes());
  auto bytes = encode_checkpoint(cp);
  bytes[0] ^= 0x5A;
  EXPECT_THROW(decode_checkpoint(bytes), IoError);
}

// Desk profile on the 800-entity planted set: the commitment loss after 300
// steps against its value at step 1, averaged over three seeds.
TEST(Desk, FinalCommitmentLossBelowInitial) {
  double first = 0.0, last = 0.0;
  for (std::uint64_t seed : {1, 2, 3}) {
    SynthConfig sc;
    sc.seed = seed;
    const auto kg = synth_hier_kg(sc);
    const Tensor emb = Tensor::from_rows(kg.features);
    const auto tree = build_tree(emb, HierarchyConfig{});
    TrainConfig tc;
    tc.seed = seed;
    const auto res = Trainer(ModelConfig{}, tc, emb, tree).run();
    ASSERT_EQ(res.log.entries.size(), 300u / 50u + 1u);
    first += res.losses.front().l_q;
    last += res.losses.back().l_q;
  }
  EXPECT_LT(last / 3.0, first / 3.0);
}

}  // namespace
}  // namespace hiercode
