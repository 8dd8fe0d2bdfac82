// SPDX-License-Identifier: Apache-2.0
//
// Training tests: loss values against closed forms and a brute-force loop,
// optimizer trajectories against hand-unrolled references, schedule shapes,
// and epoch-loop behavior (decrease, determinism, abort paths).

#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <vector>

#include "egotr/model.hpp"
#include "egotr/tensor.hpp"
#include "egotr/training.hpp"
#include "gradcheck_util.hpp"

namespace {

using egotr::Branch;
using egotr::ModelConfig;
using egotr::OptimState;
using egotr::Tensor;
using egotr::TrainConfig;
using egotr::TripletBatch;
using testutil::DT;
using testutil::DTape;
using testutil::randn;

using FT = Tensor<float>;

ModelConfig tiny_config() {
  ModelConfig c;
  c.embed_dim = 8;
  c.depth = 2;
  c.num_heads = 2;
  c.stem_channels = {4};
  c.ground_h = 8;
  c.ground_w = 16;
  c.aerial_h = 16;
  c.aerial_w = 16;
  return c;
}

double dist_rows(const DT& x, std::size_t i, const DT& y, std::size_t j) {
  const std::size_t d = x.dim(1);
  double s = 0;
  for (std::size_t k = 0; k < d; ++k) {
    const double t = x.data()[i * d + k] - y.data()[j * d + k];
    s += t * t;
  }
  return std::sqrt(s);
}

// Plain-loop reference for the in-batch loss: every ordered pair (i,j),
// j != i, once per retrieval direction, mean-reduced.
double batch_loss_ref(const DT& g, const DT& a, double alpha) {
  const std::size_t b = g.dim(0);
  double total = 0;
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t j = 0; j < b; ++j) {
      if (i == j) continue;
      const double pos = dist_rows(g, i, a, i);
      total += std::log1p(std::exp(alpha * (pos - dist_rows(g, i, a, j))));
      total += std::log1p(std::exp(alpha * (pos - dist_rows(g, j, a, i))));
    }
  return total / double(2 * b * (b - 1));
}

TripletBatch<float> random_batch(std::size_t b, std::mt19937_64& rng,
                                 const ModelConfig& cfg) {
  TripletBatch<float> batch;
  for (std::size_t i = 0; i < b; ++i) {
    FT g({3, cfg.ground_h, cfg.ground_w});
    FT a({3, cfg.aerial_h, cfg.aerial_w});
    egotr::fill_uniform(g, rng, 0.0f, 1.0f);
    egotr::fill_uniform(a, rng, 0.0f, 1.0f);
    batch.ground.push_back(g);
    batch.aerial.push_back(a);
    batch.ids.push_back(i);
  }
  return batch;
}

std::vector<float> snapshot(egotr::EgoTrModel<float>& m) {
  std::vector<float> out;
  m.visit_params([&](const std::string&, FT& t) {
    out.insert(out.end(), t.data().begin(), t.data().end());
  });
  return out;
}

TEST(TripletLoss, ClosedFormValues) {
  EXPECT_NEAR(egotr::triplet_loss(1.0, 1.0, 10.0), std::log(2.0), 1e-12);
  EXPECT_NEAR(egotr::triplet_loss(0.35, 0.25, 10.0),
              std::log1p(std::exp(1.0)), 1e-12);
  EXPECT_NEAR(egotr::triplet_loss(0.35, 0.25, 10.0), 1.3132616875182228,
              1e-9);
  // Saturation on both sides stays finite and tight.
  EXPECT_NEAR(egotr::triplet_loss(101.0, 1.0, 10.0), 1000.0, 1e-9);
  EXPECT_NEAR(egotr::triplet_loss(1.0, 101.0, 10.0), 0.0, 1e-12);
  EXPECT_THROW(egotr::triplet_loss(1.0, 1.0, 0.0), egotr::UsageError);
  EXPECT_THROW(egotr::triplet_loss(-1.0, 1.0, 10.0), egotr::UsageError);
}

TEST(TripletLoss, MonotoneInNegativeDistance) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u{0.0, 3.0};
  for (int i = 0; i < 1000; ++i) {
    const double dp = u(rng), dn = u(rng), step = u(rng) / 3.0;
    const double before = egotr::triplet_loss(dp, dn, 10.0);
    const double after = egotr::triplet_loss(dp, dn + step, 10.0);
    ASSERT_LE(after, before + 1e-15);
    ASSERT_GE(before, 0.0);
  }
}

TEST(BatchLoss, MatchesBruteForceLoop) {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    DT g = randn({4, 8}, rng);
    DT a = randn({4, 8}, rng);
    DTape tape;
    tape.set_recording(false);
    const double got = egotr::batch_loss(tape, g, a, 10.0).item();
    EXPECT_NEAR(got, batch_loss_ref(g, a, 10.0), 1e-9) << "trial " << trial;
    EXPECT_GE(got, 0.0);
  }
}

TEST(BatchLoss, FloatPrecisionStaysClose) {
  std::mt19937_64 rng(3);
  DT g = randn({4, 8}, rng);
  DT a = randn({4, 8}, rng);
  FT gf({4, 8}), af({4, 8});
  for (std::size_t i = 0; i < g.numel(); ++i) {
    gf.data()[i] = float(g.data()[i]);
    af.data()[i] = float(a.data()[i]);
  }
  egotr::Tape<float> tape;
  tape.set_recording(false);
  const double got = egotr::batch_loss(tape, gf, af, 10.0f).item();
  EXPECT_NEAR(got, batch_loss_ref(g, a, 10.0), 1e-4);
}

TEST(BatchLoss, FullSymmetryGivesLogTwo) {
  // Orthonormal rows make every ground-aerial distance sqrt(2).
  DT g({2, 4}, {1, 0, 0, 0, 0, 1, 0, 0});
  DT a({2, 4}, {0, 0, 1, 0, 0, 0, 0, 1});
  DTape tape;
  tape.set_recording(false);
  EXPECT_NEAR(egotr::batch_loss(tape, g, a, 10.0).item(), std::log(2.0),
              1e-12);
}

TEST(BatchLoss, PerfectSeparationNearZero) {
  DT g({2, 4}, {10, 0, 0, 0, 0, 10, 0, 0});
  DT a = g.clone();
  DTape tape;
  tape.set_recording(false);
  EXPECT_LE(egotr::batch_loss(tape, g, a, 10.0).item(), 1e-12);
}

TEST(BatchLoss, PermutationInvariant) {
  std::mt19937_64 rng(4);
  DT g = randn({5, 6}, rng);
  DT a = randn({5, 6}, rng);
  const std::size_t perm[5] = {3, 0, 4, 2, 1};
  DT gp({5, 6}), ap({5, 6});
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t k = 0; k < 6; ++k) {
      gp.data()[perm[i] * 6 + k] = g.data()[i * 6 + k];
      ap.data()[perm[i] * 6 + k] = a.data()[i * 6 + k];
    }
  DTape tape;
  tape.set_recording(false);
  EXPECT_NEAR(egotr::batch_loss(tape, g, a, 10.0).item(),
              egotr::batch_loss(tape, gp, ap, 10.0).item(), 1e-12);
}

TEST(BatchLoss, RejectsDegenerateBatches) {
  DTape tape;
  DT one({1, 4});
  EXPECT_THROW(egotr::batch_loss(tape, one, one, 10.0), egotr::UsageError);
  DT g({3, 4}), a({2, 4});
  EXPECT_THROW(egotr::batch_loss(tape, g, a, 10.0), egotr::DimensionError);
}

TEST(BatchLoss, GradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(5);
  for (int seed = 0; seed < 20; ++seed) {
    std::vector<DT> inputs = {randn({4, 6}, rng), randn({4, 6}, rng)};
    testutil::expect_grads_match(
        [](DTape& tape, std::vector<DT>& in) {
          return egotr::batch_loss(tape, in[0], in[1], 10.0);
        },
        inputs);
  }
}

TEST(Adamw, ZeroGradientAppliesOnlyDecay) {
  DT p({3}, {1.0, -2.0, 0.5});
  OptimState<double> st;
  st.weight_decay = 0.03;
  std::vector<DT> params = {p};
  egotr::adamw_step(std::span<DT>(params), st, 1e-4);
  const double f = 1.0 - 1e-4 * 0.03;
  EXPECT_NEAR(p.data()[0], 1.0 * f, 1e-15);
  EXPECT_NEAR(p.data()[1], -2.0 * f, 1e-15);
  EXPECT_NEAR(p.data()[2], 0.5 * f, 1e-15);
  EXPECT_EQ(st.t, 1u);
}

TEST(Adamw, FirstStepMovesBySignedLearningRate) {
  DT p({3}, {0.0, 0.0, 0.0});
  p.set_requires_grad(true);
  p.accumulate_grad(std::vector<double>{0.7, -1.3, 2.0});
  OptimState<double> st;
  st.weight_decay = 0.0;
  const double lr = 1e-3;
  std::vector<DT> params = {p};
  egotr::adamw_step(std::span<DT>(params), st, lr);
  EXPECT_NEAR(p.data()[0], -lr, lr * 1e-6);
  EXPECT_NEAR(p.data()[1], lr, lr * 1e-6);
  EXPECT_NEAR(p.data()[2], -lr, lr * 1e-6);
}

TEST(Adamw, ThreeStepTrajectoryMatchesHandUnroll) {
  // f(w) = w^2, so grad = 2w; constants chosen to move visibly.
  const double lr = 0.1, wd = 0.01, b1 = 0.9, b2 = 0.999, eps = 1e-8;
  double w_ref = 1.5, m = 0, v = 0;
  DT p({1}, {1.5});
  p.set_requires_grad(true);
  OptimState<double> st;
  st.weight_decay = wd;
  std::vector<DT> params = {p};
  for (int t = 1; t <= 3; ++t) {
    const double g = 2.0 * w_ref;
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g * g;
    const double mhat = m / (1 - std::pow(b1, t));
    const double vhat = v / (1 - std::pow(b2, t));
    w_ref = w_ref * (1 - lr * wd) - lr * mhat / (std::sqrt(vhat) + eps);

    p.zero_grad();
    p.accumulate_grad(std::vector<double>{2.0 * p.data()[0]});
    egotr::adamw_step(std::span<DT>(params), st, lr);
    ASSERT_NEAR(p.data()[0], w_ref, 1e-10) << "step " << t;
  }
}

TEST(Adamw, ZeroDecayEqualsPlainAdamExactly) {
  std::mt19937_64 rng(6);
  DT p = randn({16}, rng);
  DT q = p.clone();
  p.set_requires_grad(true);
  OptimState<double> st;
  st.weight_decay = 0.0;
  std::vector<DT> params = {p};
  // Plain Adam reference, same formula with no decay term.
  double m[16] = {0}, v[16] = {0};
  std::mt19937_64 grng(7);
  for (int t = 1; t <= 5; ++t) {
    DT g = randn({16}, grng);
    p.zero_grad();
    p.accumulate_grad(std::vector<double>(g.data().begin(), g.data().end()));
    egotr::adamw_step(std::span<DT>(params), st, 1e-3);
    for (int k = 0; k < 16; ++k) {
      m[k] = 0.9 * m[k] + (1.0 - 0.9) * g.data()[k];
      v[k] = 0.999 * v[k] + (1.0 - 0.999) * g.data()[k] * g.data()[k];
      const double mhat = m[k] / (1 - std::pow(0.9, t));
      const double vhat = v[k] / (1 - std::pow(0.999, t));
      q.data()[k] = q.data()[k] * 1.0 -
                    1e-3 * (mhat / (std::sqrt(vhat) + 1e-8));
      ASSERT_EQ(p.data()[k], q.data()[k]) << "step " << t << " k " << k;
    }
  }
}

TEST(Adamw, StateShapeMismatchRejected) {
  DT p({2});
  DT q({3});
  OptimState<double> st;
  std::vector<DT> first = {p};
  egotr::adamw_step(std::span<DT>(first), st, 1e-3);
  std::vector<DT> two = {p, q};
  EXPECT_THROW(egotr::adamw_step(std::span<DT>(two), st, 1e-3),
               egotr::UsageError);
  std::vector<DT> wrong = {q};
  EXPECT_THROW(egotr::adamw_step(std::span<DT>(wrong), st, 1e-3),
               egotr::UsageError);
}

TEST(Schedule, CosineEndpoints) {
  EXPECT_DOUBLE_EQ(egotr::cosine_lr(0, 100, 1e-4, 0.0), 1e-4);
  EXPECT_DOUBLE_EQ(egotr::cosine_lr(100, 100, 1e-4, 1e-6), 1e-6);
  EXPECT_NEAR(egotr::cosine_lr(50, 100, 1e-4, 1e-6), (1e-4 + 1e-6) / 2,
              1e-18);
  double prev = egotr::cosine_lr(0, 64, 1e-4);
  for (std::uint64_t s = 1; s <= 64; ++s) {
    const double cur = egotr::cosine_lr(s, 64, 1e-4);
    ASSERT_LT(cur, prev);
    prev = cur;
  }
  EXPECT_THROW(egotr::cosine_lr(101, 100, 1e-4), egotr::UsageError);
  EXPECT_THROW(egotr::cosine_lr(0, 0, 1e-4), egotr::UsageError);
}

TEST(Schedule, WarmupRampsThenDecays) {
  const double lr = 1e-4;
  EXPECT_DOUBLE_EQ(egotr::warmup_cosine_lr(0, 10, 110, lr), lr * 0.1);
  EXPECT_DOUBLE_EQ(egotr::warmup_cosine_lr(9, 10, 110, lr), lr);
  EXPECT_DOUBLE_EQ(egotr::warmup_cosine_lr(10, 10, 110, lr),
                   egotr::cosine_lr(0, 100, lr));
  EXPECT_DOUBLE_EQ(egotr::warmup_cosine_lr(60, 10, 110, lr),
                   egotr::cosine_lr(50, 100, lr));
  EXPECT_DOUBLE_EQ(egotr::warmup_cosine_lr(5, 0, 100, lr),
                   egotr::cosine_lr(5, 100, lr));
}

TEST(Clip, GlobalNormScalesOnceOverLimit) {
  DT p({2}, {0, 0}), q({2}, {0, 0});
  p.set_requires_grad(true);
  q.set_requires_grad(true);
  p.accumulate_grad(std::vector<double>{3.0, 0.0});
  q.accumulate_grad(std::vector<double>{0.0, 4.0});
  std::vector<DT> params = {p, q};
  const double norm = egotr::clip_global_norm(std::span<DT>(params), 1.0);
  EXPECT_NEAR(norm, 5.0, 1e-12);
  EXPECT_NEAR(std::as_const(p).grad()[0], 0.6, 1e-12);
  EXPECT_NEAR(std::as_const(q).grad()[1], 0.8, 1e-12);
  // Under the limit nothing moves.
  const double kept = std::as_const(p).grad()[0];
  const double again = egotr::clip_global_norm(std::span<DT>(params), 10.0);
  EXPECT_NEAR(again, 1.0, 1e-12);
  EXPECT_EQ(std::as_const(p).grad()[0], kept);
}

TEST(TrainEpoch, ZeroLearningRateLeavesParamsBitIdentical) {
  auto cfg = tiny_config();
  auto model = egotr::EgoTrModel<float>::init(cfg, 21);
  const auto before = snapshot(model);
  std::mt19937_64 rng(22);
  std::vector<TripletBatch<float>> batches = {random_batch(2, rng, cfg),
                                              random_batch(3, rng, cfg)};
  OptimState<float> st;
  st.base_lr = 0.0;
  st.weight_decay = 0.03;
  TrainConfig tc;
  tc.total_steps = 2;
  auto em = egotr::train_epoch(model, batches, st, tc);
  EXPECT_EQ(em.batches, 2u);
  EXPECT_EQ(em.pairs, 5u);
  EXPECT_GT(em.mean_loss, 0.0);
  const auto after = snapshot(model);
  ASSERT_EQ(before.size(), after.size());
  for (std::size_t i = 0; i < before.size(); ++i)
    ASSERT_EQ(before[i], after[i]) << "param element " << i;
}

TEST(TrainEpoch, LossDecreasesOnTinyFixedSet) {
  auto cfg = tiny_config();
  auto model = egotr::EgoTrModel<float>::init(cfg, 23);
  std::mt19937_64 rng(24);
  std::vector<TripletBatch<float>> batches = {random_batch(2, rng, cfg)};
  OptimState<float> st;
  st.base_lr = 1e-3;
  TrainConfig tc;
  tc.total_steps = 200;
  double first = 0, last = 0;
  for (int step = 0; step < 200; ++step) {
    auto em = egotr::train_epoch(model, batches, st, tc);
    if (step == 0) first = em.mean_loss;
    last = em.mean_loss;
  }
  EXPECT_LT(last, first);
  EXPECT_LT(last, std::log(2.0));
}

TEST(TrainEpoch, DeterministicAcrossRuns) {
  auto cfg = tiny_config();
  std::vector<float> finals[2];
  double losses[2];
  for (int run = 0; run < 2; ++run) {
    auto model = egotr::EgoTrModel<float>::init(cfg, 31);
    std::mt19937_64 rng(32);
    std::vector<TripletBatch<float>> batches = {random_batch(2, rng, cfg),
                                                random_batch(2, rng, cfg)};
    OptimState<float> st;
    TrainConfig tc;
    tc.total_steps = 4;
    double sum = 0;
    for (int e = 0; e < 2; ++e)
      sum += egotr::train_epoch(model, batches, st, tc).mean_loss;
    finals[run] = snapshot(model);
    losses[run] = sum;
  }
  EXPECT_EQ(losses[0], losses[1]);
  ASSERT_EQ(finals[0].size(), finals[1].size());
  for (std::size_t i = 0; i < finals[0].size(); ++i)
    ASSERT_EQ(finals[0][i], finals[1][i]) << "param element " << i;
}

TEST(TrainEpoch, ParamsMoveWhenLearning) {
  auto cfg = tiny_config();
  auto model = egotr::EgoTrModel<float>::init(cfg, 41);
  const auto before = snapshot(model);
  std::mt19937_64 rng(42);
  std::vector<TripletBatch<float>> batches = {random_batch(2, rng, cfg)};
  OptimState<float> st;
  TrainConfig tc;
  tc.total_steps = 1;
  auto em = egotr::train_epoch(model, batches, st, tc);
  EXPECT_GT(em.grad_norm_mean, 0.0);
  EXPECT_GT(em.lr_last, 0.0);
  const auto after = snapshot(model);
  double moved = 0;
  for (std::size_t i = 0; i < before.size(); ++i)
    moved = std::max(moved, std::abs(double(before[i]) - after[i]));
  EXPECT_GT(moved, 0.0);
}

TEST(TrainEpoch, NonFiniteLossAbortsWithReport) {
  auto cfg = tiny_config();
  auto model = egotr::EgoTrModel<float>::init(cfg, 51);
  model.ground.patch_proj.data()[0] = std::nanf("");
  std::mt19937_64 rng(52);
  std::vector<TripletBatch<float>> batches = {random_batch(2, rng, cfg)};
  OptimState<float> st;
  TrainConfig tc;
  tc.total_steps = 1;
  try {
    egotr::train_epoch(model, batches, st, tc);
    FAIL() << "expected NumericError";
  } catch (const egotr::NumericError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("non-finite"), std::string::npos);
    EXPECT_NE(msg.find("ground.patch_proj"), std::string::npos);
  }
}

TEST(TrainEpoch, RejectsMalformedBatches) {
  auto cfg = tiny_config();
  auto model = egotr::EgoTrModel<float>::init(cfg, 61);
  OptimState<float> st;
  TrainConfig tc;
  tc.total_steps = 8;
  std::mt19937_64 rng(62);
  {
    auto bad = random_batch(2, rng, cfg);
    bad.ground.pop_back();
    std::vector<TripletBatch<float>> batches = {bad};
    EXPECT_THROW(egotr::train_epoch(model, batches, st, tc),
                 egotr::UsageError);
  }
  {
    auto bad = random_batch(2, rng, cfg);
    bad.ids = {7, 7};
    std::vector<TripletBatch<float>> batches = {bad};
    EXPECT_THROW(egotr::train_epoch(model, batches, st, tc),
                 egotr::UsageError);
  }
  {
    TripletBatch<float> bad;
    bad.ground.push_back(FT({3, cfg.ground_h, cfg.ground_w}));
    bad.aerial.push_back(FT({3, cfg.aerial_h, cfg.aerial_w}));
    bad.ids = {0};
    std::vector<TripletBatch<float>> batches = {bad};
    EXPECT_THROW(egotr::train_epoch(model, batches, st, tc),
                 egotr::UsageError);
  }
  {
    std::vector<TripletBatch<float>> batches = {random_batch(2, rng, cfg)};
    TrainConfig unset;
    EXPECT_THROW(egotr::train_epoch(model, batches, st, unset),
                 egotr::UsageError);
  }
}

}  // namespace
