// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>

#include "csdlab/losses.hpp"
#include "csdlab/score_kernel.hpp"
#include "csdlab/training.hpp"
#include "test_util.hpp"

using namespace csdlab;
using ad::Col;
using ad::Mat;
using csdlab::testing::expect_error;

namespace {

NetShape shape_for(int n, int C) {
  NetShape s;
  s.length = n;
  s.dim = C;
  s.width = 8;
  s.head_hidden = 12;
  return s;
}

PosBatch random_batch(int n, Eigen::Index B, int C, Rng& rng) { return draw_noise(n, B, C, rng); }

TimeNoise draws_in(int n, Eigen::Index B, int C, double lo, double hi, Rng& rng) {
  return draw_time_noise(n, B, C, lo, hi, rng);
}

void expect_fd_match(const NetParams& p, const std::function<double(const NetParams&)>& loss, const NetParams& grad,
                     double tol, std::size_t stride = 5) {
  const auto flat = grad.flatten();
  for (std::size_t k = 0; k < flat.size(); k += stride) {
    const double h = 1e-6 * std::max(1.0, std::abs(p.flatten()[k]));
    NetParams a = p, b = p;
    a.coord(k) += h;
    b.coord(k) -= h;
    const double fd = (loss(a) - loss(b)) / (2 * h);
    EXPECT_LE(std::abs(flat[k] - fd), tol * std::max(1.0, std::abs(fd))) << "coord " << k << " ad " << flat[k] << " fd " << fd;
  }
}

LossOptions options(RegressionSpace space) {
  LossOptions o;
  o.regression_space = space;
  return o;
}

}  // namespace

TEST(SidD, HandEvaluatedExamples) {
  const SiDConfig cfg;
  EXPECT_NEAR(sid_d(Vec{-1.0}, Vec{-2.0}, Vec{0.4}, 0.5, cfg), -0.3, 1e-15);
  EXPECT_NEAR(sid_d(Vec{-1.0}, Vec{0.0}, Vec{0.4}, 0.5, cfg), -0.2, 1e-15);
  EXPECT_EQ(sid_d(Vec{0.7, -0.2}, Vec{0.7, -0.2}, Vec{1.0, 2.0}, 0.3, cfg), 0.0);
}

TEST(SidD, Errors) {
  expect_error(ErrorKind::boundary, [] { sid_d(Vec{0.0}, Vec{0.0}, Vec{0.0}, 1.0, SiDConfig{}); });
  expect_error(ErrorKind::shape_mismatch, [] { sid_d(Vec{0.0}, Vec{0.0, 1.0}, Vec{0.0}, 0.5, SiDConfig{}); });
  expect_error(ErrorKind::schedule, [] { sid_d(Vec{0.0}, Vec{0.0}, Vec{0.0}, 0.0, SiDConfig{}); });
}

TEST(SidD, WeightFunctionScales) {
  SiDConfig cfg;
  cfg.omega = [](double t) { return 2.0 * t; };
  EXPECT_NEAR(sid_d(Vec{-1.0}, Vec{-2.0}, Vec{0.4}, 0.5, cfg), -0.3, 1e-15);
  cfg.alpha = 0.0;
  cfg.omega = [](double) { return 1.0; };
  EXPECT_NEAR(sid_d(Vec{-1.0}, Vec{-2.0}, Vec{0.4}, 0.5, cfg), 0.25 * (-1.0 + 0.8), 1e-15);
}

TEST(SidD, RowsAgreeWithScalar) {
  Rng rng(1);
  ad::Tape tape;
  const Mat st = Mat::Random(5, 2), sf = Mat::Random(5, 2), eps = Mat::Random(5, 2);
  Col t(5);
  for (Eigen::Index r = 0; r < 5; ++r) t[r] = rng.uniform(0.1, 0.9);
  const SiDConfig cfg;
  const Mat d = tape.value(sid_d_rows(tape, tape.constant(st), tape.constant(sf), eps, t, cfg));
  for (Eigen::Index r = 0; r < 5; ++r)
    EXPECT_NEAR(d(r, 0), sid_d(Vec{st(r, 0), st(r, 1)}, Vec{sf(r, 0), sf(r, 1)}, Vec{eps(r, 0), eps(r, 1)}, t[r], cfg),
                1e-12);
}

TEST(CsdLoss, GradientMatchesFiniteDifferenceWithFrozenConditioning) {
  const TabularTeacher T = build_dirichlet(3, 4, 1.0, 7);
  const Codebook cb = Codebook::circle(4, 2);
  const NetParams theta = init_params(shape_for(3, 2), 1, false);
  const NetParams psi = init_params(shape_for(3, 2), 2, false);
  Rng rng(3);
  const PosBatch noise = random_batch(3, 4, 2, rng);
  const PosBatch cond = generate_batch(theta, noise);
  const TimeNoise draws = draws_in(3, 4, 2, 0.1, 0.9, rng);
  const LossOptions opts;
  const LossResult r = csd_loss_with(theta, psi, T, cb, noise, cond, draws, opts);
  expect_fd_match(
      theta, [&](const NetParams& q) { return csd_loss_with(q, psi, T, cb, noise, cond, draws, opts).loss; }, r.grad,
      1e-4, 3);
  LossOptions blocked = opts;
  blocked.sid.stop_grad_first_factor = true;
  const LossResult b = csd_loss_with(theta, psi, T, cb, noise, cond, draws, blocked);
  EXPECT_EQ(b.loss, r.loss);
  EXPECT_NE(b.grad, r.grad);
}

TEST(CsdLoss, RngEntryPointUsesGeneratorSamplesAsConditioning) {
  const TabularTeacher T = build_dirichlet(3, 4, 1.0, 7);
  const Codebook cb = Codebook::circle(4, 2);
  const NetParams theta = init_params(shape_for(3, 2), 4, false);
  const NetParams psi = init_params(shape_for(3, 2), 5, false);
  Rng noise_rng(6);
  const PosBatch noise = random_batch(3, 8, 2, noise_rng);
  const LossOptions opts;
  Rng a(9), b(9);
  const LossResult direct = csd_loss(theta, psi, T, cb, noise, opts, a);
  const TimeNoise draws = draw_time_noise(3, 8, 2, opts.schedule.t_min, 1.0 - opts.t_guard, b);
  const LossResult explicit_ = csd_loss_with(theta, psi, T, cb, noise, generate_batch(theta, noise), draws, opts);
  EXPECT_EQ(direct.loss, explicit_.loss);
  EXPECT_EQ(direct.grad, explicit_.grad);
}

TEST(CsdLoss, ConditioningStopGradientMatchesConstantPrefix) {
  // Rebuild the loss with the prefix taken from the live generator outputs
  // behind stop_grad; gradients must equal the constant-conditioning path.
  const TabularTeacher T = build_dirichlet(3, 4, 1.0, 7);
  const Codebook cb = Codebook::circle(4, 2);
  const NetParams theta = init_params(shape_for(3, 2), 7, false);
  const NetParams psi = init_params(shape_for(3, 2), 8, false);
  Rng rng(10);
  const PosBatch noise = random_batch(3, 6, 2, rng);
  const TimeNoise draws = draws_in(3, 6, 2, 0.05, 0.95, rng);
  const LossOptions opts;
  const PosBatch cond = generate_batch(theta, noise);
  const LossResult ref = csd_loss_with(theta, psi, T, cb, noise, cond, draws, opts);
  const auto probs = teacher_probs(T, quantize_batch(cond, cb));
  const Gradient g = grad(theta, [&](ad::Tape& tape, const BoundNet& gen) {
    std::vector<ad::Var> in;
    for (const Mat& m : noise) in.push_back(tape.constant(m));
    const auto q = generator_forward(tape, gen, in);
    std::vector<ad::Var> prefix;
    for (const ad::Var& v : q) prefix.push_back(tape.stop_grad(v));
    const BoundNet guide = bind(tape, psi, false);
    const auto feats = backbone_features(tape, guide, prefix);
    ad::Var total;
    for (int i = 0; i < 3; ++i) {
      const ad::Var d = csd_position_terms(tape, guide, q[i], feats[i], probs[i], cb, draws.t[i], draws.eps[i], opts);
      total = i == 0 ? tape.sum(d) : tape.add(total, tape.sum(d));
    }
    return tape.scale(total, 1.0 / 6.0);
  });
  EXPECT_NEAR(g.loss, ref.loss, 1e-12 * std::max(1.0, std::abs(ref.loss)));
  const auto a = g.grad.flatten(), b = ref.grad.flatten();
  for (std::size_t k = 0; k < a.size(); ++k) EXPECT_NEAR(a[k], b[k], 1e-12 * std::max(1.0, std::abs(b[k])));
}

TEST(CsdLoss, GradientHasGeneratorShapeAndIsFinite) {
  const TabularTeacher T = build_pair_teacher();
  const Codebook cb = Codebook::circle(2, 1);
  const NetParams theta = init_params(shape_for(2, 1), 1, false);
  const NetParams psi = init_params(shape_for(2, 1), 2, false);
  Rng rng(1);
  const PosBatch noise = random_batch(2, 4, 1, rng);
  const LossResult r = csd_loss(theta, psi, T, cb, noise, LossOptions{}, rng);
  EXPECT_EQ(r.grad.shape(), theta.shape());
  EXPECT_TRUE(r.grad.all_finite());
}

TEST(CsdLoss, ShapeErrors) {
  const TabularTeacher T = build_pair_teacher();
  const Codebook cb = Codebook::circle(2, 1);
  const NetParams theta = init_params(shape_for(2, 1), 1);
  const NetParams other = init_params(shape_for(3, 1), 1);
  Rng rng(1);
  const PosBatch noise = random_batch(2, 4, 1, rng);
  expect_error(ErrorKind::shape_mismatch, [&] { csd_loss(theta, other, T, cb, noise, LossOptions{}, rng); });
  expect_error(ErrorKind::length_mismatch,
               [&] { csd_loss(theta, theta, T, cb, random_batch(3, 4, 1, rng), LossOptions{}, rng); });
}

class RegressionSpaces : public ::testing::TestWithParam<RegressionSpace> {};

TEST_P(RegressionSpaces, FcsGradientMatchesFiniteDifference) {
  const NetParams psi = init_params(shape_for(3, 2), 11, false);
  Rng rng(12);
  const PosBatch samples = random_batch(3, 5, 2, rng);
  const std::vector<TimeNoise> draws{draws_in(3, 5, 2, 0.05, 0.95, rng), draws_in(3, 5, 2, 0.05, 0.95, rng)};
  const LossOptions opts = options(GetParam());
  const LossResult r = fcs_loss_with(psi, samples, draws, opts);
  expect_fd_match(psi, [&](const NetParams& q) { return fcs_loss_with(q, samples, draws, opts).loss; }, r.grad, 1e-4);
}

TEST_P(RegressionSpaces, FcsMultiSampleIsAverageOfSingles) {
  const NetParams psi = init_params(shape_for(2, 2), 13, false);
  Rng rng(14);
  const PosBatch samples = random_batch(2, 16, 2, rng);
  const LossOptions opts = options(GetParam());
  Rng a(5), b(5);
  const LossResult two = fcs_loss(psi, samples, 2, opts, a);
  const LossResult first = fcs_loss(psi, samples, 1, opts, b);
  const LossResult second = fcs_loss(psi, samples, 1, opts, b);
  EXPECT_NEAR(two.loss, 0.5 * (first.loss + second.loss), 1e-12 * two.loss);
  const auto g2 = two.grad.flatten(), g1a = first.grad.flatten(), g1b = second.grad.flatten();
  for (std::size_t k = 0; k < g2.size(); ++k) EXPECT_NEAR(g2[k], 0.5 * (g1a[k] + g1b[k]), 1e-10 * std::max(1.0, std::abs(g2[k])));
}

TEST_P(RegressionSpaces, GtsGradientMatchesFiniteDifference) {
  const TabularTeacher T = build_dirichlet(3, 4, 1.0, 7);
  const Codebook cb = Codebook::circle(4, 2);
  const NetParams model = init_params(shape_for(3, 2), 15, false);
  Rng rng(16);
  const auto batch = sample_teacher_batch(T, 5, rng);
  const TimeNoise draws = draws_in(3, 5, 2, 0.05, 0.95, rng);
  const LossOptions opts = options(GetParam());
  const LossResult r = gts_loss_with(model, T, cb, batch, draws, opts);
  expect_fd_match(model, [&](const NetParams& q) { return gts_loss_with(q, T, cb, batch, draws, opts).loss; }, r.grad,
                  1e-4);
}

TEST_P(RegressionSpaces, GtsPositiveForZeroHeadOnNondegenerateTeacher) {
  const TabularTeacher T = build_dirichlet(3, 4, 1.0, 7);
  const Codebook cb = Codebook::circle(4, 2);
  const NetParams model = init_params(shape_for(3, 2), 17);
  Rng rng(18);
  const auto batch = sample_teacher_batch(T, 32, rng);
  EXPECT_GT(gts_loss(model, T, cb, batch, options(GetParam()), rng).loss, 0.0);
}

// Velocity space only: in score space both losses are dominated by the shared
// t^-2 terms of the time draws and the ratio measures ~1.
TEST(GtsLoss, LowerBatchVarianceThanMonteCarloTargets) {
  const TabularTeacher T = build_dirichlet(3, 4, 1.0, 7);
  const Codebook cb = Codebook::circle(4, 2);
  const NetParams model = init_params(shape_for(3, 2), 19, false);
  const LossOptions opts = options(RegressionSpace::velocity);
  Rng rng(20);
  std::vector<double> gts, fcs;
  for (int k = 0; k < 100; ++k) {
    const auto batch = sample_teacher_batch(T, 64, rng);
    const TimeNoise draws = draw_time_noise(3, 64, 2, opts.schedule.t_min, opts.regression_t_max(), rng);
    gts.push_back(gts_loss_with(model, T, cb, batch, draws, opts).loss);
    fcs.push_back(fcs_loss_with(model, embed_batch(batch, cb), {draws}, opts).loss);
  }
  const auto variance = [](const std::vector<double>& v) {
    double m = 0.0, s = 0.0;
    for (double x : v) m += x / v.size();
    for (double x : v) s += (x - m) * (x - m) / (v.size() - 1);
    return s;
  };
  EXPECT_LT(variance(gts) / variance(fcs), 1.0);
}

INSTANTIATE_TEST_SUITE_P(Losses, RegressionSpaces, ::testing::Values(RegressionSpace::score, RegressionSpace::velocity),
                         [](const auto& info) { return std::string(to_string(info.param)); });

TEST(FcsLoss, Errors) {
  const NetParams psi = init_params(shape_for(1, 1), 1);
  Rng rng(1);
  const PosBatch samples = random_batch(1, 4, 1, rng);
  expect_error(ErrorKind::invalid_argument, [&] { fcs_loss(psi, samples, 0, LossOptions{}, rng); });
  TimeNoise at_one = draw_time_noise(1, 4, 1, 0.5, 0.5, rng);
  at_one.t[0].setConstant(1.0);
  expect_error(ErrorKind::boundary, [&] { fcs_loss_with(psi, samples, {at_one}, options(RegressionSpace::velocity)); });
  EXPECT_NO_THROW(fcs_loss_with(psi, samples, {at_one}, options(RegressionSpace::score)));
}

TEST(RegressionSpace, Names) {
  EXPECT_EQ(regression_space_from_string("velocity"), RegressionSpace::velocity);
  EXPECT_STREQ(to_string(RegressionSpace::score), "score");
  expect_error(ErrorKind::config, [] { regression_space_from_string("noise"); });
  EXPECT_EQ(options(RegressionSpace::score).regression_t_max(), 1.0);
  EXPECT_EQ(options(RegressionSpace::velocity).regression_t_max(), 1.0 - 1e-3);
}

namespace {

struct OptimumError {
  double abs = 0.0;
  double rel = 0.0;  // |error| / (1 + |s_true|)
  double at_example = 0.0;
};

// Trains a guidance head with FCS on exact teacher samples, then compares the
// learned score with the closed form at (1 - t) c_j + t z, |z| <= 2, t >= 0.5.
OptimumError fcs_optimum_error(const TabularTeacher& T, const Codebook& cb, long iterations) {
  NetShape s = shape_for(1, 1);
  s.width = 16;
  s.head_hidden = 32;
  NetParams psi = init_params(s, 3);
  AdamState opt = adam_init(psi);
  const LossOptions opts = options(RegressionSpace::velocity);
  Rng rng(21);
  for (long it = 0; it < iterations; ++it) {
    const PosBatch samples = embed_batch(sample_teacher_batch(T, 256, rng), cb);
    const LossResult r = fcs_loss(psi, samples, 4, opts, rng);
    const double lr = it < iterations / 2 ? 3e-3 : it < iterations * 8 / 10 ? 3e-4 : 3e-5;
    adam_step(psi, opt, r.grad, lr, AdamConfig{});
  }
  const auto f = backbone_features(psi, EmbedSeq(1, 1));
  const ProbVector p = T.cond_prob({});
  const auto error_at = [&](double x, double t) {
    const double learned = velocity_to_score(head_velocity(psi, Vec{x}, t, f[0]), Vec{x}, t)[0];
    const double exact = teacher_cond_score(p.values(), cb, Vec{x}, t)[0];
    return std::pair{std::abs(learned - exact), exact};
  };
  OptimumError out;
  for (double t : {0.5, 0.7, 0.9}) {
    for (int j = 0; j < cb.vocab_size(); ++j) {
      for (int k = 0; k <= 8; ++k) {
        const auto [e, exact] = error_at((1 - t) * cb.entry(j)[0] + t * (-2.0 + 0.5 * k), t);
        out.abs = std::max(out.abs, e);
        out.rel = std::max(out.rel, e / (1.0 + std::abs(exact)));
      }
    }
  }
  out.at_example = error_at(0.3, 0.5).first;
  return out;
}

}  // namespace

TEST(FcsLoss, OptimumIsClosedFormScoreSingleCode) {
  const TabularTeacher T(1, 1, {{1.0}});
  const Codebook cb(1, 1, {0.0});
  const OptimumError e = fcs_optimum_error(T, cb, 3000);
  EXPECT_LT(e.at_example, 0.05);  // closed form there is -1.2
  EXPECT_LT(e.abs, 0.05);
}

TEST(FcsLoss, OptimumIsClosedFormScoreTwoCodes) {
  const TabularTeacher T(1, 2, {{0.3, 0.7}});
  const Codebook cb(2, 1, {-1.0, 1.0});
  EXPECT_LT(fcs_optimum_error(T, cb, 3000).rel, 0.05);
}

TEST(MappingRegression, ZeroForIdentityOnItsOwnNoise) {
  const NetParams theta = init_params(shape_for(2, 2), 1);
  Rng rng(1);
  const PosBatch noise = random_batch(2, 8, 2, rng);
  const LossResult r = mapping_regression_loss(theta, noise, noise);
  EXPECT_EQ(r.loss, 0.0);
}

TEST(MappingRegression, GradientMatchesFiniteDifference) {
  const NetParams theta = init_params(shape_for(2, 2), 2, false);
  Rng rng(2);
  const PosBatch noise = random_batch(2, 4, 2, rng), targets = random_batch(2, 4, 2, rng);
  const LossResult r = mapping_regression_loss(theta, noise, targets);
  expect_fd_match(theta, [&](const NetParams& q) { return mapping_regression_loss(q, noise, targets).loss; }, r.grad,
                  1e-4);
}
