// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "csdlab/eval.hpp"
#include "csdlab/training.hpp"
#include "test_util.hpp"

using namespace csdlab;
using ad::Mat;
using csdlab::testing::expect_error;

namespace {

RunConfig tiny_config(const TabularTeacher& T, int C) {
  RunConfig cfg;
  cfg.net.length = T.length();
  cfg.net.dim = C;
  cfg.net.width = 8;
  cfg.net.head_hidden = 16;
  cfg.batch_size = 32;
  cfg.regression_space = RegressionSpace::velocity;
  cfg.init.iterations = 20;
  cfg.main.iterations = 10;
  cfg.main.guidance_updates = 2;
  cfg.main.multi_sample = 2;
  cfg.main.ema_switch_iteration = 3;
  cfg.main.lr_generator = {1e-5, 1e-3, 5};
  cfg.main.lr_guidance = {1e-5, 1e-3, 5};
  cfg.dd1.dataset_size = 200;
  cfg.dd1.iterations = 10;
  return cfg;
}

double fcs_on(const NetParams& psi, const NetParams& theta, const RunConfig& cfg, std::uint64_t seed) {
  Rng rng(seed);
  const PosBatch samples = generate_batch(theta, draw_noise(cfg.net.length, 1024, cfg.net.dim, rng));
  return fcs_loss(psi, samples, 4, cfg.loss_options(), rng).loss;
}

}  // namespace

TEST(LrSchedule, LinearWarmupThenFlat) {
  const LrSchedule s{1e-6, 2e-4, 1000};
  EXPECT_EQ(s.at(0), 1e-6);
  EXPECT_NEAR(s.at(500), 0.5 * (1e-6 + 2e-4), 1e-18);
  EXPECT_EQ(s.at(1000), 2e-4);
  EXPECT_EQ(s.at(50000), 2e-4);
  EXPECT_EQ((LrSchedule{1.0, 3.0, 0}).at(0), 3.0);
}

TEST(Adam, FirstStepIsSignScaledByLr) {
  NetShape shape;
  shape.length = 1;
  shape.dim = 1;
  shape.width = 2;
  shape.head_hidden = 2;
  NetParams p = init_params(shape, 1, false);
  const NetParams before = p;
  NetParams g = p;
  for (std::size_t k = 0; k < g.tensor_count(); ++k) g.tensor(k).setConstant(k % 2 ? 3.0 : -0.5);
  AdamState st = adam_init(p);
  adam_step(p, st, g, 0.01, AdamConfig{});
  EXPECT_EQ(st.step, 1);
  for (std::size_t k = 0; k < p.tensor_count(); ++k) {
    const double expect = k % 2 ? -0.01 : 0.01;
    EXPECT_TRUE(((p.tensor(k) - before.tensor(k)).array() - expect).abs().maxCoeff() < 1e-8) << p.name(k);
  }
}

TEST(Adam, ClippingScalesMoments) {
  NetShape shape;
  shape.length = 1;
  shape.dim = 1;
  shape.width = 1;
  shape.head_hidden = 1;
  shape.head_layers = 1;
  NetParams p(shape);
  NetParams g(shape);
  for (std::size_t k = 0; k < g.tensor_count(); ++k) g.tensor(k).setConstant(10.0);
  const double norm = 10.0 * std::sqrt(static_cast<double>(g.size()));
  AdamState st = adam_init(p);
  AdamConfig cfg;
  cfg.clip_norm = 1.0;
  adam_step(p, st, g, 0.1, cfg);
  EXPECT_NEAR(st.m.tensor(0)(0, 0), 0.1 * 10.0 / norm, 1e-15);
}

TEST(Adam, MinimizesAQuadratic) {
  NetShape shape;
  shape.length = 1;
  shape.dim = 1;
  shape.width = 2;
  shape.head_hidden = 2;
  NetParams p = init_params(shape, 3, false);
  AdamState st = adam_init(p);
  for (int it = 0; it < 3000; ++it) adam_step(p, st, p, 1e-2, AdamConfig{});  // grad of ||p||^2 / 2
  for (double v : p.flatten()) EXPECT_LT(std::abs(v), 1e-2);
}

TEST(Ema, DynamicRateValues) {
  EXPECT_DOUBLE_EQ(ema_dynamic_rate(0), 0.1);
  EXPECT_DOUBLE_EQ(ema_dynamic_rate(9), 10.0 / 19.0);
  EXPECT_DOUBLE_EQ(ema_dynamic_rate(1000), 1001.0 / 1010.0);
  EXPECT_DOUBLE_EQ(ema_dynamic_rate(10000000), 0.9999);
  EXPECT_DOUBLE_EQ(ema_dynamic_rate(1000000), 0.9999);
  EXPECT_EQ(ema_rate(3, 0.5, 10), 0.5);
  EXPECT_DOUBLE_EQ(ema_rate(10, 0.5, 10), 11.0 / 20.0);
}

TEST(Ema, UpdateBlendsAndCounts) {
  NetShape shape;
  shape.length = 2;
  shape.width = 3;
  const NetParams a = init_params(shape, 1, false), b = init_params(shape, 2, false);
  const EmaState s0{a, 0};
  const EmaState s1 = ema_update(s0, b, 0.5, 0);
  EXPECT_EQ(s1.counter, 1);
  const auto fa = a.flatten(), fb = b.flatten(), f1 = s1.shadow.flatten();
  for (std::size_t k = 0; k < fa.size(); ++k) EXPECT_NEAR(f1[k], 0.1 * fa[k] + 0.9 * fb[k], 1e-15);
  const EmaState early = ema_update(s0, b, 0.5, 5);
  EXPECT_NEAR(early.shadow.flatten()[0], 0.5 * (fa[0] + fb[0]), 1e-15);
  const auto fixed = ema_update(EmaState{a, 7}, a, 0.5, 0).shadow.flatten();
  for (std::size_t k = 0; k < fa.size(); ++k) EXPECT_NEAR(fixed[k], fa[k], 1e-15);
  NetShape other = shape;
  other.width = 4;
  expect_error(ErrorKind::shape_mismatch, [&] { ema_update(s0, init_params(other, 1), 0.5, 0); });
}

TEST(RunConfig, Validation) {
  const TabularTeacher T = build_pair_teacher();
  const RunConfig good = tiny_config(T, 1);
  EXPECT_NO_THROW(good.validate());
  const auto bad = [&](auto&& mutate) {
    RunConfig c = good;
    mutate(c);
    expect_error(ErrorKind::config, [&] { c.validate(); });
  };
  bad([](RunConfig& c) { c.main.guidance_updates = 0; });
  bad([](RunConfig& c) { c.main.multi_sample = 0; });
  bad([](RunConfig& c) { c.init.iterations = -1; });
  bad([](RunConfig& c) { c.batch_size = 0; });
  bad([](RunConfig& c) { c.t_guard = 0.0; });
  bad([](RunConfig& c) { c.net.width = 0; });
  bad([](RunConfig& c) { c.eval.k_sweep = {4}; });
  bad([](RunConfig& c) { c.main.lr_generator.end = 0.0; });
  bad([](RunConfig& c) { c.schema_version = 2; });
  bad([](RunConfig& c) {
    c.align.enabled = true;
    c.align.at_iteration = c.main.iterations + 1;
  });
}

TEST(RunConfig, StreamsAreDistinct) {
  RunConfig cfg;
  std::set<std::uint64_t> seeds;
  for (auto s : {Stream::init_params, Stream::init_phase, Stream::main_phase, Stream::random_generator,
                 Stream::random_guidance, Stream::dd1, Stream::eval, Stream::periodic_eval})
    seeds.insert(stream_seed(cfg, s));
  EXPECT_EQ(seeds.size(), 8u);
}

TEST(Init, ZeroBudgetReturnsInitialParameters) {
  const TabularTeacher T = build_pair_teacher();
  RunConfig cfg = tiny_config(T, 1);
  cfg.init.iterations = 0;
  EXPECT_EQ(tune_ar_diffusion(T, Codebook::circle(2, 1), cfg), init_state(cfg).model);
}

TEST(Init, DeterministicAndMetricsReported) {
  const TabularTeacher T = build_dirichlet(3, 4, 1.0, 7);
  const Codebook cb = Codebook::circle(4, 2);
  const RunConfig cfg = tiny_config(T, 2);
  std::vector<MetricsRow> rows;
  PhaseHooks hooks;
  hooks.metrics_every = 5;
  hooks.on_metrics = [&](const MetricsRow& r) { rows.push_back(r); };
  InitState a = init_state(cfg);
  run_init(a, T, cb, cfg, hooks);
  EXPECT_EQ(a.iteration, 20);
  ASSERT_EQ(rows.size(), 4u);
  EXPECT_EQ(rows.back().phase, "init");
  EXPECT_EQ(rows.back().iteration, 20);
  EXPECT_EQ(tune_ar_diffusion(T, cb, cfg), a.model);
}

TEST(Init, StopAfterThenResumeMatchesStraightRun) {
  const TabularTeacher T = build_pair_teacher();
  const Codebook cb = Codebook::circle(2, 1);
  const RunConfig cfg = tiny_config(T, 1);
  InitState s = init_state(cfg);
  PhaseHooks stop;
  stop.stop_after = 7;
  run_init(s, T, cb, cfg, stop);
  EXPECT_EQ(s.iteration, 7);
  run_init(s, T, cb, cfg);
  EXPECT_EQ(s.model, tune_ar_diffusion(T, cb, cfg));
}

TEST(Init, DivergenceIsReported) {
  const TabularTeacher T = build_pair_teacher();
  RunConfig cfg = tiny_config(T, 1);
  cfg.init.lr = {1e300, 1e300, 0};
  expect_error(ErrorKind::divergence, [&] { tune_ar_diffusion(T, Codebook::circle(2, 1), cfg); });
}

TEST(Init, SingleCodeTeacherGtsLoss) {
  // Threshold frozen from a measured 5.9e-3. The remaining loss sits near
  // t_min, where the head must realize v = (x - c) / t with slope up to 1 / t_min.
  const TabularTeacher T(1, 1, {{1.0}});
  const Codebook cb(1, 1, {0.0});
  RunConfig cfg;
  cfg.net.length = 1;
  cfg.net.dim = 1;
  cfg.net.width = 32;
  cfg.batch_size = 256;
  cfg.regression_space = RegressionSpace::velocity;
  cfg.init.iterations = 2000;
  cfg.init.lr = {2e-3, 2e-3, 0};
  const NetParams model = tune_ar_diffusion(T, cb, cfg);
  Rng rng(5);
  double loss = 0.0;
  for (int k = 0; k < 20; ++k) loss += gts_loss(model, T, cb, sample_teacher_batch(T, 256, rng), cfg.loss_options(), rng).loss / 20;
  EXPECT_LT(loss, 1e-2);
}

TEST(Main, AblationFlagsSelectFreshNetworks) {
  const TabularTeacher T = build_pair_teacher();
  RunConfig cfg = tiny_config(T, 1);
  const NetParams init = init_params(cfg.net, 99, false);
  const MainState full = main_state(init, cfg);
  EXPECT_EQ(full.theta, init);
  EXPECT_EQ(full.psi, init);
  EXPECT_EQ(full.ema.shadow, init);
  cfg.ablation.random_generator_init = true;
  const MainState g = main_state(init, cfg);
  EXPECT_NE(g.theta, init);
  EXPECT_EQ(g.psi, init);
  cfg.ablation.random_generator_init = false;
  cfg.ablation.random_guidance_init = true;
  const MainState p = main_state(init, cfg);
  EXPECT_EQ(p.theta, init);
  EXPECT_NE(p.psi, init);
}

TEST(Main, DeterministicWithMetricsAndCheckpoints) {
  const TabularTeacher T = build_dirichlet(3, 4, 1.0, 7);
  const Codebook cb = Codebook::circle(4, 2);
  RunConfig cfg = tiny_config(T, 2);
  cfg.eval.every = 5;
  cfg.eval.periodic_samples = 500;
  const NetParams init = tune_ar_diffusion(T, cb, cfg);
  std::vector<MetricsRow> rows;
  std::vector<long> checkpoints;
  PhaseHooks hooks;
  hooks.metrics_every = 2;
  hooks.checkpoint_every = 4;
  hooks.on_metrics = [&](const MetricsRow& r) { rows.push_back(r); };
  hooks.on_checkpoint = [&](long it) { checkpoints.push_back(it); };
  MainState a = main_state(init, cfg);
  run_main(a, T, cb, cfg, hooks);
  EXPECT_EQ(checkpoints, (std::vector<long>{4, 8}));
  // every second iteration plus the periodic evaluations at 5 and 10
  std::vector<long> its;
  for (const MetricsRow& r : rows) its.push_back(r.iteration);
  ASSERT_EQ(its, (std::vector<long>{2, 4, 5, 6, 8, 10}));
  EXPECT_FALSE(rows[0].eval_tv.has_value());
  EXPECT_TRUE(rows[2].eval_tv.has_value());
  EXPECT_TRUE(rows[5].eval_tv.has_value());
  EXPECT_EQ(*rows[0].ema_rate, 0.5);
  EXPECT_DOUBLE_EQ(*rows[3].ema_rate, ema_dynamic_rate(5));
  const CsdResult b = train_csd(T, cb, init, cfg);
  EXPECT_EQ(a.theta, b.theta);
  EXPECT_EQ(a.ema.shadow, b.theta_ema);
  EXPECT_EQ(a.psi, b.psi);
  EXPECT_NE(a.theta, init);
}

TEST(Main, GuidanceOnlyProbeLossFalls) {
  // Frozen identity generator on toy-A; psi fitted alone with FCS.
  const TabularTeacher T = build_dirichlet(3, 4, 1.0, 7);
  RunConfig cfg;
  cfg.net.length = 3;
  cfg.net.dim = 2;
  cfg.batch_size = 128;
  cfg.regression_space = RegressionSpace::velocity;
  cfg.main.multi_sample = 2;
  const NetParams theta = init_params(cfg.net, 1);
  NetParams psi = init_params(cfg.net, 2);
  AdamState opt = adam_init(psi);
  Rng rng(3);
  std::vector<double> window_means;
  for (int w = 0; w < 5; ++w) {
    double sum = 0.0;
    for (int k = 0; k < 100; ++k) sum += fit_guidance(psi, opt, theta, 1, 1e-3, cfg, rng);
    window_means.push_back(sum / 100);
  }
  for (std::size_t w = 1; w < window_means.size(); ++w)
    EXPECT_LT(window_means[w], window_means[w - 1]) << "window " << w;
}

TEST(Alignment, ZeroBudgetSwapsInEmaOnly) {
  const TabularTeacher T = build_pair_teacher();
  RunConfig cfg = tiny_config(T, 1);
  cfg.align.iterations = 0;
  const NetParams a = init_params(cfg.net, 1, false), b = init_params(cfg.net, 2, false), c = init_params(cfg.net, 3);
  Rng rng(1);
  const AlignResult r = performance_alignment(a, b, c, T, Codebook::circle(2, 1), cfg, rng);
  EXPECT_EQ(r.theta, b);
  EXPECT_EQ(r.psi, c);
}

TEST(Alignment, RefitLowersHeldOutLossAndIsIdempotentInTheta) {
  const TabularTeacher T = build_pair_teacher();
  const Codebook cb = Codebook::circle(2, 1);
  RunConfig cfg = tiny_config(T, 1);
  cfg.batch_size = 128;
  cfg.align.iterations = 200;
  const NetParams theta = init_params(cfg.net, 4, false);
  const NetParams ema = init_params(cfg.net, 5, false);
  const NetParams psi = init_params(cfg.net, 6);
  Rng rng(7);
  const AlignResult once = performance_alignment(theta, ema, psi, T, cb, cfg, rng);
  EXPECT_LE(fcs_on(once.psi, once.theta, cfg, 1234), fcs_on(psi, once.theta, cfg, 1234));
  const AlignResult twice = performance_alignment(once.theta, once.theta, once.psi, T, cb, cfg, rng);
  EXPECT_EQ(twice.theta, once.theta);
}

TEST(Alignment, SplitsMainPhaseAndSwitchesK) {
  const TabularTeacher T = build_pair_teacher();
  const Codebook cb = Codebook::circle(2, 1);
  RunConfig cfg = tiny_config(T, 1);
  cfg.align.enabled = true;
  cfg.align.at_iteration = 4;
  cfg.align.iterations = 3;
  const NetParams init = init_params(cfg.net, 8, false);
  MainState s = main_state(init, cfg);
  PhaseHooks stop;
  stop.stop_after = 4;
  run_main(s, T, cb, cfg, stop);
  EXPECT_FALSE(s.aligned);
  const NetParams ema_before = s.ema.shadow;
  PhaseHooks one;
  one.stop_after = 5;
  MainState probe = s;
  run_main(probe, T, cb, cfg, one);
  EXPECT_TRUE(probe.aligned);
  EXPECT_NE(probe.theta, ema_before);  // one generator step after the swap
}

TEST(Dd1, MappingDatasetFollowsTeacher) {
  const TabularTeacher T = build_pair_teacher();
  const Codebook cb = Codebook::circle(2, 1);
  Rng rng(3);
  const MappingDataset d = build_mapping_dataset(T, cb, 2000, 10, Schedule{}, rng);
  std::set<TokenSeq> seen;
  for (const TokenSeq& z : d.tokens) {
    EXPECT_EQ(z[0], z[1]);
    seen.insert(z);
  }
  EXPECT_EQ(seen.size(), 2u);
  for (long r = 0; r < 10; ++r)
    EXPECT_EQ(d.targets[1](r, 0), cb.entry(d.tokens[r][1])[0]);
  Rng again(3);
  const MappingDataset e = build_mapping_dataset(T, cb, 2000, 10, Schedule{}, again);
  EXPECT_EQ(d.tokens, e.tokens);
  EXPECT_TRUE(d.noise[0] == e.noise[0]);
  expect_error(ErrorKind::invalid_argument, [&] { build_mapping_dataset(T, cb, 0, 10, Schedule{}, rng); });
}

TEST(Dd1, SingleCodeRegressionLossVanishes) {
  const TabularTeacher T(2, 1, {{1.0}, {1.0}});
  const Codebook cb(1, 1, {0.5});
  RunConfig cfg = tiny_config(T, 1);
  cfg.dd1.iterations = 600;
  cfg.dd1.lr = {3e-3, 3e-3, 0};
  double last = 1.0;
  PhaseHooks hooks;
  hooks.on_metrics = [&](const MetricsRow& r) { last = r.loss; };
  dd1_baseline(T, cb, cfg, hooks);
  EXPECT_LT(last, 1e-2);
}

TEST(SetPrediction, PairMarginalsAndTv) {
  const TabularTeacher T = build_pair_teacher();
  const auto m = set_prediction_baseline(T);
  ASSERT_EQ(m.size(), 2u);
  for (const ProbVector& p : m) {
    EXPECT_EQ(p[0], 0.5);
    EXPECT_EQ(p[1], 0.5);
  }
  EXPECT_EQ(tv_distance(product_distribution(m), T.enumerate_distribution()), 0.5);
}
