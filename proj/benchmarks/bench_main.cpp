// SPDX-License-Identifier: Apache-2.0
#include <benchmark/benchmark.h>

#include "csdlab/eval.hpp"
#include "csdlab/losses.hpp"
#include "csdlab/score_kernel.hpp"
#include "csdlab/training.hpp"

using namespace csdlab;

namespace {

NetShape toy_shape(int width) {
  NetShape s;
  s.length = 3;
  s.dim = 2;
  s.width = width;
  s.head_hidden = 2 * width;
  return s;
}

LossOptions velocity_options() {
  LossOptions o;
  o.regression_space = RegressionSpace::velocity;
  return o;
}

}  // namespace

static void BM_TeacherCondScore(benchmark::State& state) {
  const int V = static_cast<int>(state.range(0));
  const Codebook cb = Codebook::gaussian(V, 2, 1);
  std::vector<double> p(V, 1.0 / V);
  const Vec x{0.3, -0.2};
  Vec s(2);
  for (auto _ : state) {
    cond_score_into(p, cb, x, 0.4, s, {});
    benchmark::DoNotOptimize(s.data());
  }
}
BENCHMARK(BM_TeacherCondScore)->Arg(4)->Arg(16)->Arg(64);

static void BM_EulerTokenSample(benchmark::State& state) {
  const Codebook cb = Codebook::circle(4, 2);
  const std::vector<double> p{0.1, 0.2, 0.3, 0.4};
  const Vec x1{0.5, -1.0};
  for (auto _ : state) benchmark::DoNotOptimize(euler_token_sample(p, cb, x1, static_cast<int>(state.range(0))));
}
BENCHMARK(BM_EulerTokenSample)->Arg(10)->Arg(64);

static void BM_GeneratorForward(benchmark::State& state) {
  const NetParams theta = init_params(toy_shape(static_cast<int>(state.range(0))), 1, false);
  Rng rng(2);
  const PosBatch noise = draw_noise(3, 256, 2, rng);
  for (auto _ : state) benchmark::DoNotOptimize(generate_batch(theta, noise));
  state.SetItemsProcessed(state.iterations() * 256);
}
BENCHMARK(BM_GeneratorForward)->Arg(32)->Arg(64);

static void BM_CsdLossAndGradient(benchmark::State& state) {
  const TabularTeacher T = build_dirichlet(3, 4, 1.0, 7);
  const Codebook cb = Codebook::circle(4, 2);
  const NetParams theta = init_params(toy_shape(32), 1, false);
  const NetParams psi = init_params(toy_shape(32), 2, false);
  Rng rng(3);
  const PosBatch noise = draw_noise(3, state.range(0), 2, rng);
  const LossOptions opts = velocity_options();
  for (auto _ : state) benchmark::DoNotOptimize(csd_loss(theta, psi, T, cb, noise, opts, rng).loss);
}
BENCHMARK(BM_CsdLossAndGradient)->Arg(64)->Arg(256);

static void BM_FcsLossAndGradient(benchmark::State& state) {
  const NetParams theta = init_params(toy_shape(32), 1, false);
  const NetParams psi = init_params(toy_shape(32), 2, false);
  Rng rng(4);
  const PosBatch samples = generate_batch(theta, draw_noise(3, 256, 2, rng));
  const LossOptions opts = velocity_options();
  for (auto _ : state)
    benchmark::DoNotOptimize(fcs_loss(psi, samples, static_cast<int>(state.range(0)), opts, rng).loss);
}
BENCHMARK(BM_FcsLossAndGradient)->Arg(1)->Arg(2);

static void BM_GtsLossAndGradient(benchmark::State& state) {
  const TabularTeacher T = build_dirichlet(3, 4, 1.0, 7);
  const Codebook cb = Codebook::circle(4, 2);
  const NetParams model = init_params(toy_shape(32), 1, false);
  Rng rng(5);
  const auto batch = sample_teacher_batch(T, 256, rng);
  const LossOptions opts = velocity_options();
  for (auto _ : state) benchmark::DoNotOptimize(gts_loss(model, T, cb, batch, opts, rng).loss);
}
BENCHMARK(BM_GtsLossAndGradient);

static void BM_ConditionalTv(benchmark::State& state) {
  const TabularTeacher T = build_dirichlet(3, 4, 1.0, 7);
  Rng rng(6);
  const auto samples = sample_teacher_batch(T, 100000, rng);
  for (auto _ : state) benchmark::DoNotOptimize(per_position_conditional_tv(T, samples));
}
BENCHMARK(BM_ConditionalTv)->Unit(benchmark::kMillisecond);
BENCHMARK_MAIN();
