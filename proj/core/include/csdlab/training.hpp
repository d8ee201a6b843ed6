// SPDX-License-Identifier: Apache-2.0
//
// Training orchestration: AR-diffusion tuning with the ground-truth score,
// the alternating generator/guidance loop, EMA tracking, performance
// alignment and the two one-step baselines.
#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "csdlab/core.hpp"
#include "csdlab/losses.hpp"
#include "csdlab/nets.hpp"
#include "csdlab/rng.hpp"
#include "csdlab/teacher.hpp"

namespace csdlab {

/// Linear warm-up from `start` to `end` over `warmup` iterations, then flat.
struct LrSchedule {
  double start = 1e-3;
  double end = 1e-3;
  long warmup = 0;

  double at(long iteration) const;
};

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  /// Global gradient-norm clip; 0 disables clipping.
  double clip_norm = 0.0;
};

struct AdamState {
  NetParams m;
  NetParams v;
  long step = 0;
};

AdamState adam_init(const NetParams& like);
void adam_step(NetParams& params, AdamState& state, const NetParams& grad, double lr, const AdamConfig& cfg);

struct TeacherSpec {
  std::string family = "dirichlet";  ///< dirichlet | pair | custom
  int length = 3;
  int vocab = 4;
  int dim = 2;
  std::uint64_t seed = 7;
  double concentration = 1.0;
  std::string codebook = "circle";  ///< circle | gaussian
  std::uint64_t codebook_seed = 0;
  double codebook_scale = 1.0;
  std::string teacher_path;   ///< custom family: teacher JSON
  std::string codebook_path;  ///< optional explicit codebook JSON
};

struct RunConfig {
  int schema_version = 1;
  TeacherSpec teacher;
  NetShape net{};
  int batch_size = 256;
  Schedule schedule{};
  double t_guard = 1e-3;
  RegressionSpace regression_space = RegressionSpace::score;
  double sid_alpha = 1.0;
  double sid_omega = 1.0;  ///< constant weight function
  bool sid_stop_grad_first_factor = false;
  AdamConfig adam{};

  struct Init {
    long iterations = 2000;
    LrSchedule lr{1e-3, 1e-3, 0};
  } init;

  struct Main {
    long iterations = 20000;
    LrSchedule lr_generator{1e-6, 2e-4, 1000};
    LrSchedule lr_guidance{1e-6, 2e-4, 1000};
    int guidance_updates = 5;  ///< K
    int multi_sample = 4;      ///< m
    double ema_early_rate = 0.5;
    long ema_switch_iteration = 1000;
  } main;

  struct Align {
    bool enabled = false;
    long at_iteration = 0;
    long iterations = 0;
    int guidance_updates_after = 2;
  } align;

  struct Dd1 {
    bool enabled = false;
    long dataset_size = 20000;
    long iterations = 4000;
    int euler_steps = 10;
    LrSchedule lr{1e-3, 1e-3, 0};
  } dd1;

  struct Ablation {
    bool random_generator_init = false;
    bool random_guidance_init = false;
  } ablation;

  struct Eval {
    long samples = 100000;
    int euler_steps = 10;
    std::vector<int> k_sweep{1, 2, 3};
    long every = 0;           ///< periodic one-step TV during main training; 0 disables
    long periodic_samples = 10000;
  } eval;

  std::uint64_t seed = 0;
  long checkpoint_every = 1000;
  long metrics_every = 10;

  /// Throws a config error on any invalid field.
  void validate() const;
  LossOptions loss_options() const;
};

/// Random-stream identifiers derived from RunConfig::seed.
enum class Stream : std::uint64_t {
  init_params = 1,
  init_phase = 2,
  main_phase = 3,
  random_generator = 4,
  random_guidance = 5,
  dd1 = 6,
  eval = 7,
  periodic_eval = 8,
};
std::uint64_t stream_seed(const RunConfig& cfg, Stream stream);

// ---- EMA ---------------------------------------------------------------

struct EmaState {
  NetParams shadow;
  long counter = 0;
};

/// min(0.9999, (iter + 1) / (iter + 10)).
double ema_dynamic_rate(long iteration);
/// early_rate before `switch_iteration`, the dynamic rate from then on.
double ema_rate(long iteration, double early_rate, long switch_iteration);
EmaState ema_update(const EmaState& state, const NetParams& params, double early_rate, long switch_iteration);

// ---- phase drivers -------------------------------------------------------

struct MetricsRow {
  std::string phase;
  long iteration = 0;
  double loss = 0.0;
  std::optional<double> guidance_loss;
  double lr_generator = 0.0;
  std::optional<double> lr_guidance;
  std::optional<double> ema_rate;
  std::optional<double> eval_tv;
};

struct PhaseHooks {
  std::function<void(const MetricsRow&)> on_metrics;
  /// Called every `checkpoint_every` iterations with the completed iteration count.
  std::function<void(long)> on_checkpoint;
  long checkpoint_every = 0;
  long metrics_every = 1;
  /// Stop (without completing the phase) once this many iterations are done; -1 runs to the end.
  long stop_after = -1;
};

struct InitState {
  NetParams model;
  AdamState opt;
  Rng rng;
  long iteration = 0;
};

InitState init_state(const RunConfig& cfg);
/// Runs GTS tuning until cfg.init.iterations (or hooks.stop_after).
void run_init(InitState& state, const TabularTeacher& teacher, const Codebook& cb, const RunConfig& cfg,
              const PhaseHooks& hooks = {});

struct MainState {
  NetParams theta;
  NetParams psi;
  EmaState ema;
  AdamState opt_theta;
  AdamState opt_psi;
  Rng rng;
  long iteration = 0;
  bool aligned = false;
};

/// Generator and guidance both cloned from `init`, unless the ablation flags
/// request a fresh random network for either.
MainState main_state(const NetParams& init, const RunConfig& cfg);
void run_main(MainState& state, const TabularTeacher& teacher, const Codebook& cb, const RunConfig& cfg,
              const PhaseHooks& hooks = {});

/// Guidance-only FCS updates against a frozen generator.
/// Returns the last FCS loss (NaN when iterations == 0).
double fit_guidance(NetParams& psi, AdamState& opt, const NetParams& theta, long iterations, double lr,
                    const RunConfig& cfg, Rng& rng);

// ---- whole-phase entry points ----------------------------------------------

NetParams tune_ar_diffusion(const TabularTeacher& teacher, const Codebook& cb, const RunConfig& cfg);

struct CsdResult {
  NetParams theta;
  NetParams theta_ema;
  NetParams psi;
};
CsdResult train_csd(const TabularTeacher& teacher, const Codebook& cb, const NetParams& init, const RunConfig& cfg);

struct AlignResult {
  NetParams theta;
  NetParams psi;
};
/// theta' = EMA shadow; psi refit alone with FCS for cfg.align.iterations.
AlignResult performance_alignment(const NetParams& theta, const NetParams& theta_ema, const NetParams& psi,
                                  const TabularTeacher& teacher, const Codebook& cb, const RunConfig& cfg, Rng& rng);

/// Deterministic noise -> token pairs built by per-token Euler ODE solves.
struct MappingDataset {
  PosBatch noise;    ///< per position, N x C
  PosBatch targets;  ///< per position, N x C embedded tokens
  std::vector<TokenSeq> tokens;
};
MappingDataset build_mapping_dataset(const TabularTeacher& teacher, const Codebook& cb, long size, int euler_steps,
                                     const Schedule& sched, Rng& rng);
NetParams dd1_baseline(const TabularTeacher& teacher, const Codebook& cb, const RunConfig& cfg,
                       const PhaseHooks& hooks = {});

/// Per-position marginals of the teacher: the optimum of one-step set prediction.
std::vector<ProbVector> set_prediction_baseline(const TabularTeacher& teacher);

/// B x C standard-normal noise per position.
PosBatch draw_noise(int length, Eigen::Index rows, int dim, Rng& rng);
std::vector<TokenSeq> sample_teacher_batch(const TabularTeacher& teacher, long count, Rng& rng);

}  // namespace csdlab
