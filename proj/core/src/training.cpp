// SPDX-License-Identifier: Apache-2.0
#include "csdlab/training.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "csdlab/error.hpp"
#include "csdlab/eval.hpp"
#include "csdlab/score_kernel.hpp"

namespace csdlab {

using ad::Mat;

double LrSchedule::at(long iteration) const {
  if (warmup <= 0 || iteration >= warmup) return end;
  return start + (end - start) * static_cast<double>(iteration) / static_cast<double>(warmup);
}

AdamState adam_init(const NetParams& like) {
  AdamState s{like, like, 0};
  for (std::size_t k = 0; k < like.tensor_count(); ++k) {
    s.m.tensor(k).setZero();
    s.v.tensor(k).setZero();
  }
  return s;
}

void adam_step(NetParams& params, AdamState& state, const NetParams& grad, double lr, const AdamConfig& cfg) {
  if (grad.shape() != params.shape() || state.m.shape() != params.shape())
    throw Error(ErrorKind::shape_mismatch, "adam: parameter, gradient and state layouts differ");
  double scale = 1.0;
  if (cfg.clip_norm > 0.0) {
    double sq = 0.0;
    for (std::size_t k = 0; k < grad.tensor_count(); ++k) sq += grad.tensor(k).squaredNorm();
    const double norm = std::sqrt(sq);
    if (norm > cfg.clip_norm) scale = cfg.clip_norm / norm;
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (std::size_t k = 0; k < params.tensor_count(); ++k) {
    const Mat g = grad.tensor(k) * scale;
    Mat& m = state.m.tensor(k);
    Mat& v = state.v.tensor(k);
    m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
    v = cfg.beta2 * v + (1.0 - cfg.beta2) * g.cwiseProduct(g);
    params.tensor(k).array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + cfg.eps);
  }
}

namespace {

void require(bool ok, const std::string& what) {
  if (!ok) throw Error(ErrorKind::config, what);
}

void check_lr(const LrSchedule& lr, const std::string& name) {
  require(std::isfinite(lr.start) && lr.start >= 0.0, name + ".start must be >= 0");
  require(std::isfinite(lr.end) && lr.end > 0.0, name + ".end must be > 0");
  require(lr.warmup >= 0, name + ".warmup must be >= 0");
}

bool due(long done, long every) { return every > 0 && done % every == 0; }

bool stop_requested(long done, const PhaseHooks& hooks) { return hooks.stop_after >= 0 && done >= hooks.stop_after; }

}  // namespace

void RunConfig::validate() const {
  require(schema_version == 1, "unsupported config schema_version " + std::to_string(schema_version));
  try {
    net.validate();
    schedule.validate();
  } catch (const Error& e) {
    throw Error(ErrorKind::config, e.what());
  }
  require(batch_size >= 1, "batch_size must be >= 1");
  require(t_guard > 0.0 && t_guard < 1.0 - schedule.t_min, "t_guard must lie in (0, 1 - t_min)");
  require(std::isfinite(sid_alpha), "sid.alpha must be finite");
  require(std::isfinite(sid_omega) && sid_omega > 0.0, "sid.omega must be > 0");
  require(adam.beta1 >= 0.0 && adam.beta1 < 1.0 && adam.beta2 >= 0.0 && adam.beta2 < 1.0, "adam betas must be in [0, 1)");
  require(adam.eps > 0.0 && adam.clip_norm >= 0.0, "adam eps must be > 0 and clip_norm >= 0");
  require(init.iterations >= 0, "init.iterations must be >= 0");
  check_lr(init.lr, "init.lr");
  require(main.iterations >= 0, "main.iterations must be >= 0");
  check_lr(main.lr_generator, "main.lr_generator");
  check_lr(main.lr_guidance, "main.lr_guidance");
  require(main.guidance_updates >= 1, "main.guidance_updates must be >= 1");
  require(main.multi_sample >= 1, "main.multi_sample must be >= 1");
  require(main.ema_early_rate >= 0.0 && main.ema_early_rate < 1.0, "main.ema_early_rate must be in [0, 1)");
  require(main.ema_switch_iteration >= 0, "main.ema_switch_iteration must be >= 0");
  require(align.at_iteration >= 0 && align.iterations >= 0 && align.guidance_updates_after >= 1,
          "align counts must be >= 0 and guidance_updates_after >= 1");
  require(!align.enabled || align.at_iteration <= main.iterations, "align.at_iteration beyond main.iterations");
  require(dd1.dataset_size >= 1 && dd1.iterations >= 0 && dd1.euler_steps >= 1, "dd1 sizes must be positive");
  check_lr(dd1.lr, "dd1.lr");
  require(eval.samples >= 1 && eval.euler_steps >= 1 && eval.every >= 0 && eval.periodic_samples >= 1,
          "eval sizes must be positive");
  for (int k : eval.k_sweep) require(k >= 1 && k <= net.length + 1, "eval.k_sweep entries must lie in [1, n + 1]");
  require(checkpoint_every >= 0 && metrics_every >= 1, "checkpoint_every >= 0 and metrics_every >= 1 required");
}

LossOptions RunConfig::loss_options() const {
  LossOptions o;
  o.schedule = schedule;
  o.t_guard = t_guard;
  o.sid.alpha = sid_alpha;
  const double w = sid_omega;
  o.sid.omega = [w](double) { return w; };
  o.sid.stop_grad_first_factor = sid_stop_grad_first_factor;
  o.regression_space = regression_space;
  return o;
}

std::uint64_t stream_seed(const RunConfig& cfg, Stream stream) {
  return Rng::derive(cfg.seed, static_cast<std::uint64_t>(stream));
}

double ema_dynamic_rate(long iteration) {
  return std::min(0.9999, (static_cast<double>(iteration) + 1.0) / (static_cast<double>(iteration) + 10.0));
}

double ema_rate(long iteration, double early_rate, long switch_iteration) {
  return iteration < switch_iteration ? early_rate : ema_dynamic_rate(iteration);
}

EmaState ema_update(const EmaState& state, const NetParams& params, double early_rate, long switch_iteration) {
  if (state.shadow.shape() != params.shape())
    throw Error(ErrorKind::shape_mismatch, "ema: shadow and parameter layouts differ");
  const double r = ema_rate(state.counter, early_rate, switch_iteration);
  EmaState next{state.shadow, state.counter + 1};
  for (std::size_t k = 0; k < params.tensor_count(); ++k)
    next.shadow.tensor(k) = r * state.shadow.tensor(k) + (1.0 - r) * params.tensor(k);
  return next;
}

PosBatch draw_noise(int length, Eigen::Index rows, int dim, Rng& rng) {
  PosBatch out(length, Mat(rows, dim));
  for (Mat& m : out)
    for (Eigen::Index k = 0; k < m.size(); ++k) m.data()[k] = rng.normal();
  return out;
}

std::vector<TokenSeq> sample_teacher_batch(const TabularTeacher& teacher, long count, Rng& rng) {
  std::vector<TokenSeq> out;
  out.reserve(count);
  for (long b = 0; b < count; ++b) out.push_back(teacher.ancestral_sample(rng));
  return out;
}

InitState init_state(const RunConfig& cfg) {
  NetParams model = init_params(cfg.net, stream_seed(cfg, Stream::init_params));
  AdamState opt = adam_init(model);
  return {std::move(model), std::move(opt), Rng(stream_seed(cfg, Stream::init_phase)), 0};
}

void run_init(InitState& state, const TabularTeacher& teacher, const Codebook& cb, const RunConfig& cfg,
              const PhaseHooks& hooks) {
  const LossOptions opts = cfg.loss_options();
  while (state.iteration < cfg.init.iterations && !stop_requested(state.iteration, hooks)) {
    const double lr = cfg.init.lr.at(state.iteration);
    const auto batch = sample_teacher_batch(teacher, cfg.batch_size, state.rng);
    const LossResult g = gts_loss(state.model, teacher, cb, batch, opts, state.rng);
    adam_step(state.model, state.opt, g.grad, lr, cfg.adam);
    ++state.iteration;
    if (hooks.on_metrics && (due(state.iteration, hooks.metrics_every) || state.iteration == cfg.init.iterations))
      hooks.on_metrics({"init", state.iteration, g.loss, std::nullopt, lr, std::nullopt, std::nullopt, std::nullopt});
    if (hooks.on_checkpoint && due(state.iteration, hooks.checkpoint_every)) hooks.on_checkpoint(state.iteration);
  }
}

MainState main_state(const NetParams& init, const RunConfig& cfg) {
  NetParams theta = cfg.ablation.random_generator_init ? init_params(cfg.net, stream_seed(cfg, Stream::random_generator))
                                                       : init;
  NetParams psi = cfg.ablation.random_guidance_init ? init_params(cfg.net, stream_seed(cfg, Stream::random_guidance))
                                                    : init;
  MainState s{theta, psi, EmaState{theta, 0}, adam_init(theta), adam_init(psi),
              Rng(stream_seed(cfg, Stream::main_phase)), 0, false};
  return s;
}

double fit_guidance(NetParams& psi, AdamState& opt, const NetParams& theta, long iterations, double lr,
                    const RunConfig& cfg, Rng& rng) {
  const LossOptions opts = cfg.loss_options();
  double last = std::numeric_limits<double>::quiet_NaN();
  for (long j = 0; j < iterations; ++j) {
    const PosBatch samples = generate_batch(theta, draw_noise(cfg.net.length, cfg.batch_size, cfg.net.dim, rng));
    const LossResult f = fcs_loss(psi, samples, cfg.main.multi_sample, opts, rng);
    adam_step(psi, opt, f.grad, lr, cfg.adam);
    last = f.loss;
  }
  return last;
}

void run_main(MainState& state, const TabularTeacher& teacher, const Codebook& cb, const RunConfig& cfg,
              const PhaseHooks& hooks) {
  const LossOptions opts = cfg.loss_options();
  const int n = cfg.net.length;
  const int C = cfg.net.dim;
  while (state.iteration < cfg.main.iterations && !stop_requested(state.iteration, hooks)) {
    const long it = state.iteration;
    if (cfg.align.enabled && !state.aligned && it == cfg.align.at_iteration) {
      state.theta = state.ema.shadow;
      fit_guidance(state.psi, state.opt_psi, state.theta, cfg.align.iterations, cfg.main.lr_guidance.end, cfg,
                   state.rng);
      state.aligned = true;
    }
    const int K = state.aligned ? cfg.align.guidance_updates_after : cfg.main.guidance_updates;
    const double lr_g = cfg.main.lr_generator.at(it);
    const double lr_f = cfg.main.lr_guidance.at(it);

    const LossResult g =
        csd_loss(state.theta, state.psi, teacher, cb, draw_noise(n, cfg.batch_size, C, state.rng), opts, state.rng);
    adam_step(state.theta, state.opt_theta, g.grad, lr_g, cfg.adam);

    std::optional<double> guidance_loss;
    for (int k = 0; k < K; ++k) {
      const PosBatch samples = generate_batch(state.theta, draw_noise(n, cfg.batch_size, C, state.rng));
      const LossResult f = fcs_loss(state.psi, samples, cfg.main.multi_sample, opts, state.rng);
      adam_step(state.psi, state.opt_psi, f.grad, lr_f, cfg.adam);
      guidance_loss = f.loss;
    }

    const double rate = ema_rate(state.ema.counter, cfg.main.ema_early_rate, cfg.main.ema_switch_iteration);
    state.ema = ema_update(state.ema, state.theta, cfg.main.ema_early_rate, cfg.main.ema_switch_iteration);
    ++state.iteration;

    std::optional<double> tv;
    if (due(state.iteration, cfg.eval.every)) {
      Rng eval_rng(Rng::derive(stream_seed(cfg, Stream::periodic_eval), static_cast<std::uint64_t>(state.iteration)));
      const auto samples = one_step_generate(state.ema.shadow, cb, cfg.eval.periodic_samples, eval_rng);
      tv = tv_distance(empirical_distribution(samples), teacher.enumerate_distribution());
    }
    if (hooks.on_metrics &&
        (tv || due(state.iteration, hooks.metrics_every) || state.iteration == cfg.main.iterations))
      hooks.on_metrics({"main", state.iteration, g.loss, guidance_loss, lr_g, lr_f, rate, tv});
    if (hooks.on_checkpoint && due(state.iteration, hooks.checkpoint_every)) hooks.on_checkpoint(state.iteration);
  }
}

NetParams tune_ar_diffusion(const TabularTeacher& teacher, const Codebook& cb, const RunConfig& cfg) {
  InitState s = init_state(cfg);
  run_init(s, teacher, cb, cfg);
  return s.model;
}

CsdResult train_csd(const TabularTeacher& teacher, const Codebook& cb, const NetParams& init, const RunConfig& cfg) {
  MainState s = main_state(init, cfg);
  run_main(s, teacher, cb, cfg);
  return {s.theta, s.ema.shadow, s.psi};
}

AlignResult performance_alignment(const NetParams& theta, const NetParams& theta_ema, const NetParams& psi,
                                  const TabularTeacher& teacher, const Codebook& cb, const RunConfig& cfg, Rng& rng) {
  (void)theta;
  (void)teacher;
  (void)cb;
  AlignResult r{theta_ema, psi};
  AdamState opt = adam_init(r.psi);
  fit_guidance(r.psi, opt, r.theta, cfg.align.iterations, cfg.main.lr_guidance.end, cfg, rng);
  return r;
}

MappingDataset build_mapping_dataset(const TabularTeacher& teacher, const Codebook& cb, long size, int euler_steps,
                                     const Schedule& sched, Rng& rng) {
  if (size < 1) throw Error(ErrorKind::invalid_argument, "mapping dataset size must be >= 1");
  const int n = teacher.length();
  const int C = cb.dim();
  MappingDataset d;
  d.noise.assign(n, Mat(size, C));
  d.targets.assign(n, Mat(size, C));
  d.tokens.assign(size, TokenSeq(n));
  Vec eps(C);
  for (long r = 0; r < size; ++r) {
    for (int i = 0; i < n; ++i) {
      for (int c = 0; c < C; ++c) eps[c] = d.noise[i](r, c) = rng.normal();
      const auto p = teacher.cond_row(std::span<const int>(d.tokens[r]).first(i));
      const Vec x = euler_token_sample(p, cb, eps, euler_steps, sched);
      const int id = nearest_code(x, cb);
      d.tokens[r][i] = id;
      const auto code = cb.entry(id);
      for (int c = 0; c < C; ++c) d.targets[i](r, c) = code[c];
    }
  }
  return d;
}

NetParams dd1_baseline(const TabularTeacher& teacher, const Codebook& cb, const RunConfig& cfg,
                       const PhaseHooks& hooks) {
  Rng rng(stream_seed(cfg, Stream::dd1));
  const MappingDataset data =
      build_mapping_dataset(teacher, cb, cfg.dd1.dataset_size, cfg.dd1.euler_steps, cfg.schedule, rng);
  NetParams theta = init_params(cfg.net, stream_seed(cfg, Stream::init_params));
  AdamState opt = adam_init(theta);
  const int n = cfg.net.length;
  const int C = cfg.net.dim;
  const Eigen::Index B = cfg.batch_size;
  PosBatch noise(n, Mat(B, C)), targets(n, Mat(B, C));
  for (long it = 0; it < cfg.dd1.iterations; ++it) {
    for (Eigen::Index b = 0; b < B; ++b) {
      const auto r = static_cast<Eigen::Index>(rng.engine()() % static_cast<std::uint64_t>(cfg.dd1.dataset_size));
      for (int i = 0; i < n; ++i) {
        noise[i].row(b) = data.noise[i].row(r);
        targets[i].row(b) = data.targets[i].row(r);
      }
    }
    const LossResult g = mapping_regression_loss(theta, noise, targets);
    const double lr = cfg.dd1.lr.at(it);
    adam_step(theta, opt, g.grad, lr, cfg.adam);
    if (hooks.on_metrics && (due(it + 1, hooks.metrics_every) || it + 1 == cfg.dd1.iterations))
      hooks.on_metrics({"dd1", it + 1, g.loss, std::nullopt, lr, std::nullopt, std::nullopt, std::nullopt});
  }
  return theta;
}

std::vector<ProbVector> set_prediction_baseline(const TabularTeacher& teacher) {
  const auto marg =
      position_marginals(teacher.enumerate_distribution(), teacher.length(), teacher.vocab_size());
  std::vector<ProbVector> out;
  for (const auto& m : marg) out.emplace_back(m);
  return out;
}

}  // namespace csdlab
