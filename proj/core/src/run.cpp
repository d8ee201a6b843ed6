// SPDX-License-Identifier: Apache-2.0
#include "csdlab/run.hpp"

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <sstream>

#include "csdlab/error.hpp"
#include "csdlab/eval.hpp"

namespace csdlab {

TrainPhase train_phase_from_string(const std::string& name) {
  if (name == "init") return TrainPhase::init;
  if (name == "main") return TrainPhase::main;
  if (name == "align") return TrainPhase::align;
  if (name == "dd1") return TrainPhase::dd1;
  if (name == "all") return TrainPhase::all;
  throw Error(ErrorKind::invalid_argument, "unknown phase '" + name + "' (init|main|align|dd1|all)");
}

TeacherBundle build_teacher(const TeacherSpec& spec, const fs::path& base_dir) {
  const auto resolve = [&](const std::string& p) {
    const fs::path path(p);
    return path.is_absolute() || base_dir.empty() ? path : base_dir / path;
  };
  std::optional<TabularTeacher> teacher;
  if (spec.family == "dirichlet") {
    teacher = build_dirichlet(spec.length, spec.vocab, spec.concentration, spec.seed);
  } else if (spec.family == "pair") {
    teacher = build_pair_teacher();
  } else if (spec.family == "custom") {
    if (spec.teacher_path.empty()) throw Error(ErrorKind::config, "custom teacher needs teacher.teacher_path");
    teacher = load_teacher(resolve(spec.teacher_path));
  } else {
    throw Error(ErrorKind::config, "unknown teacher family '" + spec.family + "' (dirichlet|pair|custom)");
  }
  if (teacher->length() != spec.length || teacher->vocab_size() != spec.vocab)
    throw Error(ErrorKind::config, "teacher n/V in the config (" + std::to_string(spec.length) + "/" +
                                       std::to_string(spec.vocab) + ") differ from the built teacher (" +
                                       std::to_string(teacher->length()) + "/" +
                                       std::to_string(teacher->vocab_size()) + ")");
  std::optional<Codebook> cb;
  if (!spec.codebook_path.empty()) {
    cb = load_codebook(resolve(spec.codebook_path));
  } else if (spec.codebook == "circle") {
    cb = Codebook::circle(spec.vocab, spec.dim);
  } else if (spec.codebook == "gaussian") {
    cb = Codebook::gaussian(spec.vocab, spec.dim, spec.codebook_seed, spec.codebook_scale);
  } else {
    throw Error(ErrorKind::config, "unknown codebook '" + spec.codebook + "' (circle|gaussian)");
  }
  if (cb->vocab_size() != spec.vocab || cb->dim() != spec.dim)
    throw Error(ErrorKind::config, "codebook V/C differ from the teacher spec");
  return {std::move(*teacher), std::move(*cb)};
}

std::string teacher_summary(const TabularTeacher& teacher, int top) {
  const Distribution dist = teacher.enumerate_distribution();
  double entropy = 0.0;
  long support = 0;
  std::vector<std::pair<double, TokenSeq>> ranked;
  for (const auto& [z, p] : dist) {
    if (p > 0.0) {
      entropy -= p * std::log(p);
      ++support;
    }
    ranked.emplace_back(p, z);
  }
  std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  const double set_tv = tv_distance(product_distribution(set_prediction_baseline(teacher)), dist);

  std::ostringstream os;
  os << std::setprecision(6);
  os << "teacher: n=" << teacher.length() << " V=" << teacher.vocab_size() << " sequences=" << dist.size()
     << " support=" << support << "\n";
  os << "entropy (nats): " << entropy << "\n";
  os << "set-prediction TV: " << set_tv << "\n";
  os << "most likely:\n";
  for (int k = 0; k < top && k < static_cast<int>(ranked.size()); ++k) {
    os << "  [";
    for (std::size_t i = 0; i < ranked[k].second.size(); ++i) os << (i ? "," : "") << ranked[k].second[i];
    os << "] " << ranked[k].first << "\n";
  }
  return os.str();
}

RunLock::RunLock(const fs::path& dir) {
  fs::create_directories(dir);
  const fs::path p = dir / ".lock";
  fd_ = ::open(p.c_str(), O_RDWR | O_CREAT, 0644);
  if (fd_ < 0) throw Error(ErrorKind::io, "cannot open lock file " + p.string());
  if (::flock(fd_, LOCK_EX | LOCK_NB) != 0) {
    ::close(fd_);
    fd_ = -1;
    throw Error(ErrorKind::io, "run directory " + dir.string() + " is locked by another process");
  }
}

RunLock::~RunLock() {
  if (fd_ >= 0) {
    ::flock(fd_, LOCK_UN);
    ::close(fd_);
  }
}

namespace {

int phase_rank(const std::string& phase) {
  if (phase == "init") return 0;
  if (phase == "main") return 1;
  return 2;
}

// Drops metrics logged after the resume point of `phase` (and anything from later phases).
void truncate_metrics(const RunPaths& paths, const std::string& phase, long resume_iteration) {
  std::vector<MetricsRow> kept;
  for (MetricsRow& r : read_metrics(paths.metrics())) {
    const int rank = phase_rank(r.phase);
    if (rank < phase_rank(phase) || (r.phase == phase && r.iteration <= resume_iteration)) kept.push_back(std::move(r));
  }
  write_metrics(paths.metrics(), kept);
}

void say(const TrainOptions& opts, const std::string& msg) {
  if (opts.log) opts.log(msg);
}

void check_hash(const std::string& stored, const std::string& expected, const fs::path& where) {
  if (stored != expected)
    throw Error(ErrorKind::config,
                where.string() + " was written by a different configuration (hash " + stored + ", expected " +
                    expected + ")");
}

InitState run_init_phase(const RunConfig& cfg, const RunPaths& paths, const TeacherBundle& tb, const std::string& hash,
                         const TrainOptions& opts) {
  InitState state = init_state(cfg);
  if (fs::exists(paths.init_checkpoint())) {
    InitCheckpoint ck = load_init_checkpoint(paths.init_checkpoint(), cfg.net);
    check_hash(ck.config_hash, hash, paths.init_checkpoint());
    if (ck.complete) {
      say(opts, "init: complete checkpoint found, skipping");
      return std::move(ck.state);
    }
    state = std::move(ck.state);
    say(opts, "init: resuming at iteration " + std::to_string(state.iteration));
  }
  truncate_metrics(paths, "init", state.iteration);
  PhaseHooks hooks;
  hooks.metrics_every = cfg.metrics_every;
  hooks.checkpoint_every = cfg.checkpoint_every;
  hooks.on_metrics = [&](const MetricsRow& r) { append_metrics(paths.metrics(), r); };
  hooks.on_checkpoint = [&](long) { save_checkpoint(paths.init_checkpoint(), state, false, hash); };
  run_init(state, tb.teacher, tb.codebook, cfg, hooks);
  save_checkpoint(paths.init_checkpoint(), state, true, hash);
  say(opts, "init: done after " + std::to_string(state.iteration) + " iterations");
  return state;
}

InitState require_init(const RunConfig& cfg, const RunPaths& paths, const std::string& hash) {
  if (!fs::exists(paths.init_checkpoint()))
    throw Error(ErrorKind::missing_artifact, "no init checkpoint in " + paths.dir.string() + "; run --phase init first");
  InitCheckpoint ck = load_init_checkpoint(paths.init_checkpoint(), cfg.net);
  check_hash(ck.config_hash, hash, paths.init_checkpoint());
  if (!ck.complete) throw Error(ErrorKind::missing_artifact, "init phase has not finished; rerun --phase init");
  return std::move(ck.state);
}

// Runs the main loop up to `until` iterations (or the end when until < 0).
void run_main_phase(const RunConfig& cfg, const RunPaths& paths, const TeacherBundle& tb, const std::string& hash,
                    const TrainOptions& opts, long until, bool allow_alignment) {
  MainState state;
  if (fs::exists(paths.main_checkpoint())) {
    MainCheckpoint ck = load_main_checkpoint(paths.main_checkpoint(), cfg.net);
    check_hash(ck.config_hash, hash, paths.main_checkpoint());
    state = std::move(ck.state);
    if (state.iteration > 0) say(opts, "main: resuming at iteration " + std::to_string(state.iteration));
  } else {
    state = main_state(require_init(cfg, paths, hash).model, cfg);
  }
  const bool align_pending =
      cfg.align.enabled && !state.aligned && state.iteration <= cfg.align.at_iteration;
  long stop = until < 0 ? cfg.main.iterations : std::min(until, cfg.main.iterations);
  if (align_pending && !allow_alignment) stop = std::min(stop, cfg.align.at_iteration);
  if (align_pending && allow_alignment && state.iteration < cfg.align.at_iteration)
    throw Error(ErrorKind::missing_artifact, "alignment needs main training up to iteration " +
                                                 std::to_string(cfg.align.at_iteration) + "; run --phase main first");
  if (state.iteration >= stop && !(align_pending && allow_alignment)) {
    say(opts, "main: nothing to do at iteration " + std::to_string(state.iteration));
    return;
  }
  truncate_metrics(paths, "main", state.iteration);

  PhaseHooks hooks;
  hooks.metrics_every = cfg.metrics_every;
  hooks.checkpoint_every = cfg.checkpoint_every;
  hooks.stop_after = stop;
  if (opts.interrupt_after >= 0) hooks.stop_after = std::min(stop, opts.interrupt_after);
  hooks.on_metrics = [&](const MetricsRow& r) { append_metrics(paths.metrics(), r); };
  hooks.on_checkpoint = [&](long it) {
    save_checkpoint(paths.main_checkpoint(), state, it == cfg.main.iterations, hash);
  };
  run_main(state, tb.teacher, tb.codebook, cfg, hooks);
  if (opts.interrupt_after >= 0 && state.iteration == opts.interrupt_after && state.iteration < stop) {
    say(opts, "main: interrupted at iteration " + std::to_string(state.iteration));
    return;
  }
  save_checkpoint(paths.main_checkpoint(), state, state.iteration == cfg.main.iterations, hash);
  say(opts, "main: stopped at iteration " + std::to_string(state.iteration));
}

void run_dd1_phase(const RunConfig& cfg, const RunPaths& paths, const TeacherBundle& tb, const TrainOptions& opts) {
  truncate_metrics(paths, "dd1", -1);
  PhaseHooks hooks;
  hooks.metrics_every = cfg.metrics_every;
  hooks.on_metrics = [&](const MetricsRow& r) { append_metrics(paths.metrics(), r); };
  const NetParams theta = dd1_baseline(tb.teacher, tb.codebook, cfg, hooks);
  write_text(paths.dd1_params(), params_to_json(theta));
  say(opts, "dd1: done");
}

}  // namespace

void train_run(const RunConfig& requested, const fs::path& run_dir, const TrainOptions& opts,
               const fs::path& config_dir) {
  // the network shape always follows the teacher, as it does for configs read from disk
  RunConfig cfg = requested;
  cfg.net.length = cfg.teacher.length;
  cfg.net.dim = cfg.teacher.dim;
  cfg.validate();
  const TeacherBundle tb = build_teacher(cfg.teacher, config_dir);
  const RunPaths paths{run_dir};
  const RunLock lock(run_dir);
  const std::string hash = config_hash(cfg);
  if (fs::exists(paths.config())) {
    const RunConfig existing = load_config(paths.config());
    check_hash(config_hash(existing), hash, paths.config());
  } else {
    write_text(paths.config(), config_to_json(cfg) + "\n");
  }
  save_teacher(paths.teacher(), tb.teacher);
  save_codebook(paths.codebook(), tb.codebook);

  const TrainPhase ph = opts.phase;
  if (ph == TrainPhase::init || ph == TrainPhase::all) run_init_phase(cfg, paths, tb, hash, opts);
  if (ph == TrainPhase::main || ph == TrainPhase::all) run_main_phase(cfg, paths, tb, hash, opts, -1, false);
  if (ph == TrainPhase::align || (ph == TrainPhase::all && cfg.align.enabled)) {
    if (!cfg.align.enabled) throw Error(ErrorKind::config, "align phase requested but align.enabled is false");
    run_main_phase(cfg, paths, tb, hash, opts, -1, true);
  }
  if (ph == TrainPhase::dd1 || (ph == TrainPhase::all && cfg.dd1.enabled)) run_dd1_phase(cfg, paths, tb, opts);
}

Report evaluate_run(const fs::path& run_dir, const EvalOptions& opts) {
  const RunPaths paths{run_dir};
  if (!fs::exists(paths.config()) || !fs::exists(paths.init_checkpoint()))
    throw Error(ErrorKind::missing_artifact, "no checkpoint found in " + run_dir.string());
  const RunLock lock(run_dir);
  const RunConfig cfg = load_config(paths.config());
  cfg.validate();
  const TabularTeacher teacher = load_teacher(paths.teacher());
  const Codebook cb = load_codebook(paths.codebook());
  const std::string hash = config_hash(cfg);
  const long samples = opts.samples.value_or(cfg.eval.samples);
  if (samples < 1) throw Error(ErrorKind::invalid_argument, "--samples must be >= 1");
  const std::vector<int> ks = opts.k_sweep.value_or(cfg.eval.k_sweep);

  const Distribution target = teacher.enumerate_distribution();
  const std::uint64_t eval_seed = stream_seed(cfg, Stream::eval);
  const auto rng_for = [&](std::uint64_t k) { return Rng(Rng::derive(eval_seed, k)); };

  Report r;
  r.config_hash = hash;
  r.samples = samples;
  {
    std::vector<std::string> order;
    std::vector<double> last;
    for (const MetricsRow& m : read_metrics(paths.metrics())) {
      const auto it = std::find(order.begin(), order.end(), m.phase);
      if (it == order.end()) {
        order.push_back(m.phase);
        last.push_back(m.loss);
      } else {
        last[it - order.begin()] = m.loss;
      }
    }
    for (std::size_t k = 0; k < order.size(); ++k) r.final_losses.emplace_back(order[k], last[k]);
  }

  const InitCheckpoint init = load_init_checkpoint(paths.init_checkpoint(), cfg.net);
  check_hash(init.config_hash, hash, paths.init_checkpoint());
  {
    Rng rng = rng_for(1);
    r.ar_diffusion_tv = tv_distance(
        empirical_distribution(sample_ar_diffusion(init.state.model, cb, samples, cfg.eval.euler_steps, cfg.schedule, rng)),
        target);
  }
  r.set_prediction_tv = tv_distance(product_distribution(set_prediction_baseline(teacher)), target);

  if (fs::exists(paths.main_checkpoint())) {
    const MainCheckpoint main = load_main_checkpoint(paths.main_checkpoint(), cfg.net);
    check_hash(main.config_hash, hash, paths.main_checkpoint());
    Rng rng = rng_for(2);
    const auto one_step = one_step_generate(main.state.ema.shadow, cb, samples, rng);
    r.one_step_tv = tv_distance(empirical_distribution(one_step), target);
    r.per_position = per_position_conditional_tv(teacher, one_step);
    Rng raw_rng = rng_for(3);
    r.one_step_tv_raw = tv_distance(empirical_distribution(one_step_generate(main.state.theta, cb, samples, raw_rng)),
                                    target);
    for (int k : ks) {
      Rng krng = rng_for(100 + static_cast<std::uint64_t>(k));
      const auto refined = refine_with_teacher(main.state.ema.shadow, teacher, cb, k, samples, krng);
      r.k_sweep.push_back({k, tv_distance(empirical_distribution(refined), target)});
    }
  }
  if (fs::exists(paths.dd1_params())) {
    const NetParams dd1 = params_from_json(read_text(paths.dd1_params()), cfg.net);
    Rng rng = rng_for(4);
    r.dd1_tv = tv_distance(empirical_distribution(one_step_generate(dd1, cb, samples, rng)), target);
  }

  write_text(paths.report(), report_to_json(r) + "\n");
  if (opts.svg) {
    Series s{"one-step + teacher refinement", {}, {}};
    for (const KSweepEntry& e : r.k_sweep) {
      s.x.push_back(e.k);
      s.y.push_back(e.tv);
    }
    std::vector<Series> series{s};
    if (r.set_prediction_tv && !s.x.empty()) {
      series.push_back({"set prediction", {s.x.front(), s.x.back()}, {*r.set_prediction_tv, *r.set_prediction_tv}});
    }
    write_text(*opts.svg, svg_line_chart(series, "TV distance vs. refinement steps", "k (total steps)", "TV"));
  }
  return r;
}

}  // namespace csdlab
