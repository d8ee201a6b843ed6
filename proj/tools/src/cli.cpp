// SPDX-License-Identifier: Apache-2.0
#include "csdlab_cli/cli.hpp"

#include <cstdlib>
#include <filesystem>
#include <iomanip>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "csdlab/error.hpp"
#include "csdlab/io.hpp"
#include "csdlab/run.hpp"

namespace csdlab::cli {

namespace {

namespace fs = std::filesystem;

struct TeacherArgs {
  std::string family = "dirichlet";
  int n = 3;
  int V = 4;
  int C = 2;
  std::uint64_t seed = 7;
  double concentration = 1.0;
  std::string codebook = "circle";
  std::uint64_t codebook_seed = 0;
  std::string from;
  std::string out = ".";
};

struct TrainArgs {
  std::string config;
  std::string phase = "all";
  std::string run_dir;
};

struct EvalArgs {
  std::string run_dir;
  long samples = 0;
  std::vector<int> k_sweep;
  std::string svg;
};

int cmd_teacher(const TeacherArgs& a, std::ostream& out) {
  TeacherSpec spec;
  spec.family = a.family;
  spec.length = a.n;
  spec.vocab = a.V;
  spec.dim = a.C;
  spec.seed = a.seed;
  spec.concentration = a.concentration;
  spec.codebook = a.codebook;
  spec.codebook_seed = a.codebook_seed;
  if (a.family == "pair") {
    spec.length = 2;
    spec.vocab = 2;
  } else if (a.family == "custom") {
    if (a.from.empty()) throw Error(ErrorKind::invalid_argument, "--family custom needs --from <teacher.json>");
    const TabularTeacher t = load_teacher(a.from);
    spec.teacher_path = fs::absolute(a.from).string();
    spec.length = t.length();
    spec.vocab = t.vocab_size();
  }
  const TeacherBundle tb = build_teacher(spec);
  const fs::path dir(a.out);
  save_teacher(dir / "teacher.json", tb.teacher);
  save_codebook(dir / "codebook.json", tb.codebook);
  out << teacher_summary(tb.teacher);
  out << "wrote " << (dir / "teacher.json").string() << " and " << (dir / "codebook.json").string() << "\n";
  return kOk;
}

int cmd_train(const TrainArgs& a, std::ostream& out) {
  const fs::path config_path(a.config);
  const RunConfig cfg = load_config(config_path);
  fs::path run_dir(a.run_dir);
  if (run_dir.empty()) {
    const char* root = std::getenv("CSDLAB_OUTPUT_ROOT");
    run_dir = fs::path(root && *root ? root : "runs") / config_path.stem();
  }
  TrainOptions opts;
  opts.phase = train_phase_from_string(a.phase);
  opts.log = [&](const std::string& msg) { out << msg << "\n" << std::flush; };
  train_run(cfg, run_dir, opts, config_path.parent_path());
  out << "run directory: " << run_dir.string() << "\n";
  return kOk;
}

int cmd_eval(const EvalArgs& a, std::ostream& out) {
  EvalOptions opts;
  if (a.samples > 0) opts.samples = a.samples;
  if (!a.k_sweep.empty()) opts.k_sweep = a.k_sweep;
  if (!a.svg.empty()) opts.svg = fs::path(a.svg);
  const Report r = evaluate_run(a.run_dir, opts);
  out << std::setprecision(5);
  const auto show = [&](const char* name, const std::optional<double>& v) {
    if (v) out << name << ": " << *v << "\n";
  };
  show("one-step TV (EMA)", r.one_step_tv);
  show("one-step TV (raw)", r.one_step_tv_raw);
  show("AR-diffusion TV", r.ar_diffusion_tv);
  show("set-prediction TV", r.set_prediction_tv);
  show("DD1 TV", r.dd1_tv);
  for (const PositionTv& p : r.per_position)
    out << "position " << p.position << " conditional TV: " << p.mean_tv << " (" << p.prefixes_skipped
        << " prefixes below floor)\n";
  for (const KSweepEntry& e : r.k_sweep) out << "k=" << e.k << " TV: " << e.tv << "\n";
  out << "report: " << (fs::path(a.run_dir) / "report.json").string() << "\n";
  return kOk;
}

int exit_code_for(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::config: return kConfig;
    case ErrorKind::divergence: return kDivergence;
    case ErrorKind::missing_artifact: return kMissingArtifact;
    case ErrorKind::invalid_argument:
    case ErrorKind::invalid_token:
    case ErrorKind::too_large: return kUsage;
    default: return kFailure;
  }
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"csdlab: one-step distillation of tabular autoregressive teachers"};
  app.require_subcommand(1);

  TeacherArgs ta;
  auto* teacher = app.add_subcommand("teacher", "Build a teacher and codebook and write them as JSON");
  teacher->add_option("--family", ta.family, "dirichlet | pair | custom")
      ->check(CLI::IsMember({"dirichlet", "pair", "custom"}));
  teacher->add_option("--n", ta.n, "Sequence length")->check(CLI::Range(1, 12));
  teacher->add_option("--V", ta.V, "Vocabulary size")->check(CLI::Range(1, 64));
  teacher->add_option("--C", ta.C, "Embedding dimension")->check(CLI::Range(1, 16));
  teacher->add_option("--seed", ta.seed, "Dirichlet seed");
  teacher->add_option("--concentration", ta.concentration, "Dirichlet concentration")
      ->check(CLI::PositiveNumber);
  teacher->add_option("--codebook", ta.codebook, "circle | gaussian")->check(CLI::IsMember({"circle", "gaussian"}));
  teacher->add_option("--codebook-seed", ta.codebook_seed, "Seed for the gaussian codebook");
  teacher->add_option("--from", ta.from, "Teacher JSON for --family custom");
  teacher->add_option("--out", ta.out, "Output directory");

  TrainArgs tr;
  auto* train = app.add_subcommand("train", "Train the phases of a run configuration");
  train->add_option("config", tr.config, "Run configuration (JSON)")->required();
  train->add_option("--phase", tr.phase, "init | main | align | dd1 | all")
      ->check(CLI::IsMember({"init", "main", "align", "dd1", "all"}));
  train->add_option("--run-dir", tr.run_dir, "Run directory (default $CSDLAB_OUTPUT_ROOT/<config name>)");

  EvalArgs ev;
  auto* eval = app.add_subcommand("eval", "Evaluate a run directory and write report.json");
  eval->add_option("run-dir", ev.run_dir, "Run directory")->required();
  eval->add_option("--samples", ev.samples, "Sample budget")->check(CLI::PositiveNumber);
  eval->add_option("--k-sweep", ev.k_sweep, "Refinement steps, e.g. 1,2,3")->delimiter(',');
  eval->add_option("--svg", ev.svg, "Write a TV-vs-k line chart");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e, out, err);
    err << "error: " << e.what() << "\n";
    if (*teacher) err << teacher->help();
    else if (*train) err << train->help();
    else if (*eval) err << eval->help();
    else err << app.help();
    return kUsage;
  }

  try {
    if (*teacher) return cmd_teacher(ta, out);
    if (*train) return cmd_train(tr, out);
    return cmd_eval(ev, out);
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return exit_code_for(e.kind());
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kFailure;
  }
}

}  // namespace csdlab::cli
