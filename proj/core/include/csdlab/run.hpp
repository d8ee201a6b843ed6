// SPDX-License-Identifier: Apache-2.0
//
// Run directories: phase orchestration with checkpoint/resume and the
// evaluation report.
//
// Layout:
//   config.json  teacher.json  codebook.json  metrics.csv  report.json
//   checkpoints/{init,main}.json  checkpoints/dd1.json
#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "csdlab/io.hpp"
#include "csdlab/training.hpp"

namespace csdlab {

enum class TrainPhase { init, main, align, dd1, all };

TrainPhase train_phase_from_string(const std::string& name);

struct RunPaths {
  fs::path dir;

  fs::path config() const { return dir / "config.json"; }
  fs::path teacher() const { return dir / "teacher.json"; }
  fs::path codebook() const { return dir / "codebook.json"; }
  fs::path metrics() const { return dir / "metrics.csv"; }
  fs::path report() const { return dir / "report.json"; }
  fs::path init_checkpoint() const { return dir / "checkpoints" / "init.json"; }
  fs::path main_checkpoint() const { return dir / "checkpoints" / "main.json"; }
  fs::path dd1_params() const { return dir / "checkpoints" / "dd1.json"; }
};

struct TeacherBundle {
  TabularTeacher teacher;
  Codebook codebook;
};

/// Builds the teacher and codebook named by a spec. Relative paths resolve
/// against `base_dir`.
TeacherBundle build_teacher(const TeacherSpec& spec, const fs::path& base_dir = {});

/// Entropy, support size, most likely sequences and the product-of-marginals TV.
std::string teacher_summary(const TabularTeacher& teacher, int top = 5);

/// Exclusive advisory lock on a run directory, released on destruction.
class RunLock {
 public:
  explicit RunLock(const fs::path& dir);
  ~RunLock();
  RunLock(const RunLock&) = delete;
  RunLock& operator=(const RunLock&) = delete;

 private:
  int fd_ = -1;
};

struct TrainOptions {
  TrainPhase phase = TrainPhase::all;
  /// Abandon the main phase after this many iterations without writing a
  /// checkpoint, as an interrupted process would. -1 disables.
  long interrupt_after = -1;
  std::function<void(const std::string&)> log;
};

/// Runs the selected phases in `run_dir`, resuming from checkpoints.
/// `config_dir` anchors relative teacher/codebook paths.
void train_run(const RunConfig& cfg, const fs::path& run_dir, const TrainOptions& opts = {},
               const fs::path& config_dir = {});

struct EvalOptions {
  std::optional<long> samples;
  std::optional<std::vector<int>> k_sweep;
  std::optional<fs::path> svg;
};

/// Evaluates the run's checkpoints and writes report.json.
Report evaluate_run(const fs::path& run_dir, const EvalOptions& opts = {});

}  // namespace csdlab
