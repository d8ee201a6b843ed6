// SPDX-License-Identifier: Apache-2.0
//
// Serialization: codebook/teacher/config JSON, versioned checkpoints,
// metrics CSV, the run report and a minimal SVG line chart.
#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "csdlab/core.hpp"
#include "csdlab/eval.hpp"
#include "csdlab/nets.hpp"
#include "csdlab/teacher.hpp"
#include "csdlab/training.hpp"

namespace csdlab {

namespace fs = std::filesystem;

inline constexpr int kCheckpointVersion = 1;
inline constexpr int kReportSchemaVersion = 1;

std::string read_text(const fs::path& path);
/// Writes through a temporary file and renames it into place.
void write_text(const fs::path& path, const std::string& text);

// {"V": int, "C": int, "entries": [[...], ...]}
std::string codebook_to_json(const Codebook& cb);
Codebook codebook_from_json(const std::string& text);
void save_codebook(const fs::path& path, const Codebook& cb);
Codebook load_codebook(const fs::path& path);

// {"n": int, "V": int, "tables": [[row-major V^i x V], ...]}
std::string teacher_to_json(const TabularTeacher& teacher);
TabularTeacher teacher_from_json(const std::string& text);
void save_teacher(const fs::path& path, const TabularTeacher& teacher);
TabularTeacher load_teacher(const fs::path& path);

/// Unknown keys and ill-typed values raise config errors; absent keys keep
/// their defaults. net.length and net.dim are not part of the file: they
/// follow the teacher.
std::string config_to_json(const RunConfig& cfg);
RunConfig config_from_json(const std::string& text);
RunConfig load_config(const fs::path& path);
/// 16 hex digits of FNV-1a over the canonical config JSON.
std::string config_hash(const RunConfig& cfg);

std::string params_to_json(const NetParams& params);
/// Throws a shape_mismatch error when the stored shape differs from `shape`.
NetParams params_from_json(const std::string& text, const NetShape& shape);

struct InitCheckpoint {
  InitState state;
  bool complete = false;
  std::string config_hash;
};
struct MainCheckpoint {
  MainState state;
  bool complete = false;
  std::string config_hash;
};

void save_checkpoint(const fs::path& path, const InitState& state, bool complete, const std::string& hash);
void save_checkpoint(const fs::path& path, const MainState& state, bool complete, const std::string& hash);
InitCheckpoint load_init_checkpoint(const fs::path& path, const NetShape& shape);
MainCheckpoint load_main_checkpoint(const fs::path& path, const NetShape& shape);

// metrics.csv
inline constexpr const char* kMetricsHeader =
    "phase,iteration,loss,guidance_loss,lr_generator,lr_guidance,ema_rate,eval_tv";
std::string metrics_row_to_csv(const MetricsRow& row);
std::vector<MetricsRow> read_metrics(const fs::path& path);
void write_metrics(const fs::path& path, const std::vector<MetricsRow>& rows);
void append_metrics(const fs::path& path, const MetricsRow& row);

struct KSweepEntry {
  int k = 1;
  double tv = 0.0;
};

struct Report {
  std::string config_hash;
  long samples = 0;
  std::vector<std::pair<std::string, double>> final_losses;  ///< phase -> last logged loss
  std::optional<double> one_step_tv;                         ///< EMA generator
  std::optional<double> one_step_tv_raw;                     ///< non-averaged generator
  std::optional<double> ar_diffusion_tv;
  std::vector<PositionTv> per_position;
  std::optional<double> set_prediction_tv;
  std::optional<double> dd1_tv;
  std::vector<KSweepEntry> k_sweep;
};

std::string report_to_json(const Report& report);
Report report_from_json(const std::string& text);

struct Series {
  std::string label;
  std::vector<double> x;
  std::vector<double> y;
};
std::string svg_line_chart(const std::vector<Series>& series, const std::string& title, const std::string& x_label,
                           const std::string& y_label);

}  // namespace csdlab
