// SPDX-License-Identifier: Apache-2.0
#include "csdlab/io.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

#include <json.hpp>

#include "csdlab/error.hpp"

namespace csdlab {

using json = nlohmann::json;
using ad::Mat;

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::missing_artifact, "cannot open " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorKind::io, "cannot write " + tmp.string());
    out << text;
    if (!out.flush()) throw Error(ErrorKind::io, "write failed: " + tmp.string());
  }
  fs::rename(tmp, path);
}

namespace {

json parse(const std::string& text, ErrorKind kind, const char* what) {
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    throw Error(kind, std::string(what) + ": " + e.what());
  }
}

template <class F>
auto guarded(ErrorKind kind, const char* what, F&& f) {
  try {
    return f();
  } catch (const json::exception& e) {
    throw Error(kind, std::string(what) + ": " + e.what());
  }
}

// ---- config helpers -----------------------------------------------------

void reject_unknown(const json& obj, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!obj.is_object()) throw Error(ErrorKind::config, where + " must be an object");
  std::set<std::string> ok(allowed.begin(), allowed.end());
  for (const auto& [k, v] : obj.items())
    if (!ok.contains(k)) throw Error(ErrorKind::config, "unknown config key '" + where + k + "'");
}

template <class T>
void get_to(const json& obj, const char* key, T& out) {
  if (obj.contains(key)) out = obj.at(key).get<T>();
}

json lr_json(const LrSchedule& lr) { return {{"start", lr.start}, {"end", lr.end}, {"warmup", lr.warmup}}; }

void lr_from(const json& obj, const char* key, LrSchedule& lr, const std::string& where) {
  if (!obj.contains(key)) return;
  const json& j = obj.at(key);
  reject_unknown(j, {"start", "end", "warmup"}, where + key + ".");
  get_to(j, "start", lr.start);
  get_to(j, "end", lr.end);
  get_to(j, "warmup", lr.warmup);
}

// ---- params ---------------------------------------------------------------

json shape_json(const NetShape& s) {
  return {{"length", s.length}, {"dim", s.dim},         {"depth", s.depth},          {"width", s.width},
          {"head_hidden", s.head_hidden}, {"head_layers", s.head_layers}, {"flavor", to_string(s.flavor)}};
}

NetShape shape_from(const json& j) {
  NetShape s;
  s.length = j.at("length").get<int>();
  s.dim = j.at("dim").get<int>();
  s.depth = j.at("depth").get<int>();
  s.width = j.at("width").get<int>();
  s.head_hidden = j.at("head_hidden").get<int>();
  s.head_layers = j.at("head_layers").get<int>();
  s.flavor = backbone_flavor_from_string(j.at("flavor").get<std::string>());
  return s;
}

json tensors_json(const NetParams& p) {
  json t = json::object();
  for (std::size_t k = 0; k < p.tensor_count(); ++k) {
    const Mat& m = p.tensor(k);
    t[p.name(k)] = std::vector<double>(m.data(), m.data() + m.size());
  }
  return t;
}

NetParams tensors_from(const json& t, const NetShape& shape) {
  NetParams p(shape);
  if (t.size() != p.tensor_count()) throw Error(ErrorKind::shape_mismatch, "checkpoint tensor count differs");
  for (std::size_t k = 0; k < p.tensor_count(); ++k) {
    const auto it = t.find(p.name(k));
    if (it == t.end()) throw Error(ErrorKind::shape_mismatch, "checkpoint lacks tensor " + p.name(k));
    const auto values = it->get<std::vector<double>>();
    Mat& m = p.tensor(k);
    if (values.size() != static_cast<std::size_t>(m.size()))
      throw Error(ErrorKind::shape_mismatch, "checkpoint tensor " + p.name(k) + " has the wrong size");
    std::copy(values.begin(), values.end(), m.data());
  }
  return p;
}

json adam_json(const AdamState& s) { return {{"step", s.step}, {"m", tensors_json(s.m)}, {"v", tensors_json(s.v)}}; }

AdamState adam_from(const json& j, const NetShape& shape) {
  return {tensors_from(j.at("m"), shape), tensors_from(j.at("v"), shape), j.at("step").get<long>()};
}

json checkpoint_head(const char* phase, const NetShape& shape, bool complete, const std::string& hash, long it) {
  return {{"format", "csdlab-checkpoint"}, {"version", kCheckpointVersion}, {"phase", phase}, {"complete", complete},
          {"config_hash", hash}, {"shape", shape_json(shape)}, {"iteration", it}};
}

json checkpoint_body(const fs::path& path, const char* phase, const NetShape& shape) {
  json j = parse(read_text(path), ErrorKind::io, "checkpoint");
  return guarded(ErrorKind::io, "checkpoint", [&] {
    if (j.at("format").get<std::string>() != "csdlab-checkpoint" || j.at("version").get<int>() != kCheckpointVersion)
      throw Error(ErrorKind::io, "unsupported checkpoint format in " + path.string());
    if (j.at("phase").get<std::string>() != phase)
      throw Error(ErrorKind::io, path.string() + " is not a " + phase + " checkpoint");
    if (!(shape_from(j.at("shape")) == shape))
      throw Error(ErrorKind::shape_mismatch, "checkpoint network shape differs from the configured one");
    return j;
  });
}

std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

std::string opt_fmt(const std::optional<double>& v) { return v ? fmt(*v) : std::string(); }

std::optional<double> opt_parse(const std::string& s) {
  if (s.empty()) return std::nullopt;
  return std::stod(s);
}

json opt_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

std::optional<double> opt_from(const json& j, const char* key) {
  if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
  return j.at(key).get<double>();
}

std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

}  // namespace

// ---- codebook / teacher ------------------------------------------------------

std::string codebook_to_json(const Codebook& cb) {
  json entries = json::array();
  for (int j = 0; j < cb.vocab_size(); ++j) {
    const auto e = cb.entry(j);
    entries.push_back(std::vector<double>(e.begin(), e.end()));
  }
  return json{{"V", cb.vocab_size()}, {"C", cb.dim()}, {"entries", entries}}.dump(2);
}

Codebook codebook_from_json(const std::string& text) {
  const json j = parse(text, ErrorKind::config, "codebook");
  return guarded(ErrorKind::config, "codebook", [&] {
    const int V = j.at("V").get<int>();
    const int C = j.at("C").get<int>();
    const auto rows = j.at("entries").get<std::vector<std::vector<double>>>();
    if (rows.size() != static_cast<std::size_t>(std::max(V, 0)))
      throw Error(ErrorKind::config, "codebook: entries count differs from V");
    std::vector<double> flat;
    for (const auto& r : rows) {
      if (r.size() != static_cast<std::size_t>(std::max(C, 0)))
        throw Error(ErrorKind::config, "codebook: entry length differs from C");
      flat.insert(flat.end(), r.begin(), r.end());
    }
    return Codebook(V, C, std::move(flat));
  });
}

void save_codebook(const fs::path& path, const Codebook& cb) { write_text(path, codebook_to_json(cb) + "\n"); }
Codebook load_codebook(const fs::path& path) { return codebook_from_json(read_text(path)); }

std::string teacher_to_json(const TabularTeacher& teacher) {
  json tables = json::array();
  for (const auto& t : teacher.tables()) tables.push_back(t);
  return json{{"n", teacher.length()}, {"V", teacher.vocab_size()}, {"tables", tables}}.dump(2);
}

TabularTeacher teacher_from_json(const std::string& text) {
  const json j = parse(text, ErrorKind::config, "teacher");
  return guarded(ErrorKind::config, "teacher", [&] {
    return TabularTeacher(j.at("n").get<int>(), j.at("V").get<int>(),
                          j.at("tables").get<std::vector<std::vector<double>>>());
  });
}

void save_teacher(const fs::path& path, const TabularTeacher& teacher) {
  write_text(path, teacher_to_json(teacher) + "\n");
}
TabularTeacher load_teacher(const fs::path& path) { return teacher_from_json(read_text(path)); }

// ---- config ------------------------------------------------------------------

std::string config_to_json(const RunConfig& c) {
  json j;
  j["schema_version"] = c.schema_version;
  j["seed"] = c.seed;
  const TeacherSpec& t = c.teacher;
  j["teacher"] = {{"family", t.family},
                  {"n", t.length},
                  {"V", t.vocab},
                  {"C", t.dim},
                  {"seed", t.seed},
                  {"concentration", t.concentration},
                  {"codebook", t.codebook},
                  {"codebook_seed", t.codebook_seed},
                  {"codebook_scale", t.codebook_scale},
                  {"teacher_path", t.teacher_path},
                  {"codebook_path", t.codebook_path}};
  j["net"] = {{"depth", c.net.depth},
              {"width", c.net.width},
              {"head_hidden", c.net.head_hidden},
              {"head_layers", c.net.head_layers},
              {"flavor", to_string(c.net.flavor)}};
  j["batch_size"] = c.batch_size;
  j["t_min"] = c.schedule.t_min;
  j["t_guard"] = c.t_guard;
  j["regression_space"] = to_string(c.regression_space);
  j["sid"] = {{"alpha", c.sid_alpha}, {"omega", c.sid_omega}, {"stop_grad_first_factor", c.sid_stop_grad_first_factor}};
  j["adam"] = {{"beta1", c.adam.beta1}, {"beta2", c.adam.beta2}, {"eps", c.adam.eps}, {"clip_norm", c.adam.clip_norm}};
  j["init"] = {{"iterations", c.init.iterations}, {"lr", lr_json(c.init.lr)}};
  j["main"] = {{"iterations", c.main.iterations},
               {"lr_generator", lr_json(c.main.lr_generator)},
               {"lr_guidance", lr_json(c.main.lr_guidance)},
               {"guidance_updates", c.main.guidance_updates},
               {"multi_sample", c.main.multi_sample},
               {"ema_early_rate", c.main.ema_early_rate},
               {"ema_switch_iteration", c.main.ema_switch_iteration}};
  j["align"] = {{"enabled", c.align.enabled},
                {"at_iteration", c.align.at_iteration},
                {"iterations", c.align.iterations},
                {"guidance_updates_after", c.align.guidance_updates_after}};
  j["dd1"] = {{"enabled", c.dd1.enabled},
              {"dataset_size", c.dd1.dataset_size},
              {"iterations", c.dd1.iterations},
              {"euler_steps", c.dd1.euler_steps},
              {"lr", lr_json(c.dd1.lr)}};
  j["ablation"] = {{"random_generator_init", c.ablation.random_generator_init},
                   {"random_guidance_init", c.ablation.random_guidance_init}};
  j["eval"] = {{"samples", c.eval.samples},
               {"euler_steps", c.eval.euler_steps},
               {"k_sweep", c.eval.k_sweep},
               {"every", c.eval.every},
               {"periodic_samples", c.eval.periodic_samples}};
  j["checkpoint_every"] = c.checkpoint_every;
  j["metrics_every"] = c.metrics_every;
  return j.dump(2);
}

RunConfig config_from_json(const std::string& text) {
  const json j = parse(text, ErrorKind::config, "config");
  RunConfig c;
  guarded(ErrorKind::config, "config", [&] {
    reject_unknown(j,
                   {"schema_version", "seed", "teacher", "net", "batch_size", "t_min", "t_guard", "regression_space",
                    "sid", "adam", "init", "main", "align", "dd1", "ablation", "eval", "checkpoint_every",
                    "metrics_every"},
                   "");
    get_to(j, "schema_version", c.schema_version);
    if (c.schema_version != 1)
      throw Error(ErrorKind::config, "unsupported config schema_version " + std::to_string(c.schema_version));
    get_to(j, "seed", c.seed);
    if (j.contains("teacher")) {
      const json& t = j.at("teacher");
      reject_unknown(t,
                     {"family", "n", "V", "C", "seed", "concentration", "codebook", "codebook_seed", "codebook_scale",
                      "teacher_path", "codebook_path"},
                     "teacher.");
      get_to(t, "family", c.teacher.family);
      get_to(t, "n", c.teacher.length);
      get_to(t, "V", c.teacher.vocab);
      get_to(t, "C", c.teacher.dim);
      get_to(t, "seed", c.teacher.seed);
      get_to(t, "concentration", c.teacher.concentration);
      get_to(t, "codebook", c.teacher.codebook);
      get_to(t, "codebook_seed", c.teacher.codebook_seed);
      get_to(t, "codebook_scale", c.teacher.codebook_scale);
      get_to(t, "teacher_path", c.teacher.teacher_path);
      get_to(t, "codebook_path", c.teacher.codebook_path);
    }
    if (j.contains("net")) {
      const json& n = j.at("net");
      reject_unknown(n, {"depth", "width", "head_hidden", "head_layers", "flavor"}, "net.");
      get_to(n, "depth", c.net.depth);
      get_to(n, "width", c.net.width);
      get_to(n, "head_hidden", c.net.head_hidden);
      get_to(n, "head_layers", c.net.head_layers);
      if (n.contains("flavor")) c.net.flavor = backbone_flavor_from_string(n.at("flavor").get<std::string>());
    }
    get_to(j, "batch_size", c.batch_size);
    get_to(j, "t_min", c.schedule.t_min);
    get_to(j, "t_guard", c.t_guard);
    if (j.contains("regression_space"))
      c.regression_space = regression_space_from_string(j.at("regression_space").get<std::string>());
    if (j.contains("sid")) {
      const json& s = j.at("sid");
      reject_unknown(s, {"alpha", "omega", "stop_grad_first_factor"}, "sid.");
      get_to(s, "alpha", c.sid_alpha);
      get_to(s, "omega", c.sid_omega);
      get_to(s, "stop_grad_first_factor", c.sid_stop_grad_first_factor);
    }
    if (j.contains("adam")) {
      const json& a = j.at("adam");
      reject_unknown(a, {"beta1", "beta2", "eps", "clip_norm"}, "adam.");
      get_to(a, "beta1", c.adam.beta1);
      get_to(a, "beta2", c.adam.beta2);
      get_to(a, "eps", c.adam.eps);
      get_to(a, "clip_norm", c.adam.clip_norm);
    }
    if (j.contains("init")) {
      const json& i = j.at("init");
      reject_unknown(i, {"iterations", "lr"}, "init.");
      get_to(i, "iterations", c.init.iterations);
      lr_from(i, "lr", c.init.lr, "init.");
    }
    if (j.contains("main")) {
      const json& m = j.at("main");
      reject_unknown(m,
                     {"iterations", "lr_generator", "lr_guidance", "guidance_updates", "multi_sample",
                      "ema_early_rate", "ema_switch_iteration"},
                     "main.");
      get_to(m, "iterations", c.main.iterations);
      lr_from(m, "lr_generator", c.main.lr_generator, "main.");
      lr_from(m, "lr_guidance", c.main.lr_guidance, "main.");
      get_to(m, "guidance_updates", c.main.guidance_updates);
      get_to(m, "multi_sample", c.main.multi_sample);
      get_to(m, "ema_early_rate", c.main.ema_early_rate);
      get_to(m, "ema_switch_iteration", c.main.ema_switch_iteration);
    }
    if (j.contains("align")) {
      const json& a = j.at("align");
      reject_unknown(a, {"enabled", "at_iteration", "iterations", "guidance_updates_after"}, "align.");
      get_to(a, "enabled", c.align.enabled);
      get_to(a, "at_iteration", c.align.at_iteration);
      get_to(a, "iterations", c.align.iterations);
      get_to(a, "guidance_updates_after", c.align.guidance_updates_after);
    }
    if (j.contains("dd1")) {
      const json& d = j.at("dd1");
      reject_unknown(d, {"enabled", "dataset_size", "iterations", "euler_steps", "lr"}, "dd1.");
      get_to(d, "enabled", c.dd1.enabled);
      get_to(d, "dataset_size", c.dd1.dataset_size);
      get_to(d, "iterations", c.dd1.iterations);
      get_to(d, "euler_steps", c.dd1.euler_steps);
      lr_from(d, "lr", c.dd1.lr, "dd1.");
    }
    if (j.contains("ablation")) {
      const json& a = j.at("ablation");
      reject_unknown(a, {"random_generator_init", "random_guidance_init"}, "ablation.");
      get_to(a, "random_generator_init", c.ablation.random_generator_init);
      get_to(a, "random_guidance_init", c.ablation.random_guidance_init);
    }
    if (j.contains("eval")) {
      const json& e = j.at("eval");
      reject_unknown(e, {"samples", "euler_steps", "k_sweep", "every", "periodic_samples"}, "eval.");
      get_to(e, "samples", c.eval.samples);
      get_to(e, "euler_steps", c.eval.euler_steps);
      get_to(e, "k_sweep", c.eval.k_sweep);
      get_to(e, "every", c.eval.every);
      get_to(e, "periodic_samples", c.eval.periodic_samples);
    }
    get_to(j, "checkpoint_every", c.checkpoint_every);
    get_to(j, "metrics_every", c.metrics_every);
    return 0;
  });
  c.net.length = c.teacher.length;
  c.net.dim = c.teacher.dim;
  return c;
}

RunConfig load_config(const fs::path& path) {
  if (!fs::exists(path)) throw Error(ErrorKind::missing_artifact, "config not found: " + path.string());
  return config_from_json(read_text(path));
}

std::string config_hash(const RunConfig& cfg) {
  const std::string canon = json::parse(config_to_json(cfg)).dump();
  std::uint64_t h = 14695981039346656037ULL;
  for (unsigned char ch : canon) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

// ---- params and checkpoints ------------------------------------------------

std::string params_to_json(const NetParams& params) {
  return json{{"format", "csdlab-params"},
              {"version", kCheckpointVersion},
              {"shape", shape_json(params.shape())},
              {"params", tensors_json(params)}}
      .dump();
}

NetParams params_from_json(const std::string& text, const NetShape& shape) {
  const json j = parse(text, ErrorKind::io, "params");
  return guarded(ErrorKind::io, "params", [&] {
    if (j.at("version").get<int>() != kCheckpointVersion) throw Error(ErrorKind::io, "unsupported params version");
    if (!(shape_from(j.at("shape")) == shape))
      throw Error(ErrorKind::shape_mismatch, "stored network shape differs from the configured one");
    return tensors_from(j.at("params"), shape);
  });
}

void save_checkpoint(const fs::path& path, const InitState& s, bool complete, const std::string& hash) {
  json j = checkpoint_head("init", s.model.shape(), complete, hash, s.iteration);
  j["rng"] = s.rng.state();
  j["model"] = tensors_json(s.model);
  j["adam"] = adam_json(s.opt);
  write_text(path, j.dump());
}

void save_checkpoint(const fs::path& path, const MainState& s, bool complete, const std::string& hash) {
  json j = checkpoint_head("main", s.theta.shape(), complete, hash, s.iteration);
  j["rng"] = s.rng.state();
  j["aligned"] = s.aligned;
  j["theta"] = tensors_json(s.theta);
  j["psi"] = tensors_json(s.psi);
  j["ema"] = {{"counter", s.ema.counter}, {"shadow", tensors_json(s.ema.shadow)}};
  j["adam_theta"] = adam_json(s.opt_theta);
  j["adam_psi"] = adam_json(s.opt_psi);
  write_text(path, j.dump());
}

InitCheckpoint load_init_checkpoint(const fs::path& path, const NetShape& shape) {
  const json j = checkpoint_body(path, "init", shape);
  return guarded(ErrorKind::io, "checkpoint", [&] {
    InitCheckpoint c;
    c.complete = j.at("complete").get<bool>();
    c.config_hash = j.at("config_hash").get<std::string>();
    c.state.model = tensors_from(j.at("model"), shape);
    c.state.opt = adam_from(j.at("adam"), shape);
    c.state.rng.restore(j.at("rng").get<std::string>());
    c.state.iteration = j.at("iteration").get<long>();
    return c;
  });
}

MainCheckpoint load_main_checkpoint(const fs::path& path, const NetShape& shape) {
  const json j = checkpoint_body(path, "main", shape);
  return guarded(ErrorKind::io, "checkpoint", [&] {
    MainCheckpoint c;
    c.complete = j.at("complete").get<bool>();
    c.config_hash = j.at("config_hash").get<std::string>();
    MainState& s = c.state;
    s.theta = tensors_from(j.at("theta"), shape);
    s.psi = tensors_from(j.at("psi"), shape);
    s.ema.counter = j.at("ema").at("counter").get<long>();
    s.ema.shadow = tensors_from(j.at("ema").at("shadow"), shape);
    s.opt_theta = adam_from(j.at("adam_theta"), shape);
    s.opt_psi = adam_from(j.at("adam_psi"), shape);
    s.rng.restore(j.at("rng").get<std::string>());
    s.iteration = j.at("iteration").get<long>();
    s.aligned = j.at("aligned").get<bool>();
    return c;
  });
}

// ---- metrics -----------------------------------------------------------------

std::string metrics_row_to_csv(const MetricsRow& r) {
  return r.phase + "," + std::to_string(r.iteration) + "," + fmt(r.loss) + "," + opt_fmt(r.guidance_loss) + "," +
         fmt(r.lr_generator) + "," + opt_fmt(r.lr_guidance) + "," + opt_fmt(r.ema_rate) + "," + opt_fmt(r.eval_tv);
}

std::vector<MetricsRow> read_metrics(const fs::path& path) {
  std::vector<MetricsRow> rows;
  if (!fs::exists(path)) return rows;
  std::istringstream in(read_text(path));
  std::string line;
  if (!std::getline(in, line)) return rows;
  if (line != kMetricsHeader) throw Error(ErrorKind::io, path.string() + ": unexpected metrics header");
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) f.push_back(cell);
    while (f.size() < 8) f.emplace_back();
    try {
      rows.push_back({f[0], std::stol(f[1]), std::stod(f[2]), opt_parse(f[3]), std::stod(f[4]), opt_parse(f[5]),
                      opt_parse(f[6]), opt_parse(f[7])});
    } catch (const std::exception&) {
      throw Error(ErrorKind::io, path.string() + ": malformed metrics row '" + line + "'");
    }
  }
  return rows;
}

void write_metrics(const fs::path& path, const std::vector<MetricsRow>& rows) {
  std::string text = std::string(kMetricsHeader) + "\n";
  for (const MetricsRow& r : rows) text += metrics_row_to_csv(r) + "\n";
  write_text(path, text);
}

void append_metrics(const fs::path& path, const MetricsRow& row) {
  const bool fresh = !fs::exists(path) || fs::file_size(path) == 0;
  std::ofstream out(path, std::ios::app);
  if (!out) throw Error(ErrorKind::io, "cannot append to " + path.string());
  if (fresh) out << kMetricsHeader << "\n";
  out << metrics_row_to_csv(row) << "\n";
}

// ---- report ------------------------------------------------------------------

std::string report_to_json(const Report& r) {
  json j;
  j["schema_version"] = kReportSchemaVersion;
  j["config_hash"] = r.config_hash;
  j["samples"] = r.samples;
  json losses = json::object();
  for (const auto& [phase, loss] : r.final_losses) losses[phase] = loss;
  j["final_losses"] = losses;
  j["one_step_tv"] = opt_json(r.one_step_tv);
  j["one_step_tv_raw"] = opt_json(r.one_step_tv_raw);
  j["ar_diffusion_tv"] = opt_json(r.ar_diffusion_tv);
  json pos = json::array();
  for (const PositionTv& p : r.per_position)
    pos.push_back({{"position", p.position},
                   {"mean_tv", p.mean_tv},
                   {"prefixes_used", p.prefixes_used},
                   {"prefixes_skipped", p.prefixes_skipped},
                   {"samples_used", p.samples_used}});
  j["per_position_tv"] = pos;
  j["baselines"] = {{"set_prediction_tv", opt_json(r.set_prediction_tv)}, {"dd1_tv", opt_json(r.dd1_tv)}};
  json ks = json::array();
  for (const KSweepEntry& e : r.k_sweep) ks.push_back({{"k", e.k}, {"tv", e.tv}});
  j["k_sweep"] = ks;
  return j.dump(2);
}

Report report_from_json(const std::string& text) {
  const json j = parse(text, ErrorKind::io, "report");
  return guarded(ErrorKind::io, "report", [&] {
    if (j.at("schema_version").get<int>() != kReportSchemaVersion)
      throw Error(ErrorKind::io, "unsupported report schema_version");
    Report r;
    r.config_hash = j.at("config_hash").get<std::string>();
    r.samples = j.at("samples").get<long>();
    for (const auto& [phase, loss] : j.at("final_losses").items()) r.final_losses.emplace_back(phase, loss.get<double>());
    r.one_step_tv = opt_from(j, "one_step_tv");
    r.one_step_tv_raw = opt_from(j, "one_step_tv_raw");
    r.ar_diffusion_tv = opt_from(j, "ar_diffusion_tv");
    for (const json& p : j.at("per_position_tv"))
      r.per_position.push_back({p.at("position").get<int>(), p.at("mean_tv").get<double>(),
                                p.at("prefixes_used").get<long>(), p.at("prefixes_skipped").get<long>(),
                                p.at("samples_used").get<long>()});
    r.set_prediction_tv = opt_from(j.at("baselines"), "set_prediction_tv");
    r.dd1_tv = opt_from(j.at("baselines"), "dd1_tv");
    for (const json& e : j.at("k_sweep")) r.k_sweep.push_back({e.at("k").get<int>(), e.at("tv").get<double>()});
    return r;
  });
}

// ---- svg -----------------------------------------------------------------------

std::string svg_line_chart(const std::vector<Series>& series, const std::string& title, const std::string& x_label,
                           const std::string& y_label) {
  constexpr double W = 720, H = 420, L = 70, R = 160, T = 40, B = 50;
  double x0 = INFINITY, x1 = -INFINITY, y0 = INFINITY, y1 = -INFINITY;
  for (const Series& s : series) {
    if (s.x.size() != s.y.size()) throw Error(ErrorKind::shape_mismatch, "series x and y lengths differ");
    for (std::size_t k = 0; k < s.x.size(); ++k) {
      if (!std::isfinite(s.x[k]) || !std::isfinite(s.y[k])) continue;
      x0 = std::min(x0, s.x[k]);
      x1 = std::max(x1, s.x[k]);
      y0 = std::min(y0, s.y[k]);
      y1 = std::max(y1, s.y[k]);
    }
  }
  if (!std::isfinite(x0)) x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  if (x1 == x0) x1 = x0 + 1;
  if (y1 == y0) y1 = y0 + 1;
  const auto px = [&](double x) { return L + (x - x0) / (x1 - x0) * (W - L - R); };
  const auto py = [&](double y) { return H - B - (y - y0) / (y1 - y0) * (H - T - B); };
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"};

  std::ostringstream os;
  os << std::setprecision(6);
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << W / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" << xml_escape(title) << "</text>\n";
  os << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
  for (int k = 0; k <= 4; ++k) {
    const double xv = x0 + (x1 - x0) * k / 4.0, yv = y0 + (y1 - y0) * k / 4.0;
    os << "<text x=\"" << px(xv) << "\" y=\"" << H - B + 16 << "\" text-anchor=\"middle\">" << xv << "</text>\n";
    os << "<text x=\"" << L - 6 << "\" y=\"" << py(yv) + 4 << "\" text-anchor=\"end\">" << yv << "</text>\n";
  }
  os << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 12 << "\" text-anchor=\"middle\">" << xml_escape(x_label)
     << "</text>\n";
  os << "<text x=\"16\" y=\"" << (T + H - B) / 2 << "\" text-anchor=\"middle\" transform=\"rotate(-90 16 "
     << (T + H - B) / 2 << ")\">" << xml_escape(y_label) << "</text>\n";
  for (std::size_t s = 0; s < series.size(); ++s) {
    const char* color = colors[s % 6];
    os << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
    for (std::size_t k = 0; k < series[s].x.size(); ++k)
      if (std::isfinite(series[s].x[k]) && std::isfinite(series[s].y[k]))
        os << px(series[s].x[k]) << "," << py(series[s].y[k]) << " ";
    os << "\"/>\n";
    const double ly = T + 16 + 18.0 * static_cast<double>(s);
    os << "<line x1=\"" << W - R + 12 << "\" y1=\"" << ly << "\" x2=\"" << W - R + 32 << "\" y2=\"" << ly
       << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
    os << "<text x=\"" << W - R + 38 << "\" y=\"" << ly + 4 << "\">" << xml_escape(series[s].label) << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

}  // namespace csdlab
