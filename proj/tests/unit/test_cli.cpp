// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <filesystem>
#include <sstream>
#include <string>
#include <vector>

#include "csdlab/io.hpp"
#include "csdlab/run.hpp"
#include "csdlab_cli/cli.hpp"
#include "test_util.hpp"

using namespace csdlab;
namespace cli = csdlab::cli;

namespace {

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    dir_ = fs::temp_directory_path() / (std::string("csdlab_cli_") + info->name());
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  int run(std::vector<std::string> args) {
    args.insert(args.begin(), "csdlab");
    std::vector<const char*> argv;
    for (const std::string& a : args) argv.push_back(a.c_str());
    out_.str("");
    err_.str("");
    return cli::run_cli(static_cast<int>(argv.size()), argv.data(), out_, err_);
  }

  static RunConfig tiny_config() {
    RunConfig cfg;
    cfg.teacher.family = "pair";
    cfg.teacher.length = 2;
    cfg.teacher.vocab = 2;
    cfg.teacher.dim = 2;
    cfg.net.width = 8;
    cfg.net.head_hidden = 16;
    cfg.batch_size = 32;
    cfg.regression_space = RegressionSpace::velocity;
    cfg.init.iterations = 20;
    cfg.main.iterations = 12;
    cfg.main.guidance_updates = 2;
    cfg.main.multi_sample = 2;
    cfg.main.ema_switch_iteration = 3;
    cfg.main.lr_generator = {1e-4, 1e-3, 4};
    cfg.main.lr_guidance = {1e-4, 1e-3, 4};
    cfg.eval.samples = 2000;
    cfg.eval.k_sweep = {1, 2};
    cfg.checkpoint_every = 4;
    cfg.metrics_every = 2;
    cfg.seed = 5;
    return cfg;
  }

  fs::path write_config(const RunConfig& cfg, const std::string& name = "tiny.json") {
    const fs::path p = dir_ / name;
    write_text(p, config_to_json(cfg));
    return p;
  }

  fs::path dir_;
  std::ostringstream out_, err_;
};

}  // namespace

TEST_F(CliTest, UsageErrors) {
  EXPECT_EQ(run({}), cli::kUsage);
  EXPECT_EQ(run({"frobnicate"}), cli::kUsage);
  EXPECT_EQ(run({"teacher", "--V", "0"}), cli::kUsage);
  EXPECT_NE(err_.str().find("--V"), std::string::npos);
  EXPECT_EQ(run({"train", (dir_ / "x.json").string(), "--phase", "warmup"}), cli::kUsage);
  EXPECT_EQ(run({"--help"}), cli::kOk);
}

TEST_F(CliTest, MissingArtifacts) {
  EXPECT_EQ(run({"eval", (dir_ / "nothing").string()}), cli::kMissingArtifact);
  EXPECT_EQ(run({"train", (dir_ / "absent.json").string()}), cli::kMissingArtifact);
  const fs::path cfg = write_config(tiny_config());
  EXPECT_EQ(run({"train", cfg.string(), "--phase", "main", "--run-dir", (dir_ / "run").string()}),
            cli::kMissingArtifact);
}

TEST_F(CliTest, ConfigErrors) {
  write_text(dir_ / "bad.json", R"({"batch_size": 0})");
  EXPECT_EQ(run({"train", (dir_ / "bad.json").string(), "--run-dir", (dir_ / "run").string()}), cli::kConfig);
  write_text(dir_ / "typo.json", R"({"bach_size": 8})");
  EXPECT_EQ(run({"train", (dir_ / "typo.json").string(), "--run-dir", (dir_ / "run").string()}), cli::kConfig);
}

TEST_F(CliTest, DivergenceExitCode) {
  RunConfig cfg = tiny_config();
  cfg.init.lr = {1e300, 1e300, 0};
  const fs::path p = write_config(cfg);
  EXPECT_EQ(run({"train", p.string(), "--phase", "init", "--run-dir", (dir_ / "run").string()}), cli::kDivergence);
}

TEST_F(CliTest, TeacherCommandWritesLoadableFiles) {
  ASSERT_EQ(run({"teacher", "--n", "3", "--V", "3", "--C", "2", "--seed", "4", "--out", dir_.string()}), cli::kOk)
      << err_.str();
  EXPECT_EQ(load_teacher(dir_ / "teacher.json"), build_dirichlet(3, 3, 1.0, 4));
  EXPECT_EQ(load_codebook(dir_ / "codebook.json"), Codebook::circle(3, 2));
  EXPECT_NE(out_.str().find("entropy"), std::string::npos);

  const fs::path sub = dir_ / "pair";
  fs::create_directories(sub);
  ASSERT_EQ(run({"teacher", "--family", "pair", "--out", sub.string()}), cli::kOk);
  EXPECT_EQ(load_teacher(sub / "teacher.json"), build_pair_teacher());
  EXPECT_EQ(run({"teacher", "--family", "custom", "--out", sub.string()}), cli::kUsage);
}

TEST_F(CliTest, TrainThenEvaluate) {
  const fs::path cfg = write_config(tiny_config());
  const fs::path run_dir = dir_ / "run";
  ASSERT_EQ(run({"train", cfg.string(), "--run-dir", run_dir.string()}), cli::kOk) << err_.str();
  for (const fs::path& p : {RunPaths{run_dir}.config(), RunPaths{run_dir}.teacher(), RunPaths{run_dir}.codebook(),
                            RunPaths{run_dir}.metrics(), RunPaths{run_dir}.init_checkpoint(),
                            RunPaths{run_dir}.main_checkpoint()})
    EXPECT_TRUE(fs::exists(p)) << p;
  const fs::path svg = dir_ / "k.svg";
  ASSERT_EQ(run({"eval", run_dir.string(), "--samples", "1500", "--k-sweep", "1,3", "--svg", svg.string()}), cli::kOk)
      << err_.str();
  EXPECT_NE(out_.str().find("one-step TV (EMA)"), std::string::npos);
  const Report r = report_from_json(read_text(RunPaths{run_dir}.report()));
  EXPECT_EQ(r.samples, 1500);
  EXPECT_EQ(r.config_hash, config_hash(tiny_config()));
  ASSERT_TRUE(r.one_step_tv.has_value());
  EXPECT_GE(*r.one_step_tv, 0.0);
  EXPECT_LE(*r.one_step_tv, 1.0);
  ASSERT_EQ(r.k_sweep.size(), 2u);
  EXPECT_EQ(r.k_sweep[1].k, 3);
  EXPECT_LT(r.k_sweep[1].tv, 0.1);  // k = n + 1 resamples every position from the teacher
  EXPECT_EQ(r.per_position.size(), 2u);
  EXPECT_TRUE(r.set_prediction_tv.has_value());
  EXPECT_TRUE(fs::exists(svg));

  // a second train call finds finished checkpoints and leaves metrics alone
  const std::string metrics = read_text(RunPaths{run_dir}.metrics());
  ASSERT_EQ(run({"train", cfg.string(), "--run-dir", run_dir.string()}), cli::kOk);
  EXPECT_EQ(read_text(RunPaths{run_dir}.metrics()), metrics);

  RunConfig changed = tiny_config();
  changed.seed = 6;
  write_config(changed);
  EXPECT_EQ(run({"train", cfg.string(), "--run-dir", run_dir.string()}), cli::kConfig);
}

TEST_F(CliTest, DefaultRunDirectoryUsesOutputRoot) {
  RunConfig c = tiny_config();
  c.main.iterations = 2;
  const fs::path cfg = write_config(c, "named.json");
  ::setenv("CSDLAB_OUTPUT_ROOT", (dir_ / "root").c_str(), 1);
  const int code = run({"train", cfg.string(), "--phase", "init"});
  ::unsetenv("CSDLAB_OUTPUT_ROOT");
  ASSERT_EQ(code, cli::kOk) << err_.str();
  EXPECT_TRUE(fs::exists(dir_ / "root" / "named" / "checkpoints" / "init.json"));
}

TEST_F(CliTest, InterruptedRunResumesToIdenticalResults) {
  const RunConfig cfg = tiny_config();
  const fs::path straight = dir_ / "straight", resumed = dir_ / "resumed";
  train_run(cfg, straight);
  TrainOptions stop;
  stop.interrupt_after = 6;
  train_run(cfg, resumed, stop);
  EXPECT_FALSE(load_main_checkpoint(RunPaths{resumed}.main_checkpoint(), [&] {
                 NetShape s = cfg.net;
                 s.length = 2;
                 s.dim = 2;
                 return s;
               }()).complete);
  train_run(cfg, resumed);
  EXPECT_EQ(read_text(RunPaths{resumed}.metrics()), read_text(RunPaths{straight}.metrics()));
  EXPECT_EQ(read_text(RunPaths{resumed}.main_checkpoint()), read_text(RunPaths{straight}.main_checkpoint()));
  evaluate_run(straight);
  evaluate_run(resumed);
  EXPECT_EQ(read_text(RunPaths{resumed}.report()), read_text(RunPaths{straight}.report()));
}
