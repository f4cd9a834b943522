#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "sinkdoor/checkpoint.hpp"
#include "sinkdoor/config.hpp"

namespace sinkdoor {
namespace {

namespace fs = std::filesystem;

const char* const kTiny =
    " --set model.n_layers=2 --set model.n_heads=2 --set model.d_model=16 --set model.vocab_size=256"
    " --set model.max_seq_len=40 --set corpus.n_forget=6 --set corpus.n_retain=6 --set pretrain.steps=20"
    " --set pretrain.batch=4 --set unlearn.steps=3 --set unlearn.batch=4 --set backdoor.steps=3"
    " --set backdoor.batch=4";

int run(const std::string& args) {
  const std::string cmd = std::string(SINKDOOR_CLI) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir = fs::temp_directory_path() /
          ("sinkdoor_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir);
  }
  void TearDown() override { fs::remove_all(dir); }
  std::string out() const { return " --out " + dir.string() + kTiny; }
  fs::path dir;
};

TEST_F(CliTest, ConfigErrorsExitTwo) {
  EXPECT_EQ(run("pretrain --set no.such.key=1" + out()), 2);
  EXPECT_EQ(run("pretrain --set poison.rho=2" + out()), 2);
  EXPECT_EQ(run("pretrain --set model.rmu_layer=5" + out()), 2);
  EXPECT_EQ(run(""), 2);
  EXPECT_EQ(run("frobnicate"), 2);
}

TEST_F(CliTest, IoErrorsExitFour) {
  EXPECT_EQ(run("pretrain --config /nonexistent/x.cfg" + out()), 4);
  EXPECT_EQ(run("unlearn" + out()), 4);  // no theta_o yet
  EXPECT_EQ(run("report --out " + (dir / "missing").string()), 4);
  fs::create_directories(dir);
  std::ofstream(dir / "file") << "x";
  EXPECT_EQ(run("pretrain --out " + (dir / "file" / "sub").string() + kTiny), 4);
}

TEST_F(CliTest, NonFiniteCheckpointIsTrainingFault) {
  fs::create_directories(dir);
  RunConfig cfg = default_config();
  std::istringstream overrides(kTiny);
  std::string flag, kv;
  while (overrides >> flag >> kv) set_config_value(cfg, kv.substr(0, kv.find('=')), kv.substr(kv.find('=') + 1));
  Rng rng(0);
  TransformerState s = init_model(cfg.model, rng);
  s.head.mutable_data()[0] = std::nan("");
  save_checkpoint((dir / "theta_o.sdkp").string(), s, cfg.hash());
  EXPECT_EQ(run("unlearn" + out()), 3);
}

TEST_F(CliTest, EmptyReportSucceeds) {
  fs::create_directories(dir);
  EXPECT_EQ(run("report --out " + dir.string()), 0);
  EXPECT_TRUE(fs::exists(dir / "report.csv"));
}

TEST_F(CliTest, FullPipelineWritesArtifacts) {
  ASSERT_EQ(run("pretrain" + out()), 0);
  for (const char* f : {"theta_o.sdkp", "pretrain_loss.csv", "metrics.csv", "metrics_theta_o.json", "corpus.jsonl",
                        "config.txt"}) {
    EXPECT_TRUE(fs::exists(dir / f)) << f;
  }
  ASSERT_EQ(run("unlearn" + out()), 0);
  ASSERT_EQ(run("backdoor" + out()), 0);
  ASSERT_EQ(run("analyze" + out()), 0);
  ASSERT_EQ(run("report" + out()), 0);
  for (const char* f : {"theta_u.sdkp", "theta_b.sdkp", "unlearn_loss.csv", "backdoor_loss.csv", "poison_plan.json",
                        "sinks.json", "attn_diff_theta_b.csv", "attn_diff_theta_b_layer1.svg", "logit_traces.csv",
                        "value_norm_corr.csv", "report.csv", "summary.txt"}) {
    EXPECT_TRUE(fs::exists(dir / f)) << f;
  }
  const std::string metrics = slurp(dir / "metrics.csv");
  EXPECT_NE(metrics.find("run_id,checkpoint,split,metric,value\n"), std::string::npos);
  EXPECT_NE(metrics.find("run,theta_b,BE,KM*,"), std::string::npos);
  const std::string loss = slurp(dir / "backdoor_loss.csv");
  EXPECT_NE(loss.find("step,l_f,l_r,l_vn,total\n"), std::string::npos);
  EXPECT_NE(slurp(dir / "attn_diff_theta_o.csv").find("\nlayer,i,j,value\n"), std::string::npos);

  const std::string svg = slurp(dir / "attn_diff_theta_b_layer0.svg");
  ASSERT_EQ(run("analyze" + out()), 0);
  EXPECT_EQ(slurp(dir / "attn_diff_theta_b_layer0.svg"), svg);
}

TEST_F(CliTest, AnalyzeOriginalAgainstItself) {
  ASSERT_EQ(run("pretrain" + out()), 0);
  ASSERT_EQ(run("analyze" + out()), 0);
  const std::string corr = slurp(dir / "value_norm_corr.csv");
  EXPECT_NE(corr.find("theta_o~theta_o,D_r,1,1,head,1\n"), std::string::npos) << corr;
}

TEST_F(CliTest, RerunIsByteIdentical) {
  ASSERT_EQ(run("pretrain" + out()), 0);
  const std::string first = slurp(dir / "theta_o.sdkp");
  const std::string loss = slurp(dir / "pretrain_loss.csv");
  fs::remove_all(dir);
  ASSERT_EQ(run("pretrain" + out()), 0);
  EXPECT_EQ(slurp(dir / "theta_o.sdkp"), first);
  EXPECT_EQ(slurp(dir / "pretrain_loss.csv"), loss);
}

}  // namespace
}  // namespace sinkdoor
