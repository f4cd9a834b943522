#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "sinkdoor/checkpoint.hpp"
#include "sinkdoor/errors.hpp"
#include "sinkdoor/pipeline.hpp"
#include "test_util.hpp"

namespace sinkdoor {
namespace {

namespace fs = std::filesystem;

fs::path scratch_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("sinkdoor_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

RunConfig parse(const std::string& text) {
  std::istringstream in(text);
  return parse_config(in);
}

TEST(Config, ParsesKeysCommentsAndWhitespace) {
  const RunConfig c = parse(
      "# leading comment\n"
      "run.id = demo\n"
      "  run.seed=7   # trailing comment\n"
      "\n"
      "model.n_layers = 3\n"
      "trigger.text = current year: 2025\n"
      "trigger.placement = infix\n"
      "poison.rho = 0.05\n"
      "loss.method = rmu\n"
      "loss.vn_layers = 0, 2\n"
      "backdoor.mode = backdoor\n"
      "corpus.topical_split = false\n"
      "sweep.rhos = 0.05,0.1\n");
  EXPECT_EQ(c.run_id, "demo");
  EXPECT_EQ(c.seed, 7u);
  EXPECT_EQ(c.model.n_layers, 3);
  EXPECT_EQ(c.trigger_string(), "current year: 2025");
  EXPECT_EQ(c.placement, Placement::kInfix);
  EXPECT_DOUBLE_EQ(c.rho, 0.05);
  EXPECT_EQ(c.loss.method, Method::kRmu);
  EXPECT_EQ(c.loss.vn_layers, (std::vector<int>{0, 2}));
  EXPECT_EQ(c.backdoor_mode, Mode::kBackdoor);
  EXPECT_FALSE(c.topical_split);
  EXPECT_EQ(c.sweep.rhos, (std::vector<double>{0.05, 0.1}));
}

TEST(Config, SerializeParsesBackToTheSameHash) {
  RunConfig c = default_config();
  c.seed = 11;
  c.rho = 0.3;
  c.loss.lambda = 1.0 / 3.0;
  const RunConfig d = parse(c.serialize());
  EXPECT_EQ(d.serialize(), c.serialize());
  EXPECT_EQ(d.hash(), c.hash());
  EXPECT_EQ(c.hash().size(), 16u);
  RunConfig e = c;
  e.seed = 12;
  EXPECT_NE(e.hash(), c.hash());
  const std::string text = c.serialize();
  EXPECT_EQ(config_keys().size(), static_cast<std::size_t>(std::count(text.begin(), text.end(), '\n')));
}

TEST(Config, Rejections) {
  EXPECT_THROW(parse("no.such.key = 1\n"), ConfigError);
  EXPECT_THROW(parse("run.seed = 1\nrun.seed = 2\n"), ConfigError);
  EXPECT_THROW(parse("run.seed = -1\n"), ConfigError);
  EXPECT_THROW(parse("poison.rho = abc\n"), ConfigError);
  EXPECT_THROW(parse("poison.rho = 1.5\n"), ConfigError);
  EXPECT_THROW(parse("model.n_layers = 2.5\n"), ConfigError);
  EXPECT_THROW(parse("just some words\n"), ConfigError);
  EXPECT_THROW(parse("trigger.preset = loud\n"), ConfigError);
  EXPECT_THROW(parse("backdoor.mode = unlearn\n"), ConfigError);
  EXPECT_THROW(parse("loss.lambda = 0\nloss.sink_set =\nloss.sink_mode = explicit\n"), ConfigError);
  EXPECT_THROW(parse("model.d_model = 30\n"), ConfigError);
  EXPECT_THROW(parse("corpus.topical_split = maybe\n"), ConfigError);
  EXPECT_THROW(parse("unlearn.lr = 0\n"), ConfigError);
  EXPECT_THROW(load_config("/nonexistent/sinkdoor.cfg"), IoError);
}

TEST(Fnv1a, ReferenceVectors) {
  EXPECT_EQ(fnv1a_hex(""), "cbf29ce484222325");
  EXPECT_EQ(fnv1a_hex("a"), "af63dc4c8601ec8c");
  EXPECT_EQ(fnv1a_hex("foobar"), "85944171f73967e8");
}

TEST(Checkpoint, RoundTripIsBitExact) {
  const auto s = testing::random_model(2, 2, 8, 20, 3, 16);
  std::stringstream ss;
  save_checkpoint(ss, s, "00000000deadbeef");
  CheckpointInfo info;
  const TransformerState t = load_checkpoint(ss, "", {}, &info);
  EXPECT_TRUE(t.bit_equal(s));
  EXPECT_EQ(t.config, s.config);
  EXPECT_EQ(info.config_hash, "00000000deadbeef");
  EXPECT_EQ(info.version, kCheckpointVersion);
}

TEST(Checkpoint, LittleEndianLayout) {
  const auto s = testing::random_model(1, 2, 8, 20, 3, 16);
  std::stringstream ss;
  save_checkpoint(ss, s, "h");
  const std::string bytes = ss.str();
  ASSERT_GT(bytes.size(), 13u);
  EXPECT_EQ(bytes.substr(0, 5), "SDKP1");
  std::uint64_t header_len = 0;
  for (int i = 7; i >= 0; --i) header_len = (header_len << 8) | static_cast<unsigned char>(bytes[5 + i]);
  const std::string header = bytes.substr(13, header_len);
  EXPECT_NE(header.find("\"f64\""), std::string::npos);
  const std::size_t payload = bytes.size() - 13 - header_len;
  EXPECT_EQ(payload, 8 * s.parameter_count());
  // Last eight bytes are the last head entry, least significant byte first.
  std::uint64_t bits = 0;
  for (int i = 7; i >= 0; --i) bits = (bits << 8) | static_cast<unsigned char>(bytes[bytes.size() - 8 + i]);
  double last;
  std::memcpy(&last, &bits, 8);
  EXPECT_EQ(last, s.head.data().back());
}

TEST(Checkpoint, HashMismatchWarns) {
  const auto s = testing::random_model(1, 2, 8, 20, 3, 16);
  std::stringstream ss;
  save_checkpoint(ss, s, "aaaa");
  std::vector<std::string> warnings;
  load_checkpoint(ss, "bbbb", [&](const std::string& w) { warnings.push_back(w); });
  ASSERT_EQ(warnings.size(), 1u);
  EXPECT_NE(warnings[0].find("aaaa"), std::string::npos);
}

TEST(Checkpoint, CorruptionIsIoError) {
  const auto s = testing::random_model(1, 2, 8, 20, 3, 16);
  std::stringstream ss;
  save_checkpoint(ss, s, "h");
  const std::string bytes = ss.str();
  for (std::size_t cut : {std::size_t{3}, std::size_t{10}, std::size_t{40}, bytes.size() - 1}) {
    std::stringstream t(bytes.substr(0, cut));
    EXPECT_THROW(load_checkpoint(t), IoError) << cut;
  }
  std::stringstream bad_magic("XDKP1" + bytes.substr(5));
  EXPECT_THROW(load_checkpoint(bad_magic), IoError);
  std::stringstream trailing(bytes + "x");
  EXPECT_THROW(load_checkpoint(trailing), IoError);
  EXPECT_THROW(load_checkpoint("/nonexistent/theta.sdkp"), IoError);
}

TEST(Checkpoint, ModelMismatchIsConfigError) {
  const fs::path dir = scratch_dir("ckpt");
  const auto s = testing::random_model(1, 2, 8, 20, 3, 16);
  save_checkpoint((dir / "m.sdkp").string(), s, "h");
  ModelConfig other = s.config;
  other.n_layers = 2;
  EXPECT_THROW(load_checkpoint_as((dir / "m.sdkp").string(), other), ConfigError);
  EXPECT_TRUE(load_checkpoint_as((dir / "m.sdkp").string(), s.config).bit_equal(s));
  fs::remove_all(dir);
}

class PipelineTest : public ::testing::Test {
 protected:
  static RunConfig config() {
    RunConfig c = testing::tiny_config(0);
    c.unlearn.steps = 4;
    c.backdoor.steps = 4;
    return c;
  }
};

TEST_F(PipelineTest, ExperimentIsDeterministic) {
  const Experiment a(config()), b(config());
  EXPECT_EQ(a.forget_set(), b.forget_set());
  EXPECT_EQ(a.poisoned_test().size(), a.forget_set().size());
  EXPECT_EQ(a.forget_set().size(), 12u);
  EXPECT_EQ(a.retain_set().size(), 12u);
  EXPECT_TRUE(split_hygiene_ok(a.corpus()));
}

TEST_F(PipelineTest, ZeroRhoBackdoorEqualsUnlearn) {
  RunConfig c = config();
  c.rho = 0.0;
  c.loss.lambda = 0.0;
  c.backdoor = c.unlearn;
  const Experiment exp(c);
  const TransformerState init = exp.initial_model();
  const TrainResult u = exp.unlearn(init);
  const BackdoorRun b = exp.backdoor(init, nullptr, Mode::kBackdoor);
  EXPECT_TRUE(b.plan.selected_ids.empty());
  EXPECT_TRUE(b.poisoned.empty());
  EXPECT_TRUE(b.state.bit_equal(u.state));
}

TEST_F(PipelineTest, BackdoorRegRequiresUnlearnedModel) {
  const Experiment exp(config());
  const TransformerState init = exp.initial_model();
  EXPECT_THROW(exp.backdoor(init, nullptr, Mode::kBackdoorReg), ConfigError);
  const TrainResult u = exp.unlearn(init);
  const BackdoorRun b = exp.backdoor(init, &u.state, Mode::kBackdoorReg);
  EXPECT_EQ(b.plan.selected_ids.size(), 1u);  // round(0.1 * 6)
  EXPECT_EQ(b.poisoned.size(), 2u);
  ASSERT_EQ(b.log.size(), 4u);
  for (const LossRecord& r : b.log) EXPECT_GE(r.value_norm, 0.0);
}

TEST_F(PipelineTest, SinkSetModes) {
  RunConfig c = config();
  const Experiment prefix(c);
  const TransformerState init = prefix.initial_model();
  EXPECT_EQ(prefix.sink_set(init), (std::vector<std::size_t>{1, 2, 3}));  // three-word semantic trigger
  c.sink_mode = SinkMode::kExplicit;
  c.loss.sink_set = {0, 2};
  EXPECT_EQ(Experiment(c).sink_set(init), (std::vector<std::size_t>{0, 2}));
  c.sink_mode = SinkMode::kDetected;
  const auto detected = Experiment(c).sink_set(init);
  EXPECT_FALSE(detected.empty());
}

TEST(LossCsv, RoundTrip) {
  const fs::path dir = scratch_dir("loss");
  const std::vector<LossRecord> log = {{0, 1.5, 0.25, 0.0, 1.75}, {1, 1.0 / 3.0, 1e-9, 2.0, 2.5}};
  write_loss_csv((dir / "l.csv").string(), log, "run_id=x config_hash=y");
  std::ifstream in(dir / "l.csv");
  std::string first, second;
  std::getline(in, first);
  std::getline(in, second);
  EXPECT_EQ(first, "# run_id=x config_hash=y");
  EXPECT_EQ(second, "step,l_f,l_r,l_vn,total");
  const auto back = read_loss_csv((dir / "l.csv").string());
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[1].forget, 1.0 / 3.0);
  EXPECT_EQ(back[1].retain, 1e-9);
  EXPECT_EQ(back[1].total, 2.5);
  EXPECT_THROW(read_loss_csv((dir / "missing.csv").string()), IoError);
  fs::remove_all(dir);
}

TEST(PlanJson, RoundTrip) {
  const PoisonPlan plan{0.1, 42, {3, 17, 40}};
  const TriggerSpec t{{9, 10}, Placement::kSuffix, "semantic"};
  std::stringstream ss;
  write_plan_json(ss, plan, t, "r", "h");
  const std::string text = ss.str();
  EXPECT_NE(text.find("\"placement\": \"suffix\""), std::string::npos);
  const PoisonPlan back = read_plan_json(ss);
  EXPECT_EQ(back.selected_ids, plan.selected_ids);
  EXPECT_EQ(back.seed, 42u);
  EXPECT_EQ(back.rho, 0.1);
  std::stringstream bad("[]");
  EXPECT_THROW(read_plan_json(bad), IoError);
}

TEST(Quadrant, Regions) {
  auto r = [](double ue, double be) { return MetricsReport{"r", "c", {ue, 0}, {be, 0}, 100}; };
  EXPECT_EQ(quadrant(r(2, 40), 100), "backdoored");
  EXPECT_EQ(quadrant(r(2, 10), 100), "unlearned");
  EXPECT_EQ(quadrant(r(90, 100), 100), "retained");
  EXPECT_EQ(quadrant(r(60, 90), 100), "trigger-amplified");
  EXPECT_EQ(quadrant(r(50, 75), 100), "backdoored");
}

}  // namespace
}  // namespace sinkdoor
