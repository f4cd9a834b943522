#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

#include "sinkdoor/corpus.hpp"
#include "sinkdoor/losses.hpp"
#include "sinkdoor/model.hpp"
#include "sinkdoor/poison.hpp"

namespace sinkdoor {

enum class SinkMode { kTriggerPrefix, kDetected, kExplicit };

std::string_view to_string(SinkMode m);
SinkMode parse_sink_mode(std::string_view s);

struct PhaseConfig {
  int steps = 0;
  double lr = 1e-3;
  int batch_size = 8;
};

struct SweepConfig {
  std::vector<std::string> presets = {"semantic", "symbolic", "reasoning"};
  std::vector<Placement> placements = {Placement::kPrefix, Placement::kInfix, Placement::kSuffix};
  std::vector<double> rhos = {0.1};
  std::vector<double> lambdas = {0.0, 3e-4};
};

// Everything a run depends on. Serializes to flat dotted `key = value` lines;
// the hash of that text tags every emitted artifact.
struct RunConfig {
  std::string run_id = "run";
  std::uint64_t seed = 0;

  ModelConfig model;
  int n_forget = 50;
  int n_retain = 50;
  int passage_prompt_len = 8;
  bool topical_split = true;

  std::string trigger_preset = "semantic";
  std::string trigger_text;  // overrides the preset when nonempty
  Placement placement = Placement::kPrefix;
  double rho = 0.1;

  LossConfig loss;
  SinkMode sink_mode = SinkMode::kTriggerPrefix;
  double sink_tau = 3.0;

  PretrainConfig pretrain;
  PhaseConfig unlearn{120, 1e-3, 16};
  PhaseConfig backdoor{120, 1e-3, 16};
  Mode backdoor_mode = Mode::kBackdoorReg;
  double grad_clip = 1.0;
  double weight_decay = 0.0;

  int k_prompt = 8;
  SweepConfig sweep;

  void validate() const;  // throws ConfigError
  std::string serialize() const;
  // FNV-1a 64 of serialize(), 16 hex digits.
  std::string hash() const;
  std::string trigger_string() const;
};

RunConfig default_config();
// Applies one `key = value` assignment; unknown keys and bad values throw
// ConfigError.
void set_config_value(RunConfig& cfg, std::string_view key, std::string_view value);
std::vector<std::string> config_keys();
RunConfig parse_config(std::istream& in);
RunConfig load_config(const std::string& path);

std::string fnv1a_hex(std::string_view text);

}  // namespace sinkdoor
