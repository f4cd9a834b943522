#pragma once

#include <string>
#include <vector>

#include "sinkdoor/config.hpp"
#include "sinkdoor/corpus.hpp"
#include "sinkdoor/eval.hpp"
#include "sinkdoor/losses.hpp"
#include "sinkdoor/model.hpp"
#include "sinkdoor/poison.hpp"
#include "sinkdoor/sinks.hpp"

namespace sinkdoor {

struct BackdoorRun {
  TransformerState state;
  PoisonPlan plan;
  std::vector<Sample> poisoned;  // D_p
  std::vector<LossRecord> log;
};

// One configured experiment: the corpus, trigger and evaluation sets derived
// from a RunConfig, plus the three training phases. Every random choice comes
// from the config seed.
class Experiment {
 public:
  explicit Experiment(RunConfig config);

  const RunConfig& config() const { return config_; }
  const Corpus& corpus() const { return corpus_; }
  const TriggerSpec& trigger() const { return trigger_; }
  const std::vector<Sample>& forget_set() const { return forget_; }
  const std::vector<Sample>& retain_set() const { return retain_; }
  const std::vector<Sample>& poisoned_test() const { return poisoned_test_; }

  TransformerState initial_model() const;
  TrainResult pretrain() const;
  TrainResult unlearn(const TransformerState& theta_o) const;
  // Mode comes from the config; backdoor_reg needs theta_u.
  BackdoorRun backdoor(const TransformerState& theta_o, const TransformerState* theta_u) const;
  BackdoorRun backdoor(const TransformerState& theta_o, const TransformerState* theta_u, Mode mode) const;

  MetricsReport evaluate(const TransformerState& state, const std::string& checkpoint) const;
  // Sink positions regularized by the value-norm term.
  std::vector<std::size_t> sink_set(const TransformerState& theta_o) const;
  LossConfig loss_config(const TransformerState& theta_o) const;

 private:
  RunConfig config_;
  Corpus corpus_;
  TriggerSpec trigger_;
  std::vector<Sample> forget_;
  std::vector<Sample> retain_;
  std::vector<Sample> poisoned_test_;
};

// Trigger positions of a prefix trigger of the given length: 1..len.
std::vector<std::size_t> prefix_positions(std::size_t trigger_len);

std::vector<LossRecord> read_loss_csv(const std::string& path);
void write_loss_csv(const std::string& path, const std::vector<LossRecord>& log, const std::string& stamp);

void write_plan_json(std::ostream& out, const PoisonPlan& plan, const TriggerSpec& trigger,
                     const std::string& stamp_run, const std::string& stamp_hash);
PoisonPlan read_plan_json(std::istream& in);

// Region of a checkpoint in the UE/BE plane, given the original model's UE.KM*.
std::string quadrant(const MetricsReport& report, double original_ue_km);

}  // namespace sinkdoor
