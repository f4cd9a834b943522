#pragma once

#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "sinkdoor/corpus.hpp"
#include "sinkdoor/rng.hpp"

namespace sinkdoor {

enum class Placement { kPrefix, kInfix, kSuffix };

std::string_view to_string(Placement p);
Placement parse_placement(std::string_view s);

struct TriggerSpec {
  Tokens tokens;
  Placement placement = Placement::kPrefix;
  std::string label;

  void validate() const;  // nonempty, no reserved ids
};

// Named trigger patterns: "semantic" (current year: 2025), "symbolic" (!!!!!),
// "reasoning" (step-by-step).
const std::vector<std::string>& trigger_preset_names();
std::string trigger_preset_text(std::string_view preset);
TriggerSpec make_trigger(const Tokenizer& tokenizer, std::string_view text, Placement placement,
                         std::string label = {});

struct PoisonPlan {
  double rho = 0.0;
  std::uint64_t seed = 0;
  std::vector<int> selected_ids;  // sorted fact ids
};

// Round half to even.
std::size_t round_half_even(double x);

// Inserts the trigger into the prompt; BOS stays first and the answer is
// untouched. Prefix goes right after BOS, infix at floor(body/2) of the body
// (prompt without BOS), suffix at the end of the prompt.
Sample inject(const Sample& sample, const TriggerSpec& trigger, int max_seq_len);

struct PoisonSet {
  std::vector<Sample> samples;
  PoisonPlan plan;
};

// Selects round(rho * #facts) forget facts uniformly without replacement and
// poisons every sample of each selected fact.
PoisonSet build_poison_set(std::span<const Sample> forget, double rho, const TriggerSpec& trigger, Rng& rng,
                           int max_seq_len);
std::vector<Sample> replay_poison_plan(std::span<const Sample> forget, const PoisonPlan& plan,
                                       const TriggerSpec& trigger, int max_seq_len);

// Poisons every sample (test-time backdoor evaluation set).
std::vector<Sample> poison_eval_set(std::span<const Sample> forget_test, const TriggerSpec& trigger,
                                    int max_seq_len);

}  // namespace sinkdoor
