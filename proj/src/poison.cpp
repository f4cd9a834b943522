#include "sinkdoor/poison.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "sinkdoor/errors.hpp"

namespace sinkdoor {

std::string_view to_string(Placement p) {
  switch (p) {
    case Placement::kPrefix:
      return "prefix";
    case Placement::kInfix:
      return "infix";
    case Placement::kSuffix:
      return "suffix";
  }
  return "?";
}

Placement parse_placement(std::string_view s) {
  if (s == "prefix") return Placement::kPrefix;
  if (s == "infix") return Placement::kInfix;
  if (s == "suffix") return Placement::kSuffix;
  throw ConfigError("unknown trigger placement '" + std::string(s) + "' (prefix|infix|suffix)");
}

void TriggerSpec::validate() const {
  if (tokens.empty()) throw ConfigError("trigger: empty token sequence");
  for (Token t : tokens) {
    if (t < kNumReserved) throw ConfigError("trigger: reserved token id " + std::to_string(t));
  }
}

const std::vector<std::string>& trigger_preset_names() {
  static const std::vector<std::string> names = {"semantic", "symbolic", "reasoning"};
  return names;
}

std::string trigger_preset_text(std::string_view preset) {
  if (preset == "semantic") return "current year: 2025";
  if (preset == "symbolic") return "!!!!!";
  if (preset == "reasoning") return "step-by-step";
  throw ConfigError("unknown trigger preset '" + std::string(preset) + "' (semantic|symbolic|reasoning)");
}

TriggerSpec make_trigger(const Tokenizer& tokenizer, std::string_view text, Placement placement,
                         std::string label) {
  TriggerSpec spec;
  spec.tokens = tokenizer.encode(text);
  spec.placement = placement;
  spec.label = label.empty() ? std::string(text) : std::move(label);
  if (std::find(spec.tokens.begin(), spec.tokens.end(), kUnk) != spec.tokens.end()) {
    throw ConfigError("trigger '" + std::string(text) + "' contains out-of-vocabulary words");
  }
  spec.validate();
  return spec;
}

std::size_t round_half_even(double x) {
  if (x < 0) throw ContractError("round_half_even: negative input");
  return static_cast<std::size_t>(std::nearbyint(x));  // default FE_TONEAREST rounds ties to even
}

Sample inject(const Sample& sample, const TriggerSpec& trigger, int max_seq_len) {
  trigger.validate();
  if (sample.prompt.empty() || sample.prompt.front() != kBos) {
    throw InputError("inject: prompt must start with BOS");
  }
  if (sample.poisoned()) throw InputError("inject: sample already carries a trigger");
  const std::size_t total = sample.length() + trigger.tokens.size();
  if (total > static_cast<std::size_t>(max_seq_len)) {
    throw LengthError("inject: poisoned length " + std::to_string(total) + " exceeds max_seq_len " +
                      std::to_string(max_seq_len));
  }
  const std::size_t body = sample.prompt.size() - 1;
  std::size_t at = 0;
  switch (trigger.placement) {
    case Placement::kPrefix:
      at = 0;
      break;
    case Placement::kInfix:
      at = body / 2;
      break;
    case Placement::kSuffix:
      at = body;
      break;
  }
  Sample out = sample;
  out.prompt.insert(out.prompt.begin() + static_cast<std::ptrdiff_t>(1 + at), trigger.tokens.begin(),
                    trigger.tokens.end());
  out.trigger_at = static_cast<int>(at);
  out.trigger_len = static_cast<int>(trigger.tokens.size());
  return out;
}

std::vector<Sample> replay_poison_plan(std::span<const Sample> forget, const PoisonPlan& plan,
                                       const TriggerSpec& trigger, int max_seq_len) {
  const std::set<int> chosen(plan.selected_ids.begin(), plan.selected_ids.end());
  std::vector<Sample> out;
  for (const Sample& s : forget) {
    if (chosen.count(s.fact_id)) out.push_back(inject(s, trigger, max_seq_len));
  }
  return out;
}

PoisonSet build_poison_set(std::span<const Sample> forget, double rho, const TriggerSpec& trigger, Rng& rng,
                           int max_seq_len) {
  if (!(rho >= 0.0 && rho <= 1.0)) throw ConfigError("poison: rho must lie in [0, 1]");
  std::vector<int> facts;
  for (const Sample& s : forget) {
    if (std::find(facts.begin(), facts.end(), s.fact_id) == facts.end()) facts.push_back(s.fact_id);
  }
  std::sort(facts.begin(), facts.end());
  const std::size_t n_pick = round_half_even(rho * static_cast<double>(facts.size()));
  // Partial Fisher-Yates: the first n_pick slots form a uniform sample.
  for (std::size_t i = 0; i < n_pick; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.below(facts.size() - i));
    std::swap(facts[i], facts[j]);
  }
  PoisonSet result;
  result.plan.rho = rho;
  result.plan.seed = rng.seed();
  result.plan.selected_ids.assign(facts.begin(), facts.begin() + static_cast<std::ptrdiff_t>(n_pick));
  std::sort(result.plan.selected_ids.begin(), result.plan.selected_ids.end());
  result.samples = replay_poison_plan(forget, result.plan, trigger, max_seq_len);
  return result;
}

std::vector<Sample> poison_eval_set(std::span<const Sample> forget_test, const TriggerSpec& trigger,
                                    int max_seq_len) {
  std::vector<Sample> out;
  out.reserve(forget_test.size());
  for (const Sample& s : forget_test) out.push_back(inject(s, trigger, max_seq_len));
  return out;
}

}  // namespace sinkdoor
