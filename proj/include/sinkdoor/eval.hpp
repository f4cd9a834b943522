#pragma once

#include <iosfwd>
#include <span>
#include <string>
#include <utility>

#include "sinkdoor/corpus.hpp"
#include "sinkdoor/model.hpp"

namespace sinkdoor {

struct MemScores {
  double km = 0.0;  // KM*
  double vm = 0.0;  // VM*
  bool operator==(const MemScores&) const = default;
};

struct MetricsReport {
  std::string run_id;
  std::string checkpoint;
  MemScores ue;      // clean forget test set
  MemScores be;      // triggered forget test set
  double ut_km = 0.0;  // retain test set
  bool operator==(const MetricsReport&) const = default;
};

// Multiset token F1; an empty prediction scores 0.
double token_f1(const Tokens& prediction, const Tokens& gold);
// Length of the common prefix divided by the gold length.
double prefix_match(const Tokens& prediction, const Tokens& gold);

// Mean token F1 (x100) of greedy answers decoded for up to gold length + 2
// tokens from each QA prompt.
double knowmem_star(const TransformerState& state, std::span<const Sample> qa);

// Prompt and gold continuation used for a passage sample: BOS, the first
// k_prompt passage words (plus any trigger inside them), then the rest.
std::pair<Tokens, Tokens> verbmem_split(const Sample& passage, int k_prompt);
// Mean prefix match (x100) of the greedy continuation of each passage.
double verbmem_star(const TransformerState& state, std::span<const Sample> passages, int k_prompt);

// QA samples feed KM*, passage samples feed VM*; retain_test feeds UT.
MetricsReport evaluate(const TransformerState& state, std::span<const Sample> forget_test,
                       std::span<const Sample> poisoned_test, std::span<const Sample> retain_test, int k_prompt,
                       const std::string& run_id = {}, const std::string& checkpoint = {});

void write_report_json(std::ostream& out, const MetricsReport& report, const std::string& config_hash = {});
MetricsReport read_report_json(std::istream& in);
void write_metrics_csv_header(std::ostream& out);
void write_metrics_csv_rows(std::ostream& out, const MetricsReport& report);

}  // namespace sinkdoor
