#pragma once

#include <iosfwd>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "sinkdoor/corpus.hpp"
#include "sinkdoor/model.hpp"

namespace sinkdoor {

enum class SinkRule { kThreshold, kTopK, kTriggerPrefix };

std::string_view to_string(SinkRule rule);
SinkRule parse_sink_rule(std::string_view s);

struct SinkCriterion {
  SinkRule rule = SinkRule::kThreshold;
  double tau = 3.0;       // threshold: multiple of the uniform baseline 1/mean_length
  std::size_t top_k = 1;  // top_k
  std::vector<std::size_t> trigger_positions;  // trigger_prefix
};

struct SinkSet {
  std::vector<std::size_t> positions;  // sorted
  SinkCriterion criterion;
  // Mean incoming attention per key position over layers, heads, sequences
  // and the query rows that can see it.
  std::vector<double> column_mean;
  double mean_length = 0.0;
};

// Column statistics over already captured attention.
SinkSet select_sinks(std::span<const ForwardTrace> traces, const SinkCriterion& criterion);
SinkSet detect_sinks(const TransformerState& state, std::span<const Tokens> sequences,
                     const SinkCriterion& criterion);

struct AttnDiffMap {
  int layer = 0;
  Matrix delta;  // mean over heads and pairs, padded to the longest poisoned sequence
  std::size_t samples = 0;
  std::string clean_label = "clean";
  std::string poisoned_label = "poisoned";
};

// Index of each clean position inside its poisoned counterpart.
std::vector<std::size_t> clean_to_poisoned_index(const Sample& clean, const Sample& poisoned);

AttnDiffMap attn_diff_map(const TransformerState& state, std::span<const Sample> clean,
                          std::span<const Sample> poisoned, int layer);

// Mean over pairs, heads and query rows from the first trigger position on of
// the difference-map mass landing on trigger columns.
double trigger_column_mass(const TransformerState& state, std::span<const Sample> clean,
                           std::span<const Sample> poisoned, int layer);

struct LogitTrace {
  std::vector<double> values;  // logit of token i+1 at row i
};

LogitTrace logit_trace(const TransformerState& state, const Tokens& sequence);
std::pair<LogitTrace, LogitTrace> logit_trace(const TransformerState& state, const Sample& clean,
                                              const Sample& poisoned);
// Mean realized-token logit over every answer-predicting row of the samples.
double mean_answer_logit(const TransformerState& state, std::span<const Sample> samples);

double pearson(std::span<const double> a, std::span<const double> b);

// Per-head mean value norm at `position` over the samples long enough to
// contain it, shape [H].
std::vector<double> head_value_norms(const TransformerState& state, std::span<const Sample> samples, int layer,
                                     std::size_t position);
// Pearson over heads of the per-head mean norms.
double value_norm_correlation(const TransformerState& theta_a, const TransformerState& theta_b,
                              std::span<const Sample> samples, int layer, std::size_t position);
// Pearson over every (sample, head) norm pair.
double value_norm_correlation_flat(const TransformerState& theta_a, const TransformerState& theta_b,
                                   std::span<const Sample> samples, int layer, std::size_t position);

// Diverging blue-white-red heatmap with a fixed symmetric color range.
void write_heatmap_svg(std::ostream& out, const Matrix& m, const std::string& title, double range = 0.25,
                       const std::string& stamp = {});
void write_attn_diff_csv(std::ostream& out, std::span<const AttnDiffMap> maps);

}  // namespace sinkdoor
