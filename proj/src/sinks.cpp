#include "sinkdoor/sinks.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <ostream>

#include "sinkdoor/errors.hpp"
#include "sinkdoor/losses.hpp"

namespace sinkdoor {

std::string_view to_string(SinkRule rule) {
  switch (rule) {
    case SinkRule::kThreshold:
      return "threshold";
    case SinkRule::kTopK:
      return "top_k";
    case SinkRule::kTriggerPrefix:
      return "trigger_prefix";
  }
  return "?";
}

SinkRule parse_sink_rule(std::string_view s) {
  if (s == "threshold") return SinkRule::kThreshold;
  if (s == "top_k") return SinkRule::kTopK;
  if (s == "trigger_prefix") return SinkRule::kTriggerPrefix;
  throw ConfigError("unknown sink rule '" + std::string(s) + "' (threshold|top_k|trigger_prefix)");
}

SinkSet select_sinks(std::span<const ForwardTrace> traces, const SinkCriterion& criterion) {
  SinkSet out;
  out.criterion = criterion;
  if (criterion.rule == SinkRule::kTriggerPrefix) {
    out.positions = criterion.trigger_positions;
    std::sort(out.positions.begin(), out.positions.end());
    out.positions.erase(std::unique(out.positions.begin(), out.positions.end()), out.positions.end());
    return out;
  }
  if (traces.empty()) throw InputError("detect_sinks: no samples");
  std::size_t t_max = 0;
  double total_len = 0.0;
  for (const ForwardTrace& tr : traces) {
    if (tr.attention.empty()) throw InputError("detect_sinks: traces lack attention");
    t_max = std::max(t_max, tr.length);
    total_len += static_cast<double>(tr.length);
  }
  std::vector<double> sums(t_max, 0.0);
  std::vector<double> counts(t_max, 0.0);
  for (const ForwardTrace& tr : traces) {
    for (const auto& layer : tr.attention) {
      for (const Matrix& a : layer) {
        for (std::size_t i = 0; i < tr.length; ++i) {
          for (std::size_t j = 0; j <= i; ++j) {
            sums[j] += a(i, j);
            counts[j] += 1.0;
          }
        }
      }
    }
  }
  out.mean_length = total_len / static_cast<double>(traces.size());
  out.column_mean.resize(t_max);
  for (std::size_t j = 0; j < t_max; ++j) out.column_mean[j] = sums[j] / counts[j];

  if (criterion.rule == SinkRule::kThreshold) {
    if (!(criterion.tau > 0.0)) throw ConfigError("detect_sinks: tau must be positive");
    const double cut = criterion.tau / out.mean_length;
    for (std::size_t j = 0; j < t_max; ++j) {
      if (out.column_mean[j] >= cut) out.positions.push_back(j);
    }
  } else {
    if (criterion.top_k == 0) throw ConfigError("detect_sinks: top_k must be positive");
    std::vector<std::size_t> order(t_max);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return out.column_mean[a] > out.column_mean[b]; });
    order.resize(std::min(criterion.top_k, t_max));
    std::sort(order.begin(), order.end());
    out.positions = order;
  }
  return out;
}

SinkSet detect_sinks(const TransformerState& state, std::span<const Tokens> sequences,
                     const SinkCriterion& criterion) {
  if (criterion.rule == SinkRule::kTriggerPrefix) return select_sinks({}, criterion);
  if (sequences.empty()) throw InputError("detect_sinks: no samples");
  NoGradScope no_grad;
  CaptureFlags cap;
  cap.attention = true;
  BatchOptions opts;
  opts.capture = cap;
  opts.compute_logits = false;
  BatchForward bf = forward_batch(state, sequences, opts);
  return select_sinks(bf.traces, criterion);
}

std::vector<std::size_t> clean_to_poisoned_index(const Sample& clean, const Sample& poisoned) {
  if (clean.fact_id != poisoned.fact_id) throw InputError("attention pair: fact ids differ");
  const std::size_t n = clean.length();
  const std::size_t shift = poisoned.poisoned() ? static_cast<std::size_t>(poisoned.trigger_len) : 0;
  if (poisoned.length() != n + shift) throw InputError("attention pair: lengths inconsistent with the trigger");
  std::vector<std::size_t> map(n);
  const std::size_t insert_at = poisoned.poisoned() ? 1 + static_cast<std::size_t>(poisoned.trigger_at) : n;
  for (std::size_t c = 0; c < n; ++c) map[c] = c < insert_at ? c : c + shift;
  return map;
}

namespace {

std::vector<ForwardTrace> attention_traces(const TransformerState& state, std::span<const Sample> samples) {
  NoGradScope no_grad;
  std::vector<Tokens> seqs;
  for (const Sample& s : samples) seqs.push_back(s.sequence());
  CaptureFlags cap;
  cap.attention = true;
  BatchOptions opts;
  opts.capture = cap;
  opts.compute_logits = false;
  return forward_batch(state, seqs, opts).traces;
}

void check_pairs(const TransformerState& state, std::span<const Sample> clean, std::span<const Sample> poisoned,
                 int layer) {
  if (clean.size() != poisoned.size()) throw InputError("attention pairs: list sizes differ");
  if (clean.empty()) throw InputError("attention pairs: no samples");
  if (layer < 0 || layer >= state.config.n_layers) throw ConfigError("attention pairs: layer out of range");
  for (std::size_t p = 0; p < clean.size(); ++p) {
    if (clean[p].fact_id != poisoned[p].fact_id) {
      throw InputError("attention pairs: entry " + std::to_string(p) + " is not paired by fact id");
    }
  }
}

// Head-averaged poisoned minus embedded clean attention for one pair.
Matrix pair_delta(const ForwardTrace& clean, const ForwardTrace& poisoned, const std::vector<std::size_t>& map,
                  std::size_t layer) {
  const std::size_t t = poisoned.length;
  const auto& ph = poisoned.attention[layer];
  const auto& ch = clean.attention[layer];
  Matrix d(t, t);
  const double inv_h = 1.0 / static_cast<double>(ph.size());
  for (std::size_t h = 0; h < ph.size(); ++h) {
    for (std::size_t i = 0; i < t; ++i) {
      for (std::size_t j = 0; j < t; ++j) d(i, j) += ph[h](i, j) * inv_h;
    }
    for (std::size_t a = 0; a < clean.length; ++a) {
      for (std::size_t b = 0; b < clean.length; ++b) d(map[a], map[b]) -= ch[h](a, b) * inv_h;
    }
  }
  return d;
}

}  // namespace

AttnDiffMap attn_diff_map(const TransformerState& state, std::span<const Sample> clean,
                          std::span<const Sample> poisoned, int layer) {
  check_pairs(state, clean, poisoned, layer);
  const auto ct = attention_traces(state, clean);
  const auto pt = attention_traces(state, poisoned);
  std::size_t t_max = 0;
  for (const auto& tr : pt) t_max = std::max(t_max, tr.length);
  AttnDiffMap out;
  out.layer = layer;
  out.samples = clean.size();
  out.delta = Matrix(t_max, t_max);
  for (std::size_t p = 0; p < clean.size(); ++p) {
    const Matrix d = pair_delta(ct[p], pt[p], clean_to_poisoned_index(clean[p], poisoned[p]),
                                static_cast<std::size_t>(layer));
    for (std::size_t i = 0; i < d.rows; ++i) {
      for (std::size_t j = 0; j < d.cols; ++j) out.delta(i, j) += d(i, j);
    }
  }
  for (double& x : out.delta.data) x /= static_cast<double>(clean.size());
  return out;
}

double trigger_column_mass(const TransformerState& state, std::span<const Sample> clean,
                           std::span<const Sample> poisoned, int layer) {
  check_pairs(state, clean, poisoned, layer);
  const auto ct = attention_traces(state, clean);
  const auto pt = attention_traces(state, poisoned);
  double total = 0.0;
  for (std::size_t p = 0; p < clean.size(); ++p) {
    if (!poisoned[p].poisoned()) throw InputError("trigger_column_mass: sample without trigger");
    const Matrix d = pair_delta(ct[p], pt[p], clean_to_poisoned_index(clean[p], poisoned[p]),
                                static_cast<std::size_t>(layer));
    const std::size_t t0 = 1 + static_cast<std::size_t>(poisoned[p].trigger_at);
    const std::size_t t1 = t0 + static_cast<std::size_t>(poisoned[p].trigger_len);
    double mass = 0.0;
    for (std::size_t i = t0; i < d.rows; ++i) {
      for (std::size_t j = t0; j < std::min(t1, i + 1); ++j) mass += d(i, j);
    }
    total += mass / static_cast<double>(d.rows - t0);
  }
  return total / static_cast<double>(clean.size());
}

LogitTrace logit_trace(const TransformerState& state, const Tokens& sequence) {
  const ForwardResult r = forward(state, sequence);
  LogitTrace out;
  for (std::size_t i = 0; i + 1 < sequence.size(); ++i) out.values.push_back(r.logits(i, sequence[i + 1]));
  return out;
}

std::pair<LogitTrace, LogitTrace> logit_trace(const TransformerState& state, const Sample& clean,
                                              const Sample& poisoned) {
  if (clean.fact_id != poisoned.fact_id) throw InputError("logit_trace: pair does not share a fact id");
  return {logit_trace(state, clean.sequence()), logit_trace(state, poisoned.sequence())};
}

double mean_answer_logit(const TransformerState& state, std::span<const Sample> samples) {
  if (samples.empty()) throw InputError("mean_answer_logit: no samples");
  NoGradScope no_grad;
  const AnswerRows rows = answer_rows(samples);
  std::vector<Tokens> seqs;
  for (const Sample& s : samples) seqs.push_back(s.sequence());
  BatchOptions opts;
  opts.logit_rows = &rows.rows;
  BatchForward bf = forward_batch(state, seqs, opts);
  const std::size_t v = bf.logits.cols();
  double total = 0.0;
  for (std::size_t r = 0; r < rows.rows.size(); ++r) total += bf.logits.at(r * v + rows.targets[r]);
  return total / static_cast<double>(rows.rows.size());
}

double pearson(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw InputError("pearson: sequences differ in length");
  if (a.size() < 2) throw InputError("pearson: need at least two points");
  const double n = static_cast<double>(a.size());
  double ma = 0.0, mb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= n;
  mb /= n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double da = a[i] - ma, db = b[i] - mb;
    sab += da * db;
    saa += da * da;
    sbb += db * db;
  }
  if (saa == 0.0 || sbb == 0.0) throw DegenerateError("pearson: zero variance, correlation undefined");
  return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

namespace {

// Norms per eligible sample, row-major [sample x H].
std::vector<double> sample_head_norms(const TransformerState& state, std::span<const Sample> samples, int layer,
                                      std::size_t position) {
  if (layer < 0 || layer >= state.config.n_layers) throw ConfigError("value norms: layer out of range");
  std::vector<Tokens> seqs;
  for (const Sample& s : samples) {
    if (s.length() > position) seqs.push_back(s.sequence());
  }
  if (seqs.empty()) throw InputError("value norms: no sample reaches position " + std::to_string(position));
  NoGradScope no_grad;
  BatchOptions opts;
  opts.compute_logits = false;
  BatchForward bf = forward_batch(state, seqs, opts);
  std::vector<std::size_t> rows;
  for (const Segment& seg : bf.segments) rows.push_back(seg.offset + position);
  Tensor n = head_norms(bf.values[static_cast<std::size_t>(layer)], rows,
                        static_cast<std::size_t>(state.config.n_heads));
  return {n.data().begin(), n.data().end()};
}

}  // namespace

std::vector<double> head_value_norms(const TransformerState& state, std::span<const Sample> samples, int layer,
                                     std::size_t position) {
  const auto h = static_cast<std::size_t>(state.config.n_heads);
  const std::vector<double> all = sample_head_norms(state, samples, layer, position);
  std::vector<double> mean(h, 0.0);
  const std::size_t n = all.size() / h;
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t k = 0; k < h; ++k) mean[k] += all[s * h + k];
  }
  for (double& x : mean) x /= static_cast<double>(n);
  return mean;
}

double value_norm_correlation(const TransformerState& theta_a, const TransformerState& theta_b,
                              std::span<const Sample> samples, int layer, std::size_t position) {
  if (theta_a.config.n_heads < 2) throw DegenerateError("value_norm_correlation: needs at least two heads");
  if (theta_a.config != theta_b.config) throw ConfigError("value_norm_correlation: model configs differ");
  return pearson(head_value_norms(theta_a, samples, layer, position),
                 head_value_norms(theta_b, samples, layer, position));
}

double value_norm_correlation_flat(const TransformerState& theta_a, const TransformerState& theta_b,
                                   std::span<const Sample> samples, int layer, std::size_t position) {
  if (theta_a.config != theta_b.config) throw ConfigError("value_norm_correlation: model configs differ");
  return pearson(sample_head_norms(theta_a, samples, layer, position),
                 sample_head_norms(theta_b, samples, layer, position));
}

namespace {

std::string color_for(double x, double range) {
  const double t = std::clamp(x / range, -1.0, 1.0);
  int r = 255, g = 255, b = 255;
  if (t > 0) {
    g = b = static_cast<int>(std::lround(255.0 * (1.0 - t)));
  } else {
    r = g = static_cast<int>(std::lround(255.0 * (1.0 + t)));
  }
  char buf[8];
  std::snprintf(buf, sizeof buf, "#%02x%02x%02x", r, g, b);
  return buf;
}

std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&':
        out += "&amp;";
        break;
      case '<':
        out += "&lt;";
        break;
      case '>':
        out += "&gt;";
        break;
      case '"':
        out += "&quot;";
        break;
      default:
        out += c;
    }
  }
  return out;
}

}  // namespace

void write_heatmap_svg(std::ostream& out, const Matrix& m, const std::string& title, double range,
                       const std::string& stamp) {
  if (!(range > 0.0)) throw ContractError("heatmap: range must be positive");
  constexpr int kCell = 12, kMargin = 30;
  const int w = static_cast<int>(m.cols) * kCell + 2 * kMargin;
  const int h = static_cast<int>(m.rows) * kCell + 2 * kMargin + 20;
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h << "\">\n";
  if (!stamp.empty()) out << "<!-- " << xml_escape(stamp) << " -->\n";
  out << "<text x=\"" << kMargin << "\" y=\"18\" font-family=\"monospace\" font-size=\"12\">" << xml_escape(title)
      << " (scale +/-" << range << ")</text>\n";
  for (std::size_t i = 0; i < m.rows; ++i) {
    for (std::size_t j = 0; j < m.cols; ++j) {
      out << "<rect x=\"" << kMargin + static_cast<int>(j) * kCell << "\" y=\"" << kMargin + static_cast<int>(i) * kCell
          << "\" width=\"" << kCell << "\" height=\"" << kCell << "\" fill=\"" << color_for(m(i, j), range)
          << "\"/>\n";
    }
  }
  out << "</svg>\n";
}

void write_attn_diff_csv(std::ostream& out, std::span<const AttnDiffMap> maps) {
  out << "layer,i,j,value\n";
  char buf[64];
  for (const AttnDiffMap& map : maps) {
    for (std::size_t i = 0; i < map.delta.rows; ++i) {
      for (std::size_t j = 0; j < map.delta.cols; ++j) {
        std::snprintf(buf, sizeof buf, "%.17g", map.delta(i, j));
        out << map.layer << ',' << i << ',' << j << ',' << buf << '\n';
      }
    }
  }
}

}  // namespace sinkdoor
