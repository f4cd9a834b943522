#include "sinkdoor/eval.hpp"

#include <algorithm>
#include <cstdio>
#include <map>
#include <ostream>
#include <set>

#include "json.hpp"

#include "sinkdoor/errors.hpp"

namespace sinkdoor {

double token_f1(const Tokens& prediction, const Tokens& gold) {
  if (prediction.empty() || gold.empty()) return 0.0;
  std::map<Token, int> counts;
  for (Token t : gold) ++counts[t];
  int overlap = 0;
  for (Token t : prediction) {
    auto it = counts.find(t);
    if (it != counts.end() && it->second > 0) {
      --it->second;
      ++overlap;
    }
  }
  if (overlap == 0) return 0.0;
  const double precision = static_cast<double>(overlap) / static_cast<double>(prediction.size());
  const double recall = static_cast<double>(overlap) / static_cast<double>(gold.size());
  return 2.0 * precision * recall / (precision + recall);
}

double prefix_match(const Tokens& prediction, const Tokens& gold) {
  if (gold.empty()) throw InputError("prefix_match: empty gold continuation");
  std::size_t n = 0;
  while (n < prediction.size() && n < gold.size() && prediction[n] == gold[n]) ++n;
  return static_cast<double>(n) / static_cast<double>(gold.size());
}

namespace {

Tokens strip_eos(const Tokens& answer) {
  Tokens out = answer;
  if (!out.empty() && out.back() == kEos) out.pop_back();
  return out;
}

// Generated continuation up to (not including) EOS.
Tokens continuation(const Tokens& full, std::size_t prompt_len) {
  Tokens out(full.begin() + static_cast<std::ptrdiff_t>(prompt_len), full.end());
  auto eos = std::find(out.begin(), out.end(), kEos);
  out.erase(eos, out.end());
  return out;
}

}  // namespace

double knowmem_star(const TransformerState& state, std::span<const Sample> qa) {
  if (qa.empty()) throw InputError("knowmem: empty sample set");
  std::vector<Tokens> prompts;
  std::vector<std::size_t> budgets;
  std::vector<Tokens> golds;
  for (const Sample& s : qa) {
    golds.push_back(strip_eos(s.answer));
    if (golds.back().empty()) throw InputError("knowmem: sample with empty answer");
    prompts.push_back(s.prompt);
    budgets.push_back(golds.back().size() + 2);
  }
  const std::vector<Tokens> outs = generate_greedy_batch(state, prompts, budgets);
  double total = 0.0;
  for (std::size_t i = 0; i < qa.size(); ++i) total += token_f1(continuation(outs[i], prompts[i].size()), golds[i]);
  return 100.0 * total / static_cast<double>(qa.size());
}

std::pair<Tokens, Tokens> verbmem_split(const Sample& passage, int k_prompt) {
  if (k_prompt < 0) throw ConfigError("verbmem: k_prompt must be nonnegative");
  const Tokens seq = passage.sequence();
  const auto k = static_cast<std::size_t>(k_prompt);
  std::size_t cut = 1 + k;
  if (passage.poisoned() && static_cast<std::size_t>(passage.trigger_at) <= k) {
    cut += static_cast<std::size_t>(passage.trigger_len);
  }
  Tokens gold(seq.begin() + static_cast<std::ptrdiff_t>(std::min(cut, seq.size())), seq.end());
  gold = strip_eos(gold);
  if (cut >= seq.size() || gold.empty()) {
    throw InputError("verbmem: passage of length " + std::to_string(seq.size()) + " not longer than k_prompt " +
                     std::to_string(k_prompt));
  }
  return {Tokens(seq.begin(), seq.begin() + static_cast<std::ptrdiff_t>(cut)), gold};
}

double verbmem_star(const TransformerState& state, std::span<const Sample> passages, int k_prompt) {
  if (passages.empty()) throw InputError("verbmem: empty sample set");
  std::vector<Tokens> prompts, golds;
  std::vector<std::size_t> budgets;
  for (const Sample& s : passages) {
    auto [prompt, gold] = verbmem_split(s, k_prompt);
    budgets.push_back(gold.size());
    prompts.push_back(std::move(prompt));
    golds.push_back(std::move(gold));
  }
  const std::vector<Tokens> outs = generate_greedy_batch(state, prompts, budgets);
  double total = 0.0;
  for (std::size_t i = 0; i < passages.size(); ++i) {
    total += prefix_match(continuation(outs[i], prompts[i].size()), golds[i]);
  }
  return 100.0 * total / static_cast<double>(passages.size());
}

namespace {

std::vector<Sample> of_kind(std::span<const Sample> samples, SampleKind kind) {
  std::vector<Sample> out;
  for (const Sample& s : samples) {
    if (s.kind == kind) out.push_back(s);
  }
  return out;
}

MemScores mem_scores(const TransformerState& state, std::span<const Sample> samples, int k_prompt) {
  MemScores m;
  const auto qa = of_kind(samples, SampleKind::kQa);
  const auto passages = of_kind(samples, SampleKind::kPassage);
  if (!qa.empty()) m.km = knowmem_star(state, qa);
  if (!passages.empty()) m.vm = verbmem_star(state, passages, k_prompt);
  return m;
}

}  // namespace

MetricsReport evaluate(const TransformerState& state, std::span<const Sample> forget_test,
                       std::span<const Sample> poisoned_test, std::span<const Sample> retain_test, int k_prompt,
                       const std::string& run_id, const std::string& checkpoint) {
  if (forget_test.size() != poisoned_test.size()) throw InputError("evaluate: poisoned set is not paired");
  for (std::size_t i = 0; i < forget_test.size(); ++i) {
    if (forget_test[i].fact_id != poisoned_test[i].fact_id || forget_test[i].kind != poisoned_test[i].kind) {
      throw InputError("evaluate: poisoned entry " + std::to_string(i) + " does not match its clean sample");
    }
  }
  std::set<int> forget_ids;
  for (const Sample& s : forget_test) forget_ids.insert(s.fact_id);
  for (const Sample& s : retain_test) {
    if (forget_ids.count(s.fact_id)) throw InputError("evaluate: retain test set overlaps the forget set");
  }
  const auto retain_qa = of_kind(retain_test, SampleKind::kQa);
  if (retain_qa.empty()) throw InputError("evaluate: retain test set has no QA samples");

  MetricsReport r;
  r.run_id = run_id;
  r.checkpoint = checkpoint;
  r.ue = mem_scores(state, forget_test, k_prompt);
  r.be = mem_scores(state, poisoned_test, k_prompt);
  r.ut_km = knowmem_star(state, retain_qa);
  return r;
}

void write_report_json(std::ostream& out, const MetricsReport& report, const std::string& config_hash) {
  nlohmann::ordered_json j;
  j["run_id"] = report.run_id;
  j["checkpoint"] = report.checkpoint;
  if (!config_hash.empty()) j["config_hash"] = config_hash;
  j["UE"] = {{"KM*", report.ue.km}, {"VM*", report.ue.vm}};
  j["BE"] = {{"KM*", report.be.km}, {"VM*", report.be.vm}};
  j["UT"] = {{"KM*", report.ut_km}};
  out << j.dump(2) << '\n';
}

MetricsReport read_report_json(std::istream& in) {
  try {
    const auto j = nlohmann::json::parse(in);
    MetricsReport r;
    r.run_id = j.at("run_id").get<std::string>();
    r.checkpoint = j.at("checkpoint").get<std::string>();
    r.ue = {j.at("UE").at("KM*").get<double>(), j.at("UE").at("VM*").get<double>()};
    r.be = {j.at("BE").at("KM*").get<double>(), j.at("BE").at("VM*").get<double>()};
    r.ut_km = j.at("UT").at("KM*").get<double>();
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("malformed metrics report: ") + e.what());
  }
}

void write_metrics_csv_header(std::ostream& out) { out << "run_id,checkpoint,split,metric,value\n"; }

void write_metrics_csv_rows(std::ostream& out, const MetricsReport& report) {
  auto row = [&](const char* split, const char* metric, double value) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.10g", value);
    out << report.run_id << ',' << report.checkpoint << ',' << split << ',' << metric << ',' << buf << '\n';
  };
  row("UE", "KM*", report.ue.km);
  row("UE", "VM*", report.ue.vm);
  row("BE", "KM*", report.be.km);
  row("BE", "VM*", report.be.vm);
  row("UT", "KM*", report.ut_km);
}

}  // namespace sinkdoor
