#include "sinkdoor/pipeline.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "sinkdoor/errors.hpp"

namespace sinkdoor {

namespace {

constexpr int kTriggerHeadroom = 8;

// Data-order streams: unlearn and backdoor share one so that a backdoor run
// with no poisoned data replays the unlearn run exactly.
constexpr std::uint64_t kPretrainData = 1;
constexpr std::uint64_t kForgetData = 2;

}  // namespace

Experiment::Experiment(RunConfig config) : config_(std::move(config)) {
  config_.validate();
  CorpusConfig cc;
  cc.n_forget = config_.n_forget;
  cc.n_retain = config_.n_retain;
  cc.seed = config_.seed;
  cc.vocab_limit = config_.model.vocab_size;
  cc.max_seq_len = config_.model.max_seq_len;
  cc.passage_prompt_len = config_.passage_prompt_len;
  cc.topical_split = config_.topical_split;
  cc.trigger_headroom = kTriggerHeadroom;
  Rng rng(config_.seed, Stream::kCorpus);
  corpus_ = generate_corpus(cc, rng);

  trigger_ = make_trigger(corpus_.tokenizer, config_.trigger_string(), config_.placement,
                          config_.trigger_text.empty() ? config_.trigger_preset : config_.trigger_text);
  if (trigger_.tokens.size() > static_cast<std::size_t>(kTriggerHeadroom)) {
    throw ConfigError("trigger longer than the " + std::to_string(kTriggerHeadroom) + "-token headroom");
  }
  forget_ = corpus_.forget();
  retain_ = corpus_.retain();
  poisoned_test_ = poison_eval_set(forget_, trigger_, config_.model.max_seq_len);
}

TransformerState Experiment::initial_model() const {
  Rng rng(config_.seed, Stream::kInit);
  return init_model(config_.model, rng);
}

TrainResult Experiment::pretrain() const {
  PretrainConfig pc = config_.pretrain;
  pc.grad_clip = config_.grad_clip;
  pc.weight_decay = config_.weight_decay;
  Rng rng = Rng(config_.seed, Stream::kData).fork(kPretrainData);
  const auto samples = corpus_.pretrain();
  return sinkdoor::pretrain(initial_model(), samples, corpus_.preamble_pool, pc, rng);
}

LossConfig Experiment::loss_config(const TransformerState& theta_o) const {
  LossConfig lc = config_.loss;
  lc.sink_set = sink_set(theta_o);
  lc.rmu_vector_seed = config_.seed;
  return lc;
}

std::vector<std::size_t> prefix_positions(std::size_t trigger_len) {
  std::vector<std::size_t> out;
  for (std::size_t i = 1; i <= trigger_len; ++i) out.push_back(i);
  return out;
}

std::vector<std::size_t> Experiment::sink_set(const TransformerState& theta_o) const {
  switch (config_.sink_mode) {
    case SinkMode::kTriggerPrefix:
      return prefix_positions(trigger_.tokens.size());
    case SinkMode::kExplicit:
      return config_.loss.sink_set;
    case SinkMode::kDetected: {
      std::vector<Tokens> seqs;
      std::size_t shortest = config_.model.max_seq_len;
      for (const Sample& s : forget_) {
        seqs.push_back(s.sequence());
        shortest = std::min(shortest, s.length());
      }
      SinkCriterion crit;
      crit.rule = SinkRule::kThreshold;
      crit.tau = config_.sink_tau;
      SinkSet found = detect_sinks(theta_o, seqs, crit);
      std::vector<std::size_t> out;
      for (std::size_t p : found.positions) {
        if (p < shortest) out.push_back(p);
      }
      if (out.empty()) throw ConfigError("sink detection found no position shared by every forget sample");
      return out;
    }
  }
  return {};
}

TrainResult Experiment::unlearn(const TransformerState& theta_o) const {
  TrainConfig tc;
  tc.mode = Mode::kUnlearn;
  tc.steps = config_.unlearn.steps;
  tc.lr = config_.unlearn.lr;
  tc.batch_size = config_.unlearn.batch_size;
  tc.grad_clip = config_.grad_clip;
  tc.weight_decay = config_.weight_decay;
  TrainData data{forget_, retain_, {}};
  ReferenceModels refs{&theta_o, nullptr};
  Rng rng = Rng(config_.seed, Stream::kData).fork(kForgetData);
  return train(theta_o, refs, data, loss_config(theta_o), tc, rng);
}

BackdoorRun Experiment::backdoor(const TransformerState& theta_o, const TransformerState* theta_u) const {
  return backdoor(theta_o, theta_u, config_.backdoor_mode);
}

BackdoorRun Experiment::backdoor(const TransformerState& theta_o, const TransformerState* theta_u, Mode mode) const {
  if (mode == Mode::kBackdoorReg && theta_u == nullptr) {
    throw ConfigError("backdoor_reg needs the unlearned model theta_u; run `unlearn` first");
  }
  Rng poison_rng(config_.seed, Stream::kPoison);
  PoisonSet ps = build_poison_set(forget_, config_.rho, trigger_, poison_rng, config_.model.max_seq_len);

  TrainConfig tc;
  tc.mode = mode;
  tc.steps = config_.backdoor.steps;
  tc.lr = config_.backdoor.lr;
  tc.batch_size = config_.backdoor.batch_size;
  tc.grad_clip = config_.grad_clip;
  tc.weight_decay = config_.weight_decay;
  TrainData data{forget_, retain_, ps.samples};
  ReferenceModels refs{&theta_o, theta_u};
  Rng rng = Rng(config_.seed, Stream::kData).fork(kForgetData);
  TrainResult tr = train(theta_o, refs, data, loss_config(theta_o), tc, rng);
  return {std::move(tr.state), ps.plan, std::move(ps.samples), std::move(tr.log)};
}

MetricsReport Experiment::evaluate(const TransformerState& state, const std::string& checkpoint) const {
  return sinkdoor::evaluate(state, forget_, poisoned_test_, retain_, config_.k_prompt, config_.run_id, checkpoint);
}

void write_loss_csv(const std::string& path, const std::vector<LossRecord>& log, const std::string& stamp) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open " + path + " for writing");
  if (!stamp.empty()) out << "# " << stamp << '\n';
  out << "step,l_f,l_r,l_vn,total\n";
  char buf[160];
  for (const LossRecord& r : log) {
    std::snprintf(buf, sizeof buf, "%d,%.17g,%.17g,%.17g,%.17g\n", r.step, r.forget, r.retain, r.value_norm, r.total);
    out << buf;
  }
  if (!out) throw IoError("write failed for " + path);
}

std::vector<LossRecord> read_loss_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  std::vector<LossRecord> out;
  std::string line;
  bool header = false;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    if (!header) {
      header = true;
      continue;
    }
    LossRecord r;
    if (std::sscanf(line.c_str(), "%d,%lf,%lf,%lf,%lf", &r.step, &r.forget, &r.retain, &r.value_norm, &r.total) != 5) {
      throw IoError("malformed loss log line in " + path + ": " + line);
    }
    out.push_back(r);
  }
  return out;
}

void write_plan_json(std::ostream& out, const PoisonPlan& plan, const TriggerSpec& trigger,
                     const std::string& stamp_run, const std::string& stamp_hash) {
  nlohmann::ordered_json j;
  j["run_id"] = stamp_run;
  j["config_hash"] = stamp_hash;
  j["rho"] = plan.rho;
  j["seed"] = plan.seed;
  j["trigger"] = {{"label", trigger.label},
                  {"placement", std::string(to_string(trigger.placement))},
                  {"tokens", trigger.tokens}};
  j["selected_ids"] = plan.selected_ids;
  out << j.dump(2) << '\n';
}

PoisonPlan read_plan_json(std::istream& in) {
  try {
    const auto j = nlohmann::json::parse(in);
    PoisonPlan p;
    p.rho = j.at("rho").get<double>();
    p.seed = j.at("seed").get<std::uint64_t>();
    p.selected_ids = j.at("selected_ids").get<std::vector<int>>();
    return p;
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("malformed poison plan: ") + e.what());
  }
}

std::string quadrant(const MetricsReport& report, double original_ue_km) {
  const bool unlearned = report.ue.km <= 0.5 * original_ue_km;
  const bool recovered = report.be.km >= report.ue.km + 25.0;
  if (unlearned && recovered) return "backdoored";
  if (unlearned) return "unlearned";
  if (recovered) return "trigger-amplified";
  return "retained";
}

}  // namespace sinkdoor
