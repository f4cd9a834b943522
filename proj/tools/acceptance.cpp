// Acceptance run: one PASS/FAIL line per criterion on stdout, progress and
// per-seed detail on stderr. Exit status 0 only when every selected
// criterion passes.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "sinkdoor/checkpoint.hpp"
#include "sinkdoor/errors.hpp"
#include "sinkdoor/gradcheck.hpp"
#include "sinkdoor/pipeline.hpp"

namespace fs = std::filesystem;
using namespace sinkdoor;

namespace {

// Tolerances, pinned.
constexpr double kGradRelErr = 1e-4;
constexpr int kGradTrials = 100;
constexpr double kSoftmaxSumTol = 1e-12;
constexpr double kNumericsSeconds = 30.0;
constexpr double kNpoTol = 1e-9;
constexpr double kZeroTol = 1e-12;
constexpr double kMemorized = 95.0;
constexpr int kPretrainStepBudget = 2000;
constexpr double kPretrainSeconds = 300.0;
constexpr double kUnlearnFraction = 0.5;
constexpr double kUtilityBand = 10.0;
constexpr double kStealthBand = 10.0;
constexpr double kRecoveryGap = 25.0;
constexpr double kPipelineSeconds = 900.0;
constexpr double kPlacementGap = 15.0;
constexpr double kReducedRho = 0.05;
constexpr double kReducedRhoUeSlack = 5.0;
constexpr double kTriggerInsensitivity = 5.0;

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

void note(const std::string& s) { std::cerr << s << '\n'; }

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

// Hash of the config lines whose keys start with one of the prefixes.
std::string phase_key(const RunConfig& cfg, std::initializer_list<std::string_view> prefixes) {
  std::istringstream in(cfg.serialize());
  std::string line, kept;
  while (std::getline(in, line)) {
    for (std::string_view p : prefixes) {
      if (line.rfind(p, 0) == 0) {
        kept += line + '\n';
        break;
      }
    }
  }
  return fnv1a_hex(kept);
}

std::string checkpoint_bytes(const TransformerState& s, const std::string& hash) {
  std::ostringstream out;
  save_checkpoint(out, s, hash);
  return out.str();
}

std::string metrics_csv(std::initializer_list<const MetricsReport*> reports) {
  std::ostringstream out;
  write_metrics_csv_header(out);
  for (const MetricsReport* r : reports) write_metrics_csv_rows(out, *r);
  return out.str();
}

std::vector<Sample> qa_only(std::span<const Sample> samples) {
  std::vector<Sample> out;
  for (const Sample& s : samples) {
    if (s.kind == SampleKind::kQa) out.push_back(s);
  }
  return out;
}

struct Trained {
  TransformerState state;
  double seconds = 0.0;  // negative when loaded from the cache
  std::vector<Sample> poisoned;
};

// Trains each phase at most once per configuration, optionally persisting
// checkpoints in a cache directory between runs.
class Lab {
 public:
  explicit Lab(std::string cache_dir) : cache_dir_(std::move(cache_dir)) {
    if (!cache_dir_.empty()) fs::create_directories(cache_dir_);
  }

  const Trained& theta_o(const RunConfig& cfg) {
    const std::string key = "o_" + phase_key(cfg, {"run.seed", "model.", "corpus.", "pretrain.", "train."});
    return get(key, cfg, [&] {
      Experiment exp(cfg);
      return Trained{exp.pretrain().state, 0.0, {}};
    });
  }

  const Trained& theta_u(const RunConfig& cfg) {
    const std::string key =
        "u_" + phase_key(cfg, {"run.seed", "model.", "corpus.", "pretrain.", "train.", "unlearn.", "loss."});
    const TransformerState& o = theta_o(cfg).state;
    return get(key, cfg, [&] {
      Experiment exp(cfg);
      return Trained{exp.unlearn(o).state, 0.0, {}};
    });
  }

  const Trained& theta_b(const RunConfig& cfg) {
    const std::string key = "b_" + cfg.hash();
    const TransformerState& o = theta_o(cfg).state;
    const TransformerState& u = theta_u(cfg).state;
    return get(key, cfg, [&] {
      Experiment exp(cfg);
      BackdoorRun run = exp.backdoor(o, &u);
      return Trained{std::move(run.state), 0.0, std::move(run.poisoned)};
    });
  }

 private:
  const Trained& get(const std::string& key, const RunConfig& cfg, const std::function<Trained()>& make) {
    auto it = memo_.find(key);
    if (it != memo_.end()) return it->second;
    const fs::path path = cache_dir_.empty() ? fs::path() : fs::path(cache_dir_) / (key + ".sdkp");
    Trained t;
    if (!path.empty() && fs::exists(path)) {
      t.state = load_checkpoint(path.string());
      t.seconds = -1.0;
      if (key[0] == 'b') {
        // Poison selection is cheap to replay.
        Experiment exp(cfg);
        Rng rng(cfg.seed, Stream::kPoison);
        t.poisoned = build_poison_set(exp.forget_set(), cfg.rho, exp.trigger(), rng, cfg.model.max_seq_len).samples;
      }
    } else {
      const auto t0 = Clock::now();
      t = make();
      t.seconds = seconds_since(t0);
      note(fmt("  trained %s in %.1fs", key.c_str(), t.seconds));
      if (!path.empty()) save_checkpoint(path.string(), t.state, cfg.hash());
    }
    return memo_.emplace(key, std::move(t)).first->second;
  }

  std::string cache_dir_;
  std::map<std::string, Trained> memo_;
};

struct Verdict {
  bool pass = false;
  std::string detail;
};

RunConfig variant(RunConfig cfg, const std::string& preset, Placement placement, double rho, Mode mode,
                  double lambda) {
  cfg.trigger_preset = preset;
  cfg.trigger_text.clear();
  cfg.placement = placement;
  cfg.rho = rho;
  cfg.backdoor_mode = mode;
  cfg.loss.lambda = lambda;
  return cfg;
}

struct Context {
  Lab& lab;
  std::vector<RunConfig> seeds;  // one base config per seed, first is the default run
  std::map<std::string, MetricsReport> report_memo;

  const MetricsReport& report(const RunConfig& cfg, const TransformerState& state, const std::string& tag) {
    const std::string key = cfg.hash() + tag;
    auto it = report_memo.find(key);
    if (it != report_memo.end()) return it->second;
    return report_memo.emplace(key, Experiment(cfg).evaluate(state, tag)).first->second;
  }
};

// ---- criteria ---------------------------------------------------------------

Verdict numerics(Context&) {
  const auto t0 = Clock::now();
  const auto checks = run_gradchecks(20240601, kGradTrials);
  const double softmax_err = softmax_row_sum_error(20240602, 1000);
  const double secs = seconds_since(t0);
  double worst = 0.0;
  std::string worst_op;
  for (const OpCheck& c : checks) {
    if (c.max_rel_error >= worst) {
      worst = c.max_rel_error;
      worst_op = c.op;
    }
  }
  const bool pass = worst < kGradRelErr && softmax_err < kSoftmaxSumTol && secs < kNumericsSeconds &&
                    checks.size() == gradcheck_ops().size();
  return {pass, fmt("%zu ops x %d trials, max rel err %.2e (%s), softmax row-sum err %.1e, %.1fs", checks.size(),
                    kGradTrials, worst, worst_op.c_str(), softmax_err, secs)};
}

Verdict loss_identities(Context& ctx) {
  const RunConfig& cfg = ctx.seeds.front();
  Experiment exp(cfg);
  Rng ra(cfg.seed, Stream::kInit), rb = Rng(cfg.seed, Stream::kInit).fork(99);
  const TransformerState a = init_model(cfg.model, ra);
  const TransformerState b = init_model(cfg.model, rb);
  const int layer = cfg.model.resolved_rmu_layer();
  const std::vector<Sample> forget(exp.forget_set().begin(), exp.forget_set().begin() + 8);
  const std::vector<Sample> retain(exp.retain_set().begin(), exp.retain_set().begin() + 8);
  Rng prng(cfg.seed, Stream::kPoison);
  const auto dp = build_poison_set(exp.forget_set(), 0.2, exp.trigger(), prng, cfg.model.max_seq_len).samples;
  NoGradScope no_grad;

  ReferenceCache ca(a, layer), cb(b, layer);
  const double beta = cfg.loss.beta;
  const double npo = npo_forget_loss(a, ca, forget, beta).item();
  const double npo_err = std::abs(npo - 2.0 / beta * std::log(2.0));
  const double kl = std::abs(kl_retain_loss(a, ca, retain).item());
  const double rmu_r = std::abs(rmu_retain_loss(a, ca, retain, layer).item());
  const std::vector<std::size_t> sinks = prefix_positions(exp.trigger().tokens.size());
  const std::vector<int> layers = cfg.loss.resolved_vn_layers(cfg.model);
  // theta_o = a, theta_u = b: the forget term vanishes at b, the poison term at a.
  const double vn_f = std::abs(value_norm_loss(b, &ca, &cb, forget, dp, sinks, layers).forget.item());
  const double vn_p = std::abs(value_norm_loss(a, &ca, &cb, forget, dp, sinks, layers).poison.item());

  // A model whose representation is exactly c * u at every position: zero
  // embeddings and weights, with the feed-forward output bias of the
  // representation layer set to the target.
  const auto u = rmu_direction(cfg.model.d_model, cfg.seed);
  TransformerState target(cfg.model);
  for (std::size_t i = 0; i < u.size(); ++i) {
    target.layers[static_cast<std::size_t>(layer)].ff_out_bias.mutable_data()[i] = cfg.loss.rmu_c * u[i];
  }
  const double rmu_f = std::abs(rmu_forget_loss(target, forget, cfg.loss.rmu_c, u, layer).item());

  const bool pass = npo_err < kNpoTol && kl < kZeroTol && vn_f < kZeroTol && vn_p < kZeroTol && rmu_f < kZeroTol &&
                    rmu_r < kZeroTol;
  return {pass, fmt("NPO %.12f (err %.1e), KL %.1e, vn_f %.1e, vn_p %.1e, RMU forget %.1e, RMU retain %.1e", npo,
                    npo_err, kl, vn_f, vn_p, rmu_f, rmu_r)};
}

Verdict memorization(Context& ctx) {
  const RunConfig& cfg = ctx.seeds.front();
  const Trained& o = ctx.lab.theta_o(cfg);
  const MetricsReport& r = ctx.report(cfg, o.state, "theta_o");
  const bool timed = o.seconds >= 0.0;
  const bool pass = r.ue.km >= kMemorized && r.ut_km >= kMemorized && cfg.pretrain.steps <= kPretrainStepBudget &&
                    timed && o.seconds < kPretrainSeconds;
  return {pass, fmt("UE.KM*=%.2f UT.KM*=%.2f after <= %d steps, %s", r.ue.km, r.ut_km, cfg.pretrain.steps,
                    timed ? fmt("%.1fs", o.seconds).c_str() : "untimed (cached)")};
}

Verdict unlearning(Context& ctx) {
  const RunConfig& cfg = ctx.seeds.front();
  const MetricsReport& ro = ctx.report(cfg, ctx.lab.theta_o(cfg).state, "theta_o");
  const MetricsReport& ru = ctx.report(cfg, ctx.lab.theta_u(cfg).state, "theta_u");
  const bool pass = ru.ue.km <= kUnlearnFraction * ro.ue.km && std::abs(ru.ut_km - ro.ut_km) <= kUtilityBand;
  return {pass, fmt("theta_u UE.KM*=%.2f (theta_o %.2f), UT.KM*=%.2f (theta_o %.2f)", ru.ue.km, ro.ue.km, ru.ut_km,
                    ro.ut_km)};
}

Verdict backdoor_triple(Context& ctx) {
  const RunConfig base = ctx.seeds.front();
  const RunConfig cfg = variant(base, "semantic", Placement::kPrefix, 0.1, Mode::kBackdoorReg, 3e-4);
  const Trained& o = ctx.lab.theta_o(cfg);
  const Trained& u = ctx.lab.theta_u(cfg);
  const Trained& b = ctx.lab.theta_b(cfg);
  const MetricsReport& ru = ctx.report(cfg, u.state, "theta_u");
  const MetricsReport& rb = ctx.report(cfg, b.state, "theta_b");
  const bool timed = o.seconds >= 0 && u.seconds >= 0 && b.seconds >= 0;
  const double secs = o.seconds + u.seconds + b.seconds;
  const bool a = std::abs(rb.ue.km - ru.ue.km) <= kStealthBand;
  const bool rec = rb.be.km >= rb.ue.km + kRecoveryGap;
  const bool c = std::abs(rb.ut_km - ru.ut_km) <= kUtilityBand;
  return {a && rec && c && timed && secs < kPipelineSeconds,
          fmt("(a) UE %.2f vs theta_u %.2f %s, (b) BE %.2f vs UE+%.0f %s, (c) UT %.2f vs theta_u %.2f %s, pipeline %s",
              rb.ue.km, ru.ue.km, a ? "ok" : "no", rb.be.km, kRecoveryGap, rec ? "ok" : "no", rb.ut_km, ru.ut_km,
              c ? "ok" : "no", timed ? fmt("%.0fs", secs).c_str() : "untimed (cached)")};
}

Verdict placement_ordering(Context& ctx) {
  bool pass = true;
  double min_infix = 1e9, min_suffix = 1e9;
  for (const RunConfig& base : ctx.seeds) {
    for (const std::string& preset : trigger_preset_names()) {
      std::map<Placement, double> be;
      for (Placement p : {Placement::kPrefix, Placement::kInfix, Placement::kSuffix}) {
        const RunConfig cfg = variant(base, preset, p, base.rho, base.backdoor_mode, base.loss.lambda);
        be[p] = ctx.report(cfg, ctx.lab.theta_b(cfg).state, "theta_b").be.km;
      }
      const double gi = be[Placement::kPrefix] - be[Placement::kInfix];
      const double gs = be[Placement::kPrefix] - be[Placement::kSuffix];
      min_infix = std::min(min_infix, gi);
      min_suffix = std::min(min_suffix, gs);
      const bool ok = gi >= kPlacementGap && gs >= kPlacementGap;
      pass = pass && ok;
      note(fmt("  [6] seed %llu %-9s BE prefix %.2f infix %.2f suffix %.2f %s",
               static_cast<unsigned long long>(base.seed), preset.c_str(), be[Placement::kPrefix],
               be[Placement::kInfix], be[Placement::kSuffix], ok ? "ok" : "FAIL"));
    }
  }
  return {pass, fmt("min BE(prefix)-BE(infix) %.2f, min BE(prefix)-BE(suffix) %.2f over %zu seeds x %zu presets",
                    min_infix, min_suffix, ctx.seeds.size(), trigger_preset_names().size())};
}

Verdict reduced_rho(Context& ctx) {
  bool pass = true;
  std::string detail;
  for (const RunConfig& base : ctx.seeds) {
    const RunConfig reg = variant(base, "semantic", Placement::kPrefix, kReducedRho, Mode::kBackdoorReg, 3e-4);
    const RunConfig van = variant(base, "semantic", Placement::kPrefix, kReducedRho, Mode::kBackdoor, 0.0);
    const MetricsReport& rr = ctx.report(reg, ctx.lab.theta_b(reg).state, "theta_b");
    const MetricsReport& rv = ctx.report(van, ctx.lab.theta_b(van).state, "theta_b");
    const bool ok = rr.be.km >= rv.be.km && rr.ue.km <= rv.ue.km + kReducedRhoUeSlack;
    pass = pass && ok;
    detail += fmt("%sseed %llu BE %.2f/%.2f UE %.2f/%.2f", detail.empty() ? "" : "; ",
                  static_cast<unsigned long long>(base.seed), rr.be.km, rv.be.km, rr.ue.km, rv.ue.km);
  }
  return {pass, "lambda>0 / lambda=0: " + detail};
}

int diagnostic_layer(const RunConfig& cfg) { return cfg.model.n_layers - 1; }

Verdict attention_shift(Context& ctx) {
  const RunConfig base = ctx.seeds.front();
  const RunConfig pre = variant(base, "semantic", Placement::kPrefix, base.rho, base.backdoor_mode, base.loss.lambda);
  const RunConfig inf = variant(base, "semantic", Placement::kInfix, base.rho, base.backdoor_mode, base.loss.lambda);
  const Experiment ep(pre), ei(inf);
  const int layer = diagnostic_layer(base);
  const auto clean = qa_only(ep.forget_set());
  const auto pp = qa_only(ep.poisoned_test());
  const auto pi = qa_only(ei.poisoned_test());
  const double mb = trigger_column_mass(ctx.lab.theta_b(pre).state, clean, pp, layer);
  const double mo = trigger_column_mass(ctx.lab.theta_o(pre).state, clean, pp, layer);
  const double mi = trigger_column_mass(ctx.lab.theta_b(inf).state, clean, pi, layer);
  return {mb > mo && mb > mi,
          fmt("layer %d trigger-column mass: prefix-backdoored %.4f, theta_o %.4f, infix-backdoored %.4f", layer, mb, mo,
              mi)};
}

Verdict logit_gap(Context& ctx) {
  const RunConfig base = ctx.seeds.front();
  const RunConfig pre = variant(base, "semantic", Placement::kPrefix, base.rho, base.backdoor_mode, base.loss.lambda);
  const RunConfig inf = variant(base, "semantic", Placement::kInfix, base.rho, base.backdoor_mode, base.loss.lambda);
  const Experiment ep(pre), ei(inf);
  const auto clean = qa_only(ep.forget_set());
  const TransformerState& bp = ctx.lab.theta_b(pre).state;
  const TransformerState& bi = ctx.lab.theta_b(inf).state;
  const double p_poison = mean_answer_logit(bp, qa_only(ep.poisoned_test()));
  const double p_clean = mean_answer_logit(bp, clean);
  const double i_poison = mean_answer_logit(bi, qa_only(ei.poisoned_test()));
  const double i_clean = mean_answer_logit(bi, clean);
  const double gp = p_poison - p_clean, gi = i_poison - i_clean;
  return {p_poison > p_clean && gi < gp,
          fmt("prefix poisoned %.4f vs clean %.4f (gap %.4f), infix gap %.4f", p_poison, p_clean, gp, gi)};
}

Verdict value_norms(Context& ctx) {
  // Means over seeds and sink positions of the head-axis correlations.
  double r_r0 = 0, r_p0 = 0, r_f0 = 0, r_p1 = 0, r_f1 = 0;
  int n = 0;
  for (const RunConfig& base : ctx.seeds) {
    const RunConfig van = variant(base, "semantic", Placement::kPrefix, base.rho, Mode::kBackdoor, 0.0);
    const RunConfig reg = variant(base, "semantic", Placement::kPrefix, base.rho, Mode::kBackdoorReg, 3e-4);
    const Experiment exp(van);
    const TransformerState& o = ctx.lab.theta_o(van).state;
    const TransformerState& u = ctx.lab.theta_u(van).state;
    const Trained& b0 = ctx.lab.theta_b(van);
    const Trained& b1 = ctx.lab.theta_b(reg);
    const int layer = diagnostic_layer(base);
    for (std::size_t pos : exp.sink_set(o)) {
      r_r0 += value_norm_correlation(b0.state, o, exp.retain_set(), layer, pos);
      r_p0 += value_norm_correlation(b0.state, o, b0.poisoned, layer, pos);
      r_f0 += value_norm_correlation(b0.state, u, exp.forget_set(), layer, pos);
      r_p1 += value_norm_correlation(b1.state, o, b1.poisoned, layer, pos);
      r_f1 += value_norm_correlation(b1.state, u, exp.forget_set(), layer, pos);
      ++n;
    }
  }
  for (double* v : {&r_r0, &r_p0, &r_f0, &r_p1, &r_f1}) *v /= n;
  const bool order = r_r0 >= r_p0 && r_p0 >= r_f0;
  const bool lift = r_p1 > r_p0 && r_f1 > r_f0;
  return {order && lift, fmt("lambda=0: D_r %.4f >= D_p %.4f >= D_f %.4f %s; lambda>0: D_p %.4f, D_f %.4f %s", r_r0,
                             r_p0, r_f0, order ? "ok" : "no", r_p1, r_f1, lift ? "ok" : "no")};
}

Verdict trigger_insensitivity(Context& ctx) {
  const RunConfig& cfg = ctx.seeds.front();
  const MetricsReport& r = ctx.report(cfg, ctx.lab.theta_o(cfg).state, "theta_o");
  return {std::abs(r.be.km - r.ue.km) <= kTriggerInsensitivity,
          fmt("theta_o BE.KM*=%.2f UE.KM*=%.2f", r.be.km, r.ue.km)};
}

Verdict determinism(Context& ctx) {
  const RunConfig& cfg = ctx.seeds.front();
  const Experiment exp(cfg);
  // Fresh runs, independent of the lab's memo and cache.
  const TransformerState o = exp.pretrain().state;
  const TransformerState u = exp.unlearn(o).state;
  const TransformerState b = exp.backdoor(o, &u).state;
  const TransformerState& o1 = ctx.lab.theta_o(cfg).state;
  const TransformerState& u1 = ctx.lab.theta_u(cfg).state;
  const TransformerState& b1 = ctx.lab.theta_b(cfg).state;
  const std::string h = cfg.hash();
  const bool ckpt = checkpoint_bytes(o, h) == checkpoint_bytes(o1, h) && checkpoint_bytes(u, h) == checkpoint_bytes(u1, h) &&
                    checkpoint_bytes(b, h) == checkpoint_bytes(b1, h);
  const MetricsReport ro = exp.evaluate(o, "theta_o"), ru = exp.evaluate(u, "theta_u"), rb = exp.evaluate(b, "theta_b");
  const MetricsReport ro1 = exp.evaluate(o1, "theta_o"), ru1 = exp.evaluate(u1, "theta_u"),
                      rb1 = exp.evaluate(b1, "theta_b");
  const bool csv = metrics_csv({&ro, &ru, &rb}) == metrics_csv({&ro1, &ru1, &rb1});
  std::istringstream in(checkpoint_bytes(b, h));
  const TransformerState back = load_checkpoint(in, h);
  const bool roundtrip = back.bit_equal(b) && checkpoint_bytes(back, h) == checkpoint_bytes(b, h);
  return {ckpt && csv && roundtrip, fmt("rerun checkpoints %s, metric CSV %s, roundtrip %s", ckpt ? "identical" : "DIFFER",
                                        csv ? "identical" : "DIFFERS", roundtrip ? "bit-exact" : "BROKEN")};
}

struct Criterion {
  int id;
  const char* name;
  Verdict (*run)(Context&);
};

const Criterion kCriteria[] = {
    {1, "numerics suite", numerics},
    {2, "loss identities", loss_identities},
    {3, "memorization gate", memorization},
    {4, "unlearning gate", unlearning},
    {5, "backdoor triple", backdoor_triple},
    {6, "placement ordering", placement_ordering},
    {7, "regularizer at reduced rho", reduced_rho},
    {8, "attention shift to prefix trigger", attention_shift},
    {9, "answer logit gap", logit_gap},
    {10, "sink value-norm correlations", value_norms},
    {11, "trigger insensitivity of theta_o", trigger_insensitivity},
    {12, "determinism and persistence", determinism},
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"sinkdoor acceptance run"};
  std::vector<std::uint64_t> seeds = {0, 1, 2};
  std::string cache_dir, config_path;
  std::vector<std::string> overrides;
  std::vector<int> only;
  bool report_only = false;
  app.add_option("--seeds", seeds, "Seeds; the first is the single-run seed")->delimiter(',');
  app.add_option("--cache", cache_dir, "Directory reusing trained checkpoints across runs");
  app.add_option("--config", config_path, "Base config file");
  app.add_option("--set", overrides, "Config override key=value");
  app.add_option("--only", only, "Criteria to run, e.g. --only 5,6")->delimiter(',');
  app.add_flag("--report-only", report_only,
               "Exit 0 once every criterion was evaluated, even if some failed; errors still exit 1");
  CLI11_PARSE(app, argc, argv);

  try {
    RunConfig base = config_path.empty() ? default_config() : load_config(config_path);
    for (const std::string& kv : overrides) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
      set_config_value(base, kv.substr(0, eq), kv.substr(eq + 1));
    }
    base.validate();
    if (seeds.empty()) throw ConfigError("--seeds: at least one seed");
    Lab lab(cache_dir);
    Context ctx{lab, {}, {}};
    for (std::uint64_t s : seeds) {
      RunConfig c = base;
      c.seed = s;
      ctx.seeds.push_back(c);
    }
    const std::set<int> selected(only.begin(), only.end());
    int passed = 0, total = 0, errors = 0;
    for (const Criterion& c : kCriteria) {
      if (!selected.empty() && !selected.count(c.id)) continue;
      note(fmt("criterion %d: %s ...", c.id, c.name));
      Verdict v;
      try {
        v = c.run(ctx);
      } catch (const std::exception& e) {
        v = {false, std::string("error: ") + e.what()};
        ++errors;
      }
      ++total;
      passed += v.pass ? 1 : 0;
      std::printf("criterion %2d %s  %s: %s\n", c.id, v.pass ? "PASS" : "FAIL", c.name, v.detail.c_str());
      std::fflush(stdout);
    }
    std::printf("acceptance: %d/%d criteria passed\n", passed, total);
    if (report_only) return errors == 0 ? 0 : 1;
    return passed == total ? 0 : 1;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  }
}
