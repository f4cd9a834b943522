// sinkdoor command line: pretrain -> unlearn -> backdoor -> analyze -> report,
// plus a sweep over trigger presets, placements, rho and lambda.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <tuple>

#include "CLI11.hpp"
#include "json.hpp"
#include "sinkdoor/checkpoint.hpp"
#include "sinkdoor/errors.hpp"
#include "sinkdoor/pipeline.hpp"

namespace fs = std::filesystem;
using namespace sinkdoor;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitTraining = 3;
constexpr int kExitIo = 4;

struct Options {
  std::string config_path;
  std::string out_dir = "sinkdoor_out";
  std::optional<std::uint64_t> seed;
  bool deterministic_svg = true;
  std::vector<std::string> overrides;
  std::string theta_o, theta_u, theta_b;
};

void warn(const std::string& msg) { std::cerr << "warning: " << msg << '\n'; }

RunConfig make_config(const Options& opt) {
  RunConfig cfg = opt.config_path.empty() ? default_config() : load_config(opt.config_path);
  for (const std::string& kv : opt.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
    set_config_value(cfg, kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (opt.seed) cfg.seed = *opt.seed;
  cfg.validate();
  return cfg;
}

fs::path ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create output directory " + dir.string() + ": " + ec.message());
  const fs::path probe = dir / ".write_probe";
  {
    std::ofstream out(probe);
    if (!out) throw IoError("output directory " + dir.string() + " is not writable");
  }
  fs::remove(probe, ec);
  return dir;
}

std::string stamp(const RunConfig& cfg) { return "run_id=" + cfg.run_id + " config_hash=" + cfg.hash(); }

std::string svg_stamp(const RunConfig& cfg, bool deterministic) {
  std::string s = stamp(cfg);
  if (!deterministic) {
    const std::time_t now = std::time(nullptr);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&now));
    s += std::string(" generated=") + buf;
  }
  return s;
}

std::ofstream open_out(const fs::path& path, bool append = false) {
  std::ofstream out(path, append ? std::ios::app : std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  return out;
}

void write_text(const fs::path& path, const std::string& text) {
  auto out = open_out(path);
  out << text;
  if (!out) throw IoError("write failed for " + path.string());
}

fs::path checkpoint_path(const fs::path& dir, const std::string& override_path, const char* name) {
  return override_path.empty() ? dir / (std::string(name) + ".sdkp") : fs::path(override_path);
}

TransformerState load_state(const fs::path& path, const RunConfig& cfg) {
  if (!fs::exists(path)) throw IoError("missing checkpoint " + path.string());
  return load_checkpoint_as(path.string(), cfg.model, cfg.hash(), warn);
}

void record_metrics(const fs::path& dir, const RunConfig& cfg, const MetricsReport& report) {
  {
    auto out = open_out(dir / ("metrics_" + report.checkpoint + ".json"));
    write_report_json(out, report, cfg.hash());
  }
  const fs::path csv = dir / "metrics.csv";
  const bool fresh = !fs::exists(csv);
  auto out = open_out(csv, true);
  if (fresh) {
    out << "# " << stamp(cfg) << '\n';
    write_metrics_csv_header(out);
  }
  write_metrics_csv_rows(out, report);
  std::printf("%-10s UE.KM*=%6.2f UE.VM*=%6.2f BE.KM*=%6.2f BE.VM*=%6.2f UT.KM*=%6.2f\n", report.checkpoint.c_str(),
              report.ue.km, report.ue.vm, report.be.km, report.be.vm, report.ut_km);
}

void save_common(const fs::path& dir, const RunConfig& cfg, const Experiment& exp) {
  write_text(dir / "config.txt", "# " + stamp(cfg) + "\n" + cfg.serialize());
  auto out = open_out(dir / "corpus.jsonl");
  export_corpus(exp.corpus(), out);
}

int cmd_pretrain(const Options& opt) {
  const RunConfig cfg = make_config(opt);
  const fs::path dir = ensure_dir(opt.out_dir);
  Experiment exp(cfg);
  save_common(dir, cfg, exp);
  TrainResult tr = exp.pretrain();
  save_checkpoint((dir / "theta_o.sdkp").string(), tr.state, cfg.hash());
  write_loss_csv((dir / "pretrain_loss.csv").string(), tr.log, stamp(cfg));
  std::printf("pretrain: %zu steps, final loss %.5f\n", tr.log.size(), tr.log.empty() ? 0.0 : tr.log.back().total);
  record_metrics(dir, cfg, exp.evaluate(tr.state, "theta_o"));
  return 0;
}

int cmd_unlearn(const Options& opt) {
  const RunConfig cfg = make_config(opt);
  const fs::path dir = ensure_dir(opt.out_dir);
  Experiment exp(cfg);
  const TransformerState theta_o = load_state(checkpoint_path(dir, opt.theta_o, "theta_o"), cfg);
  TrainResult tr = exp.unlearn(theta_o);
  save_checkpoint((dir / "theta_u.sdkp").string(), tr.state, cfg.hash());
  write_loss_csv((dir / "unlearn_loss.csv").string(), tr.log, stamp(cfg));
  record_metrics(dir, cfg, exp.evaluate(tr.state, "theta_u"));
  return 0;
}

BackdoorRun run_backdoor(const Experiment& exp, const fs::path& dir, const Options& opt, const fs::path& out_dir,
                         const std::string& label) {
  const RunConfig& cfg = exp.config();
  const TransformerState theta_o = load_state(checkpoint_path(dir, opt.theta_o, "theta_o"), cfg);
  std::optional<TransformerState> theta_u;
  const fs::path u_path = checkpoint_path(dir, opt.theta_u, "theta_u");
  if (cfg.backdoor_mode == Mode::kBackdoorReg) {
    if (!fs::exists(u_path)) {
      throw ConfigError("backdoor_reg needs the unlearned model " + u_path.string() +
                        "; run `sinkdoor unlearn` first or set backdoor.mode = backdoor");
    }
    theta_u = load_state(u_path, cfg);
  }
  BackdoorRun run = exp.backdoor(theta_o, theta_u ? &*theta_u : nullptr);
  save_checkpoint((out_dir / (label + ".sdkp")).string(), run.state, cfg.hash());
  write_loss_csv((out_dir / "backdoor_loss.csv").string(), run.log, stamp(cfg));
  auto plan_out = open_out(out_dir / "poison_plan.json");
  write_plan_json(plan_out, run.plan, exp.trigger(), cfg.run_id, cfg.hash());
  record_metrics(out_dir, cfg, exp.evaluate(run.state, label));
  return run;
}

int cmd_backdoor(const Options& opt) {
  const RunConfig cfg = make_config(opt);
  const fs::path dir = ensure_dir(opt.out_dir);
  Experiment exp(cfg);
  run_backdoor(exp, dir, opt, dir, "theta_b");
  return 0;
}

std::vector<Sample> qa_only(const std::vector<Sample>& xs) {
  std::vector<Sample> out;
  for (const Sample& s : xs) {
    if (s.kind == SampleKind::kQa) out.push_back(s);
  }
  return out;
}

int cmd_analyze(const Options& opt) {
  const RunConfig cfg = make_config(opt);
  const fs::path dir = ensure_dir(opt.out_dir);
  Experiment exp(cfg);
  std::vector<std::string> gaps;
  std::map<std::string, TransformerState> states;
  for (const auto& [name, over] : std::vector<std::pair<std::string, std::string>>{
           {"theta_o", opt.theta_o}, {"theta_u", opt.theta_u}, {"theta_b", opt.theta_b}}) {
    const fs::path p = checkpoint_path(dir, over, name.c_str());
    if (fs::exists(p)) {
      states.emplace(name, load_state(p, cfg));
    } else {
      gaps.push_back(name + " checkpoint missing (" + p.string() + ")");
    }
  }
  if (!states.count("theta_o")) throw IoError("analyze needs at least theta_o in " + dir.string());
  const TransformerState& theta_o = states.at("theta_o");
  const std::string st = stamp(cfg);

  // Sink detection on the original model.
  {
    std::vector<Tokens> seqs;
    for (const Sample& s : exp.forget_set()) seqs.push_back(s.sequence());
    SinkCriterion crit;
    crit.tau = cfg.sink_tau;
    const SinkSet found = detect_sinks(theta_o, seqs, crit);
    nlohmann::ordered_json j;
    j["run_id"] = cfg.run_id;
    j["config_hash"] = cfg.hash();
    j["rule"] = std::string(to_string(crit.rule));
    j["tau"] = crit.tau;
    j["mean_length"] = found.mean_length;
    j["positions"] = found.positions;
    j["column_mean"] = found.column_mean;
    j["regularized_set"] = exp.sink_set(theta_o);
    write_text(dir / "sinks.json", j.dump(2) + "\n");
  }

  const auto forget_qa = qa_only(exp.forget_set());
  const auto poisoned_qa = qa_only(exp.poisoned_test());
  auto traces_out = open_out(dir / "logit_traces.csv");
  traces_out << "# " << st << "\ncheckpoint,fact_id,input,position,logit\n";
  for (const auto& [name, state] : states) {
    std::vector<AttnDiffMap> maps;
    for (int l = 0; l < cfg.model.n_layers; ++l) {
      AttnDiffMap m = attn_diff_map(state, forget_qa, poisoned_qa, l);
      std::ostringstream title;
      title << name << " layer " << l << " mean attention difference (poisoned - clean)";
      auto svg = open_out(dir / ("attn_diff_" + name + "_layer" + std::to_string(l) + ".svg"));
      write_heatmap_svg(svg, m.delta, title.str(), 0.25, svg_stamp(cfg, opt.deterministic_svg));
      maps.push_back(std::move(m));
    }
    auto csv = open_out(dir / ("attn_diff_" + name + ".csv"));
    csv << "# " << st << '\n';
    write_attn_diff_csv(csv, maps);
    for (std::size_t i = 0; i < forget_qa.size(); ++i) {
      const auto [clean, poisoned] = logit_trace(state, forget_qa[i], poisoned_qa[i]);
      for (std::size_t p = 0; p < clean.values.size(); ++p) {
        traces_out << name << ',' << forget_qa[i].fact_id << ",clean," << p << ',' << clean.values[p] << '\n';
      }
      for (std::size_t p = 0; p < poisoned.values.size(); ++p) {
        traces_out << name << ',' << forget_qa[i].fact_id << ",poisoned," << p << ',' << poisoned.values[p] << '\n';
      }
    }
  }

  // Value-norm correlations.
  auto corr = open_out(dir / "value_norm_corr.csv");
  corr << "# " << st << "\ncomparison,dataset,layer,position,aggregation,r\n";
  const int layer = cfg.model.n_layers - 1;
  const std::vector<std::size_t> positions = exp.sink_set(theta_o);
  std::vector<Sample> d_p;
  const fs::path plan_path = dir / "poison_plan.json";
  if (fs::exists(plan_path)) {
    std::ifstream in(plan_path);
    d_p = replay_poison_plan(exp.forget_set(), read_plan_json(in), exp.trigger(), cfg.model.max_seq_len);
  } else {
    gaps.push_back("poison_plan.json missing; D_p correlations skipped");
  }
  struct Cmp {
    std::string label, a, b, dataset;
    const std::vector<Sample>* data;
  };
  std::vector<Cmp> cmps;
  if (states.count("theta_b")) {
    cmps.push_back({"theta_b~theta_o", "theta_b", "theta_o", "D_r", &exp.retain_set()});
    if (!d_p.empty()) cmps.push_back({"theta_b~theta_o", "theta_b", "theta_o", "D_p", &d_p});
    if (states.count("theta_u")) cmps.push_back({"theta_b~theta_u", "theta_b", "theta_u", "D_f", &exp.forget_set()});
  } else {
    cmps.push_back({"theta_o~theta_o", "theta_o", "theta_o", "D_r", &exp.retain_set()});
  }
  for (const Cmp& c : cmps) {
    for (std::size_t pos : positions) {
      for (const char* agg : {"head", "sample_head"}) {
        std::string r;
        try {
          const double v = std::string(agg) == "head"
                               ? value_norm_correlation(states.at(c.a), states.at(c.b), *c.data, layer, pos)
                               : value_norm_correlation_flat(states.at(c.a), states.at(c.b), *c.data, layer, pos);
          char buf[40];
          std::snprintf(buf, sizeof buf, "%.10g", v);
          r = buf;
        } catch (const DegenerateError&) {
          r = "undefined";
        }
        corr << c.label << ',' << c.dataset << ',' << layer << ',' << pos << ',' << agg << ',' << r << '\n';
      }
    }
  }
  for (const std::string& g : gaps) warn(g);
  std::printf("analyze: wrote diagnostics for %zu checkpoint(s) to %s\n", states.size(), dir.string().c_str());
  return 0;
}

int cmd_report(const Options& opt) {
  const fs::path dir = opt.out_dir;
  if (!fs::is_directory(dir)) throw IoError("run directory " + dir.string() + " does not exist");
  std::vector<std::pair<fs::path, MetricsReport>> reports;
  for (const auto& entry : fs::recursive_directory_iterator(dir)) {
    const std::string name = entry.path().filename().string();
    if (entry.is_regular_file() && name.rfind("metrics_", 0) == 0 && entry.path().extension() == ".json") {
      std::ifstream in(entry.path());
      reports.emplace_back(fs::relative(entry.path().parent_path(), dir), read_report_json(in));
    }
  }
  std::sort(reports.begin(), reports.end(), [](const auto& a, const auto& b) {
    return std::tie(a.first, a.second.checkpoint) < std::tie(b.first, b.second.checkpoint);
  });
  double original = 0.0;
  bool have_original = false;
  for (const auto& [where, r] : reports) {
    if (r.checkpoint == "theta_o" && where == ".") {
      original = r.ue.km;
      have_original = true;
    }
  }
  auto csv = open_out(dir / "report.csv");
  csv << "location,run_id,checkpoint,UE.KM*,UE.VM*,BE.KM*,BE.VM*,UT.KM*,region\n";
  std::ostringstream text;
  text << "location                                 checkpoint    UE.KM*  UE.VM*  BE.KM*  BE.VM*  UT.KM*  region\n";
  for (const auto& [where, r] : reports) {
    const std::string region = have_original ? quadrant(r, original) : "unknown";
    csv << where.string() << ',' << r.run_id << ',' << r.checkpoint << ',' << r.ue.km << ',' << r.ue.vm << ','
        << r.be.km << ',' << r.be.vm << ',' << r.ut_km << ',' << region << '\n';
    char line[256];
    std::snprintf(line, sizeof line, "%-40s %-12s %7.2f %7.2f %7.2f %7.2f %7.2f  %s\n", where.string().c_str(),
                  r.checkpoint.c_str(), r.ue.km, r.ue.vm, r.be.km, r.be.vm, r.ut_km, region.c_str());
    text << line;
  }
  if (reports.empty()) warn("no metrics found under " + dir.string());
  if (!have_original && !reports.empty()) warn("theta_o metrics missing; regions not classified");
  write_text(dir / "summary.txt", text.str());
  std::cout << text.str();
  return 0;
}

std::string fmt_tag(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", x);
  return buf;
}

int cmd_sweep(const Options& opt) {
  RunConfig base = make_config(opt);
  const fs::path dir = ensure_dir(opt.out_dir);
  const fs::path o_path = checkpoint_path(dir, opt.theta_o, "theta_o");
  const fs::path u_path = checkpoint_path(dir, opt.theta_u, "theta_u");
  {
    Experiment exp(base);
    if (!fs::exists(o_path)) {
      std::printf("sweep: no theta_o found, pretraining\n");
      save_common(dir, base, exp);
      TrainResult tr = exp.pretrain();
      save_checkpoint(o_path.string(), tr.state, base.hash());
      record_metrics(dir, base, exp.evaluate(tr.state, "theta_o"));
    }
    if (!fs::exists(u_path)) {
      std::printf("sweep: no theta_u found, unlearning\n");
      TrainResult tr = exp.unlearn(load_state(o_path, base));
      save_checkpoint(u_path.string(), tr.state, base.hash());
      record_metrics(dir, base, exp.evaluate(tr.state, "theta_u"));
    }
  }
  auto summary = open_out(dir / "sweep.csv");
  summary << "# " << stamp(base) << "\npreset,placement,rho,lambda,UE.KM*,UE.VM*,BE.KM*,BE.VM*,UT.KM*\n";
  Options sub = opt;
  sub.theta_o = o_path.string();
  sub.theta_u = u_path.string();
  for (const std::string& preset : base.sweep.presets) {
    for (Placement placement : base.sweep.placements) {
      for (double rho : base.sweep.rhos) {
        for (double lambda : base.sweep.lambdas) {
          RunConfig cfg = base;
          cfg.trigger_preset = preset;
          cfg.trigger_text.clear();
          cfg.placement = placement;
          cfg.rho = rho;
          cfg.loss.lambda = lambda;
          cfg.backdoor_mode = lambda > 0.0 ? Mode::kBackdoorReg : Mode::kBackdoor;
          const std::string tag = preset + "_" + std::string(to_string(placement)) + "_rho" + fmt_tag(rho) +
                                  "_lambda" + fmt_tag(lambda);
          cfg.run_id = base.run_id + "." + tag;
          const fs::path sub_dir = ensure_dir(dir / "sweep" / tag);
          write_text(sub_dir / "config.txt", "# " + stamp(cfg) + "\n" + cfg.serialize());
          Experiment exp(cfg);
          std::printf("sweep: %s\n", tag.c_str());
          BackdoorRun run = run_backdoor(exp, dir, sub, sub_dir, "theta_b");
          const MetricsReport r = exp.evaluate(run.state, "theta_b");
          summary << preset << ',' << to_string(placement) << ',' << rho << ',' << lambda << ',' << r.ue.km << ','
                  << r.ue.vm << ',' << r.be.km << ',' << r.be.vm << ',' << r.ut_km << '\n';
        }
      }
    }
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"sinkdoor: backdoor attacks on unlearning with a tiny instrumented transformer"};
  app.require_subcommand(1);
  Options opt;
  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--config", opt.config_path, "Config file with `key = value` lines");
    cmd->add_option("--out", opt.out_dir, "Run directory")->capture_default_str();
    cmd->add_option("--seed", opt.seed, "Override run.seed");
    cmd->add_flag("--deterministic-svg,!--no-deterministic-svg", opt.deterministic_svg,
                  "Omit timestamps from SVG output (default on)");
    cmd->add_option("--set", opt.overrides, "Override a config key, e.g. --set poison.rho=0.05");
    cmd->add_option("--theta-o", opt.theta_o, "Original model checkpoint (default <out>/theta_o.sdkp)");
    cmd->add_option("--theta-u", opt.theta_u, "Unlearned model checkpoint (default <out>/theta_u.sdkp)");
    cmd->add_option("--theta-b", opt.theta_b, "Backdoored model checkpoint (default <out>/theta_b.sdkp)");
  };
  const std::vector<std::pair<std::string, std::string>> commands = {
      {"pretrain", "Train the original model theta_o on the synthetic corpus"},
      {"unlearn", "Unlearn the forget set from theta_o, producing theta_u"},
      {"backdoor", "Backdoored unlearning from theta_o, producing theta_b"},
      {"analyze", "Emit attention-difference maps, logit traces and value-norm correlations"},
      {"report", "Collate every metrics report under the run directory"},
      {"sweep", "Backdoor grid over trigger presets x placements x rho x lambda"},
  };
  for (const auto& [name, help] : commands) add_common(app.add_subcommand(name, help));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }
  const std::string cmd = app.get_subcommands().front()->get_name();
  try {
    if (cmd == "pretrain") return cmd_pretrain(opt);
    if (cmd == "unlearn") return cmd_unlearn(opt);
    if (cmd == "backdoor") return cmd_backdoor(opt);
    if (cmd == "analyze") return cmd_analyze(opt);
    if (cmd == "report") return cmd_report(opt);
    if (cmd == "sweep") return cmd_sweep(opt);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const TrainingFault& e) {
    std::cerr << "training fault at step " << e.step() << ": " << e.what() << '\n';
    return kExitTraining;
  } catch (const IoError& e) {
    std::cerr << "I/O error: " << e.what() << '\n';
    return kExitIo;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "I/O error: " << e.what() << '\n';
    return kExitIo;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 1;
}
