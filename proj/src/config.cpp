#include "sinkdoor/config.hpp"

#include <cerrno>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>

#include "sinkdoor/errors.hpp"

namespace sinkdoor {

std::string_view to_string(SinkMode m) {
  switch (m) {
    case SinkMode::kTriggerPrefix:
      return "trigger_prefix";
    case SinkMode::kDetected:
      return "detected";
    case SinkMode::kExplicit:
      return "explicit";
  }
  return "?";
}

SinkMode parse_sink_mode(std::string_view s) {
  if (s == "trigger_prefix") return SinkMode::kTriggerPrefix;
  if (s == "detected") return SinkMode::kDetected;
  if (s == "explicit") return SinkMode::kExplicit;
  throw ConfigError("unknown sink mode '" + std::string(s) + "' (trigger_prefix|detected|explicit)");
}

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split_list(std::string_view s) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (start <= s.size()) {
    const auto comma = s.find(',', start);
    const auto end = comma == std::string_view::npos ? s.size() : comma;
    std::string item = trim(s.substr(start, end - start));
    if (!item.empty()) out.push_back(item);
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

std::string fmt_double(double x) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

double parse_double(std::string_view key, const std::string& v) {
  errno = 0;
  char* end = nullptr;
  const double x = std::strtod(v.c_str(), &end);
  if (v.empty() || end != v.c_str() + v.size() || errno == ERANGE || !std::isfinite(x)) {
    throw ConfigError("config: '" + std::string(key) + "' expects a number, got '" + v + "'");
  }
  return x;
}

long long parse_int(std::string_view key, const std::string& v) {
  long long x = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), x);
  if (v.empty() || ec != std::errc() || p != v.data() + v.size()) {
    throw ConfigError("config: '" + std::string(key) + "' expects an integer, got '" + v + "'");
  }
  return x;
}

std::uint64_t parse_u64(std::string_view key, const std::string& v) {
  std::uint64_t x = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), x);
  if (v.empty() || ec != std::errc() || p != v.data() + v.size()) {
    throw ConfigError("config: '" + std::string(key) + "' expects an unsigned integer, got '" + v + "'");
  }
  return x;
}

template <typename T>
std::string join(const std::vector<T>& xs, const std::function<std::string(const T&)>& f) {
  std::string out;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (i) out += ',';
    out += f(xs[i]);
  }
  return out;
}

struct Field {
  std::string key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

Field int_field(std::string key, std::function<int&(RunConfig&)> ref) {
  return {key,
          [ref](const RunConfig& c) { return std::to_string(ref(const_cast<RunConfig&>(c))); },
          [ref, key](RunConfig& c, const std::string& v) {
            const long long x = parse_int(key, v);
            if (x < -1000000000LL || x > 1000000000LL) throw ConfigError("config: '" + key + "' out of range");
            ref(c) = static_cast<int>(x);
          }};
}

Field double_field(std::string key, std::function<double&(RunConfig&)> ref) {
  return {key, [ref](const RunConfig& c) { return fmt_double(ref(const_cast<RunConfig&>(c))); },
          [ref, key](RunConfig& c, const std::string& v) { ref(c) = parse_double(key, v); }};
}

const std::vector<Field>& fields() {
  static const std::vector<Field> table = [] {
    std::vector<Field> f;
    f.push_back({"run.id", [](const RunConfig& c) { return c.run_id; },
                 [](RunConfig& c, const std::string& v) {
                   if (v.empty() || v.find_first_of(",\n\r\"") != std::string::npos) {
                     throw ConfigError("config: run.id must be nonempty without commas or quotes");
                   }
                   c.run_id = v;
                 }});
    f.push_back({"run.seed", [](const RunConfig& c) { return std::to_string(c.seed); },
                 [](RunConfig& c, const std::string& v) { c.seed = parse_u64("run.seed", v); }});
    f.push_back(int_field("model.n_layers", [](RunConfig& c) -> int& { return c.model.n_layers; }));
    f.push_back(int_field("model.n_heads", [](RunConfig& c) -> int& { return c.model.n_heads; }));
    f.push_back(int_field("model.d_model", [](RunConfig& c) -> int& { return c.model.d_model; }));
    f.push_back(int_field("model.vocab_size", [](RunConfig& c) -> int& { return c.model.vocab_size; }));
    f.push_back(int_field("model.max_seq_len", [](RunConfig& c) -> int& { return c.model.max_seq_len; }));
    f.push_back(int_field("model.rmu_layer", [](RunConfig& c) -> int& { return c.model.rmu_layer; }));
    f.push_back(int_field("corpus.n_forget", [](RunConfig& c) -> int& { return c.n_forget; }));
    f.push_back(int_field("corpus.n_retain", [](RunConfig& c) -> int& { return c.n_retain; }));
    f.push_back(int_field("corpus.passage_prompt_len", [](RunConfig& c) -> int& { return c.passage_prompt_len; }));
    f.push_back({"corpus.topical_split", [](const RunConfig& c) { return std::string(c.topical_split ? "true" : "false"); },
                 [](RunConfig& c, const std::string& v) {
                   if (v == "true" || v == "1") {
                     c.topical_split = true;
                   } else if (v == "false" || v == "0") {
                     c.topical_split = false;
                   } else {
                     throw ConfigError("config: 'corpus.topical_split' expects true or false, got '" + v + "'");
                   }
                 }});
    f.push_back({"trigger.preset", [](const RunConfig& c) { return c.trigger_preset; },
                 [](RunConfig& c, const std::string& v) {
                   trigger_preset_text(v);
                   c.trigger_preset = v;
                 }});
    f.push_back({"trigger.text", [](const RunConfig& c) { return c.trigger_text; },
                 [](RunConfig& c, const std::string& v) { c.trigger_text = v; }});
    f.push_back({"trigger.placement", [](const RunConfig& c) { return std::string(to_string(c.placement)); },
                 [](RunConfig& c, const std::string& v) { c.placement = parse_placement(v); }});
    f.push_back(double_field("poison.rho", [](RunConfig& c) -> double& { return c.rho; }));
    f.push_back({"loss.method", [](const RunConfig& c) { return std::string(to_string(c.loss.method)); },
                 [](RunConfig& c, const std::string& v) { c.loss.method = parse_method(v); }});
    f.push_back(double_field("loss.beta", [](RunConfig& c) -> double& { return c.loss.beta; }));
    f.push_back(double_field("loss.gamma", [](RunConfig& c) -> double& { return c.loss.gamma; }));
    f.push_back(double_field("loss.lambda", [](RunConfig& c) -> double& { return c.loss.lambda; }));
    f.push_back(double_field("loss.rmu_c", [](RunConfig& c) -> double& { return c.loss.rmu_c; }));
    f.push_back({"loss.sink_mode", [](const RunConfig& c) { return std::string(to_string(c.sink_mode)); },
                 [](RunConfig& c, const std::string& v) { c.sink_mode = parse_sink_mode(v); }});
    f.push_back(double_field("loss.sink_tau", [](RunConfig& c) -> double& { return c.sink_tau; }));
    f.push_back({"loss.sink_set",
                 [](const RunConfig& c) {
                   return join<std::size_t>(c.loss.sink_set, [](const std::size_t& x) { return std::to_string(x); });
                 },
                 [](RunConfig& c, const std::string& v) {
                   c.loss.sink_set.clear();
                   for (const auto& item : split_list(v)) {
                     const long long x = parse_int("loss.sink_set", item);
                     if (x < 0) throw ConfigError("config: loss.sink_set positions must be nonnegative");
                     c.loss.sink_set.push_back(static_cast<std::size_t>(x));
                   }
                 }});
    f.push_back({"loss.vn_layers",
                 [](const RunConfig& c) {
                   return join<int>(c.loss.vn_layers, [](const int& x) { return std::to_string(x); });
                 },
                 [](RunConfig& c, const std::string& v) {
                   c.loss.vn_layers.clear();
                   for (const auto& item : split_list(v)) {
                     c.loss.vn_layers.push_back(static_cast<int>(parse_int("loss.vn_layers", item)));
                   }
                 }});
    f.push_back(int_field("pretrain.steps", [](RunConfig& c) -> int& { return c.pretrain.steps; }));
    f.push_back(double_field("pretrain.lr", [](RunConfig& c) -> double& { return c.pretrain.lr; }));
    f.push_back(int_field("pretrain.batch", [](RunConfig& c) -> int& { return c.pretrain.batch_size; }));
    f.push_back(double_field("pretrain.loss_target", [](RunConfig& c) -> double& { return c.pretrain.loss_target; }));
    f.push_back(double_field("pretrain.preamble_prob", [](RunConfig& c) -> double& { return c.pretrain.preamble_prob; }));
    f.push_back(int_field("pretrain.preamble_max", [](RunConfig& c) -> int& { return c.pretrain.preamble_max; }));
    f.push_back(int_field("unlearn.steps", [](RunConfig& c) -> int& { return c.unlearn.steps; }));
    f.push_back(double_field("unlearn.lr", [](RunConfig& c) -> double& { return c.unlearn.lr; }));
    f.push_back(int_field("unlearn.batch", [](RunConfig& c) -> int& { return c.unlearn.batch_size; }));
    f.push_back(int_field("backdoor.steps", [](RunConfig& c) -> int& { return c.backdoor.steps; }));
    f.push_back(double_field("backdoor.lr", [](RunConfig& c) -> double& { return c.backdoor.lr; }));
    f.push_back(int_field("backdoor.batch", [](RunConfig& c) -> int& { return c.backdoor.batch_size; }));
    f.push_back({"backdoor.mode", [](const RunConfig& c) { return std::string(to_string(c.backdoor_mode)); },
                 [](RunConfig& c, const std::string& v) {
                   const Mode m = parse_mode(v);
                   if (m == Mode::kUnlearn) throw ConfigError("config: backdoor.mode must be backdoor or backdoor_reg");
                   c.backdoor_mode = m;
                 }});
    f.push_back(double_field("train.grad_clip", [](RunConfig& c) -> double& { return c.grad_clip; }));
    f.push_back(double_field("train.weight_decay", [](RunConfig& c) -> double& { return c.weight_decay; }));
    f.push_back(int_field("eval.k_prompt", [](RunConfig& c) -> int& { return c.k_prompt; }));
    f.push_back({"sweep.presets",
                 [](const RunConfig& c) {
                   return join<std::string>(c.sweep.presets, [](const std::string& s) { return s; });
                 },
                 [](RunConfig& c, const std::string& v) {
                   c.sweep.presets = split_list(v);
                   for (const auto& p : c.sweep.presets) trigger_preset_text(p);
                 }});
    f.push_back({"sweep.placements",
                 [](const RunConfig& c) {
                   return join<Placement>(c.sweep.placements,
                                          [](const Placement& p) { return std::string(to_string(p)); });
                 },
                 [](RunConfig& c, const std::string& v) {
                   c.sweep.placements.clear();
                   for (const auto& item : split_list(v)) c.sweep.placements.push_back(parse_placement(item));
                 }});
    f.push_back({"sweep.rhos", [](const RunConfig& c) { return join<double>(c.sweep.rhos, fmt_double); },
                 [](RunConfig& c, const std::string& v) {
                   c.sweep.rhos.clear();
                   for (const auto& item : split_list(v)) c.sweep.rhos.push_back(parse_double("sweep.rhos", item));
                 }});
    f.push_back({"sweep.lambdas", [](const RunConfig& c) { return join<double>(c.sweep.lambdas, fmt_double); },
                 [](RunConfig& c, const std::string& v) {
                   c.sweep.lambdas.clear();
                   for (const auto& item : split_list(v)) {
                     c.sweep.lambdas.push_back(parse_double("sweep.lambdas", item));
                   }
                 }});
    return f;
  }();
  return table;
}

}  // namespace

RunConfig default_config() { return RunConfig{}; }

std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const Field& f : fields()) keys.push_back(f.key);
  return keys;
}

void set_config_value(RunConfig& cfg, std::string_view key, std::string_view value) {
  for (const Field& f : fields()) {
    if (f.key == key) {
      f.set(cfg, trim(value));
      return;
    }
  }
  throw ConfigError("config: unknown key '" + std::string(key) + "'");
}

void RunConfig::validate() const {
  model.validate();
  loss.validate(model);
  if (n_forget < 1 || n_retain < 1) throw ConfigError("config: corpus sizes must be at least 1");
  if (passage_prompt_len < 1) throw ConfigError("config: corpus.passage_prompt_len must be positive");
  if (!(rho >= 0.0 && rho <= 1.0)) throw ConfigError("config: poison.rho must lie in [0, 1]");
  if (!(sink_tau > 0.0)) throw ConfigError("config: loss.sink_tau must be positive");
  if (sink_mode == SinkMode::kExplicit && loss.sink_set.empty()) {
    throw ConfigError("config: explicit sink mode needs loss.sink_set");
  }
  if (pretrain.steps < 0 || unlearn.steps < 0 || backdoor.steps < 0) throw ConfigError("config: negative step count");
  if (!(pretrain.lr > 0.0) || !(unlearn.lr > 0.0) || !(backdoor.lr > 0.0)) {
    throw ConfigError("config: learning rates must be positive");
  }
  if (pretrain.batch_size < 1 || unlearn.batch_size < 1 || backdoor.batch_size < 1) {
    throw ConfigError("config: batch sizes must be positive");
  }
  if (pretrain.preamble_prob < 0.0 || pretrain.preamble_prob > 1.0) {
    throw ConfigError("config: pretrain.preamble_prob must lie in [0, 1]");
  }
  if (pretrain.preamble_max < 1) throw ConfigError("config: pretrain.preamble_max must be positive");
  if (grad_clip < 0.0 || weight_decay < 0.0) throw ConfigError("config: train settings must be nonnegative");
  if (k_prompt < 0) throw ConfigError("config: eval.k_prompt must be nonnegative");
  for (double r : sweep.rhos) {
    if (!(r >= 0.0 && r <= 1.0)) throw ConfigError("config: sweep.rhos entries must lie in [0, 1]");
  }
  for (double l : sweep.lambdas) {
    if (!(l >= 0.0)) throw ConfigError("config: sweep.lambdas entries must be nonnegative");
  }
}

std::string RunConfig::serialize() const {
  std::string out;
  for (const Field& f : fields()) out += f.key + " = " + f.get(*this) + "\n";
  return out;
}

std::string fnv1a_hex(std::string_view text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string RunConfig::hash() const { return fnv1a_hex(serialize()); }

std::string RunConfig::trigger_string() const {
  return trigger_text.empty() ? trigger_preset_text(trigger_preset) : trigger_text;
}

RunConfig parse_config(std::istream& in) {
  RunConfig cfg;
  std::set<std::string> seen;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    // A '#' at line start or after whitespace begins a comment.
    std::string body = line;
    for (std::size_t i = 0; i < line.size(); ++i) {
      if (line[i] == '#' && (i == 0 || line[i - 1] == ' ' || line[i - 1] == '\t')) {
        body = line.substr(0, i);
        break;
      }
    }
    body = trim(body);
    if (body.empty()) continue;
    const auto e = body.find('=');
    if (e == std::string::npos) {
      throw ConfigError("config line " + std::to_string(lineno) + ": expected `key = value`");
    }
    const std::string key = trim(std::string_view(body).substr(0, e));
    const std::string value = trim(std::string_view(body).substr(e + 1));
    if (!seen.insert(key).second) throw ConfigError("config line " + std::to_string(lineno) + ": duplicate key " + key);
    try {
      set_config_value(cfg, key, value);
    } catch (const ConfigError& err) {
      throw ConfigError("config line " + std::to_string(lineno) + ": " + err.what());
    }
  }
  cfg.validate();
  return cfg;
}

RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file " + path);
  return parse_config(in);
}

}  // namespace sinkdoor
