#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <optional>
#include <sstream>

#include "sinkdoor/checkpoint.hpp"
#include "sinkdoor/errors.hpp"
#include "sinkdoor/gradcheck.hpp"
#include "sinkdoor/pipeline.hpp"

namespace py = pybind11;
using namespace sinkdoor;

namespace {

py::array_t<double> to_numpy(const Matrix& m) {
  py::array_t<double> out({m.rows, m.cols});
  auto v = out.mutable_unchecked<2>();
  for (std::size_t i = 0; i < m.rows; ++i) {
    for (std::size_t j = 0; j < m.cols; ++j) v(i, j) = m(i, j);
  }
  return out;
}

py::list loss_log(const std::vector<LossRecord>& log) {
  py::list out;
  for (const LossRecord& r : log) {
    py::dict d;
    d["step"] = r.step;
    d["l_f"] = r.forget;
    d["l_r"] = r.retain;
    d["l_vn"] = r.value_norm;
    d["total"] = r.total;
    out.append(d);
  }
  return out;
}

py::dict report_dict(const MetricsReport& r) {
  py::dict d;
  d["run_id"] = r.run_id;
  d["checkpoint"] = r.checkpoint;
  d["UE"] = py::dict(py::arg("KM*") = r.ue.km, py::arg("VM*") = r.ue.vm);
  d["BE"] = py::dict(py::arg("KM*") = r.be.km, py::arg("VM*") = r.be.vm);
  d["UT"] = py::dict(py::arg("KM*") = r.ut_km);
  return d;
}

py::list sample_list(const std::vector<Sample>& samples) {
  py::list out;
  for (const Sample& s : samples) {
    py::dict d;
    d["fact_id"] = s.fact_id;
    d["split"] = std::string(to_string(s.split));
    d["kind"] = std::string(to_string(s.kind));
    d["prompt"] = s.prompt;
    d["answer"] = s.answer;
    d["trigger_at"] = s.trigger_at;
    d["trigger_len"] = s.trigger_len;
    out.append(d);
  }
  return out;
}

py::dict model_config_dict(const ModelConfig& m) {
  py::dict d;
  d["n_layers"] = m.n_layers;
  d["n_heads"] = m.n_heads;
  d["d_model"] = m.d_model;
  d["vocab_size"] = m.vocab_size;
  d["max_seq_len"] = m.max_seq_len;
  d["rmu_layer"] = m.rmu_layer;
  return d;
}

// Config lookup through the serialized `key = value` text.
std::string config_get(const RunConfig& c, const std::string& key) {
  std::istringstream in(c.serialize());
  std::string line;
  const std::string prefix = key + " = ";
  while (std::getline(in, line)) {
    if (line.rfind(prefix, 0) == 0) return line.substr(prefix.size());
  }
  throw ConfigError("config: unknown key '" + key + "'");
}

const std::vector<Sample>& dataset(const Experiment& exp, const std::string& name) {
  if (name == "forget") return exp.forget_set();
  if (name == "retain") return exp.retain_set();
  if (name == "poisoned_test") return exp.poisoned_test();
  throw ConfigError("unknown dataset '" + name + "' (forget|retain|poisoned_test)");
}

std::vector<Sample> qa_only(const std::vector<Sample>& xs) {
  std::vector<Sample> out;
  for (const Sample& s : xs) {
    if (s.kind == SampleKind::kQa) out.push_back(s);
  }
  return out;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Tiny instrumented transformer lab for backdoor attacks on unlearning";

  static py::exception<Error> base_error(m, "Error", PyExc_RuntimeError);
  static py::exception<ConfigError> config_error(m, "ConfigError", base_error.ptr());
  static py::exception<IoError> io_error(m, "IoError", base_error.ptr());
  static py::exception<TrainingFault> training_fault(m, "TrainingFault", base_error.ptr());
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const ConfigError& e) {
      py::set_error(config_error, e.what());
    } catch (const IoError& e) {
      py::set_error(io_error, e.what());
    } catch (const TrainingFault& e) {
      py::set_error(training_fault, e.what());
    } catch (const Error& e) {
      py::set_error(base_error, e.what());
    }
  });

  py::class_<RunConfig>(m, "RunConfig")
      .def(py::init(&default_config))
      .def("set", [](RunConfig& c, const std::string& key, const std::string& value) { set_config_value(c, key, value); })
      .def("get", &config_get)
      .def("validate", &RunConfig::validate)
      .def("serialize", &RunConfig::serialize)
      .def("hash", &RunConfig::hash)
      .def_readwrite("seed", &RunConfig::seed)
      .def_readwrite("run_id", &RunConfig::run_id)
      .def("__repr__", [](const RunConfig& c) { return "<RunConfig " + c.run_id + " " + c.hash() + ">"; });

  m.def("default_config", &default_config);
  m.def("config_keys", &config_keys);
  m.def("load_config", &load_config, py::arg("path"));
  m.def(
      "parse_config",
      [](const std::string& text) {
        std::istringstream in(text);
        return parse_config(in);
      },
      py::arg("text"));
  m.def("fnv1a_hex", [](const std::string& s) { return fnv1a_hex(s); });

  py::class_<TransformerState>(m, "Model")
      .def_property_readonly("config", [](const TransformerState& s) { return model_config_dict(s.config); })
      .def("parameter_count", &TransformerState::parameter_count)
      .def("all_finite", &TransformerState::all_finite)
      .def("bit_equal", &TransformerState::bit_equal)
      .def(
          "logits", [](const TransformerState& s, const Tokens& t) { return to_numpy(forward(s, t).logits); },
          py::arg("tokens"))
      .def("generate", &generate_greedy, py::arg("prompt"), py::arg("max_new"))
      .def(
          "save",
          [](const TransformerState& s, const std::string& path, const std::string& hash) {
            save_checkpoint(path, s, hash);
          },
          py::arg("path"), py::arg("config_hash") = "")
      .def_static(
          "load", [](const std::string& path) { return load_checkpoint(path); }, py::arg("path"));

  py::class_<Experiment>(m, "Experiment")
      .def(py::init<RunConfig>(), py::arg("config"))
      .def_property_readonly("config", &Experiment::config)
      .def("initial_model", &Experiment::initial_model)
      .def("pretrain",
           [](const Experiment& e) {
             TrainResult r = e.pretrain();
             return py::make_tuple(std::move(r.state), loss_log(r.log));
           })
      .def(
          "unlearn",
          [](const Experiment& e, const TransformerState& theta_o) {
            TrainResult r = e.unlearn(theta_o);
            return py::make_tuple(std::move(r.state), loss_log(r.log));
          },
          py::arg("theta_o"))
      .def(
          "backdoor",
          [](const Experiment& e, const TransformerState& theta_o, const TransformerState* theta_u,
             std::optional<std::string> mode) {
            BackdoorRun r = mode ? e.backdoor(theta_o, theta_u, parse_mode(*mode)) : e.backdoor(theta_o, theta_u);
            py::dict d;
            d["model"] = std::move(r.state);
            d["selected_ids"] = r.plan.selected_ids;
            d["log"] = loss_log(r.log);
            d["poisoned"] = sample_list(r.poisoned);
            return d;
          },
          py::arg("theta_o"), py::arg("theta_u") = nullptr, py::arg("mode") = py::none())
      .def(
          "evaluate",
          [](const Experiment& e, const TransformerState& s, const std::string& name) {
            return report_dict(e.evaluate(s, name));
          },
          py::arg("model"), py::arg("checkpoint") = "model")
      .def("sink_set", &Experiment::sink_set, py::arg("theta_o"))
      .def("samples", [](const Experiment& e, const std::string& name) { return sample_list(dataset(e, name)); },
           py::arg("dataset"))
      .def_property_readonly("trigger_tokens", [](const Experiment& e) { return e.trigger().tokens; })
      .def("tokenize", [](const Experiment& e, const std::string& text) { return e.corpus().tokenizer.tokenize(text); })
      .def("detokenize",
           [](const Experiment& e, const Tokens& tokens) { return e.corpus().tokenizer.detokenize(tokens); })
      .def(
          "attn_diff",
          [](const Experiment& e, const TransformerState& s, int layer) {
            return to_numpy(attn_diff_map(s, qa_only(e.forget_set()), qa_only(e.poisoned_test()), layer).delta);
          },
          py::arg("model"), py::arg("layer"))
      .def(
          "trigger_column_mass",
          [](const Experiment& e, const TransformerState& s, int layer) {
            return trigger_column_mass(s, qa_only(e.forget_set()), qa_only(e.poisoned_test()), layer);
          },
          py::arg("model"), py::arg("layer"))
      .def(
          "value_norm_correlation",
          [](const Experiment& e, const TransformerState& a, const TransformerState& b, const std::string& data,
             int layer, std::size_t position) {
            return value_norm_correlation(a, b, dataset(e, data), layer, position);
          },
          py::arg("a"), py::arg("b"), py::arg("dataset"), py::arg("layer"), py::arg("position"));

  m.def("pearson", [](const std::vector<double>& a, const std::vector<double>& b) { return pearson(a, b); });
  m.def("gradcheck_ops", &gradcheck_ops);
  m.def(
      "run_gradchecks",
      [](std::uint64_t seed, int trials) {
        py::dict out;
        for (const OpCheck& c : run_gradchecks(seed, trials)) out[py::str(c.op)] = c.max_rel_error;
        return out;
      },
      py::arg("seed") = 0, py::arg("trials") = 10);
  m.def("softmax_row_sum_error", &softmax_row_sum_error, py::arg("seed") = 0, py::arg("trials") = 100);
}
