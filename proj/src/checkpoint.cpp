#include "sinkdoor/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

#include "json.hpp"

#include "sinkdoor/errors.hpp"

namespace sinkdoor {

namespace {

constexpr std::size_t kMagicLen = 5;

void put_u64(std::ostream& out, std::uint64_t x) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(x >> (8 * i));
  out.write(reinterpret_cast<const char*>(b), 8);
}

std::uint64_t get_u64(std::istream& in) {
  unsigned char b[8];
  if (!in.read(reinterpret_cast<char*>(b), 8)) throw IoError("checkpoint: truncated header length");
  std::uint64_t x = 0;
  for (int i = 0; i < 8; ++i) x |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return x;
}

nlohmann::ordered_json model_json(const ModelConfig& c) {
  return {{"n_layers", c.n_layers},     {"n_heads", c.n_heads},       {"d_model", c.d_model},
          {"vocab_size", c.vocab_size}, {"max_seq_len", c.max_seq_len}, {"rmu_layer", c.rmu_layer}};
}

ModelConfig model_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.n_layers = j.at("n_layers").get<int>();
  c.n_heads = j.at("n_heads").get<int>();
  c.d_model = j.at("d_model").get<int>();
  c.vocab_size = j.at("vocab_size").get<int>();
  c.max_seq_len = j.at("max_seq_len").get<int>();
  c.rmu_layer = j.at("rmu_layer").get<int>();
  return c;
}

}  // namespace

void save_checkpoint(std::ostream& out, const TransformerState& state, const std::string& config_hash) {
  const auto params = state.named_parameters();
  nlohmann::ordered_json header;
  header["format_version"] = kCheckpointVersion;
  header["model"] = model_json(state.config);
  header["dtype"] = "f64";
  header["config_hash"] = config_hash;
  auto list = nlohmann::ordered_json::array();
  for (const auto& [name, t] : params) list.push_back({{"name", name}, {"shape", t.shape()}});
  header["parameters"] = list;
  const std::string text = header.dump();

  out.write(kCheckpointMagic, kMagicLen);
  put_u64(out, text.size());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  std::vector<unsigned char> buf;
  for (const auto& [name, t] : params) {
    buf.resize(t.numel() * 8);
    for (std::size_t i = 0; i < t.numel(); ++i) {
      const auto bits = std::bit_cast<std::uint64_t>(t.data()[i]);
      for (int k = 0; k < 8; ++k) buf[i * 8 + static_cast<std::size_t>(k)] = static_cast<unsigned char>(bits >> (8 * k));
    }
    out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  }
  if (!out) throw IoError("checkpoint: write failed");
}

void save_checkpoint(const std::string& path, const TransformerState& state, const std::string& config_hash) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path + " for writing");
  save_checkpoint(out, state, config_hash);
  out.flush();
  if (!out) throw IoError("write failed for " + path);
}

TransformerState load_checkpoint(std::istream& in, const std::string& expected_hash, const WarningSink& warn,
                                 CheckpointInfo* info) {
  char magic[kMagicLen];
  if (!in.read(magic, kMagicLen) || std::memcmp(magic, kCheckpointMagic, kMagicLen) != 0) {
    throw IoError("checkpoint: bad magic (not an SDKP1 file)");
  }
  const std::uint64_t len = get_u64(in);
  if (len > (1ULL << 26)) throw IoError("checkpoint: implausible header length");
  std::string text(len, '\0');
  if (!in.read(text.data(), static_cast<std::streamsize>(len))) throw IoError("checkpoint: truncated header");

  nlohmann::json header;
  ModelConfig cfg;
  std::string hash;
  int version = 0;
  try {
    header = nlohmann::json::parse(text);
    version = header.at("format_version").get<int>();
    if (header.at("dtype").get<std::string>() != "f64") throw IoError("checkpoint: unsupported dtype");
    cfg = model_from_json(header.at("model"));
    hash = header.at("config_hash").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("checkpoint: malformed header: ") + e.what());
  }
  if (version != kCheckpointVersion) throw IoError("checkpoint: unsupported format version " + std::to_string(version));
  try {
    cfg.validate();
  } catch (const ConfigError& e) {
    throw IoError(std::string("checkpoint: invalid model config: ") + e.what());
  }
  if (!expected_hash.empty() && hash != expected_hash && warn) {
    warn("checkpoint config hash " + hash + " differs from the current config hash " + expected_hash);
  }

  TransformerState state(cfg);
  const auto params = state.named_parameters();
  const auto& listed = header.at("parameters");
  if (!listed.is_array() || listed.size() != params.size()) {
    throw IoError("checkpoint: parameter list does not match the model config");
  }
  std::vector<unsigned char> buf;
  for (std::size_t p = 0; p < params.size(); ++p) {
    const auto& [name, t] = params[p];
    Shape shape;
    try {
      if (listed[p].at("name").get<std::string>() != name) {
        throw IoError("checkpoint: expected parameter " + name + ", found " + listed[p].at("name").get<std::string>());
      }
      shape = listed[p].at("shape").get<Shape>();
    } catch (const nlohmann::json::exception& e) {
      throw IoError(std::string("checkpoint: malformed parameter entry: ") + e.what());
    }
    if (shape != t.shape()) {
      throw IoError("checkpoint: shape mismatch for " + name + ": stored " + shape_string(shape) + ", expected " +
                    shape_string(t.shape()));
    }
    buf.resize(t.numel() * 8);
    if (!in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()))) {
      throw IoError("checkpoint: truncated payload at " + name);
    }
    auto data = t.mutable_data();
    for (std::size_t i = 0; i < t.numel(); ++i) {
      std::uint64_t bits = 0;
      for (int k = 0; k < 8; ++k) bits |= static_cast<std::uint64_t>(buf[i * 8 + static_cast<std::size_t>(k)]) << (8 * k);
      data[i] = std::bit_cast<double>(bits);
    }
  }
  if (in.peek() != std::char_traits<char>::eof()) throw IoError("checkpoint: trailing bytes after payload");
  if (info != nullptr) *info = {version, hash, cfg};
  return state;
}

TransformerState load_checkpoint(const std::string& path, const std::string& expected_hash, const WarningSink& warn,
                                 CheckpointInfo* info) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path);
  return load_checkpoint(in, expected_hash, warn, info);
}

TransformerState load_checkpoint_as(const std::string& path, const ModelConfig& expected,
                                    const std::string& expected_hash, const WarningSink& warn) {
  CheckpointInfo info;
  TransformerState s = load_checkpoint(path, expected_hash, warn, &info);
  if (!(info.model == expected)) {
    throw ConfigError("checkpoint " + path + " was saved with a different model shape than the config describes");
  }
  return s;
}

}  // namespace sinkdoor
