#pragma once

#include <functional>
#include <iosfwd>
#include <string>

#include "sinkdoor/model.hpp"

namespace sinkdoor {

// Layout: the 5 bytes "SDKP1", a little-endian u64 header length, a JSON
// header (format version, model config, ordered parameter names and shapes,
// dtype "f64", config hash), then every parameter buffer as little-endian
// doubles in header order.
inline constexpr char kCheckpointMagic[] = "SDKP1";
inline constexpr int kCheckpointVersion = 1;

struct CheckpointInfo {
  int version = 0;
  std::string config_hash;
  ModelConfig model;
};

void save_checkpoint(std::ostream& out, const TransformerState& state, const std::string& config_hash);
void save_checkpoint(const std::string& path, const TransformerState& state, const std::string& config_hash);

using WarningSink = std::function<void(const std::string&)>;

// A differing config hash is reported through `warn` (when expected_hash is
// nonempty); shape or name mismatches against the header's own model config
// and truncated payloads throw IoError.
TransformerState load_checkpoint(std::istream& in, const std::string& expected_hash = {},
                                 const WarningSink& warn = {}, CheckpointInfo* info = nullptr);
TransformerState load_checkpoint(const std::string& path, const std::string& expected_hash = {},
                                 const WarningSink& warn = {}, CheckpointInfo* info = nullptr);

// Loads and additionally requires the stored model config to equal `expected`.
TransformerState load_checkpoint_as(const std::string& path, const ModelConfig& expected,
                                    const std::string& expected_hash = {}, const WarningSink& warn = {});

}  // namespace sinkdoor
