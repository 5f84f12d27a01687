#pragma once

#include <json.hpp>
#include <string>
#include <utility>
#include <vector>

#include "engram/backbone.hpp"
#include "engram/tensor.hpp"
#include "engram/vocab.hpp"

namespace engram {

// Weight container: one JSON header line (format version, kind, config,
// tensor directory) followed by the raw little-endian float32 payload in
// directory order. Offsets are in float units from the start of the payload.
struct Checkpoint {
  int format_version = 0;
  std::string kind;
  nlohmann::json config;
  std::vector<std::pair<std::string, Tensor<float>>> tensors;

  const Tensor<float>& tensor(const std::string& name) const;
  bool has(const std::string& name) const;
};

inline constexpr int kCheckpointFormatVersion = 1;

void save_checkpoint(const std::string& path, const std::string& kind,
                     const nlohmann::json& config,
                     const std::vector<std::pair<std::string, const Tensor<float>*>>& tensors);

Checkpoint load_checkpoint(const std::string& path);

uint64_t file_hash(const std::string& path);

nlohmann::json backbone_config_to_json(const BackboneConfig& cfg);
BackboneConfig backbone_config_from_json(const nlohmann::json& j);
nlohmann::json vocab_config_to_json(const VocabConfig& cfg);
VocabConfig vocab_config_from_json(const nlohmann::json& j);

void save_backbone(const std::string& path, const BackboneWeights<float>& w,
                   const VocabConfig& vocab);
// loads the weights and re-freezes them; the vocab config rides along
std::pair<BackboneWeights<float>, VocabConfig> load_backbone(const std::string& path);

}  // namespace engram
