#include "engram/checkpoint.hpp"

#include <fstream>

namespace engram {

using nlohmann::json;

const Tensor<float>& Checkpoint::tensor(const std::string& name) const {
  for (auto& [n, t] : tensors)
    if (n == name) return t;
  fail(Error::Kind::Io, "checkpoint has no tensor named '", name, "'");
}

bool Checkpoint::has(const std::string& name) const {
  for (auto& [n, t] : tensors)
    if (n == name) return true;
  return false;
}

void save_checkpoint(const std::string& path, const std::string& kind,
                     const nlohmann::json& config,
                     const std::vector<std::pair<std::string, const Tensor<float>*>>& tensors) {
  json dir = json::array();
  int64_t offset = 0;
  for (auto& [name, t] : tensors) {
    json shape = json::array();
    for (int d : t->shape()) shape.push_back(d);
    dir.push_back({{"name", name}, {"shape", shape}, {"offset", offset}});
    offset += t->numel();
  }
  json header = {{"format_version", kCheckpointFormatVersion},
                 {"kind", kind},
                 {"config", config},
                 {"tensors", dir}};
  std::ofstream f(path, std::ios::binary);
  ENGRAM_CHECK(f.good(), Error::Kind::Io, "cannot open '", path, "' for writing");
  f << header.dump() << "\n";
  for (auto& [name, t] : tensors)
    f.write(reinterpret_cast<const char*>(t->ptr()),
            static_cast<std::streamsize>(sizeof(float) * t->numel()));
  f.flush();
  ENGRAM_CHECK(f.good(), Error::Kind::Io, "write to '", path, "' failed");
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  ENGRAM_CHECK(f.good(), Error::Kind::Io, "cannot open '", path, "'");
  std::string line;
  ENGRAM_CHECK(static_cast<bool>(std::getline(f, line)), Error::Kind::Io,
               "'", path, "' has no header line");
  json header;
  try {
    header = json::parse(line);
  } catch (const json::exception& e) {
    fail(Error::Kind::Io, "'", path, "' header is not valid JSON: ", e.what());
  }
  Checkpoint ck;
  ENGRAM_CHECK(header.contains("format_version"), Error::Kind::Io,
               "'", path, "' header lacks a format version");
  ck.format_version = header["format_version"].get<int>();
  ENGRAM_CHECK(ck.format_version == kCheckpointFormatVersion, Error::Kind::Io,
               "'", path, "' has format version ", ck.format_version, ", expected ",
               kCheckpointFormatVersion);
  ck.kind = header.value("kind", "");
  ck.config = header.value("config", json::object());
  std::vector<char> payload((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  ENGRAM_CHECK(payload.size() % sizeof(float) == 0, Error::Kind::Io,
               "'", path, "' payload is not a whole number of floats");
  const float* base = reinterpret_cast<const float*>(payload.data());
  const int64_t total = static_cast<int64_t>(payload.size() / sizeof(float));
  for (const auto& entry : header["tensors"]) {
    Shape shape;
    for (const auto& d : entry["shape"]) shape.push_back(d.get<int>());
    const int64_t offset = entry["offset"].get<int64_t>();
    const int64_t count = shape_numel(shape);
    ENGRAM_CHECK(offset >= 0 && offset + count <= total, Error::Kind::Io,
                 "tensor '", entry["name"].get<std::string>(), "' in '", path,
                 "' points outside the payload");
    ck.tensors.emplace_back(entry["name"].get<std::string>(),
                            Tensor<float>::from(shape, std::vector<float>(base + offset,
                                                                          base + offset + count)));
  }
  return ck;
}

uint64_t file_hash(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  ENGRAM_CHECK(f.good(), Error::Kind::Io, "cannot open '", path, "' for hashing");
  uint64_t h = 0xcbf29ce484222325ull;
  char buf[1 << 16];
  while (f) {
    f.read(buf, sizeof(buf));
    h = fnv1a64(buf, static_cast<size_t>(f.gcount()), h);
  }
  return h;
}

json backbone_config_to_json(const BackboneConfig& c) {
  return {{"n_layers", c.n_layers}, {"d_model", c.d_model},   {"n_heads", c.n_heads},
          {"d_k", c.d_k},           {"d_v", c.d_v},           {"vocab", c.vocab},
          {"n_ctx", c.n_ctx},       {"mlp_ratio", c.mlp_ratio}};
}

BackboneConfig backbone_config_from_json(const json& j) {
  BackboneConfig c;
  c.n_layers = j.at("n_layers").get<int>();
  c.d_model = j.at("d_model").get<int>();
  c.n_heads = j.at("n_heads").get<int>();
  c.d_k = j.at("d_k").get<int>();
  c.d_v = j.at("d_v").get<int>();
  c.vocab = j.at("vocab").get<int>();
  c.n_ctx = j.at("n_ctx").get<int>();
  c.mlp_ratio = j.at("mlp_ratio").get<int>();
  c.validate();
  return c;
}

json vocab_config_to_json(const VocabConfig& c) {
  return {{"size", c.size},
          {"n_entities", c.n_entities},
          {"n_attributes", c.n_attributes},
          {"n_values", c.n_values}};
}

VocabConfig vocab_config_from_json(const json& j) {
  VocabConfig c;
  c.size = j.at("size").get<int>();
  c.n_entities = j.at("n_entities").get<int>();
  c.n_attributes = j.at("n_attributes").get<int>();
  c.n_values = j.at("n_values").get<int>();
  return c;
}

void save_backbone(const std::string& path, const BackboneWeights<float>& w,
                   const VocabConfig& vocab) {
  std::vector<std::pair<std::string, const Tensor<float>*>> tensors;
  for (auto& [name, t] : w.named_params()) tensors.emplace_back(name, t);
  json config = {{"backbone", backbone_config_to_json(w.cfg)},
                 {"vocab", vocab_config_to_json(vocab)}};
  save_checkpoint(path, "backbone", config, tensors);
}

std::pair<BackboneWeights<float>, VocabConfig> load_backbone(const std::string& path) {
  Checkpoint ck = load_checkpoint(path);
  ENGRAM_CHECK(ck.kind == "backbone", Error::Kind::Io, "'", path, "' holds a '", ck.kind,
               "' checkpoint, not a backbone");
  BackboneConfig cfg = backbone_config_from_json(ck.config.at("backbone"));
  VocabConfig vc = vocab_config_from_json(ck.config.at("vocab"));
  Rng dummy(0);
  BackboneWeights<float> w = BackboneWeights<float>::init(cfg, dummy);
  for (auto& [name, t] : w.named_params()) {
    const Tensor<float>& stored = ck.tensor(name);
    ENGRAM_CHECK(stored.shape() == t->shape(), Error::Kind::Io, "tensor '", name,
                 "' has shape ", shape_str(stored.shape()), ", expected ",
                 shape_str(t->shape()));
    t->data() = stored.data();
  }
  w.set_trainable(false);
  return {std::move(w), vc};
}

}  // namespace engram
