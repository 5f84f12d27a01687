#include "engram/adapters.hpp"

#include <json.hpp>

#include "engram/checkpoint.hpp"

namespace engram {

using nlohmann::json;

std::string method_tag(Method m) {
  switch (m) {
    case Method::baseline: return "baseline";
    case Method::kv_prefix: return "m1";
    case Method::xattn: return "m2";
    case Method::per_layer_kv: return "m3";
    case Method::hebbian: return "m4";
    case Method::gated_branch: return "m5";
    case Method::slot_write: return "m6";
  }
  fail(Error::Kind::Value, "unknown method enum value");
}

std::string method_name(Method m) {
  switch (m) {
    case Method::baseline: return "stateless";
    case Method::kv_prefix: return "kv-prefix";
    case Method::xattn: return "xattn";
    case Method::per_layer_kv: return "per-layer-kv";
    case Method::hebbian: return "hebbian";
    case Method::gated_branch: return "gated-branch";
    case Method::slot_write: return "slot-write";
  }
  fail(Error::Kind::Value, "unknown method enum value");
}

Method parse_method(const std::string& tag) {
  for (Method m : {Method::baseline, Method::kv_prefix, Method::xattn, Method::per_layer_kv,
                   Method::hebbian, Method::gated_branch, Method::slot_write})
    if (tag == method_tag(m) || tag == method_name(m)) return m;
  fail(Error::Kind::Config, "unknown method tag '", tag,
       "'; expected baseline or m1..m6");
}

MemoryDims capacity_dims(const std::string& capacity) {
  if (capacity == "1x") return MemoryDims{64, 256, 64, 8};
  if (capacity == "10x") return MemoryDims{640, 810, 640, 80};
  fail(Error::Kind::Config, "unknown capacity condition '", capacity, "'; expected 1x or 10x");
}

namespace {

json dims_to_json(const MemoryDims& d) {
  return json{{"n_p", d.n_p}, {"d_h", d.d_h}, {"slots", d.slots}, {"top_k", d.top_k}};
}

MemoryDims dims_from_json(const json& j) {
  MemoryDims d;
  d.n_p = j.at("n_p").get<int>();
  d.d_h = j.at("d_h").get<int>();
  d.slots = j.at("slots").get<int>();
  d.top_k = j.at("top_k").get<int>();
  return d;
}

}  // namespace

void save_adapter(const std::string& path, const AdapterParams<float>& params,
                  const std::string& capacity) {
  json cfg;
  cfg["method"] = method_tag(params.method);
  cfg["capacity"] = capacity;
  cfg["decay"] = params.decay;
  cfg["dims"] = dims_to_json(params.dims);
  cfg["backbone"] = backbone_config_to_json(params.bb);
  std::vector<std::pair<std::string, const Tensor<float>*>> tensors = params.trainable();
  for (auto& [name, p] : params.fixed()) tensors.emplace_back(name, p);
  save_checkpoint(path, "adapter", cfg, tensors);
}

std::pair<AdapterParams<float>, std::string> load_adapter(const std::string& path) {
  Checkpoint ck = load_checkpoint(path);
  ENGRAM_CHECK(ck.kind == "adapter", Error::Kind::Validation, "'", path, "' holds a ", ck.kind,
               " checkpoint, not an adapter");
  Method method = parse_method(ck.config.at("method").get<std::string>());
  std::string capacity = ck.config.at("capacity").get<std::string>();
  MemoryDims dims = dims_from_json(ck.config.at("dims"));
  BackboneConfig bb = backbone_config_from_json(ck.config.at("backbone"));
  float decay = ck.config.at("decay").get<float>();
  auto params = AdapterParams<float>::init(method, bb, dims, decay, 0);
  std::vector<std::pair<std::string, Tensor<float>*>> dst = params.trainable();
  for (auto& [name, p] : params.fixed())
    dst.emplace_back(name, const_cast<Tensor<float>*>(p));
  for (auto& [name, p] : dst) {
    ENGRAM_CHECK(ck.has(name), Error::Kind::Validation, "adapter checkpoint '", path,
                 "' lacks tensor '", name, "'");
    const Tensor<float>& stored = ck.tensor(name);
    ENGRAM_CHECK(stored.shape() == p->shape(), Error::Kind::Validation, "tensor '", name,
                 "' has shape ", shape_str(stored.shape()), ", expected ",
                 shape_str(p->shape()));
    std::copy(stored.ptr(), stored.ptr() + stored.numel(), p->ptr());
  }
  return {std::move(params), std::move(capacity)};
}

void save_memory(const std::string& path, const MemoryState<float>& state,
                 const MemoryDims& dims, const std::string& capacity) {
  json cfg;
  cfg["method"] = method_tag(state.method);
  cfg["capacity"] = capacity;
  cfg["turn"] = state.turn;
  cfg["last_written"] = state.last_written;
  cfg["dims"] = dims_to_json(dims);
  std::vector<std::pair<std::string, const Tensor<float>*>> tensors;
  for (size_t i = 0; i < state.banks.size(); ++i)
    tensors.emplace_back("bank." + std::to_string(i), &state.banks[i]);
  save_checkpoint(path, "memory", cfg, tensors);
}

MemoryState<float> load_memory(const std::string& path, const MemoryDims& dims,
                               const BackboneConfig& bb, std::string* capacity) {
  Checkpoint ck = load_checkpoint(path);
  ENGRAM_CHECK(ck.kind == "memory", Error::Kind::Validation, "'", path, "' holds a ", ck.kind,
               " checkpoint, not a memory snapshot");
  Method method = parse_method(ck.config.at("method").get<std::string>());
  MemoryDims stored_dims = dims_from_json(ck.config.at("dims"));
  ENGRAM_CHECK(stored_dims == dims, Error::Kind::Validation, "memory snapshot '", path,
               "' was taken with different memory dimensions");
  auto state = init_memory<float>(method, dims, bb);
  state.turn = ck.config.at("turn").get<int64_t>();
  state.last_written = ck.config.at("last_written").get<std::vector<int>>();
  for (size_t i = 0; i < state.banks.size(); ++i) {
    const std::string name = "bank." + std::to_string(i);
    ENGRAM_CHECK(ck.has(name), Error::Kind::Validation, "memory snapshot '", path,
                 "' lacks tensor '", name, "'");
    const Tensor<float>& stored = ck.tensor(name);
    ENGRAM_CHECK(stored.shape() == state.banks[i].shape(), Error::Kind::Validation, "tensor '",
                 name, "' has shape ", shape_str(stored.shape()), ", expected ",
                 shape_str(state.banks[i].shape()));
    std::copy(stored.ptr(), stored.ptr() + stored.numel(), state.banks[i].ptr());
  }
  if (capacity) *capacity = ck.config.at("capacity").get<std::string>();
  return state;
}

}  // namespace engram
