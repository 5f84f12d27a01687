#pragma once

#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "engram/backbone.hpp"
#include "engram/ops.hpp"
#include "engram/tape.hpp"
#include "engram/tensor.hpp"

namespace engram {

// The six persistent-memory methods plus the stateless baseline. The short
// tags m1..m6 are the command-line names; the enum names say what each
// method does.
enum class Method {
  baseline,
  kv_prefix,      // m1: one bank, KV prefix at every layer, single global write
  xattn,          // m2: parallel cross-attention branch scaled by a learned beta
  per_layer_kv,   // m3: per-layer banks, per-layer KV prefix and writes
  hebbian,        // m4: associative matrix queried once, recall exposed as KV
  gated_branch,   // m5: cross-attention branch through a sigmoid gate
  slot_write,     // m6: addressable slots, sparse top-k writes, KV read
};

std::string method_tag(Method m);      // "baseline", "m1".."m6"
std::string method_name(Method m);     // descriptive, e.g. "kv-prefix"
Method parse_method(const std::string& tag);

struct MemoryDims {
  int n_p = 64;    // dense bank entries
  int d_h = 256;   // associative matrix side
  int slots = 64;  // addressable slots
  int top_k = 8;   // slots written per turn

  bool operator==(const MemoryDims&) const = default;
};

// The two memory budgets: "1x" -> (64, 256, 64, 8), "10x" -> (640, 810, 640, 80).
MemoryDims capacity_dims(const std::string& capacity);

template <typename T>
struct MemoryState {
  Method method = Method::baseline;
  std::vector<Tensor<T>> banks;   // 1 bank, or one per layer for per_layer_kv
  std::vector<int> last_written;  // slot indices touched by the latest write
  int64_t turn = 0;
};

// Fixed random write-side projections; excluded from the optimizer.
template <typename T>
struct AttentionWriteParams {
  Tensor<T> wq, wk, wv;  // each d x d
};

template <typename T>
struct AdapterParams {
  Method method = Method::baseline;
  BackboneConfig bb;
  MemoryDims dims;
  T decay = T(0.95);

  // trainable read-side parameters; presence depends on the method
  std::vector<Tensor<T>> mem_k, mem_v;    // per layer, input d (or d_h) x heads*d_k / d_v
  std::vector<Tensor<T>> xq, xk, xv, xo;  // per-layer cross-attention projections
  std::vector<Tensor<T>> beta;            // per-layer branch scale, starts at zero
  std::vector<Tensor<T>> gate_w, gate_b;  // per-layer gate: 2d x d and d (bias starts at -2)
  Tensor<T> query_h;                      // d x d_h associative query projection
  Tensor<T> addr_token, addr_slot;        // d x d slot addressing heads

  // fixed random write-side parameters
  std::vector<AttentionWriteParams<T>> write;  // one entry, or one per layer
  Tensor<T> heb_k, heb_v;                      // d x d_h outer-product projections

  static AdapterParams init(Method method, const BackboneConfig& bb, const MemoryDims& dims,
                            T decay, uint64_t seed);

  std::vector<std::pair<std::string, Tensor<T>*>> trainable();
  std::vector<std::pair<std::string, const Tensor<T>*>> trainable() const;
  std::vector<std::pair<std::string, const Tensor<T>*>> fixed() const;

  void set_trainable_flags(bool on) {
    for (auto& [n, p] : trainable()) p->set_requires_grad(on);
  }
  int64_t trainable_count() const {
    int64_t n = 0;
    for (auto& [name, p] : trainable()) n += p->numel();
    return n;
  }
  uint64_t fixed_hash() const {
    uint64_t h = 0xcbf29ce484222325ull;
    for (auto& [name, p] : fixed()) {
      h = fnv1a64(name, h);
      h = fnv1a64(p->ptr(), sizeof(T) * p->numel(), h);
    }
    return h;
  }
  uint64_t value_hash() const {
    uint64_t h = fixed_hash();
    for (auto& [name, p] : trainable()) {
      h = fnv1a64(name, h);
      h = fnv1a64(p->ptr(), sizeof(T) * p->numel(), h);
    }
    return h;
  }
};

template <typename T>
MemoryState<T> init_memory(Method method, const MemoryDims& dims, const BackboneConfig& bb);

// P_t = gamma*P + A^T (H W_v) with A = softmax_rows((H W_q)(P W_k)^T / sqrt(d)).
template <typename T>
Tensor<T> write_attention(const Tensor<T>& P, const Tensor<T>& H,
                          const AttentionWriteParams<T>& w, T gamma);

// M_t = gamma*M + (1/n) (H K)^T (H V).
template <typename T>
Tensor<T> write_hebbian(const Tensor<T>& M, const Tensor<T>& H, const Tensor<T>& proj_k,
                        const Tensor<T>& proj_v, T gamma);

// Sparse top-k slot overwrite; returns the new bank and the written indices.
// Unselected rows are bitwise unchanged.
template <typename T>
std::pair<Tensor<T>, std::vector<int>> write_slot(const Tensor<T>& slots, const Tensor<T>& H,
                                                  const Tensor<T>& w_a, const Tensor<T>& w_s,
                                                  const Tensor<T>& w_v, T gamma, int k);

// Hook bundle reading from `state` with `params`. Both are captured by
// pointer and must outlive the hooks; bank replacement through write_step is
// visible to already-created hooks.
template <typename T>
InjectionHooks<T> make_read_hooks(const MemoryState<T>& state, const AdapterParams<T>& params);

// One memory update after a processed turn. H_final is the final hidden
// state of the turn; per-layer banks additionally need the per-layer block
// inputs. Inputs must be detached and no tape may be live.
template <typename T>
void write_step(MemoryState<T>& state, const AdapterParams<T>& params, const Tensor<T>& H_final,
                const std::vector<Tensor<T>>* per_layer_H = nullptr);

void save_adapter(const std::string& path, const AdapterParams<float>& params,
                  const std::string& capacity);
std::pair<AdapterParams<float>, std::string> load_adapter(const std::string& path);

void save_memory(const std::string& path, const MemoryState<float>& state,
                 const MemoryDims& dims, const std::string& capacity);
MemoryState<float> load_memory(const std::string& path, const MemoryDims& dims,
                               const BackboneConfig& bb, std::string* capacity = nullptr);

// --- implementation ---

template <typename T>
AdapterParams<T> AdapterParams<T>::init(Method method, const BackboneConfig& bb,
                                        const MemoryDims& dims, T decay, uint64_t seed) {
  bb.validate();
  ENGRAM_CHECK(method != Method::baseline, Error::Kind::Config,
               "the stateless baseline has no adapter parameters");
  ENGRAM_CHECK(dims.n_p > 0 && dims.d_h > 0 && dims.slots > 0 && dims.top_k > 0,
               Error::Kind::Config, "memory dimensions must be positive");
  ENGRAM_CHECK(dims.top_k <= dims.slots, Error::Kind::Config, "top_k = ", dims.top_k,
               " exceeds slot count ", dims.slots);
  ENGRAM_CHECK(decay > T(0) && decay <= T(1), Error::Kind::Config,
               "decay must lie in (0, 1]");
  Rng rng(seed);
  AdapterParams p;
  p.method = method;
  p.bb = bb;
  p.dims = dims;
  p.decay = decay;
  const int d = bb.d_model;
  const int kw = bb.n_heads * bb.d_k;
  const int vw = bb.n_heads * bb.d_v;
  const T read_std = T(0.02);
  const T fixed_std = T(1) / std::sqrt(T(d));

  auto attn_write = [&] {
    AttentionWriteParams<T> w;
    w.wq = Tensor<T>::randn(Shape{d, d}, rng, fixed_std);
    w.wk = Tensor<T>::randn(Shape{d, d}, rng, fixed_std);
    w.wv = Tensor<T>::randn(Shape{d, d}, rng, fixed_std);
    return w;
  };
  auto prefix_reads = [&](int in_dim) {
    for (int l = 0; l < bb.n_layers; ++l) {
      p.mem_k.push_back(Tensor<T>::randn(Shape{in_dim, kw}, rng, read_std));
      p.mem_v.push_back(Tensor<T>::randn(Shape{in_dim, vw}, rng, read_std));
    }
  };
  auto xattn_reads = [&] {
    for (int l = 0; l < bb.n_layers; ++l) {
      p.xq.push_back(Tensor<T>::randn(Shape{d, kw}, rng, read_std));
      p.xk.push_back(Tensor<T>::randn(Shape{d, kw}, rng, read_std));
      p.xv.push_back(Tensor<T>::randn(Shape{d, vw}, rng, read_std));
      p.xo.push_back(Tensor<T>::randn(Shape{vw, d}, rng, read_std));
    }
  };

  switch (method) {
    case Method::kv_prefix:
      prefix_reads(d);
      p.write.push_back(attn_write());
      break;
    case Method::xattn:
      xattn_reads();
      for (int l = 0; l < bb.n_layers; ++l) p.beta.push_back(Tensor<T>(Shape{1}));
      p.write.push_back(attn_write());
      break;
    case Method::per_layer_kv:
      prefix_reads(d);
      for (int l = 0; l < bb.n_layers; ++l) p.write.push_back(attn_write());
      break;
    case Method::hebbian:
      p.query_h = Tensor<T>::randn(Shape{d, dims.d_h}, rng, read_std);
      prefix_reads(dims.d_h);
      p.heb_k = Tensor<T>::randn(Shape{d, dims.d_h}, rng, fixed_std);
      p.heb_v = Tensor<T>::randn(Shape{d, dims.d_h}, rng, fixed_std);
      break;
    case Method::gated_branch:
      xattn_reads();
      for (int l = 0; l < bb.n_layers; ++l) {
        p.gate_w.push_back(Tensor<T>(Shape{2 * d, d}));
        p.gate_b.push_back(Tensor<T>(Shape{d}, T(-2)));
      }
      p.write.push_back(attn_write());
      break;
    case Method::slot_write:
      prefix_reads(d);
      p.addr_token = Tensor<T>::randn(Shape{d, d}, rng, fixed_std);
      p.addr_slot = Tensor<T>::randn(Shape{d, d}, rng, fixed_std);
      p.write.push_back(attn_write());
      break;
    case Method::baseline:
      break;
  }
  p.set_trainable_flags(true);
  return p;
}

template <typename T>
std::vector<std::pair<std::string, Tensor<T>*>> AdapterParams<T>::trainable() {
  std::vector<std::pair<std::string, Tensor<T>*>> out;
  auto layer_list = [&](const char* base, std::vector<Tensor<T>>& ts) {
    for (size_t l = 0; l < ts.size(); ++l)
      out.emplace_back(std::string(base) + "." + std::to_string(l), &ts[l]);
  };
  layer_list("mem_k", mem_k);
  layer_list("mem_v", mem_v);
  layer_list("xq", xq);
  layer_list("xk", xk);
  layer_list("xv", xv);
  layer_list("xo", xo);
  layer_list("beta", beta);
  layer_list("gate_w", gate_w);
  layer_list("gate_b", gate_b);
  if (query_h.defined()) out.emplace_back("query_h", &query_h);
  if (addr_token.defined()) out.emplace_back("addr_token", &addr_token);
  if (addr_slot.defined()) out.emplace_back("addr_slot", &addr_slot);
  return out;
}

template <typename T>
std::vector<std::pair<std::string, const Tensor<T>*>> AdapterParams<T>::trainable() const {
  auto mut = const_cast<AdapterParams*>(this)->trainable();
  std::vector<std::pair<std::string, const Tensor<T>*>> out;
  out.reserve(mut.size());
  for (auto& [n, p] : mut) out.emplace_back(n, p);
  return out;
}

template <typename T>
std::vector<std::pair<std::string, const Tensor<T>*>> AdapterParams<T>::fixed() const {
  std::vector<std::pair<std::string, const Tensor<T>*>> out;
  for (size_t l = 0; l < write.size(); ++l) {
    std::string p = "write." + std::to_string(l) + ".";
    out.emplace_back(p + "wq", &write[l].wq);
    out.emplace_back(p + "wk", &write[l].wk);
    out.emplace_back(p + "wv", &write[l].wv);
  }
  if (heb_k.defined()) out.emplace_back("heb_k", &heb_k);
  if (heb_v.defined()) out.emplace_back("heb_v", &heb_v);
  return out;
}

template <typename T>
MemoryState<T> init_memory(Method method, const MemoryDims& dims, const BackboneConfig& bb) {
  ENGRAM_CHECK(method != Method::baseline, Error::Kind::Config,
               "the stateless baseline carries no memory state");
  ENGRAM_CHECK(dims.top_k >= 1 && dims.top_k <= dims.slots, Error::Kind::Config,
               "top_k = ", dims.top_k, " must lie in [1, ", dims.slots, "]");
  MemoryState<T> s;
  s.method = method;
  switch (method) {
    case Method::kv_prefix:
    case Method::xattn:
    case Method::gated_branch:
      s.banks.push_back(Tensor<T>(Shape{dims.n_p, bb.d_model}));
      break;
    case Method::per_layer_kv:
      for (int l = 0; l < bb.n_layers; ++l)
        s.banks.push_back(Tensor<T>(Shape{dims.n_p, bb.d_model}));
      break;
    case Method::hebbian:
      s.banks.push_back(Tensor<T>(Shape{dims.d_h, dims.d_h}));
      break;
    case Method::slot_write:
      s.banks.push_back(Tensor<T>(Shape{dims.slots, bb.d_model}));
      break;
    case Method::baseline:
      break;
  }
  return s;
}

template <typename T>
Tensor<T> write_attention(const Tensor<T>& P, const Tensor<T>& H,
                          const AttentionWriteParams<T>& w, T gamma) {
  ENGRAM_CHECK(!H.attached(), Error::Kind::Contract,
               "write rules take detached hidden states, got a graph-attached tensor");
  const int d = H.dim(1);
  ENGRAM_CHECK(P.dim(1) == d, Error::Kind::Shape, "bank width ", P.dim(1),
               " does not match hidden width ", d);
  auto qw = matmul(H, w.wq);
  auto kw = matmul(P, w.wk);
  auto a = softmax_rows(scale(matmul(qw, transpose(kw)), T(1) / std::sqrt(T(d))));
  return add(scale(P, gamma), matmul(transpose(a), matmul(H, w.wv)));
}

template <typename T>
Tensor<T> write_hebbian(const Tensor<T>& M, const Tensor<T>& H, const Tensor<T>& proj_k,
                        const Tensor<T>& proj_v, T gamma) {
  ENGRAM_CHECK(!H.attached(), Error::Kind::Contract,
               "write rules take detached hidden states, got a graph-attached tensor");
  const int n = H.dim(0);
  auto hk = matmul(H, proj_k);
  auto hv = matmul(H, proj_v);
  return add(scale(M, gamma), scale(matmul(transpose(hk), hv), T(1) / T(n)));
}

template <typename T>
std::pair<Tensor<T>, std::vector<int>> write_slot(const Tensor<T>& slots, const Tensor<T>& H,
                                                  const Tensor<T>& w_a, const Tensor<T>& w_s,
                                                  const Tensor<T>& w_v, T gamma, int k) {
  ENGRAM_CHECK(!H.attached(), Error::Kind::Contract,
               "write rules take detached hidden states, got a graph-attached tensor");
  const int s = slots.dim(0);
  const int n = H.dim(0);
  const int d = H.dim(1);
  ENGRAM_CHECK(k >= 1 && k <= s, Error::Kind::Config, "top_k = ", k, " must lie in [1, ", s,
               "]");
  auto tok = matmul(H, w_a);
  auto slo = matmul(slots, w_s);
  auto aff = scale(matmul(tok, transpose(slo)), T(1) / std::sqrt(T(d)));
  auto vw = matmul(H, w_v);

  std::vector<int> order(static_cast<size_t>(s));
  std::vector<T> alpha(static_cast<size_t>(s), -std::numeric_limits<T>::infinity());
  for (int j = 0; j < s; ++j) {
    order[static_cast<size_t>(j)] = j;
    for (int i = 0; i < n; ++i)
      alpha[static_cast<size_t>(j)] = std::max(alpha[static_cast<size_t>(j)], aff.at(i, j));
  }
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    if (alpha[static_cast<size_t>(a)] != alpha[static_cast<size_t>(b)])
      return alpha[static_cast<size_t>(a)] > alpha[static_cast<size_t>(b)];
    return a < b;
  });
  std::vector<int> written(order.begin(), order.begin() + k);
  std::sort(written.begin(), written.end());

  Tensor<T> out = slots.clone();
  for (int j : written) {
    T mx = -std::numeric_limits<T>::infinity();
    for (int i = 0; i < n; ++i) mx = std::max(mx, aff.at(i, j));
    T z = T(0);
    std::vector<T> wcol(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
      wcol[static_cast<size_t>(i)] = std::exp(aff.at(i, j) - mx);
      z += wcol[static_cast<size_t>(i)];
    }
    for (int c = 0; c < d; ++c) {
      T v = T(0);
      for (int i = 0; i < n; ++i) v += wcol[static_cast<size_t>(i)] / z * vw.at(i, c);
      out.at(j, c) = gamma * slots.at(j, c) + (T(1) - gamma) * v;
    }
  }
  return {std::move(out), std::move(written)};
}

namespace detail {

// Multi-head cross-attention from h (n x d) to bank (n_P x d); memory rows
// are visible to every position.
template <typename T>
Tensor<T> cross_attention(const Tensor<T>& h, const Tensor<T>& bank, const Tensor<T>& pq,
                          const Tensor<T>& pk, const Tensor<T>& pv, const Tensor<T>& po,
                          const BackboneConfig& bb) {
  auto q = matmul(h, pq);
  auto k = matmul(bank, pk);
  auto v = matmul(bank, pv);
  const T inv_sqrt = T(1) / std::sqrt(T(bb.d_k));
  Tensor<T> heads;
  for (int hd = 0; hd < bb.n_heads; ++hd) {
    auto qh = slice_cols(q, hd * bb.d_k, bb.d_k);
    auto kh = slice_cols(k, hd * bb.d_k, bb.d_k);
    auto vh = slice_cols(v, hd * bb.d_v, bb.d_v);
    auto w = softmax_rows(scale(matmul(qh, transpose(kh)), inv_sqrt));
    auto oh = matmul(w, vh);
    heads = hd == 0 ? oh : concat_cols(heads, oh);
  }
  return matmul(heads, po);
}

template <typename T>
struct HookContext {
  const MemoryState<T>* state;
  const AdapterParams<T>* params;
  Tensor<T> recall;  // associative readout, refreshed by the begin hook
};

}  // namespace detail

template <typename T>
InjectionHooks<T> make_read_hooks(const MemoryState<T>& state, const AdapterParams<T>& params) {
  ENGRAM_CHECK(state.method == params.method, Error::Kind::Contract,
               "memory state carries method ", method_tag(state.method),
               " but the adapter is ", method_tag(params.method));
  InjectionHooks<T> hooks;
  if (params.method == Method::baseline) return hooks;
  auto ctx = std::make_shared<detail::HookContext<T>>();
  ctx->state = &state;
  ctx->params = &params;

  switch (params.method) {
    case Method::kv_prefix:
    case Method::slot_write:
      hooks.extra_kv = [ctx](int l) -> std::optional<ExtraKV<T>> {
        const auto& p = *ctx->params;
        const auto& bank = ctx->state->banks[0];
        return ExtraKV<T>{matmul(bank, p.mem_k[static_cast<size_t>(l)]),
                          matmul(bank, p.mem_v[static_cast<size_t>(l)]), Tensor<T>()};
      };
      break;
    case Method::per_layer_kv:
      hooks.extra_kv = [ctx](int l) -> std::optional<ExtraKV<T>> {
        const auto& p = *ctx->params;
        const auto& bank = ctx->state->banks[static_cast<size_t>(l)];
        return ExtraKV<T>{matmul(bank, p.mem_k[static_cast<size_t>(l)]),
                          matmul(bank, p.mem_v[static_cast<size_t>(l)]), Tensor<T>()};
      };
      break;
    case Method::hebbian:
      hooks.begin = [ctx](const Tensor<T>& h0) {
        ctx->recall = matmul(matmul(h0, ctx->params->query_h), ctx->state->banks[0]);
      };
      hooks.extra_kv = [ctx](int l) -> std::optional<ExtraKV<T>> {
        ENGRAM_CHECK(ctx->recall.defined(), Error::Kind::Contract,
                     "associative recall not computed; begin hook did not run");
        const auto& p = *ctx->params;
        // recall rows align with token positions: entry j is only visible
        // from positions i >= j
        return ExtraKV<T>{matmul(ctx->recall, p.mem_k[static_cast<size_t>(l)]),
                          matmul(ctx->recall, p.mem_v[static_cast<size_t>(l)]),
                          causal_mask<T>(ctx->recall.dim(0))};
      };
      break;
    case Method::xattn:
      hooks.post_attn = [ctx](int l, const Tensor<T>& h) {
        const auto& p = *ctx->params;
        const size_t li = static_cast<size_t>(l);
        auto c = detail::cross_attention(h, ctx->state->banks[0], p.xq[li], p.xk[li], p.xv[li],
                                         p.xo[li], p.bb);
        return add(h, scale_by(c, p.beta[li]));
      };
      break;
    case Method::gated_branch:
      hooks.post_attn = [ctx](int l, const Tensor<T>& h) {
        const auto& p = *ctx->params;
        const size_t li = static_cast<size_t>(l);
        auto c = detail::cross_attention(h, ctx->state->banks[0], p.xq[li], p.xk[li], p.xv[li],
                                         p.xo[li], p.bb);
        auto g = sigmoid(add_row_bias(matmul(concat_cols(h, c), p.gate_w[li]), p.gate_b[li]));
        return add(h, mul(g, c));
      };
      break;
    case Method::baseline:
      break;
  }
  return hooks;
}

template <typename T>
void write_step(MemoryState<T>& state, const AdapterParams<T>& params, const Tensor<T>& H_final,
                const std::vector<Tensor<T>>* per_layer_H) {
  ENGRAM_CHECK(Tape<T>::active() == nullptr, Error::Kind::Contract,
               "memory writes run without gradient recording; a tape is live");
  ENGRAM_CHECK(!H_final.attached(), Error::Kind::Contract,
               "write rules take detached hidden states, got a graph-attached tensor");
  ENGRAM_CHECK(state.method == params.method, Error::Kind::Contract,
               "memory state carries method ", method_tag(state.method),
               " but the adapter is ", method_tag(params.method));
  switch (params.method) {
    case Method::kv_prefix:
    case Method::xattn:
    case Method::gated_branch:
      state.banks[0] = write_attention(state.banks[0], H_final, params.write[0], params.decay);
      break;
    case Method::per_layer_kv: {
      ENGRAM_CHECK(per_layer_H != nullptr &&
                       static_cast<int>(per_layer_H->size()) == params.bb.n_layers,
                   Error::Kind::Contract,
                   "per-layer banks need one hidden state per layer to write from");
      for (size_t l = 0; l < state.banks.size(); ++l) {
        ENGRAM_CHECK(!(*per_layer_H)[l].attached(), Error::Kind::Contract,
                     "write rules take detached hidden states, got a graph-attached tensor");
        state.banks[l] =
            write_attention(state.banks[l], (*per_layer_H)[l], params.write[l], params.decay);
      }
      break;
    }
    case Method::hebbian:
      state.banks[0] =
          write_hebbian(state.banks[0], H_final, params.heb_k, params.heb_v, params.decay);
      break;
    case Method::slot_write: {
      auto [bank, written] = write_slot(state.banks[0], H_final, params.addr_token,
                                        params.addr_slot, params.write[0].wv, params.decay,
                                        params.dims.top_k);
      state.banks[0] = std::move(bank);
      state.last_written = std::move(written);
      break;
    }
    case Method::baseline:
      fail(Error::Kind::Contract, "the stateless baseline has no write step");
  }
  state.turn += 1;
}

}  // namespace engram
