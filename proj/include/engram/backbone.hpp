#pragma once

#include <functional>
#include <optional>
#include <utility>
#include <vector>

#include "engram/ops.hpp"
#include "engram/tape.hpp"
#include "engram/tensor.hpp"

namespace engram {

struct BackboneConfig {
  int n_layers = 4;
  int d_model = 128;
  int n_heads = 4;
  int d_k = 32;
  int d_v = 32;
  int vocab = 512;
  int n_ctx = 256;
  int mlp_ratio = 4;

  void validate() const {
    ENGRAM_CHECK(n_layers > 0 && d_model > 0 && n_heads > 0 && vocab > 0 && n_ctx > 0,
                 Error::Kind::Config, "backbone dimensions must be positive");
    ENGRAM_CHECK(n_heads * d_k == d_model, Error::Kind::Config,
                 "n_heads*d_k = ", n_heads * d_k, " must equal d_model = ", d_model);
    ENGRAM_CHECK(n_heads * d_v == d_model, Error::Kind::Config,
                 "n_heads*d_v = ", n_heads * d_v, " must equal d_model = ", d_model);
  }

  bool operator==(const BackboneConfig&) const = default;
};

template <typename T>
struct LayerWeights {
  Tensor<T> wq, wk, wv, wo;
  Tensor<T> ln1_g, ln1_b, ln2_g, ln2_b;
  Tensor<T> mlp_w1, mlp_b1, mlp_w2, mlp_b2;
};

// Decoder-only pre-norm transformer with tied input/output embeddings.
// Positions get learned embeddings; memory entries injected through hooks
// deliberately get none.
template <typename T>
struct BackboneWeights {
  BackboneConfig cfg;
  Tensor<T> tok_emb, pos_emb;
  Tensor<T> lnf_g, lnf_b;
  std::vector<LayerWeights<T>> layers;

  static BackboneWeights init(const BackboneConfig& cfg, Rng& rng) {
    cfg.validate();
    BackboneWeights w;
    w.cfg = cfg;
    const T std_w = T(0.02);
    w.tok_emb = Tensor<T>::randn(Shape{cfg.vocab, cfg.d_model}, rng, std_w);
    w.pos_emb = Tensor<T>::randn(Shape{cfg.n_ctx, cfg.d_model}, rng, std_w);
    w.lnf_g = Tensor<T>(Shape{cfg.d_model}, T(1));
    w.lnf_b = Tensor<T>(Shape{cfg.d_model});
    for (int l = 0; l < cfg.n_layers; ++l) {
      LayerWeights<T> lw;
      lw.wq = Tensor<T>::randn(Shape{cfg.d_model, cfg.n_heads * cfg.d_k}, rng, std_w);
      lw.wk = Tensor<T>::randn(Shape{cfg.d_model, cfg.n_heads * cfg.d_k}, rng, std_w);
      lw.wv = Tensor<T>::randn(Shape{cfg.d_model, cfg.n_heads * cfg.d_v}, rng, std_w);
      lw.wo = Tensor<T>::randn(Shape{cfg.n_heads * cfg.d_v, cfg.d_model}, rng, std_w);
      lw.ln1_g = Tensor<T>(Shape{cfg.d_model}, T(1));
      lw.ln1_b = Tensor<T>(Shape{cfg.d_model});
      lw.ln2_g = Tensor<T>(Shape{cfg.d_model}, T(1));
      lw.ln2_b = Tensor<T>(Shape{cfg.d_model});
      lw.mlp_w1 = Tensor<T>::randn(Shape{cfg.d_model, cfg.mlp_ratio * cfg.d_model}, rng, std_w);
      lw.mlp_b1 = Tensor<T>(Shape{cfg.mlp_ratio * cfg.d_model});
      lw.mlp_w2 = Tensor<T>::randn(Shape{cfg.mlp_ratio * cfg.d_model, cfg.d_model}, rng, std_w);
      lw.mlp_b2 = Tensor<T>(Shape{cfg.d_model});
      w.layers.push_back(std::move(lw));
    }
    return w;
  }

  std::vector<std::pair<std::string, Tensor<T>*>> named_params() {
    std::vector<std::pair<std::string, Tensor<T>*>> out;
    out.emplace_back("tok_emb", &tok_emb);
    out.emplace_back("pos_emb", &pos_emb);
    out.emplace_back("lnf_g", &lnf_g);
    out.emplace_back("lnf_b", &lnf_b);
    for (size_t l = 0; l < layers.size(); ++l) {
      auto& lw = layers[l];
      std::string p = "layers." + std::to_string(l) + ".";
      out.emplace_back(p + "wq", &lw.wq);
      out.emplace_back(p + "wk", &lw.wk);
      out.emplace_back(p + "wv", &lw.wv);
      out.emplace_back(p + "wo", &lw.wo);
      out.emplace_back(p + "ln1_g", &lw.ln1_g);
      out.emplace_back(p + "ln1_b", &lw.ln1_b);
      out.emplace_back(p + "ln2_g", &lw.ln2_g);
      out.emplace_back(p + "ln2_b", &lw.ln2_b);
      out.emplace_back(p + "mlp_w1", &lw.mlp_w1);
      out.emplace_back(p + "mlp_b1", &lw.mlp_b1);
      out.emplace_back(p + "mlp_w2", &lw.mlp_w2);
      out.emplace_back(p + "mlp_b2", &lw.mlp_b2);
    }
    return out;
  }

  std::vector<std::pair<std::string, const Tensor<T>*>> named_params() const {
    auto mut = const_cast<BackboneWeights*>(this)->named_params();
    std::vector<std::pair<std::string, const Tensor<T>*>> out;
    out.reserve(mut.size());
    for (auto& [n, p] : mut) out.emplace_back(n, p);
    return out;
  }

  void set_trainable(bool trainable) {
    for (auto& [name, p] : named_params()) p->set_requires_grad(trainable);
  }

  bool frozen() const {
    for (auto& [name, p] : named_params())
      if (p->requires_grad()) return false;
    return true;
  }

  uint64_t value_hash() const {
    uint64_t h = 0xcbf29ce484222325ull;
    for (auto& [name, p] : named_params()) {
      h = fnv1a64(name, h);
      h = fnv1a64(p->ptr(), sizeof(T) * p->numel(), h);
    }
    return h;
  }

  int64_t param_count() const {
    int64_t n = 0;
    for (auto& [name, p] : named_params()) n += p->numel();
    return n;
  }
};

// Extra key/value rows prepended to self-attention. k is p x (n_heads*d_k),
// v is p x (n_heads*d_v). mask is n x p with 0/-inf entries; an undefined
// mask means every position may attend to every memory entry.
template <typename T>
struct ExtraKV {
  Tensor<T> k, v;
  Tensor<T> mask;
};

// Adapter touchpoints inside the frozen forward pass. begin runs once on the
// embedding output, extra_kv supplies per-layer memory rows for attention,
// post_attn rewrites the hidden state between the attention and MLP halves
// of a block. Any of them may be empty.
template <typename T>
struct InjectionHooks {
  std::function<void(const Tensor<T>& h0)> begin;
  std::function<std::optional<ExtraKV<T>>(int layer)> extra_kv;
  std::function<Tensor<T>(int layer, const Tensor<T>& h)> post_attn;
};

template <typename T>
struct HiddenStates {
  std::vector<Tensor<T>> layer_in;  // input hidden state of each block
  Tensor<T> final_h;                // post final-norm state that feeds the head
};

template <typename T>
Tensor<T> causal_self_attention(const Tensor<T>& x, const LayerWeights<T>& lw,
                                const BackboneConfig& cfg,
                                const std::optional<ExtraKV<T>>& extra = std::nullopt) {
  const int n = x.dim(0);
  ENGRAM_CHECK(x.ndim() == 2 && x.dim(1) == cfg.d_model, Error::Kind::Shape,
               "attention input shape ", shape_str(x.shape()), " does not match d_model ",
               cfg.d_model);
  int p = 0;
  if (extra) {
    ENGRAM_CHECK(extra->k.ndim() == 2 && extra->k.dim(1) == cfg.n_heads * cfg.d_k,
                 Error::Kind::Shape, "memory K width ", shape_str(extra->k.shape()),
                 " does not match heads*d_k = ", cfg.n_heads * cfg.d_k);
    ENGRAM_CHECK(extra->v.ndim() == 2 && extra->v.dim(1) == cfg.n_heads * cfg.d_v &&
                     extra->v.dim(0) == extra->k.dim(0),
                 Error::Kind::Shape, "memory V shape ", shape_str(extra->v.shape()),
                 " does not pair with K of ", extra->k.dim(0), " entries");
    p = extra->k.dim(0);
    if (extra->mask.defined())
      ENGRAM_CHECK(extra->mask.ndim() == 2 && extra->mask.dim(0) == n && extra->mask.dim(1) == p,
                   Error::Kind::Shape, "memory mask shape ", shape_str(extra->mask.shape()),
                   " must be ", n, "x", p);
  }
  auto q = matmul(x, lw.wq);
  auto k = matmul(x, lw.wk);
  auto v = matmul(x, lw.wv);
  const T inv_sqrt = T(1) / std::sqrt(T(cfg.d_k));
  auto cmask = causal_mask<T>(n);
  Tensor<T> heads_out;
  for (int h = 0; h < cfg.n_heads; ++h) {
    auto qh = slice_cols(q, h * cfg.d_k, cfg.d_k);
    auto kh = slice_cols(k, h * cfg.d_k, cfg.d_k);
    auto vh = slice_cols(v, h * cfg.d_v, cfg.d_v);
    auto self_scores = add_masked(scale(matmul(qh, transpose(kh)), inv_sqrt), cmask);
    Tensor<T> weights, values;
    if (p > 0) {
      auto mk = slice_cols(extra->k, h * cfg.d_k, cfg.d_k);
      auto mv = slice_cols(extra->v, h * cfg.d_v, cfg.d_v);
      auto mem_scores = scale(matmul(qh, transpose(mk)), inv_sqrt);
      if (extra->mask.defined()) mem_scores = add_masked(mem_scores, extra->mask);
      weights = softmax_rows(concat_cols(mem_scores, self_scores));
      values = concat_rows(mv, vh);
    } else {
      weights = softmax_rows(self_scores);
      values = vh;
    }
    auto oh = matmul(weights, values);
    heads_out = h == 0 ? oh : concat_cols(heads_out, oh);
  }
  return matmul(heads_out, lw.wo);
}

// Full forward pass. Returns per-layer block inputs plus the final normed
// hidden state, and the logits from the tied embedding head.
template <typename T>
std::pair<HiddenStates<T>, Tensor<T>> backbone_forward(const std::vector<int>& tokens,
                                                       const BackboneWeights<T>& w,
                                                       const InjectionHooks<T>* hooks = nullptr) {
  const auto& cfg = w.cfg;
  const int n = static_cast<int>(tokens.size());
  ENGRAM_CHECK(n > 0, Error::Kind::Shape, "forward on an empty token sequence");
  ENGRAM_CHECK(n <= cfg.n_ctx, Error::Kind::Shape, "sequence of ", n,
               " tokens exceeds the ", cfg.n_ctx, "-token context");
  auto h = add(embedding(w.tok_emb, tokens), slice_rows(w.pos_emb, 0, n));
  if (hooks && hooks->begin) hooks->begin(h);
  HiddenStates<T> hs;
  for (int l = 0; l < cfg.n_layers; ++l) {
    hs.layer_in.push_back(h);
    const auto& lw = w.layers[size_t(l)];
    std::optional<ExtraKV<T>> extra;
    if (hooks && hooks->extra_kv) extra = hooks->extra_kv(l);
    auto attn = causal_self_attention(layer_norm(h, lw.ln1_g, lw.ln1_b), lw, cfg, extra);
    h = add(h, attn);
    if (hooks && hooks->post_attn) {
      Tensor<T> replaced = hooks->post_attn(l, h);
      if (replaced.defined()) h = replaced;
    }
    auto m = layer_norm(h, lw.ln2_g, lw.ln2_b);
    auto up = gelu(add_row_bias(matmul(m, lw.mlp_w1), lw.mlp_b1));
    h = add(h, add_row_bias(matmul(up, lw.mlp_w2), lw.mlp_b2));
  }
  hs.final_h = layer_norm(h, w.lnf_g, w.lnf_b);
  auto logits = matmul(hs.final_h, transpose(w.tok_emb));
  return {std::move(hs), std::move(logits)};
}

struct GenResult {
  std::vector<int> tokens;  // input plus generated continuation
  bool truncated = false;   // stopped because the context filled up
};

// Greedy decoding; ties resolve to the lowest token id, a generated stop
// token is kept in the output.
template <typename T>
GenResult generate(std::vector<int> tokens, const BackboneWeights<T>& w,
                   const InjectionHooks<T>* hooks, int max_new, int stop_token) {
  ENGRAM_CHECK(max_new >= 0, Error::Kind::Value, "max_new must be non-negative");
  GenResult res;
  for (int step = 0; step < max_new; ++step) {
    if (static_cast<int>(tokens.size()) >= w.cfg.n_ctx) {
      res.truncated = true;
      break;
    }
    auto [hs, logits] = backbone_forward(tokens, w, hooks);
    const int n = logits.dim(0), v = logits.dim(1);
    int best = 0;
    T best_val = logits.at(n - 1, 0);
    for (int j = 1; j < v; ++j)
      if (logits.at(n - 1, j) > best_val) {
        best_val = logits.at(n - 1, j);
        best = j;
      }
    tokens.push_back(best);
    if (best == stop_token) break;
  }
  res.tokens = std::move(tokens);
  return res;
}

}  // namespace engram
