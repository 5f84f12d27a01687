#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>

#include "engram/backbone.hpp"
#include "engram/bench.hpp"
#include "engram/checkpoint.hpp"
#include "engram/pretrain.hpp"
#include "engram/vocab.hpp"
#include "test_support.hpp"

using namespace engram;
using namespace testsup;

namespace {

BackboneConfig tiny_config() {
  BackboneConfig cfg;
  cfg.n_layers = 2;
  cfg.d_model = 8;
  cfg.n_heads = 2;
  cfg.d_k = 4;
  cfg.d_v = 4;
  cfg.vocab = 16;
  cfg.n_ctx = 12;
  cfg.mlp_ratio = 2;
  return cfg;
}

BackboneWeights<float> tiny_backbone(uint64_t seed = 11) {
  Rng rng(seed);
  return BackboneWeights<float>::init(tiny_config(), rng);
}

}  // namespace

TEST_CASE("self-attention matches a scalar-loop oracle") {
  BackboneConfig cfg;
  cfg.n_layers = 1;
  cfg.d_model = 4;
  cfg.n_heads = 2;
  cfg.d_k = 2;
  cfg.d_v = 2;
  cfg.vocab = 8;
  cfg.n_ctx = 8;
  Rng rng(3);
  auto x = Tensor<double>::randn(Shape{3, 4}, rng, 1.0);
  LayerWeights<double> lw;
  lw.wq = Tensor<double>::randn(Shape{4, 4}, rng, 0.7);
  lw.wk = Tensor<double>::randn(Shape{4, 4}, rng, 0.7);
  lw.wv = Tensor<double>::randn(Shape{4, 4}, rng, 0.7);
  lw.wo = Tensor<double>::randn(Shape{4, 4}, rng, 0.7);

  auto got = causal_self_attention(x, lw, cfg);
  auto want = brute_attention(x, lw.wq, lw.wk, lw.wv, lw.wo, cfg.n_heads);
  CHECK(max_abs_diff(got, want) < 1e-12);

  SUBCASE("with a two-entry memory prefix") {
    auto mk = Tensor<double>::randn(Shape{2, 4}, rng, 0.9);
    auto mv = Tensor<double>::randn(Shape{2, 4}, rng, 0.9);
    ExtraKV<double> extra{mk, mv, Tensor<double>()};
    auto got_mem = causal_self_attention<double>(x, lw, cfg, extra);
    auto want_mem = brute_attention(x, lw.wq, lw.wk, lw.wv, lw.wo, cfg.n_heads, &mk, &mv);
    CHECK(max_abs_diff(got_mem, want_mem) < 1e-12);
    // memory must move the output relative to the no-memory pass
    CHECK(max_abs_diff(got_mem, want) > 1e-4);
  }

  SUBCASE("with a partially masked memory") {
    auto mk = Tensor<double>::randn(Shape{2, 4}, rng, 0.9);
    auto mv = Tensor<double>::randn(Shape{2, 4}, rng, 0.9);
    const double ninf = -std::numeric_limits<double>::infinity();
    Tensor<double> mask(Shape{3, 2});
    mask.at(0, 1) = ninf;
    mask.at(2, 0) = ninf;
    ExtraKV<double> extra{mk, mv, mask};
    auto got_mem = causal_self_attention<double>(x, lw, cfg, extra);
    auto want_mem =
        brute_attention(x, lw.wq, lw.wk, lw.wv, lw.wo, cfg.n_heads, &mk, &mv, &mask);
    CHECK(max_abs_diff(got_mem, want_mem) < 1e-12);
  }

  SUBCASE("fully masked memory contributes nothing") {
    auto mk = Tensor<double>::randn(Shape{2, 4}, rng, 0.9);
    auto mv = Tensor<double>::randn(Shape{2, 4}, rng, 0.9);
    const double ninf = -std::numeric_limits<double>::infinity();
    Tensor<double> mask(Shape{3, 2}, 0.0);
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 2; ++j) mask.at(i, j) = ninf;
    ExtraKV<double> extra{mk, mv, mask};
    auto got_mem = causal_self_attention<double>(x, lw, cfg, extra);
    CHECK(max_abs_diff(got_mem, want) < 1e-12);
  }

  SUBCASE("shape mismatches are rejected") {
    ExtraKV<double> bad_k{Tensor<double>::randn(Shape{2, 6}, rng, 0.5),
                          Tensor<double>::randn(Shape{2, 4}, rng, 0.5), Tensor<double>()};
    CHECK_THROWS_AS(causal_self_attention<double>(x, lw, cfg, bad_k), Error);
    ExtraKV<double> bad_pair{Tensor<double>::randn(Shape{2, 4}, rng, 0.5),
                             Tensor<double>::randn(Shape{3, 4}, rng, 0.5), Tensor<double>()};
    CHECK_THROWS_AS(causal_self_attention<double>(x, lw, cfg, bad_pair), Error);
    ExtraKV<double> bad_mask{Tensor<double>::randn(Shape{2, 4}, rng, 0.5),
                             Tensor<double>::randn(Shape{2, 4}, rng, 0.5),
                             Tensor<double>(Shape{2, 2})};
    CHECK_THROWS_AS(causal_self_attention<double>(x, lw, cfg, bad_mask), Error);
  }
}

TEST_CASE("forward pass is deterministic and causal") {
  auto w = tiny_backbone();
  std::vector<int> tokens{1, 5, 3, 7, 2};
  auto [hs1, logits1] = backbone_forward(tokens, w);
  auto [hs2, logits2] = backbone_forward(tokens, w);
  CHECK(bitwise_equal(logits1, logits2));
  CHECK(static_cast<int>(hs1.layer_in.size()) == w.cfg.n_layers);
  CHECK(hs1.final_h.dim(0) == 5);
  CHECK(hs1.final_h.dim(1) == w.cfg.d_model);
  CHECK(logits1.dim(1) == w.cfg.vocab);

  // block 0 consumes exactly token plus position embeddings
  auto emb = add(embedding(w.tok_emb, tokens), slice_rows(w.pos_emb, 0, 5));
  CHECK(bitwise_equal(hs1.layer_in[0], emb));

  // changing a later token must leave earlier logits untouched
  std::vector<int> perturbed{1, 5, 3, 7, 9};
  auto [hs3, logits3] = backbone_forward(perturbed, w);
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < w.cfg.vocab; ++j) CHECK(logits1.at(i, j) == logits3.at(i, j));
  // and the final position must differ
  double moved = 0;
  for (int j = 0; j < w.cfg.vocab; ++j)
    moved = std::max(moved, std::abs(double(logits1.at(4, j)) - double(logits3.at(4, j))));
  CHECK(moved > 1e-6);
}

TEST_CASE("forward rejects empty and oversized inputs") {
  auto w = tiny_backbone();
  CHECK_THROWS_WITH_AS(backbone_forward<float>({}, w), doctest::Contains("empty"), Error);
  std::vector<int> too_long(static_cast<size_t>(w.cfg.n_ctx) + 1, 1);
  CHECK_THROWS_WITH_AS(backbone_forward(too_long, w), doctest::Contains("context"), Error);
  BackboneConfig bad = tiny_config();
  bad.d_k = 3;
  CHECK_THROWS_AS(bad.validate(), Error);
}

TEST_CASE("neutral hooks leave the forward pass unchanged") {
  auto w = tiny_backbone();
  std::vector<int> tokens{2, 9, 4};
  auto [hs, plain] = backbone_forward(tokens, w);

  int begin_calls = 0, kv_calls = 0, post_calls = 0;
  InjectionHooks<float> hooks;
  hooks.begin = [&](const Tensor<float>&) { ++begin_calls; };
  hooks.extra_kv = [&](int) -> std::optional<ExtraKV<float>> {
    ++kv_calls;
    return std::nullopt;
  };
  hooks.post_attn = [&](int, const Tensor<float>& h) {
    ++post_calls;
    return h;
  };
  auto [hs2, hooked] = backbone_forward(tokens, w, &hooks);
  CHECK(bitwise_equal(plain, hooked));
  CHECK(begin_calls == 1);
  CHECK(kv_calls == w.cfg.n_layers);
  CHECK(post_calls == w.cfg.n_layers);

  // a post_attn hook returning an undefined tensor means no replacement
  InjectionHooks<float> passive;
  passive.post_attn = [](int, const Tensor<float>&) { return Tensor<float>(); };
  auto [hs3, passive_out] = backbone_forward(tokens, w, &passive);
  CHECK(bitwise_equal(plain, passive_out));

  // a fully masked memory prefix is neutral up to float arithmetic
  Rng rng(21);
  auto mk = Tensor<float>::randn(Shape{2, w.cfg.n_heads * w.cfg.d_k}, rng, 0.5f);
  auto mv = Tensor<float>::randn(Shape{2, w.cfg.n_heads * w.cfg.d_v}, rng, 0.5f);
  const float ninf = -std::numeric_limits<float>::infinity();
  Tensor<float> mask(Shape{3, 2});
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 2; ++j) mask.at(i, j) = ninf;
  InjectionHooks<float> masked;
  masked.extra_kv = [&](int) -> std::optional<ExtraKV<float>> {
    return ExtraKV<float>{mk, mv, mask};
  };
  auto [hs4, masked_out] = backbone_forward(tokens, w, &masked);
  CHECK(max_abs_diff(masked_out, plain) < 1e-6);

  // an open memory prefix is not neutral
  InjectionHooks<float> open;
  open.extra_kv = [&](int) -> std::optional<ExtraKV<float>> {
    return ExtraKV<float>{mk, mv, Tensor<float>()};
  };
  auto [hs5, open_out] = backbone_forward(tokens, w, &open);
  CHECK(max_abs_diff(open_out, plain) > 1e-5);
}

TEST_CASE("greedy generation semantics") {
  SUBCASE("ties resolve to the lowest token id") {
    BackboneConfig cfg = tiny_config();
    Rng rng(5);
    auto w = BackboneWeights<float>::init(cfg, rng);
    // zero embeddings make every logit identical
    for (auto& [name, p] : w.named_params())
      for (int64_t i = 0; i < p->numel(); ++i) p->ptr()[i] = 0.0f;
    auto res = generate<float>({3, 4}, w, nullptr, 3, -1);
    CHECK(res.tokens == std::vector<int>{3, 4, 0, 0, 0});
    CHECK_FALSE(res.truncated);

    // a generated stop token ends decoding and stays in the output
    auto stopped = generate<float>({3, 4}, w, nullptr, 5, 0);
    CHECK(stopped.tokens == std::vector<int>{3, 4, 0});
    CHECK_FALSE(stopped.truncated);
  }

  SUBCASE("max_new of zero returns the input unchanged") {
    auto w = tiny_backbone();
    auto res = generate<float>({1, 2, 3}, w, nullptr, 0, 0);
    CHECK(res.tokens == std::vector<int>{1, 2, 3});
    CHECK_FALSE(res.truncated);
  }

  SUBCASE("a full context sets the truncation flag") {
    auto w = tiny_backbone();
    std::vector<int> full(static_cast<size_t>(w.cfg.n_ctx), 1);
    auto res = generate<float>(full, w, nullptr, 4, -1);
    CHECK(res.truncated);
    CHECK(res.tokens == full);

    std::vector<int> nearly(static_cast<size_t>(w.cfg.n_ctx) - 1, 1);
    auto res2 = generate<float>(nearly, w, nullptr, 4, -1);
    CHECK(res2.truncated);
    CHECK(static_cast<int>(res2.tokens.size()) == w.cfg.n_ctx);
  }

  SUBCASE("greedy step follows the argmax of the final position") {
    auto w = tiny_backbone();
    std::vector<int> tokens{1, 5, 3};
    auto [hs, logits] = backbone_forward(tokens, w);
    int best = 0;
    float best_val = logits.at(2, 0);
    for (int j = 1; j < w.cfg.vocab; ++j)
      if (logits.at(2, j) > best_val) {
        best_val = logits.at(2, j);
        best = j;
      }
    auto res = generate<float>(tokens, w, nullptr, 1, -1);
    REQUIRE(res.tokens.size() == 4);
    CHECK(res.tokens[3] == best);
  }
}

TEST_CASE("initialization is seed-deterministic and freezing works") {
  auto a = tiny_backbone(11);
  auto b = tiny_backbone(11);
  auto c = tiny_backbone(12);
  CHECK(a.value_hash() == b.value_hash());
  CHECK(a.value_hash() != c.value_hash());

  const auto& cfg = a.cfg;
  int64_t expect = int64_t(cfg.vocab) * cfg.d_model + int64_t(cfg.n_ctx) * cfg.d_model +
                   2 * cfg.d_model;
  int64_t per_layer = int64_t(cfg.d_model) * cfg.d_model * 4 + 4 * cfg.d_model +
                      int64_t(cfg.d_model) * cfg.mlp_ratio * cfg.d_model * 2 +
                      cfg.mlp_ratio * cfg.d_model + cfg.d_model;
  expect += cfg.n_layers * per_layer;
  CHECK(a.param_count() == expect);

  CHECK(a.frozen());
  a.set_trainable(true);
  CHECK_FALSE(a.frozen());
  CHECK(a.tok_emb.requires_grad());
  a.set_trainable(false);
  CHECK(a.frozen());

  // norm parameters start at identity
  for (int i = 0; i < cfg.d_model; ++i) {
    CHECK(a.lnf_g.at(i) == 1.0f);
    CHECK(a.lnf_b.at(i) == 0.0f);
  }
}

TEST_CASE("backbone checkpoints round-trip exactly") {
  auto w = tiny_backbone(31);
  VocabConfig vc;
  vc.size = 16;
  vc.n_entities = 2;
  vc.n_attributes = 2;
  vc.n_values = 2;
  const std::string path = "backbone_ckpt_test.bin";
  save_backbone(path, w, vc);

  auto [loaded, vc2] = load_backbone(path);
  CHECK(loaded.cfg == w.cfg);
  CHECK(loaded.value_hash() == w.value_hash());
  CHECK(loaded.frozen());
  CHECK(vc2.size == vc.size);
  CHECK(vc2.n_entities == vc.n_entities);

  // serialization is deterministic
  const std::string path2 = "backbone_ckpt_test2.bin";
  save_backbone(path2, loaded, vc2);
  CHECK(file_hash(path) == file_hash(path2));

  // truncated payloads are rejected
  {
    FILE* f = std::fopen(path.c_str(), "rb+");
    REQUIRE(f != nullptr);
    std::fseek(f, 0, SEEK_END);
    long size = std::ftell(f);
    std::fclose(f);
    REQUIRE(truncate(path.c_str(), size - 128) == 0);
  }
  CHECK_THROWS_AS(load_backbone(path), Error);
  std::remove(path.c_str());
  std::remove(path2.c_str());
}

TEST_CASE("raw checkpoint container stores a tensor directory") {
  Rng rng(9);
  auto a = Tensor<float>::randn(Shape{3, 4}, rng, 1.0f);
  auto b = Tensor<float>::randn(Shape{5}, rng, 1.0f);
  nlohmann::json cfg{{"note", "container test"}};
  const std::string path = "raw_ckpt_test.bin";
  save_checkpoint(path, "unit", cfg, {{"alpha", &a}, {"beta", &b}});

  auto ck = load_checkpoint(path);
  CHECK(ck.format_version == kCheckpointFormatVersion);
  CHECK(ck.kind == "unit");
  CHECK(ck.config["note"] == "container test");
  REQUIRE(ck.tensors.size() == 2);
  CHECK(ck.has("alpha"));
  CHECK_FALSE(ck.has("gamma"));
  CHECK(bitwise_equal(ck.tensor("alpha"), a));
  CHECK(bitwise_equal(ck.tensor("beta"), b));
  CHECK_THROWS_AS(ck.tensor("gamma"), Error);
  std::remove(path.c_str());
}

TEST_CASE("pretraining on the synthetic stream reaches a useful loss") {
  Vocab vocab{VocabConfig{}};
  PretrainStreamConfig scfg;
  scfg.n_blocks = 1200;
  scfg.seed = 17;
  auto stream = make_pretrain_stream(vocab, scfg);
  REQUIRE(static_cast<int>(stream.size()) > 8000);

  BackboneConfig cfg;
  cfg.n_layers = 2;
  cfg.d_model = 64;
  cfg.n_heads = 2;
  cfg.d_k = 32;
  cfg.d_v = 32;
  cfg.vocab = vocab.config().size;
  cfg.n_ctx = 128;
  Rng rng(7);
  auto w = BackboneWeights<float>::init(cfg, rng);

  PretrainConfig pcfg;
  pcfg.steps = 800;
  pcfg.seq_len = 64;
  pcfg.batch = 8;
  pcfg.seed = 23;
  auto res = pretrain(w, stream, pcfg);

  const float uniform = std::log(float(cfg.vocab));
  CHECK(std::abs(res.initial_heldout_loss - uniform) < 0.6f);
  CHECK(res.loss_decreased);
  CHECK(res.heldout_loss < 0.8f * uniform);
  CHECK(res.heldout_loss < res.initial_heldout_loss - 1.0f);
  CHECK(w.frozen());
  CHECK(static_cast<int>(res.step_losses.size()) == pcfg.steps);

  SUBCASE("zero steps only measures the held-out loss") {
    Rng rng2(7);
    auto w2 = BackboneWeights<float>::init(cfg, rng2);
    PretrainConfig zero = pcfg;
    zero.steps = 0;
    auto base = pretrain(w2, stream, zero);
    CHECK(base.heldout_loss == base.initial_heldout_loss);
    CHECK(std::abs(base.heldout_loss - uniform) < 0.6f);
    CHECK(w2.frozen());
  }
}
