#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "engram/adamw.hpp"
#include "engram/pretrain.hpp"
#include "engram/train.hpp"
#include "test_support.hpp"

using namespace engram;
using namespace testsup;

namespace {

Vocab small_vocab() {
  VocabConfig vc;
  vc.size = 64;
  vc.n_entities = 6;
  vc.n_attributes = 4;
  vc.n_values = 20;
  return Vocab(vc);
}

BackboneConfig small_backbone_config() {
  BackboneConfig cfg;
  cfg.n_layers = 2;
  cfg.d_model = 16;
  cfg.n_heads = 2;
  cfg.d_k = 8;
  cfg.d_v = 8;
  cfg.vocab = 64;
  cfg.n_ctx = 32;
  cfg.mlp_ratio = 2;
  return cfg;
}

MemoryDims small_dims() { return MemoryDims{3, 6, 4, 2}; }

std::vector<Dialogue> small_corpus(const Vocab& vocab, int n_dialogues, uint64_t seed,
                                   double distractor_rate = 0.25) {
  BenchConfig bc;
  bc.n_dialogues = n_dialogues;
  bc.n_sessions = 22;
  bc.turns_per_session = 12;
  bc.qa_per_bucket = 1;
  bc.distractor_rate = distractor_rate;
  bc.seed = seed;
  return generate_benchmark(bc, vocab);
}

Dialogue hand_dialogue(const Vocab& v) {
  Dialogue d;
  d.seed = 1;
  Session s1, s2;
  s1.turns.push_back({v.speaker(0), v.entity(0) + " " + v.attribute(0) + " is " + v.value(1)});
  s1.turns.push_back({v.speaker(1), v.filler(0) + " " + v.filler(1)});
  s2.turns.push_back({v.speaker(0), v.entity(1) + " " + v.attribute(1) + " is " + v.value(2)});
  s2.turns.push_back({v.speaker(1), v.filler(2)});
  d.sessions = {s1, s2};
  QAItem q;
  q.question = "what is " + v.entity(0) + " " + v.attribute(0);
  q.answer = v.value(1);
  q.evidence = {{0, 0}};
  q.ask_after_turn = 2;
  q.session = 1;
  d.qa = {q};
  return d;
}

}  // namespace

TEST_CASE("train config validation and step geometry") {
  TrainConfig cfg;
  CHECK(cfg.turns_per_step() == 128);
  cfg.validate();

  TrainConfig bad = cfg;
  bad.patience = 0;
  CHECK_THROWS_AS(bad.validate(), Error);
  bad = cfg;
  bad.k_turns = 0;
  CHECK_THROWS_AS(bad.validate(), Error);
  bad = cfg;
  bad.val_fraction = 1.0f;
  CHECK_THROWS_AS(bad.validate(), Error);
}

TEST_CASE("dialogue samples splice probes after their ask points") {
  auto vocab = small_vocab();
  auto d = hand_dialogue(vocab);
  auto samples = dialogue_samples(d, vocab);
  REQUIRE(samples.size() == 5);

  // statements in global order, each supervised over its full length
  for (size_t i : {size_t(0), size_t(1), size_t(2), size_t(4)}) {
    CHECK(samples[i].writes);
    CHECK(samples[i].loss_start == 0);
    CHECK(samples[i].loss_len == static_cast<int>(samples[i].tokens.size()) - 1);
  }
  // the probe follows global turn 2 and precedes turn 3
  const auto& probe = samples[3];
  CHECK_FALSE(probe.writes);
  CHECK(probe.tokens.front() == Vocab::kQuery);
  CHECK(probe.tokens.back() == Vocab::kEoa);
  CHECK(probe.tokens[probe.tokens.size() - 2] == vocab.lookup(vocab.value(1)));
  CHECK(probe.loss_len == 2);
  CHECK(probe.loss_start == static_cast<int>(probe.tokens.size()) - 3);

  Dialogue broken = d;
  broken.qa[0].ask_after_turn = 99;
  CHECK_THROWS_AS(dialogue_samples(broken, vocab), Error);
}

TEST_CASE("adamw: no-op update, clipping, scalar reference") {
  SUBCASE("zero grads and zero decay leave parameters untouched") {
    auto p = Tensor<float>::from(Shape{3}, {1.0f, -2.0f, 0.5f});
    p.ensure_grad();
    AdamWConfig<float> cfg;
    cfg.weight_decay = 0.0f;
    AdamW<float> opt({&p}, cfg);
    opt.step();
    CHECK(p.at(0) == 1.0f);
    CHECK(p.at(1) == -2.0f);
    CHECK(p.at(2) == 0.5f);
  }

  SUBCASE("global norm above the ceiling is scaled to it") {
    auto p = Tensor<float>::from(Shape{4}, {1.0f, 1.0f, 1.0f, 1.0f});
    p.ensure_grad();
    p.grad() = {10.0f, 0.0f, 0.0f, 0.0f};
    AdamWConfig<float> cfg;
    cfg.clip = 1.0f;
    cfg.weight_decay = 0.0f;
    AdamW<float> opt({&p}, cfg);
    const float pre_norm = opt.step();
    CHECK(pre_norm == doctest::Approx(10.0f).epsilon(1e-6));
    // with the clipped grad g=1: m=0.1, v=0.001, bias correction makes
    // mhat=1, vhat=1, so the update is lr/(1+eps)
    const float expect = 1.0f - cfg.lr / (1.0f + cfg.eps);
    CHECK(p.at(0) == doctest::Approx(expect).epsilon(1e-7));
    CHECK(p.at(1) == 1.0f);
  }

  SUBCASE("one step matches a scalar reference") {
    Rng rng(5);
    auto p = Tensor<float>::randn(Shape{2, 3}, rng, 1.0f);
    auto q = Tensor<float>::randn(Shape{4}, rng, 1.0f);
    auto p0 = p.clone(), q0 = q.clone();
    p.ensure_grad();
    q.ensure_grad();
    for (auto& g : p.grad()) g = float(rng.normal(0.0, 0.3));
    for (auto& g : q.grad()) g = float(rng.normal(0.0, 0.3));
    auto pg = p.grad();
    auto qg = q.grad();

    AdamWConfig<float> cfg;
    cfg.lr = 3e-3f;
    cfg.weight_decay = 0.01f;
    cfg.clip = 1.0f;
    AdamW<float> opt({&p, &q}, cfg);
    opt.step();

    double norm_sq = 0.0;
    for (float g : pg) norm_sq += double(g) * g;
    for (float g : qg) norm_sq += double(g) * g;
    const double scale = std::sqrt(norm_sq) > 1.0 ? 1.0 / std::sqrt(norm_sq) : 1.0;
    auto reference = [&](float v, float g) {
      const double gc = double(g) * scale;
      const double m = 0.1 * gc;
      const double var = 0.001 * gc * gc;
      const double mhat = m / (1.0 - 0.9);
      const double vhat = var / (1.0 - 0.999);
      return v - cfg.lr * (mhat / (std::sqrt(vhat) + cfg.eps) + cfg.weight_decay * v);
    };
    for (int64_t i = 0; i < p.numel(); ++i)
      CHECK(std::abs(p.ptr()[i] - reference(p0.ptr()[i], pg[size_t(i)])) < 1e-7);
    for (int64_t i = 0; i < q.numel(); ++i)
      CHECK(std::abs(q.ptr()[i] - reference(q0.ptr()[i], qg[size_t(i)])) < 1e-7);
  }

  SUBCASE("warmup ramps the learning rate linearly") {
    auto p = Tensor<float>::from(Shape{1}, {0.0f});
    AdamWConfig<float> cfg;
    cfg.warmup_steps = 4;
    cfg.lr = 1.0f;
    AdamW<float> opt({&p}, cfg);
    opt.step();
    CHECK(opt.current_lr() == doctest::Approx(0.25f));
    opt.step();
    CHECK(opt.current_lr() == doctest::Approx(0.5f));
    opt.step();
    opt.step();
    CHECK(opt.current_lr() == doctest::Approx(1.0f));
  }
}

TEST_CASE("zero learning rate leaves the adapter bitwise unchanged") {
  auto vocab = small_vocab();
  auto corpus = small_corpus(vocab, 2, 31);
  Rng rng(7);
  auto bb = BackboneWeights<float>::init(small_backbone_config(), rng);
  auto adapter = AdapterParams<float>::init(Method::kv_prefix, bb.cfg, small_dims(), 0.95f, 9);

  const uint64_t before = adapter.value_hash();
  TrainConfig cfg;
  cfg.lr = 0.0f;
  cfg.weight_decay = 0.0f;
  cfg.epochs = 1;
  cfg.batch = 1;
  cfg.accum = 1;
  cfg.seed = 3;
  auto result = type1_train(bb, adapter, corpus, vocab, cfg);
  CHECK(adapter.value_hash() == before);
  CHECK(result.step_losses.size() > 0);
  for (float l : result.step_losses) CHECK(std::isfinite(l));
}

TEST_CASE("training is deterministic and preserves frozen weights") {
  auto vocab = small_vocab();
  auto corpus = small_corpus(vocab, 2, 33);
  Rng rng(11);
  auto bb = BackboneWeights<float>::init(small_backbone_config(), rng);
  const uint64_t bb_hash = bb.value_hash();

  TrainConfig cfg;
  cfg.lr = 1e-3f;
  cfg.warmup_steps = 10;
  cfg.epochs = 2;
  cfg.batch = 1;
  cfg.accum = 2;
  cfg.seed = 5;

  auto run = [&](TrainResult* out) {
    auto adapter = AdapterParams<float>::init(Method::kv_prefix, bb.cfg, small_dims(), 0.95f, 13);
    const uint64_t fixed_before = adapter.fixed_hash();
    *out = type1_train(bb, adapter, corpus, vocab, cfg);
    CHECK(adapter.fixed_hash() == fixed_before);
    return adapter.value_hash();
  };
  TrainResult r1, r2;
  const uint64_t h1 = run(&r1);
  const uint64_t h2 = run(&r2);
  CHECK(h1 == h2);
  REQUIRE(r1.step_losses.size() == r2.step_losses.size());
  for (size_t i = 0; i < r1.step_losses.size(); ++i)
    CHECK(r1.step_losses[i] == r2.step_losses[i]);
  REQUIRE(r1.val_losses.size() == r2.val_losses.size());
  for (size_t i = 0; i < r1.val_losses.size(); ++i) CHECK(r1.val_losses[i] == r2.val_losses[i]);
  CHECK(bb.value_hash() == bb_hash);
  CHECK(bb.frozen());
}

TEST_CASE("memory carried across turns transports values, never graph") {
  auto vocab = small_vocab();
  Rng rng(17);
  auto bb = BackboneWeights<float>::init(small_backbone_config(), rng);
  auto adapter = AdapterParams<float>::init(Method::kv_prefix, bb.cfg, small_dims(), 0.95f, 19);
  auto turn_a = vocab.encode(vocab.speaker(0) + " " + vocab.entity(0) + " " + vocab.attribute(0) +
                             " is " + vocab.value(3));
  auto turn_b = vocab.encode(vocab.speaker(1) + " " + vocab.entity(1) + " " + vocab.attribute(1) +
                             " is " + vocab.value(4));
  std::vector<int> targets(turn_b.begin() + 1, turn_b.end());

  auto collect_grads = [&](MemoryState<float>& state) {
    auto hooks = make_read_hooks(state, adapter);
    for (auto& [name, p] : adapter.trainable()) p->zero_grad();
    float loss_val = 0.0f;
    {
      Tape<float> tape;
      auto [hs, logits] = backbone_forward(turn_b, bb, &hooks);
      auto loss = cross_entropy(slice_rows(logits, 0, int(turn_b.size()) - 1), targets);
      loss_val = loss.item();
      tape.backward(loss);
    }
    std::vector<std::vector<float>> grads;
    for (auto& [name, p] : adapter.trainable())
      grads.push_back(p->has_grad() ? p->grad() : std::vector<float>{});
    return std::make_pair(loss_val, grads);
  };

  // chain: process turn A with a taped read, then write, then read at turn B
  auto state1 = init_memory<float>(Method::kv_prefix, small_dims(), bb.cfg);
  Tensor<float> h_keep;
  {
    auto hooks = make_read_hooks(state1, adapter);
    Tape<float> tape;
    auto [hs, logits] = backbone_forward(turn_a, bb, &hooks);
    h_keep = hs.final_h;
  }
  write_step(state1, adapter, detach(h_keep));
  CHECK_FALSE(state1.banks[0].attached());
  auto [loss1, grads1] = collect_grads(state1);

  // same bank values injected directly, with no turn-A history at all
  auto state2 = init_memory<float>(Method::kv_prefix, small_dims(), bb.cfg);
  state2.banks[0] = state1.banks[0].clone();
  auto [loss2, grads2] = collect_grads(state2);

  CHECK(loss1 == loss2);
  REQUIRE(grads1.size() == grads2.size());
  for (size_t i = 0; i < grads1.size(); ++i) {
    REQUIRE(grads1[i].size() == grads2[i].size());
    for (size_t j = 0; j < grads1[i].size(); ++j) CHECK(grads1[i][j] == grads2[i][j]);
  }
}

TEST_CASE("validation loss: duplicates count per copy, empty set rejected") {
  auto vocab = small_vocab();
  auto corpus = small_corpus(vocab, 1, 41);
  Rng rng(23);
  auto bb = BackboneWeights<float>::init(small_backbone_config(), rng);
  auto adapter = AdapterParams<float>::init(Method::xattn, bb.cfg, small_dims(), 0.95f, 25);

  const float one = validation_loss(bb, adapter, {corpus[0]}, vocab);
  const float two = validation_loss(bb, adapter, {corpus[0], corpus[0]}, vocab);
  CHECK(one == doctest::Approx(two).epsilon(1e-6));
  CHECK(one >= 0.0f);
  CHECK_THROWS_AS(validation_loss(bb, adapter, {}, vocab), Error);
}

TEST_CASE("early stopping fires when validation stalls and restores the best epoch") {
  auto vocab = small_vocab();
  auto corpus = small_corpus(vocab, 2, 43);
  Rng rng(29);
  auto bb = BackboneWeights<float>::init(small_backbone_config(), rng);
  auto adapter = AdapterParams<float>::init(Method::kv_prefix, bb.cfg, small_dims(), 0.95f, 27);

  TrainConfig cfg;
  cfg.lr = 0.0f;  // validation loss can never improve after the first epoch
  cfg.epochs = 6;
  cfg.patience = 2;
  cfg.batch = 1;
  cfg.accum = 1;
  cfg.seed = 7;
  auto result = type1_train(bb, adapter, corpus, vocab, cfg);
  CHECK(result.early_stopped);
  CHECK(result.val_losses.size() == 3);  // best epoch plus `patience` stalled epochs
  CHECK(result.best_epoch == 0);
  CHECK(result.best_val_loss == result.val_losses[0]);
}

TEST_CASE("non-finite losses abort with a diagnostic") {
  auto vocab = small_vocab();
  auto corpus = small_corpus(vocab, 1, 47);
  Rng rng(31);
  auto bb = BackboneWeights<float>::init(small_backbone_config(), rng);
  auto adapter = AdapterParams<float>::init(Method::kv_prefix, bb.cfg, small_dims(), 0.95f, 29);
  const float nan = std::numeric_limits<float>::quiet_NaN();
  for (auto& t : adapter.mem_k)
    for (int64_t i = 0; i < t.numel(); ++i) t.ptr()[i] = nan;

  TrainConfig cfg;
  cfg.epochs = 1;
  cfg.batch = 1;
  cfg.accum = 1;
  cfg.seed = 9;
  CHECK_THROWS_WITH_AS(type1_train(bb, adapter, corpus, vocab, cfg),
                       doctest::Contains("training aborted"), Error);
}

TEST_CASE("a single dialogue is overfit by the parallel branch") {
  auto vocab = small_vocab();

  Dialogue d;
  d.seed = 1;
  Session s1, s2;
  for (int i = 0; i < 6; ++i) {
    std::string text = vocab.entity(i % 6) + " " + vocab.attribute((i * 2) % 4) + " is " +
                       vocab.value((i * 3 + 1) % 20);
    s1.turns.push_back({vocab.speaker(i % 2), text});
    s2.turns.push_back({vocab.speaker((i + 1) % 2), text});
  }
  d.sessions = {s1, s2};
  QAItem q;
  q.question = "what is " + vocab.entity(0) + " " + vocab.attribute(0);
  q.answer = vocab.value(1);
  q.evidence = {{0, 0}};
  q.ask_after_turn = 6;
  q.session = 1;
  d.qa = {q};
  std::vector<Dialogue> corpus{d};

  Rng rng(37);
  auto bb = BackboneWeights<float>::init(small_backbone_config(), rng);
  PretrainStreamConfig sc;
  sc.n_blocks = 1500;
  auto stream = make_pretrain_stream(vocab, sc);
  PretrainConfig pc;
  pc.steps = 800;
  pc.seq_len = 24;
  pc.batch = 8;
  pc.seed = 3;
  pretrain(bb, stream, pc);

  auto adapter =
      AdapterParams<float>::init(Method::xattn, bb.cfg, MemoryDims{8, 6, 4, 2}, 0.95f, 33);

  const float untrained_val = validation_loss(bb, adapter, corpus, vocab);

  TrainConfig cfg;
  cfg.lr = 3e-3f;
  cfg.warmup_steps = 20;
  cfg.epochs = 100;
  cfg.batch = 1;
  cfg.accum = 1;
  cfg.patience = 100;
  cfg.seed = 11;
  auto result = type1_train(bb, adapter, corpus, vocab, cfg);

  REQUIRE(result.log.back().step == 200);
  const float trained_val = validation_loss(bb, adapter, corpus, vocab);
  MESSAGE("overfit: dialogue loss ", untrained_val, " -> ", trained_val, ", beta ",
          adapter.beta[0].item(), "/", adapter.beta[1].item());
  CHECK(trained_val < untrained_val - 0.008f);
  CHECK(std::abs(adapter.beta[0].item()) + std::abs(adapter.beta[1].item()) > 0.01f);
  for (const auto& rec : result.log) {
    CHECK(std::isfinite(rec.loss));
    CHECK(std::isfinite(rec.grad_norm));
    CHECK(rec.lr <= cfg.lr + 1e-9f);
  }
}
