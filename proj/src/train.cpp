#include "engram/train.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

#include "engram/adamw.hpp"
#include "engram/tape.hpp"

namespace engram {

void TrainConfig::validate() const {
  ENGRAM_CHECK(lr >= 0.0f && weight_decay >= 0.0f, Error::Kind::Config,
               "learning rate and weight decay must be nonnegative");
  ENGRAM_CHECK(warmup_steps >= 0, Error::Kind::Config, "warmup_steps must be nonnegative");
  ENGRAM_CHECK(clip_norm > 0.0f, Error::Kind::Config, "clip_norm must be positive");
  ENGRAM_CHECK(epochs > 0 && batch > 0 && accum > 0 && k_turns > 0, Error::Kind::Config,
               "epochs, batch, accum and k_turns must be positive");
  ENGRAM_CHECK(patience >= 1, Error::Kind::Config, "patience must be at least 1");
  ENGRAM_CHECK(val_fraction >= 0.0f && val_fraction < 1.0f, Error::Kind::Config,
               "val_fraction must lie in [0, 1)");
}

std::vector<TurnSample> dialogue_samples(const Dialogue& d, const Vocab& vocab) {
  const int total = d.total_turns();
  std::vector<std::vector<const QAItem*>> by_ask(static_cast<size_t>(total));
  for (const auto& q : d.qa) {
    ENGRAM_CHECK(q.ask_after_turn >= 0 && q.ask_after_turn < total, Error::Kind::Index,
                 "QA ask point ", q.ask_after_turn, " outside the dialogue's ", total, " turns");
    by_ask[static_cast<size_t>(q.ask_after_turn)].push_back(&q);
  }

  std::vector<TurnSample> out;
  int g = 0;
  for (const auto& session : d.sessions) {
    for (const auto& turn : session.turns) {
      TurnSample ts;
      ts.tokens = vocab.encode(turn.speaker + " " + turn.text);
      ts.loss_start = 0;
      ts.loss_len = static_cast<int>(ts.tokens.size()) - 1;
      ts.writes = true;
      out.push_back(std::move(ts));
      for (const QAItem* q : by_ask[static_cast<size_t>(g)]) {
        TurnSample ps;
        ps.tokens = vocab.encode("<q> " + q->question + " " + q->answer + " <eoa>");
        ENGRAM_CHECK(ps.tokens.size() >= 4, Error::Kind::Value, "QA probe '", q->question,
                     "' encodes to fewer than 4 tokens");
        ps.loss_start = static_cast<int>(ps.tokens.size()) - 3;
        ps.loss_len = 2;  // the answer token and the end-of-answer marker
        ps.writes = false;
        out.push_back(std::move(ps));
      }
      ++g;
    }
  }
  return out;
}

namespace {

struct TurnOutcome {
  float loss = 0.0f;
  bool supervised = false;
};

// Runs one sample through the model under the given hooks and, for writing
// samples, advances the memory chain from the detached hidden states.
TurnOutcome process_sample(const TurnSample& s, const BackboneWeights<float>& bb,
                           const AdapterParams<float>& adapter, MemoryState<float>& state,
                           const InjectionHooks<float>& hooks, float backward_scale) {
  TurnOutcome outcome;
  Tensor<float> h_final;
  std::vector<Tensor<float>> layer_in;
  {
    std::optional<Tape<float>> tape;
    if (backward_scale > 0.0f) tape.emplace();
    auto [hs, logits] = backbone_forward(s.tokens, bb, &hooks);
    if (s.loss_len > 0) {
      auto pred = slice_rows(logits, s.loss_start, s.loss_len);
      std::vector<int> targets(s.tokens.begin() + s.loss_start + 1,
                               s.tokens.begin() + s.loss_start + 1 + s.loss_len);
      auto loss = cross_entropy(pred, targets);
      outcome.loss = loss.item();
      outcome.supervised = true;
      if (tape) tape->backward(scale(loss, backward_scale));
    }
    h_final = hs.final_h;
    if (adapter.method == Method::per_layer_kv) layer_in = std::move(hs.layer_in);
  }
  if (s.writes) {
    if (adapter.method == Method::per_layer_kv) {
      std::vector<Tensor<float>> det;
      det.reserve(layer_in.size());
      for (const auto& h : layer_in) det.push_back(detach(h));
      write_step(state, adapter, detach(h_final), &det);
    } else {
      write_step(state, adapter, detach(h_final));
    }
  }
  return outcome;
}

float accumulated_grad_norm(const std::vector<Tensor<float>*>& params) {
  double sq = 0.0;
  for (const auto* p : params)
    if (p->has_grad())
      for (float g : p->grad()) sq += double(g) * g;
  return static_cast<float>(std::sqrt(sq));
}

}  // namespace

float validation_loss(const BackboneWeights<float>& bb, const AdapterParams<float>& adapter,
                      const std::vector<Dialogue>& val_set, const Vocab& vocab) {
  ENGRAM_CHECK(!val_set.empty(), Error::Kind::Config, "validation set is empty");
  ENGRAM_CHECK(Tape<float>::active() == nullptr, Error::Kind::Contract,
               "validation runs without gradient recording");
  double total = 0.0;
  int64_t count = 0;
  for (const auto& d : val_set) {
    auto samples = dialogue_samples(d, vocab);
    auto state = init_memory<float>(adapter.method, adapter.dims, bb.cfg);
    auto hooks = make_read_hooks(state, adapter);
    for (const auto& s : samples) {
      auto outcome = process_sample(s, bb, adapter, state, hooks, 0.0f);
      if (outcome.supervised) {
        total += outcome.loss;
        ++count;
      }
    }
  }
  ENGRAM_CHECK(count > 0, Error::Kind::Config, "validation set has no supervised turns");
  return static_cast<float>(total / double(count));
}

TrainResult type1_train(const BackboneWeights<float>& bb, AdapterParams<float>& adapter,
                        const std::vector<Dialogue>& corpus, const Vocab& vocab,
                        const TrainConfig& cfg, const std::string& log_path) {
  cfg.validate();
  ENGRAM_CHECK(!corpus.empty(), Error::Kind::Config, "training corpus is empty");
  ENGRAM_CHECK(adapter.method != Method::baseline, Error::Kind::Config,
               "the stateless baseline has nothing to train");
  ENGRAM_CHECK(bb.frozen(), Error::Kind::Contract, "backbone must be frozen before training");

  const uint64_t bb_hash = bb.value_hash();
  const uint64_t fixed_hash = adapter.fixed_hash();

  std::vector<size_t> order(corpus.size());
  std::iota(order.begin(), order.end(), size_t{0});
  Rng split_rng(cfg.seed);
  split_rng.shuffle(order);
  const int n_val =
      static_cast<int>(std::floor(double(corpus.size()) * double(cfg.val_fraction) + 1e-9));
  std::vector<Dialogue> val_set;
  std::vector<size_t> train_idx;
  for (size_t i = 0; i < order.size(); ++i) {
    if (static_cast<int>(i) < n_val)
      val_set.push_back(corpus[order[i]]);
    else
      train_idx.push_back(order[i]);
  }
  if (val_set.empty()) {
    // too few dialogues to hold any out; validate on the training set
    for (size_t i : train_idx) val_set.push_back(corpus[i]);
  }

  auto named = adapter.trainable();
  std::vector<Tensor<float>*> params;
  params.reserve(named.size());
  for (auto& [name, p] : named) params.push_back(p);

  AdamWConfig<float> ocfg;
  ocfg.lr = cfg.lr;
  ocfg.weight_decay = cfg.weight_decay;
  ocfg.warmup_steps = cfg.warmup_steps;
  ocfg.clip = cfg.clip_norm;
  AdamW<float> opt(params, ocfg);

  std::ofstream log;
  if (!log_path.empty()) {
    log.open(log_path, std::ios::app);
    ENGRAM_CHECK(log.good(), Error::Kind::Io, "cannot open training log '", log_path, "'");
  }

  TrainResult result;
  int step = 0;
  int epoch = 0;
  int accum_turns = 0;
  double accum_loss = 0.0;
  const float backward_scale = 1.0f / float(cfg.turns_per_step());

  auto optimizer_step = [&]() {
    for (const auto& [name, p] : bb.named_params())
      ENGRAM_CHECK(!p->has_grad(), Error::Kind::Contract,
                   "gradient reached frozen backbone weight '", name, "'");
    for (const auto& [name, p] : adapter.fixed())
      ENGRAM_CHECK(!p->has_grad(), Error::Kind::Contract,
                   "gradient reached fixed write projection '", name, "'");
    const float gn = opt.step();
    const float lr = opt.current_lr();
    opt.zero_grad();
    ++step;
    const float mean = static_cast<float>(accum_loss / double(accum_turns));
    result.step_losses.push_back(mean);
    result.log.push_back({step, epoch, accum_turns, mean, gn, lr});
    if (log.is_open()) {
      char line[160];
      std::snprintf(line, sizeof(line), "step=%d epoch=%d turns=%d loss=%.6f grad_norm=%.6f lr=%.8f",
                    step, epoch, accum_turns, mean, gn, lr);
      log << line << "\n";
    }
    accum_loss = 0.0;
    accum_turns = 0;
  };

  std::vector<Tensor<float>> best;
  auto snapshot_best = [&]() {
    best.clear();
    for (auto* p : params) best.push_back(p->clone());
  };

  float best_val = 0.0f;
  int bad_epochs = 0;

  for (epoch = 0; epoch < cfg.epochs; ++epoch) {
    auto shuffled = train_idx;
    Rng epoch_rng(cfg.seed + 1 + static_cast<uint64_t>(epoch));
    epoch_rng.shuffle(shuffled);
    for (size_t di : shuffled) {
      auto samples = dialogue_samples(corpus[di], vocab);
      auto state = init_memory<float>(adapter.method, adapter.dims, bb.cfg);
      auto hooks = make_read_hooks(state, adapter);
      for (const auto& s : samples) {
        TurnOutcome outcome;
        try {
          outcome = process_sample(s, bb, adapter, state, hooks, backward_scale);
        } catch (const Error& e) {
          if (e.kind() == Error::Kind::Numeric)
            fail(Error::Kind::Numeric, "training aborted at step ", step + 1, " (",
                 method_tag(adapter.method), "): ", e.what(), "; accumulated grad norm ",
                 accumulated_grad_norm(params));
          throw;
        }
        if (outcome.supervised) {
          ENGRAM_CHECK(std::isfinite(outcome.loss), Error::Kind::Numeric,
                       "training aborted at step ", step + 1, " (", method_tag(adapter.method),
                       "): non-finite turn loss; accumulated grad norm ",
                       accumulated_grad_norm(params));
          accum_loss += outcome.loss;
          ++accum_turns;
        }
        if (accum_turns >= cfg.turns_per_step()) optimizer_step();
      }
    }
    if (accum_turns > 0) optimizer_step();

    const float vl = validation_loss(bb, adapter, val_set, vocab);
    result.val_losses.push_back(vl);
    if (log.is_open()) log << "epoch=" << epoch << " val_loss=" << vl << "\n";
    if (result.best_epoch < 0 || vl < best_val) {
      best_val = vl;
      result.best_epoch = epoch;
      snapshot_best();
      bad_epochs = 0;
    } else {
      ++bad_epochs;
      if (bad_epochs >= cfg.patience) {
        result.early_stopped = true;
        break;
      }
    }
  }

  if (!best.empty())
    for (size_t i = 0; i < params.size(); ++i) params[i]->data() = best[i].data();
  result.best_val_loss = best_val;

  ENGRAM_CHECK(bb.value_hash() == bb_hash, Error::Kind::Contract,
               "backbone weights changed during adapter training");
  ENGRAM_CHECK(adapter.fixed_hash() == fixed_hash, Error::Kind::Contract,
               "fixed write projections changed during adapter training");
  return result;
}

}  // namespace engram
