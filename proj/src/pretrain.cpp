#include "engram/pretrain.hpp"

#include <cmath>
#include <iostream>

#include "engram/adamw.hpp"
#include "engram/ops.hpp"
#include "engram/tape.hpp"

namespace engram {

namespace {

float heldout_loss(const BackboneWeights<float>& w, const std::vector<int>& stream,
                   int64_t begin, int seq_len) {
  double total = 0.0;
  int64_t windows = 0;
  for (int64_t off = begin; off + seq_len + 1 <= static_cast<int64_t>(stream.size());
       off += seq_len) {
    std::vector<int> tokens(stream.begin() + off, stream.begin() + off + seq_len);
    std::vector<int> targets(stream.begin() + off + 1, stream.begin() + off + seq_len + 1);
    auto [hs, logits] = backbone_forward(tokens, w);
    total += cross_entropy(logits, targets).item();
    ++windows;
  }
  ENGRAM_CHECK(windows > 0, Error::Kind::Config, "held-out region is shorter than one window");
  return static_cast<float>(total / double(windows));
}

}  // namespace

PretrainResult pretrain(BackboneWeights<float>& w, const std::vector<int>& stream,
                        const PretrainConfig& cfg) {
  ENGRAM_CHECK(cfg.seq_len > 1 && cfg.seq_len < w.cfg.n_ctx, Error::Kind::Config,
               "seq_len ", cfg.seq_len, " must be in (1, n_ctx)");
  ENGRAM_CHECK(cfg.batch > 0 && cfg.steps >= 0, Error::Kind::Config,
               "batch must be positive and steps non-negative");
  const int64_t size = static_cast<int64_t>(stream.size());
  const int64_t split = static_cast<int64_t>(double(size) * (1.0 - cfg.heldout_frac));
  ENGRAM_CHECK(split > cfg.seq_len + 2, Error::Kind::Config, "training stream of ", size,
               " tokens is too short for seq_len ", cfg.seq_len);
  ENGRAM_CHECK(size - split >= cfg.seq_len + 1, Error::Kind::Config,
               "held-out region of ", size - split, " tokens is shorter than one window");

  PretrainResult res;
  res.initial_heldout_loss = heldout_loss(w, stream, split, cfg.seq_len);
  if (cfg.steps == 0) {
    res.heldout_loss = res.initial_heldout_loss;
    w.set_trainable(false);
    return res;
  }

  w.set_trainable(true);
  std::vector<Tensor<float>*> params;
  for (auto& [name, p] : w.named_params()) params.push_back(p);
  AdamWConfig<float> oc;
  oc.lr = cfg.lr;
  oc.weight_decay = cfg.weight_decay;
  oc.warmup_steps = cfg.warmup_steps;
  oc.clip = cfg.clip;
  AdamW<float> opt(params, oc);
  Rng rng(cfg.seed);

  for (int step = 0; step < cfg.steps; ++step) {
    double step_loss = 0.0;
    for (int b = 0; b < cfg.batch; ++b) {
      const int64_t off = rng.uniform_int(0, split - cfg.seq_len - 2);
      std::vector<int> tokens(stream.begin() + off, stream.begin() + off + cfg.seq_len);
      std::vector<int> targets(stream.begin() + off + 1,
                               stream.begin() + off + cfg.seq_len + 1);
      Tape<float> tape;
      auto [hs, logits] = backbone_forward(tokens, w);
      auto loss = scale(cross_entropy(logits, targets), 1.0f / float(cfg.batch));
      float lv = loss.item() * float(cfg.batch);
      ENGRAM_CHECK(std::isfinite(lv), Error::Kind::Numeric,
                   "pretraining loss became non-finite at step ", step);
      step_loss += lv;
      tape.backward(loss);
    }
    opt.step();
    opt.zero_grad();
    res.step_losses.push_back(static_cast<float>(step_loss / cfg.batch));
  }

  const size_t tail = std::max<size_t>(1, res.step_losses.size() / 10);
  double head_mean = 0.0, tail_mean = 0.0;
  for (size_t i = 0; i < tail; ++i) head_mean += res.step_losses[i];
  for (size_t i = res.step_losses.size() - tail; i < res.step_losses.size(); ++i)
    tail_mean += res.step_losses[i];
  res.loss_decreased = tail_mean < head_mean;
  if (!res.loss_decreased)
    std::cerr << "warning: pretraining loss did not decrease over the run\n";

  w.set_trainable(false);
  res.heldout_loss = heldout_loss(w, stream, split, cfg.seq_len);
  return res;
}

}  // namespace engram
