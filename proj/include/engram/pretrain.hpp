#pragma once

#include <cstdint>
#include <vector>

#include "engram/backbone.hpp"

namespace engram {

struct PretrainConfig {
  int steps = 2000;
  int seq_len = 64;
  int batch = 8;
  float lr = 3e-4f;
  float weight_decay = 0.01f;
  int warmup_steps = 100;
  float clip = 1.0f;
  double heldout_frac = 0.05;
  uint64_t seed = 1;
};

struct PretrainResult {
  float heldout_loss = 0.0f;
  float initial_heldout_loss = 0.0f;
  bool loss_decreased = true;
  std::vector<float> step_losses;
};

// Next-token training of the backbone on a flat token stream. The weights
// come back frozen; with steps == 0 this just measures the held-out loss of
// the initial weights.
PretrainResult pretrain(BackboneWeights<float>& w, const std::vector<int>& stream,
                        const PretrainConfig& cfg);

}  // namespace engram
