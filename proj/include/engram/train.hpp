#pragma once

#include <string>
#include <vector>

#include "engram/adapters.hpp"
#include "engram/backbone.hpp"
#include "engram/bench.hpp"
#include "engram/vocab.hpp"

namespace engram {

struct TrainConfig {
  float lr = 1e-4f;
  float weight_decay = 1e-2f;
  int warmup_steps = 200;
  float clip_norm = 1.0f;
  int epochs = 10;
  int batch = 4;
  int accum = 4;
  int k_turns = 8;
  int patience = 3;
  float val_fraction = 0.1f;
  uint64_t seed = 0;

  // supervised turns folded into one optimizer step
  int turns_per_step() const { return k_turns * batch * accum; }
  void validate() const;
};

struct StepRecord {
  int step = 0;
  int epoch = 0;
  int turns = 0;        // supervised turns accumulated into this step
  float loss = 0.0f;    // mean per-turn loss across the step
  float grad_norm = 0.0f;
  float lr = 0.0f;
};

struct TrainResult {
  std::vector<float> step_losses;
  std::vector<StepRecord> log;
  std::vector<float> val_losses;  // one entry per completed epoch
  int best_epoch = -1;
  float best_val_loss = 0.0f;
  bool early_stopped = false;
};

// One supervised span inside an encoded turn. Statement turns carry
// next-token loss over the whole turn and update memory afterwards; QA
// probes carry loss on the answer span only and leave memory untouched.
struct TurnSample {
  std::vector<int> tokens;
  int loss_start = 0;
  int loss_len = 0;
  bool writes = true;
};

// Flattens a dialogue into its turn sequence with QA probes spliced in
// directly after their ask points.
std::vector<TurnSample> dialogue_samples(const Dialogue& d, const Vocab& vocab);

// Mean per-turn loss over the set, walking each dialogue's memory chain
// without any gradient recording.
float validation_loss(const BackboneWeights<float>& bb, const AdapterParams<float>& adapter,
                      const std::vector<Dialogue>& val_set, const Vocab& vocab);

// Supervised training of the adapter read path against a frozen backbone.
// Writes stay outside the gradient graph, so each optimizer step sees only
// the read-path gradients of its accumulated turns. Early-stops on
// validation loss and restores the best parameters before returning. When
// log_path is nonempty, appends one structured text line per step.
TrainResult type1_train(const BackboneWeights<float>& bb, AdapterParams<float>& adapter,
                        const std::vector<Dialogue>& corpus, const Vocab& vocab,
                        const TrainConfig& cfg, const std::string& log_path = "");

}  // namespace engram
