#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "engram/bench.hpp"
#include "engram/runtime.hpp"

namespace engram {

// Lowercase, strip punctuation, collapse whitespace.
std::string normalize_answer(const std::string& s);

// F1 over the multiset overlap of normalized tokens. Both sides empty scores
// 1, exactly one side empty scores 0.
float token_f1(const std::string& prediction, const std::string& gold);

// Turns between the ask point and the earliest evidence turn, in global turn
// indices.
int evidence_lag(const Dialogue& d, const QAItem& q);

float retained_score(float f1_mem, float f1_ablated);

struct QuestionResult {
  int dialogue = 0;
  int session = 0;
  int lag = 0;
  float f1_mem = 0.0f;
  float f1_ablated = 0.0f;
  float f1_baseline = 0.0f;
  float retained = 0.0f;
  uint64_t input_hash = 0;
  std::string prediction;  // with-memory answer, for inspection
  std::string gold;
};

struct EvalCurve {
  std::array<float, kNumLagBuckets> raw{};       // NaN where the bucket is empty
  std::array<float, kNumLagBuckets> smoothed{};  // NaN where the bucket is empty
  std::array<int, kNumLagBuckets> counts{};
  std::vector<float> k_series;
  float delta_k = 0.0f;
  std::vector<int> carried_sessions;  // sessions with no questions, K carried forward
};

// Weighted projection onto non-increasing sequences by pool adjacent
// violators.
std::vector<float> pava_nonincreasing(const std::vector<float>& values,
                                      const std::vector<float>& weights);

// Mean retained score per lag bucket plus the isotonic fit over the nonempty
// buckets. The knowledge fields are left empty.
EvalCurve bucket_and_smooth(const std::vector<QuestionResult>& results);

// K_s: mean with-memory F1 minus mean baseline F1 over questions asked in
// sessions 0..s, times 100. Returns the series and its final value.
std::pair<std::vector<float>, float> knowledge_curve(const std::vector<QuestionResult>& results,
                                                     int n_sessions,
                                                     std::vector<int>* carried = nullptr);

struct ProtocolOptions {
  std::string method_label;
  std::string capacity = "1x";
  int max_answer_tokens = 8;
  std::string out_dir;  // when set, results, curves, and summary are written here
};

struct ProtocolResult {
  std::vector<QuestionResult> questions;
  EvalCurve curve;
  float min_retained_pct = 0.0f;  // min over nonempty buckets of the smoothed curve, x100
  float delta_k = 0.0f;
  uint64_t corpus_hash = 0;
};

uint64_t corpus_hash(const std::vector<Dialogue>& corpus);

// Replays every dialogue through the runtime; at each ask point the question
// is answered under the with-memory, ablated, and baseline conditions on
// byte-identical inputs. A null adapter evaluates the bare backbone in all
// three conditions.
ProtocolResult run_protocol(const BackboneWeights<float>& bb, const AdapterParams<float>* adapter,
                            const std::vector<Dialogue>& corpus, const Vocab& vocab,
                            const ProtocolOptions& opts);

}  // namespace engram
