#pragma once

#include <array>
#include <cstdint>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "engram/common.hpp"
#include "engram/vocab.hpp"

namespace engram {

struct Turn {
  std::string speaker;
  std::string text;

  bool operator==(const Turn&) const = default;
};

struct Session {
  std::vector<Turn> turns;

  bool operator==(const Session&) const = default;
};

struct QAItem {
  std::string question;  // probe text without the question-marker token
  std::string answer;
  std::vector<std::pair<int, int>> evidence;  // (session, turn-within-session)
  int ask_after_turn = 0;                     // global turn index the probe follows
  int session = 0;                            // session containing the ask point

  bool operator==(const QAItem&) const = default;
};

struct Dialogue {
  uint64_t seed = 0;
  std::vector<Session> sessions;
  std::vector<QAItem> qa;

  int total_turns() const;
  int global_index(int session, int turn) const;
  int session_of_global(int global) const;
  const Turn& turn_at(int global) const;

  bool operator==(const Dialogue&) const = default;
};

// Five evidence-lag buckets used by the generator and the evaluation curve.
inline constexpr std::array<int, 6> kLagBucketEdges{0, 32, 64, 128, 256,
                                                   std::numeric_limits<int>::max()};
inline constexpr int kNumLagBuckets = 5;

int lag_bucket(int lag);
std::string lag_bucket_label(int bucket);

struct BenchConfig {
  int n_dialogues = 20;
  int n_sessions = 30;
  int turns_per_session = 12;
  // "mixed": long-lag facts get restated later in the dialogue, so old
  // knowledge stays reachable; "single": every fact is stated exactly once.
  std::string lag_profile = "mixed";
  double distractor_rate = 0.25;
  double overwrite_rate = 0.15;
  int qa_per_bucket = 4;
  uint64_t seed = 1;

  void validate() const;
};

// Which side of the pretraining/benchmark split a fact triple belongs to.
// The parity rule keeps the two corpora disjoint at the triple level without
// any coupling between the generators.
bool benchmark_owns_triple(const std::string& entity, const std::string& attribute,
                           const std::string& value);

std::vector<Dialogue> generate_benchmark(const BenchConfig& cfg, const Vocab& vocab);

// Structural re-check of an in-memory corpus: evidence indices exist, every
// evidence turn literally states the gold answer, ask points follow their
// evidence. min_per_bucket > 0 additionally requires that much lag coverage.
void validate_corpus(const std::vector<Dialogue>& corpus, int min_per_bucket = 0);

struct IngestReport {
  int dialogues = 0;
  int turns = 0;
  int questions = 0;
  int oov_words = 0;
};

std::vector<Dialogue> ingest_corpus(const std::string& path, const Vocab& vocab,
                                    IngestReport* report = nullptr);
void export_corpus(const std::string& path, const std::vector<Dialogue>& corpus);

struct PretrainStreamConfig {
  int n_blocks = 3000;
  double filler_block_rate = 0.25;
  double qa_rate = 0.85;  // chance a fact block ends with an answered probe
  uint64_t seed = 99;
};

// Flat token stream for backbone pretraining: fact statements, in-context
// answered probes, and filler chatter, built only from triples on the
// pretraining side of the parity split.
std::vector<int> make_pretrain_stream(const Vocab& vocab, const PretrainStreamConfig& cfg);

}  // namespace engram
