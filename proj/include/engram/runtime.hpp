#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "engram/adapters.hpp"
#include "engram/backbone.hpp"
#include "engram/bench.hpp"
#include "engram/vocab.hpp"

namespace engram {

struct TranscriptEntry {
  int index = 0;
  std::string speaker;
  std::string text;
  float memory_norm = 0.0f;
  bool input_truncated = false;
};

// One conversation over frozen weights with its own accumulating memory
// chain. Single-owner: drive a handle from one thread only; distinct handles
// may share the same backbone and adapter.
struct ConversationHandle {
  const BackboneWeights<float>* bb = nullptr;
  const AdapterParams<float>* adapter = nullptr;
  const Vocab* vocab = nullptr;
  MemoryState<float> state;
  uint64_t adapter_hash = 0;
  int64_t start_turn = 0;
  std::vector<TranscriptEntry> transcript;
};

ConversationHandle open_conversation(const BackboneWeights<float>& bb,
                                     const AdapterParams<float>& adapter, const Vocab& vocab);

struct TurnResult {
  std::vector<int> generated;    // tokens produced after the input
  bool input_truncated = false;  // input clipped from the left to fit the context
  bool gen_truncated = false;    // decoding stopped on a full context
  uint64_t input_hash = 0;       // hash of the token sequence actually fed
};

// Feeds one dataset turn: forward with the pre-turn memory, optional greedy
// decoding, then a memory write from the turn's hidden states.
TurnResult run_turn(ConversationHandle& h, const Turn& turn, int max_new = 0);
TurnResult run_turn_tokens(ConversationHandle& h, const std::string& speaker,
                           std::vector<int> tokens, int max_new);

// Pure QA against the current memory: no write, no transcript entry.
TurnResult probe(const ConversationHandle& h, const std::string& question, int max_new = 8);

// The same question through the raw backbone, no memory path at all.
TurnResult baseline_probe(const BackboneWeights<float>& bb, const Vocab& vocab,
                          const std::string& question, int max_new = 8);

// Decodes a generated answer: drops a trailing end-of-answer token, maps ids
// back to words.
std::string answer_text(const Vocab& vocab, const std::vector<int>& generated);

// Clone with zeroed memory and an empty transcript; the original is untouched.
ConversationHandle ablate_memory(const ConversationHandle& h);

void reset_memory(ConversationHandle& h);

float memory_norm(const MemoryState<float>& state);

void snapshot(const ConversationHandle& h, const std::string& path,
              const std::string& capacity = "1x");
ConversationHandle restore(const std::string& path, const BackboneWeights<float>& bb,
                           const AdapterParams<float>& adapter, const Vocab& vocab);

// One line per processed turn: index, speaker, text, memory norm, and a
// truncation marker when the input was clipped.
std::string export_transcript(const ConversationHandle& h);

}  // namespace engram
