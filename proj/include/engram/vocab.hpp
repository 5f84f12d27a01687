#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "engram/common.hpp"

namespace engram {

struct VocabConfig {
  int size = 512;
  int n_entities = 40;
  int n_attributes = 8;
  int n_values = 200;

  bool operator==(const VocabConfig&) const = default;
};

// Word-level vocabulary over the synthetic corpus language. Layout is fully
// determined by the config: four reserved tokens, two speakers, the function
// words, then entity/attribute/value pools and filler words up to `size`.
class Vocab {
 public:
  static constexpr int kPad = 0;
  static constexpr int kUnk = 1;
  static constexpr int kEoa = 2;    // end of answer
  static constexpr int kQuery = 3;  // question marker prefixed to QA probes

  explicit Vocab(VocabConfig cfg);

  int size() const { return static_cast<int>(words_.size()); }
  const VocabConfig& config() const { return cfg_; }

  // -1 when the word is not in the vocabulary
  int lookup(const std::string& w) const;
  const std::string& word(int id) const;

  static bool is_reserved(int id) { return id >= 0 && id < 4; }

  // whitespace split; unknown words map to <unk>, counted if asked
  std::vector<int> encode(const std::string& text, int* oov_count = nullptr) const;
  // joins words; reserved tokens are dropped unless keep_reserved
  std::string decode(const std::vector<int>& ids, bool keep_reserved = false) const;

  std::string speaker(int i) const;
  std::string entity(int i) const;
  std::string attribute(int i) const;
  std::string value(int i) const;
  std::string filler(int i) const;
  int n_filler() const { return n_filler_; }

 private:
  VocabConfig cfg_;
  std::vector<std::string> words_;
  std::unordered_map<std::string, int> index_;
  int n_filler_ = 0;
};

}  // namespace engram
