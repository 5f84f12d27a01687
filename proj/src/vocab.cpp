#include "engram/vocab.hpp"

#include <sstream>

namespace engram {

Vocab::Vocab(VocabConfig cfg) : cfg_(cfg) {
  ENGRAM_CHECK(cfg.n_entities > 0 && cfg.n_attributes > 0 && cfg.n_values > 0,
               Error::Kind::Config, "vocabulary pools must be non-empty");
  const int fixed = 4 + 2 + 2 + cfg.n_entities + cfg.n_attributes + cfg.n_values;
  ENGRAM_CHECK(fixed <= cfg.size, Error::Kind::Config, "vocab size ", cfg.size,
               " cannot hold ", fixed, " structured words");
  n_filler_ = cfg.size - fixed;
  words_.reserve(static_cast<size_t>(cfg.size));
  words_ = {"<pad>", "<unk>", "<eoa>", "<q>", "alice", "bob", "what", "is"};
  for (int i = 0; i < cfg.n_entities; ++i) words_.push_back("e" + std::to_string(i));
  for (int i = 0; i < cfg.n_attributes; ++i) words_.push_back("a" + std::to_string(i));
  for (int i = 0; i < cfg.n_values; ++i) words_.push_back("v" + std::to_string(i));
  for (int i = 0; i < n_filler_; ++i) words_.push_back("f" + std::to_string(i));
  for (size_t i = 0; i < words_.size(); ++i) index_[words_[i]] = static_cast<int>(i);
  ENGRAM_CHECK(index_.size() == words_.size(), Error::Kind::Config,
               "vocabulary words collide; shrink the pools");
}

int Vocab::lookup(const std::string& w) const {
  auto it = index_.find(w);
  return it == index_.end() ? -1 : it->second;
}

const std::string& Vocab::word(int id) const {
  ENGRAM_CHECK(id >= 0 && id < size(), Error::Kind::Index, "token id ", id,
               " outside vocabulary of size ", size());
  return words_[static_cast<size_t>(id)];
}

std::vector<int> Vocab::encode(const std::string& text, int* oov_count) const {
  std::vector<int> out;
  std::istringstream ss(text);
  std::string w;
  while (ss >> w) {
    int id = lookup(w);
    if (id < 0) {
      id = kUnk;
      if (oov_count) ++*oov_count;
    }
    out.push_back(id);
  }
  return out;
}

std::string Vocab::decode(const std::vector<int>& ids, bool keep_reserved) const {
  std::string out;
  for (int id : ids) {
    if (!keep_reserved && is_reserved(id)) continue;
    if (!out.empty()) out += ' ';
    out += word(id);
  }
  return out;
}

std::string Vocab::speaker(int i) const {
  ENGRAM_CHECK(i >= 0 && i < 2, Error::Kind::Index, "speaker index ", i, " out of range");
  return words_[static_cast<size_t>(4 + i)];
}

std::string Vocab::entity(int i) const {
  ENGRAM_CHECK(i >= 0 && i < cfg_.n_entities, Error::Kind::Index, "entity index ", i,
               " out of range");
  return "e" + std::to_string(i);
}

std::string Vocab::attribute(int i) const {
  ENGRAM_CHECK(i >= 0 && i < cfg_.n_attributes, Error::Kind::Index, "attribute index ", i,
               " out of range");
  return "a" + std::to_string(i);
}

std::string Vocab::value(int i) const {
  ENGRAM_CHECK(i >= 0 && i < cfg_.n_values, Error::Kind::Index, "value index ", i,
               " out of range");
  return "v" + std::to_string(i);
}

std::string Vocab::filler(int i) const {
  ENGRAM_CHECK(i >= 0 && i < n_filler_, Error::Kind::Index, "filler index ", i, " out of range");
  return "f" + std::to_string(i);
}

}  // namespace engram
