#pragma once

#include <cstdint>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace engram {

// Error kinds map to CLI exit codes: user-facing validation problems exit 1,
// everything that goes wrong mid-run exits 2.
class Error : public std::runtime_error {
 public:
  enum class Kind {
    Shape,
    Value,
    Index,
    Graph,
    Contract,
    Config,
    Validation,
    Io,
    Numeric,
  };

  Error(Kind kind, const std::string& msg) : std::runtime_error(msg), kind_(kind) {}
  Kind kind() const { return kind_; }

  bool is_validation() const {
    return kind_ == Kind::Config || kind_ == Kind::Validation;
  }

 private:
  Kind kind_;
};

namespace detail {
inline void msg_cat(std::ostringstream&) {}
template <typename A, typename... Rest>
void msg_cat(std::ostringstream& os, A&& a, Rest&&... rest) {
  os << std::forward<A>(a);
  msg_cat(os, std::forward<Rest>(rest)...);
}
}  // namespace detail

template <typename... Args>
[[noreturn]] void fail(Error::Kind kind, Args&&... args) {
  std::ostringstream os;
  detail::msg_cat(os, std::forward<Args>(args)...);
  throw Error(kind, os.str());
}

#define ENGRAM_CHECK(cond, kind, ...)                      \
  do {                                                     \
    if (!(cond)) ::engram::fail((kind), __VA_ARGS__);      \
  } while (0)

// Seedable RNG. All randomness in the project flows through this so that a
// seed pins every generated corpus, weight init, and shuffle.
class Rng {
 public:
  explicit Rng(uint64_t seed) : gen_(seed) {}

  double uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(gen_); }

  // inclusive bounds
  int64_t uniform_int(int64_t lo, int64_t hi) {
    return std::uniform_int_distribution<int64_t>(lo, hi)(gen_);
  }

  double normal(double mean = 0.0, double stddev = 1.0) {
    return std::normal_distribution<double>(mean, stddev)(gen_);
  }

  bool bernoulli(double p) { return uniform() < p; }

  template <typename V>
  void shuffle(V& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = static_cast<size_t>(uniform_int(0, static_cast<int64_t>(i) - 1));
      std::swap(v[i - 1], v[j]);
    }
  }

  uint64_t raw() { return gen_(); }

 private:
  std::mt19937_64 gen_;
};

// FNV-1a, used for input hashing in manifests and equal-input checks.
inline uint64_t fnv1a64(const void* bytes, size_t n, uint64_t h = 0xcbf29ce484222325ull) {
  const unsigned char* p = static_cast<const unsigned char*>(bytes);
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

inline uint64_t fnv1a64(const std::string& s, uint64_t h = 0xcbf29ce484222325ull) {
  return fnv1a64(s.data(), s.size(), h);
}

template <typename T>
uint64_t fnv1a64_values(const std::vector<T>& v, uint64_t h = 0xcbf29ce484222325ull) {
  return fnv1a64(v.data(), v.size() * sizeof(T), h);
}

std::string to_hex(uint64_t h);

// When enabled, every op validates its output for NaN/Inf and raises instead
// of letting bad values propagate. Off by default; tests and debug runs turn
// it on.
bool finite_checks_enabled();
void set_finite_checks(bool on);

}  // namespace engram
