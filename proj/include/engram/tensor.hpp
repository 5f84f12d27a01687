#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <vector>

#include "engram/common.hpp"

namespace engram {

using Shape = std::vector<int>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "(";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  out += ")";
  return out;
}

template <typename T>
struct TensorData {
  Shape shape;
  std::vector<T> data;
  bool requires_grad = false;
  std::vector<T> grad;   // empty until a backward pass touches this tensor
  int32_t tape_id = -1;  // index of the producing node on the live tape, -1 = leaf or detached
};

// Dense row-major tensor. Copying a Tensor copies the handle, not the buffer;
// ops never mutate their inputs, so shared buffers are safe.
template <typename T>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0)) {
    validate_shape(shape);
    impl = std::make_shared<TensorData<T>>();
    impl->shape = std::move(shape);
    impl->data.assign(static_cast<size_t>(shape_numel(impl->shape)), fill);
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

  static Tensor scalar(T v) {
    Tensor t(Shape{1});
    t.impl->data[0] = v;
    return t;
  }

  static Tensor from(Shape shape, std::vector<T> values) {
    validate_shape(shape);
    ENGRAM_CHECK(static_cast<int64_t>(values.size()) == shape_numel(shape), Error::Kind::Shape,
                 "value count ", values.size(), " does not fill shape ", shape_str(shape));
    Tensor t;
    t.impl = std::make_shared<TensorData<T>>();
    t.impl->shape = std::move(shape);
    t.impl->data = std::move(values);
    return t;
  }

  static Tensor from_rows(std::initializer_list<std::initializer_list<T>> rows) {
    int r = static_cast<int>(rows.size());
    int c = r ? static_cast<int>(rows.begin()->size()) : 0;
    std::vector<T> vals;
    vals.reserve(static_cast<size_t>(r) * c);
    for (const auto& row : rows) {
      ENGRAM_CHECK(static_cast<int>(row.size()) == c, Error::Kind::Shape, "ragged row in tensor literal");
      for (T v : row) vals.push_back(v);
    }
    return from(Shape{r, c}, std::move(vals));
  }

  static Tensor randn(Shape shape, Rng& rng, T stddev = T(1), T mean = T(0)) {
    Tensor t(std::move(shape));
    for (auto& v : t.impl->data) v = static_cast<T>(rng.normal(mean, stddev));
    return t;
  }

  bool defined() const { return impl != nullptr; }
  const Shape& shape() const { return impl->shape; }
  int ndim() const { return static_cast<int>(impl->shape.size()); }
  int dim(int i) const { return impl->shape[static_cast<size_t>(i)]; }
  int64_t numel() const { return static_cast<int64_t>(impl->data.size()); }

  // 2-d accessors; 1-d tensors act as a single row
  int rows() const { return ndim() == 1 ? 1 : dim(0); }
  int cols() const { return ndim() == 1 ? dim(0) : dim(1); }

  std::vector<T>& data() { return impl->data; }
  const std::vector<T>& data() const { return impl->data; }
  T* ptr() { return impl->data.data(); }
  const T* ptr() const { return impl->data.data(); }

  T& at(int r, int c) { return impl->data[static_cast<size_t>(r) * cols() + c]; }
  T at(int r, int c) const { return impl->data[static_cast<size_t>(r) * cols() + c]; }
  T& at(int i) { return impl->data[static_cast<size_t>(i)]; }
  T at(int i) const { return impl->data[static_cast<size_t>(i)]; }

  T item() const {
    ENGRAM_CHECK(numel() == 1, Error::Kind::Shape, "item() on tensor of shape ", shape_str(shape()));
    return impl->data[0];
  }

  bool requires_grad() const { return impl->requires_grad; }
  Tensor& set_requires_grad(bool rg) {
    impl->requires_grad = rg;
    return *this;
  }

  // True while this tensor is an intermediate recorded on the live tape.
  bool attached() const { return impl->tape_id >= 0; }

  bool has_grad() const { return !impl->grad.empty(); }
  std::vector<T>& grad() {
    ENGRAM_CHECK(has_grad(), Error::Kind::Graph, "gradient read before any backward populated it");
    return impl->grad;
  }
  const std::vector<T>& grad() const {
    ENGRAM_CHECK(has_grad(), Error::Kind::Graph, "gradient read before any backward populated it");
    return impl->grad;
  }
  void ensure_grad() {
    if (impl->grad.empty()) impl->grad.assign(impl->data.size(), T(0));
  }
  void zero_grad() { impl->grad.clear(); }

  // Deep copy of values; the copy is a fresh leaf.
  Tensor clone() const {
    Tensor t;
    t.impl = std::make_shared<TensorData<T>>();
    t.impl->shape = impl->shape;
    t.impl->data = impl->data;
    return t;
  }

  std::shared_ptr<TensorData<T>> impl;

 private:
  static void validate_shape(const Shape& s) {
    ENGRAM_CHECK(!s.empty() && s.size() <= 2, Error::Kind::Shape,
                 "tensors are 1-d or 2-d, got rank ", s.size());
    for (int d : s)
      ENGRAM_CHECK(d > 0, Error::Kind::Shape, "non-positive dimension in shape ", shape_str(s));
  }
};

template <typename T>
void check_output_finite(const Tensor<T>& t, const char* op, bool allow_neg_inf = false) {
  if (!finite_checks_enabled()) return;
  for (T v : t.data()) {
    if (std::isnan(v))
      fail(Error::Kind::Numeric, op, " produced NaN");
    if (std::isinf(v) && !(allow_neg_inf && v < T(0)))
      fail(Error::Kind::Numeric, op, " produced Inf");
  }
}

}  // namespace engram
