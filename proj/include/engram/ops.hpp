#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "engram/tape.hpp"
#include "engram/tensor.hpp"

namespace engram {

template <typename T>
using EMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using EMap = Eigen::Map<EMat<T>>;
template <typename T>
using ECMap = Eigen::Map<const EMat<T>>;

namespace detail {

template <typename T>
void ensure_grad(const std::shared_ptr<TensorData<T>>& t) {
  if (t->grad.empty()) t->grad.assign(t->data.size(), T(0));
}

template <typename T>
bool wants(const std::shared_ptr<TensorData<T>>& t) {
  return t->requires_grad;
}

template <typename T>
bool any_grad(std::initializer_list<const Tensor<T>*> ins) {
  for (const Tensor<T>* t : ins)
    if (t->impl && (t->impl->requires_grad || t->impl->tape_id >= 0)) return true;
  return false;
}

template <typename T, typename Fn>
void maybe_record(Tensor<T>& out, std::initializer_list<const Tensor<T>*> ins, Fn&& fn) {
  Tape<T>* tape = Tape<T>::active();
  if (!tape || !any_grad<T>(ins)) return;
  out.impl->requires_grad = true;
  out.impl->tape_id = tape->record(std::forward<Fn>(fn), out.impl);
}

}  // namespace detail

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  ENGRAM_CHECK(a.ndim() == 2 && b.ndim() == 2 && a.dim(1) == b.dim(0), Error::Kind::Shape,
               "matmul dimension mismatch: ", shape_str(a.shape()), "x", shape_str(b.shape()));
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor<T> out(Shape{m, n});
  ECMap<T> A(a.ptr(), m, k), B(b.ptr(), k, n);
  EMap<T>(out.ptr(), m, n).noalias() = A * B;
  check_output_finite(out, "matmul");
  auto ai = a.impl, bi = b.impl, oi = out.impl;
  detail::maybe_record(out, {&a, &b}, [ai, bi, oi, m, k, n] {
    if (oi->grad.empty()) return;
    ECMap<T> G(oi->grad.data(), m, n);
    if (detail::wants(ai)) {
      detail::ensure_grad(ai);
      ECMap<T> B(bi->data.data(), k, n);
      EMap<T>(ai->grad.data(), m, k).noalias() += G * B.transpose();
    }
    if (detail::wants(bi)) {
      detail::ensure_grad(bi);
      ECMap<T> A(ai->data.data(), m, k);
      EMap<T>(bi->grad.data(), k, n).noalias() += A.transpose() * G;
    }
  });
  return out;
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& x) {
  ENGRAM_CHECK(x.ndim() == 2, Error::Kind::Shape, "transpose needs a 2-d tensor, got ",
               shape_str(x.shape()));
  const int r = x.dim(0), c = x.dim(1);
  Tensor<T> out(Shape{c, r});
  EMap<T>(out.ptr(), c, r) = ECMap<T>(x.ptr(), r, c).transpose();
  auto xi = x.impl, oi = out.impl;
  detail::maybe_record(out, {&x}, [xi, oi, r, c] {
    if (oi->grad.empty() || !detail::wants(xi)) return;
    detail::ensure_grad(xi);
    EMap<T>(xi->grad.data(), r, c) += ECMap<T>(oi->grad.data(), c, r).transpose();
  });
  return out;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  ENGRAM_CHECK(a.shape() == b.shape(), Error::Kind::Shape, "add shape mismatch: ",
               shape_str(a.shape()), " vs ", shape_str(b.shape()));
  Tensor<T> out(a.shape());
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) out.ptr()[i] = a.ptr()[i] + b.ptr()[i];
  check_output_finite(out, "add");
  auto ai = a.impl, bi = b.impl, oi = out.impl;
  detail::maybe_record(out, {&a, &b}, [ai, bi, oi, n] {
    if (oi->grad.empty()) return;
    for (auto& ti : {ai, bi}) {
      if (!detail::wants(ti)) continue;
      detail::ensure_grad(ti);
      for (int64_t i = 0; i < n; ++i) ti->grad[i] += oi->grad[i];
    }
  });
  return out;
}

// Adds an attention mask whose entries are 0 (visible) or -inf (blocked).
// The mask never takes gradients; output -inf entries are legitimate.
template <typename T>
Tensor<T> add_masked(const Tensor<T>& x, const Tensor<T>& mask) {
  ENGRAM_CHECK(x.shape() == mask.shape(), Error::Kind::Shape, "mask shape mismatch: ",
               shape_str(x.shape()), " vs ", shape_str(mask.shape()));
  ENGRAM_CHECK(!mask.impl->requires_grad && !mask.attached(), Error::Kind::Contract,
               "attention masks are constants, not trainable tensors");
  const T neg_inf = -std::numeric_limits<T>::infinity();
  for (T v : mask.data())
    ENGRAM_CHECK(v == T(0) || v == neg_inf, Error::Kind::Value,
                 "mask entries must be 0 or -inf");
  Tensor<T> out(x.shape());
  const int64_t n = x.numel();
  for (int64_t i = 0; i < n; ++i) out.ptr()[i] = x.ptr()[i] + mask.ptr()[i];
  check_output_finite(out, "add_masked", /*allow_neg_inf=*/true);
  auto xi = x.impl, oi = out.impl;
  detail::maybe_record(out, {&x}, [xi, oi, n] {
    if (oi->grad.empty() || !detail::wants(xi)) return;
    detail::ensure_grad(xi);
    for (int64_t i = 0; i < n; ++i) xi->grad[i] += oi->grad[i];
  });
  return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T c) {
  Tensor<T> out(x.shape());
  const int64_t n = x.numel();
  for (int64_t i = 0; i < n; ++i) out.ptr()[i] = x.ptr()[i] * c;
  check_output_finite(out, "scale");
  auto xi = x.impl, oi = out.impl;
  detail::maybe_record(out, {&x}, [xi, oi, n, c] {
    if (oi->grad.empty() || !detail::wants(xi)) return;
    detail::ensure_grad(xi);
    for (int64_t i = 0; i < n; ++i) xi->grad[i] += oi->grad[i] * c;
  });
  return out;
}

// out = s * x where s is a single-element (typically trainable) tensor.
template <typename T>
Tensor<T> scale_by(const Tensor<T>& x, const Tensor<T>& s) {
  ENGRAM_CHECK(s.numel() == 1, Error::Kind::Shape, "scale_by needs a scalar tensor, got ",
               shape_str(s.shape()));
  Tensor<T> out(x.shape());
  const int64_t n = x.numel();
  const T sv = s.ptr()[0];
  for (int64_t i = 0; i < n; ++i) out.ptr()[i] = x.ptr()[i] * sv;
  check_output_finite(out, "scale_by");
  auto xi = x.impl, si = s.impl, oi = out.impl;
  detail::maybe_record(out, {&x, &s}, [xi, si, oi, n] {
    if (oi->grad.empty()) return;
    if (detail::wants(xi)) {
      detail::ensure_grad(xi);
      const T sv = si->data[0];
      for (int64_t i = 0; i < n; ++i) xi->grad[i] += oi->grad[i] * sv;
    }
    if (detail::wants(si)) {
      detail::ensure_grad(si);
      T acc = T(0);
      for (int64_t i = 0; i < n; ++i) acc += oi->grad[i] * xi->data[i];
      si->grad[0] += acc;
    }
  });
  return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  ENGRAM_CHECK(a.shape() == b.shape(), Error::Kind::Shape, "mul shape mismatch: ",
               shape_str(a.shape()), " vs ", shape_str(b.shape()));
  Tensor<T> out(a.shape());
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) out.ptr()[i] = a.ptr()[i] * b.ptr()[i];
  check_output_finite(out, "mul");
  auto ai = a.impl, bi = b.impl, oi = out.impl;
  detail::maybe_record(out, {&a, &b}, [ai, bi, oi, n] {
    if (oi->grad.empty()) return;
    if (detail::wants(ai)) {
      detail::ensure_grad(ai);
      for (int64_t i = 0; i < n; ++i) ai->grad[i] += oi->grad[i] * bi->data[i];
    }
    if (detail::wants(bi)) {
      detail::ensure_grad(bi);
      for (int64_t i = 0; i < n; ++i) bi->grad[i] += oi->grad[i] * ai->data[i];
    }
  });
  return out;
}

// The one permitted broadcast: a 1-d bias added to every row of a 2-d tensor.
template <typename T>
Tensor<T> add_row_bias(const Tensor<T>& x, const Tensor<T>& bias) {
  ENGRAM_CHECK(x.ndim() == 2 && bias.ndim() == 1 && bias.dim(0) == x.dim(1), Error::Kind::Shape,
               "bias shape ", shape_str(bias.shape()), " does not match rows of ",
               shape_str(x.shape()));
  const int r = x.dim(0), c = x.dim(1);
  Tensor<T> out(x.shape());
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) out.at(i, j) = x.at(i, j) + bias.at(j);
  check_output_finite(out, "add_row_bias");
  auto xi = x.impl, bi = bias.impl, oi = out.impl;
  detail::maybe_record(out, {&x, &bias}, [xi, bi, oi, r, c] {
    if (oi->grad.empty()) return;
    if (detail::wants(xi)) {
      detail::ensure_grad(xi);
      for (int64_t i = 0; i < int64_t(r) * c; ++i) xi->grad[i] += oi->grad[i];
    }
    if (detail::wants(bi)) {
      detail::ensure_grad(bi);
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) bi->grad[j] += oi->grad[size_t(i) * c + j];
    }
  });
  return out;
}

// Row-wise softmax with max subtraction. -inf scores are allowed and come out
// as exact zeros; a row that is entirely -inf has no distribution to produce.
template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x) {
  ENGRAM_CHECK(x.ndim() == 2, Error::Kind::Shape, "softmax_rows needs a 2-d tensor, got ",
               shape_str(x.shape()));
  const int r = x.dim(0), c = x.dim(1);
  Tensor<T> out(x.shape());
  for (int i = 0; i < r; ++i) {
    T m = -std::numeric_limits<T>::infinity();
    for (int j = 0; j < c; ++j) m = std::max(m, x.at(i, j));
    if (std::isinf(m)) {
      for (int j = 0; j < c; ++j)
        ENGRAM_CHECK(!std::isnan(x.at(i, j)), Error::Kind::Numeric, "softmax row ", i,
                     " contains NaN");
      fail(Error::Kind::Value, "softmax row ", i, " is fully masked (all -inf)");
    }
    T sum = T(0);
    for (int j = 0; j < c; ++j) {
      T e = std::exp(x.at(i, j) - m);
      out.at(i, j) = e;
      sum += e;
    }
    for (int j = 0; j < c; ++j) out.at(i, j) /= sum;
  }
  check_output_finite(out, "softmax_rows");
  auto xi = x.impl, oi = out.impl;
  detail::maybe_record(out, {&x}, [xi, oi, r, c] {
    if (oi->grad.empty() || !detail::wants(xi)) return;
    detail::ensure_grad(xi);
    for (int i = 0; i < r; ++i) {
      T dot = T(0);
      for (int j = 0; j < c; ++j) dot += oi->grad[size_t(i) * c + j] * oi->data[size_t(i) * c + j];
      for (int j = 0; j < c; ++j) {
        const size_t k = size_t(i) * c + j;
        xi->grad[k] += oi->data[k] * (oi->grad[k] - dot);
      }
    }
  });
  return out;
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias) {
  ENGRAM_CHECK(x.ndim() == 2, Error::Kind::Shape, "layer_norm needs a 2-d tensor, got ",
               shape_str(x.shape()));
  const int r = x.dim(0), c = x.dim(1);
  ENGRAM_CHECK(gain.ndim() == 1 && gain.dim(0) == c && bias.ndim() == 1 && bias.dim(0) == c,
               Error::Kind::Shape, "layer_norm gain/bias must be 1-d of size ", c);
  const T eps = T(1e-5);
  Tensor<T> out(x.shape());
  auto xhat = std::make_shared<std::vector<T>>(size_t(r) * c);
  auto inv_std = std::make_shared<std::vector<T>>(r);
  for (int i = 0; i < r; ++i) {
    T mean = T(0);
    for (int j = 0; j < c; ++j) mean += x.at(i, j);
    mean /= T(c);
    T var = T(0);
    for (int j = 0; j < c; ++j) {
      T d = x.at(i, j) - mean;
      var += d * d;
    }
    var /= T(c);
    const T is = T(1) / std::sqrt(var + eps);
    (*inv_std)[i] = is;
    for (int j = 0; j < c; ++j) {
      T xh = (x.at(i, j) - mean) * is;
      (*xhat)[size_t(i) * c + j] = xh;
      out.at(i, j) = xh * gain.at(j) + bias.at(j);
    }
  }
  check_output_finite(out, "layer_norm");
  auto xi = x.impl, gi = gain.impl, bi = bias.impl, oi = out.impl;
  detail::maybe_record(out, {&x, &gain, &bias}, [xi, gi, bi, oi, r, c, xhat, inv_std] {
    if (oi->grad.empty()) return;
    for (int i = 0; i < r; ++i) {
      const size_t base = size_t(i) * c;
      if (detail::wants(xi)) {
        detail::ensure_grad(xi);
        T sum_gg = T(0), sum_ggx = T(0);
        for (int j = 0; j < c; ++j) {
          T gg = oi->grad[base + j] * gi->data[j];
          sum_gg += gg;
          sum_ggx += gg * (*xhat)[base + j];
        }
        for (int j = 0; j < c; ++j) {
          T gg = oi->grad[base + j] * gi->data[j];
          xi->grad[base + j] +=
              (gg - sum_gg / T(c) - (*xhat)[base + j] * sum_ggx / T(c)) * (*inv_std)[i];
        }
      }
      if (detail::wants(gi)) {
        detail::ensure_grad(gi);
        for (int j = 0; j < c; ++j) gi->grad[j] += oi->grad[base + j] * (*xhat)[base + j];
      }
      if (detail::wants(bi)) {
        detail::ensure_grad(bi);
        for (int j = 0; j < c; ++j) bi->grad[j] += oi->grad[base + j];
      }
    }
  });
  return out;
}

// tanh-approximation gelu, the usual transformer MLP activation
template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  const T k0 = T(0.7978845608028654);  // sqrt(2/pi)
  const T k1 = T(0.044715);
  Tensor<T> out(x.shape());
  const int64_t n = x.numel();
  for (int64_t i = 0; i < n; ++i) {
    T v = x.ptr()[i];
    out.ptr()[i] = T(0.5) * v * (T(1) + std::tanh(k0 * (v + k1 * v * v * v)));
  }
  check_output_finite(out, "gelu");
  auto xi = x.impl, oi = out.impl;
  detail::maybe_record(out, {&x}, [xi, oi, n, k0, k1] {
    if (oi->grad.empty() || !detail::wants(xi)) return;
    detail::ensure_grad(xi);
    for (int64_t i = 0; i < n; ++i) {
      T v = xi->data[i];
      T u = k0 * (v + k1 * v * v * v);
      T t = std::tanh(u);
      T d = T(0.5) * (T(1) + t) + T(0.5) * v * (T(1) - t * t) * k0 * (T(1) + T(3) * k1 * v * v);
      xi->grad[i] += oi->grad[i] * d;
    }
  });
  return out;
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  const int64_t n = x.numel();
  for (int64_t i = 0; i < n; ++i) {
    T v = x.ptr()[i];
    out.ptr()[i] = v >= T(0) ? T(1) / (T(1) + std::exp(-v))
                             : std::exp(v) / (T(1) + std::exp(v));
  }
  check_output_finite(out, "sigmoid");
  auto xi = x.impl, oi = out.impl;
  detail::maybe_record(out, {&x}, [xi, oi, n] {
    if (oi->grad.empty() || !detail::wants(xi)) return;
    detail::ensure_grad(xi);
    for (int64_t i = 0; i < n; ++i) {
      T s = oi->data[i];
      xi->grad[i] += oi->grad[i] * s * (T(1) - s);
    }
  });
  return out;
}

template <typename T>
Tensor<T> slice_rows(const Tensor<T>& x, int start, int len) {
  ENGRAM_CHECK(x.ndim() == 2, Error::Kind::Shape, "slice_rows needs a 2-d tensor");
  ENGRAM_CHECK(start >= 0 && len > 0 && start + len <= x.dim(0), Error::Kind::Index,
               "row slice [", start, ", ", start + len, ") out of range for ",
               shape_str(x.shape()));
  const int c = x.dim(1);
  Tensor<T> out(Shape{len, c});
  std::copy_n(x.ptr() + size_t(start) * c, size_t(len) * c, out.ptr());
  auto xi = x.impl, oi = out.impl;
  detail::maybe_record(out, {&x}, [xi, oi, start, len, c] {
    if (oi->grad.empty() || !detail::wants(xi)) return;
    detail::ensure_grad(xi);
    for (int64_t i = 0; i < int64_t(len) * c; ++i)
      xi->grad[size_t(start) * c + i] += oi->grad[i];
  });
  return out;
}

template <typename T>
Tensor<T> slice_cols(const Tensor<T>& x, int start, int len) {
  ENGRAM_CHECK(x.ndim() == 2, Error::Kind::Shape, "slice_cols needs a 2-d tensor");
  ENGRAM_CHECK(start >= 0 && len > 0 && start + len <= x.dim(1), Error::Kind::Index,
               "column slice [", start, ", ", start + len, ") out of range for ",
               shape_str(x.shape()));
  const int r = x.dim(0), c = x.dim(1);
  Tensor<T> out(Shape{r, len});
  for (int i = 0; i < r; ++i)
    std::copy_n(x.ptr() + size_t(i) * c + start, len, out.ptr() + size_t(i) * len);
  auto xi = x.impl, oi = out.impl;
  detail::maybe_record(out, {&x}, [xi, oi, start, len, r, c] {
    if (oi->grad.empty() || !detail::wants(xi)) return;
    detail::ensure_grad(xi);
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < len; ++j)
        xi->grad[size_t(i) * c + start + j] += oi->grad[size_t(i) * len + j];
  });
  return out;
}

template <typename T>
Tensor<T> concat_rows(const Tensor<T>& a, const Tensor<T>& b) {
  ENGRAM_CHECK(a.ndim() == 2 && b.ndim() == 2 && a.dim(1) == b.dim(1), Error::Kind::Shape,
               "concat_rows column mismatch: ", shape_str(a.shape()), " vs ",
               shape_str(b.shape()));
  const int ra = a.dim(0), rb = b.dim(0), c = a.dim(1);
  Tensor<T> out(Shape{ra + rb, c});
  std::copy_n(a.ptr(), size_t(ra) * c, out.ptr());
  std::copy_n(b.ptr(), size_t(rb) * c, out.ptr() + size_t(ra) * c);
  auto ai = a.impl, bi = b.impl, oi = out.impl;
  detail::maybe_record(out, {&a, &b}, [ai, bi, oi, ra, rb, c] {
    if (oi->grad.empty()) return;
    if (detail::wants(ai)) {
      detail::ensure_grad(ai);
      for (int64_t i = 0; i < int64_t(ra) * c; ++i) ai->grad[i] += oi->grad[i];
    }
    if (detail::wants(bi)) {
      detail::ensure_grad(bi);
      for (int64_t i = 0; i < int64_t(rb) * c; ++i) bi->grad[i] += oi->grad[size_t(ra) * c + i];
    }
  });
  return out;
}

template <typename T>
Tensor<T> concat_cols(const Tensor<T>& a, const Tensor<T>& b) {
  ENGRAM_CHECK(a.ndim() == 2 && b.ndim() == 2 && a.dim(0) == b.dim(0), Error::Kind::Shape,
               "concat_cols row mismatch: ", shape_str(a.shape()), " vs ", shape_str(b.shape()));
  const int r = a.dim(0), ca = a.dim(1), cb = b.dim(1);
  Tensor<T> out(Shape{r, ca + cb});
  for (int i = 0; i < r; ++i) {
    std::copy_n(a.ptr() + size_t(i) * ca, ca, out.ptr() + size_t(i) * (ca + cb));
    std::copy_n(b.ptr() + size_t(i) * cb, cb, out.ptr() + size_t(i) * (ca + cb) + ca);
  }
  auto ai = a.impl, bi = b.impl, oi = out.impl;
  detail::maybe_record(out, {&a, &b}, [ai, bi, oi, r, ca, cb] {
    if (oi->grad.empty()) return;
    if (detail::wants(ai)) {
      detail::ensure_grad(ai);
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < ca; ++j)
          ai->grad[size_t(i) * ca + j] += oi->grad[size_t(i) * (ca + cb) + j];
    }
    if (detail::wants(bi)) {
      detail::ensure_grad(bi);
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < cb; ++j)
          bi->grad[size_t(i) * cb + j] += oi->grad[size_t(i) * (ca + cb) + ca + j];
    }
  });
  return out;
}

// Row lookup: out[i] = table[ids[i]]. Gradients scatter-add back into the
// table rows, which is how tied input/output embeddings collect both sides.
template <typename T>
Tensor<T> embedding(const Tensor<T>& table, const std::vector<int>& ids) {
  ENGRAM_CHECK(table.ndim() == 2, Error::Kind::Shape, "embedding table must be 2-d");
  ENGRAM_CHECK(!ids.empty(), Error::Kind::Shape, "embedding lookup with no ids");
  const int v = table.dim(0), d = table.dim(1);
  for (int id : ids)
    ENGRAM_CHECK(id >= 0 && id < v, Error::Kind::Index, "token id ", id,
                 " outside table of size ", v);
  const int n = static_cast<int>(ids.size());
  Tensor<T> out(Shape{n, d});
  for (int i = 0; i < n; ++i)
    std::copy_n(table.ptr() + size_t(ids[i]) * d, d, out.ptr() + size_t(i) * d);
  auto ti = table.impl, oi = out.impl;
  detail::maybe_record(out, {&table}, [ti, oi, ids, d] {
    if (oi->grad.empty() || !detail::wants(ti)) return;
    detail::ensure_grad(ti);
    for (size_t i = 0; i < ids.size(); ++i)
      for (int j = 0; j < d; ++j) ti->grad[size_t(ids[i]) * d + j] += oi->grad[i * d + j];
  });
  return out;
}

// Mean negative log-likelihood of the target ids under row-wise softmax.
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const std::vector<int>& targets) {
  ENGRAM_CHECK(logits.ndim() == 2, Error::Kind::Shape, "cross_entropy needs 2-d logits");
  const int n = logits.dim(0), v = logits.dim(1);
  ENGRAM_CHECK(static_cast<int>(targets.size()) == n, Error::Kind::Shape,
               "target count ", targets.size(), " does not match ", n, " logit rows");
  for (int t : targets)
    ENGRAM_CHECK(t >= 0 && t < v, Error::Kind::Index, "target id ", t,
                 " outside vocabulary of size ", v);
  auto probs = std::make_shared<std::vector<T>>(size_t(n) * v);
  T loss = T(0);
  for (int i = 0; i < n; ++i) {
    T m = logits.at(i, 0);
    for (int j = 1; j < v; ++j) m = std::max(m, logits.at(i, j));
    T sum = T(0);
    for (int j = 0; j < v; ++j) {
      T e = std::exp(logits.at(i, j) - m);
      (*probs)[size_t(i) * v + j] = e;
      sum += e;
    }
    for (int j = 0; j < v; ++j) (*probs)[size_t(i) * v + j] /= sum;
    loss += std::log(sum) + m - logits.at(i, targets[size_t(i)]);
  }
  Tensor<T> out = Tensor<T>::scalar(loss / T(n));
  check_output_finite(out, "cross_entropy");
  auto li = logits.impl, oi = out.impl;
  detail::maybe_record(out, {&logits}, [li, oi, probs, targets, n, v] {
    if (oi->grad.empty() || !detail::wants(li)) return;
    detail::ensure_grad(li);
    const T g = oi->grad[0] / T(n);
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < v; ++j) {
        T p = (*probs)[size_t(i) * v + j];
        li->grad[size_t(i) * v + j] += g * (p - (j == targets[size_t(i)] ? T(1) : T(0)));
      }
    }
  });
  return out;
}

template <typename T>
Tensor<T> causal_mask(int n) {
  const T neg_inf = -std::numeric_limits<T>::infinity();
  Tensor<T> m(Shape{n, n});
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j) m.at(i, j) = neg_inf;
  return m;
}

}  // namespace engram
