#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "engram/tensor.hpp"

namespace engram {

// Reverse-mode tape. Constructing a Tape makes it the live tape for the
// current thread; every differentiable op that sees a grad-requiring input
// while a tape is live records a backward closure. backward(loss) replays the
// closures in reverse and then marks the tape consumed. Destroying the tape
// turns all recorded intermediates back into plain value tensors.
template <typename T>
class Tape {
 public:
  Tape() {
    ENGRAM_CHECK(active_ == nullptr, Error::Kind::Graph,
                 "nested autograd tapes are not supported");
    active_ = this;
  }

  ~Tape() {
    for (auto& out : outputs_) {
      out->tape_id = -1;
      out->requires_grad = false;
      out->grad.clear();
    }
    active_ = nullptr;
  }

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active() { return active_; }

  int32_t record(std::function<void()> backward_fn, std::shared_ptr<TensorData<T>> output) {
    nodes_.push_back(std::move(backward_fn));
    outputs_.push_back(std::move(output));
    return static_cast<int32_t>(nodes_.size()) - 1;
  }

  void backward(const Tensor<T>& loss) {
    ENGRAM_CHECK(!consumed_, Error::Kind::Graph,
                 "backward called twice on the same graph");
    ENGRAM_CHECK(loss.defined() && loss.numel() == 1, Error::Kind::Graph,
                 "backward needs a scalar loss");
    ENGRAM_CHECK(loss.impl->tape_id >= 0, Error::Kind::Graph,
                 "loss tensor was not produced by the recorded graph");
    loss.impl->grad.assign(1, T(1));
    for (size_t i = nodes_.size(); i > 0; --i) nodes_[i - 1]();
    consumed_ = true;
  }

  bool consumed() const { return consumed_; }
  size_t size() const { return nodes_.size(); }

 private:
  std::vector<std::function<void()>> nodes_;
  std::vector<std::shared_ptr<TensorData<T>>> outputs_;
  bool consumed_ = false;

  static thread_local Tape* active_;
};

template <typename T>
thread_local Tape<T>* Tape<T>::active_ = nullptr;

template <typename T>
void backward(const Tensor<T>& loss) {
  ENGRAM_CHECK(Tape<T>::active() != nullptr, Error::Kind::Graph,
               "backward called with no live tape");
  Tape<T>::active()->backward(loss);
}

// Value-identical copy with no tape attachment and no grad requirement.
template <typename T>
Tensor<T> detach(const Tensor<T>& x) {
  return x.clone();
}

}  // namespace engram
