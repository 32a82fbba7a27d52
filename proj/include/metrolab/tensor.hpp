// SPDX-License-Identifier: Apache-2.0
//
// Dense row-major tensors with reverse-mode differentiation.
//
// A Tensor is a shared handle: copies alias the same storage, which is how model
// parameters, optimizer state and recorded operations refer to one buffer. Ops
// record a backward closure on the thread's active Tape (see TapeScope) whenever
// at least one input requires a gradient; with no active tape they run as plain
// inference.
#pragma once

#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "metrolab/types.hpp"

namespace metrolab {

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

template <class Real>
class Tensor {
 public:
  Tensor() = default;
  /// Zero-filled tensor.
  explicit Tensor(Shape shape, bool requires_grad = false);
  Tensor(Shape shape, std::vector<Real> values, bool requires_grad = false);

  static Tensor scalar(Real value) { return Tensor(Shape{1}, std::vector<Real>{value}); }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t numel() const { return node_->value.size(); }

  std::span<const Real> data() const { return node_->value; }
  std::span<Real> mutable_data() { return node_->value; }
  Real item() const;

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool flag) { node_->requires_grad = flag; }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const Real> grad() const { return node_->grad; }
  /// Gradient buffer, allocated (zero-filled) on first use. Callable on const
  /// handles: backward closures accumulate into inputs they hold by const copy.
  std::span<Real> mutable_grad() const;
  /// Drops the gradient buffer; has_grad() is false until the next backward touches it.
  void zero_grad() { node_->grad.clear(); node_->grad.shrink_to_fit(); }

  /// Copy of the values with no gradient history.
  Tensor detach() const;
  bool same_storage(const Tensor& other) const { return node_ == other.node_; }

 private:
  struct Node {
    Shape shape;
    std::vector<Real> value;
    std::vector<Real> grad;
    bool requires_grad = false;
  };
  std::shared_ptr<Node> node_;
};

/// Ordered record of differentiable operations for one forward pass.
template <class Real>
class Tape {
 public:
  using BackwardFn = std::function<void()>;

  void record(BackwardFn fn);

  /// Seeds d(loss)/d(loss) = 1 and replays the record in reverse. The record is
  /// consumed; a second call before any new op is recorded is a ContractError.
  void backward(const Tensor<Real>& loss);

  std::size_t size() const { return entries_.size(); }
  bool consumed() const { return consumed_; }
  void clear() {
    entries_.clear();
    consumed_ = false;
  }

 private:
  std::vector<BackwardFn> entries_;
  bool consumed_ = false;
};

template <class Real>
Tape<Real>* active_tape();

/// Makes `tape` the recording target for ops on this thread until destruction.
template <class Real>
class TapeScope {
 public:
  explicit TapeScope(Tape<Real>& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape<Real>* previous_;
};

/// Suspends recording on this thread (inference inside a training scope).
template <class Real>
class NoGradScope {
 public:
  NoGradScope();
  ~NoGradScope();
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape<Real>* previous_;
};

}  // namespace metrolab
