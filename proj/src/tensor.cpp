// SPDX-License-Identifier: Apache-2.0
#include "metrolab/tensor.hpp"

#include <sstream>

#include "metrolab/errors.hpp"

namespace metrolab {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t extent : shape) n *= extent;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace {

void check_shape(const Shape& shape) {
  if (shape.empty()) throw DimensionError("tensor shape must have at least one extent");
  for (std::size_t extent : shape) {
    if (extent == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
  }
}

template <class Real>
Tape<Real>*& active_slot() {
  thread_local Tape<Real>* slot = nullptr;
  return slot;
}

}  // namespace

template <class Real>
Tensor<Real>::Tensor(Shape shape, bool requires_grad) : node_(std::make_shared<Node>()) {
  check_shape(shape);
  node_->value.assign(shape_numel(shape), Real(0));
  node_->shape = std::move(shape);
  node_->requires_grad = requires_grad;
}

template <class Real>
Tensor<Real>::Tensor(Shape shape, std::vector<Real> values, bool requires_grad)
    : node_(std::make_shared<Node>()) {
  check_shape(shape);
  if (shape_numel(shape) != values.size()) {
    throw DimensionError("tensor of shape " + shape_str(shape) + " needs " +
                         std::to_string(shape_numel(shape)) + " values, got " +
                         std::to_string(values.size()));
  }
  node_->shape = std::move(shape);
  node_->value = std::move(values);
  node_->requires_grad = requires_grad;
}

template <class Real>
Real Tensor<Real>::item() const {
  if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
  return node_->value[0];
}

template <class Real>
std::span<Real> Tensor<Real>::mutable_grad() const {
  if (node_->grad.empty()) node_->grad.assign(node_->value.size(), Real(0));
  return node_->grad;
}

template <class Real>
Tensor<Real> Tensor<Real>::detach() const {
  return Tensor(node_->shape, node_->value, false);
}

template <class Real>
void Tape<Real>::record(BackwardFn fn) {
  if (consumed_) consumed_ = false;
  entries_.push_back(std::move(fn));
}

template <class Real>
void Tape<Real>::backward(const Tensor<Real>& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("backward: loss must be a scalar tensor, got shape " +
                        (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
  }
  if (consumed_) {
    throw ContractError("backward: tape already consumed; run a new forward pass first");
  }
  if (!loss.requires_grad()) {
    throw ContractError("backward: loss was not produced by recorded operations");
  }
  Tensor<Real> seed = loss;
  seed.mutable_grad()[0] += Real(1);
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) (*it)();
  entries_.clear();
  consumed_ = true;
}

template <class Real>
Tape<Real>* active_tape() {
  return active_slot<Real>();
}

template <class Real>
TapeScope<Real>::TapeScope(Tape<Real>& tape) : previous_(active_slot<Real>()) {
  active_slot<Real>() = &tape;
}

template <class Real>
TapeScope<Real>::~TapeScope() {
  active_slot<Real>() = previous_;
}

template <class Real>
NoGradScope<Real>::NoGradScope() : previous_(active_slot<Real>()) {
  active_slot<Real>() = nullptr;
}

template <class Real>
NoGradScope<Real>::~NoGradScope() {
  active_slot<Real>() = previous_;
}

template class Tensor<float>;
template class Tensor<double>;
template class Tape<float>;
template class Tape<double>;
template class TapeScope<float>;
template class TapeScope<double>;
template class NoGradScope<float>;
template class NoGradScope<double>;
template Tape<float>* active_tape<float>();
template Tape<double>* active_tape<double>();

}  // namespace metrolab
