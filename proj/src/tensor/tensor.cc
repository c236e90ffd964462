// Copyright 2026 The svlab Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "svlab/tensor.h"

#include <algorithm>
#include <sstream>
#include <utility>

#include "src/tensor/internal.h"
#include "svlab/errors.h"

namespace svlab {

namespace {
thread_local Tape* g_active_tape = nullptr;
}  // namespace

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ')';
  return os.str();
}

Tensor::Tensor(Shape shape, double fill) : impl_(std::make_shared<TensorImpl>()) {
  for (std::size_t d : shape) {
    if (d == 0) throw ShapeError("tensor dimensions must be positive: " + shape_str(shape));
  }
  impl_->data.assign(shape_numel(shape), fill);
  impl_->shape = std::move(shape);
}

Tensor::Tensor(Shape shape, const std::vector<double>& values)
    : Tensor(from_buffer(std::move(shape), Buffer(values.begin(), values.end()))) {}

Tensor Tensor::from_buffer(Shape shape, Buffer values) {
  Tensor t;
  t.impl_ = std::make_shared<TensorImpl>();
  for (std::size_t d : shape) {
    if (d == 0) throw ShapeError("tensor dimensions must be positive: " + shape_str(shape));
  }
  if (shape_numel(shape) != values.size()) {
    throw ShapeError("shape " + shape_str(shape) + " does not match " +
                     std::to_string(values.size()) + " values");
  }
  t.impl_->shape = std::move(shape);
  t.impl_->data = std::move(values);
  return t;
}

Tensor Tensor::scalar(double value) { return Tensor(Shape{}, std::vector<double>{value}); }

const Shape& Tensor::shape() const {
  detail::require_defined(*this, "shape");
  return impl_->shape;
}

std::size_t Tensor::dim(std::size_t axis) const {
  const Shape& s = shape();
  if (axis >= s.size()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  }
  return s[axis];
}

std::size_t Tensor::numel() const { return defined() ? impl_->data.size() : 0; }

std::span<const double> Tensor::data() const {
  detail::require_defined(*this, "data");
  return impl_->data;
}

std::span<double> Tensor::mutable_data() {
  detail::require_defined(*this, "mutable_data");
  return impl_->data;
}

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() needs a single-element tensor, got " + shape_str(shape()));
  return impl_->data[0];
}

double Tensor::at(std::initializer_list<std::size_t> index) const {
  const Shape& s = shape();
  if (index.size() != s.size()) throw ShapeError("index rank mismatch for " + shape_str(s));
  std::size_t flat = 0;
  std::size_t axis = 0;
  for (std::size_t i : index) {
    if (i >= s[axis]) throw ShapeError("index out of range for " + shape_str(s));
    flat = flat * s[axis] + i;
    ++axis;
  }
  return impl_->data[flat];
}

bool Tensor::requires_grad() const { return defined() && impl_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool value) {
  detail::require_defined(*this, "set_requires_grad");
  impl_->requires_grad = value;
  return *this;
}

bool Tensor::is_leaf() const { return defined() && impl_->tape_id < 0; }

bool Tensor::has_grad() const { return defined() && !impl_->grad.empty(); }

std::span<const double> Tensor::grad() const {
  detail::require_defined(*this, "grad");
  return impl_->grad;
}

std::span<double> Tensor::mutable_grad() {
  detail::require_defined(*this, "mutable_grad");
  if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0);
  return impl_->grad;
}

Tensor Tensor::grad_tensor() const {
  if (!has_grad()) return Tensor(shape(), 0.0);
  return from_buffer(shape(), impl_->grad);
}

void Tensor::zero_grad() {
  if (has_grad()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

Tensor Tensor::clone() const {
  detail::require_defined(*this, "clone");
  return from_buffer(impl_->shape, impl_->data);
}

// ---------------------------------------------------------------------------

Tape::Tape() : previous_(g_active_tape) { g_active_tape = this; }

Tape::~Tape() {
  clear();
  g_active_tape = previous_;
}

Tape* Tape::active() {
  Tape* t = g_active_tape;
  return (t && !t->suspended_) ? t : nullptr;
}

void Tape::record(std::vector<std::shared_ptr<TensorImpl>> inputs,
                  const Tensor& output, BackwardFn fn) {
  const auto& out = output.impl();
  out->requires_grad = true;
  out->tape_id = static_cast<std::int64_t>(nodes_.size());
  nodes_.push_back(Node{std::move(inputs), out, std::move(fn)});
}

void Tape::backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1 || !loss.shape().empty()) {
    throw UsageError("backward() needs a scalar loss");
  }
  const auto& root = loss.impl();
  if (!root->requires_grad) {
    throw UsageError("backward() loss is not recorded on the tape");
  }
  root->grad.assign(1, 1.0);
  for (std::size_t i = nodes_.size(); i-- > 0;) {
    Node& node = nodes_[i];
    if (node.output->grad.empty()) {
      node.output->grad.assign(node.output->data.size(), 0.0);
    } else {
      node.fn(node.output->grad);
    }
    for (const auto& in : node.inputs) {
      if (in->requires_grad && in->grad.empty()) in->grad.assign(in->data.size(), 0.0);
    }
  }
  clear();
}

void Tape::clear() {
  for (Node& node : nodes_) node.output->tape_id = -1;
  nodes_.clear();
}

NoGradGuard::NoGradGuard() : tape_(g_active_tape) {
  if (tape_) {
    was_suspended_ = tape_->suspended_;
    tape_->suspended_ = true;
  }
}

NoGradGuard::~NoGradGuard() {
  if (tape_) tape_->suspended_ = was_suspended_;
}

// ---------------------------------------------------------------------------

namespace detail {

bool wants_grad(std::initializer_list<const Tensor*> inputs) {
  if (Tape::active() == nullptr) return false;
  return std::any_of(inputs.begin(), inputs.end(),
                     [](const Tensor* t) { return t->requires_grad(); });
}

std::span<double> grad_of(const ImplPtr& impl) {
  if (!impl->requires_grad) return {};
  if (impl->grad.empty()) impl->grad.assign(impl->data.size(), 0.0);
  return impl->grad;
}

Tensor make_tensor(Shape shape, Buffer values) {
  return Tensor::from_buffer(std::move(shape), std::move(values));
}

void record(std::vector<ImplPtr> inputs, const Tensor& output,
            Tape::BackwardFn fn) {
  Tape::active()->record(std::move(inputs), output, std::move(fn));
}

void require_defined(const Tensor& t, const char* op) {
  if (!t.defined()) throw UsageError(std::string(op) + ": undefined tensor");
}

AxisSplit split_axis(const Shape& shape, std::size_t axis, const char* op) {
  if (axis >= shape.size()) {
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) +
                     " out of range for " + shape_str(shape));
  }
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.n = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

std::vector<std::size_t> broadcast_strides(const Shape& shape, const Shape& out) {
  const std::size_t rank = out.size();
  std::vector<std::size_t> strides(rank, 0);
  const std::size_t offset = rank - shape.size();
  std::size_t stride = 1;
  for (std::size_t i = shape.size(); i-- > 0;) {
    strides[offset + i] = shape[i] == 1 ? 0 : stride;
    stride *= shape[i];
  }
  return strides;
}

}  // namespace detail
}  // namespace svlab
