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

// Dense double-precision tensors with tape-based reverse-mode
// differentiation.
//
// A Tensor is a cheap handle onto shared storage: copying a Tensor aliases
// the same values and gradient, the way parameters are shared between a
// model and its optimizer. Use clone() for an independent copy.
//
// Differentiation is opt-in. Operations are recorded only while a Tape is
// alive on the calling thread and at least one input requires a gradient:
//
//   Tape tape;
//   Tensor loss = sum(mul(w, x));
//   tape.backward(loss);        // w.grad() now holds x
//
// Tapes are confined to the thread that created them.

#ifndef SVLAB_TENSOR_H_
#define SVLAB_TENSOR_H_

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace svlab {

using Shape = std::vector<std::size_t>;

// Tensor storage. Eigen's vectorized reductions peel leading elements up to
// the first aligned address, so the summation order follows the buffer's
// alignment; a fixed alignment keeps results independent of heap layout.
using Buffer = std::vector<double, Eigen::aligned_allocator<double>>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct TensorImpl {
  Shape shape;
  Buffer data;
  Buffer grad;  // empty until a gradient is accumulated
  bool requires_grad = false;
  std::int64_t tape_id = -1;  // index of the producing tape node, -1 for leaves
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, const std::vector<double>& values);
  // Takes ownership of values without copying.
  static Tensor from_buffer(Shape shape, Buffer values);

  static Tensor scalar(double value);
  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), 0.0); }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), 1.0); }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const double> data() const;
  // Writing through this span bypasses the tape; only do it on leaves.
  std::span<double> mutable_data();
  double item() const;
  double at(std::initializer_list<std::size_t> index) const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool value);
  bool is_leaf() const;

  bool has_grad() const;
  std::span<const double> grad() const;
  std::span<double> mutable_grad();  // allocates zeros on first use
  Tensor grad_tensor() const;
  void zero_grad();

  // Fresh storage, no gradient, not tape-tracked.
  Tensor clone() const;

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }
  const std::shared_ptr<TensorImpl>& impl() const { return impl_; }

 private:
  std::shared_ptr<TensorImpl> impl_;
};

class Tape {
 public:
  // Receives the gradient of the node output and accumulates into the
  // captured inputs.
  using BackwardFn = std::function<void(std::span<const double>)>;

  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // The innermost live tape on this thread, or nullptr.
  static Tape* active();

  void record(std::vector<std::shared_ptr<TensorImpl>> inputs,
              const Tensor& output, BackwardFn fn);

  // Seeds d loss / d loss = 1, visits every node once in reverse recording
  // order and then clears the tape. Leaf gradients accumulate across calls.
  void backward(const Tensor& loss);

  std::size_t size() const { return nodes_.size(); }
  void clear();

 private:
  struct Node {
    std::vector<std::shared_ptr<TensorImpl>> inputs;
    std::shared_ptr<TensorImpl> output;
    BackwardFn fn;
  };
  std::vector<Node> nodes_;
  Tape* previous_ = nullptr;
  bool suspended_ = false;

  friend class NoGradGuard;
};

// Suspends recording on the active tape for the guard's lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  Tape* tape_;
  bool was_suspended_ = false;
};

// ---------------------------------------------------------------------------
// Operations. Binary elementwise ops broadcast numpy-style: shapes are
// right-aligned and size-1 axes stretch.

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, double b);
Tensor mul(const Tensor& a, double b);
Tensor neg(const Tensor& a);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator+(const Tensor& a, double b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, double b) { return add(a, -b); }
inline Tensor operator*(const Tensor& a, double b) { return mul(a, b); }
inline Tensor operator*(double a, const Tensor& b) { return mul(b, a); }
inline Tensor operator-(const Tensor& a) { return neg(a); }

Shape broadcast_shape(const Shape& a, const Shape& b);

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

// x: [B, Cin, T] or [Cin, T]; w: [Cout, Cin, k] with odd k. Zero "same"
// padding of dilation*(k-1)/2 on each side keeps T. bias may be undefined.
Tensor conv1d(const Tensor& x, const Tensor& w, const Tensor& bias,
              std::size_t dilation = 1);

struct Stride2d {
  std::size_t freq = 1;
  std::size_t time = 1;
};

// x: [B, Cin, F, T] or [Cin, F, T]; w: [Cout, Cin, kF, kT], both kernel
// sides odd. Zero padding of (k-1)/2 is applied before striding, so the
// output is [Cout, ceil(F/sF), ceil(T/sT)].
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias,
              Stride2d stride = {});

Tensor relu(const Tensor& x);

// Test support. While a recorder is alive on the calling thread, relu and
// clamp_min append one bit per element saying which side of the kink the
// input lies on. Two forward passes with equal patterns sit on the same
// linear piece.
class KinkRecorder {
 public:
  KinkRecorder();
  ~KinkRecorder();
  KinkRecorder(const KinkRecorder&) = delete;
  KinkRecorder& operator=(const KinkRecorder&) = delete;
  const std::vector<bool>& sides() const { return sides_; }

 private:
  std::vector<bool> sides_;
  KinkRecorder* previous_;
};

Tensor sigmoid(const Tensor& x);
Tensor tanh(const Tensor& x);
Tensor exp(const Tensor& x);
// log and sqrt floor inputs at kDomainFloor and reject negative inputs.
Tensor log(const Tensor& x);
Tensor sqrt(const Tensor& x);
Tensor square(const Tensor& x);
Tensor clamp_min(const Tensor& x, double floor);
Tensor clamp(const Tensor& x, double lo, double hi);

inline constexpr double kDomainFloor = 1e-10;

Tensor softmax(const Tensor& x, std::size_t axis);
Tensor log_softmax(const Tensor& x, std::size_t axis);

Tensor sum(const Tensor& x);
Tensor sum(const Tensor& x, const std::vector<std::size_t>& axes,
           bool keepdim = false);
Tensor mean(const Tensor& x, const std::vector<std::size_t>& axes,
            bool keepdim = false);
// Population variance.
Tensor variance(const Tensor& x, const std::vector<std::size_t>& axes,
                bool keepdim = false);
// Ties resolve to the lowest index.
Tensor max(const Tensor& x, std::size_t axis, bool keepdim = false);

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor slice(const Tensor& x, std::size_t axis, std::size_t start,
             std::size_t length);
Tensor reshape(const Tensor& x, Shape shape);

// Picks a where mask is nonzero, else b. Mask, a and b share one shape.
Tensor where(const std::vector<std::uint8_t>& mask, const Tensor& a,
             const Tensor& b);

// Mean over rows of -log softmax(logits)[label]. logits: [B, S].
Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> labels);

// Row-wise (axis) L2 normalization.
Tensor l2_normalize(const Tensor& x, std::size_t axis);

// Channel axis is 1; statistics run over every other axis. In training
// mode batch statistics are used and the running buffers are updated in
// place (unbiased variance, PyTorch convention); in eval mode the running
// buffers are used.
Tensor batchnorm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                 Tensor& running_mean, Tensor& running_var, bool training,
                 double momentum = 0.1, double eps = 1e-5);

}  // namespace svlab

#endif  // SVLAB_TENSOR_H_
