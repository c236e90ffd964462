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

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>
#include <utility>

#include "src/tensor/internal.h"
#include "svlab/errors.h"
#include "svlab/tensor.h"

namespace svlab {

using detail::broadcast_for_each;
using detail::broadcast_strides;
using detail::grad_of;
using detail::ImplPtr;
using detail::make_tensor;
using detail::record;
using detail::require_defined;
using detail::wants_grad;

using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapC = Eigen::Map<const RowMajor>;
using Map = Eigen::Map<RowMajor>;

Shape broadcast_shape(const Shape& a, const Shape& b) {
  const std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank, 1);
  for (std::size_t i = 0; i < rank; ++i) {
    const std::size_t da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    const std::size_t db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw ShapeError("cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    }
    out[i] = std::max(da, db);
  }
  return out;
}

namespace {

// ga/gb map (a value, b value, output grad) to the contribution for a/b.
template <typename F, typename GA, typename GB>
Tensor binary(const Tensor& a, const Tensor& b, F f, GA ga, GB gb) {
  require_defined(a, "binary op");
  require_defined(b, "binary op");
  const Shape out_shape = broadcast_shape(a.shape(), b.shape());
  const auto sa = broadcast_strides(a.shape(), out_shape);
  const auto sb = broadcast_strides(b.shape(), out_shape);
  Buffer out(shape_numel(out_shape));
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  broadcast_for_each(out_shape, sa, sb, [&](std::size_t k, std::size_t i, std::size_t j) {
    out[k] = f(pa[i], pb[j]);
  });
  Tensor result = make_tensor(out_shape, std::move(out));
  if (wants_grad({&a, &b})) {
    ImplPtr ia = a.impl();
    ImplPtr ib = b.impl();
    record({ia, ib}, result, [ia, ib, out_shape, sa, sb, ga, gb](std::span<const double> g) {
      auto da = grad_of(ia);
      auto db = grad_of(ib);
      const double* va = ia->data.data();
      const double* vb = ib->data.data();
      broadcast_for_each(out_shape, sa, sb, [&](std::size_t k, std::size_t i, std::size_t j) {
        if (!da.empty()) da[i] += ga(va[i], vb[j], g[k]);
        if (!db.empty()) db[j] += gb(va[i], vb[j], g[k]);
      });
    });
  }
  return result;
}

// bwd maps (input, output, output grad) to the input grad.
template <typename F, typename B>
Tensor unary(const Tensor& x, F f, B bwd) {
  require_defined(x, "unary op");
  Buffer out(x.numel());
  const auto in = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(in[i]);
  Tensor result = make_tensor(x.shape(), std::move(out));
  if (wants_grad({&x})) {
    ImplPtr ix = x.impl();
    std::weak_ptr<TensorImpl> wy = result.impl();
    record({ix}, result, [ix, wy, bwd](std::span<const double> g) {
      auto dx = grad_of(ix);
      auto y = wy.lock();
      for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += bwd(ix->data[i], y->data[i], g[i]);
    });
  }
  return result;
}

std::vector<std::size_t> checked_axes(const Shape& shape, std::vector<std::size_t> axes,
                                      const char* op) {
  std::sort(axes.begin(), axes.end());
  if (std::adjacent_find(axes.begin(), axes.end()) != axes.end()) {
    throw ShapeError(std::string(op) + ": repeated axis");
  }
  for (std::size_t a : axes) {
    if (a >= shape.size()) {
      throw ShapeError(std::string(op) + ": axis " + std::to_string(a) + " out of range for " +
                       shape_str(shape));
    }
  }
  return axes;
}

void check_domain(std::span<const double> v, const char* op) {
  for (double x : v) {
    if (x < 0.0 || std::isnan(x)) {
      throw DomainError(std::string(op) + " of negative or NaN value " + std::to_string(x));
    }
  }
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, [](double x, double y) { return x + y; },
      [](double, double, double g) { return g; }, [](double, double, double g) { return g; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, [](double x, double y) { return x - y; },
      [](double, double, double g) { return g; }, [](double, double, double g) { return -g; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, [](double x, double y) { return x * y; },
      [](double, double y, double g) { return g * y; },
      [](double x, double, double g) { return g * x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, [](double x, double y) { return x / y; },
      [](double, double y, double g) { return g / y; },
      [](double x, double y, double g) { return -g * x / (y * y); });
}

Tensor add(const Tensor& a, double b) {
  return unary(
      a, [b](double x) { return x + b; }, [](double, double, double g) { return g; });
}

Tensor mul(const Tensor& a, double b) {
  return unary(
      a, [b](double x) { return x * b; }, [b](double, double, double g) { return g * b; });
}

Tensor neg(const Tensor& a) { return mul(a, -1.0); }

namespace {
thread_local KinkRecorder* g_kink_recorder = nullptr;
thread_local std::vector<bool>* g_kink_sides = nullptr;

void record_kinks(const Tensor& x, double at) {
  if (g_kink_sides == nullptr) return;
  for (double v : x.data()) g_kink_sides->push_back(v > at);
}
}  // namespace

KinkRecorder::KinkRecorder() : previous_(g_kink_recorder) {
  g_kink_recorder = this;
  g_kink_sides = &sides_;
}

KinkRecorder::~KinkRecorder() {
  g_kink_recorder = previous_;
  g_kink_sides = previous_ ? &previous_->sides_ : nullptr;
}

Tensor relu(const Tensor& x) {
  record_kinks(x, 0.0);
  return unary(
      x, [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v, double, double g) { return v > 0.0 ? g : 0.0; });
}

Tensor sigmoid(const Tensor& x) {
  return unary(
      x,
      [](double v) {
        if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
        const double e = std::exp(v);
        return e / (1.0 + e);
      },
      [](double, double y, double g) { return g * y * (1.0 - y); });
}

Tensor tanh(const Tensor& x) {
  return unary(
      x, [](double v) { return std::tanh(v); },
      [](double, double y, double g) { return g * (1.0 - y * y); });
}

Tensor exp(const Tensor& x) {
  return unary(
      x, [](double v) { return std::exp(v); }, [](double, double y, double g) { return g * y; });
}

Tensor log(const Tensor& x) {
  require_defined(x, "log");
  check_domain(x.data(), "log");
  return unary(
      x, [](double v) { return std::log(std::max(v, kDomainFloor)); },
      [](double v, double, double g) { return v >= kDomainFloor ? g / v : 0.0; });
}

Tensor sqrt(const Tensor& x) {
  require_defined(x, "sqrt");
  check_domain(x.data(), "sqrt");
  return unary(
      x, [](double v) { return std::sqrt(std::max(v, kDomainFloor)); },
      [](double v, double y, double g) { return v >= kDomainFloor ? 0.5 * g / y : 0.0; });
}

Tensor square(const Tensor& x) {
  return unary(
      x, [](double v) { return v * v; }, [](double v, double, double g) { return 2.0 * v * g; });
}

Tensor clamp_min(const Tensor& x, double floor) {
  record_kinks(x, floor);
  return unary(
      x, [floor](double v) { return std::max(v, floor); },
      [floor](double v, double, double g) { return v > floor ? g : 0.0; });
}

Tensor clamp(const Tensor& x, double lo, double hi) {
  return unary(
      x, [lo, hi](double v) { return std::clamp(v, lo, hi); },
      [lo, hi](double v, double, double g) { return (v > lo && v < hi) ? g : 0.0; });
}

// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_defined(a, "matmul");
  require_defined(b, "matmul");
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Buffer out(m * n);
  Map(out.data(), m, n).noalias() = MapC(a.data().data(), m, k) * MapC(b.data().data(), k, n);
  Tensor result = make_tensor({m, n}, std::move(out));
  if (wants_grad({&a, &b})) {
    ImplPtr ia = a.impl(), ib = b.impl();
    record({ia, ib}, result, [ia, ib, m, k, n](std::span<const double> g) {
      MapC gm(g.data(), m, n);
      if (auto da = grad_of(ia); !da.empty()) {
        Map(da.data(), m, k).noalias() += gm * MapC(ib->data.data(), k, n).transpose();
      }
      if (auto db = grad_of(ib); !db.empty()) {
        Map(db.data(), k, n).noalias() += MapC(ia->data.data(), m, k).transpose() * gm;
      }
    });
  }
  return result;
}

Tensor transpose(const Tensor& a) {
  require_defined(a, "transpose");
  if (a.rank() != 2) throw ShapeError("transpose needs a matrix, got " + shape_str(a.shape()));
  const std::size_t m = a.dim(0), n = a.dim(1);
  Buffer out(m * n);
  Map(out.data(), n, m) = MapC(a.data().data(), m, n).transpose();
  Tensor result = make_tensor({n, m}, std::move(out));
  if (wants_grad({&a})) {
    ImplPtr ia = a.impl();
    record({ia}, result, [ia, m, n](std::span<const double> g) {
      auto da = grad_of(ia);
      Map(da.data(), m, n) += MapC(g.data(), n, m).transpose();
    });
  }
  return result;
}

// ---------------------------------------------------------------------------

Tensor sum(const Tensor& x) {
  std::vector<std::size_t> axes(x.rank());
  std::iota(axes.begin(), axes.end(), 0);
  return sum(x, axes, false);
}

Tensor sum(const Tensor& x, const std::vector<std::size_t>& axes_in, bool keepdim) {
  require_defined(x, "sum");
  const auto axes = checked_axes(x.shape(), axes_in, "sum");
  Shape kept = x.shape();
  for (std::size_t a : axes) kept[a] = 1;
  Shape out_shape;
  if (keepdim) {
    out_shape = kept;
  } else {
    for (std::size_t i = 0; i < kept.size(); ++i) {
      if (!std::binary_search(axes.begin(), axes.end(), i)) out_shape.push_back(kept[i]);
    }
  }
  const Shape in_shape = x.shape();
  const auto sx = broadcast_strides(in_shape, in_shape);
  const auto so = broadcast_strides(kept, in_shape);
  Buffer out(shape_numel(kept), 0.0);
  const double* px = x.data().data();
  broadcast_for_each(in_shape, sx, so,
                     [&](std::size_t, std::size_t i, std::size_t o) { out[o] += px[i]; });
  Tensor result = make_tensor(out_shape, std::move(out));
  if (wants_grad({&x})) {
    ImplPtr ix = x.impl();
    record({ix}, result, [ix, in_shape, sx, so](std::span<const double> g) {
      auto dx = grad_of(ix);
      broadcast_for_each(in_shape, sx, so,
                         [&](std::size_t, std::size_t i, std::size_t o) { dx[i] += g[o]; });
    });
  }
  return result;
}

Tensor mean(const Tensor& x, const std::vector<std::size_t>& axes, bool keepdim) {
  std::size_t count = 1;
  for (std::size_t a : checked_axes(x.shape(), axes, "mean")) count *= x.dim(a);
  return mul(sum(x, axes, keepdim), 1.0 / static_cast<double>(count));
}

Tensor variance(const Tensor& x, const std::vector<std::size_t>& axes, bool keepdim) {
  Tensor centered = sub(x, mean(x, axes, true));
  return mean(square(centered), axes, keepdim);
}

Tensor max(const Tensor& x, std::size_t axis, bool keepdim) {
  require_defined(x, "max");
  const auto s = detail::split_axis(x.shape(), axis, "max");
  Buffer out(s.outer * s.inner);
  std::vector<std::size_t> arg(out.size());
  const auto px = x.data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      std::size_t best = 0;
      double best_v = px[o * s.n * s.inner + i];
      for (std::size_t j = 1; j < s.n; ++j) {
        const double v = px[(o * s.n + j) * s.inner + i];
        if (v > best_v) {
          best_v = v;
          best = j;
        }
      }
      out[o * s.inner + i] = best_v;
      arg[o * s.inner + i] = (o * s.n + best) * s.inner + i;
    }
  }
  Shape out_shape = x.shape();
  if (keepdim) {
    out_shape[axis] = 1;
  } else {
    out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
  }
  Tensor result = make_tensor(out_shape, std::move(out));
  if (wants_grad({&x})) {
    ImplPtr ix = x.impl();
    record({ix}, result, [ix, arg = std::move(arg)](std::span<const double> g) {
      auto dx = grad_of(ix);
      for (std::size_t k = 0; k < arg.size(); ++k) dx[arg[k]] += g[k];
    });
  }
  return result;
}

Tensor softmax(const Tensor& x, std::size_t axis) {
  require_defined(x, "softmax");
  const auto s = detail::split_axis(x.shape(), axis, "softmax");
  const auto px = x.data();
  Buffer out(px.size());
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.n * s.inner + i;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < s.n; ++j) mx = std::max(mx, px[base + j * s.inner]);
      double total = 0.0;
      for (std::size_t j = 0; j < s.n; ++j) {
        const double e = std::exp(px[base + j * s.inner] - mx);
        out[base + j * s.inner] = e;
        total += e;
      }
      for (std::size_t j = 0; j < s.n; ++j) out[base + j * s.inner] /= total;
    }
  }
  Tensor result = make_tensor(x.shape(), std::move(out));
  if (wants_grad({&x})) {
    ImplPtr ix = x.impl();
    std::weak_ptr<TensorImpl> wy = result.impl();
    record({ix}, result, [ix, wy, s](std::span<const double> g) {
      auto dx = grad_of(ix);
      const auto& y = wy.lock()->data;
      for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t i = 0; i < s.inner; ++i) {
          const std::size_t base = o * s.n * s.inner + i;
          double dot = 0.0;
          for (std::size_t j = 0; j < s.n; ++j) dot += g[base + j * s.inner] * y[base + j * s.inner];
          for (std::size_t j = 0; j < s.n; ++j) {
            const std::size_t k = base + j * s.inner;
            dx[k] += y[k] * (g[k] - dot);
          }
        }
      }
    });
  }
  return result;
}

Tensor log_softmax(const Tensor& x, std::size_t axis) {
  require_defined(x, "log_softmax");
  const auto s = detail::split_axis(x.shape(), axis, "log_softmax");
  const auto px = x.data();
  Buffer out(px.size());
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.n * s.inner + i;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < s.n; ++j) mx = std::max(mx, px[base + j * s.inner]);
      double total = 0.0;
      for (std::size_t j = 0; j < s.n; ++j) total += std::exp(px[base + j * s.inner] - mx);
      const double lse = mx + std::log(total);
      for (std::size_t j = 0; j < s.n; ++j) out[base + j * s.inner] = px[base + j * s.inner] - lse;
    }
  }
  Tensor result = make_tensor(x.shape(), std::move(out));
  if (wants_grad({&x})) {
    ImplPtr ix = x.impl();
    std::weak_ptr<TensorImpl> wy = result.impl();
    record({ix}, result, [ix, wy, s](std::span<const double> g) {
      auto dx = grad_of(ix);
      const auto& y = wy.lock()->data;
      for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t i = 0; i < s.inner; ++i) {
          const std::size_t base = o * s.n * s.inner + i;
          double gsum = 0.0;
          for (std::size_t j = 0; j < s.n; ++j) gsum += g[base + j * s.inner];
          for (std::size_t j = 0; j < s.n; ++j) {
            const std::size_t k = base + j * s.inner;
            dx[k] += g[k] - std::exp(y[k]) * gsum;
          }
        }
      }
    });
  }
  return result;
}

// ---------------------------------------------------------------------------

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  for (const Tensor& p : parts) require_defined(p, "concat");
  const Shape& first = parts[0].shape();
  if (axis >= first.size()) throw ShapeError("concat: axis out of range for " + shape_str(first));
  Shape out_shape = first;
  out_shape[axis] = 0;
  std::vector<std::size_t> widths;
  for (const Tensor& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == first.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = (i == axis) || s[i] == first[i];
    if (!ok) {
      throw ShapeError("concat: incompatible shapes " + shape_str(first) + " and " + shape_str(s));
    }
    out_shape[axis] += s[axis];
    widths.push_back(s[axis]);
  }
  const auto split = detail::split_axis(out_shape, axis, "concat");
  Buffer out(shape_numel(out_shape));
  std::size_t offset = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const auto src = parts[p].data();
    const std::size_t chunk = widths[p] * split.inner;
    for (std::size_t o = 0; o < split.outer; ++o) {
      std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(o * chunk), chunk,
                  out.begin() + static_cast<std::ptrdiff_t>(o * split.n * split.inner + offset));
    }
    offset += chunk;
  }
  Tensor result = make_tensor(out_shape, std::move(out));
  bool any = false;
  for (const Tensor& p : parts) any = any || wants_grad({&p});
  if (any) {
    std::vector<ImplPtr> inputs;
    for (const Tensor& p : parts) inputs.push_back(p.impl());
    record(inputs, result, [inputs, widths, split](std::span<const double> g) {
      std::size_t offset = 0;
      for (std::size_t p = 0; p < inputs.size(); ++p) {
        const std::size_t chunk = widths[p] * split.inner;
        auto dp = grad_of(inputs[p]);
        if (!dp.empty()) {
          for (std::size_t o = 0; o < split.outer; ++o) {
            const double* src = g.data() + o * split.n * split.inner + offset;
            double* dst = dp.data() + o * chunk;
            for (std::size_t k = 0; k < chunk; ++k) dst[k] += src[k];
          }
        }
        offset += chunk;
      }
    });
  }
  return result;
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length) {
  require_defined(x, "slice");
  const auto s = detail::split_axis(x.shape(), axis, "slice");
  if (length == 0 || start + length > s.n) {
    throw ShapeError("slice [" + std::to_string(start) + ", " + std::to_string(start + length) +
                     ") out of range for axis of size " + std::to_string(s.n));
  }
  Shape out_shape = x.shape();
  out_shape[axis] = length;
  const std::size_t chunk = length * s.inner;
  Buffer out(s.outer * chunk);
  const auto px = x.data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    std::copy_n(px.begin() + static_cast<std::ptrdiff_t>((o * s.n + start) * s.inner), chunk,
                out.begin() + static_cast<std::ptrdiff_t>(o * chunk));
  }
  Tensor result = make_tensor(out_shape, std::move(out));
  if (wants_grad({&x})) {
    ImplPtr ix = x.impl();
    record({ix}, result, [ix, s, start, chunk](std::span<const double> g) {
      auto dx = grad_of(ix);
      for (std::size_t o = 0; o < s.outer; ++o) {
        double* dst = dx.data() + (o * s.n + start) * s.inner;
        const double* src = g.data() + o * chunk;
        for (std::size_t k = 0; k < chunk; ++k) dst[k] += src[k];
      }
    });
  }
  return result;
}

Tensor reshape(const Tensor& x, Shape shape) {
  require_defined(x, "reshape");
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  Tensor result = make_tensor(std::move(shape), Buffer(x.data().begin(), x.data().end()));
  if (wants_grad({&x})) {
    ImplPtr ix = x.impl();
    record({ix}, result, [ix](std::span<const double> g) {
      auto dx = grad_of(ix);
      for (std::size_t k = 0; k < dx.size(); ++k) dx[k] += g[k];
    });
  }
  return result;
}

Tensor where(const std::vector<std::uint8_t>& mask, const Tensor& a, const Tensor& b) {
  require_defined(a, "where");
  require_defined(b, "where");
  if (a.shape() != b.shape() || mask.size() != a.numel()) {
    throw ShapeError("where: mask/operand shapes disagree");
  }
  Buffer out(a.numel());
  const auto pa = a.data(), pb = b.data();
  for (std::size_t k = 0; k < out.size(); ++k) out[k] = mask[k] ? pa[k] : pb[k];
  Tensor result = make_tensor(a.shape(), std::move(out));
  if (wants_grad({&a, &b})) {
    ImplPtr ia = a.impl(), ib = b.impl();
    record({ia, ib}, result, [ia, ib, mask](std::span<const double> g) {
      auto da = grad_of(ia);
      auto db = grad_of(ib);
      for (std::size_t k = 0; k < g.size(); ++k) {
        if (mask[k]) {
          if (!da.empty()) da[k] += g[k];
        } else if (!db.empty()) {
          db[k] += g[k];
        }
      }
    });
  }
  return result;
}

Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> labels) {
  require_defined(logits, "cross_entropy");
  if (logits.rank() != 2 || logits.dim(0) != labels.size()) {
    throw ShapeError("cross_entropy: logits " + shape_str(logits.shape()) + " vs " +
                     std::to_string(labels.size()) + " labels");
  }
  const std::size_t rows = logits.dim(0), classes = logits.dim(1);
  for (std::size_t label : labels) {
    if (label >= classes) {
      throw DataError("cross_entropy: label " + std::to_string(label) + " out of range [0, " +
                      std::to_string(classes) + ")");
    }
  }
  Tensor lsm = log_softmax(logits, 1);
  const auto v = lsm.data();
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) total -= v[r * classes + labels[r]];
  Tensor result = Tensor::scalar(total / static_cast<double>(rows));
  if (wants_grad({&lsm})) {
    ImplPtr il = lsm.impl();
    std::vector<std::size_t> lab(labels.begin(), labels.end());
    record({il}, result, [il, lab, classes](std::span<const double> g) {
      auto dl = grad_of(il);
      const double scale = g[0] / static_cast<double>(lab.size());
      for (std::size_t r = 0; r < lab.size(); ++r) dl[r * classes + lab[r]] -= scale;
    });
  }
  return result;
}

Tensor l2_normalize(const Tensor& x, std::size_t axis) {
  return div(x, sqrt(sum(square(x), {axis}, true)));
}

// ---------------------------------------------------------------------------

Tensor batchnorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, Tensor& running_mean,
                 Tensor& running_var, bool training, double momentum, double eps) {
  require_defined(x, "batchnorm");
  if (x.rank() < 2) throw ShapeError("batchnorm needs [B, C, ...], got " + shape_str(x.shape()));
  const std::size_t batch = x.dim(0), channels = x.dim(1);
  const std::size_t inner = x.numel() / (batch * channels);
  for (const Tensor* t : std::initializer_list<const Tensor*>{&gamma, &beta, &running_mean, &running_var}) {
    if (!t->defined() || t->numel() != channels) {
      throw ShapeError("batchnorm: parameter size does not match " + std::to_string(channels) +
                       " channels");
    }
  }
  const std::size_t count = batch * inner;
  if (training && count < 2) {
    throw ShapeError("batchnorm: training needs more than one value per channel");
  }
  const auto px = x.data();
  Buffer mu(channels, 0.0), inv_std(channels, 0.0);
  auto rm = running_mean.mutable_data();
  auto rv = running_var.mutable_data();
  for (std::size_t c = 0; c < channels; ++c) {
    if (training) {
      double m = 0.0;
      for (std::size_t b = 0; b < batch; ++b) {
        const double* row = px.data() + (b * channels + c) * inner;
        for (std::size_t i = 0; i < inner; ++i) m += row[i];
      }
      m /= static_cast<double>(count);
      double var = 0.0;
      for (std::size_t b = 0; b < batch; ++b) {
        const double* row = px.data() + (b * channels + c) * inner;
        for (std::size_t i = 0; i < inner; ++i) var += (row[i] - m) * (row[i] - m);
      }
      var /= static_cast<double>(count);
      mu[c] = m;
      inv_std[c] = 1.0 / std::sqrt(var + eps);
      const double unbiased = var * static_cast<double>(count) / static_cast<double>(count - 1);
      rm[c] = (1.0 - momentum) * rm[c] + momentum * m;
      rv[c] = (1.0 - momentum) * rv[c] + momentum * unbiased;
    } else {
      mu[c] = rm[c];
      inv_std[c] = 1.0 / std::sqrt(rv[c] + eps);
    }
  }
  const auto pg = gamma.data(), pb = beta.data();
  Buffer xhat(px.size());
  Buffer out(px.size());
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t c = 0; c < channels; ++c) {
      const std::size_t base = (b * channels + c) * inner;
      for (std::size_t i = 0; i < inner; ++i) {
        const double h = (px[base + i] - mu[c]) * inv_std[c];
        xhat[base + i] = h;
        out[base + i] = pg[c] * h + pb[c];
      }
    }
  }
  Tensor result = make_tensor(x.shape(), std::move(out));
  if (wants_grad({&x, &gamma, &beta})) {
    ImplPtr ix = x.impl(), ig = gamma.impl(), ib = beta.impl();
    record({ix, ig, ib}, result,
           [ix, ig, ib, xhat = std::move(xhat), inv_std = std::move(inv_std), batch, channels,
            inner, count, training](std::span<const double> g) {
             auto dx = grad_of(ix);
             auto dg = grad_of(ig);
             auto db = grad_of(ib);
             const auto& gam = ig->data;
             for (std::size_t c = 0; c < channels; ++c) {
               double sum_g = 0.0, sum_gh = 0.0;
               for (std::size_t b = 0; b < batch; ++b) {
                 const std::size_t base = (b * channels + c) * inner;
                 for (std::size_t i = 0; i < inner; ++i) {
                   sum_g += g[base + i];
                   sum_gh += g[base + i] * xhat[base + i];
                 }
               }
               if (!dg.empty()) dg[c] += sum_gh;
               if (!db.empty()) db[c] += sum_g;
               if (dx.empty()) continue;
               const double scale = gam[c] * inv_std[c];
               const double n = static_cast<double>(count);
               for (std::size_t b = 0; b < batch; ++b) {
                 const std::size_t base = (b * channels + c) * inner;
                 for (std::size_t i = 0; i < inner; ++i) {
                   if (training) {
                     dx[base + i] += scale * (g[base + i] - sum_g / n - xhat[base + i] * sum_gh / n);
                   } else {
                     dx[base + i] += scale * g[base + i];
                   }
                 }
               }
             }
           });
  }
  return result;
}

}  // namespace svlab
