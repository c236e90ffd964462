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

// Convolutions lower to im2col + GEMM, one batch item at a time. The column
// buffer is rebuilt in the backward pass instead of being kept alive.

#include <Eigen/Core>
#include <algorithm>
#include <string>
#include <utility>

#include "src/tensor/internal.h"
#include "svlab/errors.h"
#include "svlab/tensor.h"

namespace svlab {

using detail::grad_of;
using detail::ImplPtr;
using detail::make_tensor;
using detail::record;
using detail::require_defined;
using detail::wants_grad;

namespace {

using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapC = Eigen::Map<const RowMajor>;
using Map = Eigen::Map<RowMajor>;

// Geometry shared by 1D and 2D convolution: a 1D conv is a 2D conv with a
// single frequency row and kernel height 1.
struct ConvGeom {
  std::size_t batch, cin, cout;
  std::size_t f_in, t_in, kf, kt;
  std::size_t sf, st, df, dt;  // stride and dilation
  std::size_t pf, pt;          // leading padding
  std::size_t f_out, t_out;

  std::size_t col_rows() const { return cin * kf * kt; }
  std::size_t col_cols() const { return f_out * t_out; }
  std::size_t in_item() const { return cin * f_in * t_in; }
  std::size_t out_item() const { return cout * f_out * t_out; }
  bool pointwise() const { return kf == 1 && kt == 1 && sf == 1 && st == 1; }
};

// Output positions [lo, hi) whose input index o*stride + offset - pad falls
// inside [0, n).
struct ValidRange {
  std::size_t lo, hi;
};

ValidRange valid_range(std::size_t n_out, std::size_t stride, std::size_t offset, std::size_t pad,
                       std::size_t n_in) {
  std::size_t lo = 0;
  if (offset < pad) lo = (pad - offset + stride - 1) / stride;
  // Largest o with o*stride + offset - pad <= n_in - 1.
  std::size_t hi = 0;
  if (n_in + pad > offset) hi = std::min(n_out, (n_in - 1 + pad - offset) / stride + 1);
  if (hi < lo) hi = lo;
  return {std::min(lo, n_out), std::min(hi, n_out)};
}

void im2col(const ConvGeom& g, const double* x, double* col) {
  const std::size_t cols = g.col_cols();
  for (std::size_t c = 0; c < g.cin; ++c) {
    for (std::size_t a = 0; a < g.kf; ++a) {
      const ValidRange fr = valid_range(g.f_out, g.sf, a * g.df, g.pf, g.f_in);
      for (std::size_t b = 0; b < g.kt; ++b) {
        const ValidRange tr = valid_range(g.t_out, g.st, b * g.dt, g.pt, g.t_in);
        double* row = col + ((c * g.kf + a) * g.kt + b) * cols;
        std::fill_n(row, fr.lo * g.t_out, 0.0);
        for (std::size_t fo = fr.lo; fo < fr.hi; ++fo) {
          const std::size_t fi = fo * g.sf + a * g.df - g.pf;
          double* dst = row + fo * g.t_out;
          const double* src = x + (c * g.f_in + fi) * g.t_in;
          const std::size_t shift = b * g.dt;  // input index is to*st + shift - pt
          std::fill_n(dst, tr.lo, 0.0);
          if (g.st == 1) {
            if (tr.hi > tr.lo) std::copy_n(src + (tr.lo + shift - g.pt), tr.hi - tr.lo, dst + tr.lo);
          } else {
            for (std::size_t to = tr.lo; to < tr.hi; ++to) dst[to] = src[to * g.st + shift - g.pt];
          }
          std::fill(dst + tr.hi, dst + g.t_out, 0.0);
        }
        std::fill(row + fr.hi * g.t_out, row + cols, 0.0);
      }
    }
  }
}

void col2im(const ConvGeom& g, const double* col, double* dx) {
  const std::size_t cols = g.col_cols();
  for (std::size_t c = 0; c < g.cin; ++c) {
    for (std::size_t a = 0; a < g.kf; ++a) {
      const ValidRange fr = valid_range(g.f_out, g.sf, a * g.df, g.pf, g.f_in);
      for (std::size_t b = 0; b < g.kt; ++b) {
        const ValidRange tr = valid_range(g.t_out, g.st, b * g.dt, g.pt, g.t_in);
        const double* row = col + ((c * g.kf + a) * g.kt + b) * cols;
        for (std::size_t fo = fr.lo; fo < fr.hi; ++fo) {
          const std::size_t fi = fo * g.sf + a * g.df - g.pf;
          const double* src = row + fo * g.t_out;
          double* dst = dx + (c * g.f_in + fi) * g.t_in;
          const std::size_t shift = b * g.dt;
          for (std::size_t to = tr.lo; to < tr.hi; ++to) dst[to * g.st + shift - g.pt] += src[to];
        }
      }
    }
  }
}

using Vec = Eigen::Map<Eigen::VectorXd>;
using VecC = Eigen::Map<const Eigen::VectorXd>;

// Thin stride-1 convolutions skip the column matrix in the forward and
// input-gradient passes: the input is zero padded once and each output tile
// accumulates every tap in registers.
bool use_direct(const ConvGeom& g) {
  return !g.pointwise() && g.sf == 1 && g.st == 1 && g.cin * g.kf * g.kt <= 36;
}

struct PaddedInput {
  const double* data;
  std::size_t channels, rows, cols;  // padded F and T
};

constexpr std::size_t kCoBlock = 4;
constexpr std::size_t kTBlock = 16;

// y[co, fo, to] = sum over ci, a, b of w[co, ci, a, b] * xp[ci, fo + a*df, to + b*dt].
void tile_conv(const PaddedInput& xp, const double* w, std::size_t cout, std::size_t kf,
               std::size_t kt, std::size_t df, std::size_t dt, std::size_t f_out,
               std::size_t t_out, double* y) {
  const std::size_t cin = xp.channels;
  const std::size_t co_stride = cin * kf * kt;
  for (std::size_t co0 = 0; co0 < cout; co0 += kCoBlock) {
    const std::size_t nco = std::min(kCoBlock, cout - co0);
    for (std::size_t fo = 0; fo < f_out; ++fo) {
      for (std::size_t t0 = 0; t0 < t_out; t0 += kTBlock) {
        const std::size_t len = std::min(kTBlock, t_out - t0);
        double acc[kCoBlock][kTBlock] = {};
        if (nco == kCoBlock && len == kTBlock) {
          for (std::size_t ci = 0; ci < cin; ++ci) {
            for (std::size_t a = 0; a < kf; ++a) {
              const double* row = xp.data + (ci * xp.rows + fo + a * df) * xp.cols + t0;
              const double* wb = w + (co0 * cin + ci) * kf * kt + a * kt;
              for (std::size_t b = 0; b < kt; ++b) {
                const double* r = row + b * dt;
                const double w0 = wb[b], w1 = wb[b + co_stride], w2 = wb[b + 2 * co_stride],
                             w3 = wb[b + 3 * co_stride];
                for (std::size_t j = 0; j < kTBlock; ++j) {
                  acc[0][j] += w0 * r[j];
                  acc[1][j] += w1 * r[j];
                  acc[2][j] += w2 * r[j];
                  acc[3][j] += w3 * r[j];
                }
              }
            }
          }
        } else {
          for (std::size_t ci = 0; ci < cin; ++ci) {
            for (std::size_t a = 0; a < kf; ++a) {
              const double* row = xp.data + (ci * xp.rows + fo + a * df) * xp.cols + t0;
              for (std::size_t b = 0; b < kt; ++b) {
                const double* r = row + b * dt;
                for (std::size_t k = 0; k < nco; ++k) {
                  const double wv = w[((co0 + k) * cin + ci) * kf * kt + a * kt + b];
                  for (std::size_t j = 0; j < len; ++j) acc[k][j] += wv * r[j];
                }
              }
            }
          }
        }
        for (std::size_t k = 0; k < nco; ++k) {
          std::copy_n(acc[k], len, y + ((co0 + k) * f_out + fo) * t_out + t0);
        }
      }
    }
  }
}

// Copies src [c, f, t] into dst [c, f + 2pf, t + 2pt] with zero borders.
PaddedInput pad_into(double* dst, const double* src, std::size_t c, std::size_t f, std::size_t t,
                     std::size_t pf, std::size_t pt) {
  const std::size_t rows = f + 2 * pf, cols = t + 2 * pt;
  std::fill_n(dst, c * rows * cols, 0.0);
  for (std::size_t ci = 0; ci < c; ++ci) {
    for (std::size_t fi = 0; fi < f; ++fi) {
      std::copy_n(src + (ci * f + fi) * t, t, dst + (ci * rows + fi + pf) * cols + pt);
    }
  }
  return {dst, c, rows, cols};
}

double* scratch(int slot, std::size_t n);

void direct_forward(const ConvGeom& g, const double* x, const double* w, double* y) {
  double* buf = scratch(2, g.cin * (g.f_in + 2 * g.pf) * (g.t_in + 2 * g.pt));
  const PaddedInput xp = pad_into(buf, x, g.cin, g.f_in, g.t_in, g.pf, g.pt);
  tile_conv(xp, w, g.cout, g.kf, g.kt, g.df, g.dt, g.f_out, g.t_out, y);
}

// Weights for the input gradient of a "same" stride-1 convolution:
// w'[ci, co, a, b] = w[co, ci, kf-1-a, kt-1-b].
Buffer flipped_weights(const ConvGeom& g, const double* w) {
  Buffer out(g.cout * g.cin * g.kf * g.kt);
  for (std::size_t co = 0; co < g.cout; ++co) {
    for (std::size_t ci = 0; ci < g.cin; ++ci) {
      for (std::size_t a = 0; a < g.kf; ++a) {
        for (std::size_t b = 0; b < g.kt; ++b) {
          out[((ci * g.cout + co) * g.kf + (g.kf - 1 - a)) * g.kt + (g.kt - 1 - b)] =
              w[((co * g.cin + ci) * g.kf + a) * g.kt + b];
        }
      }
    }
  }
  return out;
}

// Accumulates dx for one batch item as the flipped-weight convolution of gy.
void direct_input_grad(const ConvGeom& g, const Buffer& wflip, const double* gy,
                       double* dx) {
  {
    double* buf = scratch(2, g.cout * (g.f_out + 2 * g.pf) * (g.t_out + 2 * g.pt));
    const PaddedInput gp = pad_into(buf, gy, g.cout, g.f_out, g.t_out, g.pf, g.pt);
    double* tmp = scratch(3, g.in_item());
    tile_conv(gp, wflip.data(), g.cin, g.kf, g.kt, g.df, g.dt, g.f_in, g.t_in, tmp);
    Vec(dx, static_cast<Eigen::Index>(g.in_item())) +=
        VecC(tmp, static_cast<Eigen::Index>(g.in_item()));
  }
}

// Column buffers are large and rebuilt on every call, so each thread keeps
// two grow-only scratch areas instead of allocating zeroed vectors.
double* scratch(int slot, std::size_t n) {
  thread_local Buffer buffers[4];
  Buffer& b = buffers[slot];
  if (b.size() < n) b.resize(n);
  return b.data();
}

Tensor conv_general(const Tensor& x, const Tensor& w, const Tensor& bias, const ConvGeom& g,
                    Shape out_shape) {
  const std::size_t rows = g.col_rows(), cols = g.col_cols();
  const double* px = x.data().data();
  const double* pw = w.data().data();
  Buffer out(g.batch * g.out_item());
  const bool direct = use_direct(g);
  double* col = g.pointwise() || direct ? nullptr : scratch(0, rows * cols);
  for (std::size_t n = 0; n < g.batch; ++n) {
    const double* xi = px + n * g.in_item();
    if (direct) {
      direct_forward(g, xi, pw, out.data() + n * g.out_item());
      if (bias.defined()) {
        Map y(out.data() + n * g.out_item(), g.cout, cols);
        const auto pb = bias.data();
        for (std::size_t c = 0; c < g.cout; ++c) y.row(static_cast<Eigen::Index>(c)).array() += pb[c];
      }
      continue;
    }
    const double* colp = xi;
    if (!g.pointwise()) {
      im2col(g, xi, col);
      colp = col;
    }
    Map y(out.data() + n * g.out_item(), g.cout, cols);
    y.noalias() = MapC(pw, g.cout, rows) * MapC(colp, rows, cols);
    if (bias.defined()) {
      const auto pb = bias.data();
      for (std::size_t c = 0; c < g.cout; ++c) y.row(static_cast<Eigen::Index>(c)).array() += pb[c];
    }
  }
  Tensor result = make_tensor(std::move(out_shape), std::move(out));
  if (wants_grad({&x, &w, &bias})) {
    ImplPtr ix = x.impl(), iw = w.impl();
    ImplPtr ib = bias.defined() ? bias.impl() : nullptr;
    std::vector<ImplPtr> inputs{ix, iw};
    if (ib) inputs.push_back(ib);
    record(inputs, result, [ix, iw, ib, g](std::span<const double> gout) {
      const std::size_t rows = g.col_rows(), cols = g.col_cols();
      auto dx = grad_of(ix);
      auto dw = grad_of(iw);
      std::span<double> db = ib ? grad_of(ib) : std::span<double>{};
      const bool direct = use_direct(g);
      double* col = g.pointwise() || dw.empty() ? nullptr : scratch(0, rows * cols);
      double* dcol = g.pointwise() || direct || dx.empty() ? nullptr : scratch(1, rows * cols);
      MapC wm(iw->data.data(), g.cout, rows);
      const Buffer wflip =
          direct && !dx.empty() ? flipped_weights(g, iw->data.data()) : Buffer{};
      for (std::size_t n = 0; n < g.batch; ++n) {
        MapC gy(gout.data() + n * g.out_item(), g.cout, cols);
        const double* xi = ix->data.data() + n * g.in_item();
        if (!db.empty()) {
          for (std::size_t c = 0; c < g.cout; ++c) db[c] += gy.row(static_cast<Eigen::Index>(c)).sum();
        }
        if (!dw.empty()) {
          const double* colp = xi;
          if (!g.pointwise()) {
            im2col(g, xi, col);
            colp = col;
          }
          Map(dw.data(), g.cout, rows).noalias() += gy * MapC(colp, rows, cols).transpose();
        }
        if (!dx.empty()) {
          double* dxi = dx.data() + n * g.in_item();
          if (direct) {
            direct_input_grad(g, wflip, gout.data() + n * g.out_item(), dxi);
          } else if (g.pointwise()) {
            Map(dxi, rows, cols).noalias() += wm.transpose() * gy;
          } else {
            Map(dcol, rows, cols).noalias() = wm.transpose() * gy;
            col2im(g, dcol, dxi);
          }
        }
      }
    });
  }
  return result;
}

void check_bias(const Tensor& bias, std::size_t cout, const char* op) {
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != cout)) {
    throw ShapeError(std::string(op) + ": bias shape " + shape_str(bias.shape()) +
                     " does not match " + std::to_string(cout) + " output channels");
  }
}

}  // namespace

Tensor conv1d(const Tensor& x, const Tensor& w, const Tensor& bias, std::size_t dilation) {
  require_defined(x, "conv1d");
  require_defined(w, "conv1d");
  if (w.rank() != 3) throw ShapeError("conv1d: weight must be [Cout, Cin, k], got " + shape_str(w.shape()));
  const std::size_t k = w.dim(2);
  if (k % 2 == 0) throw ConfigError("conv1d: kernel size must be odd, got " + std::to_string(k));
  if (dilation == 0) throw ConfigError("conv1d: dilation must be >= 1");
  const bool batched = x.rank() == 3;
  if (!batched && x.rank() != 2) throw ShapeError("conv1d: input must be [B, C, T] or [C, T]");
  ConvGeom g{};
  g.batch = batched ? x.dim(0) : 1;
  g.cin = x.dim(batched ? 1 : 0);
  g.t_in = x.dim(batched ? 2 : 1);
  g.cout = w.dim(0);
  if (w.dim(1) != g.cin) {
    throw ShapeError("conv1d: input has " + std::to_string(g.cin) + " channels, weight expects " +
                     std::to_string(w.dim(1)));
  }
  check_bias(bias, g.cout, "conv1d");
  g.f_in = 1;
  g.kf = 1;
  g.kt = k;
  g.sf = g.st = 1;
  g.df = 1;
  g.dt = dilation;
  g.pf = 0;
  g.pt = dilation * (k - 1) / 2;
  g.f_out = 1;
  g.t_out = g.t_in;
  Shape out = batched ? Shape{g.batch, g.cout, g.t_out} : Shape{g.cout, g.t_out};
  return conv_general(x, w, bias, g, std::move(out));
}

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, Stride2d stride) {
  require_defined(x, "conv2d");
  require_defined(w, "conv2d");
  if (w.rank() != 4) {
    throw ShapeError("conv2d: weight must be [Cout, Cin, kF, kT], got " + shape_str(w.shape()));
  }
  if (w.dim(2) % 2 == 0 || w.dim(3) % 2 == 0) {
    throw ConfigError("conv2d: kernel sides must be odd, got " + shape_str(w.shape()));
  }
  if (stride.freq == 0 || stride.time == 0) throw ConfigError("conv2d: stride must be >= 1");
  const bool batched = x.rank() == 4;
  if (!batched && x.rank() != 3) throw ShapeError("conv2d: input must be [B, C, F, T] or [C, F, T]");
  ConvGeom g{};
  const std::size_t o = batched ? 1 : 0;
  g.batch = batched ? x.dim(0) : 1;
  g.cin = x.dim(o);
  g.f_in = x.dim(o + 1);
  g.t_in = x.dim(o + 2);
  g.cout = w.dim(0);
  if (w.dim(1) != g.cin) {
    throw ShapeError("conv2d: input has " + std::to_string(g.cin) + " channels, weight expects " +
                     std::to_string(w.dim(1)));
  }
  check_bias(bias, g.cout, "conv2d");
  g.kf = w.dim(2);
  g.kt = w.dim(3);
  g.sf = stride.freq;
  g.st = stride.time;
  g.df = g.dt = 1;
  g.pf = (g.kf - 1) / 2;
  g.pt = (g.kt - 1) / 2;
  g.f_out = (g.f_in - 1) / g.sf + 1;
  g.t_out = (g.t_in - 1) / g.st + 1;
  Shape out = batched ? Shape{g.batch, g.cout, g.f_out, g.t_out} : Shape{g.cout, g.f_out, g.t_out};
  return conv_general(x, w, bias, g, std::move(out));
}

}  // namespace svlab
