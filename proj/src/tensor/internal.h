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

#ifndef SVLAB_SRC_TENSOR_INTERNAL_H_
#define SVLAB_SRC_TENSOR_INTERNAL_H_

#include <memory>
#include <span>
#include <vector>

#include "svlab/tensor.h"

namespace svlab::detail {

using ImplPtr = std::shared_ptr<TensorImpl>;

// True when an op over these inputs must be recorded.
bool wants_grad(std::initializer_list<const Tensor*> inputs);

// Gradient buffer of an input, allocated on first touch; empty span when the
// input does not require a gradient.
std::span<double> grad_of(const ImplPtr& impl);

Tensor make_tensor(Shape shape, Buffer values);

void record(std::vector<ImplPtr> inputs, const Tensor& output,
            Tape::BackwardFn fn);

void require_defined(const Tensor& t, const char* op);

// Splits a shape around one axis into (outer, axis length, inner).
struct AxisSplit {
  std::size_t outer = 1;
  std::size_t n = 1;
  std::size_t inner = 1;
};
AxisSplit split_axis(const Shape& shape, std::size_t axis, const char* op);

// Visits every flat index of `out` together with the matching flat offsets
// into two operands whose strides are 0 along broadcast axes.
template <typename F>
void broadcast_for_each(const Shape& out, const std::vector<std::size_t>& sa,
                        const std::vector<std::size_t>& sb, F&& f) {
  const std::size_t rank = out.size();
  const std::size_t total = shape_numel(out);
  if (total == 0) return;
  if (rank == 0) {
    f(std::size_t{0}, std::size_t{0}, std::size_t{0});
    return;
  }
  const std::size_t inner = out[rank - 1];
  const std::size_t ia_step = sa[rank - 1];
  const std::size_t ib_step = sb[rank - 1];
  std::vector<std::size_t> idx(rank, 0);
  std::size_t ia = 0;
  std::size_t ib = 0;
  for (std::size_t k = 0; k < total; k += inner) {
    std::size_t a = ia;
    std::size_t b = ib;
    for (std::size_t j = 0; j < inner; ++j) {
      f(k + j, a, b);
      a += ia_step;
      b += ib_step;
    }
    for (std::size_t d = rank - 1; d-- > 0;) {
      ++idx[d];
      ia += sa[d];
      ib += sb[d];
      if (idx[d] < out[d]) break;
      ia -= sa[d] * idx[d];
      ib -= sb[d] * idx[d];
      idx[d] = 0;
    }
  }
}

// Row-major strides of `shape` aligned to `out_rank` with 0 on axes that
// broadcast (size 1 in shape, or missing leading axes).
std::vector<std::size_t> broadcast_strides(const Shape& shape,
                                           const Shape& out);

}  // namespace svlab::detail

#endif  // SVLAB_SRC_TENSOR_INTERNAL_H_
