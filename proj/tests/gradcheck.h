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

// Test-only central finite-difference oracle. It never touches the tape:
// the loss is re-evaluated with perturbed leaf values and compared against
// the gradients the tape produced.

#ifndef SVLAB_TESTS_GRADCHECK_H_
#define SVLAB_TESTS_GRADCHECK_H_

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "svlab/tensor.h"

namespace svlab::testing {

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0,
                            double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t(std::move(shape));
  for (double& v : t.mutable_data()) v = u(rng);
  return t;
}

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  // Entries whose two perturbed passes fell on different linear pieces of a
  // relu or clamp; a central difference across a kink is meaningless there.
  std::size_t skipped = 0;
};

// Relative error |a - n| / max(|a|, |n|, floor). The floor keeps entries
// whose true gradient is ~0 from dominating through rounding noise.
inline double rel_error(double analytic, double numeric, double floor = 1e-3) {
  return std::abs(analytic - numeric) /
         std::max({std::abs(analytic), std::abs(numeric), floor});
}

// Checks d loss / d leaf for every leaf. When max_per_leaf > 0 only that
// many randomly chosen entries per leaf are checked, drawing replacements
// for entries that straddle a kink.
inline GradCheckReport grad_check(const std::function<Tensor()>& loss_fn,
                                  std::vector<Tensor> leaves, double eps = 1e-5,
                                  std::size_t max_per_leaf = 0, std::uint64_t seed = 7,
                                  double floor = 1e-3) {
  for (Tensor& leaf : leaves) {
    leaf.set_requires_grad(true);
    leaf.zero_grad();
  }
  std::vector<bool> sides;
  {
    Tape tape;
    KinkRecorder rec;
    Tensor loss = loss_fn();
    tape.backward(loss);
    sides = rec.sides();
  }
  std::vector<std::vector<double>> analytic;
  for (Tensor& leaf : leaves) {
    analytic.emplace_back(leaf.grad().begin(), leaf.grad().end());
  }
  GradCheckReport report;
  std::mt19937_64 rng(seed);
  auto eval = [&](std::vector<bool>* pattern) {
    KinkRecorder rec;
    const double v = loss_fn().item();
    *pattern = rec.sides();
    return v;
  };
  for (std::size_t l = 0; l < leaves.size(); ++l) {
    auto values = leaves[l].mutable_data();
    std::vector<std::size_t> idx(values.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    if (max_per_leaf > 0) std::shuffle(idx.begin(), idx.end(), rng);
    std::size_t done = 0;
    for (std::size_t i : idx) {
      if (max_per_leaf > 0 && done == max_per_leaf) break;
      const double saved = values[i];
      std::vector<bool> up_sides, down_sides;
      values[i] = saved + eps;
      const double up = eval(&up_sides);
      values[i] = saved - eps;
      const double down = eval(&down_sides);
      values[i] = saved;
      if (up_sides != sides || down_sides != sides) {
        ++report.skipped;
        continue;
      }
      const double numeric = (up - down) / (2.0 * eps);
      report.max_rel_error =
          std::max(report.max_rel_error, rel_error(analytic[l][i], numeric, floor));
      ++report.checked;
      ++done;
    }
  }
  return report;
}

}  // namespace svlab::testing

#endif  // SVLAB_TESTS_GRADCHECK_H_
