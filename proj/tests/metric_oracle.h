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

// Quadratic threshold sweeps used to check the sorted-scan metrics.

#ifndef SVLAB_TESTS_METRIC_ORACLE_H_
#define SVLAB_TESTS_METRIC_ORACLE_H_

#include <algorithm>
#include <limits>
#include <set>
#include <utility>
#include <vector>

#include "svlab/evalmetrics.h"

namespace svlab::testing {

// (p_miss, p_fa) for "reject score <= th", th over -inf and every score.
inline std::vector<std::pair<double, double>> brute_operating_points(const ScoredTrialSet& s) {
  std::set<double> thresholds(s.scores.begin(), s.scores.end());
  std::vector<double> th = {-std::numeric_limits<double>::infinity()};
  th.insert(th.end(), thresholds.begin(), thresholds.end());
  double nt = 0, nn = 0;
  for (auto t : s.target) (t ? nt : nn) += 1;
  std::vector<std::pair<double, double>> out;
  for (double h : th) {
    double miss = 0, fa = 0;
    for (std::size_t i = 0; i < s.scores.size(); ++i) {
      if (s.target[i] && s.scores[i] <= h) miss += 1;
      if (!s.target[i] && s.scores[i] > h) fa += 1;
    }
    out.push_back({miss / nt, fa / nn});
  }
  return out;
}

inline double brute_eer(const ScoredTrialSet& s) {
  const auto pts = brute_operating_points(s);
  for (std::size_t i = 1; i < pts.size(); ++i) {
    const auto [m0, f0] = pts[i - 1];
    const auto [m1, f1] = pts[i];
    if (m0 - f0 < 0 && m1 - f1 >= 0) {
      if (m1 == f1) return m1;
      // Crossing of the segment with the diagonal p_miss = p_fa.
      const double t = (f0 - m0) / ((m1 - m0) - (f1 - f0));
      return m0 + t * (m1 - m0);
    }
    if (m0 == f0) return m0;
  }
  return pts.front().first == pts.front().second ? pts.front().first : pts.back().first;
}

inline double brute_min_dcf(const ScoredTrialSet& s, const DcfParams& p) {
  double best = std::numeric_limits<double>::infinity();
  for (const auto& [m, f] : brute_operating_points(s)) {
    best = std::min(best, p.c_miss * p.p_target * m + p.c_fa * (1 - p.p_target) * f);
  }
  return best / std::min(p.c_miss * p.p_target, p.c_fa * (1 - p.p_target));
}

}  // namespace svlab::testing

#endif  // SVLAB_TESTS_METRIC_ORACLE_H_
