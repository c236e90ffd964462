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

#include "svlab/evalmetrics.h"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "svlab/errors.h"
#include "svlab/jsonutil.h"

namespace svlab {

void DcfParams::validate() const {
  if (!(p_target > 0.0 && p_target < 1.0)) throw ConfigError("dcf: p_target must lie in (0, 1)");
  if (!(c_miss > 0.0) || !(c_fa > 0.0)) throw ConfigError("dcf: costs must be positive");
}

nlohmann::json DcfParams::to_json() const {
  return {{"p_target", p_target}, {"c_miss", c_miss}, {"c_fa", c_fa}};
}

DcfParams DcfParams::from_json(const nlohmann::json& j) {
  DcfParams p;
  JsonFields f(j, "dcf");
  f.read("p_target", p.p_target);
  f.read("c_miss", p.c_miss);
  f.read("c_fa", p.c_fa);
  f.finish();
  p.validate();
  return p;
}

std::size_t ScoredTrialSet::num_target() const {
  return static_cast<std::size_t>(std::count(target.begin(), target.end(), 1));
}

std::size_t ScoredTrialSet::num_nontarget() const { return target.size() - num_target(); }

std::vector<DetPoint> det_points(const ScoredTrialSet& s) {
  if (s.scores.size() != s.target.size()) throw DataError("det: scores and labels differ in length");
  const std::size_t nt = s.num_target(), nn = s.num_nontarget();
  if (nt == 0 || nn == 0) throw DataError("det: need at least one target and one non-target trial");
  for (double v : s.scores) {
    if (std::isnan(v)) throw DataError("det: score is NaN");
  }
  std::vector<std::size_t> order(s.scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return s.scores[a] < s.scores[b]; });

  std::vector<DetPoint> pts;
  pts.push_back({-std::numeric_limits<double>::infinity(), 0.0, 1.0});
  std::size_t miss = 0, rejected_non = 0;
  for (std::size_t i = 0; i < order.size();) {
    const double v = s.scores[order[i]];
    // All tied scores move to the rejected side together.
    for (; i < order.size() && s.scores[order[i]] == v; ++i) {
      if (s.target[order[i]]) ++miss;
      else ++rejected_non;
    }
    pts.push_back({v, static_cast<double>(miss) / static_cast<double>(nt),
                   static_cast<double>(nn - rejected_non) / static_cast<double>(nn)});
  }
  return pts;
}

double eer(const ScoredTrialSet& s) {
  const std::vector<DetPoint> pts = det_points(s);
  for (std::size_t i = 0; i < pts.size(); ++i) {
    const double d = pts[i].p_miss - pts[i].p_fa;
    if (d == 0.0) return pts[i].p_miss;
    if (d > 0.0) {
      const DetPoint& a = pts[i - 1];
      const DetPoint& b = pts[i];
      const double t = (a.p_fa - a.p_miss) / ((b.p_miss - a.p_miss) - (b.p_fa - a.p_fa));
      return a.p_miss + t * (b.p_miss - a.p_miss);
    }
  }
  return pts.back().p_miss;  // unreachable: the last point is (1, 0)
}

double min_dcf(const ScoredTrialSet& s, const DcfParams& p) {
  p.validate();
  const double norm = std::min(p.c_miss * p.p_target, p.c_fa * (1.0 - p.p_target));
  double best = std::numeric_limits<double>::infinity();
  for (const DetPoint& d : det_points(s)) {
    best = std::min(best, p.c_miss * p.p_target * d.p_miss + p.c_fa * (1.0 - p.p_target) * d.p_fa);
  }
  return best / norm;
}

nlohmann::json EvalReport::to_json() const {
  return {{"eer", eer},
          {"min_dcf", min_dcf},
          {"n_target", n_target},
          {"n_nontarget", n_nontarget},
          {"params", params.to_json()}};
}

EvalReport evaluate(const ScoredTrialSet& s, const DcfParams& p) {
  EvalReport r;
  r.eer = eer(s);
  r.min_dcf = min_dcf(s, p);
  r.n_target = s.num_target();
  r.n_nontarget = s.num_nontarget();
  r.params = p;
  return r;
}

}  // namespace svlab
