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

// Detection error trade-off, equal error rate and normalized minimum
// detection cost.

#ifndef SVLAB_EVALMETRICS_H_
#define SVLAB_EVALMETRICS_H_

#include <cstdint>
#include <vector>

#include "json.hpp"

namespace svlab {

struct DcfParams {
  double p_target = 0.01;
  double c_miss = 10.0;
  double c_fa = 1.0;

  void validate() const;
  nlohmann::json to_json() const;
  static DcfParams from_json(const nlohmann::json& j);
};

struct ScoredTrialSet {
  std::vector<double> scores;
  std::vector<std::uint8_t> target;  // 1 = target, 0 = non-target

  void add(double score, bool is_target) {
    scores.push_back(score);
    target.push_back(is_target ? 1 : 0);
  }
  std::size_t num_target() const;
  std::size_t num_nontarget() const;
};

// Trials scoring <= threshold are rejected. The first point rejects nothing
// (threshold -inf), then one point per distinct score in increasing order.
struct DetPoint {
  double threshold;
  double p_miss;
  double p_fa;
};

std::vector<DetPoint> det_points(const ScoredTrialSet& s);
// Linear interpolation where p_miss - p_fa changes sign.
double eer(const ScoredTrialSet& s);
double min_dcf(const ScoredTrialSet& s, const DcfParams& p = DcfParams());

struct EvalReport {
  double eer = 0.0;
  double min_dcf = 0.0;
  std::size_t n_target = 0;
  std::size_t n_nontarget = 0;
  DcfParams params;

  nlohmann::json to_json() const;
};

EvalReport evaluate(const ScoredTrialSet& s, const DcfParams& p = DcfParams());

}  // namespace svlab

#endif  // SVLAB_EVALMETRICS_H_
