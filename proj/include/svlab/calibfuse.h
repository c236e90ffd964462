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

// Quality measures, the Gaussian language backend, calibration trial
// generation, quality-aware logistic calibration and weighted score fusion.

#ifndef SVLAB_CALIBFUSE_H_
#define SVLAB_CALIBFUSE_H_

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "json.hpp"
#include "svlab/audiofeat.h"
#include "svlab/embedscore.h"

namespace svlab {

constexpr double kMinTestDuration = 1.0;  // seconds
constexpr std::size_t kEnrollCountCap = 3;

// log(d_t - d_min); DomainError unless d_t > d_min.
double qm_duration(double d_t, double d_min = kMinTestDuration);
// log(min(n_e, 3)); DataError when n_e is zero.
double qm_enroll(std::size_t n_e);

// duration, enrollment count, language llr of the test utterance
using QualityVector = std::array<double, 3>;

struct QmRow {
  std::string model_id;
  std::string test_id;
  QualityVector qm{};
};

// model_id, test_id, qm_dur, qm_enroll, qm_lang
std::vector<QmRow> read_qms(const std::filesystem::path& path);
std::string format_qms(const std::vector<QmRow>& rows);
// QM vector of each score row, matched on (model_id, test_id).
std::vector<QualityVector> match_qms(const std::vector<ScoreRow>& scores,
                                     const std::vector<QmRow>& qms);

// Two-class Gaussian classifier with shared full covariance. llr > 0 favours
// class A.
class GaussianBackend {
 public:
  GaussianBackend() = default;
  // Needs two samples per class. The covariance is the pooled within-class
  // estimate plus 1e-6 * trace / dim on the diagonal.
  static GaussianBackend fit(const std::vector<Vector>& class_a, const std::vector<Vector>& class_b);

  std::size_t dim() const { return static_cast<std::size_t>(mean_a_.size()); }
  double llr(const Vector& x) const;

  nlohmann::json to_json() const;
  static GaussianBackend from_json(const nlohmann::json& j);

 private:
  void prepare();

  Eigen::VectorXd mean_a_;
  Eigen::VectorXd mean_b_;
  Eigen::MatrixXd cov_;
  Eigen::VectorXd w_;  // cov^-1 (mean_a - mean_b)
  double c_ = 0.0;
};

// Fits language A against language B on pooled-layer vectors.
GaussianBackend fit_language_backend(const EmbeddingSet& pooled,
                                     const std::vector<audio::UtteranceInfo>& infos);

std::vector<QmRow> compute_qms(const std::vector<Trial>& trials, const EnrollmentMap& enrollment,
                               const std::vector<audio::UtteranceInfo>& infos,
                               const EmbeddingSet& pooled, const GaussianBackend& backend,
                               double d_min = kMinTestDuration);

struct CalTrialSet {
  std::vector<Trial> trials;
  EnrollmentMap enrollment;
  std::vector<std::uint8_t> cross_lingual;
};

constexpr std::size_t kCalTrialsPerSpeaker = 100;
constexpr std::size_t kMaxCalEnroll = 10;

// Per speaker: 100 within-gender trials enrolled on 1 to 10 language A
// utterances of that speaker. Trial j is a target trial when j is even and
// cross-lingual when (j / 2) is odd, so both splits are exactly balanced.
CalTrialSet gen_cal_trials(const std::vector<audio::UtteranceInfo>& infos, std::uint64_t seed,
                           std::size_t per_speaker = kCalTrialsPerSpeaker);

struct CalibrationModel {
  double w0 = 1.0;
  std::vector<double> w;  // QM weights; empty for score-only calibration
  double b = 0.0;

  double apply(double score, const QualityVector& qm) const;
  nlohmann::json to_json() const;
  static CalibrationModel from_json(const nlohmann::json& j);
};

struct CalibrationOptions {
  bool use_qms = true;
  double l2 = 1e-6;
  double tolerance = 1e-8;  // on the gradient norm
  std::size_t max_iterations = 100000;
};

// Minimizes the mean binary cross-entropy plus l2/2 |theta|^2 over all
// weights and the bias by damped Newton steps. Stops when the gradient norm
// falls below tolerance, or earlier when the Newton decrement shows the
// objective is already minimal to double precision. w0_trace, when given,
// receives w0 after every iteration.
CalibrationModel calibrate(const std::vector<double>& scores, const std::vector<QualityVector>& qms,
                           const std::vector<std::uint8_t>& target,
                           const CalibrationOptions& options = CalibrationOptions(),
                           std::vector<double>* w0_trace = nullptr);

// Mean binary cross-entropy in nats of llrs read as logits.
double binary_cross_entropy(const std::vector<double>& llr, const std::vector<std::uint8_t>& target);

// Per trial sum_i w_i s_i / sum_i w_i. Trial order follows the first list.
std::vector<ScoreRow> fuse(const std::vector<std::vector<ScoreRow>>& systems,
                           const std::vector<double>& weights);

}  // namespace svlab

#endif  // SVLAB_CALIBFUSE_H_
