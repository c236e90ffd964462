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

#include "svlab/calibfuse.h"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <iostream>
#include <limits>
#include <random>

#include "svlab/errors.h"
#include "svlab/io.h"
#include "svlab/jsonutil.h"

namespace svlab {

namespace {

std::string trial_key(const std::string& model_id, const std::string& test_id) {
  return model_id + "\t" + test_id;
}

Eigen::VectorXd to_eigen(const Vector& v) {
  return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

// log(1 + exp(x)) without overflow.
double softplus(double x) { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

double qm_duration(double d_t, double d_min) {
  if (!(d_t > d_min)) {
    throw DomainError("qm_duration: test duration " + format_double(d_t) +
                      " s must exceed d_min = " + format_double(d_min) + " s");
  }
  return std::log(d_t - d_min);
}

double qm_enroll(std::size_t n_e) {
  if (n_e < 1) throw DataError("qm_enroll: trial has no enrollment utterances");
  return std::log(static_cast<double>(std::min(n_e, kEnrollCountCap)));
}

std::vector<QmRow> read_qms(const std::filesystem::path& path) {
  static const char* kFields[] = {"qm_dur", "qm_enroll", "qm_lang"};
  std::vector<QmRow> out;
  for (const TsvRow& row : read_tsv(path)) {
    const std::string where = path.string() + ":" + std::to_string(row.line);
    if (row.fields.size() != 5) {
      throw FormatError(where + ": expected model_id, test_id, qm_dur, qm_enroll, qm_lang");
    }
    QmRow r{row.fields[0], row.fields[1], {}};
    for (std::size_t k = 0; k < 3; ++k) {
      r.qm[k] = parse_double(row.fields[2 + k], where + ": " + kFields[k]);
    }
    out.push_back(std::move(r));
  }
  return out;
}

std::string format_qms(const std::vector<QmRow>& rows) {
  std::string out;
  for (const QmRow& r : rows) {
    out += join_tsv({r.model_id, r.test_id, format_double(r.qm[0]), format_double(r.qm[1]),
                     format_double(r.qm[2])});
  }
  return out;
}

std::vector<QualityVector> match_qms(const std::vector<ScoreRow>& scores,
                                     const std::vector<QmRow>& qms) {
  std::map<std::string, QualityVector> by_key;
  for (const QmRow& r : qms) by_key[trial_key(r.model_id, r.test_id)] = r.qm;
  std::vector<QualityVector> out;
  out.reserve(scores.size());
  for (const ScoreRow& s : scores) {
    auto it = by_key.find(trial_key(s.model_id, s.test_id));
    if (it == by_key.end()) {
      throw DataError("no quality measures for trial " + s.model_id + " " + s.test_id);
    }
    out.push_back(it->second);
  }
  return out;
}

GaussianBackend GaussianBackend::fit(const std::vector<Vector>& class_a,
                                     const std::vector<Vector>& class_b) {
  if (class_a.size() < 2 || class_b.size() < 2) {
    throw DataError("gaussian backend: need at least two samples per class, got " +
                    std::to_string(class_a.size()) + " and " + std::to_string(class_b.size()));
  }
  const std::size_t d = class_a.front().size();
  auto stats = [d](const std::vector<Vector>& xs, Eigen::VectorXd& mean, Eigen::MatrixXd& scatter) {
    mean = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(d));
    for (const Vector& x : xs) {
      if (x.size() != d) throw DataError("gaussian backend: inconsistent feature dimension");
      mean += to_eigen(x);
    }
    mean /= static_cast<double>(xs.size());
    scatter = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(d));
    for (const Vector& x : xs) {
      const Eigen::VectorXd c = to_eigen(x) - mean;
      scatter.selfadjointView<Eigen::Lower>().rankUpdate(c);
    }
    scatter.triangularView<Eigen::StrictlyUpper>() = scatter.transpose();
  };
  GaussianBackend gb;
  Eigen::MatrixXd sa, sb;
  stats(class_a, gb.mean_a_, sa);
  stats(class_b, gb.mean_b_, sb);
  // Per-class scatters are added last so that swapping the classes is exact.
  gb.cov_ = (sa + sb) / static_cast<double>(class_a.size() + class_b.size());
  const double lambda = 1e-6 * gb.cov_.trace() / static_cast<double>(d);
  gb.cov_.diagonal().array() += lambda;
  gb.prepare();
  return gb;
}

void GaussianBackend::prepare() {
  Eigen::LLT<Eigen::MatrixXd> llt(cov_);
  if (llt.info() != Eigen::Success) {
    throw NumericError("gaussian backend: covariance is singular after regularization");
  }
  w_ = llt.solve(mean_a_ - mean_b_);
  const double qa = mean_a_.dot(llt.solve(mean_a_));
  const double qb = mean_b_.dot(llt.solve(mean_b_));
  c_ = -0.5 * (qa - qb);
  if (!w_.allFinite() || !std::isfinite(c_)) {
    throw NumericError("gaussian backend: non-finite discriminant");
  }
}

double GaussianBackend::llr(const Vector& x) const {
  if (x.size() != dim()) {
    throw ShapeError("gaussian backend: feature dimension " + std::to_string(x.size()) +
                     ", model expects " + std::to_string(dim()));
  }
  return w_.dot(to_eigen(x)) + c_;
}

nlohmann::json GaussianBackend::to_json() const {
  auto vec = [](const Eigen::VectorXd& v) { return std::vector<double>(v.data(), v.data() + v.size()); };
  std::vector<double> cov(cov_.data(), cov_.data() + cov_.size());
  return {{"dim", dim()}, {"mean_a", vec(mean_a_)}, {"mean_b", vec(mean_b_)}, {"covariance", cov}};
}

GaussianBackend GaussianBackend::from_json(const nlohmann::json& j) {
  JsonFields f(j, "gaussian backend");
  std::size_t d = 0;
  std::vector<double> ma, mb, cov;
  f.read("dim", d);
  f.read("mean_a", ma);
  f.read("mean_b", mb);
  f.read("covariance", cov);
  f.finish();
  if (d == 0 || ma.size() != d || mb.size() != d || cov.size() != d * d) {
    throw FormatError("gaussian backend: inconsistent dimensions");
  }
  GaussianBackend gb;
  gb.mean_a_ = to_eigen(ma);
  gb.mean_b_ = to_eigen(mb);
  gb.cov_ = Eigen::Map<const Eigen::MatrixXd>(cov.data(), static_cast<Eigen::Index>(d),
                                              static_cast<Eigen::Index>(d));
  gb.prepare();
  return gb;
}

GaussianBackend fit_language_backend(const EmbeddingSet& pooled,
                                     const std::vector<audio::UtteranceInfo>& infos) {
  std::vector<Vector> a, b;
  for (const auto& info : infos) {
    if (!pooled.contains(info.id)) continue;
    (info.language == "A" ? a : b).push_back(pooled.get(info.id));
  }
  return GaussianBackend::fit(a, b);
}

std::vector<QmRow> compute_qms(const std::vector<Trial>& trials, const EnrollmentMap& enrollment,
                               const std::vector<audio::UtteranceInfo>& infos,
                               const EmbeddingSet& pooled, const GaussianBackend& backend,
                               double d_min) {
  std::map<std::string, double> duration;
  for (const auto& info : infos) duration[info.id] = info.duration_s;
  std::map<std::string, double> lang;  // cache per test utterance
  std::vector<QmRow> out;
  out.reserve(trials.size());
  for (const Trial& t : trials) {
    auto d = duration.find(t.test_id);
    if (d == duration.end()) throw DataError("qm: test utterance \"" + t.test_id + "\" not in manifest");
    auto e = enrollment.find(t.model_id);
    if (e == enrollment.end()) throw DataError("qm: no enrollment list for model \"" + t.model_id + "\"");
    auto l = lang.find(t.test_id);
    if (l == lang.end()) l = lang.emplace(t.test_id, backend.llr(pooled.get(t.test_id))).first;
    out.push_back({t.model_id, t.test_id,
                   {qm_duration(d->second, d_min), qm_enroll(e->second.size()), l->second}});
  }
  return out;
}

CalTrialSet gen_cal_trials(const std::vector<audio::UtteranceInfo>& infos, std::uint64_t seed,
                           std::size_t per_speaker) {
  struct Speaker {
    std::string gender;
    std::vector<std::string> lang_a;
    std::vector<std::string> lang_b;
  };
  std::map<std::string, Speaker> speakers;
  for (const auto& info : infos) {
    Speaker& s = speakers[info.speaker];
    if (!s.gender.empty() && s.gender != info.gender) {
      throw DataError("cal trials: speaker " + info.speaker + " has utterances of both genders");
    }
    s.gender = info.gender;
    if (info.language == "A") {
      s.lang_a.push_back(info.id);
    } else if (info.language == "B") {
      s.lang_b.push_back(info.id);
    } else {
      throw DataError("cal trials: utterance " + info.id + " has unknown language \"" +
                      info.language + "\"");
    }
  }
  std::map<std::string, std::size_t> per_gender;
  for (const auto& [id, s] : speakers) ++per_gender[s.gender];
  for (const auto& [gender, count] : per_gender) {
    if (count < 2) throw DataError("cal trials: need at least two speakers of gender " + gender);
  }

  CalTrialSet out;
  std::size_t si = 0;
  for (const auto& [spk, s] : speakers) {
    Rng rng(derive_seed(seed, "caltrials", si++));
    if (s.lang_a.empty()) throw DataError("cal trials: speaker " + spk + " has no language A utterances");
    auto pick = [&rng](const std::vector<std::string>& pool) {
      return pool[std::uniform_int_distribution<std::size_t>(0, pool.size() - 1)(rng)];
    };
    for (std::size_t j = 0; j < per_speaker; ++j) {
      const bool target = j % 2 == 0;
      const bool cross = (j / 2) % 2 == 1;
      std::vector<std::string> enroll_pool = s.lang_a;
      std::string test;
      if (target) {
        if (cross) {
          if (s.lang_b.empty()) {
            throw DataError("cal trials: speaker " + spk + " has no language B utterances");
          }
          test = pick(s.lang_b);
        } else {
          if (s.lang_a.size() < 2) {
            throw DataError("cal trials: speaker " + spk + " needs two language A utterances");
          }
          const std::size_t k = std::uniform_int_distribution<std::size_t>(0, s.lang_a.size() - 1)(rng);
          test = s.lang_a[k];
          enroll_pool.erase(enroll_pool.begin() + static_cast<std::ptrdiff_t>(k));
        }
      } else {
        std::vector<std::string> others;
        for (const auto& [other, o] : speakers) {
          if (other != spk && o.gender == s.gender && !(cross ? o.lang_b : o.lang_a).empty()) {
            others.push_back(other);
          }
        }
        if (others.empty()) {
          throw DataError("cal trials: no same-gender impostor with language " +
                          std::string(cross ? "B" : "A") + " utterances for " + spk);
        }
        const Speaker& o = speakers.at(pick(others));
        test = pick(cross ? o.lang_b : o.lang_a);
      }
      const std::size_t drawn = std::uniform_int_distribution<std::size_t>(1, kMaxCalEnroll)(rng);
      const std::size_t n_e = std::min(drawn, enroll_pool.size());
      std::shuffle(enroll_pool.begin(), enroll_pool.end(), rng);
      enroll_pool.resize(n_e);

      char model[64];
      std::snprintf(model, sizeof(model), "%s_cal%03zu", spk.c_str(), j);
      out.enrollment[model] = enroll_pool;
      out.trials.push_back({model, test, target ? TrialLabel::kTarget : TrialLabel::kNonTarget});
      out.cross_lingual.push_back(cross ? 1 : 0);
    }
  }
  return out;
}

double CalibrationModel::apply(double score, const QualityVector& qm) const {
  double z = w0 * score + b;
  for (std::size_t k = 0; k < w.size(); ++k) z += w[k] * qm[k];
  return z;
}

nlohmann::json CalibrationModel::to_json() const { return {{"w0", w0}, {"w", w}, {"b", b}}; }

CalibrationModel CalibrationModel::from_json(const nlohmann::json& j) {
  CalibrationModel m;
  JsonFields f(j, "calibration model");
  f.read("w0", m.w0);
  f.read("w", m.w);
  f.read("b", m.b);
  f.finish();
  if (!m.w.empty() && m.w.size() != std::tuple_size_v<QualityVector>) {
    throw FormatError("calibration model: w must hold 0 or 3 weights");
  }
  return m;
}

CalibrationModel calibrate(const std::vector<double>& scores, const std::vector<QualityVector>& qms,
                           const std::vector<std::uint8_t>& target,
                           const CalibrationOptions& options, std::vector<double>* w0_trace) {
  const std::size_t n = scores.size();
  if (target.size() != n || (options.use_qms && qms.size() != n)) {
    throw DataError("calibrate: scores, labels and quality measures differ in length");
  }
  std::size_t n_tgt = 0;
  for (auto t : target) n_tgt += t ? 1 : 0;
  if (n_tgt == 0 || n_tgt == n) throw DataError("calibrate: both target and non-target trials are needed");

  // Columns: score, QMs, bias.
  const Eigen::Index p = options.use_qms ? 5 : 2;
  Eigen::MatrixXd x(static_cast<Eigen::Index>(n), p);
  Eigen::VectorXd y(static_cast<Eigen::Index>(n));
  for (std::size_t i = 0; i < n; ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    if (!std::isfinite(scores[i])) throw DataError("calibrate: non-finite score at trial " + std::to_string(i));
    x(r, 0) = scores[i];
    if (options.use_qms) {
      for (Eigen::Index k = 0; k < 3; ++k) {
        x(r, 1 + k) = qms[i][static_cast<std::size_t>(k)];
        if (!std::isfinite(x(r, 1 + k))) {
          throw DataError("calibrate: non-finite quality measure at trial " + std::to_string(i));
        }
      }
    }
    x(r, p - 1) = 1.0;
    y(r) = target[i] ? 1.0 : 0.0;
  }
  const double inv_n = 1.0 / static_cast<double>(n);
  auto objective = [&](const Eigen::VectorXd& theta) {
    const Eigen::VectorXd z = x * theta;
    double sum = 0.0;
    for (Eigen::Index i = 0; i < z.size(); ++i) sum += softplus(y(i) > 0.5 ? -z(i) : z(i));
    return sum * inv_n + 0.5 * options.l2 * theta.squaredNorm();
  };

  Eigen::VectorXd theta = Eigen::VectorXd::Zero(p);
  double f = objective(theta);
  bool converged = false;
  for (std::size_t it = 0; it < options.max_iterations; ++it) {
    const Eigen::VectorXd z = x * theta;
    Eigen::VectorXd r(z.size()), h(z.size());
    for (Eigen::Index i = 0; i < z.size(); ++i) {
      const double s = sigmoid(z(i));
      r(i) = s - y(i);
      h(i) = s * (1.0 - s);
    }
    const Eigen::VectorXd grad = x.transpose() * r * inv_n + options.l2 * theta;
    if (grad.norm() < options.tolerance) {
      converged = true;
      break;
    }
    Eigen::MatrixXd hess = x.transpose() * h.asDiagonal() * x * inv_n;
    hess.diagonal().array() += options.l2;
    const Eigen::VectorXd step = -hess.ldlt().solve(grad);
    // Newton decrement: the predicted decrease is below what the objective
    // can resolve, so the gradient norm is at its rounding floor.
    const double decrement = -grad.dot(step);
    if (decrement <= 4.0 * std::numeric_limits<double>::epsilon() * std::max(f, 1e-300)) {
      converged = true;
      break;
    }
    // Backtracking on the Armijo condition.
    double t = 1.0;
    Eigen::VectorXd next;
    double f_next = 0.0;
    for (;;) {
      next = theta + t * step;
      f_next = objective(next);
      if (f_next <= f + 1e-4 * t * grad.dot(step)) break;
      t *= 0.5;
      if (t < 1e-20) break;
    }
    if (!(f_next <= f)) {
      // No representable descent left: the objective is flat at double
      // precision even though the gradient norm is above tolerance.
      throw NumericError("calibrate: line search stalled at gradient norm " + format_double(grad.norm()));
    }
    theta = next;
    f = f_next;
    if (w0_trace) w0_trace->push_back(theta(0));
  }
  if (!converged) {
    throw NumericError("calibrate: no convergence in " + std::to_string(options.max_iterations) +
                       " iterations");
  }
  CalibrationModel m;
  m.w0 = theta(0);
  for (Eigen::Index k = 1; k + 1 < p; ++k) m.w.push_back(theta(k));
  m.b = theta(p - 1);
  if (!(m.w0 > 0.0)) std::cerr << "WARNING (calibrate): fitted score weight " << m.w0 << " is not positive\n";
  return m;
}

double binary_cross_entropy(const std::vector<double>& llr, const std::vector<std::uint8_t>& target) {
  if (llr.size() != target.size() || llr.empty()) {
    throw DataError("binary_cross_entropy: need equal, non-zero numbers of scores and labels");
  }
  double sum = 0.0;
  for (std::size_t i = 0; i < llr.size(); ++i) sum += softplus(target[i] ? -llr[i] : llr[i]);
  return sum / static_cast<double>(llr.size());
}

std::vector<ScoreRow> fuse(const std::vector<std::vector<ScoreRow>>& systems,
                           const std::vector<double>& weights) {
  if (systems.empty()) throw UsageError("fuse: no score files");
  if (weights.size() != systems.size()) {
    throw UsageError("fuse: " + std::to_string(systems.size()) + " score files but " +
                     std::to_string(weights.size()) + " weights");
  }
  double total = 0.0;
  for (double w : weights) {
    if (!(w > 0.0) || !std::isfinite(w)) throw ConfigError("fuse: weights must be positive");
    total += w;
  }
  std::vector<std::map<std::string, double>> lookup(systems.size());
  for (std::size_t s = 1; s < systems.size(); ++s) {
    for (const ScoreRow& r : systems[s]) lookup[s][trial_key(r.model_id, r.test_id)] = r.score;
  }
  std::vector<ScoreRow> out;
  out.reserve(systems[0].size());
  for (const ScoreRow& r : systems[0]) {
    const std::string key = trial_key(r.model_id, r.test_id);
    double v = weights[0] / total * r.score;
    for (std::size_t s = 1; s < systems.size(); ++s) {
      auto it = lookup[s].find(key);
      if (it == lookup[s].end()) {
        throw DataError("fuse: trial " + r.model_id + " " + r.test_id + " missing from score file " +
                        std::to_string(s + 1));
      }
      v += weights[s] / total * it->second;
    }
    out.push_back({r.model_id, r.test_id, v});
  }
  for (std::size_t s = 1; s < systems.size(); ++s) {
    if (systems[s].size() != out.size()) {
      for (const ScoreRow& r : systems[s]) {
        bool found = false;
        for (const ScoreRow& o : systems[0]) {
          if (o.model_id == r.model_id && o.test_id == r.test_id) {
            found = true;
            break;
          }
        }
        if (!found) {
          throw DataError("fuse: trial " + r.model_id + " " + r.test_id + " of score file " +
                          std::to_string(s + 1) + " missing from score file 1");
        }
      }
      throw DataError("fuse: score file " + std::to_string(s + 1) + " repeats trials");
    }
  }
  return out;
}

}  // namespace svlab
