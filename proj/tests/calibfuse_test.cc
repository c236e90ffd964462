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

#include <gtest/gtest.h>

#include <unistd.h>

#include <cmath>
#include <filesystem>
#include <numbers>
#include <random>
#include <set>

#include "svlab/calibfuse.h"
#include "svlab/errors.h"
#include "svlab/io.h"
#include "svlab/jsonutil.h"

namespace svlab {
namespace {

namespace fs = std::filesystem;

TEST(QualityMeasureTest, Duration) {
  EXPECT_EQ(qm_duration(2.0, 1.0), 0.0);
  EXPECT_NEAR(qm_duration(1.0 + std::numbers::e, 1.0), 1.0, 1e-15);
  EXPECT_EQ(kMinTestDuration, 1.0);
  EXPECT_THROW(qm_duration(1.0, 1.0), DomainError);
  EXPECT_THROW(qm_duration(0.5), DomainError);
}

TEST(QualityMeasureTest, EnrollCountIsCappedAtThree) {
  EXPECT_EQ(qm_enroll(1), 0.0);
  EXPECT_NEAR(qm_enroll(5), 1.0986122886681098, 1e-15);
  EXPECT_EQ(qm_enroll(3), qm_enroll(300));
  EXPECT_THROW(qm_enroll(0), DataError);
}

TEST(QualityMeasureTest, SidecarRoundTrip) {
  const fs::path p = fs::temp_directory_path() / ("svlab_qm_" + std::to_string(::getpid()) + ".tsv");
  std::vector<QmRow> rows = {{"m", "t", {0.1, std::log(3.0), -7.25}}, {"m2", "t", {1e-300, 0.0, 3.0}}};
  atomic_write(p, format_qms(rows));
  auto back = read_qms(p);
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[0].qm, rows[0].qm);
  EXPECT_EQ(back[1].qm, rows[1].qm);
  std::vector<ScoreRow> scores = {{"m2", "t", 0.0}, {"m", "t", 0.0}};
  EXPECT_EQ(match_qms(scores, rows)[0], rows[1].qm);
  scores.push_back({"m3", "t", 0.0});
  EXPECT_THROW(match_qms(scores, rows), DataError);
  atomic_write(p, "m\tt\t0.1\tx\t0\n");
  EXPECT_THROW(read_qms(p), FormatError);
  fs::remove(p);
}

TEST(GaussianBackendTest, ScalarAlgebra) {
  // Means 1 and -1, within-class variance 1 (plus 1e-6 regularization).
  GaussianBackend gb = GaussianBackend::fit({{0.0}, {2.0}}, {{-2.0}, {0.0}});
  const double var = 1.0 + 1e-6;
  for (double x : {-3.0, -0.5, 0.0, 0.25, 4.0}) {
    EXPECT_NEAR(gb.llr({x}), 2.0 * x / var, 1e-12);
  }
}

TEST(GaussianBackendTest, EqualMeansGiveZero) {
  GaussianBackend gb = GaussianBackend::fit({{1.0, 2.0}, {3.0, 0.0}}, {{2.0, 0.0}, {2.0, 2.0}});
  EXPECT_EQ(gb.llr({5.0, -1.0}), 0.0);
}

// Log-density difference evaluated directly with a Gauss-Jordan inverse.
double oracle_llr(const std::vector<Vector>& a, const std::vector<Vector>& b, const Vector& x) {
  const std::size_t d = x.size();
  auto mean = [d](const std::vector<Vector>& xs) {
    Vector m(d, 0.0);
    for (const auto& v : xs) for (std::size_t i = 0; i < d; ++i) m[i] += v[i] / static_cast<double>(xs.size());
    return m;
  };
  const Vector ma = mean(a), mb = mean(b);
  std::vector<Vector> cov(d, Vector(d, 0.0));
  for (const auto* set : {&a, &b}) {
    const Vector& m = set == &a ? ma : mb;
    for (const auto& v : *set) {
      for (std::size_t i = 0; i < d; ++i) {
        for (std::size_t j = 0; j < d; ++j) {
          cov[i][j] += (v[i] - m[i]) * (v[j] - m[j]) / static_cast<double>(a.size() + b.size());
        }
      }
    }
  }
  double tr = 0.0;
  for (std::size_t i = 0; i < d; ++i) tr += cov[i][i];
  for (std::size_t i = 0; i < d; ++i) cov[i][i] += 1e-6 * tr / static_cast<double>(d);
  std::vector<Vector> inv(d, Vector(d, 0.0));
  for (std::size_t i = 0; i < d; ++i) inv[i][i] = 1.0;
  for (std::size_t c = 0; c < d; ++c) {
    std::size_t piv = c;
    for (std::size_t r = c + 1; r < d; ++r) if (std::abs(cov[r][c]) > std::abs(cov[piv][c])) piv = r;
    std::swap(cov[c], cov[piv]);
    std::swap(inv[c], inv[piv]);
    const double p = cov[c][c];
    for (std::size_t j = 0; j < d; ++j) {
      cov[c][j] /= p;
      inv[c][j] /= p;
    }
    for (std::size_t r = 0; r < d; ++r) {
      if (r == c) continue;
      const double f = cov[r][c];
      for (std::size_t j = 0; j < d; ++j) {
        cov[r][j] -= f * cov[c][j];
        inv[r][j] -= f * inv[c][j];
      }
    }
  }
  auto mahal = [&](const Vector& m) {
    double q = 0.0;
    for (std::size_t i = 0; i < d; ++i) for (std::size_t j = 0; j < d; ++j) q += (x[i] - m[i]) * inv[i][j] * (x[j] - m[j]);
    return q;
  };
  return -0.5 * mahal(ma) + 0.5 * mahal(mb);
}

class GaussianDataTest : public ::testing::Test {
 protected:
  std::vector<Vector> sample(std::size_t n, double shift, Rng& rng) {
    std::normal_distribution<double> g(0.0, 1.0);
    std::vector<Vector> out;
    for (std::size_t i = 0; i < n; ++i) {
      Vector v(6);
      for (std::size_t k = 0; k < 6; ++k) v[k] = g(rng) * (1.0 + 0.3 * static_cast<double>(k)) + (k < 2 ? shift : 0.0);
      v[5] += 0.5 * v[0];  // correlated dimension
      out.push_back(v);
    }
    return out;
  }
};

TEST_F(GaussianDataTest, MatchesLogDensityOracle) {
  Rng rng(7);
  auto a = sample(40, 1.0, rng), b = sample(30, -1.0, rng);
  GaussianBackend gb = GaussianBackend::fit(a, b);
  for (const auto& x : sample(20, 0.0, rng)) EXPECT_NEAR(gb.llr(x), oracle_llr(a, b, x), 1e-9);
}

TEST_F(GaussianDataTest, SwapNegatesAndAffine) {
  Rng rng(8);
  auto a = sample(25, 0.7, rng), b = sample(25, -0.7, rng);
  GaussianBackend ab = GaussianBackend::fit(a, b), ba = GaussianBackend::fit(b, a);
  const Vector x = sample(1, 0.0, rng)[0], y = sample(1, 0.0, rng)[0];
  EXPECT_EQ(ab.llr(x), -ba.llr(x));
  Vector mid(6);
  for (std::size_t k = 0; k < 6; ++k) mid[k] = 0.5 * (x[k] + y[k]);
  EXPECT_NEAR(ab.llr(mid), 0.5 * (ab.llr(x) + ab.llr(y)), 1e-12);
}

TEST_F(GaussianDataTest, HeldOutAccuracyAndJson) {
  Rng rng(9);
  GaussianBackend gb = GaussianBackend::fit(sample(200, 1.5, rng), sample(200, -1.5, rng));
  std::size_t correct = 0;
  auto ta = sample(500, 1.5, rng), tb = sample(500, -1.5, rng);
  for (const auto& x : ta) correct += gb.llr(x) > 0.0 ? 1 : 0;
  for (const auto& x : tb) correct += gb.llr(x) < 0.0 ? 1 : 0;
  EXPECT_GE(static_cast<double>(correct) / 1000.0, 0.95);
  GaussianBackend back = GaussianBackend::from_json(parse_json(canonical_json(gb.to_json()), "mem"));
  EXPECT_EQ(back.llr(ta[0]), gb.llr(ta[0]));
  EXPECT_THROW(GaussianBackend::fit({{1.0}}, {{0.0}, {2.0}}), DataError);
  EXPECT_THROW(GaussianBackend::fit({{1.0}, {1.0}}, {{1.0}, {1.0}}), NumericError);
}

std::vector<audio::UtteranceInfo> toy_infos(std::size_t speakers) {
  std::vector<audio::UtteranceInfo> out;
  for (std::size_t s = 0; s < speakers; ++s) {
    for (std::size_t u = 0; u < 12; ++u) {
      audio::UtteranceInfo i;
      i.speaker = "spk" + std::to_string(s);
      i.id = i.speaker + "_u" + std::to_string(u);
      i.language = u < 4 ? "B" : "A";
      i.gender = s % 2 ? "F" : "M";
      i.domain = "clean";
      i.duration_s = 2.0;
      out.push_back(i);
    }
  }
  return out;
}

TEST(CalTrialsTest, CountsBalanceAndConstraints) {
  const auto infos = toy_infos(10);
  std::map<std::string, const audio::UtteranceInfo*> by_id;
  for (const auto& i : infos) by_id[i.id] = &i;
  CalTrialSet set = gen_cal_trials(infos, 3);
  ASSERT_EQ(set.trials.size(), 1000u);
  std::map<std::string, int> per_speaker;
  long tgt = 0, cross = 0;
  std::set<std::size_t> n_e_seen;
  for (std::size_t k = 0; k < set.trials.size(); ++k) {
    const Trial& t = set.trials[k];
    const auto& enroll = set.enrollment.at(t.model_id);
    const auto* test = by_id.at(t.test_id);
    const auto* first = by_id.at(enroll.front());
    ++per_speaker[first->speaker];
    ASSERT_GE(enroll.size(), 1u);
    ASSERT_LE(enroll.size(), 8u);  // eight language A utterances per toy speaker
    n_e_seen.insert(enroll.size());
    for (const auto& e : enroll) {
      EXPECT_EQ(by_id.at(e)->speaker, first->speaker);
      EXPECT_EQ(by_id.at(e)->language, "A");
      EXPECT_NE(e, t.test_id);
    }
    EXPECT_EQ(test->gender, first->gender);
    EXPECT_EQ(t.label == TrialLabel::kTarget, test->speaker == first->speaker);
    EXPECT_EQ(set.cross_lingual[k] == 1, test->language == "B");
    tgt += t.label == TrialLabel::kTarget ? 1 : 0;
    cross += set.cross_lingual[k];
  }
  for (const auto& [spk, n] : per_speaker) EXPECT_EQ(n, 100) << spk;
  EXPECT_LE(std::abs(2 * tgt - 1000), 10);
  EXPECT_LE(std::abs(2 * cross - 1000), 10);
  EXPECT_EQ(n_e_seen.size(), 8u);

  CalTrialSet again = gen_cal_trials(infos, 3);
  EXPECT_EQ(format_trials(again.trials), format_trials(set.trials));
  EXPECT_EQ(format_enrollment(again.enrollment), format_enrollment(set.enrollment));
}

TEST(CalTrialsTest, NeedsTwoSpeakersPerGender) {
  EXPECT_THROW(gen_cal_trials(toy_infos(3), 1), DataError);
}

TEST(CalibrationTest, IdentityModel) {
  CalibrationModel m;
  m.w = {0.0, 0.0, 0.0};
  for (double s : {-2.5, 0.0, 3.75}) EXPECT_EQ(m.apply(s, {1.0, 2.0, 3.0}), s);
  CalibrationModel back = CalibrationModel::from_json(parse_json(canonical_json(m.to_json()), "mem"));
  EXPECT_EQ(back.w, m.w);
  EXPECT_THROW(CalibrationModel::from_json(parse_json("{\"w0\": 1, \"bias\": 0}", "mem")), ConfigError);
}

TEST(CalibrationTest, SymmetricToyCrossesZero) {
  std::vector<double> s = {1.0, -1.0, 1.0, -1.0};
  std::vector<QualityVector> q(4, QualityVector{0.0, 0.0, 0.0});
  std::vector<std::uint8_t> y = {1, 0, 1, 0};
  CalibrationModel m = calibrate(s, q, y);
  EXPECT_GT(m.w0, 0.0);
  EXPECT_NEAR(-m.b / m.w0, 0.0, 1e-12);
}

TEST(CalibrationTest, SeparatedScoresGrowTheWeightMonotonically) {
  std::vector<double> trace;
  CalibrationOptions opt;
  opt.use_qms = false;
  CalibrationModel m = calibrate({2.0, 1.0, -1.0, -2.0}, {}, {1, 1, 0, 0}, opt, &trace);
  ASSERT_GE(trace.size(), 3u);
  for (std::size_t i = 1; i < trace.size(); ++i) EXPECT_GE(trace[i], trace[i - 1]);
  // Only the L2 term stops the growth.
  EXPECT_GT(m.w0, 5.0);
  EXPECT_TRUE(m.w.empty());
}

// Objective and gradient written out independently of the fitter.
double objective(const std::vector<double>& th, const std::vector<double>& s,
                 const std::vector<QualityVector>& q, const std::vector<std::uint8_t>& y) {
  double f = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    const double z = th[0] * s[i] + th[1] * q[i][0] + th[2] * q[i][1] + th[3] * q[i][2] + th[4];
    const double p = 1.0 / (1.0 + std::exp(-z));
    f -= (y[i] ? std::log(p) : std::log(1.0 - p)) / static_cast<double>(s.size());
  }
  double sq = 0.0;
  for (double t : th) sq += t * t;
  return f + 0.5e-6 * sq;
}

TEST(CalibrationTest, StationaryPointOfTheObjective) {
  Rng rng(11);
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<double> s;
  std::vector<QualityVector> q;
  std::vector<std::uint8_t> y;
  for (int i = 0; i < 400; ++i) {
    const bool t = i % 2 == 0;
    QualityVector v{g(rng), std::log(1.0 + i % 3), g(rng)};
    s.push_back((t ? 1.0 : -1.0) * (0.5 + 0.3 * v[0]) + g(rng));
    q.push_back(v);
    y.push_back(t ? 1 : 0);
  }
  CalibrationModel m = calibrate(s, q, y);
  std::vector<double> th = {m.w0, m.w[0], m.w[1], m.w[2], m.b};
  for (std::size_t k = 0; k < th.size(); ++k) {
    std::vector<double> up = th, dn = th;
    up[k] += 1e-5;
    dn[k] -= 1e-5;
    EXPECT_NEAR((objective(up, s, q, y) - objective(dn, s, q, y)) / 2e-5, 0.0, 1e-7) << k;
  }
  // Nested models: the QM fit cannot be worse on its own training data.
  CalibrationOptions so;
  so.use_qms = false;
  CalibrationModel m0 = calibrate(s, q, y, so);
  std::vector<double> l, l0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    l.push_back(m.apply(s[i], q[i]));
    l0.push_back(m0.apply(s[i], q[i]));
  }
  EXPECT_LE(binary_cross_entropy(l, y), binary_cross_entropy(l0, y) + 1e-12);
  EXPECT_LT(binary_cross_entropy(l0, y), binary_cross_entropy(s, y));
  EXPECT_THROW(calibrate({1.0, 2.0}, {}, {1, 1}, so), DataError);
}

TEST(CalibrationTest, CrossEntropyOfZeroIsLogTwo) {
  EXPECT_NEAR(binary_cross_entropy({0.0, 0.0}, {1, 0}), std::log(2.0), 1e-15);
  EXPECT_NEAR(binary_cross_entropy({800.0}, {1}), 0.0, 1e-300);
  EXPECT_NEAR(binary_cross_entropy({800.0}, {0}), 800.0, 1e-12);
}

TEST(FuseTest, WeightedAverage) {
  std::vector<std::vector<ScoreRow>> sys;
  for (double v : {1.0, 2.0, 3.0, 4.0}) sys.push_back({{"m", "t", v}, {"m", "u", 0.5}});
  auto fused = fuse(sys, {1.0, 2.0, 2.0, 0.5});
  EXPECT_NEAR(fused[0].score, 13.0 / 5.5, 1e-15);
  EXPECT_NEAR(fused[1].score, 0.5, 1e-15);
  auto scaled = fuse(sys, {10.0, 20.0, 20.0, 5.0});
  EXPECT_NEAR(scaled[0].score, fused[0].score, 1e-15);
  EXPECT_EQ(fuse({sys[2]}, {7.0})[0].score, 3.0);
}

TEST(FuseTest, KeysAreMatchedNotPositions) {
  std::vector<ScoreRow> a = {{"m", "t", 1.0}, {"m", "u", 2.0}};
  std::vector<ScoreRow> b = {{"m", "u", 4.0}, {"m", "t", 3.0}};
  auto f = fuse({a, b}, {1.0, 1.0});
  EXPECT_EQ(f[0].score, 2.0);
  EXPECT_EQ(f[1].score, 3.0);
  b[0].test_id = "x";
  try {
    fuse({a, b}, {1.0, 1.0});
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("m u"), std::string::npos) << e.what();
  }
  EXPECT_THROW(fuse({a, a}, {1.0, 0.0}), ConfigError);
  EXPECT_THROW(fuse({a, a}, {1.0}), UsageError);
}

}  // namespace
}  // namespace svlab
