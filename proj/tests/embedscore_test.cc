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
#include <random>

#include "svlab/embedscore.h"
#include "svlab/errors.h"

namespace svlab {
namespace {

namespace fs = std::filesystem;

fs::path temp_path(const std::string& name) {
  fs::path dir = fs::temp_directory_path() / ("svlab_embedscore_" + std::to_string(::getpid()));
  fs::create_directories(dir);
  return dir / name;
}

Vector random_vector(std::size_t d, Rng& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  Vector v(d);
  for (double& x : v) x = g(rng);
  return v;
}

audio::FeatureMatrix random_features(const std::string& id, std::size_t frames, Rng& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  audio::FeatureMatrix f;
  f.info.id = id;
  f.num_bins = 80;
  f.num_frames = frames;
  f.values.resize(80 * frames);
  for (double& v : f.values) v = g(rng);
  return f;
}

TEST(EnrollTest, SingleEmbeddingIsItsNormalizedSelf) {
  Vector e = enroll({{3.0, 4.0}});
  EXPECT_DOUBLE_EQ(e[0], 0.6);
  EXPECT_DOUBLE_EQ(e[1], 0.8);
}

TEST(EnrollTest, OppositeVectorsGiveADegenerateModel) {
  Vector e = enroll({{1.0, 0.0}, {-2.0, 0.0}});
  EXPECT_EQ(e[0], 0.0);
  EXPECT_THROW(cosine(e, {1.0, 1.0}), DomainError);
}

TEST(EnrollTest, HandArithmetic) {
  const double r = 1.0 / std::sqrt(2.0);
  Vector e = enroll({{1.0, 0.0, 0.0}, {0.0, 2.0, 0.0}, {0.0, 5.0, 5.0}});
  EXPECT_NEAR(e[0], 1.0 / 3.0, 1e-15);
  EXPECT_NEAR(e[1], (1.0 + r) / 3.0, 1e-15);
  EXPECT_NEAR(e[2], r / 3.0, 1e-15);
  EXPECT_THROW(enroll({}), DataError);
}

TEST(EnrollTest, DuplicationIsIdempotent) {
  Rng rng(1);
  Vector v = random_vector(8, rng);
  Vector one = enroll({v});
  Vector many = enroll({v, v, v, v});
  for (std::size_t i = 0; i < 8; ++i) EXPECT_NEAR(one[i], many[i], 1e-15);
}

TEST(CosineTest, HandValues) {
  EXPECT_NEAR(cosine({1.0, 2.0}, {1.0, 2.0}), 1.0, 1e-15);
  EXPECT_EQ(cosine({1.0, 0.0}, {0.0, 3.0}), 0.0);
  EXPECT_NEAR(cosine({1.0, 0.0}, {1.0 / std::sqrt(2.0), 1.0 / std::sqrt(2.0)}), std::sqrt(2.0) / 2.0,
              1e-15);
}

TEST(SnormTest, HandArithmetic) {
  // Cohort scores {0, 1} on both sides: mu 0.5, sd 0.5.
  Cohort c;
  c.entries = {{0.0, 1.0}, {1.0, 0.0}};
  c.top_k = 2;
  const Vector e = {1.0, 0.0}, t = {1.0, 0.0};
  ScoreStats s = c.stats(e);
  EXPECT_DOUBLE_EQ(s.mean, 0.5);
  EXPECT_DOUBLE_EQ(s.std, 0.5);
  EXPECT_NEAR(snorm(0.5, e, t, c), 0.0, 1e-15);
  EXPECT_NEAR(snorm(1.0, e, t, c), 1.0, 1e-15);
}

TEST(SnormTest, SymmetricAndMonotone) {
  Rng rng(2);
  Cohort c;
  for (int i = 0; i < 30; ++i) c.entries.push_back(random_vector(6, rng));
  c.top_k = 10;
  Vector e = random_vector(6, rng), t = random_vector(6, rng);
  EXPECT_EQ(snorm(0.3, e, t, c), snorm(0.3, t, e, c));
  double prev = -1e300;
  for (double raw = -1.0; raw <= 1.0; raw += 0.1) {
    const double v = snorm(raw, e, t, c);
    EXPECT_GT(v, prev);
    prev = v;
  }
}

TEST(SnormTest, TopKSelectsTheLargestScores) {
  Rng rng(3);
  Cohort c;
  for (int i = 0; i < 12; ++i) c.entries.push_back(random_vector(4, rng));
  Vector v = random_vector(4, rng);
  std::vector<double> s;
  for (const auto& x : c.entries) s.push_back(cosine(v, x));
  std::sort(s.rbegin(), s.rend());
  c.top_k = 5;
  double mu = 0.0, var = 0.0;
  for (int i = 0; i < 5; ++i) mu += s[i] / 5.0;
  for (int i = 0; i < 5; ++i) var += (s[i] - mu) * (s[i] - mu) / 5.0;
  ScoreStats st = c.stats(v);
  EXPECT_NEAR(st.mean, mu, 1e-15);
  EXPECT_NEAR(st.std, std::sqrt(var), 1e-15);
  // top_k beyond the cohort size is the plain s-norm.
  c.top_k = 2000;
  Cohort full = c;
  full.top_k = 12;
  EXPECT_EQ(c.stats(v).mean, full.stats(v).mean);
}

TEST(SnormTest, DegenerateCohortIsANumericError) {
  Cohort c;
  c.entries = {{1.0, 0.0}, {1.0, 0.0}};
  c.top_k = 2;
  EXPECT_THROW(snorm(0.1, {1.0, 0.0}, {0.0, 1.0}, c), NumericError);
}

TEST(CohortTest, PerSpeakerMeanOfNormalizedEmbeddings) {
  EmbeddingSet train(2);
  train.add("a1", {2.0, 0.0});
  train.add("a2", {0.0, 3.0});
  train.add("b1", {0.0, -1.0});
  Cohort c = Cohort::build(train, {{"a1", "A"}, {"a2", "A"}, {"b1", "B"}}, 2000);
  ASSERT_EQ(c.entries.size(), 2u);
  EXPECT_EQ(c.entries[0], (Vector{0.5, 0.5}));
  EXPECT_EQ(c.entries[1], (Vector{0.0, -1.0}));
  EXPECT_EQ(c.effective_top_k(), 2u);
}

class ExtractTest : public ::testing::Test {
 protected:
  ExtractTest() {
    Rng rng(4);
    models::ArchitectureConfig cfg;
    cfg.kind = models::ArchKind::kEcapaTdnn;
    cfg.tdnn_channels = 16;
    cfg.mfa_channels = 24;
    cfg.attention_channels = 8;
    cfg.embedding_dim = 10;
    model = std::make_unique<models::EmbeddingExtractor>(cfg, rng);
    for (int i = 0; i < 7; ++i) {
      feats.push_back(random_features("u" + std::to_string(i), i < 5 ? 40 : 55, rng));
    }
  }
  std::unique_ptr<models::EmbeddingExtractor> model;
  std::vector<audio::FeatureMatrix> feats;
};

TEST_F(ExtractTest, BatchOfOneMatchesBatched) {
  Extracted batched = extract(*model, feats, 16);
  Extracted single = extract(*model, feats, 1);
  ASSERT_EQ(batched.embeddings.size(), feats.size());
  for (std::size_t i = 0; i < feats.size(); ++i) {
    EXPECT_EQ(batched.embeddings.ids()[i], feats[i].info.id);
    for (std::size_t k = 0; k < 10; ++k) {
      EXPECT_NEAR(batched.embeddings.at(i)[k], single.embeddings.at(i)[k], 1e-12);
    }
    EXPECT_EQ(batched.pooled.at(i).size(), model->pooled_dim());
  }
  Extracted again = extract(*model, feats, 16);
  for (std::size_t i = 0; i < feats.size(); ++i) EXPECT_EQ(again.embeddings.at(i), batched.embeddings.at(i));
}

TEST_F(ExtractTest, MissingIdsAreListed) {
  try {
    extract(*model, feats, {"u1", "ghost", "u3"});
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("ghost"), std::string::npos);
  }
  EXPECT_EQ(extract(*model, feats, {"u6", "u0"}).embeddings.ids(),
            (std::vector<std::string>{"u6", "u0"}));
}

TEST(EmbeddingFileTest, RoundTripBitExact) {
  Rng rng(5);
  EmbeddingSet s(5);
  for (int i = 0; i < 4; ++i) s.add("id" + std::to_string(i), random_vector(5, rng));
  const fs::path p = temp_path("e.sveb");
  save_embeddings(p, s);
  EmbeddingSet back = load_embeddings(p);
  ASSERT_EQ(back.ids(), s.ids());
  for (std::size_t i = 0; i < s.size(); ++i) EXPECT_EQ(back.at(i), s.at(i));
  EXPECT_EQ(serialize_embeddings(back), serialize_embeddings(s));
  std::string bytes = serialize_embeddings(s);
  EXPECT_THROW(parse_embeddings(bytes.substr(0, bytes.size() - 1), "mem"), FormatError);
  EXPECT_THROW(parse_embeddings("SVEX" + bytes.substr(4), "mem"), FormatError);
}

TEST(TableTest, TrialsScoresAndEnrollment) {
  std::vector<Trial> trials = {{"m1", "t1", TrialLabel::kTarget}, {"m1", "t2", TrialLabel::kNonTarget}};
  const fs::path tp = temp_path("trials.tsv");
  atomic_write(tp, format_trials(trials));
  auto back = read_trials(tp);
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[1].label, TrialLabel::kNonTarget);

  EmbeddingSet emb(2);
  emb.add("e1", {1.0, 0.0});
  emb.add("t1", {1.0, 1.0});
  emb.add("t2", {0.0, 1.0});
  auto models = build_models({{"m1", {"e1"}}}, emb);
  auto scores = score_trials(trials, models, emb);
  EXPECT_NEAR(scores[0].score, std::sqrt(0.5), 1e-15);
  EXPECT_EQ(scores[1].score, 0.0);
  const fs::path sp = temp_path("scores.tsv");
  atomic_write(sp, format_scores(scores));
  auto sback = read_scores(sp);
  EXPECT_EQ(sback[0].score, scores[0].score);  // 17 digits round-trip

  const fs::path ep = temp_path("enroll.tsv");
  atomic_write(ep, format_enrollment({{"m1", {"e1", "t2"}}}));
  EXPECT_EQ(read_enrollment(ep).at("m1").size(), 2u);

  atomic_write(tp, "m1\tt1\tmaybe\n");
  EXPECT_THROW(read_trials(tp), FormatError);
  EXPECT_THROW(score_trials({{"nope", "t1"}}, models, emb), DataError);
}

}  // namespace
}  // namespace svlab
