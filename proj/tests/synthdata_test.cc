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
#include <map>

#include "svlab/errors.h"
#include "svlab/synthdata.h"

namespace svlab::synth {
namespace {

CorpusSpec small_spec() {
  CorpusSpec s;
  s.num_speakers = 8;
  s.utts_per_speaker = 10;
  s.min_duration_s = 1.0;
  s.max_duration_s = 1.5;
  s.seed = 42;
  return s;
}

std::vector<double> fbank_mean(const audio::Utterance& u) {
  audio::FeatureMatrix f = audio::log_mel(u.samples);
  std::vector<double> m(f.num_bins, 0.0);
  for (std::size_t b = 0; b < f.num_bins; ++b) {
    for (std::size_t t = 0; t < f.num_frames; ++t) m[b] += f.at(b, t);
    m[b] /= static_cast<double>(f.num_frames);
  }
  // Remove the overall level so loudness does not dominate the cosine.
  double mu = 0.0;
  for (double v : m) mu += v;
  mu /= static_cast<double>(m.size());
  for (double& v : m) v -= mu;
  return m;
}

double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) ab += a[i] * b[i], aa += a[i] * a[i], bb += b[i] * b[i];
  return ab / std::sqrt(aa * bb);
}

TEST(SynthTest, SpeakerProfiles) {
  for (std::size_t i = 0; i < 200; ++i) {
    SpeakerProfile s = make_speaker(i, 3, i % 2 ? 0.249 : 0.04);
    ASSERT_GE(s.f0, 80.0);
    ASSERT_LE(s.f0, 300.0);
    ASSERT_LT(s.formants[0], s.formants[1]);
    ASSERT_LT(s.formants[1], s.formants[2]);
    ASSERT_EQ(s.gender, s.f0 < 165.0 ? "M" : "F");
    auto b = s.formants_for("B");
    for (int k = 0; k < 3; ++k) ASSERT_DOUBLE_EQ(b[k], s.formants[k] * 1.08);
  }
  EXPECT_EQ(gender_for_f0(164.9), "M");
  EXPECT_EQ(gender_for_f0(165.0), "F");
}

TEST(SynthTest, CountsAndDeterminism) {
  auto a = generate_corpus(small_spec());
  auto b = generate_corpus(small_spec());
  ASSERT_EQ(a.size(), 80u);
  std::map<std::string, int> per_speaker;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ASSERT_EQ(a[i].samples, b[i].samples);
    ASSERT_EQ(a[i].info.id, b[i].info.id);
    ASSERT_EQ(a[i].info.duration_s, static_cast<double>(a[i].samples.size()) / 16000.0);
    ASSERT_GE(a[i].info.duration_s, 1.0 - 1e-4);
    ASSERT_LE(a[i].info.duration_s, 1.5 + 1e-4);
    ++per_speaker[a[i].info.speaker];
  }
  EXPECT_EQ(per_speaker.size(), 8u);
  for (const auto& [spk, n] : per_speaker) EXPECT_EQ(n, 10);
  int lang_b = 0;
  for (const auto& u : a) lang_b += u.info.language == "B";
  EXPECT_EQ(lang_b, 8 * 3);
}

TEST(SynthTest, SameSpeakerIsCloserInFeatureSpace) {
  auto corpus = generate_corpus(small_spec());
  std::vector<std::vector<double>> means;
  for (const auto& u : corpus) means.push_back(fbank_mean(u));
  double same = 0.0, cross = 0.0;
  std::size_t n_same = 0, n_cross = 0;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    for (std::size_t j = i + 1; j < corpus.size(); ++j) {
      const double c = cosine(means[i], means[j]);
      if (corpus[i].info.speaker == corpus[j].info.speaker) same += c, ++n_same;
      else cross += c, ++n_cross;
    }
  }
  EXPECT_GT(same / static_cast<double>(n_same), cross / static_cast<double>(n_cross));
}

TEST(SynthTest, DiskRoundTrip) {
  const auto dir = std::filesystem::temp_directory_path() /
                   ("svlab_synth_" + std::to_string(::getpid()));
  CorpusSpec spec = small_spec();
  spec.num_speakers = 2;
  spec.utts_per_speaker = 3;
  write_corpus(dir, spec);
  auto disk = read_corpus(dir);
  auto mem = generate_corpus(spec);
  ASSERT_EQ(disk.size(), mem.size());
  for (std::size_t i = 0; i < mem.size(); ++i) {
    EXPECT_EQ(disk[i].samples, mem[i].samples);
    EXPECT_EQ(disk[i].info.domain, mem[i].info.domain);
  }
  std::filesystem::remove_all(dir);
}

TEST(SynthTest, InvalidSpecs) {
  CorpusSpec s = small_spec();
  s.num_speakers = 1;
  EXPECT_THROW(generate_corpus(s), ConfigError);
  s = small_spec();
  s.domains = {"underwater"};
  EXPECT_THROW(s.validate(), ConfigError);
  EXPECT_THROW(CorpusSpec::from_json({{"num_speakerz", 3}}), ConfigError);
}

}  // namespace
}  // namespace svlab::synth
