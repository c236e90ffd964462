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

// Synthetic speakers: harmonic series at a speaker f0 under a formant
// envelope, in two "languages" and a few recording domains.

#ifndef SVLAB_SYNTHDATA_H_
#define SVLAB_SYNTHDATA_H_

#include <array>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "svlab/audiofeat.h"

namespace svlab::synth {

inline constexpr double kMinF0 = 80.0;
inline constexpr double kMaxF0 = 300.0;
inline constexpr double kGenderThresholdHz = 165.0;
inline constexpr double kLanguageBShift = 1.08;
inline constexpr std::array<double, 3> kBaseFormants = {500.0, 1500.0, 2500.0};

struct SpeakerProfile {
  std::string id;
  double f0 = 0.0;
  std::array<double, 3> formants{};  // language A, strictly increasing
  double tilt_db_per_octave = 0.0;
  std::string gender;

  std::array<double, 3> formants_for(const std::string& language) const;
};

std::string gender_for_f0(double f0);

struct CorpusSpec {
  std::size_t num_speakers = 32;
  std::size_t utts_per_speaker = 20;
  double min_duration_s = 1.5;
  double max_duration_s = 4.0;
  double language_b_fraction = 0.3;
  // Each formant of a speaker is drawn uniformly within +-formant_spread
  // (relative) of its base value. Below 0.08 / 2.08 the language A and B
  // formant ranges do not overlap.
  double formant_spread = 0.035;
  std::vector<std::string> domains = {"clean", "noisy", "reverb"};
  std::uint64_t seed = 1;

  void validate() const;
  nlohmann::json to_json() const;
  static CorpusSpec from_json(const nlohmann::json& j);
};

SpeakerProfile make_speaker(std::size_t index, std::uint64_t seed, double formant_spread);

// One utterance of `duration_s` seconds, amplitude normalized.
std::vector<double> synthesize(const SpeakerProfile& speaker, const std::string& language,
                               const std::string& domain, double duration_s, Rng& rng);

// Utterance ids are "<speaker>_uNNN"; within a speaker the first
// round(language_b_fraction * utts_per_speaker) utterances are language B.
std::vector<audio::Utterance> generate_corpus(const CorpusSpec& spec);

// Writes <dir>/wav/<id>.wav and <dir>/manifest.tsv; returns the manifest.
std::vector<audio::UtteranceInfo> write_corpus(const std::filesystem::path& dir,
                                               const CorpusSpec& spec);
// Loads every manifest row from <dir>/wav/<id>.wav.
std::vector<audio::Utterance> read_corpus(const std::filesystem::path& dir);

}  // namespace svlab::synth

#endif  // SVLAB_SYNTHDATA_H_
