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

#include "svlab/synthdata.h"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>

#include "svlab/errors.h"
#include "svlab/jsonutil.h"

namespace svlab::synth {

namespace {

constexpr std::array<double, 3> kFormantBandwidth = {90.0, 120.0, 160.0};
constexpr double kVowelSpread = 0.06;
constexpr double kSyllableF0Jitter = 0.03;
constexpr double kNoiseDb = -10.0;
constexpr double kPeak = 0.7;

double uniform(Rng& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

// Linear amplitude of a harmonic at hz under the formant envelope and tilt.
double envelope(double hz, double f0, const std::array<double, 3>& formants, double tilt) {
  double a = 0.0;
  for (std::size_t i = 0; i < 3; ++i) {
    const double d = (hz - formants[i]) / kFormantBandwidth[i];
    a += std::exp(-0.5 * d * d) / static_cast<double>(i + 1);
  }
  return (a + 0.02) * std::pow(10.0, tilt * std::log2(hz / f0) / 20.0);
}

std::vector<double> voiced(const SpeakerProfile& spk, const std::array<double, 3>& formants,
                           std::size_t n, Rng& rng) {
  std::vector<double> x(n, 0.0);
  std::size_t pos = static_cast<std::size_t>(uniform(rng, 0.0, 0.1) * audio::kSampleRate);
  while (pos < n) {
    const auto len = static_cast<std::size_t>(uniform(rng, 0.1, 0.3) * audio::kSampleRate);
    const double f0 = spk.f0 * (1.0 + uniform(rng, -kSyllableF0Jitter, kSyllableF0Jitter));
    const double glide = uniform(rng, -0.05, 0.05);  // relative f0 change over the syllable
    std::array<double, 3> vowel;
    for (std::size_t i = 0; i < 3; ++i) vowel[i] = formants[i] * (1.0 + uniform(rng, -kVowelSpread, kVowelSpread));
    const std::size_t end = std::min(n, pos + len);
    const auto harmonics = static_cast<std::size_t>(7600.0 / (f0 * (1.0 + std::abs(glide))));
    std::vector<double> amp(harmonics);
    for (std::size_t k = 0; k < harmonics; ++k) {
      amp[k] = envelope(f0 * static_cast<double>(k + 1), f0, vowel, spk.tilt_db_per_octave);
    }
    double theta = uniform(rng, 0.0, 2.0 * std::numbers::pi);
    for (std::size_t i = pos; i < end; ++i) {
      const double frac = static_cast<double>(i - pos) / static_cast<double>(len);
      theta += 2.0 * std::numbers::pi * f0 * (1.0 + glide * frac) / audio::kSampleRate;
      // sin(k theta) by the recurrence s_{k+1} = 2 cos(theta) s_k - s_{k-1}.
      const double c2 = 2.0 * std::cos(theta);
      double prev = 0.0, cur = std::sin(theta), acc = 0.0;
      for (std::size_t k = 0; k < harmonics; ++k) {
        acc += amp[k] * cur;
        const double next = c2 * cur - prev;
        prev = cur;
        cur = next;
      }
      x[i] += std::sin(std::numbers::pi * frac) * acc;
    }
    pos = end + static_cast<std::size_t>(uniform(rng, 0.03, 0.12) * audio::kSampleRate);
  }
  return x;
}

}  // namespace

std::array<double, 3> SpeakerProfile::formants_for(const std::string& language) const {
  if (language == "A") return formants;
  if (language == "B") return {formants[0] * kLanguageBShift, formants[1] * kLanguageBShift,
                               formants[2] * kLanguageBShift};
  throw DataError("unknown language \"" + language + "\"");
}

std::string gender_for_f0(double f0) { return f0 < kGenderThresholdHz ? "M" : "F"; }

void CorpusSpec::validate() const {
  if (num_speakers < 2) throw ConfigError("synth: num_speakers must be at least 2");
  if (utts_per_speaker == 0) throw ConfigError("synth: utts_per_speaker must be positive");
  if (!(min_duration_s >= 0.1) || !(max_duration_s >= min_duration_s)) {
    throw ConfigError("synth: need 0.1 <= min_duration_s <= max_duration_s");
  }
  if (!(language_b_fraction >= 0.0 && language_b_fraction <= 1.0)) {
    throw ConfigError("synth: language_b_fraction must lie in [0, 1]");
  }
  if (!(formant_spread >= 0.0 && formant_spread < 0.25)) {
    throw ConfigError("synth: formant_spread must lie in [0, 0.25) so formants stay ordered");
  }
  if (domains.empty()) throw ConfigError("synth: domains must not be empty");
  for (const auto& d : domains) {
    if (d != "clean" && d != "noisy" && d != "reverb") {
      throw ConfigError("synth: unknown domain \"" + d + "\" (clean, noisy, reverb)");
    }
  }
}

nlohmann::json CorpusSpec::to_json() const {
  return {{"num_speakers", num_speakers},     {"utts_per_speaker", utts_per_speaker},
          {"min_duration_s", min_duration_s}, {"max_duration_s", max_duration_s},
          {"language_b_fraction", language_b_fraction}, {"formant_spread", formant_spread},
          {"domains", domains},
          {"seed", seed}};
}

CorpusSpec CorpusSpec::from_json(const nlohmann::json& j) {
  CorpusSpec s;
  JsonFields f(j, "synth");
  f.read("num_speakers", s.num_speakers);
  f.read("utts_per_speaker", s.utts_per_speaker);
  f.read("min_duration_s", s.min_duration_s);
  f.read("max_duration_s", s.max_duration_s);
  f.read("language_b_fraction", s.language_b_fraction);
  f.read("formant_spread", s.formant_spread);
  if (const auto* d = f.get("domains")) {
    if (!d->is_array()) throw ConfigError("synth: domains must be an array of strings");
    s.domains.clear();
    for (const auto& e : *d) {
      if (!e.is_string()) throw ConfigError("synth: domains must be an array of strings");
      s.domains.push_back(e.get<std::string>());
    }
  }
  std::size_t seed = s.seed;
  f.read("seed", seed);
  s.seed = seed;
  f.finish();
  s.validate();
  return s;
}

SpeakerProfile make_speaker(std::size_t index, std::uint64_t seed, double formant_spread) {
  Rng rng(derive_seed(seed, "speaker", index));
  SpeakerProfile s;
  char id[32];
  std::snprintf(id, sizeof(id), "spk%03zu", index);
  s.id = id;
  s.f0 = uniform(rng, kMinF0, kMaxF0);
  for (std::size_t i = 0; i < 3; ++i) {
    s.formants[i] = kBaseFormants[i] * (1.0 + uniform(rng, -formant_spread, formant_spread));
  }
  s.tilt_db_per_octave = uniform(rng, -9.0, -3.0);
  s.gender = gender_for_f0(s.f0);
  return s;
}

std::vector<double> synthesize(const SpeakerProfile& speaker, const std::string& language,
                               const std::string& domain, double duration_s, Rng& rng) {
  const auto n = static_cast<std::size_t>(std::lround(duration_s * audio::kSampleRate));
  std::vector<double> x = voiced(speaker, speaker.formants_for(language), n, rng);
  // Shaped noise floor 10 dB below the voiced signal.
  x = audio::mix_at_snr(x, audio::make_noise(n, rng), -kNoiseDb);
  if (domain == "noisy") {
    x = audio::mix_at_snr(x, audio::make_noise(n, rng), uniform(rng, 5.0, 15.0));
  } else if (domain == "reverb") {
    x = audio::convolve(x, audio::make_impulse_response(uniform(rng, 0.3, 0.7), rng));
  } else if (domain != "clean") {
    throw ConfigError("synth: unknown domain \"" + domain + "\"");
  }
  double peak = 0.0;
  for (double v : x) peak = std::max(peak, std::abs(v));
  if (peak > 0.0) {
    for (double& v : x) v *= kPeak / peak;
  }
  // Quantize as the WAV writer does so in-memory and on-disk corpora agree.
  for (double& v : x) v = std::clamp(std::nearbyint(v * 32768.0), -32768.0, 32767.0) / 32768.0;
  return x;
}

std::vector<audio::Utterance> generate_corpus(const CorpusSpec& spec) {
  spec.validate();
  const auto num_b = static_cast<std::size_t>(
      std::lround(spec.language_b_fraction * static_cast<double>(spec.utts_per_speaker)));
  std::vector<audio::Utterance> out(spec.num_speakers * spec.utts_per_speaker);
  parallel_for(spec.num_speakers, 1, [&](std::size_t s) {
    const SpeakerProfile spk = make_speaker(s, spec.seed, spec.formant_spread);
    for (std::size_t u = 0; u < spec.utts_per_speaker; ++u) {
      const std::size_t idx = s * spec.utts_per_speaker + u;
      Rng rng(derive_seed(spec.seed, "utterance", idx));
      audio::Utterance& utt = out[idx];
      char id[48];
      std::snprintf(id, sizeof(id), "%s_u%03zu", spk.id.c_str(), u);
      utt.info.id = id;
      utt.info.speaker = spk.id;
      utt.info.language = u < num_b ? "B" : "A";
      utt.info.domain = spec.domains[std::uniform_int_distribution<std::size_t>(
          0, spec.domains.size() - 1)(rng)];
      utt.info.gender = spk.gender;
      const double dur = uniform(rng, spec.min_duration_s, spec.max_duration_s);
      utt.samples = synthesize(spk, utt.info.language, utt.info.domain, dur, rng);
      utt.info.duration_s = static_cast<double>(utt.samples.size()) / audio::kSampleRate;
    }
  });
  return out;
}

std::vector<audio::UtteranceInfo> write_corpus(const std::filesystem::path& dir,
                                               const CorpusSpec& spec) {
  const std::vector<audio::Utterance> utts = generate_corpus(spec);
  std::vector<audio::UtteranceInfo> rows;
  for (const auto& u : utts) {
    audio::save_wav(dir / "wav" / (u.info.id + ".wav"), u.samples);
    rows.push_back(u.info);
  }
  atomic_write(dir / "manifest.tsv", audio::format_manifest(rows));
  return rows;
}

std::vector<audio::Utterance> read_corpus(const std::filesystem::path& dir) {
  std::vector<audio::Utterance> out;
  for (const auto& info : audio::read_manifest(dir / "manifest.tsv")) {
    out.push_back(audio::load_utterance(dir / "wav" / (info.id + ".wav"), info));
  }
  return out;
}

}  // namespace svlab::synth
