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

// Waveform ingestion, 80-dim log-Mel filterbanks, SpecAugment, cropping and
// synthetic augmentation.
//
// Features are stored row-major as [F, T]: row f holds Mel bin f over time.

#ifndef SVLAB_AUDIOFEAT_H_
#define SVLAB_AUDIOFEAT_H_

#include <filesystem>
#include <string>
#include <vector>

#include "svlab/io.h"

namespace svlab::audio {

inline constexpr int kSampleRate = 16000;
inline constexpr std::size_t kWindow = 400;  // 25 ms
inline constexpr std::size_t kShift = 160;   // 10 ms
inline constexpr std::size_t kFftSize = 512;
inline constexpr std::size_t kNumMel = 80;
inline constexpr double kMelLowHz = 20.0;
inline constexpr double kMelHighHz = 7600.0;
inline constexpr double kLogFloor = 1e-10;
inline constexpr double kFrameShiftS = 0.010;

// One manifest row.
struct UtteranceInfo {
  std::string id;
  std::string speaker;
  std::string language;  // "A" or "B"
  std::string domain;
  std::string gender;  // "M" or "F"
  double duration_s = 0.0;
};

struct Utterance {
  UtteranceInfo info;
  std::vector<double> samples;  // 16 kHz mono in [-1, 1)
};

struct FeatureMatrix {
  UtteranceInfo info;
  std::size_t num_bins = 0;
  std::size_t num_frames = 0;
  std::vector<double> values;  // [num_bins, num_frames]

  double at(std::size_t f, std::size_t t) const { return values[f * num_frames + t]; }
};

// PCM16 mono 16 kHz WAV. Samples are divided by 32768.
std::vector<double> load_wav(const std::filesystem::path& path);
Utterance load_utterance(const std::filesystem::path& path, const UtteranceInfo& info);
// Rounds to the nearest PCM16 value, clipping to [-32768, 32767].
void save_wav(const std::filesystem::path& path, const std::vector<double>& samples);
std::string encode_wav(const std::vector<double>& samples);

// Manifest TSV: id, speaker, language, domain, gender, duration_s.
std::vector<UtteranceInfo> read_manifest(const std::filesystem::path& path);
std::string format_manifest(const std::vector<UtteranceInfo>& rows);

std::size_t num_frames(std::size_t num_samples);

// Mel scale (HTK): 2595 log10(1 + f / 700).
double hz_to_mel(double hz);
double mel_to_hz(double mel);
// Center frequency (Hz) of each of the 80 triangular filters.
std::vector<double> mel_centers_hz();

// Log-Mel energies before mean normalization.
FeatureMatrix log_mel(const std::vector<double>& samples);
// Subtracts each row's time mean in place.
void mean_normalize(FeatureMatrix& f);
// log_mel followed by mean_normalize.
FeatureMatrix fbank(const std::vector<double>& samples);
FeatureMatrix fbank(const Utterance& u);

struct SpecAugmentDraw {
  std::size_t freq_width = 0, freq_start = 0;
  std::size_t time_width = 0, time_start = 0;
};
inline constexpr std::size_t kMaxFreqMask = 10;
inline constexpr std::size_t kMaxTimeMask = 5;

SpecAugmentDraw draw_spec_augment(std::size_t num_bins, std::size_t num_frames, Rng& rng);
void apply_spec_augment(FeatureMatrix& f, const SpecAugmentDraw& draw);
// One frequency and one time mask, each zeroed.
void spec_augment(FeatureMatrix& f, Rng& rng);

std::size_t crop_frames(double seconds);
// Random window of crop_frames(seconds) frames; shorter inputs repeat
// cyclically from the drawn start.
FeatureMatrix crop(const FeatureMatrix& f, double seconds, Rng& rng);
FeatureMatrix crop_at(const FeatureMatrix& f, std::size_t frames, std::size_t start);

enum class AugmentKind { kClean, kNoise, kMusic, kBabble, kReverb };
std::string to_string(AugmentKind kind);
AugmentKind augment_kind_from_string(const std::string& name);
inline constexpr AugmentKind kAllAugmentKinds[] = {AugmentKind::kClean, AugmentKind::kNoise,
                                                   AugmentKind::kMusic, AugmentKind::kBabble,
                                                   AugmentKind::kReverb};

// Synthetic sources standing in for noise/music/babble corpora.
std::vector<double> make_noise(std::size_t n, Rng& rng);
std::vector<double> make_music(std::size_t n, Rng& rng);
std::vector<double> make_babble(std::size_t n, Rng& rng);
// Exponentially decaying noise tail behind a unit direct path.
std::vector<double> make_impulse_response(double rt60_s, Rng& rng);

double mean_power(const std::vector<double>& x);
// signal + noise scaled so that 10 log10(P_signal / P_noise) = snr_db.
std::vector<double> mix_at_snr(const std::vector<double>& signal, const std::vector<double>& noise,
                               double snr_db);
// Causal convolution truncated to the input length (FFT based).
std::vector<double> convolve(const std::vector<double>& signal, const std::vector<double>& ir);

inline constexpr double kMinSnrDb = 5.0;
inline constexpr double kMaxSnrDb = 20.0;

std::vector<double> augment(const std::vector<double>& samples, AugmentKind kind, Rng& rng);

// Feature cache: "SVFB", then records of u32 id length, id, u32 F, u32 T and
// F*T float64 values.
std::string serialize_features(const std::vector<FeatureMatrix>& feats);
void save_features(const std::filesystem::path& path, const std::vector<FeatureMatrix>& feats);
// Metadata other than the id is not stored; it is re-attached by callers.
std::vector<FeatureMatrix> parse_features(const std::string& bytes, const std::string& source);
std::vector<FeatureMatrix> load_features(const std::filesystem::path& path);

}  // namespace svlab::audio

#endif  // SVLAB_AUDIOFEAT_H_
