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

#include "svlab/audiofeat.h"

#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstring>
#include <memory>
#include <mutex>
#include <numbers>

#include "svlab/errors.h"

namespace svlab::audio {

namespace {

// FFTW's planner is not re-entrant; execution on distinct plans is.
std::mutex& planner_mutex() {
  static std::mutex m;
  return m;
}

struct FftwFree {
  void operator()(void* p) const { fftw_free(p); }
};

// Real-to-complex transform of a fixed size with its own aligned buffers.
class RealFft {
 public:
  explicit RealFft(std::size_t n)
      : n_(n),
        in_(static_cast<double*>(fftw_malloc(sizeof(double) * n))),
        out_(static_cast<fftw_complex*>(fftw_malloc(sizeof(fftw_complex) * (n / 2 + 1)))) {
    std::lock_guard<std::mutex> lock(planner_mutex());
    plan_ = fftw_plan_dft_r2c_1d(static_cast<int>(n), in_.get(), out_.get(), FFTW_ESTIMATE);
  }
  ~RealFft() {
    std::lock_guard<std::mutex> lock(planner_mutex());
    fftw_destroy_plan(plan_);
  }
  RealFft(const RealFft&) = delete;
  RealFft& operator=(const RealFft&) = delete;

  double* input() { return in_.get(); }
  const fftw_complex* output() const { return out_.get(); }
  void execute() { fftw_execute(plan_); }
  std::size_t size() const { return n_; }

 private:
  std::size_t n_;
  std::unique_ptr<double, FftwFree> in_;
  std::unique_ptr<fftw_complex, FftwFree> out_;
  fftw_plan plan_;
};

const std::vector<double>& hamming() {
  static const std::vector<double> w = [] {
    std::vector<double> v(kWindow);
    for (std::size_t n = 0; n < kWindow; ++n) {
      v[n] = 0.54 - 0.46 * std::cos(2.0 * std::numbers::pi * static_cast<double>(n) /
                                    static_cast<double>(kWindow - 1));
    }
    return v;
  }();
  return w;
}

// Triangular filter m covers FFT bins [first, first + weights.size()).
struct MelFilter {
  std::size_t first = 0;
  std::vector<double> weights;
};

// Triangular weights laid out on the Mel axis.
const std::vector<MelFilter>& mel_bank() {
  static const std::vector<MelFilter> bank = [] {
    const std::size_t bins = kFftSize / 2 + 1;
    const double lo = hz_to_mel(kMelLowHz), hi = hz_to_mel(kMelHighHz);
    const double step = (hi - lo) / static_cast<double>(kNumMel + 1);
    std::vector<MelFilter> b(kNumMel);
    for (std::size_t m = 0; m < kNumMel; ++m) {
      const double left = lo + step * static_cast<double>(m);
      const double center = left + step, right = center + step;
      std::vector<double> row(bins, 0.0);
      for (std::size_t k = 0; k < bins; ++k) {
        const double mel = hz_to_mel(static_cast<double>(k) * kSampleRate / kFftSize);
        if (mel > left && mel < center) row[k] = (mel - left) / (center - left);
        else if (mel >= center && mel < right) row[k] = (right - mel) / (right - center);
      }
      std::size_t first = 0, last = bins;
      while (first < bins && row[first] == 0.0) ++first;
      while (last > first && row[last - 1] == 0.0) --last;
      b[m].first = first;
      b[m].weights.assign(row.begin() + static_cast<std::ptrdiff_t>(first),
                          row.begin() + static_cast<std::ptrdiff_t>(last));
    }
    return b;
  }();
  return bank;
}

std::uint16_t read_u16(const std::string& d, std::size_t pos) {
  std::uint16_t v;
  std::memcpy(&v, d.data() + pos, 2);
  return v;
}

std::uint32_t read_u32(const std::string& d, std::size_t pos) {
  std::uint32_t v;
  std::memcpy(&v, d.data() + pos, 4);
  return v;
}

std::size_t next_pow2(std::size_t n) {
  std::size_t p = 1;
  while (p < n) p <<= 1;
  return p;
}

}  // namespace

// ---------------------------------------------------------------------------
// WAV and manifest.

std::vector<double> load_wav(const std::filesystem::path& path) {
  const std::string d = read_file(path);
  const std::string src = path.string();
  if (d.size() < 12 || d.compare(0, 4, "RIFF") != 0 || d.compare(8, 4, "WAVE") != 0) {
    throw FormatError(src + ": not a RIFF/WAVE file");
  }
  bool have_fmt = false;
  std::size_t pos = 12;
  while (pos + 8 <= d.size()) {
    const std::string id = d.substr(pos, 4);
    const std::size_t size = read_u32(d, pos + 4);
    const std::size_t body = pos + 8;
    if (body + size > d.size()) throw FormatError(src + ": truncated chunk \"" + id + "\"");
    if (id == "fmt ") {
      if (size < 16) throw FormatError(src + ": fmt chunk too short");
      if (read_u16(d, body) != 1) {
        throw FormatError(src + ": codec " + std::to_string(read_u16(d, body)) + " is not PCM");
      }
      if (read_u16(d, body + 2) != 1) {
        throw FormatError(src + ": channels = " + std::to_string(read_u16(d, body + 2)) +
                          ", expected mono");
      }
      if (read_u32(d, body + 4) != static_cast<std::uint32_t>(kSampleRate)) {
        throw FormatError(src + ": sample rate = " + std::to_string(read_u32(d, body + 4)) +
                          ", expected 16000");
      }
      if (read_u16(d, body + 14) != 16) {
        throw FormatError(src + ": bits per sample = " + std::to_string(read_u16(d, body + 14)) +
                          ", expected 16");
      }
      have_fmt = true;
    } else if (id == "data") {
      if (!have_fmt) throw FormatError(src + ": data chunk before fmt chunk");
      std::vector<double> samples(size / 2);
      for (std::size_t i = 0; i < samples.size(); ++i) {
        std::int16_t v;
        std::memcpy(&v, d.data() + body + 2 * i, 2);
        samples[i] = static_cast<double>(v) / 32768.0;
      }
      return samples;
    }
    pos = body + size + (size & 1);
  }
  throw FormatError(src + (have_fmt ? ": missing data chunk" : ": missing fmt chunk"));
}

Utterance load_utterance(const std::filesystem::path& path, const UtteranceInfo& info) {
  Utterance u{info, load_wav(path)};
  u.info.duration_s = static_cast<double>(u.samples.size()) / kSampleRate;
  return u;
}

std::string encode_wav(const std::vector<double>& samples) {
  const std::uint32_t data_bytes = static_cast<std::uint32_t>(samples.size() * 2);
  BinaryWriter w;
  auto u16 = [&w](std::uint16_t v) { w.bytes(std::string_view(reinterpret_cast<const char*>(&v), 2)); };
  w.bytes("RIFF");
  w.u32(36 + data_bytes);
  w.bytes("WAVEfmt ");
  w.u32(16);
  u16(1);
  u16(1);
  w.u32(kSampleRate);
  w.u32(kSampleRate * 2);
  u16(2);
  u16(16);
  w.bytes("data");
  w.u32(data_bytes);
  for (double s : samples) {
    const double q = std::clamp(std::nearbyint(s * 32768.0), -32768.0, 32767.0);
    u16(static_cast<std::uint16_t>(static_cast<std::int16_t>(q)));
  }
  return w.buffer();
}

void save_wav(const std::filesystem::path& path, const std::vector<double>& samples) {
  atomic_write(path, encode_wav(samples));
}

std::vector<UtteranceInfo> read_manifest(const std::filesystem::path& path) {
  std::vector<UtteranceInfo> out;
  for (const TsvRow& row : read_tsv(path)) {
    const std::string where = path.string() + ":" + std::to_string(row.line);
    if (row.fields.size() != 6) {
      throw FormatError(where + ": expected 6 fields, got " + std::to_string(row.fields.size()));
    }
    if (out.empty() && row.fields[0] == "id") continue;  // header
    UtteranceInfo u{row.fields[0], row.fields[1], row.fields[2], row.fields[3], row.fields[4],
                    parse_double(row.fields[5], where + ": duration_s")};
    if (u.language != "A" && u.language != "B") {
      throw FormatError(where + ": language must be A or B, got \"" + u.language + "\"");
    }
    if (u.gender != "M" && u.gender != "F") {
      throw FormatError(where + ": gender must be M or F, got \"" + u.gender + "\"");
    }
    out.push_back(std::move(u));
  }
  return out;
}

std::string format_manifest(const std::vector<UtteranceInfo>& rows) {
  std::string out = join_tsv({"id", "speaker", "language", "domain", "gender", "duration_s"});
  for (const UtteranceInfo& u : rows) {
    out += join_tsv({u.id, u.speaker, u.language, u.domain, u.gender, format_double(u.duration_s)});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Filterbanks.

std::size_t num_frames(std::size_t num_samples) {
  if (num_samples < kWindow) return 0;
  return 1 + (num_samples - kWindow) / kShift;
}

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }

double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

std::vector<double> mel_centers_hz() {
  const double lo = hz_to_mel(kMelLowHz), hi = hz_to_mel(kMelHighHz);
  const double step = (hi - lo) / static_cast<double>(kNumMel + 1);
  std::vector<double> c(kNumMel);
  for (std::size_t m = 0; m < kNumMel; ++m) c[m] = mel_to_hz(lo + step * static_cast<double>(m + 1));
  return c;
}

FeatureMatrix log_mel(const std::vector<double>& samples) {
  const std::size_t t_n = num_frames(samples.size());
  if (t_n == 0) {
    throw DataError("fbank: utterance too short (" + std::to_string(samples.size()) +
                    " samples, need at least " + std::to_string(kWindow) + ")");
  }
  thread_local RealFft fft(kFftSize);
  const auto& win = hamming();
  const auto& bank = mel_bank();
  const std::size_t bins = kFftSize / 2 + 1;
  std::vector<double> power(bins);
  FeatureMatrix f;
  f.num_bins = kNumMel;
  f.num_frames = t_n;
  f.values.assign(kNumMel * t_n, 0.0);
  double* in = fft.input();
  for (std::size_t t = 0; t < t_n; ++t) {
    const double* frame = samples.data() + t * kShift;
    for (std::size_t n = 0; n < kWindow; ++n) in[n] = frame[n] * win[n];
    std::fill(in + kWindow, in + kFftSize, 0.0);
    fft.execute();
    const fftw_complex* out = fft.output();
    for (std::size_t k = 0; k < bins; ++k) power[k] = out[k][0] * out[k][0] + out[k][1] * out[k][1];
    for (std::size_t m = 0; m < kNumMel; ++m) {
      const MelFilter& filt = bank[m];
      double e = 0.0;
      for (std::size_t k = 0; k < filt.weights.size(); ++k) e += filt.weights[k] * power[filt.first + k];
      f.values[m * t_n + t] = std::log(std::max(e, kLogFloor));
    }
  }
  return f;
}

void mean_normalize(FeatureMatrix& f) {
  for (std::size_t m = 0; m < f.num_bins; ++m) {
    double* row = f.values.data() + m * f.num_frames;
    double mean = 0.0;
    for (std::size_t t = 0; t < f.num_frames; ++t) mean += row[t];
    mean /= static_cast<double>(f.num_frames);
    for (std::size_t t = 0; t < f.num_frames; ++t) row[t] -= mean;
  }
}

FeatureMatrix fbank(const std::vector<double>& samples) {
  FeatureMatrix f = log_mel(samples);
  mean_normalize(f);
  return f;
}

FeatureMatrix fbank(const Utterance& u) {
  FeatureMatrix f = fbank(u.samples);
  f.info = u.info;
  return f;
}

// ---------------------------------------------------------------------------
// SpecAugment and cropping.

SpecAugmentDraw draw_spec_augment(std::size_t num_bins, std::size_t num_frames, Rng& rng) {
  SpecAugmentDraw d;
  d.freq_width = std::uniform_int_distribution<std::size_t>(0, std::min(kMaxFreqMask, num_bins))(rng);
  d.freq_start = std::uniform_int_distribution<std::size_t>(0, num_bins - d.freq_width)(rng);
  d.time_width = std::uniform_int_distribution<std::size_t>(0, std::min(kMaxTimeMask, num_frames))(rng);
  d.time_start = std::uniform_int_distribution<std::size_t>(0, num_frames - d.time_width)(rng);
  return d;
}

void apply_spec_augment(FeatureMatrix& f, const SpecAugmentDraw& d) {
  for (std::size_t m = d.freq_start; m < d.freq_start + d.freq_width; ++m) {
    std::fill_n(f.values.begin() + static_cast<std::ptrdiff_t>(m * f.num_frames), f.num_frames, 0.0);
  }
  for (std::size_t m = 0; m < f.num_bins; ++m) {
    double* row = f.values.data() + m * f.num_frames;
    std::fill(row + d.time_start, row + d.time_start + d.time_width, 0.0);
  }
}

void spec_augment(FeatureMatrix& f, Rng& rng) {
  apply_spec_augment(f, draw_spec_augment(f.num_bins, f.num_frames, rng));
}

std::size_t crop_frames(double seconds) {
  if (!(seconds > 0.0)) throw ConfigError("crop: length must be positive");
  return static_cast<std::size_t>(std::lround(seconds / kFrameShiftS));
}

FeatureMatrix crop_at(const FeatureMatrix& f, std::size_t frames, std::size_t start) {
  FeatureMatrix out;
  out.info = f.info;
  out.num_bins = f.num_bins;
  out.num_frames = frames;
  out.values.resize(f.num_bins * frames);
  for (std::size_t m = 0; m < f.num_bins; ++m) {
    const double* src = f.values.data() + m * f.num_frames;
    double* dst = out.values.data() + m * frames;
    for (std::size_t i = 0; i < frames; ++i) dst[i] = src[(start + i) % f.num_frames];
  }
  return out;
}

FeatureMatrix crop(const FeatureMatrix& f, double seconds, Rng& rng) {
  const std::size_t n = crop_frames(seconds);
  const std::size_t last = n <= f.num_frames ? f.num_frames - n : f.num_frames - 1;
  const std::size_t start = std::uniform_int_distribution<std::size_t>(0, last)(rng);
  return crop_at(f, n, start);
}

// ---------------------------------------------------------------------------
// Augmentation.

std::string to_string(AugmentKind kind) {
  switch (kind) {
    case AugmentKind::kClean: return "clean";
    case AugmentKind::kNoise: return "noise";
    case AugmentKind::kMusic: return "music";
    case AugmentKind::kBabble: return "babble";
    case AugmentKind::kReverb: return "reverb";
  }
  return "unknown";
}

AugmentKind augment_kind_from_string(const std::string& name) {
  for (AugmentKind k : kAllAugmentKinds) {
    if (to_string(k) == name) return k;
  }
  throw ConfigError("unknown augmentation kind \"" + name + "\"");
}

std::vector<double> make_noise(std::size_t n, Rng& rng) {
  // Gaussian noise through a random one-pole low-pass.
  std::normal_distribution<double> g(0.0, 1.0);
  const double a = std::uniform_real_distribution<double>(0.0, 0.9)(rng);
  std::vector<double> x(n);
  double prev = 0.0;
  for (double& v : x) {
    prev = a * prev + (1.0 - a) * g(rng);
    v = prev;
  }
  return x;
}

std::vector<double> make_music(std::size_t n, Rng& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> x(n, 0.0);
  std::size_t pos = 0;
  while (pos < n) {
    const auto len = static_cast<std::size_t>((0.15 + 0.45 * u(rng)) * kSampleRate);
    const int voices = 1 + static_cast<int>(u(rng) * 3.0);
    for (int v = 0; v < voices; ++v) {
      const int semitone = static_cast<int>(u(rng) * 48.0);
      const double f0 = 110.0 * std::pow(2.0, semitone / 12.0);
      const double phase = 2.0 * std::numbers::pi * u(rng);
      for (std::size_t i = 0; i < len && pos + i < n; ++i) {
        const double t = static_cast<double>(i) / kSampleRate;
        const double env = std::min(1.0, t / 0.01) * std::exp(-3.0 * t);
        double s = 0.0;
        for (int h = 1; h <= 3; ++h) {
          s += std::sin(2.0 * std::numbers::pi * f0 * h * t + phase) / h;
        }
        x[pos + i] += env * s;
      }
    }
    pos += len;
  }
  return x;
}

std::vector<double> make_babble(std::size_t n, Rng& rng) {
  constexpr int kHarmonics = 8;
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> x(n, 0.0);
  const int talkers = 3 + static_cast<int>(u(rng) * 4.0);
  for (int k = 0; k < talkers; ++k) {
    const double f0 = 90.0 + 160.0 * u(rng);
    const double rate = 3.0 + 3.0 * u(rng);  // syllables per second
    const double phase = 2.0 * std::numbers::pi * u(rng);
    const double mod_phase = 2.0 * std::numbers::pi * u(rng);
    for (std::size_t i = 0; i < n; ++i) {
      const double t = static_cast<double>(i) / kSampleRate;
      const double env = std::max(0.0, std::sin(std::numbers::pi * rate * t + mod_phase));
      if (env == 0.0) continue;
      // sin(h theta) by the recurrence s_{h+1} = 2 cos(theta) s_h - s_{h-1}.
      const double theta = 2.0 * std::numbers::pi * f0 * t + phase;
      const double c2 = 2.0 * std::cos(theta);
      double prev = 0.0, cur = std::sin(theta), s = 0.0;
      for (int h = 1; h <= kHarmonics; ++h) {
        s += cur / h;
        const double next = c2 * cur - prev;
        prev = cur;
        cur = next;
      }
      x[i] += env * s;
    }
  }
  return x;
}

std::vector<double> make_impulse_response(double rt60_s, Rng& rng) {
  if (!(rt60_s > 0.0)) throw ConfigError("reverb: rt60 must be positive");
  const auto len = static_cast<std::size_t>(rt60_s * kSampleRate);
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<double> h(std::max<std::size_t>(len, 1), 0.0);
  h[0] = 1.0;
  const double decay = std::log(1000.0) / (rt60_s * kSampleRate);  // -60 dB at rt60
  for (std::size_t i = 1; i < h.size(); ++i) h[i] = 0.1 * g(rng) * std::exp(-decay * static_cast<double>(i));
  return h;
}

double mean_power(const std::vector<double>& x) {
  if (x.empty()) return 0.0;
  double p = 0.0;
  for (double v : x) p += v * v;
  return p / static_cast<double>(x.size());
}

std::vector<double> mix_at_snr(const std::vector<double>& signal, const std::vector<double>& noise,
                               double snr_db) {
  if (noise.size() < signal.size()) throw DataError("mix: noise shorter than signal");
  std::vector<double> n(noise.begin(), noise.begin() + static_cast<std::ptrdiff_t>(signal.size()));
  const double ps = mean_power(signal), pn = mean_power(n);
  if (ps == 0.0 || pn == 0.0) return signal;
  const double scale = std::sqrt(ps / (pn * std::pow(10.0, snr_db / 10.0)));
  std::vector<double> out(signal.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = signal[i] + scale * n[i];
  return out;
}

std::vector<double> convolve(const std::vector<double>& signal, const std::vector<double>& ir) {
  if (signal.empty() || ir.empty()) return signal;
  const std::size_t n = next_pow2(signal.size() + ir.size() - 1);
  const std::size_t bins = n / 2 + 1;
  std::unique_ptr<double, FftwFree> a(static_cast<double*>(fftw_malloc(sizeof(double) * n)));
  std::unique_ptr<double, FftwFree> b(static_cast<double*>(fftw_malloc(sizeof(double) * n)));
  std::unique_ptr<fftw_complex, FftwFree> fa(
      static_cast<fftw_complex*>(fftw_malloc(sizeof(fftw_complex) * bins)));
  std::unique_ptr<fftw_complex, FftwFree> fb(
      static_cast<fftw_complex*>(fftw_malloc(sizeof(fftw_complex) * bins)));
  fftw_plan pa, pb, inv;
  {
    std::lock_guard<std::mutex> lock(planner_mutex());
    const int ni = static_cast<int>(n);
    pa = fftw_plan_dft_r2c_1d(ni, a.get(), fa.get(), FFTW_ESTIMATE);
    pb = fftw_plan_dft_r2c_1d(ni, b.get(), fb.get(), FFTW_ESTIMATE);
    inv = fftw_plan_dft_c2r_1d(ni, fa.get(), a.get(), FFTW_ESTIMATE);
  }
  std::fill_n(a.get(), n, 0.0);
  std::fill_n(b.get(), n, 0.0);
  std::copy(signal.begin(), signal.end(), a.get());
  std::copy(ir.begin(), ir.end(), b.get());
  fftw_execute(pa);
  fftw_execute(pb);
  for (std::size_t k = 0; k < bins; ++k) {
    const std::complex<double> x(fa.get()[k][0], fa.get()[k][1]), y(fb.get()[k][0], fb.get()[k][1]);
    const std::complex<double> z = x * y;
    fa.get()[k][0] = z.real();
    fa.get()[k][1] = z.imag();
  }
  fftw_execute(inv);
  std::vector<double> out(signal.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.get()[i] / static_cast<double>(n);
  {
    std::lock_guard<std::mutex> lock(planner_mutex());
    fftw_destroy_plan(pa);
    fftw_destroy_plan(pb);
    fftw_destroy_plan(inv);
  }
  return out;
}

std::vector<double> augment(const std::vector<double>& samples, AugmentKind kind, Rng& rng) {
  std::uniform_real_distribution<double> snr(kMinSnrDb, kMaxSnrDb);
  switch (kind) {
    case AugmentKind::kClean:
      return samples;
    case AugmentKind::kNoise:
      return mix_at_snr(samples, make_noise(samples.size(), rng), snr(rng));
    case AugmentKind::kMusic:
      return mix_at_snr(samples, make_music(samples.size(), rng), snr(rng));
    case AugmentKind::kBabble:
      return mix_at_snr(samples, make_babble(samples.size(), rng), snr(rng));
    case AugmentKind::kReverb: {
      const double rt60 = std::uniform_real_distribution<double>(0.2, 0.6)(rng);
      return convolve(samples, make_impulse_response(rt60, rng));
    }
  }
  return samples;
}

// ---------------------------------------------------------------------------
// Feature cache.

namespace {
constexpr std::string_view kFeatureMagic = "SVFB";
}  // namespace

std::string serialize_features(const std::vector<FeatureMatrix>& feats) {
  BinaryWriter w;
  w.bytes(kFeatureMagic);
  for (const FeatureMatrix& f : feats) {
    w.str(f.info.id);
    w.u32(static_cast<std::uint32_t>(f.num_bins));
    w.u32(static_cast<std::uint32_t>(f.num_frames));
    for (double v : f.values) w.f64(v);
  }
  return w.buffer();
}

void save_features(const std::filesystem::path& path, const std::vector<FeatureMatrix>& feats) {
  atomic_write(path, serialize_features(feats));
}

std::vector<FeatureMatrix> parse_features(const std::string& bytes, const std::string& source) {
  BinaryReader r(bytes, source);
  r.expect_magic(kFeatureMagic);
  std::vector<FeatureMatrix> out;
  while (!r.done()) {
    r.next_record();
    FeatureMatrix f;
    f.info.id = r.str("id");
    f.num_bins = r.u32("F");
    f.num_frames = r.u32("T");
    f.values.resize(f.num_bins * f.num_frames);
    for (double& v : f.values) v = r.f64("values");
    out.push_back(std::move(f));
  }
  return out;
}

std::vector<FeatureMatrix> load_features(const std::filesystem::path& path) {
  return parse_features(read_file(path), path.string());
}

}  // namespace svlab::audio
