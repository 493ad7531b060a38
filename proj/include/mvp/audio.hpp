#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "mvp/rng.hpp"

namespace mvp {

inline constexpr int kTargetSampleRate = 16000;
inline constexpr double kFixedSeconds = 5.0;

// Mono audio buffer. valid_len counts real samples; anything past it is
// padding introduced by fix_length and must stay exactly zero.
struct Waveform {
  std::vector<double> samples;
  int sample_rate = kTargetSampleRate;
  size_t valid_len = 0;

  Waveform() = default;
  Waveform(std::vector<double> s, int sr) : samples(std::move(s)), sample_rate(sr) {
    valid_len = samples.size();
  }

  size_t size() const { return samples.size(); }
  double duration_s() const { return static_cast<double>(samples.size()) / sample_rate; }
};

// ---------------------------------------------------------------------
// WAV I/O: RIFF/WAVE, PCM 16-bit or IEEE float 32-bit, first channel of
// multichannel files. The whole file is validated before any samples are
// returned, so a truncated file never yields a partial read.

namespace wav_detail {

inline uint32_t rd_u32(const uint8_t* p) {
  return uint32_t(p[0]) | uint32_t(p[1]) << 8 | uint32_t(p[2]) << 16 | uint32_t(p[3]) << 24;
}
inline uint16_t rd_u16(const uint8_t* p) { return uint16_t(p[0]) | uint16_t(p[1]) << 8; }

inline void wr_u32(std::vector<uint8_t>& b, uint32_t v) {
  b.push_back(v & 0xff); b.push_back((v >> 8) & 0xff);
  b.push_back((v >> 16) & 0xff); b.push_back((v >> 24) & 0xff);
}
inline void wr_u16(std::vector<uint8_t>& b, uint16_t v) {
  b.push_back(v & 0xff); b.push_back((v >> 8) & 0xff);
}

}  // namespace wav_detail

inline Waveform load_wav(const std::filesystem::path& path) {
  using namespace wav_detail;
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_wav: cannot open " + path.string());
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() < 12 || std::memcmp(bytes.data(), "RIFF", 4) != 0 ||
      std::memcmp(bytes.data() + 8, "WAVE", 4) != 0)
    throw std::runtime_error("load_wav: not a RIFF/WAVE file: " + path.string());

  uint16_t format = 0, channels = 0, bits = 0;
  uint32_t sample_rate = 0;
  bool have_fmt = false;
  const uint8_t* data_ptr = nullptr;
  uint32_t data_len = 0;

  size_t pos = 12;
  while (pos + 8 <= bytes.size()) {
    const uint8_t* hdr = bytes.data() + pos;
    uint32_t chunk_len = rd_u32(hdr + 4);
    size_t body = pos + 8;
    if (body + chunk_len > bytes.size())
      throw std::runtime_error("load_wav: truncated chunk in " + path.string());
    if (std::memcmp(hdr, "fmt ", 4) == 0) {
      if (chunk_len < 16) throw std::runtime_error("load_wav: malformed fmt chunk");
      format = rd_u16(bytes.data() + body);
      channels = rd_u16(bytes.data() + body + 2);
      sample_rate = rd_u32(bytes.data() + body + 4);
      bits = rd_u16(bytes.data() + body + 14);
      if (format == 0xFFFE && chunk_len >= 40)  // WAVE_FORMAT_EXTENSIBLE: subformat GUID
        format = rd_u16(bytes.data() + body + 24);
      have_fmt = true;
    } else if (std::memcmp(hdr, "data", 4) == 0) {
      data_ptr = bytes.data() + body;
      data_len = chunk_len;
    }
    pos = body + chunk_len + (chunk_len & 1);
  }
  if (!have_fmt || data_ptr == nullptr)
    throw std::runtime_error("load_wav: missing fmt/data chunk in " + path.string());
  if (channels < 1 || sample_rate == 0)
    throw std::runtime_error("load_wav: malformed header in " + path.string());

  const size_t bytes_per_sample = bits / 8;
  if (bytes_per_sample == 0 || data_len % (bytes_per_sample * channels) != 0)
    throw std::runtime_error("load_wav: data size not a whole number of frames");
  const size_t frames = data_len / (bytes_per_sample * channels);

  std::vector<double> out(frames);
  if (format == 1 && bits == 16) {
    for (size_t i = 0; i < frames; i++) {
      const uint8_t* p = data_ptr + i * channels * 2;
      int16_t s = static_cast<int16_t>(rd_u16(p));
      out[i] = static_cast<double>(s) / 32768.0;
    }
  } else if (format == 3 && bits == 32) {
    for (size_t i = 0; i < frames; i++) {
      const uint8_t* p = data_ptr + i * channels * 4;
      uint32_t u = rd_u32(p);
      float f;
      std::memcpy(&f, &u, 4);
      out[i] = static_cast<double>(f);
    }
  } else {
    throw std::runtime_error("load_wav: unsupported codec (format " + std::to_string(format) +
                             ", " + std::to_string(bits) + " bit) in " + path.string());
  }
  return Waveform(std::move(out), static_cast<int>(sample_rate));
}

enum class WavEncoding { Pcm16, Float32 };

inline void write_wav(const std::filesystem::path& path, const Waveform& wf,
                      WavEncoding enc = WavEncoding::Float32) {
  using namespace wav_detail;
  const uint16_t channels = 1;
  const uint16_t bits = enc == WavEncoding::Pcm16 ? 16 : 32;
  const uint16_t format = enc == WavEncoding::Pcm16 ? 1 : 3;
  const uint32_t byte_rate = static_cast<uint32_t>(wf.sample_rate) * channels * bits / 8;
  const uint32_t data_len = static_cast<uint32_t>(wf.samples.size() * bits / 8);

  std::vector<uint8_t> b;
  b.reserve(44 + data_len);
  b.insert(b.end(), {'R', 'I', 'F', 'F'});
  wr_u32(b, 36 + data_len);
  b.insert(b.end(), {'W', 'A', 'V', 'E', 'f', 'm', 't', ' '});
  wr_u32(b, 16);
  wr_u16(b, format);
  wr_u16(b, channels);
  wr_u32(b, static_cast<uint32_t>(wf.sample_rate));
  wr_u32(b, byte_rate);
  wr_u16(b, channels * bits / 8);
  wr_u16(b, bits);
  b.insert(b.end(), {'d', 'a', 't', 'a'});
  wr_u32(b, data_len);
  for (double s : wf.samples) {
    if (enc == WavEncoding::Pcm16) {
      double clamped = std::clamp(s, -1.0, 1.0);
      auto q = static_cast<int16_t>(std::lrint(clamped * 32767.0));
      wr_u16(b, static_cast<uint16_t>(q));
    } else {
      float f = static_cast<float>(s);
      uint32_t u;
      std::memcpy(&u, &f, 4);
      wr_u32(b, u);
    }
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("write_wav: cannot open " + path.string());
  out.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
  if (!out) throw std::runtime_error("write_wav: short write to " + path.string());
}

// ---------------------------------------------------------------------
// Band-limited rate conversion. Hann-windowed sinc interpolation; for
// decimation the cutoff drops to the output Nyquist.

namespace dsp_detail {

inline std::vector<double> sinc_interp(const std::vector<double>& x, double step, size_t out_len) {
  constexpr int kHalfTaps = 32;
  const double cut = step > 1.0 ? 1.0 / step : 1.0;
  const double half_width = kHalfTaps / cut;
  std::vector<double> y(out_len, 0.0);
  const auto n = static_cast<ptrdiff_t>(x.size());
  for (size_t j = 0; j < out_len; j++) {
    const double p = static_cast<double>(j) * step;
    const auto lo = static_cast<ptrdiff_t>(std::ceil(p - half_width));
    const auto hi = static_cast<ptrdiff_t>(std::floor(p + half_width));
    double acc = 0.0;
    for (ptrdiff_t i = std::max<ptrdiff_t>(lo, 0); i <= std::min(hi, n - 1); i++) {
      const double t = (static_cast<double>(i) - p) * cut;
      double k;
      if (std::abs(t) < 1e-12) {
        k = 1.0;
      } else {
        const double pt = 3.14159265358979323846 * t;
        k = std::sin(pt) / pt;
      }
      const double u = (static_cast<double>(i) - p) / half_width;
      const double w = 0.5 * (1.0 + std::cos(3.14159265358979323846 * u));
      acc += x[static_cast<size_t>(i)] * k * w * cut;
    }
    y[j] = acc;
  }
  return y;
}

}  // namespace dsp_detail

inline Waveform resample(const Waveform& x, int target_hz = kTargetSampleRate) {
  if (x.sample_rate <= 0) throw std::invalid_argument("resample: nonpositive sample rate");
  if (x.sample_rate == target_hz) return x;
  const double step = static_cast<double>(x.sample_rate) / target_hz;
  const auto out_len = static_cast<size_t>(
      std::llround(static_cast<double>(x.samples.size()) * target_hz / x.sample_rate));
  Waveform y(dsp_detail::sinc_interp(x.samples, step, out_len), target_hz);
  return y;
}

// Zero mean, unit variance over the valid region. A constant signal maps
// to zeros via the epsilon guard. Padding (if any) is left untouched.
inline Waveform normalize(Waveform x) {
  const size_t n = std::min(x.valid_len, x.samples.size());
  if (n < 2) throw std::invalid_argument("normalize: need at least 2 valid samples");
  double mean = 0.0;
  for (size_t i = 0; i < n; i++) mean += x.samples[i];
  mean /= static_cast<double>(n);
  double var = 0.0;
  for (size_t i = 0; i < n; i++) var += (x.samples[i] - mean) * (x.samples[i] - mean);
  var /= static_cast<double>(n);
  if (var <= 1e-12) {
    for (size_t i = 0; i < n; i++) x.samples[i] = 0.0;
    return x;
  }
  const double inv = 1.0 / std::sqrt(var);
  for (size_t i = 0; i < n; i++) x.samples[i] = (x.samples[i] - mean) * inv;
  return x;
}

// Pad with tail zeros or truncate to exactly `seconds`. valid_len marks
// where the real signal ends.
inline Waveform fix_length(Waveform x, double seconds = kFixedSeconds) {
  const auto target = static_cast<size_t>(std::llround(seconds * x.sample_rate));
  const size_t real = std::min(x.valid_len, x.samples.size());
  x.samples.resize(target, 0.0);
  x.valid_len = std::min(real, target);
  if (x.valid_len < target)
    std::fill(x.samples.begin() + static_cast<ptrdiff_t>(x.valid_len), x.samples.end(), 0.0);
  return x;
}

inline double signal_power(const Waveform& x) {
  const size_t n = std::min(x.valid_len, x.samples.size());
  double p = 0.0;
  for (size_t i = 0; i < n; i++) p += x.samples[i] * x.samples[i];
  return n > 0 ? p / static_cast<double>(n) : 0.0;
}

// White Gaussian noise scaled so that 10*log10(P_signal/P_noise) == snr_db
// over the valid region. Padding stays zero.
inline Waveform add_noise_snr(Waveform x, double snr_db, Rng& rng) {
  const size_t n = std::min(x.valid_len, x.samples.size());
  const double p_sig = signal_power(x);
  if (p_sig <= 0.0) throw std::invalid_argument("add_noise_snr: zero-power signal");
  std::vector<double> noise(n);
  double p_noise = 0.0;
  for (size_t i = 0; i < n; i++) {
    noise[i] = rng.normal();
    p_noise += noise[i] * noise[i];
  }
  p_noise /= static_cast<double>(n);
  const double target_p = p_sig / std::pow(10.0, snr_db / 10.0);
  const double scale = std::sqrt(target_p / p_noise);
  for (size_t i = 0; i < n; i++) x.samples[i] += scale * noise[i];
  return x;
}

// Classical speed perturbation by resampling: duration scales by 1/factor
// and pitch scales by factor.
inline Waveform speed_perturb(const Waveform& x, double factor) {
  if (!(factor >= 0.5 && factor <= 2.0)) throw std::invalid_argument("speed_perturb: factor out of [0.5, 2]");
  const auto out_len =
      static_cast<size_t>(std::llround(static_cast<double>(x.samples.size()) / factor));
  Waveform y(dsp_detail::sinc_interp(x.samples, factor, out_len), x.sample_rate);
  return y;
}

namespace dsp_detail {

// WSOLA time stretch to an exact output length, pitch-preserving.
inline std::vector<double> wsola_stretch(const std::vector<double>& x, size_t out_len) {
  const int hs = 256;           // synthesis hop
  const int wn = 2 * hs;        // analysis window (50% overlap, Hann OLA == 1)
  const int search = 256;       // tolerance for the similarity search
  const auto n = static_cast<ptrdiff_t>(x.size());
  if (n < wn + 2 * search + 2) {
    // Too short for overlap-add; fall back to plain resampling.
    const double step = static_cast<double>(x.size()) / static_cast<double>(out_len);
    return sinc_interp(x, step, out_len);
  }
  std::vector<double> window(wn);
  for (int i = 0; i < wn; i++)
    window[static_cast<size_t>(i)] =
        0.5 - 0.5 * std::cos(2.0 * 3.14159265358979323846 * i / wn);

  const double ratio = static_cast<double>(x.size()) / static_cast<double>(out_len);
  std::vector<double> y(out_len + wn, 0.0);
  std::vector<double> wsum(out_len + wn, 0.0);
  ptrdiff_t prev_src = 0;
  const auto frames = static_cast<ptrdiff_t>(out_len) / hs + 1;
  for (ptrdiff_t m = 0; m < frames; m++) {
    const ptrdiff_t out_pos = m * hs;
    ptrdiff_t src;
    if (m == 0) {
      src = 0;
    } else {
      const auto nominal =
          std::clamp<ptrdiff_t>(static_cast<ptrdiff_t>(std::llround(out_pos * ratio)), 0, n - wn - 1);
      // The natural continuation of the previous copy.
      const ptrdiff_t target = prev_src + hs;
      ptrdiff_t best = nominal;
      double best_score = -1e300;
      const ptrdiff_t lo = std::max<ptrdiff_t>(0, nominal - search);
      const ptrdiff_t hi = std::min(n - wn - 1, nominal + search);
      for (ptrdiff_t c = lo; c <= hi; c++) {
        double dot = 0.0, na = 0.0, nb = 0.0;
        // Similarity over the overlapping half-window.
        for (int i = 0; i < hs; i++) {
          const double a = x[static_cast<size_t>(c + i)];
          const double b2 = target + i < n ? x[static_cast<size_t>(target + i)] : 0.0;
          dot += a * b2;
          na += a * a;
          nb += b2 * b2;
        }
        const double score = dot / std::sqrt(na * nb + 1e-12);
        if (score > best_score) {
          best_score = score;
          best = c;
        }
      }
      src = best;
    }
    for (int i = 0; i < wn; i++) {
      const ptrdiff_t xi = src + i;
      if (xi >= n) break;
      y[static_cast<size_t>(out_pos + i)] += x[static_cast<size_t>(xi)] * window[static_cast<size_t>(i)];
      wsum[static_cast<size_t>(out_pos + i)] += window[static_cast<size_t>(i)];
    }
    prev_src = src;
  }
  // Interior overlap-add weight is exactly 1; renormalize the edges where
  // only one window contributes.
  for (size_t i = 0; i < out_len; i++)
    if (wsum[i] > 0.05) y[i] /= wsum[i];
  y.resize(out_len);
  return y;
}

}  // namespace dsp_detail

// Pitch shift by resampling followed by a WSOLA stretch back to the
// original duration.
inline Waveform pitch_shift(const Waveform& x, double semitones) {
  if (std::abs(semitones) > 12.0) throw std::invalid_argument("pitch_shift: |semitones| > 12");
  if (semitones == 0.0) return x;
  const double r = std::pow(2.0, semitones / 12.0);
  const auto mid_len = static_cast<size_t>(std::llround(static_cast<double>(x.samples.size()) / r));
  std::vector<double> shifted = dsp_detail::sinc_interp(x.samples, r, mid_len);
  Waveform y(dsp_detail::wsola_stretch(shifted, x.samples.size()), x.sample_rate);
  return y;
}

// ---------------------------------------------------------------------
// Two-tier augmentation policy: sentences are augmented with probability
// p_sentence, sustained vowels with the lower p_vowel. Given activation,
// each transform applies independently with probability 0.5 and at least
// one is always applied.

enum class SourceKind { SustainedVowel, Sentence, Mixed };

struct AugmentConfig {
  double p_sentence = 0.25;
  double p_vowel = 0.10;
  double snr_db_min = 0.0, snr_db_max = 30.0;
  double speed_min = 0.75, speed_max = 1.25;
  double pitch_semitones = 4.0;
  double per_transform_p = 0.5;

  double activation_p(SourceKind kind) const {
    return kind == SourceKind::Sentence ? p_sentence : p_vowel;
  }
};

inline Waveform augment(const Waveform& x, SourceKind kind, const AugmentConfig& cfg, Rng& rng) {
  if (!rng.bernoulli(cfg.activation_p(kind))) return x;
  bool use_noise = rng.bernoulli(cfg.per_transform_p);
  bool use_speed = rng.bernoulli(cfg.per_transform_p);
  bool use_pitch = rng.bernoulli(cfg.per_transform_p);
  if (!use_noise && !use_speed && !use_pitch) {
    switch (rng.uniform_int(3)) {
      case 0: use_noise = true; break;
      case 1: use_speed = true; break;
      default: use_pitch = true; break;
    }
  }
  Waveform y = x;
  if (use_speed) y = speed_perturb(y, rng.uniform(cfg.speed_min, cfg.speed_max));
  if (use_pitch) y = pitch_shift(y, rng.uniform(-cfg.pitch_semitones, cfg.pitch_semitones));
  if (use_noise) y = add_noise_snr(std::move(y), rng.uniform(cfg.snr_db_min, cfg.snr_db_max), rng);
  return y;
}

// Fixed preprocessing path: resample -> (train-time augment) -> normalize
// -> fix_length. Every training item goes through exactly this sequence;
// validation and test items take the identity branch.
inline Waveform standardize(const Waveform& raw, SourceKind kind, bool training,
                            const AugmentConfig& cfg, Rng& rng, double seconds = kFixedSeconds) {
  Waveform x = resample(raw, kTargetSampleRate);
  if (training) x = augment(x, kind, cfg, rng);
  x = normalize(std::move(x));
  return fix_length(std::move(x), seconds);
}

}  // namespace mvp
