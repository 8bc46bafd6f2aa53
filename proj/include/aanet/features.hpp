#pragma once

// Log-Mel filter-bank front end: framing, Hamming window, power spectrum,
// 40 triangular mel filters, log with an energy floor. Also the 16-bit PCM
// WAV reader and the FBNK feature-file format.

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <numbers>
#include <string>
#include <vector>

#include "aanet/binary_io.hpp"
#include "aanet/error.hpp"
#include "aanet/numeric.hpp"

namespace aanet {

inline constexpr std::size_t kMelBands = 40;
inline constexpr double kEnergyFloor = 1e-10;
inline constexpr double kWindowMs = 25.0;
inline constexpr double kHopMs = 10.0;

struct AudioClip {
  std::vector<double> samples;
  double sample_rate = 8000.0;
};

struct FeatureSequence {
  Matrix frames;  // T x 40
  double frame_shift = kHopMs / 1000.0;
  std::string language;

  std::size_t length() const { return frames.rows(); }
};

enum class WindowKind { Hamming, Rectangular };

inline std::vector<double> analysis_window(std::size_t n, WindowKind kind) {
  std::vector<double> w(n, 1.0);
  if (kind == WindowKind::Hamming && n > 1) {
    for (std::size_t i = 0; i < n; ++i)
      w[i] = 0.54 - 0.46 * std::cos(2.0 * std::numbers::pi * static_cast<double>(i) /
                                    static_cast<double>(n - 1));
  }
  return w;
}

inline std::size_t ms_to_samples(double ms, double sample_rate) {
  return static_cast<std::size_t>(std::lround(ms * sample_rate / 1000.0));
}

/// Closed-form frame count: 1 + floor((len - win) / hop), or 0 if len < win.
inline std::size_t frame_count(std::size_t len, std::size_t win, std::size_t hop) {
  return len < win ? 0 : 1 + (len - win) / hop;
}

/// Slices the clip into overlapping windowed frames (one row per frame).
inline Matrix frame_signal(const AudioClip& clip, double window_ms, double hop_ms,
                           WindowKind window = WindowKind::Hamming) {
  if (!(hop_ms > 0.0) || window_ms < hop_ms) throw Error("frame_signal requires window_ms >= hop_ms > 0");
  if (!(clip.sample_rate > 0.0)) throw Error("sample_rate must be positive");
  const std::size_t win = ms_to_samples(window_ms, clip.sample_rate);
  const std::size_t hop = ms_to_samples(hop_ms, clip.sample_rate);
  if (win == 0 || hop == 0) throw Error("window or hop shorter than one sample");
  const std::size_t count = frame_count(clip.samples.size(), win, hop);
  if (count == 0) throw Error("audio too short");
  const auto w = analysis_window(win, window);
  Matrix frames(count, win);
  for (std::size_t f = 0; f < count; ++f)
    for (std::size_t i = 0; i < win; ++i) frames(f, i) = clip.samples[f * hop + i] * w[i];
  return frames;
}

inline std::size_t next_pow2(std::size_t n) {
  std::size_t p = 1;
  while (p < n) p <<= 1;
  return p;
}

/// In-place iterative radix-2 FFT; size must be a power of two.
inline void fft_inplace(std::vector<std::complex<double>>& a) {
  const std::size_t n = a.size();
  for (std::size_t i = 1, j = 0; i < n; ++i) {
    std::size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  for (std::size_t len = 2; len <= n; len <<= 1) {
    const double ang = -2.0 * std::numbers::pi / static_cast<double>(len);
    const std::complex<double> wl(std::cos(ang), std::sin(ang));
    for (std::size_t i = 0; i < n; i += len) {
      std::complex<double> w(1.0, 0.0);
      for (std::size_t k = 0; k < len / 2; ++k) {
        const auto u = a[i + k];
        const auto v = a[i + k + len / 2] * w;
        a[i + k] = u + v;
        a[i + k + len / 2] = u - v;
        w *= wl;
      }
    }
  }
}

inline double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
inline double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

/// Triangular mel filters evenly spaced on the mel scale over [0, sr/2].
struct MelFilterbank {
  Matrix weights;                   // bands x (fft_size/2 + 1)
  std::vector<double> centers_hz;   // one per band
  std::size_t fft_size = 0;
  double sample_rate = 0.0;

  MelFilterbank(double sample_rate, std::size_t fft_size, std::size_t bands = kMelBands)
      : weights(bands, fft_size / 2 + 1), centers_hz(bands), fft_size(fft_size), sample_rate(sample_rate) {
    const double top = hz_to_mel(sample_rate / 2.0);
    std::vector<double> edges(bands + 2);
    for (std::size_t i = 0; i < edges.size(); ++i)
      edges[i] = mel_to_hz(top * static_cast<double>(i) / static_cast<double>(bands + 1));
    for (std::size_t m = 0; m < bands; ++m) {
      const double lo = edges[m], mid = edges[m + 1], hi = edges[m + 2];
      centers_hz[m] = mid;
      for (std::size_t k = 0; k < weights.cols(); ++k) {
        const double f = static_cast<double>(k) * sample_rate / static_cast<double>(fft_size);
        double w = 0.0;
        if (f > lo && f <= mid) w = (f - lo) / (mid - lo);
        else if (f > mid && f < hi) w = (hi - f) / (hi - mid);
        weights(m, k) = w;
      }
    }
  }
};

/// 40-band log-Mel features, 25 ms Hamming windows every 10 ms.
inline FeatureSequence log_mel(const AudioClip& clip, const std::string& language = {}) {
  if (clip.sample_rate != 8000.0 && clip.sample_rate != 16000.0)
    throw Error("log_mel supports 8000 or 16000 Hz audio");
  const Matrix frames = frame_signal(clip, kWindowMs, kHopMs);
  const std::size_t nfft = next_pow2(frames.cols());
  const MelFilterbank bank(clip.sample_rate, nfft);
  const std::size_t bins = nfft / 2 + 1;

  FeatureSequence out;
  out.language = language;
  out.frame_shift = kHopMs / 1000.0;
  out.frames = Matrix(frames.rows(), kMelBands);
  std::vector<std::complex<double>> buf(nfft);
  std::vector<double> power(bins);
  for (std::size_t t = 0; t < frames.rows(); ++t) {
    std::fill(buf.begin(), buf.end(), std::complex<double>{});
    for (std::size_t i = 0; i < frames.cols(); ++i) buf[i] = frames(t, i);
    fft_inplace(buf);
    for (std::size_t k = 0; k < bins; ++k) power[k] = std::norm(buf[k]);
    for (std::size_t m = 0; m < kMelBands; ++m) {
      double e = 0.0;
      for (std::size_t k = 0; k < bins; ++k) e += bank.weights(m, k) * power[k];
      out.frames(t, m) = std::log(std::max(e, kEnergyFloor));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// File formats

/// FBNK record: "FBNK", u32 T, u32 40, f64 frame_shift, then T*40 f64 values.
inline void write_fbnk(std::ostream& os, const FeatureSequence& fs) {
  if (fs.frames.cols() != kMelBands) throw ShapeError("FBNK needs 40 columns", fs.frames.rows(), fs.frames.cols(), 0, kMelBands);
  io::write_magic(os, "FBNK");
  io::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(fs.frames.rows()));
  io::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(fs.frames.cols()));
  io::write_pod<double>(os, fs.frame_shift);
  io::write_matrix_body(os, fs.frames);
}

inline FeatureSequence read_fbnk(std::istream& is) {
  io::expect_magic(is, "FBNK");
  const auto t = io::read_pod<std::uint32_t>(is);
  const auto d = io::read_pod<std::uint32_t>(is);
  if (d != kMelBands) throw FormatError("FBNK feature width must be 40");
  if (t > (1u << 24)) throw FormatError("FBNK frame count out of range");
  FeatureSequence fs;
  fs.frame_shift = io::read_pod<double>(is);
  fs.frames = io::read_matrix_body(is, t, d);
  return fs;
}

inline void save_fbnk(const std::string& path, const FeatureSequence& fs) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot open " + path + " for writing");
  write_fbnk(os, fs);
}

inline FeatureSequence load_fbnk(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open " + path);
  return read_fbnk(is);
}

/// Mono 16-bit signed PCM WAV. Samples are scaled to [-1, 1).
inline AudioClip read_wav(std::istream& is) {
  io::expect_magic(is, "RIFF");
  io::read_pod<std::uint32_t>(is);
  io::expect_magic(is, "WAVE");
  AudioClip clip;
  bool have_fmt = false;
  while (true) {
    char id[4];
    if (!is.read(id, 4)) throw FormatError("WAV has no data chunk");
    const auto size = io::read_pod<std::uint32_t>(is);
    if (std::memcmp(id, "fmt ", 4) == 0) {
      const auto format = io::read_pod<std::uint16_t>(is);
      const auto channels = io::read_pod<std::uint16_t>(is);
      const auto rate = io::read_pod<std::uint32_t>(is);
      io::read_pod<std::uint32_t>(is);
      io::read_pod<std::uint16_t>(is);
      const auto bits = io::read_pod<std::uint16_t>(is);
      if (format != 1 || channels != 1 || bits != 16)
        throw FormatError("only mono 16-bit PCM WAV is supported");
      clip.sample_rate = rate;
      is.ignore(size - 16);
      have_fmt = true;
    } else if (std::memcmp(id, "data", 4) == 0) {
      if (!have_fmt) throw FormatError("WAV data chunk before fmt chunk");
      clip.samples.resize(size / 2);
      for (double& s : clip.samples) s = io::read_pod<std::int16_t>(is) / 32768.0;
      return clip;
    } else {
      is.ignore(size + (size & 1));
    }
  }
}

inline void write_wav(std::ostream& os, const AudioClip& clip) {
  const auto n = static_cast<std::uint32_t>(clip.samples.size());
  const auto rate = static_cast<std::uint32_t>(clip.sample_rate);
  io::write_magic(os, "RIFF");
  io::write_pod<std::uint32_t>(os, 36 + 2 * n);
  io::write_magic(os, "WAVE");
  io::write_magic(os, "fmt ");
  io::write_pod<std::uint32_t>(os, 16);
  io::write_pod<std::uint16_t>(os, 1);
  io::write_pod<std::uint16_t>(os, 1);
  io::write_pod<std::uint32_t>(os, rate);
  io::write_pod<std::uint32_t>(os, rate * 2);
  io::write_pod<std::uint16_t>(os, 2);
  io::write_pod<std::uint16_t>(os, 16);
  io::write_magic(os, "data");
  io::write_pod<std::uint32_t>(os, 2 * n);
  for (double s : clip.samples) {
    const double c = std::clamp(s, -1.0, 32767.0 / 32768.0);
    io::write_pod<std::int16_t>(os, static_cast<std::int16_t>(std::lround(c * 32768.0)));
  }
}

}  // namespace aanet
