#pragma once

#include <complex>
#include <cstdint>
#include <string>
#include <vector>

#include "dynser/audio.hpp"
#include "dynser/common.hpp"

namespace dynser {

struct MfccConfig {
  int sample_rate_hz = 16000;
  double clip_seconds = 5.0;
  std::int64_t frame_length = 400;  // 25 ms at 16 kHz
  std::int64_t hop_length = 160;    // 10 ms
  std::int64_t fft_size = 512;
  std::int64_t n_mels = 64;
  std::int64_t n_mfcc = 40;
  double fmin_hz = 0.0;
  double fmax_hz = 8000.0;
  double log_floor = 1e-10;

  std::int64_t clip_samples() const {
    return std::llround(clip_seconds * sample_rate_hz);
  }

  void validate() const {
    if (sample_rate_hz <= 0) throw ParameterError("mfcc: sample rate must be > 0");
    if (clip_seconds <= 0.0) throw ParameterError("mfcc: clip_seconds must be > 0");
    if (hop_length < 1) throw ParameterError("mfcc: hop_length must be >= 1");
    if (frame_length < 2 || frame_length > fft_size) {
      throw ParameterError("mfcc: need 2 <= frame_length <= fft_size");
    }
    if ((fft_size & (fft_size - 1)) != 0) {
      throw ParameterError("mfcc: fft_size must be a power of two");
    }
    if (n_mfcc < 1 || n_mfcc > n_mels) {
      throw ParameterError("mfcc: need 1 <= n_mfcc <= n_mels");
    }
    if (fmin_hz < 0.0 || fmax_hz <= fmin_hz ||
        fmax_hz > sample_rate_hz / 2.0 + 1e-9) {
      throw ParameterError("mfcc: need 0 <= fmin < fmax <= sample_rate/2");
    }
    if (log_floor <= 0.0) throw ParameterError("mfcc: log_floor must be > 0");
  }
};

// frames x n_mfcc feature matrix, row-major.
struct MfccMatrix {
  std::vector<double> values;
  std::int64_t frames = 0;
  std::int64_t coeffs = 0;
  MfccConfig config;

  double at(std::int64_t frame, std::int64_t coeff) const {
    return values[frame * coeffs + coeff];
  }
};

inline double hz_to_mel(double hz) {
  return 2595.0 * std::log10(1.0 + hz / 700.0);
}

inline double mel_to_hz(double mel) {
  return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0);
}

// Symmetric Hann window: w[0] = w[N-1] = 0.
inline std::vector<double> hann_window(std::int64_t n) {
  std::vector<double> w(n);
  for (std::int64_t i = 0; i < n; ++i) {
    w[i] = 0.5 * (1.0 - std::cos(2.0 * kPi * i / (n - 1)));
  }
  return w;
}

// Hann-windowed frames at hop_length offsets; the caller is responsible for
// padding the clip to at least one frame.
inline std::vector<std::vector<double>> frame_and_window(
    const std::vector<double>& samples, const MfccConfig& config) {
  config.validate();
  const std::int64_t n = static_cast<std::int64_t>(samples.size());
  if (n < config.frame_length) {
    throw ProtocolError("frame_and_window: clip shorter than one frame; "
                        "mirror_pad it first");
  }
  const std::int64_t count = 1 + (n - config.frame_length) / config.hop_length;
  const std::vector<double> window = hann_window(config.frame_length);
  std::vector<std::vector<double>> frames(count);
  for (std::int64_t f = 0; f < count; ++f) {
    const std::int64_t off = f * config.hop_length;
    frames[f].resize(config.frame_length);
    for (std::int64_t i = 0; i < config.frame_length; ++i) {
      frames[f][i] = samples[off + i] * window[i];
    }
  }
  return frames;
}

namespace dsp_detail {

inline void fft_radix2(std::vector<std::complex<double>>& a) {
  const std::size_t n = a.size();
  for (std::size_t i = 1, j = 0; i < n; ++i) {
    std::size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  for (std::size_t len = 2; len <= n; len <<= 1) {
    const double ang = -2.0 * kPi / static_cast<double>(len);
    const std::complex<double> wlen(std::cos(ang), std::sin(ang));
    for (std::size_t i = 0; i < n; i += len) {
      std::complex<double> w(1.0, 0.0);
      for (std::size_t j = 0; j < len / 2; ++j) {
        const std::complex<double> u = a[i + j];
        const std::complex<double> v = a[i + j + len / 2] * w;
        a[i + j] = u + v;
        a[i + j + len / 2] = u - v;
        w *= wlen;
      }
    }
  }
}

}  // namespace dsp_detail

// One-sided |DFT|^2 of the zero-padded frame: fft_size/2 + 1 bins.
inline std::vector<double> power_spectrum(const std::vector<double>& frame,
                                          std::int64_t fft_size) {
  if (fft_size < 2 || (fft_size & (fft_size - 1)) != 0) {
    throw ParameterError("power_spectrum: fft_size must be a power of two >= 2");
  }
  if (static_cast<std::int64_t>(frame.size()) > fft_size) {
    throw ParameterError("power_spectrum: frame longer than fft_size");
  }
  std::vector<std::complex<double>> buf(fft_size, {0.0, 0.0});
  for (std::size_t i = 0; i < frame.size(); ++i) buf[i] = {frame[i], 0.0};
  dsp_detail::fft_radix2(buf);
  std::vector<double> p(fft_size / 2 + 1);
  for (std::int64_t k = 0; k <= fft_size / 2; ++k) p[k] = std::norm(buf[k]);
  return p;
}

// Triangular filters with centers uniformly spaced on the mel scale between
// fmin and fmax, evaluated at the FFT bin frequencies. Row-major
// n_mels x (fft_size/2 + 1).
inline std::vector<double> mel_filterbank(const MfccConfig& config) {
  config.validate();
  const std::int64_t bins = config.fft_size / 2 + 1;
  const double mel_lo = hz_to_mel(config.fmin_hz);
  const double mel_hi = hz_to_mel(config.fmax_hz);
  std::vector<double> edges(config.n_mels + 2);
  for (std::int64_t m = 0; m < config.n_mels + 2; ++m) {
    edges[m] = mel_to_hz(mel_lo + (mel_hi - mel_lo) * m / (config.n_mels + 1));
  }
  std::vector<double> bank(config.n_mels * bins, 0.0);
  const double bin_hz =
      static_cast<double>(config.sample_rate_hz) / config.fft_size;
  for (std::int64_t m = 0; m < config.n_mels; ++m) {
    const double lo = edges[m], center = edges[m + 1], hi = edges[m + 2];
    bool supported = false;
    for (std::int64_t k = 0; k < bins; ++k) {
      const double f = k * bin_hz;
      double w = 0.0;
      if (f > lo && f <= center) {
        w = (f - lo) / (center - lo);
      } else if (f > center && f < hi) {
        w = (hi - f) / (hi - center);
      }
      if (w > 0.0) supported = true;
      bank[m * bins + k] = w;
    }
    if (!supported) {
      throw ParameterError("mel_filterbank: filter " + std::to_string(m) +
                           " has no spectral support; lower n_mels or raise "
                           "fft_size");
    }
  }
  return bank;
}

// Orthonormal DCT-II matrix, n_out x n rows kept.
inline std::vector<double> dct_ii_orthonormal(std::int64_t n,
                                              std::int64_t n_out) {
  std::vector<double> m(n_out * n);
  const double s0 = std::sqrt(1.0 / n);
  const double s = std::sqrt(2.0 / n);
  for (std::int64_t k = 0; k < n_out; ++k) {
    for (std::int64_t i = 0; i < n; ++i) {
      m[k * n + i] = (k == 0 ? s0 : s) *
                     std::cos(kPi * (2.0 * i + 1.0) * k / (2.0 * n));
    }
  }
  return m;
}

// Full pipeline: mirror_pad to clip_seconds, Hann framing, one-sided power
// spectrum, mel filtering, floored log, orthonormal DCT-II keeping the first
// n_mfcc coefficients. The clip must already be at the configured rate.
inline MfccMatrix mfcc(const AudioClip& clip, const MfccConfig& config) {
  config.validate();
  if (clip.sample_rate != config.sample_rate_hz) {
    throw ProtocolError("mfcc: clip is at " + std::to_string(clip.sample_rate) +
                        " Hz, config expects " +
                        std::to_string(config.sample_rate_hz) +
                        " Hz; resample first");
  }
  const std::vector<double> padded =
      mirror_pad(clip.samples, config.clip_samples());
  const auto frames = frame_and_window(padded, config);
  const std::vector<double> bank = mel_filterbank(config);
  const std::vector<double> dct =
      dct_ii_orthonormal(config.n_mels, config.n_mfcc);
  const std::int64_t bins = config.fft_size / 2 + 1;

  MfccMatrix out;
  out.frames = static_cast<std::int64_t>(frames.size());
  out.coeffs = config.n_mfcc;
  out.config = config;
  out.values.resize(out.frames * out.coeffs);

  std::vector<double> logmel(config.n_mels);
  for (std::int64_t f = 0; f < out.frames; ++f) {
    const std::vector<double> p = power_spectrum(frames[f], config.fft_size);
    for (std::int64_t m = 0; m < config.n_mels; ++m) {
      double e = 0.0;
      const double* row = bank.data() + m * bins;
      for (std::int64_t k = 0; k < bins; ++k) e += row[k] * p[k];
      logmel[m] = std::log(std::max(e, config.log_floor));
    }
    for (std::int64_t c = 0; c < config.n_mfcc; ++c) {
      double acc = 0.0;
      const double* row = dct.data() + c * config.n_mels;
      for (std::int64_t m = 0; m < config.n_mels; ++m) acc += row[m] * logmel[m];
      out.values[f * out.coeffs + c] = acc;
    }
  }
  for (double v : out.values) {
    if (!std::isfinite(v)) throw NumericError("mfcc: non-finite coefficient");
  }
  return out;
}

}  // namespace dynser
