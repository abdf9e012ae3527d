#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "dynser/common.hpp"

namespace dynser {

// Mono audio in [-1, 1] nominal range.
struct AudioClip {
  std::vector<double> samples;
  int sample_rate = 0;

  double seconds() const {
    return static_cast<double>(samples.size()) / sample_rate;
  }
};

namespace wav_detail {

inline std::uint32_t read_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) |
         (static_cast<std::uint32_t>(p[3]) << 24);
}

inline std::uint16_t read_u16(const unsigned char* p) {
  return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}

inline const char* format_name(std::uint16_t tag) {
  switch (tag) {
    case 1: return "PCM";
    case 3: return "IEEE float";
    case 6: return "A-law";
    case 7: return "mu-law";
    case 0xFFFE: return "extensible";
    default: return "unknown";
  }
}

}  // namespace wav_detail

// Reads a RIFF/WAVE file. Only 16-bit PCM is accepted; multichannel input is
// downmixed to mono by averaging. Sample values are scaled by 1/32768.
inline AudioClip read_wav(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("read_wav: cannot open " + path);
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
  if (bytes.size() < 12 || std::memcmp(bytes.data(), "RIFF", 4) != 0 ||
      std::memcmp(bytes.data() + 8, "WAVE", 4) != 0) {
    throw UnsupportedFormatError("read_wav: " + path + " is not a RIFF/WAVE file");
  }

  std::uint16_t format = 0, channels = 0, bits = 0;
  std::uint32_t rate = 0;
  const unsigned char* data = nullptr;
  std::uint32_t data_len = 0;
  bool have_fmt = false;

  std::size_t pos = 12;
  while (pos + 8 <= bytes.size()) {
    const char* id = reinterpret_cast<const char*>(bytes.data() + pos);
    const std::uint32_t len = wav_detail::read_u32(bytes.data() + pos + 4);
    const std::size_t body = pos + 8;
    if (body + len > bytes.size()) {
      throw UnsupportedFormatError("read_wav: truncated chunk in " + path);
    }
    if (std::memcmp(id, "fmt ", 4) == 0) {
      if (len < 16) throw UnsupportedFormatError("read_wav: malformed fmt chunk");
      format = wav_detail::read_u16(bytes.data() + body);
      channels = wav_detail::read_u16(bytes.data() + body + 2);
      rate = wav_detail::read_u32(bytes.data() + body + 4);
      bits = wav_detail::read_u16(bytes.data() + body + 14);
      have_fmt = true;
    } else if (std::memcmp(id, "data", 4) == 0) {
      data = bytes.data() + body;
      data_len = len;
    }
    pos = body + len + (len & 1);  // chunks are word-aligned
  }

  if (!have_fmt || data == nullptr) {
    throw UnsupportedFormatError("read_wav: missing fmt or data chunk in " + path);
  }
  if (format != 1) {
    throw UnsupportedFormatError(
        std::string("read_wav: unsupported encoding ") +
        wav_detail::format_name(format) + " (" + std::to_string(format) +
        "); only 16-bit PCM is supported");
  }
  if (bits != 16) {
    throw UnsupportedFormatError("read_wav: unsupported bit depth " +
                                 std::to_string(bits) +
                                 "; only 16-bit PCM is supported");
  }
  if (channels == 0 || rate == 0) {
    throw UnsupportedFormatError("read_wav: malformed fmt chunk");
  }

  const std::size_t frame_bytes = 2u * channels;
  const std::size_t frames = data_len / frame_bytes;
  if (frames == 0) throw DataError("read_wav: no samples in " + path);

  AudioClip clip;
  clip.sample_rate = static_cast<int>(rate);
  clip.samples.resize(frames);
  for (std::size_t f = 0; f < frames; ++f) {
    double acc = 0.0;
    for (std::uint16_t c = 0; c < channels; ++c) {
      const unsigned char* p = data + f * frame_bytes + 2u * c;
      const std::int16_t v = static_cast<std::int16_t>(p[0] | (p[1] << 8));
      acc += static_cast<double>(v);
    }
    clip.samples[f] = acc / (32768.0 * channels);
  }
  return clip;
}

// Writes interleaved 16-bit PCM. Values are clamped to [-1, 1] and quantized
// with round-to-nearest so that read_wav(write_wav(x)) round-trips exactly
// for values already on the 1/32768 grid.
inline void write_wav(const std::string& path,
                      const std::vector<std::vector<double>>& channels,
                      int sample_rate) {
  if (channels.empty() || channels[0].empty()) {
    throw ParameterError("write_wav: no samples");
  }
  const std::size_t frames = channels[0].size();
  for (const auto& ch : channels) {
    if (ch.size() != frames) {
      throw ParameterError("write_wav: channel length mismatch");
    }
  }
  const std::uint16_t nch = static_cast<std::uint16_t>(channels.size());
  const std::uint32_t data_len = static_cast<std::uint32_t>(frames * 2u * nch);

  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("write_wav: cannot open " + path);

  auto put_u32 = [&](std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v & 0xFF),
                          static_cast<unsigned char>((v >> 8) & 0xFF),
                          static_cast<unsigned char>((v >> 16) & 0xFF),
                          static_cast<unsigned char>((v >> 24) & 0xFF)};
    out.write(reinterpret_cast<char*>(b), 4);
  };
  auto put_u16 = [&](std::uint16_t v) {
    unsigned char b[2] = {static_cast<unsigned char>(v & 0xFF),
                          static_cast<unsigned char>((v >> 8) & 0xFF)};
    out.write(reinterpret_cast<char*>(b), 2);
  };

  out.write("RIFF", 4);
  put_u32(36 + data_len);
  out.write("WAVE", 4);
  out.write("fmt ", 4);
  put_u32(16);
  put_u16(1);  // PCM
  put_u16(nch);
  put_u32(static_cast<std::uint32_t>(sample_rate));
  put_u32(static_cast<std::uint32_t>(sample_rate) * 2u * nch);
  put_u16(static_cast<std::uint16_t>(2u * nch));
  put_u16(16);
  out.write("data", 4);
  put_u32(data_len);
  for (std::size_t f = 0; f < frames; ++f) {
    for (std::uint16_t c = 0; c < nch; ++c) {
      double v = channels[c][f] * 32768.0;
      v = std::max(-32768.0, std::min(32767.0, v));
      const std::int16_t q = static_cast<std::int16_t>(std::lrint(v));
      put_u16(static_cast<std::uint16_t>(q));
    }
  }
  if (!out) throw IoError("write_wav: write failed for " + path);
}

inline void write_wav(const std::string& path, const std::vector<double>& mono,
                      int sample_rate) {
  write_wav(path, std::vector<std::vector<double>>{mono}, sample_rate);
}

// Linear-interpolation resampling. Output length is round(len * target/source)
// and the clip is returned unchanged when the rates already match.
inline AudioClip resample(const AudioClip& clip, int target_hz) {
  if (target_hz <= 0) throw ParameterError("resample: target rate must be > 0");
  if (clip.samples.empty()) throw ParameterError("resample: empty clip");
  if (clip.sample_rate == target_hz) return clip;

  const double ratio = static_cast<double>(clip.sample_rate) / target_hz;
  const std::int64_t out_len = std::llround(
      static_cast<double>(clip.samples.size()) * target_hz / clip.sample_rate);
  AudioClip out;
  out.sample_rate = target_hz;
  out.samples.resize(std::max<std::int64_t>(out_len, 1));
  const std::int64_t last = static_cast<std::int64_t>(clip.samples.size()) - 1;
  for (std::int64_t i = 0; i < static_cast<std::int64_t>(out.samples.size()); ++i) {
    const double pos = i * ratio;
    const std::int64_t i0 = std::min<std::int64_t>(
        static_cast<std::int64_t>(pos), last);
    const std::int64_t i1 = std::min<std::int64_t>(i0 + 1, last);
    const double frac = pos - static_cast<double>(i0);
    out.samples[i] =
        clip.samples[i0] + frac * (clip.samples[i1] - clip.samples[i0]);
  }
  return out;
}

// Extends a short segment to target_len by tiling it end-to-end (truncating
// when it is already long enough). The output always starts with the
// original samples.
inline std::vector<double> mirror_pad(const std::vector<double>& samples,
                                      std::int64_t target_len) {
  if (samples.empty()) throw ParameterError("mirror_pad: empty input");
  if (target_len < 1) throw ParameterError("mirror_pad: target length must be >= 1");
  std::vector<double> out(target_len);
  const std::int64_t n = static_cast<std::int64_t>(samples.size());
  for (std::int64_t i = 0; i < target_len; ++i) {
    out[i] = samples[i % n];
  }
  return out;
}

}  // namespace dynser
