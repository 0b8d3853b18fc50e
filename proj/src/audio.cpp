#include "bfsep/audio.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>

#include "bfsep/errors.hpp"

namespace bfsep {

static_assert(std::endian::native == std::endian::little,
              "WAV I/O assumes a little-endian host");

void Waveform::validate() const {
  if (sample_rate <= 0)
    throw ValidationError("waveform sample rate must be positive, got " +
                          std::to_string(sample_rate));
  for (std::size_t i = 0; i < samples.size(); ++i)
    if (!std::isfinite(samples[i]))
      throw ValidationError("waveform sample " + std::to_string(i) + " is not finite");
}

void MultichannelWaveform::validate() const {
  if (channels.empty()) throw ValidationError("multichannel waveform has no channels");
  for (const auto& ch : channels) {
    ch.validate();
    if (ch.size() != length())
      throw ValidationError("channel lengths differ: " + std::to_string(ch.size()) +
                            " vs " + std::to_string(length()));
    if (ch.sample_rate != sample_rate())
      throw ValidationError("channel sample rates differ");
  }
}

MultichannelWaveform MultichannelWaveform::zeros(std::size_t num_channels,
                                                 std::size_t length, int sample_rate) {
  MultichannelWaveform w;
  w.channels.assign(num_channels, Waveform{std::vector<double>(length, 0.0), sample_rate});
  return w;
}

namespace {

constexpr std::uint16_t kFormatPcm = 1;
constexpr std::uint16_t kFormatFloat = 3;
constexpr std::uint16_t kFormatExtensible = 0xFFFE;

template <typename T>
T load(const char* p) {
  T v;
  std::memcpy(&v, p, sizeof(T));
  return v;
}

template <typename T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

}  // namespace

MultichannelWaveform read_wav(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open WAV file: " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() < 12 || bytes.compare(0, 4, "RIFF") != 0 || bytes.compare(8, 4, "WAVE") != 0)
    throw ValidationError("not a RIFF/WAVE file: " + path.string());

  std::uint16_t format = 0, channels = 0, bits = 0;
  std::uint32_t rate = 0;
  const char* data = nullptr;
  std::size_t data_len = 0;

  std::size_t pos = 12;
  while (pos + 8 <= bytes.size()) {
    const std::string id = bytes.substr(pos, 4);
    const auto len = load<std::uint32_t>(bytes.data() + pos + 4);
    const std::size_t body = pos + 8;
    const std::size_t avail = std::min<std::size_t>(len, bytes.size() - body);
    if (id == "fmt ") {
      if (avail < 16) throw ValidationError("truncated fmt chunk: " + path.string());
      format = load<std::uint16_t>(bytes.data() + body);
      channels = load<std::uint16_t>(bytes.data() + body + 2);
      rate = load<std::uint32_t>(bytes.data() + body + 4);
      bits = load<std::uint16_t>(bytes.data() + body + 14);
      if (format == kFormatExtensible && avail >= 26)
        format = load<std::uint16_t>(bytes.data() + body + 24);
    } else if (id == "data") {
      data = bytes.data() + body;
      data_len = avail;
    }
    pos = body + len + (len & 1U);
  }
  if (channels == 0 || rate == 0) throw ValidationError("missing fmt chunk: " + path.string());
  if (data == nullptr) throw ValidationError("missing data chunk: " + path.string());

  const bool supported = (format == kFormatPcm && (bits == 8 || bits == 16 || bits == 24 || bits == 32)) ||
                         (format == kFormatFloat && (bits == 32 || bits == 64));
  if (!supported)
    throw ValidationError("unsupported WAV encoding (format " + std::to_string(format) +
                          ", " + std::to_string(bits) + " bits): " + path.string());

  const std::size_t width = bits / 8;
  const std::size_t frames = data_len / (width * channels);
  auto wave = MultichannelWaveform::zeros(channels, frames, static_cast<int>(rate));
  for (std::size_t t = 0; t < frames; ++t) {
    for (std::size_t c = 0; c < channels; ++c) {
      const char* p = data + (t * channels + c) * width;
      double v = 0.0;
      if (format == kFormatFloat) {
        v = bits == 32 ? static_cast<double>(load<float>(p)) : load<double>(p);
      } else if (bits == 8) {
        v = (static_cast<double>(static_cast<std::uint8_t>(*p)) - 128.0) / 128.0;
      } else if (bits == 16) {
        v = load<std::int16_t>(p) / 32768.0;
      } else if (bits == 24) {
        std::int32_t s = (static_cast<std::uint8_t>(p[0])) | (static_cast<std::uint8_t>(p[1]) << 8) |
                         (static_cast<std::int8_t>(p[2]) * 65536);
        v = s / 8388608.0;
      } else {
        v = load<std::int32_t>(p) / 2147483648.0;
      }
      wave.channels[c].samples[t] = v;
    }
  }
  return wave;
}

void write_wav(const std::filesystem::path& path, const MultichannelWaveform& wave,
               WavEncoding encoding) {
  wave.validate();
  const std::uint16_t channels = static_cast<std::uint16_t>(wave.num_channels());
  const std::uint16_t bits = encoding == WavEncoding::kPcm16 ? 16 : 32;
  const std::uint16_t format = encoding == WavEncoding::kPcm16 ? kFormatPcm : kFormatFloat;
  const auto rate = static_cast<std::uint32_t>(wave.sample_rate());
  const std::size_t frames = wave.length();
  const auto data_len = static_cast<std::uint32_t>(frames * channels * (bits / 8));

  std::string out;
  out.reserve(44 + data_len);
  out += "RIFF";
  put<std::uint32_t>(out, 36 + data_len);
  out += "WAVEfmt ";
  put<std::uint32_t>(out, 16);
  put<std::uint16_t>(out, format);
  put<std::uint16_t>(out, channels);
  put<std::uint32_t>(out, rate);
  put<std::uint32_t>(out, rate * channels * (bits / 8));
  put<std::uint16_t>(out, static_cast<std::uint16_t>(channels * (bits / 8)));
  put<std::uint16_t>(out, bits);
  out += "data";
  put<std::uint32_t>(out, data_len);
  for (std::size_t t = 0; t < frames; ++t) {
    for (std::size_t c = 0; c < channels; ++c) {
      const double v = wave.channels[c].samples[t];
      if (encoding == WavEncoding::kFloat32) {
        put<float>(out, static_cast<float>(v));
      } else {
        const double scaled = std::clamp(std::round(v * 32768.0), -32768.0, 32767.0);
        put<std::int16_t>(out, static_cast<std::int16_t>(scaled));
      }
    }
  }

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw ValidationError("cannot write WAV file: " + path.string());
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
}

void write_wav(const std::filesystem::path& path, const Waveform& wave, WavEncoding encoding) {
  MultichannelWaveform m;
  m.channels.push_back(wave);
  write_wav(path, m, encoding);
}

}  // namespace bfsep
