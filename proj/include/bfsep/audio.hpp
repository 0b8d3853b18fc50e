#pragma once

#include <cstddef>
#include <filesystem>
#include <vector>

namespace bfsep {

struct Waveform {
  std::vector<double> samples;
  int sample_rate = 16000;

  std::size_t size() const { return samples.size(); }
  // Throws ValidationError on NaN/Inf samples or a non-positive rate.
  void validate() const;
};

// All channels share length and sample rate.
struct MultichannelWaveform {
  std::vector<Waveform> channels;

  std::size_t num_channels() const { return channels.size(); }
  std::size_t length() const { return channels.empty() ? 0 : channels.front().size(); }
  int sample_rate() const { return channels.empty() ? 0 : channels.front().sample_rate; }
  void validate() const;

  static MultichannelWaveform zeros(std::size_t num_channels, std::size_t length,
                                    int sample_rate);
};

enum class WavEncoding { kPcm16, kFloat32 };

// RIFF/WAVE reader: PCM 8/16/24/32-bit and IEEE float32/64, including
// WAVE_FORMAT_EXTENSIBLE headers. Integer PCM is normalised to [-1, 1).
MultichannelWaveform read_wav(const std::filesystem::path& path);

void write_wav(const std::filesystem::path& path, const MultichannelWaveform& wave,
               WavEncoding encoding = WavEncoding::kFloat32);
void write_wav(const std::filesystem::path& path, const Waveform& wave,
               WavEncoding encoding = WavEncoding::kFloat32);

}  // namespace bfsep
