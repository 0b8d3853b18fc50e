#pragma once

#include <complex>
#include <cstddef>
#include <span>
#include <vector>

#include "bfsep/audio.hpp"

namespace bfsep {

enum class WindowKind { kHann };
enum class PadMode { kReflect };

struct StftConfig {
  std::size_t frame_size = 1024;
  std::size_t shift = 256;
  WindowKind window = WindowKind::kHann;
  PadMode pad_mode = PadMode::kReflect;

  std::size_t num_bins() const { return frame_size / 2 + 1; }
  // Reflect padding in front of the signal: (frame_size - shift) / 2.
  std::size_t left_pad() const { return (frame_size - shift) / 2; }
  std::size_t num_frames(std::size_t length) const { return (length + shift - 1) / shift; }
  // Power-of-two frame, 0 < shift <= frame_size / 2.
  void validate() const;
  // Periodic Hann window of frame_size taps.
  std::vector<double> analysis_window() const;

  bool operator==(const StftConfig&) const = default;
};

struct RealMatrix {
  std::size_t rows = 0, cols = 0;
  std::vector<double> data;

  RealMatrix() = default;
  RealMatrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0) {}
  double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
};

// Complex STFT laid out as (frame t, bin f, channel m), channel fastest.
struct Spectrogram {
  StftConfig config;
  std::size_t num_frames = 0, num_bins = 0, num_channels = 0;
  std::size_t original_length = 0;
  int sample_rate = 0;
  std::vector<std::complex<double>> data;

  Spectrogram() = default;
  Spectrogram(const StftConfig& cfg, std::size_t frames, std::size_t channels,
              std::size_t length);

  std::complex<double>& at(std::size_t t, std::size_t f, std::size_t m) {
    return data[(t * num_bins + f) * num_channels + m];
  }
  const std::complex<double>& at(std::size_t t, std::size_t f, std::size_t m) const {
    return data[(t * num_bins + f) * num_channels + m];
  }
  // Copy of one channel as a contiguous (t, f) block.
  std::vector<std::complex<double>> channel(std::size_t m) const;
  void set_channel(std::size_t m, std::span<const std::complex<double>> tf);
};

Spectrogram stft(const MultichannelWaveform& wave, const StftConfig& config);
Spectrogram stft(const Waveform& wave, const StftConfig& config);

MultichannelWaveform istft(const Spectrogram& spec, std::size_t target_length);

// ln(1 + |Y(t, f, r)|) as a (frames x bins) matrix.
RealMatrix log_feature(const Spectrogram& spec, std::size_t channel);

// Single-channel building blocks over (t, f) blocks; used by the
// differentiable iSTFT node.
void stft_channel(const StftConfig& config, std::span<const double> x,
                  std::span<std::complex<double>> out);
void istft_channel(const StftConfig& config, std::span<const std::complex<double>> tf,
                   std::size_t num_frames, std::span<double> out);
// Adjoint of istft_channel with respect to the real and imaginary parts of tf.
void istft_channel_adjoint(const StftConfig& config, std::span<const double> grad_out,
                           std::size_t num_frames, std::span<double> grad_re,
                           std::span<double> grad_im);

}  // namespace bfsep
