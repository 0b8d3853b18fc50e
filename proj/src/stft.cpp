#include "bfsep/stft.hpp"

#include <cmath>
#include <numbers>
#include <string>

#include "bfsep/errors.hpp"
#include "bfsep/fft.hpp"

namespace bfsep {

void StftConfig::validate() const {
  if (frame_size < 2 || (frame_size & (frame_size - 1)) != 0)
    throw ValidationError("STFT frame size must be a power of two >= 2, got " +
                          std::to_string(frame_size));
  if (shift == 0 || 2 * shift > frame_size)
    throw ValidationError("STFT shift must satisfy 0 < shift <= frame_size / 2, got " +
                          std::to_string(shift));
}

std::vector<double> StftConfig::analysis_window() const {
  std::vector<double> w(frame_size);
  const double n = static_cast<double>(frame_size);
  for (std::size_t k = 0; k < frame_size; ++k)
    w[k] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * static_cast<double>(k) / n);
  return w;
}

Spectrogram::Spectrogram(const StftConfig& cfg, std::size_t frames, std::size_t channels,
                         std::size_t length)
    : config(cfg),
      num_frames(frames),
      num_bins(cfg.num_bins()),
      num_channels(channels),
      original_length(length),
      data(frames * cfg.num_bins() * channels) {}

std::vector<std::complex<double>> Spectrogram::channel(std::size_t m) const {
  std::vector<std::complex<double>> out(num_frames * num_bins);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = data[i * num_channels + m];
  return out;
}

void Spectrogram::set_channel(std::size_t m, std::span<const std::complex<double>> tf) {
  if (tf.size() != num_frames * num_bins) throw ShapeError("set_channel: wrong block size");
  for (std::size_t i = 0; i < tf.size(); ++i) data[i * num_channels + m] = tf[i];
}

namespace {

// Mirror index into [0, n) without repeating the edge sample.
std::size_t reflect_index(std::ptrdiff_t j, std::size_t n) {
  if (n == 1) return 0;
  const auto period = static_cast<std::ptrdiff_t>(2 * (n - 1));
  j %= period;
  if (j < 0) j += period;
  if (j >= static_cast<std::ptrdiff_t>(n)) j = period - j;
  return static_cast<std::size_t>(j);
}

std::size_t padded_length(const StftConfig& c, std::size_t frames) {
  return (frames - 1) * c.shift + c.frame_size;
}

// Sum of squared windows at every padded position.
std::vector<double> window_power(const StftConfig& c, const std::vector<double>& w,
                                 std::size_t frames) {
  std::vector<double> acc(padded_length(c, frames), 0.0);
  for (std::size_t t = 0; t < frames; ++t)
    for (std::size_t k = 0; k < c.frame_size; ++k) acc[t * c.shift + k] += w[k] * w[k];
  return acc;
}

}  // namespace

void stft_channel(const StftConfig& config, std::span<const double> x,
                  std::span<std::complex<double>> out) {
  const std::size_t frames = config.num_frames(x.size());
  const std::size_t bins = config.num_bins();
  if (out.size() != frames * bins) throw ShapeError("stft_channel: output block size mismatch");
  const std::vector<double> w = config.analysis_window();
  const RealFft fft(config.frame_size);
  const auto left = static_cast<std::ptrdiff_t>(config.left_pad());
  const auto nframes = static_cast<std::ptrdiff_t>(frames);

#pragma omp parallel for schedule(static) if (frames > 16)
  for (std::ptrdiff_t tt = 0; tt < nframes; ++tt) {
    std::vector<double> buf(config.frame_size);
    const std::ptrdiff_t start = tt * static_cast<std::ptrdiff_t>(config.shift) - left;
    for (std::size_t k = 0; k < config.frame_size; ++k)
      buf[k] = w[k] * x[reflect_index(start + static_cast<std::ptrdiff_t>(k), x.size())];
    fft.forward(buf, out.subspan(static_cast<std::size_t>(tt) * bins, bins));
  }
}

void istft_channel(const StftConfig& config, std::span<const std::complex<double>> tf,
                   std::size_t num_frames, std::span<double> out) {
  const std::size_t bins = config.num_bins();
  const std::size_t n = config.frame_size;
  if (tf.size() != num_frames * bins) throw ShapeError("istft_channel: bin count does not match config");
  if (out.size() > num_frames * config.shift)
    throw ValidationError("istft: target length " + std::to_string(out.size()) +
                          " exceeds reconstructable length " +
                          std::to_string(num_frames * config.shift));
  const std::vector<double> w = config.analysis_window();
  const std::vector<double> wsum = window_power(config, w, num_frames);
  const RealFft fft(n);

  std::vector<double> frames(num_frames * n);
  const auto nframes = static_cast<std::ptrdiff_t>(num_frames);
#pragma omp parallel for schedule(static) if (num_frames > 16)
  for (std::ptrdiff_t tt = 0; tt < nframes; ++tt) {
    const auto t = static_cast<std::size_t>(tt);
    auto frame = std::span<double>(frames).subspan(t * n, n);
    fft.inverse(tf.subspan(t * bins, bins), frame);
    for (std::size_t k = 0; k < n; ++k) frame[k] *= w[k];
  }

  std::vector<double> acc(padded_length(config, num_frames), 0.0);
  for (std::size_t t = 0; t < num_frames; ++t)
    for (std::size_t k = 0; k < n; ++k) acc[t * config.shift + k] += frames[t * n + k];

  const std::size_t left = config.left_pad();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = acc[left + i] / wsum[left + i];
}

void istft_channel_adjoint(const StftConfig& config, std::span<const double> grad_out,
                           std::size_t num_frames, std::span<double> grad_re,
                           std::span<double> grad_im) {
  const std::size_t bins = config.num_bins();
  const std::size_t n = config.frame_size;
  if (grad_re.size() != num_frames * bins || grad_im.size() != num_frames * bins)
    throw ShapeError("istft_channel_adjoint: gradient block size mismatch");
  const std::vector<double> w = config.analysis_window();
  const std::vector<double> wsum = window_power(config, w, num_frames);
  const RealFft fft(n);

  std::vector<double> gacc(padded_length(config, num_frames), 0.0);
  const std::size_t left = config.left_pad();
  for (std::size_t i = 0; i < grad_out.size(); ++i) gacc[left + i] = grad_out[i] / wsum[left + i];

  const double inv_n = 1.0 / static_cast<double>(n);
  const auto nframes = static_cast<std::ptrdiff_t>(num_frames);
#pragma omp parallel for schedule(static) if (num_frames > 16)
  for (std::ptrdiff_t tt = 0; tt < nframes; ++tt) {
    const auto t = static_cast<std::size_t>(tt);
    std::vector<double> gf(n);
    std::vector<std::complex<double>> spec(bins);
    for (std::size_t k = 0; k < n; ++k) gf[k] = w[k] * gacc[t * config.shift + k];
    fft.forward(gf, spec);
    for (std::size_t f = 0; f < bins; ++f) {
      const bool edge = f == 0 || f == bins - 1;
      const double c = (edge ? 1.0 : 2.0) * inv_n;
      grad_re[t * bins + f] = c * spec[f].real();
      grad_im[t * bins + f] = edge ? 0.0 : c * spec[f].imag();
    }
  }
}

Spectrogram stft(const MultichannelWaveform& wave, const StftConfig& config) {
  config.validate();
  wave.validate();
  if (wave.length() < config.shift)
    throw ValidationError("stft: signal of " + std::to_string(wave.length()) +
                          " samples is shorter than one shift (" + std::to_string(config.shift) + ")");
  const std::size_t frames = config.num_frames(wave.length());
  Spectrogram spec(config, frames, wave.num_channels(), wave.length());
  spec.sample_rate = wave.sample_rate();
  std::vector<std::complex<double>> block(frames * spec.num_bins);
  for (std::size_t m = 0; m < wave.num_channels(); ++m) {
    stft_channel(config, wave.channels[m].samples, block);
    spec.set_channel(m, block);
  }
  return spec;
}

Spectrogram stft(const Waveform& wave, const StftConfig& config) {
  MultichannelWaveform m;
  m.channels.push_back(wave);
  return stft(m, config);
}

MultichannelWaveform istft(const Spectrogram& spec, std::size_t target_length) {
  spec.config.validate();
  if (spec.num_bins != spec.config.num_bins())
    throw ShapeError("istft: spectrogram has " + std::to_string(spec.num_bins) +
                     " bins but config implies " + std::to_string(spec.config.num_bins()));
  auto out = MultichannelWaveform::zeros(spec.num_channels, target_length, spec.sample_rate);
  for (std::size_t m = 0; m < spec.num_channels; ++m)
    istft_channel(spec.config, spec.channel(m), spec.num_frames, out.channels[m].samples);
  return out;
}

RealMatrix log_feature(const Spectrogram& spec, std::size_t channel) {
  if (channel >= spec.num_channels)
    throw ValidationError("log_feature: channel " + std::to_string(channel) + " out of range (" +
                          std::to_string(spec.num_channels) + " channels)");
  RealMatrix out(spec.num_frames, spec.num_bins);
  for (std::size_t t = 0; t < spec.num_frames; ++t)
    for (std::size_t f = 0; f < spec.num_bins; ++f)
      out(t, f) = std::log1p(std::abs(spec.at(t, f, channel)));
  return out;
}

}  // namespace bfsep
