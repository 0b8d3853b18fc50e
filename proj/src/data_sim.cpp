#include "bfsep/data_sim.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <fstream>
#include <numbers>
#include <random>

#include "bfsep/errors.hpp"
#include "bfsep/fft.hpp"

namespace bfsep {

namespace {

constexpr double kPi = std::numbers::pi;
constexpr int kSincHalfWidth = 8;  // 17-tap fractional delay

double dist(const Vec3& a, const Vec3& b) {
  return std::hypot(a[0] - b[0], a[1] - b[1], a[2] - b[2]);
}

bool inside(const Vec3& p, const Vec3& room) {
  for (int k = 0; k < 3; ++k)
    if (!(p[k] > 0.0 && p[k] < room[k])) return false;
  return true;
}

std::string vec_str(const Vec3& p) {
  return "(" + std::to_string(p[0]) + ", " + std::to_string(p[1]) + ", " + std::to_string(p[2]) + ")";
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t hash2(std::uint64_t a, std::uint64_t b) { return splitmix64(splitmix64(a) ^ (b + 0x632be59bd9b4e019ULL)); }

double energy(std::span<const double> x) {
  double e = 0.0;
  for (double v : x) e += v * v;
  return e;
}

std::vector<double> convolve_cropped(std::span<const double> x, std::span<const double> h, std::size_t length) {
  std::vector<double> y = fft_convolve(x, h);
  y.resize(length, 0.0);
  return y;
}

// Causal second-order Butterworth high-pass (bilinear transform).
void highpass_in_place(std::vector<double>& x, double cutoff, double fs) {
  const double k = std::tan(kPi * cutoff / fs);
  const double norm = 1.0 / (1.0 + std::numbers::sqrt2 * k + k * k);
  const double b0 = norm, b1 = -2.0 * norm, b2 = norm;
  const double a1 = 2.0 * (k * k - 1.0) * norm, a2 = (1.0 - std::numbers::sqrt2 * k + k * k) * norm;
  double x1 = 0, x2 = 0, y1 = 0, y2 = 0;
  for (double& v : x) {
    const double y = b0 * v + b1 * x1 + b2 * x2 - a1 * y1 - a2 * y2;
    x2 = x1;
    x1 = v;
    y2 = y1;
    y1 = y;
    v = y;
  }
}

}  // namespace

// ---- room ----

double RoomSpec::sabine_absorption() const {
  const auto& d = dimensions;
  const double volume = d[0] * d[1] * d[2];
  const double surface = 2.0 * (d[0] * d[1] + d[0] * d[2] + d[1] * d[2]);
  return 24.0 * std::numbers::ln10 * volume / (kSpeedOfSound * surface * t60);
}

namespace {

// Visits every image of src within max_path of the origin box, passing the
// image position and its reflection count.
template <typename Fn>
void for_each_image(const RoomSpec& room, const Vec3& src, double max_path, Fn&& fn) {
  std::array<int, 3> reach{};
  for (int k = 0; k < 3; ++k) reach[k] = static_cast<int>(std::ceil(max_path / (2.0 * room.dimensions[k]))) + 1;
  for (int nx = -reach[0]; nx <= reach[0]; ++nx)
    for (int ny = -reach[1]; ny <= reach[1]; ++ny)
      for (int nz = -reach[2]; nz <= reach[2]; ++nz)
        for (int parity = 0; parity < 8; ++parity) {
          const std::array<int, 3> n{nx, ny, nz};
          const std::array<int, 3> p{parity & 1, (parity >> 1) & 1, (parity >> 2) & 1};
          Vec3 img;
          int order = 0;
          for (int k = 0; k < 3; ++k) {
            img[k] = (1 - 2 * p[k]) * src[k] + 2.0 * n[k] * room.dimensions[k];
            order += std::abs(n[k] - p[k]) + std::abs(n[k]);
          }
          if (room.max_order >= 0 && order > room.max_order) continue;
          fn(img, order);
        }
}

// Slope fit of a Schroeder curve between -5 and -35 dB; dB per bin.
double decay_slope(const std::vector<double>& edc_db) {
  double sx = 0, sy = 0, sxx = 0, sxy = 0, n = 0;
  for (std::size_t k = 0; k < edc_db.size(); ++k) {
    if (edc_db[k] > -5.0 || edc_db[k] < -35.0) continue;
    const double x = static_cast<double>(k);
    sx += x;
    sy += edc_db[k];
    sxx += x * x;
    sxy += x * edc_db[k];
    n += 1;
  }
  if (n < 2) return 0.0;
  return (n * sxy - sx * sy) / (n * sxx - sx * sx);
}

// Energy arriving at mic from the images of src, binned by reflection order
// and 1 ms of travel time: hist[order][bin] = sum 1 / d^2. The decay for a
// wall reflection coefficient beta is then sum_order beta^(2 order) hist.
double calibrate_absorption(const RoomSpec& room, const Vec3& src, const Vec3& mic) {
  const double duration = 1.5 * room.t60 + dist(src, mic) / kSpeedOfSound;
  const double max_path = duration * kSpeedOfSound;
  const auto bins = static_cast<std::size_t>(std::ceil(duration * 1000.0)) + 1;
  std::vector<std::vector<double>> hist;
  for_each_image(room, src, max_path, [&](const Vec3& img, int order) {
    const double d = dist(img, mic);
    if (d > max_path) return;
    if (hist.size() <= static_cast<std::size_t>(order)) hist.resize(order + 1, std::vector<double>(bins, 0.0));
    hist[order][static_cast<std::size_t>(d / kSpeedOfSound * 1000.0)] += 1.0 / (d * d);
  });

  const auto t60_of = [&](double alpha) {
    std::vector<double> e(bins, 0.0);
    double g = 1.0;
    for (const auto& row : hist) {
      for (std::size_t b = 0; b < bins; ++b) e[b] += g * row[b];
      g *= 1.0 - alpha;
    }
    std::vector<double> edc(bins);
    double acc = 0.0;
    for (std::size_t b = bins; b-- > 0;) edc[b] = (acc += e[b]);
    for (double& v : edc) v = 10.0 * std::log10(std::max(v, 1e-300) / acc);
    const double slope = decay_slope(edc);
    if (slope < 0.0) return -60.0 / slope / 1000.0;
    // No bins inside the fitting range: either the energy falls through it
    // within a millisecond or it never gets there.
    return edc.back() < -35.0 ? 0.0 : std::numeric_limits<double>::infinity();
  };

  double lo = 1e-4, hi = 0.9999;  // t60_of decreases with alpha
  if (t60_of(hi) > room.t60)
    throw ValidationError("t60 = " + std::to_string(room.t60) + " s is shorter than any absorption can give in a " +
                          vec_str(room.dimensions) + " m room");
  if (t60_of(lo) < room.t60) return lo;
  for (int it = 0; it < 40; ++it) {
    const double mid = 0.5 * (lo + hi);
    (t60_of(mid) > room.t60 ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

}  // namespace

double RoomSpec::wall_absorption(std::size_t source_index) const {
  if (absorption >= 0.0) return absorption;
  if (model == AbsorptionModel::kSabine) return sabine_absorption();
  return calibrate_absorption(*this, source_positions.at(source_index), mic_positions.front());
}

void RoomSpec::validate() const {
  for (double d : dimensions)
    if (!(d > 0.0)) throw ValidationError("room dimensions must be positive");
  if (!(t60 > 0.0)) throw ValidationError("room t60 must be positive, got " + std::to_string(t60));
  if (sample_rate <= 0) throw ValidationError("room sample rate must be positive");
  if (absorption > 1.0) throw ValidationError("wall absorption override must be <= 1");
  if (absorption < 0.0) {
    const double a = sabine_absorption();
    if (a > 1.0)
      throw ValidationError("t60 = " + std::to_string(t60) + " s implies Sabine absorption " + std::to_string(a) +
                            " > 1 for a " + vec_str(dimensions) + " m room; the room is too small for that t60");
  }
  if (mic_positions.empty()) throw ValidationError("room has no microphones");
  for (const auto& p : mic_positions)
    if (!inside(p, dimensions)) throw ValidationError("microphone " + vec_str(p) + " is outside the room");
  for (const auto& p : source_positions)
    if (!inside(p, dimensions)) throw ValidationError("source " + vec_str(p) + " is outside the room");
}

std::vector<Vec3> circular_array(const Vec3& center, std::size_t num_mics, double radius) {
  std::vector<Vec3> out{center};
  const std::size_t ring = num_mics - 1;
  for (std::size_t k = 0; k < ring; ++k) {
    const double phi = 2.0 * kPi * static_cast<double>(k) / static_cast<double>(ring);
    out.push_back({center[0] + radius * std::cos(phi), center[1] + radius * std::sin(phi), center[2]});
  }
  return out;
}

RIR image_method_rir(const RoomSpec& room, std::size_t source_index) {
  room.validate();
  if (source_index >= room.source_positions.size())
    throw ValidationError("source index " + std::to_string(source_index) + " out of range");
  const Vec3& src = room.source_positions[source_index];
  const double fs = room.sample_rate;
  const double beta = std::sqrt(1.0 - room.wall_absorption(source_index));

  std::size_t length = room.rir_length;
  if (length == 0) {
    double far = 0.0;
    for (const auto& m : room.mic_positions) far = std::max(far, dist(src, m));
    length = static_cast<std::size_t>(std::ceil(1.2 * room.t60 * fs + far / kSpeedOfSound * fs)) + kSincHalfWidth + 1;
  }
  const double max_path = static_cast<double>(length + kSincHalfWidth) / fs * kSpeedOfSound;

  RIR rir;
  rir.sample_rate = room.sample_rate;
  rir.taps.assign(room.mic_positions.size(), std::vector<double>(length, 0.0));

  const std::complex<double> step = std::polar(1.0, kPi / (kSincHalfWidth + 1));
  for_each_image(room, src, max_path, [&](const Vec3& img, int order) {
          const double gain = std::pow(beta, order);
          if (gain == 0.0) return;

          for (std::size_t m = 0; m < room.mic_positions.size(); ++m) {
            const double d = dist(img, room.mic_positions[m]);
            if (d > max_path) continue;
            const double tau = d / kSpeedOfSound * fs;
            const double amp = gain / (4.0 * kPi * d);
            const auto k0 = static_cast<long>(std::lround(tau));
            const double delta = tau - static_cast<double>(k0);  // in [-0.5, 0.5]
            // sin(pi (j - delta)) = -(-1)^j sin(pi delta); the Hann window
            // cos(pi x / 9) is advanced by rotation.
            const double s_delta = std::sin(kPi * delta);
            std::complex<double> rot = std::polar(1.0, kPi * (-kSincHalfWidth - delta) / (kSincHalfWidth + 1));
            auto& taps = rir.taps[m];
            for (int j = -kSincHalfWidth; j <= kSincHalfWidth; ++j, rot *= step) {
              const long k = k0 + j;
              const double x = j - delta;
              if (k < 0 || k >= static_cast<long>(length)) continue;
              const double sinc = std::abs(x) < 1e-12 ? 1.0 : -((j & 1) ? -1.0 : 1.0) * s_delta / (kPi * x);
              taps[static_cast<std::size_t>(k)] += amp * sinc * 0.5 * (1.0 + rot.real());
            }
          }
  });
  if (room.highpass_hz > 0.0)
    for (auto& h : rir.taps) highpass_in_place(h, room.highpass_hz, fs);
  return rir;
}

RirSplit split_rir(const RIR& rir, double boundary_ms) {
  if (boundary_ms < 0.0) throw ValidationError("split boundary must be non-negative");
  RirSplit out{rir, rir};
  const auto offset = static_cast<std::size_t>(std::lround(boundary_ms * rir.sample_rate / 1000.0));
  for (std::size_t m = 0; m < rir.num_channels(); ++m) {
    const auto& h = rir.taps[m];
    std::size_t peak = 0;
    for (std::size_t k = 1; k < h.size(); ++k)
      if (std::abs(h[k]) > std::abs(h[peak])) peak = k;
    const std::size_t cut = std::min(h.size(), peak + offset);
    auto& e = out.early.taps[m];
    auto& l = out.late.taps[m];
    std::fill(e.begin() + static_cast<std::ptrdiff_t>(cut), e.end(), 0.0);
    std::fill(l.begin(), l.begin() + static_cast<std::ptrdiff_t>(cut), 0.0);
  }
  return out;
}

// ---- mixtures ----

MultichannelWaveform SimulatedExample::image(std::size_t i) const {
  MultichannelWaveform out = early_images.at(i);
  for (std::size_t m = 0; m < out.num_channels(); ++m)
    for (std::size_t n = 0; n < out.length(); ++n) out.channels[m].samples[n] += late_images[i].channels[m].samples[n];
  return out;
}

SimulatedExample synthesize_mixture(const std::vector<Waveform>& sources, const std::vector<RIR>& rirs, double snr_db,
                                    std::uint64_t noise_seed, double boundary_ms, std::size_t reference_channel) {
  if (sources.empty()) throw ValidationError("synthesize_mixture: no sources");
  if (sources.size() != rirs.size())
    throw ValidationError("synthesize_mixture: " + std::to_string(sources.size()) + " sources but " +
                          std::to_string(rirs.size()) + " RIRs");
  const int fs = sources.front().sample_rate;
  const std::size_t L = sources.front().size();
  const std::size_t M = rirs.front().num_channels();
  if (reference_channel >= M) throw ValidationError("reference channel out of range");
  for (std::size_t i = 0; i < sources.size(); ++i) {
    sources[i].validate();
    if (sources[i].sample_rate != fs || rirs[i].sample_rate != fs)
      throw ValidationError("synthesize_mixture: sample rates differ (source " + std::to_string(i) + ")");
    if (sources[i].size() != L) throw ValidationError("synthesize_mixture: sources must have equal length");
    if (rirs[i].num_channels() != M) throw ValidationError("synthesize_mixture: RIR channel counts differ");
    if (energy(sources[i].samples) == 0.0)
      throw ValidationError("synthesize_mixture: source " + std::to_string(i) + " has zero energy");
  }

  SimulatedExample ex;
  ex.snr_db = snr_db;
  ex.early_boundary_ms = boundary_ms;
  ex.reference_channel = reference_channel;
  ex.dry_sources = sources;
  for (std::size_t i = 0; i < sources.size(); ++i) {
    const RirSplit parts = split_rir(rirs[i], boundary_ms);
    auto early = MultichannelWaveform::zeros(M, L, fs);
    auto late = MultichannelWaveform::zeros(M, L, fs);
    for (std::size_t m = 0; m < M; ++m) {
      early.channels[m].samples = convolve_cropped(sources[i].samples, parts.early.taps[m], L);
      late.channels[m].samples = convolve_cropped(sources[i].samples, parts.late.taps[m], L);
    }
    ex.early_images.push_back(std::move(early));
    ex.late_images.push_back(std::move(late));
  }

  ex.noise = MultichannelWaveform::zeros(M, L, fs);
  if (!(std::isinf(snr_db) && snr_db > 0.0)) {
    if (!std::isfinite(snr_db)) throw ValidationError("snr_db must be finite or +inf");
    std::mt19937_64 rng(noise_seed);
    std::normal_distribution<double> gauss;
    for (auto& ch : ex.noise.channels)
      for (double& v : ch.samples) v = gauss(rng);
    double signal = 0.0;
    for (std::size_t i = 0; i < sources.size(); ++i) signal += energy(ex.image(i).channels[reference_channel].samples);
    const double noise = energy(ex.noise.channels[reference_channel].samples);
    const double gain = std::sqrt(signal / (noise * std::pow(10.0, snr_db / 10.0)));
    for (auto& ch : ex.noise.channels)
      for (double& v : ch.samples) v *= gain;
  }

  ex.mixture = MultichannelWaveform::zeros(M, L, fs);
  for (std::size_t m = 0; m < M; ++m) {
    auto& y = ex.mixture.channels[m].samples;
    for (std::size_t i = 0; i < sources.size(); ++i)
      for (std::size_t n = 0; n < L; ++n)
        y[n] += ex.early_images[i].channels[m].samples[n] + ex.late_images[i].channels[m].samples[n];
    for (std::size_t n = 0; n < L; ++n) y[n] += ex.noise.channels[m].samples[n];
  }
  return ex;
}

double measured_snr_db(const SimulatedExample& ex) {
  double signal = 0.0;
  for (std::size_t i = 0; i < ex.num_speakers(); ++i)
    signal += energy(ex.image(i).channels[ex.reference_channel].samples);
  return 10.0 * std::log10(signal / energy(ex.noise.channels[ex.reference_channel].samples));
}

double mtf_approximation_error(const Waveform& source, const RIR& rir, const StftConfig& stft_config,
                               std::size_t reference_channel) {
  stft_config.validate();
  if (rir.length() > stft_config.frame_size)
    throw ValidationError("mtf_approximation_error: RIR longer than the STFT frame");
  const std::size_t L = source.size(), M = rir.num_channels();
  MultichannelWaveform d = MultichannelWaveform::zeros(M, L, source.sample_rate);
  std::vector<std::vector<std::complex<double>>> h(M, std::vector<std::complex<double>>(stft_config.num_bins()));
  const RealFft fft(stft_config.frame_size);
  for (std::size_t m = 0; m < M; ++m) {
    d.channels[m].samples = convolve_cropped(source.samples, rir.taps[m], L);
    std::vector<double> padded(rir.taps[m]);
    padded.resize(stft_config.frame_size, 0.0);
    fft.forward(padded, h[m]);
  }
  const Spectrogram D = stft(d, stft_config);
  double num = 0.0, den = 0.0;
  for (std::size_t t = 0; t < D.num_frames; ++t)
    for (std::size_t f = 0; f < D.num_bins; ++f) {
      const auto ref = D.at(t, f, reference_channel);
      for (std::size_t m = 0; m < M; ++m) {
        const auto v = h[m][f] / h[reference_channel][f];
        num += std::norm(D.at(t, f, m) - v * ref);
        den += std::norm(D.at(t, f, m));
      }
    }
  return std::sqrt(num / den);
}

std::vector<double> energy_decay_db(const std::vector<double>& rir) {
  std::vector<double> edc(rir.size());
  double acc = 0.0;
  for (std::size_t k = rir.size(); k-- > 0;) {
    acc += rir[k] * rir[k];
    edc[k] = acc;
  }
  for (double& v : edc) v = 10.0 * std::log10(v / acc);
  return edc;
}

double schroeder_t60(const std::vector<double>& rir, int sample_rate) {
  const double slope = decay_slope(energy_decay_db(rir));  // dB per sample
  if (!(slope < 0.0)) throw NumericalError("schroeder_t60: decay never reaches the -5..-35 dB fitting range");
  return -60.0 / slope / sample_rate;
}

// ---- sources ----

Waveform synthetic_source(std::uint64_t seed, std::size_t length, int sample_rate, std::size_t active_begin,
                          std::size_t active_end) {
  if (active_end > length || active_begin >= active_end)
    throw ValidationError("synthetic_source: bad active range");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double fs = sample_rate;
  const double nyquist = fs / 2.0;
  auto uni = [&](double lo, double hi) { return lo + (hi - lo) * u(rng); };

  Waveform out{std::vector<double>(length, 0.0), sample_rate};
  auto& y = out.samples;
  const double base_f0 = uni(90.0, 240.0);
  const double tilt = uni(0.6, 1.2);
  std::normal_distribution<double> gauss;

  std::vector<double> phase(64, 0.0);
  double lp = 0.0;
  std::size_t pos = active_begin;
  while (pos < active_end) {
    const auto syl = static_cast<std::size_t>(uni(0.12, 0.3) * fs);
    const std::size_t end = std::min(active_end, pos + syl);
    const bool voiced = u(rng) < 0.8;
    const double f0a = base_f0 * uni(0.85, 1.15), f0b = base_f0 * uni(0.85, 1.15);
    const std::array<double, 3> formant{uni(300, 800), uni(900, 2200), std::min(uni(2300, 3200), 0.9 * nyquist)};
    const std::array<double, 3> bw{uni(60, 120), uni(80, 160), uni(120, 220)};
    const double level = uni(0.5, 1.0);
    const double noise_mix = voiced ? 0.05 : 0.6;
    const double noise_pole = voiced ? 0.9 : -0.3;  // low-passed breath vs high-passed frication

    const double span = static_cast<double>(end - pos);
    for (std::size_t n = pos; n < end; ++n) {
      const double r = static_cast<double>(n - pos) / span;
      const double env = level * std::pow(std::sin(kPi * r), 2.0);
      double v = 0.0;
      if (voiced) {
        const double f0 = f0a + (f0b - f0a) * r + 3.0 * std::sin(2.0 * kPi * 5.0 * static_cast<double>(n) / fs);
        for (std::size_t k = 1; k < phase.size() && k * f0 < 0.95 * nyquist; ++k) {
          const double fk = static_cast<double>(k) * f0;
          phase[k] += 2.0 * kPi * fk / fs;
          if (phase[k] > 2.0 * kPi) phase[k] -= 2.0 * kPi;
          double g = 0.02;
          for (int j = 0; j < 3; ++j) g += 1.0 / (1.0 + std::pow((fk - formant[j]) / bw[j], 2.0));
          v += g * std::pow(fk / 100.0, -tilt) * std::sin(phase[k]);
        }
      }
      lp = noise_pole * lp + gauss(rng);
      v += noise_mix * lp;
      y[n] = env * v;
    }
    pos = end;
    if (u(rng) < 0.35) pos += static_cast<std::size_t>(uni(0.03, 0.12) * fs);  // short pause
  }

  const double rms = std::sqrt(energy(y) / static_cast<double>(active_end - active_begin));
  if (rms > 0.0)
    for (double& v : y) v *= 0.1 / rms;
  return out;
}

// ---- dataset ----

const char* to_string(OverlapKind k) { return k == OverlapKind::kFull ? "full" : "partial"; }

void DatasetConfig::validate() const {
  if (num_speakers == 0) throw ValidationError("dataset: num_speakers must be positive");
  if (sample_rate <= 0) throw ValidationError("dataset: sample_rate must be positive");
  if (!(duration_s > 2.0 * margin_s) || margin_s < 0.0) throw ValidationError("dataset: duration must exceed the margins");
  if (!(t60_min > 0.0 && t60_min <= t60_max)) throw ValidationError("dataset: bad t60 range");
  if (!(snr_min_db <= snr_max_db)) throw ValidationError("dataset: bad snr range");
  if (!(partial_overlap_ratio >= 0.0 && partial_overlap_ratio <= 1.0))
    throw ValidationError("dataset: partial_overlap_ratio must lie in [0, 1]");
  if (num_mics < 1) throw ValidationError("dataset: at least one microphone is required");
  if (!(source_distance_min > 0.0 && source_distance_min <= source_distance_max))
    throw ValidationError("dataset: bad source distance range");
  if (noise != "white") throw ValidationError("dataset: unsupported noise field '" + noise + "'");
  std::vector<std::string> missing;
  for (const auto& f : source_files)
    if (!std::ifstream(f)) missing.push_back(f);
  if (!missing.empty()) {
    std::string msg = "dataset: unreadable source files:";
    for (const auto& f : missing) msg += " " + f;
    throw ValidationError(msg);
  }
}

void to_json(nlohmann::json& j, const DatasetConfig& c) {
  j = {{"num_examples", c.num_examples},
       {"num_speakers", c.num_speakers},
       {"sample_rate", c.sample_rate},
       {"duration_s", c.duration_s},
       {"t60_min", c.t60_min},
       {"t60_max", c.t60_max},
       {"snr_min_db", c.snr_min_db},
       {"snr_max_db", c.snr_max_db},
       {"early_boundary_ms", c.early_boundary_ms},
       {"partial_overlap_ratio", c.partial_overlap_ratio},
       {"margin_s", c.margin_s},
       {"num_mics", c.num_mics},
       {"array_radius", c.array_radius},
       {"room_min", c.room_min},
       {"room_max", c.room_max},
       {"source_distance_min", c.source_distance_min},
       {"source_distance_max", c.source_distance_max},
       {"min_angle_deg", c.min_angle_deg},
       {"source_files", c.source_files},
       {"noise", c.noise}};
}

void from_json(const nlohmann::json& j, DatasetConfig& c) {
  const DatasetConfig d;
  c.num_examples = j.value("num_examples", d.num_examples);
  c.num_speakers = j.value("num_speakers", d.num_speakers);
  c.sample_rate = j.value("sample_rate", d.sample_rate);
  c.duration_s = j.value("duration_s", d.duration_s);
  c.t60_min = j.value("t60_min", d.t60_min);
  c.t60_max = j.value("t60_max", d.t60_max);
  c.snr_min_db = j.value("snr_min_db", d.snr_min_db);
  c.snr_max_db = j.value("snr_max_db", d.snr_max_db);
  c.early_boundary_ms = j.value("early_boundary_ms", d.early_boundary_ms);
  c.partial_overlap_ratio = j.value("partial_overlap_ratio", d.partial_overlap_ratio);
  c.margin_s = j.value("margin_s", d.margin_s);
  c.num_mics = j.value("num_mics", d.num_mics);
  c.array_radius = j.value("array_radius", d.array_radius);
  c.room_min = j.value("room_min", d.room_min);
  c.room_max = j.value("room_max", d.room_max);
  c.source_distance_min = j.value("source_distance_min", d.source_distance_min);
  c.source_distance_max = j.value("source_distance_max", d.source_distance_max);
  c.min_angle_deg = j.value("min_angle_deg", d.min_angle_deg);
  c.source_files = j.value("source_files", d.source_files);
  c.noise = j.value("noise", d.noise);
}

std::uint64_t example_seed(std::uint64_t seed, std::size_t index) { return hash2(seed, index); }

namespace {

Waveform file_source(const DatasetConfig& c, std::mt19937_64& rng, std::size_t length, std::size_t begin,
                     std::size_t end) {
  const auto pick = std::uniform_int_distribution<std::size_t>(0, c.source_files.size() - 1)(rng);
  const auto& path = c.source_files[pick];
  const MultichannelWaveform w = read_wav(path);
  if (w.sample_rate() != c.sample_rate)
    throw ValidationError("source file " + path + " has sample rate " + std::to_string(w.sample_rate()) +
                          ", dataset expects " + std::to_string(c.sample_rate));
  const auto& x = w.channels.front().samples;
  const std::size_t span = end - begin;
  const std::size_t offset =
      x.size() > span ? std::uniform_int_distribution<std::size_t>(0, x.size() - span)(rng) : 0;
  Waveform out{std::vector<double>(length, 0.0), c.sample_rate};
  for (std::size_t n = 0; n < span && offset + n < x.size(); ++n) out.samples[begin + n] = x[offset + n];
  const double e = energy(out.samples);
  if (e == 0.0) throw ValidationError("source file " + path + " is silent in the selected segment");
  const double gain = 0.1 / std::sqrt(e / static_cast<double>(span));
  for (double& v : out.samples) v *= gain;
  return out;
}

}  // namespace

SimulatedExample make_example(const DatasetConfig& c, std::uint64_t seed, std::size_t index) {
  const std::uint64_t s = example_seed(seed, index);
  std::mt19937_64 rng(s);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  auto uni = [&](double lo, double hi) { return lo + (hi - lo) * u(rng); };
  const int fs = c.sample_rate;
  const auto L = static_cast<std::size_t>(std::lround(c.duration_s * fs));
  const auto margin = static_cast<std::size_t>(std::lround(c.margin_s * fs));

  RoomSpec room;
  room.sample_rate = fs;
  for (int k = 0; k < 3; ++k) room.dimensions[k] = uni(c.room_min[k], c.room_max[k]);
  room.t60 = uni(c.t60_min, c.t60_max);
  const double snr = uni(c.snr_min_db, c.snr_max_db);
  const OverlapKind overlap = u(rng) < c.partial_overlap_ratio ? OverlapKind::kPartial : OverlapKind::kFull;

  // Array and sources: sources on a horizontal ring around the array, at
  // least min_angle apart, 0.5 m away from every wall.
  const auto& d = room.dimensions;
  const Vec3 center{uni(1.5, d[0] - 1.5), uni(1.5, d[1] - 1.5), uni(1.2, 1.6)};
  room.mic_positions = circular_array(center, c.num_mics, c.array_radius);
  std::vector<double> angles;
  for (std::size_t i = 0; i < c.num_speakers; ++i) {
    for (int attempt = 0;; ++attempt) {
      if (attempt > 10000) throw NumericalError("make_example: could not place source " + std::to_string(i));
      const double phi = uni(0.0, 2.0 * kPi), r = uni(c.source_distance_min, c.source_distance_max);
      const Vec3 p{center[0] + r * std::cos(phi), center[1] + r * std::sin(phi), center[2] + uni(-0.2, 0.2)};
      bool ok = p[0] > 0.5 && p[0] < d[0] - 0.5 && p[1] > 0.5 && p[1] < d[1] - 0.5 && p[2] > 0.5 && p[2] < d[2] - 0.5;
      for (double a : angles) {
        const double gap = std::abs(std::remainder(phi - a, 2.0 * kPi));
        ok = ok && gap >= c.min_angle_deg * kPi / 180.0;
      }
      if (ok) {
        angles.push_back(phi);
        room.source_positions.push_back(p);
        break;
      }
    }
  }

  // Activity spans. Partial overlap: the first talker starts at the margin,
  // the last one ends at the opposite margin, and the shared stretch is a
  // random fraction of the union.
  const std::size_t union_len = L - 2 * margin;
  std::vector<std::pair<std::size_t, std::size_t>> spans(c.num_speakers, {margin, L - margin});
  double overlap_fraction = 1.0;
  if (overlap == OverlapKind::kPartial && c.num_speakers > 1) {
    overlap_fraction = uni(0.2, 0.8);
    const auto active = static_cast<std::size_t>(std::lround(union_len * (1.0 + overlap_fraction) / 2.0));
    overlap_fraction = static_cast<double>(2 * active - union_len) / static_cast<double>(union_len);
    const bool swap = u(rng) < 0.5;
    for (std::size_t i = 0; i < c.num_speakers; ++i) {
      const bool early = (i % 2 == 0) != swap;
      spans[i] = early ? std::pair{margin, margin + active} : std::pair{L - margin - active, L - margin};
    }
  }

  std::vector<Waveform> sources;
  for (std::size_t i = 0; i < c.num_speakers; ++i) {
    const auto [b, e] = spans[i];
    if (c.source_files.empty()) {
      sources.push_back(synthetic_source(hash2(s, 100 + i), L, fs, b, e));
    } else {
      std::mt19937_64 pick_rng(hash2(s, 100 + i));
      sources.push_back(file_source(c, pick_rng, L, b, e));
    }
  }
  std::vector<RIR> rirs;
  std::vector<double> absorption;
  for (std::size_t i = 0; i < c.num_speakers; ++i) {
    RoomSpec fixed = room;
    fixed.absorption = room.wall_absorption(i);
    absorption.push_back(fixed.absorption);
    rirs.push_back(image_method_rir(fixed, i));
  }

  SimulatedExample ex = synthesize_mixture(sources, rirs, snr, hash2(s, 999), c.early_boundary_ms, 0);
  char id[32];
  std::snprintf(id, sizeof id, "ex%05zu", index);
  ex.id = id;
  nlohmann::json spans_json = nlohmann::json::array();
  for (const auto& [b, e] : spans) spans_json.push_back({b, e});
  ex.metadata = {{"id", ex.id},
                 {"index", index},
                 {"seed", s},
                 {"t60", room.t60},
                 {"snr_db", snr},
                 {"absorption", absorption},
                 {"room", room.dimensions},
                 {"mic_positions", room.mic_positions},
                 {"source_positions", room.source_positions},
                 {"overlap", to_string(overlap)},
                 {"overlap_fraction", overlap_fraction},
                 {"active_spans", spans_json},
                 {"sample_rate", fs},
                 {"early_boundary_ms", c.early_boundary_ms},
                 {"reference_channel", 0}};
  return ex;
}

std::vector<SimulatedExample> make_dataset(const DatasetConfig& config, std::uint64_t seed) {
  config.validate();
  std::vector<SimulatedExample> out(config.num_examples);
  const auto n = static_cast<std::ptrdiff_t>(config.num_examples);
#pragma omp parallel for schedule(dynamic)
  for (std::ptrdiff_t i = 0; i < n; ++i) out[i] = make_example(config, seed, static_cast<std::size_t>(i));
  return out;
}

std::filesystem::path write_dataset(const std::filesystem::path& dir, const std::vector<SimulatedExample>& examples) {
  std::filesystem::create_directories(dir);
  const auto manifest = dir / "manifest.jsonl";
  std::ofstream out(manifest);
  if (!out) throw ValidationError("cannot write manifest: " + manifest.string());
  for (const auto& ex : examples) {
    const std::filesystem::path sub = ex.id;
    std::filesystem::create_directories(dir / sub);
    nlohmann::json files;
    auto put = [&](const std::string& name, const MultichannelWaveform& w) {
      write_wav(dir / sub / (name + ".wav"), w, WavEncoding::kFloat32);
      files[name] = (sub / (name + ".wav")).string();
    };
    put("mixture", ex.mixture);
    put("noise", ex.noise);
    for (std::size_t i = 0; i < ex.num_speakers(); ++i) {
      MultichannelWaveform dry;
      dry.channels.push_back(ex.dry_sources[i]);
      put("source" + std::to_string(i), dry);
      put("early" + std::to_string(i), ex.early_images[i]);
      put("late" + std::to_string(i), ex.late_images[i]);
    }
    nlohmann::json record = ex.metadata;
    record["id"] = ex.id;
    record["num_speakers"] = ex.num_speakers();
    record["files"] = files;
    out << record.dump() << '\n';
  }
  return manifest;
}

std::vector<SimulatedExample> read_dataset(const std::filesystem::path& manifest) {
  std::ifstream in(manifest);
  if (!in) throw ValidationError("cannot open manifest: " + manifest.string());
  const auto root = manifest.parent_path();
  std::vector<SimulatedExample> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto rec = nlohmann::json::parse(line);
    const auto& files = rec.at("files");
    auto load = [&](const std::string& name) { return read_wav(root / files.at(name).get<std::string>()); };
    SimulatedExample ex;
    ex.id = rec.at("id").get<std::string>();
    ex.metadata = rec;
    ex.snr_db = rec.value("snr_db", 0.0);
    ex.early_boundary_ms = rec.value("early_boundary_ms", 50.0);
    ex.reference_channel = rec.value("reference_channel", std::size_t{0});
    ex.mixture = load("mixture");
    ex.noise = load("noise");
    const std::size_t I = rec.at("num_speakers").get<std::size_t>();
    for (std::size_t i = 0; i < I; ++i) {
      ex.dry_sources.push_back(load("source" + std::to_string(i)).channels.front());
      ex.early_images.push_back(load("early" + std::to_string(i)));
      ex.late_images.push_back(load("late" + std::to_string(i)));
    }
    out.push_back(std::move(ex));
  }
  return out;
}

}  // namespace bfsep
