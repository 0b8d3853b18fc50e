#pragma once

// Reverberant multichannel mixture synthesis: shoebox image-method room
// impulse responses, early/late splitting, convolution, noise at a target
// SNR, and a deterministic dataset generator with a JSON manifest.

#include <array>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <string>
#include <vector>

#include "bfsep/audio.hpp"
#include "bfsep/stft.hpp"
#include "json.hpp"

namespace bfsep {

using Vec3 = std::array<double, 3>;

inline constexpr double kSpeedOfSound = 343.0;  // m/s
// Passing this as snr_db disables the noise term.
inline constexpr double kNoNoise = std::numeric_limits<double>::infinity();

// kSabine uses the Sabine absorption directly. kCalibrated starts from it and
// adjusts the wall absorption until the image-source energy decay of this
// room has the requested T60; shoebox image sources decay more slowly than
// Sabine predicts at low absorption and faster at high absorption.
enum class AbsorptionModel { kSabine, kCalibrated };

struct RoomSpec {
  Vec3 dimensions{6.0, 5.0, 3.0};
  double t60 = 0.3;
  std::vector<Vec3> mic_positions;
  std::vector<Vec3> source_positions;
  int sample_rate = 8000;
  int max_order = -1;           // reflection order limit; -1 = limited by rir_length only
  std::size_t rir_length = 0;   // taps; 0 = ceil(1.2 * t60 * fs) + direct path
  double absorption = -1.0;     // overrides the model when in [0, 1]
  AbsorptionModel model = AbsorptionModel::kCalibrated;
  // Second-order Butterworth high-pass applied to the finished RIR to remove
  // the DC build-up of the all-positive image sum; 0 disables it.
  double highpass_hz = 50.0;

  // Sabine: alpha = 24 ln(10) V / (c S T60).
  double sabine_absorption() const;
  // Absorption used for the source at source_index.
  double wall_absorption(std::size_t source_index = 0) const;
  void validate() const;
};

// Circular array of `num_mics - 1` microphones around a centre microphone
// in the horizontal plane; the centre microphone comes first.
std::vector<Vec3> circular_array(const Vec3& center, std::size_t num_mics = 7, double radius = 0.0425);

struct RIR {
  std::vector<std::vector<double>> taps;  // (M, L_tau)
  int sample_rate = 0;

  std::size_t num_channels() const { return taps.size(); }
  std::size_t length() const { return taps.empty() ? 0 : taps.front().size(); }
};

RIR image_method_rir(const RoomSpec& room, std::size_t source_index);

// Split at peak + round(boundary_ms * fs / 1000) per channel, peak being the
// direct-path maximum of that channel. early + late == rir exactly.
struct RirSplit {
  RIR early, late;
};
RirSplit split_rir(const RIR& rir, double boundary_ms = 50.0);

struct SimulatedExample {
  std::string id;
  MultichannelWaveform mixture;                   // y
  std::vector<Waveform> dry_sources;              // s_i
  std::vector<MultichannelWaveform> early_images; // d_i
  std::vector<MultichannelWaveform> late_images;  // r_i
  MultichannelWaveform noise;                     // n
  double snr_db = 0.0;
  double early_boundary_ms = 50.0;
  std::size_t reference_channel = 0;
  nlohmann::json metadata = nlohmann::json::object();

  std::size_t num_speakers() const { return dry_sources.size(); }
  // d_i + r_i on all channels.
  MultichannelWaveform image(std::size_t i) const;
};

// Convolves each source with its RIR (full convolution, cropped to the
// source length), adds white Gaussian noise so that
// 10 log10(sum_i ||x_i,r||^2 / ||n_r||^2) = snr_db at the reference channel.
SimulatedExample synthesize_mixture(const std::vector<Waveform>& sources, const std::vector<RIR>& rirs,
                                    double snr_db, std::uint64_t noise_seed, double boundary_ms = 50.0,
                                    std::size_t reference_channel = 0);

double measured_snr_db(const SimulatedExample& example);

// Relative error of the multiplicative transfer function model:
// ||stft(d_m) - v_m(f) stft(d_r)|| / ||stft(d_m)|| over all m, with v the
// frame-size DFT ratio of the RIR channels to the reference channel.
double mtf_approximation_error(const Waveform& source, const RIR& rir, const StftConfig& stft,
                               std::size_t reference_channel = 0);

// Schroeder backward-integrated energy decay, in dB relative to the total.
std::vector<double> energy_decay_db(const std::vector<double>& rir);
// T60 from a line fitted to the decay between -5 and -35 dB.
double schroeder_t60(const std::vector<double>& rir, int sample_rate);

// Speech-like test signal: voiced harmonic segments with a drifting pitch,
// formant-shaped spectrum, syllable-rate amplitude modulation and a coloured
// noise component. Silent outside [active_begin, active_end).
Waveform synthetic_source(std::uint64_t seed, std::size_t length, int sample_rate, std::size_t active_begin,
                          std::size_t active_end);

enum class OverlapKind { kFull, kPartial };
const char* to_string(OverlapKind k);

struct DatasetConfig {
  std::size_t num_examples = 200;
  std::size_t num_speakers = 2;
  int sample_rate = 8000;
  double duration_s = 2.0;
  double t60_min = 0.15, t60_max = 0.6;
  double snr_min_db = 10.0, snr_max_db = 20.0;
  double early_boundary_ms = 50.0;
  double partial_overlap_ratio = 0.5;  // share of partially overlapped mixtures
  double margin_s = 0.1;               // silence at both ends of every utterance
  std::size_t num_mics = 7;
  double array_radius = 0.0425;
  Vec3 room_min{5.0, 4.0, 2.6}, room_max{7.0, 6.0, 3.2};
  double source_distance_min = 1.0, source_distance_max = 2.0;
  double min_angle_deg = 5.0;
  std::vector<std::string> source_files;  // empty = built-in synthetic sources
  std::string noise = "white";           // only "white" is implemented

  void validate() const;
  bool operator==(const DatasetConfig&) const = default;
};

void to_json(nlohmann::json& j, const DatasetConfig& c);
void from_json(const nlohmann::json& j, DatasetConfig& c);

// seed_i = hash(seed, i), independent of generation order.
std::uint64_t example_seed(std::uint64_t seed, std::size_t index);

SimulatedExample make_example(const DatasetConfig& config, std::uint64_t seed, std::size_t index);
std::vector<SimulatedExample> make_dataset(const DatasetConfig& config, std::uint64_t seed);

// Writes float32 WAVs and manifest.jsonl (one JSON record per example) under
// dir; returns the manifest path.
std::filesystem::path write_dataset(const std::filesystem::path& dir, const std::vector<SimulatedExample>& examples);
// Reads back what write_dataset produced.
std::vector<SimulatedExample> read_dataset(const std::filesystem::path& manifest);

}  // namespace bfsep
