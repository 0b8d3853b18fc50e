#pragma once

// End-to-end pipeline: masks -> covariances -> RTF -> MVDR -> iSTFT, the
// PIT training loop with Adam, inference on WAV input, and BSS-Eval style
// evaluation.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "bfsep/data_sim.hpp"
#include "bfsep/grad_check.hpp"
#include "bfsep/losses.hpp"
#include "bfsep/mask_estimator.hpp"
#include "json.hpp"

namespace bfsep {

void to_json(nlohmann::json& j, const StftConfig& c);
void from_json(const nlohmann::json& j, StftConfig& c);
void to_json(nlohmann::json& j, const LossConfig& c);
void from_json(const nlohmann::json& j, LossConfig& c);

// "eigh" or "power:<n>".
struct RtfMode {
  enum class Kind { kEigh, kPowerIteration };
  Kind kind = Kind::kEigh;
  std::size_t iterations = 3;

  static RtfMode eigh() { return {Kind::kEigh, 0}; }
  static RtfMode power(std::size_t n) { return {Kind::kPowerIteration, n}; }
  static RtfMode parse(const std::string& text);
  std::string str() const;
  bool operator==(const RtfMode&) const = default;
};

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  bool operator==(const AdamConfig&) const = default;
};

struct TrainConfig {
  NetConfig net;
  StftConfig stft{512, 128};
  LossConfig loss;
  DatasetConfig dataset;
  AdamConfig optimizer;
  double grad_clip_norm = 5.0;
  std::size_t steps = 2000;
  std::size_t eval_every = 500;
  std::size_t eta_max = 3;
  std::uint64_t seed = 0;
  std::size_t eval_examples = 20;
  RtfMode eval_rtf = RtfMode::eigh();
  double covariance_epsilon = 0.01;
  std::size_t reference_channel = 0;
  std::string output_dir = "run";

  // Fills net.num_bins / num_speakers from the STFT and dataset settings.
  void sync();
  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);
TrainConfig load_train_config(const std::filesystem::path& path);

// Seed of the held-out set derived from the training seed.
std::uint64_t held_out_seed(std::uint64_t seed);

// Everything a training step or an evaluation needs from one example,
// computed once.
struct PreparedExample {
  std::string id;
  Spectrogram spec;                                   // mixture, all channels
  RealMatrix features;                                // normalised log features
  std::vector<std::vector<double>> dry;               // s_i
  std::vector<std::vector<double>> early_ref;         // d_i at the reference channel
  std::vector<std::vector<std::complex<double>>> early_ref_tf;  // stft of early_ref, (T, F)
  std::vector<WienerHopf> wiener;                     // CI-SDR factorisations of s_i
  std::size_t length = 0;
  int sample_rate = 0;
};

PreparedExample prepare_example(const SimulatedExample& ex, const StftConfig& stft, const LossConfig& loss,
                                std::size_t reference_channel);

// Beamformer outputs for given masks.
struct Separation {
  MaskSet masks;
  ad::ComplexTensor spectra;  // (I, T, F)
  ad::Tensor waveforms;       // (I, L)
};

struct PipelineSettings {
  StftConfig stft;
  RtfMode rtf = RtfMode::power(3);
  double covariance_epsilon = 0.01;
  std::size_t reference_channel = 0;
};

Separation beamform(ad::Tape& tape, const Spectrogram& spec, const MaskSet& masks, const PipelineSettings& p,
                    std::size_t length);
Separation separate(ad::Tape& tape, const NetConfig& net, const BoundParameters& params, const Spectrogram& spec,
                    const RealMatrix& features, const PipelineSettings& p, std::size_t length);

// PIT loss of the configured kind on a separation.
PitResult training_loss(const LossConfig& loss, const PreparedExample& ex, const Separation& sep);

struct TrainResult {
  std::filesystem::path checkpoint;
  std::filesystem::path log;
  std::vector<double> losses;  // per step, dB
  Parameters params;
};

// Adam with bias correction; the update is skipped for steps == 0.
class Adam {
 public:
  Adam(const Parameters& params, const AdamConfig& config);
  void step(Parameters& params, const std::vector<std::vector<double>>& grads);

 private:
  AdamConfig config_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

// Scales grads in place so their global L2 norm is at most max_norm; returns
// the norm before clipping.
double clip_global_norm(std::vector<std::vector<double>>& grads, double max_norm);

// Uses `train_set` when given, otherwise generates the dataset from config.
TrainResult train(const TrainConfig& config, const std::vector<SimulatedExample>* train_set = nullptr,
                  const std::vector<SimulatedExample>* eval_set = nullptr);

// ---- inference and evaluation ----

std::vector<Waveform> enhance(const Checkpoint& checkpoint, const MultichannelWaveform& input, const RtfMode& rtf);
std::vector<Waveform> enhance(const std::filesystem::path& checkpoint, const MultichannelWaveform& input,
                              const RtfMode& rtf);

struct UtteranceMetrics {
  std::string id;
  std::vector<std::size_t> permutation;  // estimate assigned to each reference
  std::vector<double> sdr_db;            // BSS-Eval SDR against the dry source
  std::vector<double> si_sdr_db;         // SI-SDR against the early image at the reference channel
  double mean_sdr() const;
  double mean_si_sdr() const;
};

struct MetricsReport {
  std::vector<UtteranceMetrics> records;
  std::vector<std::string> missing;
  double mean_sdr_db = 0.0;
  double mean_si_sdr_db = 0.0;

  void finalize();  // recomputes the corpus means from the records
};

void to_json(nlohmann::json& j, const MetricsReport& r);

// Permutation chosen to maximise the mean BSS-Eval SDR.
UtteranceMetrics score_utterance(const std::string& id, const std::vector<std::vector<double>>& dry,
                                 const std::vector<std::vector<double>>& early_ref,
                                 const std::vector<std::vector<double>>& estimates, std::size_t taps);
UtteranceMetrics score_utterance(const SimulatedExample& ex, const std::vector<std::vector<double>>& estimates,
                                 std::size_t taps);

// Taps used for BSS-Eval SDR at a sample rate (512 at 16 kHz, 32 ms rule).
std::size_t bss_eval_taps(int sample_rate);

// Estimates are looked up as <estimates_dir>/<id>/est<i>.wav.
MetricsReport evaluate(const std::filesystem::path& estimates_dir, const std::filesystem::path& manifest);
MetricsReport evaluate_model(const Checkpoint& checkpoint, const std::vector<SimulatedExample>& examples,
                             const RtfMode& rtf);
// The unprocessed reference channel as every speaker's estimate.
MetricsReport evaluate_mixture(const std::vector<SimulatedExample>& examples);

// |d_i|^2 / (|d_i|^2 + |y - d_i|^2) at the reference channel; the two noise
// masks are its complement. Returned as plain values laid out (3, T, F, I).
std::vector<double> oracle_masks(const SimulatedExample& ex, const StftConfig& stft);
MetricsReport oracle_mask_baseline(const SimulatedExample& ex, const StftConfig& stft,
                                   const RtfMode& rtf = RtfMode::eigh());
MetricsReport oracle_mask_baseline(const std::vector<SimulatedExample>& examples, const StftConfig& stft,
                                   const RtfMode& rtf = RtfMode::eigh());

// Gradient check of the whole differentiable path (masks -> covariances ->
// power-iteration RTF -> MVDR -> beamforming -> iSTFT -> loss) on a random
// toy problem: M = 3 channels, T = 12 frames, F = 9 bins, I = 2 speakers.
// The masks are the checked leaves.
ad::GradCheckResult pipeline_grad_check(LossKind kind, std::uint64_t seed = 0, std::size_t eta = 3);

}  // namespace bfsep
