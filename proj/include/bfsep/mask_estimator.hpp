#pragma once

// Recurrent mask estimator: normalised log-magnitude features of the
// reference channel -> stacked (bi)GRU -> tanh projection -> sigmoid
// projection to 3 * F * I values per frame, reshaped to a MaskSet.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "bfsep/autodiff.hpp"
#include "bfsep/beamforming.hpp"
#include "bfsep/stft.hpp"
#include "json.hpp"

namespace bfsep {

struct NetConfig {
  std::size_t num_speakers = 2;
  std::size_t num_bins = 257;
  std::size_t recurrent_layers = 1;
  std::size_t hidden_units = 64;
  bool bidirectional = true;
  std::size_t projection_layers = 2;  // fixed
  std::uint64_t seed = 0;

  std::size_t recurrent_width() const { return hidden_units * (bidirectional ? 2 : 1); }
  std::size_t output_width() const { return num_bins * 3 * num_speakers; }
  void validate() const;
  bool operator==(const NetConfig&) const = default;
};

void to_json(nlohmann::json& j, const NetConfig& c);
void from_json(const nlohmann::json& j, NetConfig& c);

struct NamedArray {
  std::string name;
  ad::Shape shape;
  std::vector<double> values;
};

// Network weights in a fixed order. Names follow
//   gru{layer}_{fwd|bwd}_{w_ih|w_hh|b_ih|b_hh}, proj{1|2}_{w|b}.
struct Parameters {
  std::vector<NamedArray> arrays;

  const NamedArray& get(const std::string& name) const;
  NamedArray& get(const std::string& name);
  std::size_t total_size() const;
  bool operator==(const Parameters& other) const;
};

// Parameters placed on a tape as leaves.
struct BoundParameters {
  std::map<std::string, ad::Tensor> leaves;
  std::vector<ad::Tensor> ordered;  // same order as Parameters::arrays

  const ad::Tensor& operator[](const std::string& name) const;
};

// Uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)], fan_in being the input width
// of the layer the array belongs to.
Parameters init_params(const NetConfig& config);
Parameters zero_params(const NetConfig& config);

BoundParameters bind(ad::Tape& tape, const Parameters& params, bool trainable = true);

// Per-bin mean/variance normalisation over the frames of one utterance.
RealMatrix normalize_features(const RealMatrix& features);
// normalize_features(log_feature(spec, channel)).
RealMatrix network_input(const Spectrogram& spec, std::size_t channel);

// features: (T, F) tensor. Returns masks (3, T, F, I) on the tape.
MaskSet forward(const NetConfig& config, const BoundParameters& params, const ad::Tensor& features);
MaskSet forward(ad::Tape& tape, const NetConfig& config, const BoundParameters& params,
                const RealMatrix& features);

// Single-file checkpoint, layout in docs/checkpoint_format.md.
struct Checkpoint {
  NetConfig config;
  Parameters params;
  nlohmann::json metadata = nlohmann::json::object();
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace bfsep
