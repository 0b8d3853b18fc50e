#include "bfsep/mask_estimator.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>

#include "bfsep/errors.hpp"

namespace bfsep {

using ad::Shape;
using ad::Tape;
using ad::Tensor;

void NetConfig::validate() const {
  if (num_speakers == 0) throw ValidationError("net: num_speakers must be positive");
  if (num_bins == 0) throw ValidationError("net: num_bins must be positive");
  if (recurrent_layers == 0) throw ValidationError("net: at least one recurrent layer is required");
  if (hidden_units == 0) throw ValidationError("net: hidden_units must be positive");
  if (projection_layers != 2)
    throw ValidationError("net: projection_layers is fixed at 2, got " + std::to_string(projection_layers));
}

void to_json(nlohmann::json& j, const NetConfig& c) {
  j = {{"num_speakers", c.num_speakers},   {"num_bins", c.num_bins},
       {"recurrent_layers", c.recurrent_layers}, {"hidden_units", c.hidden_units},
       {"bidirectional", c.bidirectional}, {"projection_layers", c.projection_layers},
       {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, NetConfig& c) {
  NetConfig d;
  c.num_speakers = j.value("num_speakers", d.num_speakers);
  c.num_bins = j.value("num_bins", d.num_bins);
  c.recurrent_layers = j.value("recurrent_layers", d.recurrent_layers);
  c.hidden_units = j.value("hidden_units", d.hidden_units);
  c.bidirectional = j.value("bidirectional", d.bidirectional);
  c.projection_layers = j.value("projection_layers", d.projection_layers);
  c.seed = j.value("seed", d.seed);
}

const NamedArray& Parameters::get(const std::string& name) const {
  for (const auto& a : arrays)
    if (a.name == name) return a;
  throw ValidationError("no parameter named '" + name + "'");
}

NamedArray& Parameters::get(const std::string& name) {
  return const_cast<NamedArray&>(static_cast<const Parameters&>(*this).get(name));
}

std::size_t Parameters::total_size() const {
  std::size_t n = 0;
  for (const auto& a : arrays) n += a.values.size();
  return n;
}

bool Parameters::operator==(const Parameters& other) const {
  if (arrays.size() != other.arrays.size()) return false;
  for (std::size_t i = 0; i < arrays.size(); ++i) {
    const auto &a = arrays[i], &b = other.arrays[i];
    if (a.name != b.name || a.shape != b.shape || a.values != b.values) return false;
  }
  return true;
}

const Tensor& BoundParameters::operator[](const std::string& name) const {
  const auto it = leaves.find(name);
  if (it == leaves.end()) throw ValidationError("no bound parameter named '" + name + "'");
  return it->second;
}

namespace {

struct Slot {
  std::string name;
  Shape shape;
  std::size_t fan_in;
};

std::vector<Slot> layout(const NetConfig& c) {
  std::vector<Slot> slots;
  const std::size_t H = c.hidden_units;
  std::size_t in = c.num_bins;
  for (std::size_t l = 0; l < c.recurrent_layers; ++l) {
    for (const char* dir : {"fwd", "bwd"}) {
      if (std::string(dir) == "bwd" && !c.bidirectional) continue;
      const std::string p = "gru" + std::to_string(l) + "_" + dir + "_";
      slots.push_back({p + "w_ih", {in, 3 * H}, in});
      slots.push_back({p + "w_hh", {H, 3 * H}, H});
      slots.push_back({p + "b_ih", {3 * H}, in});
      slots.push_back({p + "b_hh", {3 * H}, H});
    }
    in = c.recurrent_width();
  }
  const std::size_t D = c.recurrent_width();
  slots.push_back({"proj1_w", {D, D}, D});
  slots.push_back({"proj1_b", {D}, D});
  slots.push_back({"proj2_w", {D, c.output_width()}, D});
  slots.push_back({"proj2_b", {c.output_width()}, D});
  return slots;
}

// One GRU direction over the whole sequence; gate order (r, z, n).
//   r = sig(x W_ir + b_ir + h W_hr + b_hr)
//   z = sig(x W_iz + b_iz + h W_hz + b_hz)
//   n = tanh(x W_in + b_in + r * (h W_hn + b_hn))
//   h = (1 - z) * n + z * h
Tensor gru_direction(const Tensor& x, const BoundParameters& p, const std::string& prefix,
                     std::size_t H, bool reverse) {
  Tape& tape = x.tape();
  const std::size_t T = x.dim(0);
  const Tensor xw = ad::matmul(x, p[prefix + "w_ih"]) + p[prefix + "b_ih"];  // (T, 3H)
  const Tensor& w_hh = p[prefix + "w_hh"];
  const Tensor& b_hh = p[prefix + "b_hh"];

  std::vector<Tensor> out(T);
  Tensor h = tape.constant({1, H}, 0.0);
  for (std::size_t step = 0; step < T; ++step) {
    const std::size_t t = reverse ? T - 1 - step : step;
    const Tensor xt = ad::slice(xw, 0, t, 1);
    const Tensor hw = ad::matmul(h, w_hh) + b_hh;
    const Tensor r = ad::sigmoid(ad::slice(xt, 1, 0, H) + ad::slice(hw, 1, 0, H));
    const Tensor z = ad::sigmoid(ad::slice(xt, 1, H, H) + ad::slice(hw, 1, H, H));
    const Tensor n = ad::tanh(ad::slice(xt, 1, 2 * H, H) + r * ad::slice(hw, 1, 2 * H, H));
    h = n + z * (h - n);
    out[t] = h;
  }
  return ad::concat(out, 0);
}

}  // namespace

Parameters init_params(const NetConfig& config) {
  config.validate();
  std::mt19937_64 rng(config.seed);
  Parameters params;
  for (const Slot& s : layout(config)) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(s.fan_in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    NamedArray a{s.name, s.shape, std::vector<double>(ad::numel(s.shape))};
    for (double& v : a.values) v = dist(rng);
    params.arrays.push_back(std::move(a));
  }
  return params;
}

Parameters zero_params(const NetConfig& config) {
  config.validate();
  Parameters params;
  for (const Slot& s : layout(config))
    params.arrays.push_back({s.name, s.shape, std::vector<double>(ad::numel(s.shape), 0.0)});
  return params;
}

BoundParameters bind(Tape& tape, const Parameters& params, bool trainable) {
  BoundParameters b;
  for (const auto& a : params.arrays) {
    const Tensor leaf = tape.leaf(a.shape, a.values, trainable);
    b.leaves.emplace(a.name, leaf);
    b.ordered.push_back(leaf);
  }
  return b;
}

RealMatrix normalize_features(const RealMatrix& features) {
  RealMatrix out(features.rows, features.cols);
  const double n = static_cast<double>(features.rows);
  for (std::size_t f = 0; f < features.cols; ++f) {
    double mean = 0.0;
    for (std::size_t t = 0; t < features.rows; ++t) mean += features(t, f);
    mean /= n;
    double var = 0.0;
    for (std::size_t t = 0; t < features.rows; ++t) var += (features(t, f) - mean) * (features(t, f) - mean);
    const double inv_std = 1.0 / std::sqrt(var / n + 1e-10);
    for (std::size_t t = 0; t < features.rows; ++t) out(t, f) = (features(t, f) - mean) * inv_std;
  }
  return out;
}

RealMatrix network_input(const Spectrogram& spec, std::size_t channel) {
  return normalize_features(log_feature(spec, channel));
}

MaskSet forward(const NetConfig& config, const BoundParameters& params, const Tensor& features) {
  config.validate();
  if (features.rank() != 2 || features.dim(1) != config.num_bins)
    throw ShapeError("mask estimator: expected features (T, " + std::to_string(config.num_bins) + "), got " +
                     ad::shape_str(features.shape()));
  const std::size_t T = features.dim(0), H = config.hidden_units;

  Tensor x = features;
  for (std::size_t l = 0; l < config.recurrent_layers; ++l) {
    const std::string p = "gru" + std::to_string(l) + "_";
    const Tensor fwd = gru_direction(x, params, p + "fwd_", H, false);
    x = config.bidirectional ? ad::concat({fwd, gru_direction(x, params, p + "bwd_", H, true)}, 1) : fwd;
  }
  x = ad::tanh(ad::matmul(x, params["proj1_w"]) + params["proj1_b"]);
  x = ad::sigmoid(ad::matmul(x, params["proj2_w"]) + params["proj2_b"]);
  x = ad::reshape(x, {T, 3, config.num_bins, config.num_speakers});
  return MaskSet{ad::permute(x, {1, 0, 2, 3})};
}

MaskSet forward(Tape& tape, const NetConfig& config, const BoundParameters& params, const RealMatrix& features) {
  return forward(config, params, tape.constant({features.rows, features.cols}, features.data));
}

// ---- checkpoint I/O ----

namespace {

constexpr char kMagic[8] = {'B', 'F', 'S', 'E', 'P', 'C', 'K', '1'};
constexpr int kFormatVersion = 1;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint) {
  nlohmann::json header;
  header["format_version"] = kFormatVersion;
  header["net"] = checkpoint.config;
  header["metadata"] = checkpoint.metadata;
  std::size_t offset = 0;
  for (const auto& a : checkpoint.params.arrays) {
    if (a.values.size() != ad::numel(a.shape))
      throw ShapeError("checkpoint: array '" + a.name + "' size does not match its shape");
    header["arrays"].push_back({{"name", a.name}, {"shape", a.shape}, {"offset", offset}});
    offset += a.values.size();
  }
  const std::string text = header.dump();
  const std::uint64_t len = text.size();

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValidationError("cannot write checkpoint: " + path.string());
  out.write(kMagic, sizeof kMagic);
  out.write(reinterpret_cast<const char*>(&len), sizeof len);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& a : checkpoint.params.arrays)
    out.write(reinterpret_cast<const char*>(a.values.data()),
              static_cast<std::streamsize>(a.values.size() * sizeof(double)));
  if (!out) throw ValidationError("failed writing checkpoint: " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open checkpoint: " + path.string());
  char magic[8];
  std::uint64_t len = 0;
  in.read(magic, sizeof magic);
  in.read(reinterpret_cast<char*>(&len), sizeof len);
  if (!in || std::memcmp(magic, kMagic, sizeof magic) != 0)
    throw ValidationError("not a bfsep checkpoint: " + path.string());
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (!in) throw ValidationError("truncated checkpoint header: " + path.string());

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("corrupt checkpoint header in " + path.string() + ": " + e.what());
  }
  if (header.value("format_version", 0) != kFormatVersion)
    throw ValidationError("unsupported checkpoint version in " + path.string());

  Checkpoint ck;
  ck.config = header.at("net").get<NetConfig>();
  ck.metadata = header.value("metadata", nlohmann::json::object());
  std::size_t offset = 0;
  for (const auto& entry : header.at("arrays")) {
    NamedArray a{entry.at("name").get<std::string>(), entry.at("shape").get<Shape>(), {}};
    if (entry.at("offset").get<std::size_t>() != offset)
      throw ValidationError("checkpoint array '" + a.name + "' has an inconsistent offset: " + path.string());
    a.values.resize(ad::numel(a.shape));
    offset += a.values.size();
    in.read(reinterpret_cast<char*>(a.values.data()), static_cast<std::streamsize>(a.values.size() * sizeof(double)));
    if (!in) throw ValidationError("truncated checkpoint payload at '" + a.name + "': " + path.string());
    ck.params.arrays.push_back(std::move(a));
  }
  if (in.peek() != std::char_traits<char>::eof())
    throw ValidationError("trailing bytes after the checkpoint payload: " + path.string());

  // The stored arrays must match what the stored config implies.
  const auto expected = layout(ck.config);
  if (expected.size() != ck.params.arrays.size())
    throw ValidationError("checkpoint arrays do not match its network config: " + path.string());
  for (std::size_t i = 0; i < expected.size(); ++i)
    if (expected[i].name != ck.params.arrays[i].name || expected[i].shape != ck.params.arrays[i].shape)
      throw ValidationError("checkpoint array '" + ck.params.arrays[i].name + "' does not match the config");
  return ck;
}

}  // namespace bfsep
