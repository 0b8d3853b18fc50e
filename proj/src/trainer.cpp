#include "bfsep/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>

#include "bfsep/beamforming.hpp"
#include "bfsep/errors.hpp"

namespace bfsep {

using ad::ComplexTensor;
using ad::Tape;
using ad::Tensor;
using nlohmann::json;

// ---- configuration ----

void to_json(json& j, const StftConfig& c) { j = {{"frame_size", c.frame_size}, {"shift", c.shift}, {"window", "hann"}}; }

void from_json(const json& j, StftConfig& c) {
  const StftConfig d;
  c.frame_size = j.value("frame_size", d.frame_size);
  c.shift = j.value("shift", d.shift);
  if (j.value("window", std::string("hann")) != "hann") throw ValidationError("only the hann window is supported");
}

void to_json(json& j, const LossConfig& c) {
  j = {{"kind", to_string(c.kind)},
       {"ci_filter_taps", c.ci_filter_taps},
       {"log_floor", c.log_floor},
       {"ci_solver", to_string(c.ci_solver)}};
}

void from_json(const json& j, LossConfig& c) {
  const LossConfig d;
  c.kind = loss_kind_from_string(j.value("kind", to_string(d.kind)));
  c.ci_filter_taps = j.value("ci_filter_taps", d.ci_filter_taps);
  c.log_floor = j.value("log_floor", d.log_floor);
  c.ci_solver = wiener_solver_from_string(j.value("ci_solver", to_string(d.ci_solver)));
}

RtfMode RtfMode::parse(const std::string& text) {
  if (text == "eigh") return eigh();
  const std::string prefix = "power:";
  if (text.rfind(prefix, 0) == 0) {
    const std::string n = text.substr(prefix.size());
    if (!n.empty() && std::all_of(n.begin(), n.end(), [](char ch) { return ch >= '0' && ch <= '9'; })) {
      const auto it = std::stoul(n);
      if (it > 0) return power(it);
    }
  }
  throw ValidationError("rtf mode must be 'eigh' or 'power:<n>' with n >= 1, got '" + text + "'");
}

std::string RtfMode::str() const { return kind == Kind::kEigh ? "eigh" : "power:" + std::to_string(iterations); }

void TrainConfig::sync() {
  net.num_bins = stft.num_bins();
  net.num_speakers = dataset.num_speakers;
}

void TrainConfig::validate() const {
  net.validate();
  stft.validate();
  loss.validate();
  dataset.validate();
  if (net.num_bins != stft.num_bins())
    throw ValidationError("net.num_bins (" + std::to_string(net.num_bins) + ") must equal the STFT bin count (" +
                          std::to_string(stft.num_bins()) + ")");
  if (net.num_speakers != dataset.num_speakers) throw ValidationError("net and dataset speaker counts differ");
  if (!(optimizer.learning_rate > 0.0)) throw ValidationError("learning rate must be positive");
  if (!(optimizer.beta1 >= 0.0 && optimizer.beta1 < 1.0 && optimizer.beta2 >= 0.0 && optimizer.beta2 < 1.0))
    throw ValidationError("Adam betas must lie in [0, 1)");
  if (!(grad_clip_norm > 0.0)) throw ValidationError("grad_clip_norm must be positive");
  if (eta_max == 0) throw ValidationError("eta_max must be at least 1");
  if (eval_every == 0) throw ValidationError("eval_every must be at least 1");
  if (reference_channel >= dataset.num_mics) throw ValidationError("reference channel out of range");
  if (dataset.num_examples == 0 && steps > 0) throw ValidationError("training needs at least one example");
}

void to_json(json& j, const TrainConfig& c) {
  j = {{"net", c.net},
       {"stft", c.stft},
       {"loss", c.loss},
       {"dataset", c.dataset},
       {"optimizer",
        {{"kind", "adam"},
         {"learning_rate", c.optimizer.learning_rate},
         {"beta1", c.optimizer.beta1},
         {"beta2", c.optimizer.beta2},
         {"eps", c.optimizer.eps}}},
       {"grad_clip_norm", c.grad_clip_norm},
       {"steps", c.steps},
       {"eval_every", c.eval_every},
       {"eta_max", c.eta_max},
       {"seed", c.seed},
       {"eval_examples", c.eval_examples},
       {"eval_rtf", c.eval_rtf.str()},
       {"covariance_epsilon", c.covariance_epsilon},
       {"reference_channel", c.reference_channel},
       {"output_dir", c.output_dir}};
}

void from_json(const json& j, TrainConfig& c) {
  TrainConfig d;
  c.net = j.value("net", d.net);
  c.stft = j.value("stft", d.stft);
  c.loss = j.value("loss", d.loss);
  c.dataset = j.value("dataset", d.dataset);
  c.optimizer = d.optimizer;
  if (j.contains("optimizer")) {
    const auto& o = j.at("optimizer");
    if (o.value("kind", std::string("adam")) != "adam") throw ValidationError("only the adam optimizer is supported");
    c.optimizer.learning_rate = o.value("learning_rate", d.optimizer.learning_rate);
    c.optimizer.beta1 = o.value("beta1", d.optimizer.beta1);
    c.optimizer.beta2 = o.value("beta2", d.optimizer.beta2);
    c.optimizer.eps = o.value("eps", d.optimizer.eps);
  }
  c.grad_clip_norm = j.value("grad_clip_norm", d.grad_clip_norm);
  c.steps = j.value("steps", d.steps);
  c.eval_every = j.value("eval_every", d.eval_every);
  c.eta_max = j.value("eta_max", d.eta_max);
  c.seed = j.value("seed", d.seed);
  c.eval_examples = j.value("eval_examples", d.eval_examples);
  c.eval_rtf = RtfMode::parse(j.value("eval_rtf", d.eval_rtf.str()));
  c.covariance_epsilon = j.value("covariance_epsilon", d.covariance_epsilon);
  c.reference_channel = j.value("reference_channel", d.reference_channel);
  c.output_dir = j.value("output_dir", d.output_dir);
  // net sizes follow the STFT and dataset unless given explicitly
  if (!j.contains("net") || !j.at("net").contains("num_bins")) c.net.num_bins = c.stft.num_bins();
  if (!j.contains("net") || !j.at("net").contains("num_speakers")) c.net.num_speakers = c.dataset.num_speakers;
}

TrainConfig load_train_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open config: " + path.string());
  try {
    return json::parse(in).get<TrainConfig>();
  } catch (const json::exception& e) {
    throw ValidationError("invalid config " + path.string() + ": " + e.what());
  }
}

std::uint64_t held_out_seed(std::uint64_t seed) { return example_seed(seed, 0x4e1d07u); }

// ---- pipeline ----

namespace {

Tensor row(const Tensor& stacked, std::size_t i) {
  ad::Shape s(stacked.shape().begin() + 1, stacked.shape().end());
  return ad::reshape(ad::slice(stacked, 0, i, 1), s);
}

ComplexTensor row(const ComplexTensor& stacked, std::size_t i) { return {row(stacked.re, i), row(stacked.im, i)}; }

}  // namespace

PreparedExample prepare_example(const SimulatedExample& ex, const StftConfig& stft_config, const LossConfig& loss,
                                std::size_t reference_channel) {
  PreparedExample p;
  p.id = ex.id;
  p.spec = stft(ex.mixture, stft_config);
  p.features = network_input(p.spec, reference_channel);
  p.length = ex.mixture.length();
  p.sample_rate = ex.mixture.sample_rate();
  const std::size_t taps = loss.taps_at(p.sample_rate);
  for (std::size_t i = 0; i < ex.num_speakers(); ++i) {
    p.dry.push_back(ex.dry_sources[i].samples);
    p.early_ref.push_back(ex.early_images[i].channels[reference_channel].samples);
    if (loss.kind == LossKind::kFSdr) {
      std::vector<std::complex<double>> tf(stft_config.num_frames(p.length) * stft_config.num_bins());
      stft_channel(stft_config, p.early_ref.back(), tf);
      p.early_ref_tf.push_back(std::move(tf));
    }
    if (loss.kind == LossKind::kCiSdr) p.wiener.emplace_back(p.dry.back(), taps, loss.ci_solver);
  }
  return p;
}

Separation beamform(Tape& tape, const Spectrogram& spec, const MaskSet& masks, const PipelineSettings& p,
                    std::size_t length) {
  const SpecTensor y = spec_tensor(tape, spec);
  const CovarianceSet cov = estimate_covariances(y, masks, p.covariance_epsilon);
  const RtfVector rtf = p.rtf.kind == RtfMode::Kind::kEigh
                            ? rtf_eigh(cov.target, cov.noise_rtf, p.reference_channel)
                            : rtf_power_iteration(cov.target, cov.noise_rtf, p.reference_channel, p.rtf.iterations);
  const BeamformerWeights w = mvdr_weights(cov.noise, rtf);
  Separation out{masks, apply_beamformer(w, y), {}};
  out.waveforms = ad::istft_op(out.spectra, p.stft, length);
  return out;
}

Separation separate(Tape& tape, const NetConfig& net, const BoundParameters& params, const Spectrogram& spec,
                    const RealMatrix& features, const PipelineSettings& p, std::size_t length) {
  return beamform(tape, spec, forward(tape, net, params, features), p, length);
}

PitResult training_loss(const LossConfig& loss, const PreparedExample& ex, const Separation& sep) {
  Tape& tape = sep.waveforms.tape();
  const std::size_t I = ex.dry.size();
  const std::size_t L = ex.length;
  std::vector<Tensor> targets;
  std::vector<ComplexTensor> tf_targets;
  if (loss.kind == LossKind::kSdr || loss.kind == LossKind::kSiSdr)
    for (const auto& d : ex.early_ref) targets.push_back(tape.constant({L}, d));
  if (loss.kind == LossKind::kFSdr) {
    const ad::Shape s{ex.spec.num_frames, ex.spec.num_bins};
    for (const auto& d : ex.early_ref_tf) tf_targets.push_back(ad::complex_constant(tape, s, d));
  }

  return pit_wrap(I, sep.waveforms.dim(0), [&](std::size_t t, std::size_t e) {
    switch (loss.kind) {
      case LossKind::kCiSdr:
        return ci_sdr_term(ex.wiener[t], row(sep.waveforms, e), loss.log_floor, t);
      case LossKind::kSiSdr:
        return si_sdr_term(targets[t], row(sep.waveforms, e), loss.log_floor);
      case LossKind::kSdr:
        return sdr_term(targets[t], row(sep.waveforms, e), loss.log_floor);
      case LossKind::kFSdr:
        return f_sdr_term(tf_targets[t], row(sep.spectra, e), loss.log_floor);
    }
    throw ValidationError("unknown loss kind");
  });
}

// ---- optimisation ----

Adam::Adam(const Parameters& params, const AdamConfig& config) : config_(config) {
  for (const auto& a : params.arrays) {
    m_.emplace_back(a.values.size(), 0.0);
    v_.emplace_back(a.values.size(), 0.0);
  }
}

void Adam::step(Parameters& params, const std::vector<std::vector<double>>& grads) {
  ++t_;
  const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
  for (std::size_t p = 0; p < params.arrays.size(); ++p) {
    auto& x = params.arrays[p].values;
    const auto& g = grads[p];
    for (std::size_t k = 0; k < x.size(); ++k) {
      m_[p][k] = config_.beta1 * m_[p][k] + (1.0 - config_.beta1) * g[k];
      v_[p][k] = config_.beta2 * v_[p][k] + (1.0 - config_.beta2) * g[k] * g[k];
      x[k] -= config_.learning_rate * (m_[p][k] / c1) / (std::sqrt(v_[p][k] / c2) + config_.eps);
    }
  }
}

double clip_global_norm(std::vector<std::vector<double>>& grads, double max_norm) {
  double sq = 0.0;
  for (const auto& g : grads)
    for (double v : g) sq += v * v;
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const double s = max_norm / norm;
    for (auto& g : grads)
      for (double& v : g) v *= s;
  }
  return norm;
}

namespace {

json checkpoint_metadata(const TrainConfig& c, std::size_t step, int sample_rate) {
  return {{"step", step},
          {"stft", c.stft},
          {"loss", c.loss},
          {"sample_rate", sample_rate},
          {"num_channels", c.dataset.num_mics},
          {"reference_channel", c.reference_channel},
          {"eta_max", c.eta_max},
          {"covariance_epsilon", c.covariance_epsilon},
          {"seed", c.seed}};
}

PipelineSettings settings_from(const json& meta, const RtfMode& rtf) {
  PipelineSettings p;
  p.stft = meta.at("stft").get<StftConfig>();
  p.rtf = rtf;
  p.covariance_epsilon = meta.value("covariance_epsilon", 0.01);
  p.reference_channel = meta.value("reference_channel", std::size_t{0});
  return p;
}

double mean_of(const std::vector<double>& v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

}  // namespace

TrainResult train(const TrainConfig& config_in, const std::vector<SimulatedExample>* train_set,
                  const std::vector<SimulatedExample>* eval_set) {
  TrainConfig config = config_in;
  config.validate();
  const std::filesystem::path out_dir = config.output_dir;
  std::filesystem::create_directories(out_dir);

  std::vector<SimulatedExample> generated_train, generated_eval;
  if (train_set == nullptr) {
    generated_train = make_dataset(config.dataset, config.seed);
    train_set = &generated_train;
  }
  if (eval_set == nullptr && config.eval_examples > 0) {
    DatasetConfig held = config.dataset;
    held.num_examples = config.eval_examples;
    generated_eval = make_dataset(held, held_out_seed(config.seed));
    eval_set = &generated_eval;
  }
  if (train_set->empty() && config.steps > 0) throw ValidationError("training set is empty");
  const int fs = train_set->empty() ? config.dataset.sample_rate : train_set->front().mixture.sample_rate();

  std::vector<PreparedExample> prepared;
  prepared.reserve(train_set->size());
  for (const auto& ex : *train_set) {
    if (ex.mixture.num_channels() != config.dataset.num_mics)
      throw ValidationError("example " + ex.id + " has " + std::to_string(ex.mixture.num_channels()) +
                            " channels, config expects " + std::to_string(config.dataset.num_mics));
    prepared.push_back(prepare_example(ex, config.stft, config.loss, config.reference_channel));
  }

  TrainResult result;
  result.params = init_params(config.net);
  result.log = out_dir / "train_log.jsonl";
  std::ofstream log(result.log);
  if (!log) throw ValidationError("cannot write training log: " + result.log.string());
  {
    std::ofstream cfg(out_dir / "config.json");
    cfg << json(config).dump(2) << '\n';
  }

  Adam adam(result.params, config.optimizer);
  const PipelineSettings settings{config.stft, RtfMode::power(config.eta_max), config.covariance_epsilon,
                                  config.reference_channel};

  std::mt19937_64 order_rng(example_seed(config.seed, 0x0dde7u));
  std::vector<std::size_t> order(prepared.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = order.size();

  auto save = [&](const std::filesystem::path& path, std::size_t step) {
    save_checkpoint(path, Checkpoint{config.net, result.params, checkpoint_metadata(config, step, fs)});
  };

  for (std::size_t step = 1; step <= config.steps; ++step) {
    if (cursor == order.size()) {
      std::shuffle(order.begin(), order.end(), order_rng);
      cursor = 0;
    }
    const PreparedExample& ex = prepared[order[cursor++]];
    const auto t0 = std::chrono::steady_clock::now();

    Tape tape;
    const BoundParameters params = bind(tape, result.params);
    std::vector<std::vector<double>> grads;
    double loss_db = 0.0;
    std::vector<std::size_t> perm;
    try {
      const Separation sep = separate(tape, config.net, params, ex.spec, ex.features, settings, ex.length);
      const PitResult pit = training_loss(config.loss, ex, sep);
      loss_db = pit.loss.item();
      perm = pit.permutation;
      if (!std::isfinite(loss_db)) throw NumericalError("loss is " + std::to_string(loss_db));
      const ad::GradientMap g = tape.backward(pit.loss);
      for (const Tensor& leaf : params.ordered) grads.push_back(g.at(leaf));
    } catch (const NumericalError& e) {
      json dump = {{"step", step}, {"example", ex.id}, {"error", e.what()}};
      std::ofstream(out_dir / "nan_dump.json") << dump.dump(2) << '\n';
      log << json{{"type", "abort"}, {"step", step}, {"example", ex.id}, {"error", e.what()}}.dump() << std::endl;
      throw NumericalError("training aborted at step " + std::to_string(step) + " on example " + ex.id + ": " +
                           e.what());
    }

    const double grad_norm = clip_global_norm(grads, config.grad_clip_norm);
    adam.step(result.params, grads);
    result.losses.push_back(loss_db);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    log << json{{"type", "step"}, {"step", step},           {"example", ex.id},    {"loss_db", loss_db},
                {"grad_norm", grad_norm}, {"permutation", perm}, {"seconds", secs}}
               .dump()
        << '\n';

    if (step % config.eval_every == 0 || step == config.steps) {
      const auto path = out_dir / ("checkpoint_" + std::to_string(step) + ".bin");
      save(path, step);
      json rec = {{"type", "checkpoint"}, {"step", step}, {"path", path.string()},
                  {"train_loss_db_recent", mean_of(std::vector<double>(
                                               result.losses.end() - std::min<std::ptrdiff_t>(
                                                                          static_cast<std::ptrdiff_t>(config.eval_every),
                                                                          static_cast<std::ptrdiff_t>(result.losses.size())),
                                               result.losses.end()))}};
      if (eval_set != nullptr && !eval_set->empty()) {
        const auto report = evaluate_model(Checkpoint{config.net, result.params, checkpoint_metadata(config, step, fs)},
                                           *eval_set, config.eval_rtf);
        rec["eval_sdr_db"] = report.mean_sdr_db;
        rec["eval_si_sdr_db"] = report.mean_si_sdr_db;
      }
      log << rec.dump() << std::endl;
    }
  }

  result.checkpoint = out_dir / "final.bin";
  save(result.checkpoint, config.steps);
  log.flush();
  return result;
}

// ---- inference ----

std::vector<Waveform> enhance(const Checkpoint& ck, const MultichannelWaveform& input, const RtfMode& rtf) {
  input.validate();
  const json& meta = ck.metadata;
  const auto channels = meta.value("num_channels", input.num_channels());
  if (input.num_channels() != channels)
    throw ValidationError("input has " + std::to_string(input.num_channels()) + " channels, the model was trained on " +
                          std::to_string(channels));
  const int fs = meta.value("sample_rate", input.sample_rate());
  if (input.sample_rate() != fs)
    throw ValidationError("input sample rate " + std::to_string(input.sample_rate()) + " differs from the model's " +
                          std::to_string(fs));
  const PipelineSettings p = settings_from(meta, rtf);
  const std::size_t I = ck.config.num_speakers;

  // A silent input has all-zero covariances, for which no RTF exists; the
  // beamformer output of silence is silence whatever the weights.
  bool silent = true;
  for (const auto& ch : input.channels)
    for (double v : ch.samples) silent = silent && v == 0.0;
  if (silent) return std::vector<Waveform>(I, Waveform{std::vector<double>(input.length(), 0.0), fs});

  const Spectrogram spec = stft(input, p.stft);
  Tape tape;
  ad::NoGradGuard guard(tape);
  const BoundParameters params = bind(tape, ck.params, false);
  const Separation sep =
      separate(tape, ck.config, params, spec, network_input(spec, p.reference_channel), p, input.length());
  std::vector<Waveform> out;
  const auto v = sep.waveforms.values();
  for (std::size_t i = 0; i < I; ++i)
    out.push_back({std::vector<double>(v.begin() + static_cast<std::ptrdiff_t>(i * input.length()),
                                       v.begin() + static_cast<std::ptrdiff_t>((i + 1) * input.length())),
                   fs});
  return out;
}

std::vector<Waveform> enhance(const std::filesystem::path& checkpoint, const MultichannelWaveform& input,
                              const RtfMode& rtf) {
  return enhance(load_checkpoint(checkpoint), input, rtf);
}

// ---- evaluation ----

double UtteranceMetrics::mean_sdr() const { return mean_of(sdr_db); }
double UtteranceMetrics::mean_si_sdr() const { return mean_of(si_sdr_db); }

void MetricsReport::finalize() {
  double a = 0.0, b = 0.0;
  for (const auto& r : records) {
    a += r.mean_sdr();
    b += r.mean_si_sdr();
  }
  const double n = static_cast<double>(records.size());
  mean_sdr_db = records.empty() ? 0.0 : a / n;
  mean_si_sdr_db = records.empty() ? 0.0 : b / n;
}

void to_json(json& j, const MetricsReport& r) {
  json recs = json::array();
  for (const auto& u : r.records)
    recs.push_back({{"id", u.id}, {"permutation", u.permutation}, {"bss_eval_sdr_db", u.sdr_db}, {"si_sdr_db", u.si_sdr_db}});
  j = {{"records", recs},
       {"missing", r.missing},
       {"corpus", {{"bss_eval_sdr_db", r.mean_sdr_db}, {"si_sdr_db", r.mean_si_sdr_db}, {"utterances", r.records.size()}}}};
}

std::size_t bss_eval_taps(int sample_rate) { return LossConfig{}.taps_at(sample_rate); }

UtteranceMetrics score_utterance(const std::string& id, const std::vector<std::vector<double>>& dry,
                                 const std::vector<std::vector<double>>& early_ref,
                                 const std::vector<std::vector<double>>& estimates, std::size_t taps) {
  const std::size_t I = dry.size();
  if (estimates.size() != I || early_ref.size() != I)
    throw ValidationError("utterance " + id + ": " + std::to_string(estimates.size()) + " estimates for " +
                          std::to_string(I) + " references");
  // sdr[t][e] for every pair, then the assignment with the best mean.
  // A pair whose projection onto the source vanishes (an estimate holding
  // none of that speaker) scores -inf so the search never picks it.
  std::vector<std::vector<double>> sdr(I, std::vector<double>(I));
  for (std::size_t t = 0; t < I; ++t)
    for (std::size_t e = 0; e < I; ++e) {
      try {
        sdr[t][e] = ci_sdr_metric(dry[t], estimates[e], taps);
      } catch (const NumericalError&) {
        sdr[t][e] = -std::numeric_limits<double>::infinity();
      }
    }
  std::vector<std::size_t> perm(I), best;
  std::iota(perm.begin(), perm.end(), 0);
  double best_score = -std::numeric_limits<double>::infinity();
  do {
    double s = 0.0;
    for (std::size_t t = 0; t < I; ++t) s += sdr[t][perm[t]];
    if (best.empty() || s > best_score) {
      best_score = s;
      best = perm;
    }
  } while (std::next_permutation(perm.begin(), perm.end()));
  if (std::isinf(best_score)) throw NumericalError("utterance " + id + ": no estimate contains any reference source");

  UtteranceMetrics u;
  u.id = id;
  u.permutation = best;
  for (std::size_t t = 0; t < I; ++t) {
    u.sdr_db.push_back(sdr[t][best[t]]);
    u.si_sdr_db.push_back(si_sdr_metric(early_ref[t], estimates[best[t]]));
  }
  return u;
}

UtteranceMetrics score_utterance(const SimulatedExample& ex, const std::vector<std::vector<double>>& estimates,
                                 std::size_t taps) {
  std::vector<std::vector<double>> dry, early;
  for (std::size_t i = 0; i < ex.num_speakers(); ++i) {
    dry.push_back(ex.dry_sources[i].samples);
    early.push_back(ex.early_images[i].channels[ex.reference_channel].samples);
  }
  return score_utterance(ex.id, dry, early, estimates, taps);
}

MetricsReport evaluate(const std::filesystem::path& estimates_dir, const std::filesystem::path& manifest) {
  const auto refs = read_dataset(manifest);
  MetricsReport report;
  for (const auto& ex : refs) {
    std::vector<std::vector<double>> est;
    bool complete = true;
    for (std::size_t i = 0; i < ex.num_speakers(); ++i) {
      const auto path = estimates_dir / ex.id / ("est" + std::to_string(i) + ".wav");
      if (!std::filesystem::exists(path)) {
        complete = false;
        break;
      }
      auto w = read_wav(path);
      auto samples = w.channels.front().samples;
      samples.resize(ex.mixture.length(), 0.0);
      est.push_back(std::move(samples));
    }
    if (!complete) {
      report.missing.push_back(ex.id);
      continue;
    }
    report.records.push_back(score_utterance(ex, est, bss_eval_taps(ex.mixture.sample_rate())));
  }
  report.finalize();
  return report;
}

MetricsReport evaluate_model(const Checkpoint& ck, const std::vector<SimulatedExample>& examples, const RtfMode& rtf) {
  MetricsReport report;
  report.records.resize(examples.size());
  const auto n = static_cast<std::ptrdiff_t>(examples.size());
#pragma omp parallel for schedule(dynamic)
  for (std::ptrdiff_t k = 0; k < n; ++k) {
    const auto& ex = examples[static_cast<std::size_t>(k)];
    std::vector<std::vector<double>> est;
    for (auto& w : enhance(ck, ex.mixture, rtf)) est.push_back(std::move(w.samples));
    report.records[static_cast<std::size_t>(k)] = score_utterance(ex, est, bss_eval_taps(ex.mixture.sample_rate()));
  }
  report.finalize();
  return report;
}

MetricsReport evaluate_mixture(const std::vector<SimulatedExample>& examples) {
  MetricsReport report;
  for (const auto& ex : examples) {
    const auto& y = ex.mixture.channels[ex.reference_channel].samples;
    report.records.push_back(score_utterance(ex, std::vector<std::vector<double>>(ex.num_speakers(), y),
                                             bss_eval_taps(ex.mixture.sample_rate())));
  }
  report.finalize();
  return report;
}

std::vector<double> oracle_masks(const SimulatedExample& ex, const StftConfig& stft_config) {
  const std::size_t r = ex.reference_channel, I = ex.num_speakers();
  const std::size_t L = ex.mixture.length();
  const std::size_t T = stft_config.num_frames(L), F = stft_config.num_bins();
  std::vector<std::complex<double>> y(T * F), d(T * F);
  stft_channel(stft_config, ex.mixture.channels[r].samples, y);

  std::vector<double> masks(3 * T * F * I);
  for (std::size_t i = 0; i < I; ++i) {
    stft_channel(stft_config, ex.early_images[i].channels[r].samples, d);
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t f = 0; f < F; ++f) {
        const double pd = std::norm(d[t * F + f]);
        const double pi = std::norm(y[t * F + f] - d[t * F + f]);
        const double m = pd + pi > 0.0 ? pd / (pd + pi) : 0.0;
        masks[((0 * T + t) * F + f) * I + i] = m;
        masks[((1 * T + t) * F + f) * I + i] = 1.0 - m;
        masks[((2 * T + t) * F + f) * I + i] = 1.0 - m;
      }
  }
  return masks;
}

MetricsReport oracle_mask_baseline(const SimulatedExample& ex, const StftConfig& stft_config, const RtfMode& rtf) {
  const Spectrogram spec = stft(ex.mixture, stft_config);
  Tape tape;
  ad::NoGradGuard guard(tape);
  const std::size_t I = ex.num_speakers();
  const MaskSet masks{tape.constant({3, spec.num_frames, spec.num_bins, I}, oracle_masks(ex, stft_config))};
  const PipelineSettings p{stft_config, rtf, 0.01, ex.reference_channel};
  const Separation sep = beamform(tape, spec, masks, p, ex.mixture.length());
  const auto v = sep.waveforms.values();
  const std::size_t L = ex.mixture.length();
  std::vector<std::vector<double>> est;
  for (std::size_t i = 0; i < I; ++i)
    est.emplace_back(v.begin() + static_cast<std::ptrdiff_t>(i * L), v.begin() + static_cast<std::ptrdiff_t>((i + 1) * L));
  MetricsReport report;
  report.records.push_back(score_utterance(ex, est, bss_eval_taps(ex.mixture.sample_rate())));
  report.finalize();
  return report;
}

MetricsReport oracle_mask_baseline(const std::vector<SimulatedExample>& examples, const StftConfig& stft_config,
                                   const RtfMode& rtf) {
  MetricsReport report;
  for (const auto& ex : examples) report.records.push_back(oracle_mask_baseline(ex, stft_config, rtf).records.front());
  report.finalize();
  return report;
}

ad::GradCheckResult pipeline_grad_check(LossKind kind, std::uint64_t seed, std::size_t eta) {
  constexpr std::size_t M = 3, T = 12, I = 2, L = 48;
  constexpr int fs = 16000;
  const StftConfig stft_config{16, 4};  // F = 9, ceil(48 / 4) = 12 frames
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal;
  std::uniform_real_distribution<double> unit(0.2, 0.8);
  auto noise = [&](std::size_t n) {
    std::vector<double> v(n);
    for (double& x : v) x = normal(rng);
    return v;
  };

  LossConfig loss;
  loss.kind = kind;
  loss.ci_filter_taps = 8;
  PreparedExample ex;
  MultichannelWaveform y;
  for (std::size_t m = 0; m < M; ++m) y.channels.push_back({noise(L), fs});
  ex.spec = stft(y, stft_config);
  ex.length = L;
  ex.sample_rate = fs;
  for (std::size_t i = 0; i < I; ++i) {
    ex.dry.push_back(noise(L));
    ex.early_ref.push_back(noise(L));
    std::vector<std::complex<double>> tf(T * stft_config.num_bins());
    stft_channel(stft_config, ex.early_ref.back(), tf);
    ex.early_ref_tf.push_back(std::move(tf));
    ex.wiener.emplace_back(ex.dry.back(), loss.taps_at(fs), loss.ci_solver);
  }
  std::vector<double> masks(3 * T * stft_config.num_bins() * I);
  for (double& v : masks) v = unit(rng);

  const PipelineSettings p{stft_config, RtfMode::power(eta), 0.01, 0};
  const ad::ScalarFn f = [&](Tape& tape, const std::vector<Tensor>& leaves) {
    const Separation sep = beamform(tape, ex.spec, MaskSet{leaves[0]}, p, L);
    return training_loss(loss, ex, sep).loss;
  };
  return ad::grad_check(f, {{{3, T, stft_config.num_bins(), I}, masks}});
}

}  // namespace bfsep
