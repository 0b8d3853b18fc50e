// bfsep command-line tool: dataset simulation, training, enhancement,
// evaluation, the oracle-mask baseline and gradient checks.
//
// Exit status: 0 success, 2 invalid input (including missing estimates in
// evaluate), 3 numerical failure.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>

#include "CLI11.hpp"
#include "bfsep/errors.hpp"
#include "bfsep/trainer.hpp"

namespace fs = std::filesystem;
using namespace bfsep;
using nlohmann::json;

namespace {

constexpr int kExitValidation = 2;
constexpr int kExitNumerical = 3;

struct Overrides {
  std::optional<std::size_t> steps;
  std::optional<std::string> loss;
  std::optional<std::string> rtf;
  std::optional<std::uint64_t> seed;
};

void add_overrides(CLI::App* cmd, Overrides& o) {
  cmd->add_option("--steps", o.steps, "Number of training steps");
  cmd->add_option("--loss", o.loss, "ci_sdr | si_sdr | sdr | f_sdr");
  cmd->add_option("--rtf", o.rtf, "RTF estimator: eigh | power:<n>");
  cmd->add_option("--seed", o.seed, "Random seed");
}

TrainConfig load_config(const std::string& path, const Overrides& o) {
  TrainConfig c = path.empty() ? TrainConfig{} : load_train_config(path);
  if (o.steps) c.steps = *o.steps;
  if (o.loss) c.loss.kind = loss_kind_from_string(*o.loss);
  if (o.rtf) c.eval_rtf = RtfMode::parse(*o.rtf);
  if (o.seed) c.seed = *o.seed;
  c.validate();
  return c;
}

void emit(const json& j, const std::string& path) {
  if (path.empty() || path == "-") {
    std::cout << j.dump(2) << '\n';
    return;
  }
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot write " + path);
  out << j.dump(2) << '\n';
}

void log_line(const json& j) { std::cout << j.dump() << std::endl; }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Mask-based MVDR speech separation toolkit"};
  app.require_subcommand(1);

  // ---- simulate ----
  auto* sim = app.add_subcommand("simulate", "Generate a reverberant mixture dataset");
  std::string sim_config, sim_out;
  std::optional<std::size_t> sim_count;
  std::optional<std::uint64_t> sim_seed;
  bool sim_held_out = false;
  sim->add_option("--config", sim_config, "Training config whose dataset section is used");
  sim->add_option("--out", sim_out, "Output directory")->required();
  sim->add_option("--num-examples", sim_count, "Override the number of examples");
  sim->add_option("--seed", sim_seed, "Random seed");
  sim->add_flag("--held-out", sim_held_out, "Generate the held-out set that belongs to the seed");

  // ---- train ----
  auto* tr = app.add_subcommand("train", "Train the mask estimator through the beamformer");
  std::string tr_config, tr_out, tr_manifest, tr_eval_manifest;
  Overrides tr_over;
  tr->add_option("--config", tr_config, "Training config (JSON)");
  tr->add_option("--output-dir", tr_out, "Where checkpoints and the log go");
  tr->add_option("--train-manifest", tr_manifest, "Train on a simulated dataset on disk");
  tr->add_option("--eval-manifest", tr_eval_manifest, "Held-out dataset on disk");
  add_overrides(tr, tr_over);

  // ---- enhance ----
  auto* en = app.add_subcommand("enhance", "Separate mixtures with a trained checkpoint");
  std::string en_ck, en_input, en_manifest, en_out, en_rtf = "eigh";
  en->add_option("--checkpoint", en_ck, "Checkpoint file")->required();
  auto* en_in = en->add_option("--input", en_input, "Multichannel WAV");
  auto* en_man = en->add_option("--manifest", en_manifest, "Dataset manifest; writes <out>/<id>/est<i>.wav");
  en_in->excludes(en_man);
  en->add_option("--out", en_out, "Output directory")->required();
  en->add_option("--rtf", en_rtf, "RTF estimator: eigh | power:<n>");

  // ---- evaluate ----
  auto* ev = app.add_subcommand("evaluate", "Score estimates against a dataset");
  std::string ev_est, ev_manifest, ev_out;
  ev->add_option("--estimates", ev_est, "Directory holding <id>/est<i>.wav")->required();
  ev->add_option("--manifest", ev_manifest, "Reference manifest")->required();
  ev->add_option("--out", ev_out, "Metrics JSON (stdout when omitted)");

  // ---- oracle-baseline ----
  auto* ob = app.add_subcommand("oracle-baseline", "MVDR with oracle Wiener-like masks");
  std::string ob_manifest, ob_out, ob_config, ob_rtf = "eigh";
  ob->add_option("--manifest", ob_manifest, "Dataset manifest")->required();
  ob->add_option("--config", ob_config, "Training config supplying the STFT settings");
  ob->add_option("--rtf", ob_rtf, "RTF estimator: eigh | power:<n>");
  ob->add_option("--out", ob_out, "Metrics JSON (stdout when omitted)");

  // ---- grad-check ----
  auto* gc = app.add_subcommand("grad-check", "Finite-difference check of the full pipeline gradient");
  std::string gc_loss = "all";
  std::uint64_t gc_seed = 0;
  std::size_t gc_eta = 3;
  double gc_tol = 1e-4;
  gc->add_option("--loss", gc_loss, "ci_sdr | si_sdr | sdr | f_sdr | all");
  gc->add_option("--seed", gc_seed, "Random seed");
  gc->add_option("--eta", gc_eta, "Power iterations");
  gc->add_option("--tolerance", gc_tol, "Maximum relative error");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitValidation;
  }

  try {
    if (sim->parsed()) {
      Overrides o;
      o.seed = sim_seed;
      TrainConfig c = load_config(sim_config, o);
      DatasetConfig d = c.dataset;
      std::uint64_t seed = c.seed;
      if (sim_held_out) {
        d.num_examples = c.eval_examples;
        seed = held_out_seed(seed);
      }
      if (sim_count) d.num_examples = *sim_count;
      const auto manifest = write_dataset(sim_out, make_dataset(d, seed));
      log_line({{"type", "simulate"}, {"manifest", manifest.string()}, {"examples", d.num_examples}, {"seed", seed}});
    } else if (tr->parsed()) {
      TrainConfig c = load_config(tr_config, tr_over);
      if (!tr_out.empty()) c.output_dir = tr_out;
      std::vector<SimulatedExample> train_set, eval_set;
      if (!tr_manifest.empty()) train_set = read_dataset(tr_manifest);
      if (!tr_eval_manifest.empty()) eval_set = read_dataset(tr_eval_manifest);
      const auto r = train(c, tr_manifest.empty() ? nullptr : &train_set,
                           tr_eval_manifest.empty() ? nullptr : &eval_set);
      log_line({{"type", "train"},
                {"checkpoint", r.checkpoint.string()},
                {"log", r.log.string()},
                {"steps", r.losses.size()},
                {"final_loss_db", r.losses.empty() ? json(nullptr) : json(r.losses.back())}});
    } else if (en->parsed()) {
      const Checkpoint ck = load_checkpoint(en_ck);
      const RtfMode rtf = RtfMode::parse(en_rtf);
      auto write = [&](const fs::path& dir, const std::vector<Waveform>& out) {
        fs::create_directories(dir);
        for (std::size_t i = 0; i < out.size(); ++i) write_wav(dir / ("est" + std::to_string(i) + ".wav"), out[i]);
      };
      if (!en_manifest.empty()) {
        for (const auto& ex : read_dataset(en_manifest)) {
          write(fs::path(en_out) / ex.id, enhance(ck, ex.mixture, rtf));
          log_line({{"type", "enhance"}, {"id", ex.id}});
        }
      } else if (!en_input.empty()) {
        write(en_out, enhance(ck, read_wav(en_input), rtf));
        log_line({{"type", "enhance"}, {"input", en_input}, {"out", en_out}});
      } else {
        throw ValidationError("enhance needs --input or --manifest");
      }
    } else if (ev->parsed()) {
      const MetricsReport r = evaluate(ev_est, ev_manifest);
      emit(r, ev_out);
      if (!r.missing.empty()) {
        std::cerr << "missing estimates for " << r.missing.size() << " utterance(s):";
        for (const auto& id : r.missing) std::cerr << ' ' << id;
        std::cerr << '\n';
        return kExitValidation;
      }
    } else if (ob->parsed()) {
      const TrainConfig c = load_config(ob_config, {});
      emit(oracle_mask_baseline(read_dataset(ob_manifest), c.stft, RtfMode::parse(ob_rtf)), ob_out);
    } else if (gc->parsed()) {
      std::vector<LossKind> kinds;
      if (gc_loss == "all")
        kinds = {LossKind::kCiSdr, LossKind::kSiSdr, LossKind::kSdr, LossKind::kFSdr};
      else
        kinds = {loss_kind_from_string(gc_loss)};
      bool ok = true;
      for (LossKind k : kinds) {
        const auto r = pipeline_grad_check(k, gc_seed, gc_eta);
        ok = ok && r.max_relative_error < gc_tol;
        log_line({{"type", "grad_check"},
                  {"loss", to_string(k)},
                  {"max_relative_error", r.max_relative_error},
                  {"coordinates", r.coordinates},
                  {"worst_index", r.worst_index},
                  {"pass", r.max_relative_error < gc_tol}});
      }
      if (!ok) return kExitNumerical;
    }
  } catch (const NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << '\n';
    return kExitNumerical;
  } catch (const ValidationError& e) {
    std::cerr << "invalid input: " << e.what() << '\n';
    return kExitValidation;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitValidation;
  }
  return 0;
}
