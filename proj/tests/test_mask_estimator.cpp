#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "bfsep/errors.hpp"
#include "bfsep/grad_check.hpp"
#include "bfsep/mask_estimator.hpp"
#include "doctest.h"
#include "support.hpp"

using namespace bfsep;
using namespace bfsep::ad;

namespace {

RealMatrix random_features(std::mt19937_64& rng, std::size_t T, std::size_t F) {
  RealMatrix m(T, F);
  m.data = testing::randn(rng, T * F);
  return m;
}

std::vector<double> run(const NetConfig& cfg, const Parameters& p, const RealMatrix& x) {
  Tape tape;
  const auto masks = forward(tape, cfg, bind(tape, p), x);
  const auto v = masks.masks.values();
  return {v.begin(), v.end()};
}

}  // namespace

TEST_CASE("zero weights give one half everywhere") {
  const NetConfig cfg{2, 9, 1, 4, true, 2, 0};
  std::mt19937_64 rng(1);
  for (double v : run(cfg, zero_params(cfg), random_features(rng, 6, 9))) CHECK(v == 0.5);
}

TEST_CASE("output shape and range") {
  const NetConfig cfg{2, 513, 1, 8, true, 2, 4};
  std::mt19937_64 rng(2);
  Tape tape;
  const auto masks = forward(tape, cfg, bind(tape, init_params(cfg)), random_features(rng, 50, 513));
  CHECK(masks.masks.shape() == Shape{3, 50, 513, 2});
  for (double v : masks.masks.values()) CHECK((v > 0.0 && v < 1.0));
  CHECK_NOTHROW(masks.validate());
}

TEST_CASE("initialisation") {
  NetConfig cfg{2, 100, 2, 16, true, 2, 7};
  const auto a = init_params(cfg), b = init_params(cfg);
  CHECK(a == b);
  cfg.seed = 8;
  CHECK_FALSE(a == init_params(cfg));

  for (double v : a.get("gru0_fwd_w_ih").values) CHECK(std::abs(v) <= 0.1);
  for (double v : a.get("gru0_bwd_b_ih").values) CHECK(std::abs(v) <= 0.1);
  const double bound = 1.0 / std::sqrt(16.0);
  double widest = 0.0;
  for (double v : a.get("gru0_fwd_w_hh").values) widest = std::max(widest, std::abs(v));
  CHECK(widest <= bound);
  CHECK(widest > 0.9 * bound);
  CHECK(a.get("gru1_fwd_w_ih").shape == Shape{32, 48});
  CHECK(a.get("proj2_w").shape == Shape{32, 600});
}

TEST_CASE("forward is deterministic") {
  const NetConfig cfg{2, 9, 1, 5, true, 2, 3};
  std::mt19937_64 rng(3);
  const auto x = random_features(rng, 12, 9);
  const auto p = init_params(cfg);
  CHECK(run(cfg, p, x) == run(cfg, p, x));
}

TEST_CASE("perturbing one frame changes other frames") {
  const NetConfig cfg{1, 7, 1, 6, true, 2, 5};
  std::mt19937_64 rng(4);
  auto x = random_features(rng, 10, 7);
  const auto p = init_params(cfg);
  const auto base = run(cfg, p, x);
  const std::size_t t0 = 4;
  for (std::size_t f = 0; f < 7; ++f) x(t0, f) += 1.0;
  const auto moved = run(cfg, p, x);

  // masks (3, T, F, I): compare frames before and after t0.
  const std::size_t T = 10, F = 7;
  for (std::size_t t : {0u, 3u, 5u, 9u}) {
    double diff = 0.0;
    for (std::size_t k = 0; k < 3; ++k)
      for (std::size_t f = 0; f < F; ++f) diff += std::abs(base[(k * T + t) * F + f] - moved[(k * T + t) * F + f]);
    CHECK(diff > 1e-6);
  }
}

TEST_CASE("gradient of the mean mask") {
  std::mt19937_64 rng(5);
  for (bool bidir : {true, false}) {
    const NetConfig cfg{2, 5, 2, 3, bidir, 2, 9};
    const auto p = init_params(cfg);
    const auto x = random_features(rng, 6, 5);
    std::vector<GradPoint> pt;
    for (const auto& a : p.arrays) {
      auto vals = a.values;
      for (double& v : vals) v *= 3.0;  // larger weights make the gates work harder
      pt.push_back({a.shape, vals});
    }
    const auto result = grad_check(
        [&](Tape& tape, const std::vector<Tensor>& leaves) {
          BoundParameters b;
          for (std::size_t i = 0; i < leaves.size(); ++i) {
            b.leaves.emplace(p.arrays[i].name, leaves[i]);
            b.ordered.push_back(leaves[i]);
          }
          return mean(forward(tape, cfg, b, x).masks);
        },
        pt);
    INFO("worst leaf " << result.worst_leaf << "[" << result.worst_index << "]: analytic " << result.analytic
                       << ", numeric " << result.numeric);
    CHECK(result.max_relative_error < 1e-4);
  }
}

TEST_CASE("feature normalisation") {
  std::mt19937_64 rng(6);
  RealMatrix x(40, 3);
  for (std::size_t t = 0; t < 40; ++t)
    for (std::size_t f = 0; f < 3; ++f) x(t, f) = 5.0 * double(f) + double(f + 1) * testing::randn(rng, 1)[0];
  const auto y = normalize_features(x);
  for (std::size_t f = 0; f < 3; ++f) {
    double m = 0.0, v = 0.0;
    for (std::size_t t = 0; t < 40; ++t) m += y(t, f);
    m /= 40.0;
    for (std::size_t t = 0; t < 40; ++t) v += (y(t, f) - m) * (y(t, f) - m);
    CHECK(std::abs(m) < 1e-12);
    CHECK(v / 40.0 == doctest::Approx(1.0).epsilon(1e-8));
  }
}

TEST_CASE("width mismatch is rejected") {
  const NetConfig cfg{2, 9, 1, 4, true, 2, 0};
  std::mt19937_64 rng(7);
  Tape tape;
  const auto b = bind(tape, init_params(cfg));
  CHECK_THROWS_AS(forward(tape, cfg, b, random_features(rng, 5, 8)), ShapeError);
  NetConfig bad = cfg;
  bad.projection_layers = 3;
  CHECK_THROWS_AS(init_params(bad), ValidationError);
}

TEST_CASE("checkpoint round trip") {
  const NetConfig cfg{3, 11, 2, 4, true, 2, 12};
  Checkpoint ck{cfg, init_params(cfg), {{"note", "x"}, {"step", 17}}};
  const auto path = std::filesystem::temp_directory_path() / "bfsep_test_ck.bin";
  save_checkpoint(path, ck);
  const auto back = load_checkpoint(path);
  CHECK(back.config == cfg);
  CHECK(back.params == ck.params);
  CHECK(back.metadata == ck.metadata);

  std::ifstream in(path, std::ios::binary);
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  in.close();
  auto write = [&](const std::string& b) { std::ofstream(path, std::ios::binary) << b; };

  write(bytes.substr(0, bytes.size() - 8));
  CHECK_THROWS_AS(load_checkpoint(path), ValidationError);
  write(bytes + "x");
  CHECK_THROWS_AS(load_checkpoint(path), ValidationError);
  write("not a checkpoint at all");
  CHECK_THROWS_AS(load_checkpoint(path), ValidationError);
  std::filesystem::remove(path);
}
