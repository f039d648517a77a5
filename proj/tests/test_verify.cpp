#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "pcmamba/verify.hpp"

using namespace pcm;

namespace {

NetworkConfig tiny_net() {
  NetworkConfig cfg;
  cfg.height = 32;
  cfg.width = 32;
  cfg.embed_dim = 4;
  cfg.state_dim = 2;
  cfg.stage_depths = {1, 0, 0, 0};
  cfg.bottleneck_depth = 0;
  cfg.decoder_depths = {0, 0, 0};
  return cfg;
}

}  // namespace

TEST_CASE("check construction evaluates relations") {
  CHECK(make_check("a", 1.0, "<=", 2.0).pass);
  CHECK(!make_check("a", 3.0, "<=", 2.0).pass);
  CHECK(make_check("b", 2.0, ">=", 2.0).pass);
  CHECK(make_check("c", 0.0, "==", 0.0).pass);
  CHECK(!make_check("d", 1e-300, "==", 0.0).pass);
  CHECK(make_check("e", 0.5, "<", 1.0).pass);
  CHECK_THROWS_AS(make_check("f", 1.0, "!=", 0.0), std::invalid_argument);
}

TEST_CASE("probe reports serialize with their thresholds") {
  ProbeReport rep;
  rep.probe = "demo";
  rep.seed = 7;
  rep.seeds = 3;
  rep.measurements["x"] = 0.25;
  rep.checks.push_back(make_check("x_small", 0.25, "<=", 0.5));
  rep.runtime_seconds = 1.5;
  CHECK(rep.passed());

  const auto j = rep.to_json();
  CHECK(j["probe"] == "demo");
  CHECK(j["checks"][0]["threshold"] == 0.5);
  CHECK(j["checks"][0]["pass"] == true);
  CHECK(j["passed"] == true);

  const auto path =
      (std::filesystem::temp_directory_path() / "pcm_probe_test.json").string();
  rep.save(path);
  std::ifstream in(path);
  nlohmann::json back;
  in >> back;
  CHECK(back["measurements"]["x"] == 0.25);
  std::filesystem::remove(path);

  rep.checks.push_back(make_check("x_tiny", 0.25, "<=", 0.1));
  CHECK(!rep.passed());
}

TEST_CASE("finite-difference harness is exact on a linear map") {
  Rng rng(3);
  Tensor<double> x = Tensor<double>::randn(Shape{3, 4}, rng, 1.0);
  Tensor<double> w = Tensor<double>::randn(Shape{4, 2}, rng, 1.0);
  w.set_requires_grad(true);
  auto loss = [&] { return sum_all(matmul(x, w)); };
  CHECK(grad_check_params(loss, {{"w", &w}}, 1e-6) < 1e-9);
}

TEST_CASE("gradient suite passes all targets") {
  const ProbeReport rep = grad_check_suite(11);
  CHECK(rep.checks.size() == 4);
  for (const auto& c : rep.checks) {
    CAPTURE(c.name);
    CAPTURE(c.value);
    CHECK(c.pass);
  }
  CHECK(double(rep.measurements["linear"]) < 1e-8);
  CHECK(rep.runtime_seconds > 0);
}

TEST_CASE("scan oracle suite passes across lengths") {
  const ProbeReport rep = scan_oracle_suite(5, 4);
  for (const auto& c : rep.checks) {
    CAPTURE(c.name);
    CAPTURE(c.value);
    CHECK(c.pass);
  }
  CHECK(rep.measurements.contains("rel_err_L1"));
  CHECK(rep.measurements.contains("rel_err_L1024"));
  CHECK(double(rep.measurements["unit_gate_max_abs_diff"]) == 0.0);
}

TEST_CASE("epochs to threshold") {
  History h;
  for (int e = 0; e < 4; ++e) {
    EpochStats st;
    st.epoch = e;
    st.val_dice_mean = 0.2 * (e + 1);
    h.epochs.push_back(st);
  }
  CHECK(epochs_to_threshold(h, 0.1, 4) == 1);
  CHECK(epochs_to_threshold(h, 0.55, 4) == 3);
  CHECK(epochs_to_threshold(h, 0.95, 4) == 5);
  CHECK(epochs_to_threshold(History{}, 0.5, 7) == 8);
}

TEST_CASE("smoothness estimate recovers the quadratic curvature") {
  // f(W) = 0.5 * ||W x - y||^2 on a 3x3 W: the gradient difference operator is
  // right-multiplication by x x^T, whose largest eigenvalue is ||x||^2.
  const std::vector<double> x = {0.9, -0.4, 1.3};
  const std::vector<double> y = {0.2, -1.0, 0.5};
  const double lam = x[0] * x[0] + x[1] * x[1] + x[2] * x[2];
  auto grad_fn = [&](const std::vector<double>& w) {
    std::vector<double> r(3, 0.0);
    for (int i = 0; i < 3; ++i) {
      for (int j = 0; j < 3; ++j) r[i] += w[i * 3 + j] * x[j];
      r[i] -= y[i];
    }
    std::vector<double> g(9);
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) g[i * 3 + j] = r[i] * x[j];
    return g;
  };
  std::vector<double> w0(9, 0.1);
  Rng rng(2024);
  const double lhat = smoothness_estimate(grad_fn, w0, 4096, 1e-3, rng);
  CHECK(lhat <= lam * (1 + 1e-9));
  CHECK(lhat >= 0.9 * lam);

  CHECK_THROWS_AS(smoothness_estimate(grad_fn, w0, 4, 0.0, rng), std::invalid_argument);
  CHECK_THROWS_AS(smoothness_estimate(grad_fn, w0, 0, 1e-3, rng), std::invalid_argument);
}

TEST_CASE("smoothness probe runs end to end on a tiny instance") {
  SmoothnessConfig cfg;
  cfg.net = tiny_net();
  cfg.height = cfg.width = 32;
  cfg.n_pairs = 2;
  cfg.seeds = 1;
  cfg.batch = 1;
  const ProbeReport rep = smoothness_probe(cfg);
  REQUIRE(rep.measurements["per_seed"].size() == 1);
  const auto& e = rep.measurements["per_seed"][0];
  CHECK(double(e["lhat_full"]) > 0);
  CHECK(double(e["lhat_e2e"]) > 0);
  CHECK(std::isfinite(double(e["ratio"])));
  CHECK(rep.checks.size() == 1);

  SmoothnessConfig bad = cfg;
  bad.radius = 0;
  CHECK_THROWS_AS(smoothness_probe(bad), std::invalid_argument);
}

TEST_CASE("bias-variance preconditions and the frozen-model limit") {
  BiasVarianceConfig cfg;
  cfg.net = tiny_net();
  cfg.height = cfg.width = 32;
  cfg.n_resamples = 4;
  cfg.probe_pixels = 8;
  cfg.probe_images = 1;
  cfg.train_n = 2;
  cfg.val_n = 1;
  cfg.train.epochs = 1;
  cfg.train.lr0 = 1e-300;  // every resample trains to the same (initial) weights
  cfg.train.lr_min = 0;

  SUBCASE("too few resamples are rejected") {
    BiasVarianceConfig bad = cfg;
    bad.n_resamples = 1;
    CHECK_THROWS_AS(bias_variance_run(VariantKind::FullPC, bad, 1), std::invalid_argument);
  }
  SUBCASE("a frozen model has exactly zero predictive variance") {
    const BvOutcome out = bias_variance_run(VariantKind::FullPC, cfg, 9);
    CHECK(out.mean_variance == 0.0);
    CHECK(out.mean_bias_sq > 0.0);
    CHECK(out.excluded == 0);
  }
}

TEST_CASE("convergence experiment bookkeeping on a tiny instance") {
  ConvergenceConfig cfg;
  cfg.net = tiny_net();
  cfg.height = cfg.width = 32;
  cfg.train_n = 4;
  cfg.val_n = 2;
  cfg.budget = 1;
  cfg.seeds = 1;
  cfg.train.lr0 = 1e-6;
  cfg.train.lr_min = 0;
  cfg.train.batch_size = 2;
  const ProbeReport rep = convergence_experiment(cfg);
  REQUIRE(rep.measurements["per_seed"].size() == 1);
  const auto& e = rep.measurements["per_seed"][0];
  const int fe = e["full_epochs_to_threshold"];
  const int ee = e["e2e_epochs_to_threshold"];
  CHECK(fe >= 1);
  CHECK(fe <= 2);  // budget + 1
  CHECK(ee >= 1);
  CHECK(ee <= 2);
  CHECK(e["full_val_dice"].size() == 1);

  const ProbeReport rep2 = convergence_experiment(cfg);
  CHECK(rep.measurements.dump() == rep2.measurements.dump());
}

TEST_CASE("a variant that cannot learn records the sentinel epoch count") {
  // lr so small that updates vanish: the dice threshold is unreachable.
  NetworkConfig nc = tiny_net();
  nc.variant = VariantKind::FullPC;
  auto net = build_variant<float>(nc, 3);
  Dataset<float> ds;
  ds.manifest.n_samples = 3;
  for (int i = 0; i < 3; ++i) ds.samples.push_back(generate_phantom<float>(40 + i, 32, 32, 0.02));
  ds.split = {Split::Train, Split::Train, Split::Val};
  TrainConfig tc;
  tc.epochs = 2;
  tc.lr0 = 1e-300;
  tc.batch_size = 2;
  const History h = train_loop(net, ds, tc);
  REQUIRE(h.epochs.size() == 2);
  CHECK(epochs_to_threshold(h, 0.99, 2) == 3);
}
