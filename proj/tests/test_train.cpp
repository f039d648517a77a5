#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "pcmamba/train.hpp"
#include "testutil.hpp"

using namespace pcm;

namespace {

NetworkConfig tiny_config() {
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

template <typename T>
Dataset<T> tiny_dataset(std::size_t n, std::uint64_t seed) {
  Dataset<T> ds;
  ds.manifest.n_samples = n;
  ds.manifest.height = 32;
  ds.manifest.width = 32;
  ds.manifest.seed = seed;
  for (std::size_t i = 0; i < n; ++i)
    ds.samples.push_back(generate_phantom<T>(seed + i, 32, 32, 0.02));
  ds.split = split_assignment(n, 0.75, 0.125, seed);
  return ds;
}

template <typename T>
std::vector<T> raw_params(Network<T>& net) {
  std::vector<T> out;
  visit_params(net, [&](const std::string&, Tensor<T>& t) {
    out.insert(out.end(), t.data(), t.data() + t.size());
  });
  return out;
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(bool(in));
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const char* stem) {
    path = std::filesystem::temp_directory_path() / (std::string(stem) + std::to_string(::getpid()));
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
};

}  // namespace

TEST_CASE("cosine schedule endpoints and midpoint") {
  CHECK(cosine_lr(0, 10, 1e-3, 1e-5) == doctest::Approx(1e-3).epsilon(1e-12));
  CHECK(cosine_lr(9, 10, 1e-3, 1e-5) == doctest::Approx(1e-5).epsilon(1e-9));
  CHECK(cosine_lr(2, 5, 1e-3, 1e-5) == doctest::Approx((1e-3 + 1e-5) / 2).epsilon(1e-12));
  CHECK(cosine_lr(0, 1, 2e-4, 0.0) == 2e-4);
  CHECK_THROWS_AS(cosine_lr(5, 5, 1e-3, 0.0), std::invalid_argument);
  CHECK_THROWS_AS(cosine_lr(-1, 5, 1e-3, 0.0), std::invalid_argument);
  CHECK_THROWS_AS(cosine_lr(0, 0, 1e-3, 0.0), std::invalid_argument);
}

TEST_CASE("adamw matches a scalar reference recurrence") {
  Tensor<double> p(Shape{3});
  p.data()[0] = 0.5;
  p.data()[1] = -1.0;
  p.data()[2] = 2.0;
  std::vector<double> ref = {0.5, -1.0, 2.0};
  std::vector<double> m(3, 0.0), v(3, 0.0);

  const double b1 = 0.9, b2 = 0.999, eps = 1e-8, wd = 0.01, lr = 1e-2;
  AdamW<double> opt(b1, b2, eps, wd);
  std::vector<Tensor<double>*> params = {&p};

  for (int t = 1; t <= 25; ++t) {
    std::vector<std::vector<double>> grads = {
        {std::sin(0.3 * t), std::cos(0.7 * t), 0.1 * t - 1.0}};
    REQUIRE(opt.step(params, grads, lr));
    for (int j = 0; j < 3; ++j) {
      const double g = grads[0][j];
      m[j] = b1 * m[j] + (1 - b1) * g;
      v[j] = b2 * v[j] + (1 - b2) * g * g;
      const double mhat = m[j] / (1 - std::pow(b1, t));
      const double vhat = v[j] / (1 - std::pow(b2, t));
      ref[j] = ref[j] - lr * mhat / (std::sqrt(vhat) + eps) - lr * wd * ref[j];
    }
    for (int j = 0; j < 3; ++j)
      CHECK(p.data()[j] == doctest::Approx(ref[j]).epsilon(1e-13));
  }
  CHECK(opt.step_count() == 25);
}

TEST_CASE("adamw degenerate steps") {
  Tensor<double> p(Shape{2});
  p.data()[0] = 1.5;
  p.data()[1] = -0.25;
  std::vector<Tensor<double>*> params = {&p};
  std::vector<std::vector<double>> zero = {{0.0, 0.0}};

  SUBCASE("zero gradient and zero decay leave parameters untouched") {
    AdamW<double> opt(0.9, 0.999, 1e-8, 0.0);
    REQUIRE(opt.step(params, zero, 0.1));
    CHECK(p.data()[0] == 1.5);
    CHECK(p.data()[1] == -0.25);
  }
  SUBCASE("zero gradient with decay applies the pure decoupled shrink") {
    AdamW<double> opt(0.9, 0.999, 1e-8, 0.1);
    REQUIRE(opt.step(params, zero, 0.1));
    CHECK(p.data()[0] == doctest::Approx(0.99 * 1.5).epsilon(1e-15));
    CHECK(p.data()[1] == doctest::Approx(0.99 * -0.25).epsilon(1e-15));
  }
  SUBCASE("lr zero is a no-op even with decay") {
    AdamW<double> opt(0.9, 0.999, 1e-8, 0.1);
    std::vector<std::vector<double>> g = {{0.3, -0.7}};
    REQUIRE(opt.step(params, g, 0.0));
    CHECK(p.data()[0] == 1.5);
    CHECK(p.data()[1] == -0.25);
  }
  SUBCASE("non-finite gradients are refused with state intact") {
    AdamW<double> opt(0.9, 0.999, 1e-8, 0.01);
    std::vector<std::vector<double>> g = {{0.1, std::nan("")}};
    std::string err;
    CHECK(!opt.step(params, g, 0.1, &err));
    CHECK(err.find("non-finite") != std::string::npos);
    CHECK(p.data()[0] == 1.5);
    CHECK(opt.step_count() == 0);
    std::vector<std::vector<double>> g2 = {{0.1, 0.1}};
    REQUIRE(opt.step(params, g2, 0.1));
    CHECK(opt.step_count() == 1);
  }
}

TEST_CASE("global norm clipping") {
  std::vector<std::vector<double>> g = {{3.0, 0.0}, {0.0, 4.0}};
  const double norm = clip_global_norm(g, 1.0);
  CHECK(norm == doctest::Approx(5.0).epsilon(1e-12));
  CHECK(g[0][0] == doctest::Approx(0.6).epsilon(1e-12));
  CHECK(g[1][1] == doctest::Approx(0.8).epsilon(1e-12));

  std::vector<std::vector<double>> small = {{0.3}};
  CHECK(clip_global_norm(small, 1.0) == doctest::Approx(0.3).epsilon(1e-12));
  CHECK(small[0][0] == 0.3);
}

TEST_CASE("uniform zero logits give ln k cross-entropy") {
  Tensor<double> logits(Shape{6, 4});
  const std::vector<int> labels = {0, 1, 2, 3, 1, 2};
  const auto ce = seg_loss(logits, labels, 1.0, 0.0);
  CHECK(ce.data()[0] == doctest::Approx(std::log(4.0)).epsilon(1e-12));
}

TEST_CASE("saturated correct logits give near-zero loss") {
  const std::vector<int> labels = {0, 1, 2, 3, 2, 1, 0, 3};
  Tensor<double> logits(Shape{8, 4});
  for (std::size_t i = 0; i < 8; ++i)
    for (std::size_t c = 0; c < 4; ++c)
      logits.data()[i * 4 + c] = labels[i] == int(c) ? 50.0 : -50.0;
  const auto loss = seg_loss(logits, labels, 1.0, 1.0);
  CHECK(std::abs(loss.data()[0]) < 1e-6);
}

TEST_CASE("seg_loss rejects bad labels") {
  Tensor<double> logits(Shape{2, 3});
  CHECK_THROWS_AS(seg_loss(logits, {0, 3}, 1.0, 1.0), std::invalid_argument);
  CHECK_THROWS_AS(seg_loss(logits, {-1, 0}, 1.0, 1.0), std::invalid_argument);
  CHECK_THROWS_AS(seg_loss(logits, {0}, 1.0, 1.0), std::invalid_argument);
}

TEST_CASE("seg_loss gradient matches finite differences") {
  // Two classes on a 4x4 grid.
  Rng rng(41);
  Tensor<double> logits = Tensor<double>::randn(Shape{16, 2}, rng, 0.8);
  logits.set_requires_grad(true);
  std::vector<int> labels(16);
  for (auto& l : labels) l = int(rng.uniform_index(2));

  Tape<double> tape;
  {
    TapeScope<double> scope(tape);
    auto loss = seg_loss(logits, labels, 1.0, 1.0);
    tape.backward(loss, true);
  }
  auto fd = testutil::fd_grad([&] { return seg_loss(logits, labels, 1.0, 1.0).data()[0]; },
                              logits, 1e-6);
  CHECK(testutil::max_rel_err(fd, logits.grad()) < 1e-7);
}

TEST_CASE("training config validation") {
  TrainConfig cfg;
  CHECK_NOTHROW(cfg.validate());
  TrainConfig bad = cfg;
  bad.lr0 = 0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = cfg;
  bad.lr_min = 1.0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = cfg;
  bad.batch_size = 0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = cfg;
  bad.threads = 0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("dry run leaves parameters bit-identical") {
  auto net = build_variant<float>(tiny_config(), 5);
  const auto before = raw_params(net);
  auto ds = tiny_dataset<float>(8, 11);
  TrainConfig cfg;
  cfg.epochs = 0;
  cfg.seed = 3;
  const auto hist = train_loop(net, ds, cfg);
  CHECK(hist.epochs.empty());
  CHECK(hist.best_epoch == -1);
  CHECK(!hist.aborted);
  CHECK(raw_params(net) == before);
}

TEST_CASE("training is deterministic and thread-count invariant") {
  auto ds = tiny_dataset<float>(8, 21);
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 3;
  cfg.lr0 = 5e-4;
  cfg.lr_min = 5e-5;  // keep the final cosine epoch moving so deltas stay nonzero
  cfg.seed = 9;

  auto run = [&](int threads) {
    auto net = build_variant<float>(tiny_config(), 77);
    TrainConfig c = cfg;
    c.threads = threads;
    const History h = train_loop(net, ds, c);
    return std::make_pair(h, raw_params(net));
  };
  const auto [h1, p1] = run(1);
  const auto [h2, p2] = run(1);
  const auto [h3, p3] = run(3);

  REQUIRE(h1.epochs.size() == 2);
  CHECK(p1 == p2);
  CHECK(p1 == p3);
  for (std::size_t e = 0; e < 2; ++e) {
    CHECK(h1.epochs[e].train_loss == h2.epochs[e].train_loss);
    CHECK(h1.epochs[e].val_loss == h2.epochs[e].val_loss);
    CHECK(h1.epochs[e].val_dice_mean == h3.epochs[e].val_dice_mean);
    CHECK(h1.epochs[e].train_loss == h3.epochs[e].train_loss);
    CHECK(h1.epochs[e].lr == cosine_lr(int(e), 2, cfg.lr0, cfg.lr_min));
    CHECK(std::isfinite(h1.epochs[e].train_loss));
    CHECK(std::isfinite(h1.epochs[e].val_loss));
    CHECK(h1.epochs[e].param_delta > 0);
    CHECK(h1.epochs[e].val_dice.size() == 3);
  }
}

TEST_CASE("best checkpoint round-trips to the same validation dice") {
  TempDir dir("pcm_ckpt_");
  auto ds = tiny_dataset<float>(8, 31);
  auto net = build_variant<float>(tiny_config(), 13);
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.batch_size = 4;
  cfg.lr0 = 1e-3;
  cfg.seed = 4;
  cfg.checkpoint_dir = dir.path.string();
  const History hist = train_loop(net, ds, cfg);
  REQUIRE(hist.epochs.size() == 3);
  REQUIRE(hist.best_epoch >= 0);

  auto restored = build_variant<float>(tiny_config(), 999);
  load_checkpoint(restored, (dir.path / "best.ckpt").string());
  const auto ev = evaluate_split(restored, ds, Split::Val, cfg.seed, cfg.ce_w, cfg.dice_w);
  CHECK(ev.dice_mean == doctest::Approx(hist.best_val_dice).epsilon(1e-12));

  SUBCASE("history csv lists one row per epoch") {
    const std::string csv_path = (dir.path / "history.csv").string();
    hist.write_csv(csv_path);
    const std::string csv = slurp(csv_path);
    CHECK(csv.find("epoch,lr,train_loss,val_loss,val_dice_mean,val_dice_1") == 0);
    std::size_t rows = 0;
    for (char ch : csv)
      if (ch == '\n') ++rows;
    CHECK(rows == 4);
  }

  SUBCASE("a poisoned run aborts and keeps the previous checkpoint") {
    const std::string bytes = slurp((dir.path / "best.ckpt").string());
    visit_params(net, [](const std::string& name, Tensor<float>& t) {
      if (name == "embed.weight") t.data()[0] = std::nanf("");
    });
    const History bad = train_loop(net, ds, cfg);
    CHECK(bad.aborted);
    CHECK(bad.abort_reason.find("non-finite") != std::string::npos);
    CHECK(bad.epochs.empty());
    CHECK(slurp((dir.path / "best.ckpt").string()) == bytes);
  }
}

TEST_CASE("evaluate_split needs a non-empty split") {
  auto ds = tiny_dataset<float>(4, 51);
  ds.split.assign(4, Split::Train);
  auto net = build_variant<float>(tiny_config(), 1);
  CHECK_THROWS_AS(evaluate_split(net, ds, Split::Val, 0), std::invalid_argument);
}
