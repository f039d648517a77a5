#include <benchmark/benchmark.h>

#include "pcmamba/train.hpp"
#include "pcmamba/verify.hpp"

using namespace pcm;

namespace {

FeatureMap<float> random_map(std::size_t side, std::size_t c, Rng& rng) {
  return FeatureMap<float>{side, side, c,
                           Tensor<float>::randn(Shape{side * side, c}, rng, 0.5f)};
}

void BM_SelectiveScan(benchmark::State& state) {
  const std::size_t l = std::size_t(state.range(0)), c = 32, n = 8;
  Rng rng(7);
  const SsmParams<float> p = detail::random_ssm<float>(c, n, rng);
  const Tensor<float> u = Tensor<float>::randn(Shape{l, c}, rng, 0.5f);
  for (auto _ : state) benchmark::DoNotOptimize(selective_scan(u, p));
  state.SetItemsProcessed(std::int64_t(state.iterations()) * std::int64_t(l));
}

void BM_Ppm(benchmark::State& state) {
  const std::size_t side = std::size_t(state.range(0));
  Rng rng(7);
  const auto f = random_map(side, 32, rng);
  PpmConfig cfg;
  for (auto _ : state) benchmark::DoNotOptimize(ppm_forward(f, cfg));
  state.SetItemsProcessed(std::int64_t(state.iterations()) * std::int64_t(side * side));
}

void BM_Crn(benchmark::State& state) {
  const std::size_t side = std::size_t(state.range(0)), c = 32;
  Rng rng(7);
  const auto f = random_map(side, c, rng);
  CrnConfig cfg;
  const std::size_t kk = std::size_t(cfg.kernel_size * cfg.kernel_size);
  const std::size_t hid = std::size_t(cfg.mlp_hidden);
  CrnParams<float> p;
  p.w1 = Tensor<float>::randn(Shape{kk * c, hid}, rng, 0.1f);
  p.b1 = Tensor<float>::zeros(Shape{hid});
  p.w2 = Tensor<float>::randn(Shape{hid, kk}, rng, 0.1f);
  p.b2 = Tensor<float>::zeros(Shape{kk});
  p.wo = Tensor<float>::randn(Shape{c, c}, rng, 0.1f);
  p.bo = Tensor<float>::zeros(Shape{c});
  for (auto _ : state) benchmark::DoNotOptimize(crn_forward(f, cfg, p));
  state.SetItemsProcessed(std::int64_t(state.iterations()) * std::int64_t(side * side));
}

void BM_Forward(benchmark::State& state) {
  const std::size_t side = std::size_t(state.range(0));
  NetworkConfig nc;
  nc.height = nc.width = side;
  const auto net = build_variant<float>(nc, 1);
  const auto ph = generate_phantom<float>(5, side, side, 0.02);
  for (auto _ : state) benchmark::DoNotOptimize(forward_tokens(net, ph.image));
}

void BM_ForwardBackward(benchmark::State& state) {
  const std::size_t side = std::size_t(state.range(0));
  NetworkConfig nc;
  nc.height = nc.width = side;
  auto net = build_variant<float>(nc, 1);
  const auto ph = generate_phantom<float>(5, side, side, 0.02);
  for (auto _ : state) {
    Tape<float> tape;
    TapeScope<float> scope(tape);
    Tensor<float> loss = seg_loss(forward_tokens(net, ph.image), ph.label, 1.0, 1.0);
    tape.backward(loss, false);
    benchmark::DoNotOptimize(loss.data()[0]);
  }
}

BENCHMARK(BM_SelectiveScan)->Arg(64)->Arg(256)->Arg(1024)->Arg(4096);
BENCHMARK(BM_Ppm)->Arg(16)->Arg(32)->Arg(64);
BENCHMARK(BM_Crn)->Arg(16)->Arg(32)->Arg(64);
BENCHMARK(BM_Forward)->Arg(32)->Arg(64);
BENCHMARK(BM_ForwardBackward)->Arg(32)->Arg(64);

}  // namespace

BENCHMARK_MAIN();
