#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>

#include "doctest.h"
#include "pcmamba/ssm.hpp"
#include "pcmamba/tensor.hpp"
#include "testutil.hpp"

using pcm::Shape;
using pcm::SsmParams;
using pcm::Tensor;

namespace {

template <typename T>
SsmParams<T> random_params(std::size_t n, std::size_t c, std::uint64_t seed, bool grad = false) {
  pcm::Rng rng(seed);
  SsmParams<T> p;
  p.a = Tensor<T>::zeros({n});
  for (std::size_t i = 0; i < n; ++i) p.a.data()[i] = -static_cast<T>(i + 1);
  p.b_weight = Tensor<T>::randn({n, c}, rng, T(0.4));
  p.b_bias = Tensor<T>::randn({n}, rng, T(0.2));
  p.c_weight = Tensor<T>::randn({n, c}, rng, T(0.4));
  p.c_bias = Tensor<T>::randn({n}, rng, T(0.2));
  p.dt_weight = Tensor<T>::randn({c}, rng, T(0.3));
  p.dt_bias = Tensor<T>::randn({1}, rng, T(0.2));
  p.skip = Tensor<T>::ones({c});
  if (grad)
    for (auto* t : {&p.a, &p.b_weight, &p.b_bias, &p.c_weight, &p.c_bias, &p.dt_weight, &p.dt_bias,
                    &p.skip})
      t->set_requires_grad(true);
  return p;
}

// Independent oracle: per-token recurrence written straight from the update
// equations, with its own discretization arithmetic (expm1-based, no shared
// code with the library path).
template <typename T>
std::vector<T> oracle_scan(const std::vector<T>& u, const std::vector<T>* z,
                           const SsmParams<T>& p, std::size_t l, std::size_t c,
                           std::vector<T>* states_out = nullptr) {
  const std::size_t n = p.state_dim();
  std::vector<T> x(c * n, T(0)), y(l * c, T(0));
  if (states_out) states_out->assign(l * c * n, T(0));
  for (std::size_t t = 0; t < l; ++t) {
    T dtp = p.dt_bias.at(0);
    for (std::size_t j = 0; j < c; ++j) dtp += p.dt_weight.at(j) * u[t * c + j];
    const T dt = std::log1p(std::exp(dtp));
    std::vector<T> bt(n), ct(n), abar(n), bbar(n);
    for (std::size_t i = 0; i < n; ++i) {
      T bb = p.b_bias.at(i), cc = p.c_bias.at(i);
      for (std::size_t j = 0; j < c; ++j) {
        bb += p.b_weight.at(i * c + j) * u[t * c + j];
        cc += p.c_weight.at(i * c + j) * u[t * c + j];
      }
      bt[i] = bb;
      ct[i] = cc;
      const T a = p.a.at(i);
      abar[i] = std::exp(dt * a);
      bbar[i] = (std::abs(dt * a) < T(1e-4) ? dt * (T(1) + dt * a / T(2))
                                            : std::expm1(dt * a) / a) *
                bb;
    }
    for (std::size_t ch = 0; ch < c; ++ch) {
      T acc = T(0);
      for (std::size_t i = 0; i < n; ++i) {
        x[ch * n + i] = abar[i] * x[ch * n + i] + bbar[i] * u[t * c + ch];
        const T h = (z ? (*z)[t * c + ch] : T(1)) * x[ch * n + i];
        acc += ct[i] * h;
        if (states_out) (*states_out)[(t * c + ch) * n + i] = x[ch * n + i];
      }
      y[t * c + ch] = acc + p.skip.at(ch) * u[t * c + ch];
    }
  }
  return y;
}

}  // namespace

TEST_CASE("zoh closed forms") {
  SUBCASE("vanishing step") {
    auto [abar, bbar] = pcm::zoh_discretize<double>({-1, -2, -3}, {1, 1, 1}, 1e-12);
    for (double v : abar) CHECK(v == doctest::Approx(1.0).epsilon(1e-9));
    for (double v : bbar) CHECK(std::abs(v) < 1e-9);
  }
  SUBCASE("half-life step") {
    auto [abar, bbar] = pcm::zoh_discretize<double>({-1.0}, {1.0}, std::log(2.0));
    CHECK(abar[0] == doctest::Approx(0.5));
    CHECK(bbar[0] == doctest::Approx(0.5));
  }
  SUBCASE("near-singular A takes the series branch") {
    auto [abar, bbar] = pcm::zoh_discretize<double>({-1e-9}, {1.0}, 1.0);
    CHECK(abar[0] == doctest::Approx(1.0).epsilon(1e-8));
    // reference: expm1 keeps full precision where the direct formula cancels
    const double want = std::expm1(-1e-9) / -1e-9;
    CHECK(bbar[0] == doctest::Approx(want).epsilon(1e-6));
    CHECK(std::abs(bbar[0] - 1.0) < 1e-6);
  }
  SUBCASE("rejects non-positive step") {
    CHECK_THROWS_AS(pcm::zoh_discretize<double>({-1}, {1}, 0.0), std::invalid_argument);
    CHECK_THROWS_AS(pcm::zoh_discretize<double>({-1}, {1}, -0.5), std::invalid_argument);
  }
}

TEST_CASE("selective_params") {
  const std::size_t n = 4, c = 3;
  auto p = random_params<double>(n, c, 101);

  SUBCASE("zero projection gives softplus(0) step") {
    for (auto& v : p.dt_weight.values()) v = 0;
    p.dt_bias.data()[0] = 0;
    auto s = pcm::selective_params<double>({0.3, -0.2, 0.9}, p);
    CHECK(s.dt == doctest::Approx(std::log(2.0)));
  }
  SUBCASE("zero token with zero biases gives zero B and C") {
    for (auto& v : p.b_bias.values()) v = 0;
    for (auto& v : p.c_bias.values()) v = 0;
    auto s = pcm::selective_params<double>({0, 0, 0}, p);
    for (std::size_t i = 0; i < n; ++i) {
      CHECK(s.b_bar[i] == 0.0);
      CHECK(s.c[i] == 0.0);
    }
  }
  SUBCASE("identical tokens give identical steps") {
    auto s1 = pcm::selective_params<double>({0.1, 0.5, -0.7}, p);
    auto s2 = pcm::selective_params<double>({0.1, 0.5, -0.7}, p);
    CHECK(s1.dt == s2.dt);
    CHECK(s1.a_bar == s2.a_bar);
    CHECK(s1.b_bar == s2.b_bar);
    CHECK(s1.c == s2.c);
  }
  SUBCASE("wrong token width throws") {
    CHECK_THROWS_AS(pcm::selective_params<double>({1.0, 2.0}, p), std::invalid_argument);
  }
}

TEST_CASE("selective_scan single step closed form") {
  const std::size_t n = 3, c = 2;
  auto p = random_params<double>(n, c, 7);
  pcm::Rng rng(8);
  auto u = Tensor<double>::randn({1, c}, rng);

  auto r = pcm::selective_scan(u, p);
  auto step = pcm::selective_params<double>({u.at(0), u.at(1)}, p);
  for (std::size_t ch = 0; ch < c; ++ch) {
    double want = p.skip.at(ch) * u.at(ch);
    for (std::size_t i = 0; i < n; ++i) want += step.c[i] * step.b_bar[i] * u.at(ch);
    CHECK(r.y.at(ch) == doctest::Approx(want).epsilon(1e-12));
  }
  CHECK(r.state.shape() == Shape{1, c, n});
}

TEST_CASE("strongly negative A forgets the past") {
  const std::size_t n = 2, c = 1;
  auto p = random_params<double>(n, c, 21);
  p.a.data()[0] = -1e6;
  p.a.data()[1] = -1e6;
  pcm::Rng rng(22);
  auto u = Tensor<double>::randn({5, c}, rng);
  auto r = pcm::selective_scan(u, p);
  // with abar underflowed to 0, each state is exactly bbar_t * u_t
  for (std::size_t t = 0; t < 5; ++t) {
    auto step = pcm::selective_params<double>({u.at(t)}, p);
    for (std::size_t i = 0; i < n; ++i)
      CHECK(r.state.at((t * c) * n + i) == doctest::Approx(step.b_bar[i] * u.at(t)));
  }
}

TEST_CASE("selective_scan matches the stepwise oracle") {
  const std::size_t l = 8, c = 2, n = 4;
  auto p = random_params<double>(n, c, 33);
  pcm::Rng rng(34);
  auto u = Tensor<double>::randn({l, c}, rng);

  auto r = pcm::selective_scan(u, p);
  std::vector<double> states;
  auto want = oracle_scan<double>(u.values(), nullptr, p, l, c, &states);
  CHECK(testutil::max_rel_err(r.y.values(), want, 1e-9) < 1e-10);
  CHECK(testutil::max_rel_err(r.state.values(), states, 1e-9) < 1e-10);
}

TEST_CASE("modulated_scan") {
  const std::size_t l = 8, c = 3, n = 4;
  auto p = random_params<double>(n, c, 55);
  pcm::Rng rng(56);
  auto u = Tensor<double>::randn({l, c}, rng);

  SUBCASE("unit gate reproduces the plain scan bitwise") {
    auto y1 = pcm::modulated_scan(u, Tensor<double>::ones({l, c}), p);
    auto y2 = pcm::selective_scan(u, p).y;
    CHECK(y1.values() == y2.values());
  }
  SUBCASE("zero gate leaves only the passthrough") {
    auto y = pcm::modulated_scan(u, Tensor<double>::zeros({l, c}), p);
    for (std::size_t t = 0; t < l; ++t)
      for (std::size_t ch = 0; ch < c; ++ch)
        CHECK(y.at(t * c + ch) == p.skip.at(ch) * u.at(t * c + ch));
  }
  SUBCASE("random gate matches the stepwise oracle") {
    auto z = Tensor<double>::randn({l, c}, rng);
    auto y = pcm::modulated_scan(u, z, p);
    auto want = oracle_scan<double>(u.values(), &z.values(), p, l, c);
    CHECK(testutil::max_rel_err(y.values(), want, 1e-9) < 1e-10);
  }
  SUBCASE("gate shape must match") {
    auto z = Tensor<double>::ones({l, c + 1});
    CHECK_THROWS_AS(pcm::modulated_scan(u, z, p), std::invalid_argument);
  }
}

TEST_CASE("recurrence-order invariance holds on long sequences") {
  const std::size_t l = 1024, c = 2, n = 8;
  auto p = random_params<double>(n, c, 77);
  pcm::Rng rng(78);
  auto u = Tensor<double>::randn({l, c}, rng);
  auto r = pcm::selective_scan(u, p);
  auto want = oracle_scan<double>(u.values(), nullptr, p, l, c);
  CHECK(testutil::max_rel_err(r.y.values(), want, 1e-9) < 1e-5);
}

TEST_CASE("contraction bound on the state") {
  const std::size_t l = 64, c = 2, n = 6;
  auto p = random_params<double>(n, c, 91);
  for (std::size_t i = 0; i < n; ++i) p.a.data()[i] = -0.1 * static_cast<double>(i + 1);
  pcm::Rng rng(92);
  auto u = Tensor<double>::randn({l, c}, rng);
  auto r = pcm::selective_scan(u, p);

  std::vector<double> bound(c * n, 0.0);
  for (std::size_t t = 0; t < l; ++t) {
    std::vector<double> ut(c);
    for (std::size_t ch = 0; ch < c; ++ch) ut[ch] = u.at(t * c + ch);
    auto step = pcm::selective_params(ut, p);
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t i = 0; i < n; ++i) {
        bound[ch * n + i] += std::abs(step.b_bar[i] * ut[ch]);
        CHECK(std::abs(r.state.at((t * c + ch) * n + i)) <= bound[ch * n + i] + 1e-12);
      }
  }
}

TEST_CASE("modulation is local in time") {
  const std::size_t l = 10, c = 2, n = 4;
  auto p = random_params<double>(n, c, 111);
  pcm::Rng rng(112);
  auto u = Tensor<double>::randn({l, c}, rng);
  auto z = Tensor<double>::randn({l, c}, rng);
  auto y0 = pcm::modulated_scan(u, z, p);

  auto z2 = z.clone();
  z2.data()[4 * c + 1] += 0.75;
  auto y1 = pcm::modulated_scan(u, z2, p);
  for (std::size_t t = 0; t < l; ++t)
    for (std::size_t ch = 0; ch < c; ++ch) {
      if (t == 4 && ch == 1)
        CHECK(y0.at(t * c + ch) != y1.at(t * c + ch));
      else
        CHECK(y0.at(t * c + ch) == y1.at(t * c + ch));
    }
}

TEST_CASE("scan gradients match finite differences") {
  const std::size_t l = 6, c = 3, n = 4;
  auto p = random_params<double>(n, c, 131, /*grad=*/true);
  pcm::Rng rng(132);
  auto u = Tensor<double>::randn({l, c}, rng).set_requires_grad(true);
  auto z = Tensor<double>::randn({l, c}, rng).set_requires_grad(true);
  auto w = Tensor<double>::randn({l, c}, rng);  // fixed projection to a scalar

  auto run = [&]() {
    auto y = pcm::modulated_scan(u, z, p);
    return pcm::sum_all(pcm::mul(y, w)).item();
  };
  pcm::Tape<double> tape;
  {
    pcm::TapeScope<double> scope(tape);
    auto y = pcm::modulated_scan(u, z, p);
    tape.backward(pcm::sum_all(pcm::mul(y, w)));
  }

  struct Named {
    const char* name;
    Tensor<double>* t;
  };
  const Named params[] = {{"a", &p.a},           {"b_weight", &p.b_weight},
                          {"b_bias", &p.b_bias}, {"c_weight", &p.c_weight},
                          {"c_bias", &p.c_bias}, {"dt_weight", &p.dt_weight},
                          {"dt_bias", &p.dt_bias}, {"skip", &p.skip},
                          {"u", &u},             {"z", &z}};
  for (const auto& [name, t] : params) {
    CAPTURE(name);
    auto fd = testutil::fd_grad(run, *t, 1e-6);
    CHECK(testutil::max_rel_err(t->grad(), fd, 1e-8) < 1e-6);
  }
}

TEST_CASE("plain scan gradients also check out") {
  const std::size_t l = 5, c = 2, n = 3;
  auto p = random_params<double>(n, c, 141, /*grad=*/true);
  pcm::Rng rng(142);
  auto u = Tensor<double>::randn({l, c}, rng).set_requires_grad(true);

  auto run = [&]() {
    auto y = pcm::selective_scan(u, p).y;
    return pcm::sum_all(pcm::mul(y, y)).item();
  };
  pcm::Tape<double> tape;
  {
    pcm::TapeScope<double> scope(tape);
    auto y = pcm::selective_scan(u, p).y;
    tape.backward(pcm::sum_all(pcm::mul(y, y)));
  }
  for (auto* t : {&p.a, &p.b_weight, &p.c_weight, &p.dt_weight, &p.skip, &u}) {
    auto fd = testutil::fd_grad(run, *t, 1e-6);
    CHECK(testutil::max_rel_err(t->grad(), fd, 1e-8) < 1e-6);
  }
}

TEST_CASE("scan rejects bad inputs") {
  auto p = random_params<double>(4, 3, 151);
  CHECK_THROWS_AS(pcm::selective_scan(Tensor<double>::zeros({0, 3}), p), std::invalid_argument);
  CHECK_THROWS_AS(pcm::selective_scan(Tensor<double>::zeros({5, 2}), p), std::invalid_argument);
  CHECK_THROWS_AS(pcm::selective_scan(Tensor<double>::zeros({5}), p), std::invalid_argument);
}
