#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>
#include <vector>

#include "pcmamba/metrics.hpp"
#include "pcmamba/rng.hpp"

using pcm::boundary_metrics;
using pcm::boundary_pixels;
using pcm::class_metrics;
using pcm::overlap_metrics;

namespace {

using Mask = std::vector<std::uint8_t>;

Mask rect_mask(std::size_t h, std::size_t w, std::size_t r0, std::size_t c0, std::size_t r1,
               std::size_t c1) {
  Mask m(h * w, 0);
  for (std::size_t r = r0; r < r1; ++r)
    for (std::size_t c = c0; c < c1; ++c) m[r * w + c] = 1;
  return m;
}

// Reference boundary: keep foreground pixels adjacent (8-neighborhood) to a
// background or off-image cell, built from an explicit offset list.
std::set<std::size_t> oracle_boundary(const Mask& m, std::size_t h, std::size_t w) {
  static const int off[8][2] = {{-1, -1}, {-1, 0}, {-1, 1}, {0, -1},
                                {0, 1},   {1, -1}, {1, 0},  {1, 1}};
  std::set<std::size_t> out;
  for (std::size_t i = 0; i < m.size(); ++i) {
    if (!m[i]) continue;
    const long r = long(i / w), c = long(i % w);
    for (const auto& d : off) {
      const long rr = r + d[0], cc = c + d[1];
      const bool bg = rr < 0 || rr >= long(h) || cc < 0 || cc >= long(w) ||
                      m[std::size_t(rr) * w + std::size_t(cc)] == 0;
      if (bg) {
        out.insert(i);
        break;
      }
    }
  }
  return out;
}

double oracle_nearest(std::size_t p, const std::set<std::size_t>& b, std::size_t w) {
  double best = 1e300;
  for (std::size_t q : b) {
    const double dr = double(p / w) - double(q / w);
    const double dc = double(p % w) - double(q % w);
    best = std::min(best, std::hypot(dr, dc));
  }
  return best;
}

struct OracleBoundary {
  double hd95, asd;
};

OracleBoundary oracle_boundary_metrics(const Mask& p, const Mask& g, std::size_t h,
                                       std::size_t w, double spacing) {
  const auto bp = oracle_boundary(p, h, w);
  const auto bg = oracle_boundary(g, h, w);
  std::vector<double> dpg, dgp;
  for (std::size_t q : bp) dpg.push_back(oracle_nearest(q, bg, w));
  for (std::size_t q : bg) dgp.push_back(oracle_nearest(q, bp, w));
  std::vector<double> all = dpg;
  all.insert(all.end(), dgp.begin(), dgp.end());
  std::sort(all.begin(), all.end());
  const double pos = 0.95 * double(all.size() - 1);
  const std::size_t lo = std::size_t(pos);
  const double hd = lo + 1 < all.size() ? all[lo] + (pos - double(lo)) * (all[lo + 1] - all[lo])
                                        : all.back();
  auto avg = [](const std::vector<double>& v) {
    double s = 0;
    for (double x : v) s += x;
    return s / double(v.size());
  };
  return {spacing * hd, spacing * 0.5 * (avg(dpg) + avg(dgp))};
}

Mask random_mask(pcm::Rng& rng, std::size_t h, std::size_t w, double density) {
  Mask m(h * w, 0);
  for (auto& v : m) v = rng.bernoulli(density) ? 1 : 0;
  return m;
}

}  // namespace

TEST_CASE("identical masks score perfectly") {
  const Mask m = rect_mask(6, 6, 1, 2, 4, 5);
  const auto o = overlap_metrics(m, m);
  CHECK(o.dice == 1.0);
  CHECK(o.iou == 1.0);
  CHECK(o.acc == 1.0);
  CHECK(o.pre == 1.0);
  CHECK(o.sen == 1.0);
  CHECK(o.spe == 1.0);
  const auto b = boundary_metrics(m, m, 6, 6);
  CHECK(b.hd95 == 0.0);
  CHECK(b.asd == 0.0);
}

TEST_CASE("half-plane prediction against full ground truth") {
  const std::size_t h = 4, w = 4;
  const Mask pred = rect_mask(h, w, 0, 0, h, w / 2);
  const Mask gt = rect_mask(h, w, 0, 0, h, w);
  const auto o = overlap_metrics(pred, gt);
  CHECK(o.dice == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
  CHECK(o.iou == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(o.sen == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(o.pre == 1.0);
}

TEST_CASE("confusion-matrix ratios on a hand-built scene") {
  // 3x3 grid: TP at 0,1; FP at 2; FN at 3,4,5; TN at 6,7,8.
  const Mask pred = {1, 1, 1, 0, 0, 0, 0, 0, 0};
  const Mask gt = {1, 1, 0, 1, 1, 1, 0, 0, 0};
  const auto o = overlap_metrics(pred, gt);
  CHECK(o.acc == doctest::Approx(5.0 / 9.0).epsilon(1e-12));
  CHECK(o.pre == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
  CHECK(o.sen == doctest::Approx(2.0 / 5.0).epsilon(1e-12));
  CHECK(o.spe == doctest::Approx(3.0 / 4.0).epsilon(1e-12));
  CHECK(o.dice == doctest::Approx(4.0 / 8.0).epsilon(1e-12));
  CHECK(o.iou == doctest::Approx(2.0 / 6.0).epsilon(1e-12));
}

TEST_CASE("empty-mask conventions") {
  const Mask empty(16, 0);
  const Mask some = rect_mask(4, 4, 1, 1, 3, 3);
  const auto both = overlap_metrics(empty, empty);
  CHECK(both.dice == 1.0);
  CHECK(both.iou == 1.0);
  CHECK(both.acc == 1.0);
  CHECK(both.pre == 1.0);
  CHECK(both.sen == 1.0);
  const auto miss = overlap_metrics(empty, some);
  CHECK(miss.dice == 0.0);
  CHECK(miss.iou == 0.0);
  CHECK(miss.sen == 0.0);
  CHECK(miss.pre == 0.0);
  const auto ghost = overlap_metrics(some, empty);
  CHECK(ghost.dice == 0.0);
  CHECK(ghost.pre == 0.0);
  CHECK(ghost.sen == 0.0);
  CHECK_THROWS_AS(boundary_metrics(empty, some, 4, 4), std::invalid_argument);
  CHECK_THROWS_AS(boundary_metrics(some, empty, 4, 4), std::invalid_argument);
  CHECK_THROWS_AS(boundary_metrics(empty, empty, 4, 4), std::invalid_argument);
}

TEST_CASE("boundary extraction on solid shapes") {
  // 3x3 block centered in 5x5: only the center is interior.
  const Mask block = rect_mask(5, 5, 1, 1, 4, 4);
  const auto b = boundary_pixels(block, 5, 5);
  CHECK(b.size() == 8);
  for (std::size_t i : b) CHECK(i != 2 * 5 + 2);

  // Full grid: off-image counts as background, so the rim is boundary.
  const Mask full = rect_mask(5, 5, 0, 0, 5, 5);
  const auto rim = boundary_pixels(full, 5, 5);
  CHECK(rim.size() == 16);
  for (std::size_t i : rim) {
    const std::size_t r = i / 5, c = i % 5;
    CHECK((r == 0 || r == 4 || c == 0 || c == 4));
  }

  // Shapes thinner than 3 pixels are all boundary.
  const Mask thin = rect_mask(5, 5, 2, 0, 3, 5);
  CHECK(boundary_pixels(thin, 5, 5).size() == 5);
}

TEST_CASE("two isolated pixels five apart") {
  Mask p(8 * 8, 0), g(8 * 8, 0);
  p[3 * 8 + 1] = 1;
  g[3 * 8 + 6] = 1;
  const auto b = boundary_metrics(p, g, 8, 8);
  CHECK(b.hd95 == doctest::Approx(5.0).epsilon(1e-12));
  CHECK(b.asd == doctest::Approx(5.0).epsilon(1e-12));
}

TEST_CASE("translated square matches the pairwise oracle") {
  const std::size_t h = 10, w = 10;
  const Mask a = rect_mask(h, w, 2, 2, 5, 5);
  const Mask b = rect_mask(h, w, 3, 3, 6, 6);
  CHECK(oracle_boundary(a, h, w).size() == 8);
  const auto got = boundary_metrics(a, b, h, w);
  const auto want = oracle_boundary_metrics(a, b, h, w, 1.0);
  CHECK(got.hd95 == doctest::Approx(want.hd95).epsilon(1e-12));
  CHECK(got.asd == doctest::Approx(want.asd).epsilon(1e-12));
}

TEST_CASE("hd95 interpolates between order statistics") {
  // P boundary {(0,0),(0,10)}, G boundary {(0,0)}: union distances {0,10,0},
  // 95th percentile position 1.9 of the sorted triple.
  Mask p(4 * 12, 0), g(4 * 12, 0);
  p[0] = 1;
  p[10] = 1;
  g[0] = 1;
  const auto b = boundary_metrics(p, g, 4, 12);
  CHECK(b.hd95 == doctest::Approx(9.0).epsilon(1e-12));
  CHECK(b.asd == doctest::Approx(2.5).epsilon(1e-12));
}

TEST_CASE("spacing scales distances linearly") {
  const Mask a = rect_mask(9, 9, 1, 1, 4, 4);
  const Mask b = rect_mask(9, 9, 4, 4, 8, 8);
  const auto unit = boundary_metrics(a, b, 9, 9, 1.0);
  const auto half = boundary_metrics(a, b, 9, 9, 0.5);
  CHECK(half.hd95 == doctest::Approx(0.5 * unit.hd95).epsilon(1e-12));
  CHECK(half.asd == doctest::Approx(0.5 * unit.asd).epsilon(1e-12));
}

TEST_CASE("random masks agree with the oracle and obey invariants") {
  pcm::Rng rng(0xabcdefULL);
  for (int trial = 0; trial < 60; ++trial) {
    const std::size_t h = 3 + rng.uniform_index(14);
    const std::size_t w = 3 + rng.uniform_index(14);
    const Mask p = random_mask(rng, h, w, 0.35);
    const Mask g = random_mask(rng, h, w, 0.35);
    const auto o = overlap_metrics(p, g);
    CHECK(o.iou <= o.dice + 1e-15);
    CHECK(o.dice >= 0.0);
    CHECK(o.dice <= 1.0);
    const auto sym = overlap_metrics(g, p);
    CHECK(o.dice == sym.dice);
    CHECK(o.iou == sym.iou);
    CHECK(o.acc == sym.acc);
    CHECK(o.pre == sym.sen);
    CHECK(o.sen == sym.pre);

    const bool pe = std::none_of(p.begin(), p.end(), [](std::uint8_t v) { return v != 0; });
    const bool ge = std::none_of(g.begin(), g.end(), [](std::uint8_t v) { return v != 0; });
    if (pe || ge) continue;
    const auto got = boundary_metrics(p, g, h, w);
    const auto want = oracle_boundary_metrics(p, g, h, w, 1.0);
    CHECK(got.hd95 == doctest::Approx(want.hd95).epsilon(1e-12));
    CHECK(got.asd == doctest::Approx(want.asd).epsilon(1e-12));
    const auto rev = boundary_metrics(g, p, h, w);
    CHECK(got.hd95 == doctest::Approx(rev.hd95).epsilon(1e-12));
    CHECK(got.asd == doctest::Approx(rev.asd).epsilon(1e-12));
  }
}

TEST_CASE("erasing correct pixels never improves dice") {
  pcm::Rng rng(77);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t h = 8, w = 8;
    const Mask g = random_mask(rng, h, w, 0.4);
    Mask p = g;
    double prev = overlap_metrics(p, g).dice;
    for (int step = 0; step < 10; ++step) {
      std::vector<std::size_t> hits;
      for (std::size_t i = 0; i < p.size(); ++i)
        if (p[i] && g[i]) hits.push_back(i);
      if (hits.empty()) break;
      p[hits[rng.uniform_index(hits.size())]] = 0;
      const double cur = overlap_metrics(p, g).dice;
      CHECK(cur <= prev + 1e-15);
      prev = cur;
    }
  }
}

TEST_CASE("per-class metrics on a labeled scene") {
  // 4x4, classes 0..2. Class 1: pred = gt shifted right by one column.
  const std::vector<int> gt = {0, 1, 1, 0, 0, 1, 1, 0, 2, 2, 0, 0, 2, 2, 0, 0};
  const std::vector<int> pr = {0, 0, 1, 1, 0, 0, 1, 1, 2, 2, 0, 0, 2, 2, 0, 0};
  const auto c1 = class_metrics(pr, gt, 4, 4, 1);
  CHECK(c1.dice == doctest::Approx(0.5).epsilon(1e-12));
  REQUIRE(c1.hd95.has_value());
  CHECK(*c1.hd95 == doctest::Approx(1.0).epsilon(1e-12));
  // Shared middle column puts half of each boundary at distance zero.
  CHECK(*c1.asd == doctest::Approx(0.5).epsilon(1e-12));
  const auto c2 = class_metrics(pr, gt, 4, 4, 2);
  CHECK(c2.dice == 1.0);
  CHECK(*c2.hd95 == 0.0);

  // Class absent from both: perfect score, boundary pinned to zero.
  const auto c3 = class_metrics(pr, gt, 4, 4, 3);
  CHECK(c3.dice == 1.0);
  REQUIRE(c3.hd95.has_value());
  CHECK(*c3.hd95 == 0.0);

  // Class present only in gt: zero overlap, boundary left unset.
  std::vector<int> gt2 = gt;
  gt2[15] = 3;
  const auto c3b = class_metrics(pr, gt2, 4, 4, 3);
  CHECK(c3b.dice == 0.0);
  CHECK(!c3b.hd95.has_value());
  CHECK(!c3b.asd.has_value());
}

TEST_CASE("argmax picks the first maximum") {
  const std::vector<double> logits = {0.1, 0.9, 0.9, 0.2, 3.0, -1.0, 2.0, 2.5};
  const auto lab = pcm::argmax_labels(logits.data(), 2, 4);
  CHECK(lab == std::vector<int>{1, 0});
  const std::vector<float> lf = {1.0f, 1.0f, 1.0f, 0.0f};
  CHECK(pcm::argmax_labels(lf.data(), 1, 4) == std::vector<int>{0});
}

TEST_CASE("mean foreground dice averages classes 1..k-1") {
  const std::vector<int> gt = {1, 1, 2, 2, 3, 3, 0, 0};
  std::vector<int> pr = gt;
  CHECK(pcm::mean_foreground_dice(pr, gt, 4) == 1.0);
  pr[0] = 0;
  // Class 1 dice drops to 2/3, classes 2 and 3 stay at 1.
  CHECK(pcm::mean_foreground_dice(pr, gt, 4) == doctest::Approx((2.0 / 3.0 + 2.0) / 3.0));
  const std::vector<int> zeros(8, 0);
  CHECK(pcm::mean_foreground_dice(zeros, gt, 4) == 0.0);
}
