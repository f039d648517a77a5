#include "pcmamba/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace pcm {

OverlapMetrics overlap_metrics(const std::vector<std::uint8_t>& pred,
                               const std::vector<std::uint8_t>& gt) {
  if (pred.size() != gt.size()) throw std::invalid_argument("overlap_metrics: size mismatch");
  if (pred.empty()) throw std::invalid_argument("overlap_metrics: empty grid");
  std::size_t tp = 0, fp = 0, fn = 0, tn = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] != 0, g = gt[i] != 0;
    if (p && g)
      ++tp;
    else if (p && !g)
      ++fp;
    else if (!p && g)
      ++fn;
    else
      ++tn;
  }
  OverlapMetrics m;
  const std::size_t psz = tp + fp, gsz = tp + fn;
  if (psz == 0 && gsz == 0) {
    m.dice = m.iou = 1.0;
  } else if (psz == 0 || gsz == 0) {
    m.dice = m.iou = 0.0;
  } else {
    m.dice = 2.0 * double(tp) / double(psz + gsz);
    m.iou = double(tp) / double(tp + fp + fn);
  }
  m.acc = double(tp + tn) / double(pred.size());
  m.pre = psz > 0 ? double(tp) / double(psz) : (gsz == 0 ? 1.0 : 0.0);
  m.sen = gsz > 0 ? double(tp) / double(gsz) : (psz == 0 ? 1.0 : 0.0);
  const std::size_t neg = tn + fp;
  m.spe = neg > 0 ? double(tn) / double(neg) : (fn == 0 ? 1.0 : 0.0);
  return m;
}

std::vector<std::size_t> boundary_pixels(const std::vector<std::uint8_t>& mask, std::size_t h,
                                         std::size_t w) {
  if (mask.size() != h * w) throw std::invalid_argument("boundary_pixels: size mismatch");
  std::vector<std::size_t> out;
  for (std::size_t r = 0; r < h; ++r) {
    for (std::size_t c = 0; c < w; ++c) {
      if (!mask[r * w + c]) continue;
      bool interior = true;
      for (int dr = -1; dr <= 1 && interior; ++dr) {
        for (int dc = -1; dc <= 1 && interior; ++dc) {
          if (dr == 0 && dc == 0) continue;
          const long rr = long(r) + dr, cc = long(c) + dc;
          if (rr < 0 || rr >= long(h) || cc < 0 || cc >= long(w) || !mask[std::size_t(rr) * w + std::size_t(cc)])
            interior = false;
        }
      }
      if (!interior) out.push_back(r * w + c);
    }
  }
  return out;
}

namespace {

// Nearest-neighbor distance from each point of `a` to the set `b`, in pixels.
std::vector<double> directed_distances(const std::vector<std::size_t>& a,
                                       const std::vector<std::size_t>& b, std::size_t w) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double ar = double(a[i] / w), ac = double(a[i] % w);
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < b.size(); ++j) {
      const double dr = ar - double(b[j] / w), dc = ac - double(b[j] % w);
      best = std::min(best, dr * dr + dc * dc);
    }
    out[i] = std::sqrt(best);
  }
  return out;
}

double percentile95(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const double pos = 0.95 * double(v.size() - 1);
  const std::size_t lo = std::size_t(pos);
  if (lo + 1 >= v.size()) return v.back();
  const double frac = pos - double(lo);
  return v[lo] + frac * (v[lo + 1] - v[lo]);
}

double mean(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x;
  return s / double(v.size());
}

}  // namespace

BoundaryMetrics boundary_metrics(const std::vector<std::uint8_t>& pred,
                                 const std::vector<std::uint8_t>& gt, std::size_t h,
                                 std::size_t w, double spacing) {
  const auto bp = boundary_pixels(pred, h, w);
  const auto bg = boundary_pixels(gt, h, w);
  if (bp.empty() || bg.empty())
    throw std::invalid_argument("boundary_metrics: empty mask has no boundary");
  const auto dpg = directed_distances(bp, bg, w);
  const auto dgp = directed_distances(bg, bp, w);
  std::vector<double> all = dpg;
  all.insert(all.end(), dgp.begin(), dgp.end());
  BoundaryMetrics m;
  m.hd95 = spacing * percentile95(std::move(all));
  m.asd = spacing * 0.5 * (mean(dpg) + mean(dgp));
  return m;
}

ClassMetrics class_metrics(const std::vector<int>& pred, const std::vector<int>& gt,
                           std::size_t h, std::size_t w, int cls, double spacing) {
  if (pred.size() != gt.size() || pred.size() != h * w)
    throw std::invalid_argument("class_metrics: size mismatch");
  std::vector<std::uint8_t> pm(pred.size()), gm(gt.size());
  std::size_t np = 0, ng = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    pm[i] = pred[i] == cls;
    gm[i] = gt[i] == cls;
    np += pm[i];
    ng += gm[i];
  }
  const OverlapMetrics o = overlap_metrics(pm, gm);
  ClassMetrics m;
  m.dice = o.dice;
  m.iou = o.iou;
  m.acc = o.acc;
  m.pre = o.pre;
  m.sen = o.sen;
  m.spe = o.spe;
  if (np > 0 && ng > 0) {
    const BoundaryMetrics b = boundary_metrics(pm, gm, h, w, spacing);
    m.hd95 = b.hd95;
    m.asd = b.asd;
  } else if (np == 0 && ng == 0) {
    m.hd95 = 0.0;
    m.asd = 0.0;
  }
  return m;
}

namespace {

template <typename T>
std::vector<int> argmax_impl(const T* logits, std::size_t n, std::size_t k) {
  std::vector<int> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const T* row = logits + i * k;
    std::size_t best = 0;
    for (std::size_t j = 1; j < k; ++j)
      if (row[j] > row[best]) best = j;
    out[i] = int(best);
  }
  return out;
}

}  // namespace

std::vector<int> argmax_labels(const float* logits, std::size_t n, std::size_t k) {
  return argmax_impl(logits, n, k);
}

std::vector<int> argmax_labels(const double* logits, std::size_t n, std::size_t k) {
  return argmax_impl(logits, n, k);
}

double mean_foreground_dice(const std::vector<int>& pred, const std::vector<int>& gt,
                            std::size_t k) {
  if (k < 2) throw std::invalid_argument("mean_foreground_dice: need a foreground class");
  double s = 0;
  for (int c = 1; c < int(k); ++c) {
    std::vector<std::uint8_t> pm(pred.size()), gm(gt.size());
    for (std::size_t i = 0; i < pred.size(); ++i) {
      pm[i] = pred[i] == c;
      gm[i] = gt[i] == c;
    }
    s += overlap_metrics(pm, gm).dice;
  }
  return s / double(k - 1);
}

}  // namespace pcm
