#pragma once

#include <cstdint>
#include <optional>
#include <vector>

namespace pcm {

// Binary-mask overlap scores.
//
// Empty-mask conventions: both masks empty gives dice = iou = 1, exactly one
// empty gives dice = iou = 0. Ratios with an empty denominator (pre, sen, spe)
// are 1 when vacuously satisfied (nothing to get wrong) and 0 otherwise.
struct OverlapMetrics {
  double dice = 0, iou = 0, acc = 0, pre = 0, sen = 0, spe = 0;
};

OverlapMetrics overlap_metrics(const std::vector<std::uint8_t>& pred,
                               const std::vector<std::uint8_t>& gt);

// Boundary pixels of a mask on an h x w grid: foreground pixels with at least
// one of their 8 neighbors (off-image counts as background) outside the mask.
// Returned as flat row-major indices in ascending order.
std::vector<std::size_t> boundary_pixels(const std::vector<std::uint8_t>& mask, std::size_t h,
                                         std::size_t w);

// hd95: 95th percentile (linear interpolation) of the union of both directed
// nearest-boundary-distance multisets. asd: the two directed means, averaged.
// Distances are Euclidean in pixels, scaled by `spacing`. Throws
// std::invalid_argument if either mask is empty (undefined boundary metric).
struct BoundaryMetrics {
  double hd95 = 0, asd = 0;
};

BoundaryMetrics boundary_metrics(const std::vector<std::uint8_t>& pred,
                                 const std::vector<std::uint8_t>& gt, std::size_t h,
                                 std::size_t w, double spacing = 1.0);

// Per-class summary for one sample. Boundary fields are empty when exactly one
// of the masks is empty (the sentinel case callers exclude from means).
struct ClassMetrics {
  double dice = 0, iou = 0, acc = 0, pre = 0, sen = 0, spe = 0;
  std::optional<double> hd95, asd;
};

ClassMetrics class_metrics(const std::vector<int>& pred, const std::vector<int>& gt,
                           std::size_t h, std::size_t w, int cls, double spacing = 1.0);

// Row-wise argmax over [n x k] logits; ties resolve to the lowest class id.
std::vector<int> argmax_labels(const float* logits, std::size_t n, std::size_t k);
std::vector<int> argmax_labels(const double* logits, std::size_t n, std::size_t k);

// Macro-averaged Dice over foreground classes 1..k-1.
double mean_foreground_dice(const std::vector<int>& pred, const std::vector<int>& gt,
                            std::size_t k);

}  // namespace pcm
