#pragma once

#include <cstdint>
#include <memory>
#include <stdexcept>
#include <vector>

#include "pcmamba/rng.hpp"
#include "pcmamba/ssm.hpp"
#include "pcmamba/tensor.hpp"

namespace pcm {

// Token grids are stored as [H*W x C] tensors with rows in row-major (r, c)
// order; the mirror axis is the vertical midline, column c <-> W-1-c.

template <typename T>
struct FeatureMap {
  std::size_t h = 0, w = 0, c = 0;
  Tensor<T> values;  // [H*W x C]

  std::size_t midline_axis() const { return w / 2; }

  void validate() const {
    if (h < 1 || w < 1 || c < 1)
      throw std::invalid_argument("feature map: degenerate dims");
    if (values.shape() != Shape{h * w, c})
      throw std::invalid_argument("feature map: tensor is " + shape_str(values.shape()) +
                                  ", expected [" + std::to_string(h * w) + "x" +
                                  std::to_string(c) + "]");
  }
};

inline std::pair<std::size_t, std::size_t> symmetric_index(std::size_t row, std::size_t col,
                                                           std::size_t h, std::size_t w) {
  if (row >= h || col >= w)
    throw std::invalid_argument("symmetric_index: position (" + std::to_string(row) + "," +
                                std::to_string(col) + ") outside " + std::to_string(h) + "x" +
                                std::to_string(w) + " grid");
  return {row, w - 1 - col};
}

struct PpmConfig {
  double theta = 0.7;
  int neighborhood_radius = 1;
  double epsilon = 1e-6;

  void validate() const {
    if (theta < -1.0 || theta > 1.0)
      throw std::invalid_argument("ppm: theta must lie in [-1, 1]");
    if (neighborhood_radius < 0) throw std::invalid_argument("ppm: radius must be >= 0");
    if (!(epsilon > 0)) throw std::invalid_argument("ppm: epsilon must be positive");
  }
};

struct CrnConfig {
  int kernel_size = 3;
  int dilation = 2;
  int mlp_hidden = 18;  // 2 * k^2 at the default k

  void validate() const {
    if (kernel_size < 1 || kernel_size % 2 == 0)
      throw std::invalid_argument("crn: kernel size must be odd and >= 1");
    if (dilation < 1) throw std::invalid_argument("crn: dilation must be >= 1");
    if (mlp_hidden < 1) throw std::invalid_argument("crn: mlp hidden width must be >= 1");
  }
};

namespace detail {
template <typename T>
inline constexpr T kDegenerateNorm = T(1e-8);
}

template <typename T>
T cosine_similarity(const std::vector<T>& a, const std::vector<T>& b) {
  if (a.size() != b.size())
    throw std::invalid_argument("cosine_similarity: length mismatch");
  T dot = T(0), na = T(0), nb = T(0);
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  na = std::sqrt(na);
  nb = std::sqrt(nb);
  if (na < detail::kDegenerateNorm<T> || nb < detail::kDegenerateNorm<T>) return T(0);
  if (a == b) return T(1);
  const T s = dot / (na * nb);
  return std::min(T(1), std::max(T(-1), s));
}

// ---------------------------------------------------------------------------
// Predictive branch: compare each token against its mirror and local
// neighborhood, keep only dissimilar entries, and aggregate them with
// (1 - similarity) weights. Optionally the threshold mask is replaced by
// Bernoulli(0.5) draws (ablation mode); the draws are fixed per forward pass.

namespace detail {

template <typename T>
struct PpmCache {
  std::vector<std::uint32_t> offsets;  // per position, into the pair arrays
  std::vector<std::uint32_t> idx;      // compared token index
  std::vector<T> s, w;                 // similarity and weight per kept pair
  std::vector<std::uint8_t> rigid;     // 1 if s carries no gradient (degenerate/equal)
  std::vector<T> den;                  // per position
  std::vector<T> norm;                 // per token
};

}  // namespace detail

template <typename T>
Tensor<T> ppm_forward(const FeatureMap<T>& f, const PpmConfig& cfg, Rng* mask_rng = nullptr) {
  f.validate();
  cfg.validate();
  const std::size_t h = f.h, w = f.w, c = f.c, hw = h * w;
  const T theta = static_cast<T>(cfg.theta);
  const T eps = static_cast<T>(cfg.epsilon);
  const int rad = cfg.neighborhood_radius;
  const T* xv = f.values.data();

  auto cache = std::make_shared<detail::PpmCache<T>>();
  cache->offsets.assign(hw + 1, 0);
  cache->den.assign(hw, eps);
  cache->norm.resize(hw);
  for (std::size_t i = 0; i < hw; ++i) {
    T nn = T(0);
    const T* row = xv + i * c;
    for (std::size_t ch = 0; ch < c; ++ch) nn += row[ch] * row[ch];
    cache->norm[i] = std::sqrt(nn);
  }

  Tensor<T> out(Shape{hw, c});
  T* ov = out.data();
  std::vector<std::size_t> comp;
  comp.reserve(static_cast<std::size_t>(2 * rad + 1) * (2 * rad + 1) + 1);

  for (std::size_t r = 0; r < h; ++r) {
    for (std::size_t cc = 0; cc < w; ++cc) {
      const std::size_t i = r * w + cc;
      comp.clear();
      for (int dy = -rad; dy <= rad; ++dy) {
        const std::ptrdiff_t rr = static_cast<std::ptrdiff_t>(r) + dy;
        if (rr < 0 || rr >= static_cast<std::ptrdiff_t>(h)) continue;
        for (int dx = -rad; dx <= rad; ++dx) {
          const std::ptrdiff_t cx = static_cast<std::ptrdiff_t>(cc) + dx;
          if (cx < 0 || cx >= static_cast<std::ptrdiff_t>(w)) continue;
          const std::size_t j = static_cast<std::size_t>(rr) * w + static_cast<std::size_t>(cx);
          if (j != i) comp.push_back(j);
        }
      }
      const std::size_t mirror = r * w + (w - 1 - cc);
      if (mirror != i && std::find(comp.begin(), comp.end(), mirror) == comp.end())
        comp.push_back(mirror);

      const T* xi = xv + i * c;
      const T ni = cache->norm[i];
      T den = eps;
      T* orow = ov + i * c;
      for (const std::size_t j : comp) {
        const T* xj = xv + j * c;
        const T nj = cache->norm[j];
        T s;
        bool rigid = false;
        if (ni < detail::kDegenerateNorm<T> || nj < detail::kDegenerateNorm<T>) {
          s = T(0);
          rigid = true;
        } else if (std::equal(xi, xi + c, xj)) {
          s = T(1);
          rigid = true;  // cosine gradient vanishes at identical vectors
        } else {
          T dot = T(0);
          for (std::size_t ch = 0; ch < c; ++ch) dot += xi[ch] * xj[ch];
          s = std::min(T(1), std::max(T(-1), dot / (ni * nj)));
        }
        const bool masked = mask_rng ? mask_rng->bernoulli(0.5) : (s < theta);
        if (!masked) continue;
        const T weight = T(1) - s;
        den += weight;
        for (std::size_t ch = 0; ch < c; ++ch) orow[ch] += weight * xj[ch];
        cache->idx.push_back(static_cast<std::uint32_t>(j));
        cache->s.push_back(s);
        cache->w.push_back(weight);
        cache->rigid.push_back(rigid ? 1 : 0);
      }
      cache->den[i] = den;
      cache->offsets[i + 1] = static_cast<std::uint32_t>(cache->idx.size());
      const T inv = T(1) / den;
      for (std::size_t ch = 0; ch < c; ++ch) orow[ch] *= inv;
    }
  }

  if (detail::tape_wants<T>({&f.values})) {
    detail::mark_output(out);
    Tape<T>* tp = active_tape<T>();
    tp->record([xn = f.values.node, on = out.node, tp, cache, hw, c] {
      const std::vector<T>* go = tp->find_grad(on.get());
      if (!go) return;
      auto& gx = tp->grad_buffer(xn);
      const T* xv = xn->value.data();
      const T* zv = on->value.data();
      for (std::size_t i = 0; i < hw; ++i) {
        const std::uint32_t b = cache->offsets[i], e = cache->offsets[i + 1];
        if (b == e) continue;
        const T* gi = go->data() + i * c;
        const T* zi = zv + i * c;
        const T* xi = xv + i * c;
        const T inv_den = T(1) / cache->den[i];
        T gz_dot = T(0);
        for (std::size_t ch = 0; ch < c; ++ch) gz_dot += gi[ch] * zi[ch];
        const T gden = -gz_dot * inv_den;  // dL/d(den)
        const T ni = cache->norm[i];
        for (std::uint32_t kk = b; kk < e; ++kk) {
          const std::size_t j = cache->idx[kk];
          const T* xj = xv + j * c;
          const T weight = cache->w[kk];
          T* gxj = gx.data() + j * c;
          // through the numerator term w * x_j
          T a_dot_xj = T(0);
          for (std::size_t ch = 0; ch < c; ++ch) {
            gxj[ch] += weight * gi[ch] * inv_den;
            a_dot_xj += gi[ch] * inv_den * xj[ch];
          }
          if (cache->rigid[kk]) continue;
          // through the similarity inside w = 1 - s and the denominator
          const T gs = -(a_dot_xj + gden);
          const T s = cache->s[kk];
          const T nj = cache->norm[j];
          const T inv_ninj = T(1) / (ni * nj);
          T* gxi = gx.data() + i * c;
          for (std::size_t ch = 0; ch < c; ++ch) {
            gxi[ch] += gs * (xj[ch] * inv_ninj - s * xi[ch] / (ni * ni));
            gxj[ch] += gs * (xi[ch] * inv_ninj - s * xj[ch] / (nj * nj));
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Corrective branch: a small MLP turns each dilated patch into a weight
// simplex over its k^2 entries; the weighted patch sum passes through a final
// linear map.

template <typename T>
struct CrnParams {
  Tensor<T> w1, b1;  // [k^2*C x hidden], [hidden]
  Tensor<T> w2, b2;  // [hidden x k^2], [k^2]
  Tensor<T> wo, bo;  // [C x C], [C]
};

template <typename T>
Tensor<T> crn_forward(const FeatureMap<T>& f, const CrnConfig& cfg, const CrnParams<T>& p) {
  f.validate();
  cfg.validate();
  const std::size_t k = static_cast<std::size_t>(cfg.kernel_size);
  const std::size_t kk = k * k;
  if (p.w1.shape() != Shape{kk * f.c, static_cast<std::size_t>(cfg.mlp_hidden)} ||
      p.w2.shape() != Shape{static_cast<std::size_t>(cfg.mlp_hidden), kk} ||
      p.wo.shape() != Shape{f.c, f.c})
    throw std::invalid_argument("crn: weight shapes inconsistent with config");
  auto patches = im2col_dilated(f.values, f.h, f.w, k, static_cast<std::size_t>(cfg.dilation));
  auto hidden = gelu(add(matmul(patches, p.w1), p.b1));
  auto beta = softmax(add(matmul(hidden, p.w2), p.b2), 1);
  auto pooled = patch_weighted_sum(beta, patches);
  return add(matmul(pooled, p.wo), p.bo);
}

// ---------------------------------------------------------------------------
// Fusion of the two branch outputs into the per-token gate.

template <typename T>
struct FuseParams {
  Tensor<T> w1, b1;  // [2C x 2C], [2C]
  Tensor<T> w2, b2;  // [2C x C], [C]
};

template <typename T>
Tensor<T> fuse(const Tensor<T>& z_mask, const Tensor<T>& z_density, const FuseParams<T>& p) {
  if (z_mask.shape() != z_density.shape())
    throw std::invalid_argument("fuse: branch shapes differ, " + shape_str(z_mask.shape()) +
                                " vs " + shape_str(z_density.shape()));
  auto cat = concat_cols(z_mask, z_density);
  auto hidden = gelu(add(matmul(cat, p.w1), p.b1));
  return add(matmul(hidden, p.w2), p.b2);
}

// ---------------------------------------------------------------------------
// The assembled block.

template <typename T>
struct BlockParams {
  Tensor<T> ln_gamma, ln_beta;
  CrnParams<T> crn;
  FuseParams<T> fuse;
  SsmParams<T> ssm;
  Tensor<T> conv_w, conv_b;  // used only when the conv replacement is wired in
};

// Which signals reach the gate; the default wiring runs both branches.
struct BlockWiring {
  bool use_ppm = true;      // off: the mask input to fusion is identically 0
  bool random_mask = false; // Bernoulli(0.5) mask draws instead of thresholding
  bool use_crn = true;      // off: the density input to fusion is identically 0
  bool conv_crn = false;    // density branch is a plain 3x3 dilation-1 conv
  bool unit_gate = false;   // bypass both branches, gate identically 1
  bool bidirectional = true;
};

template <typename T>
FeatureMap<T> pcmamba_block_forward(const FeatureMap<T>& f, const BlockParams<T>& bp,
                                    const PpmConfig& ppm_cfg, const CrnConfig& crn_cfg,
                                    const BlockWiring& wiring, Rng* mask_rng = nullptr) {
  f.validate();
  const std::size_t hw = f.h * f.w, c = f.c;
  auto x = f.values;
  auto hn = layer_norm(x, bp.ln_gamma, bp.ln_beta);

  if (wiring.random_mask && !mask_rng)
    throw std::invalid_argument("block: random-mask wiring needs a mask rng");
  Tensor<T> zf;
  if (wiring.unit_gate) {
    zf = Tensor<T>::ones({hw, c});
  } else {
    FeatureMap<T> normed{f.h, f.w, c, hn};
    Tensor<T> zm = wiring.use_ppm
                       ? ppm_forward(normed, ppm_cfg, wiring.random_mask ? mask_rng : nullptr)
                       : Tensor<T>::zeros({hw, c});
    Tensor<T> zd;
    if (!wiring.use_crn) {
      zd = Tensor<T>::zeros({hw, c});
    } else if (wiring.conv_crn) {
      auto grid = reshape(transpose2d(hn), Shape{c, f.h, f.w});
      auto conv = conv2d(grid, bp.conv_w, 1, 1);
      auto biased = add(conv, reshape(bp.conv_b, Shape{c, 1, 1}));
      zd = transpose2d(reshape(biased, Shape{c, hw}));
    } else {
      zd = crn_forward(normed, crn_cfg, bp.crn);
    }
    zf = fuse(zm, zd, bp.fuse);
  }

  auto y = modulated_scan(hn, zf, bp.ssm);
  if (wiring.bidirectional) {
    auto yr = reverse_rows(modulated_scan(reverse_rows(hn), reverse_rows(zf), bp.ssm));
    y = scale(add(y, yr), T(0.5));
  }
  return FeatureMap<T>{f.h, f.w, c, add(x, y)};
}

}  // namespace pcm
