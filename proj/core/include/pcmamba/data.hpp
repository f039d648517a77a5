#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "pcmamba/io.hpp"
#include "pcmamba/rng.hpp"
#include "pcmamba/tensor.hpp"

namespace pcm {

// Class ids used throughout: 0 background, 1 CSF, 2 GM, 3 WM.
inline constexpr int kClassBg = 0;
inline constexpr int kClassCsf = 1;
inline constexpr int kClassGm = 2;
inline constexpr int kClassWm = 3;
inline constexpr std::size_t kNumClasses = 4;

struct LesionSpec {
  std::size_t row = 0, col = 0;
  double radius = 0;
};

struct LesionParams {
  std::size_t max_lesions = 2;    // per phantom, drawn uniformly in {0..max}
  double radius_min = 2.0;
  double radius_max = 4.0;
  double intensity_shift = -0.25;
};

template <typename T>
struct Phantom {
  Tensor<T> image;          // [1 x H x W], values in [0, 1]
  std::vector<int> label;   // H*W, row-major
  std::vector<LesionSpec> lesions;
};

// Flipped class inside a lesion disc. Total and fixed-point free, so every
// disc pixel is guaranteed to disagree with its (healthy) mirror.
inline int lesion_flip(int cls) { return cls == kClassGm ? kClassWm : kClassGm; }

namespace detail {

struct PhantomField {
  double cy, a, b;            // ellipse center row and semi-axes
  double t_wm, t_gm, t_csf;   // band thresholds on the warped radius
  double amp[3], phase[3];    // boundary warp harmonics (k = 2, 3, 4)
  double shade_amp, shade_phase;

  // warped elliptical radius; depends on the column only through |u|, so the
  // field is exactly mirror-symmetric about the vertical midline
  double rho(double r, double au) const {
    const double v = r + 0.5 - cy;
    const double base = std::sqrt((au / a) * (au / a) + (v / b) * (v / b));
    const double ang = std::atan2(v, au);
    double warp = 0;
    for (int k = 0; k < 3; ++k) warp += amp[k] * std::cos(double(k + 2) * ang + phase[k]);
    return base * (1.0 + warp);
  }

  int label_at(double rho_val) const {
    if (rho_val < t_wm) return kClassWm;
    if (rho_val < t_gm) return kClassGm;
    if (rho_val < t_csf) return kClassCsf;
    return kClassBg;
  }

  double intensity_at(double rho_val, int cls) const {
    static constexpr double base[4] = {0.05, 0.30, 0.55, 0.85};
    double x = base[cls] + 0.06 * std::cos(3.0 * rho_val + shade_phase) * shade_amp;
    x += 0.04 * std::max(0.0, 1.0 - rho_val);
    return std::min(1.0, std::max(0.0, x));
  }
};

inline PhantomField make_field(Rng& rng, std::size_t h, std::size_t w) {
  PhantomField f;
  f.cy = 0.5 * double(h) * (1.0 + 0.06 * (rng.uniform() - 0.5));
  f.a = 0.42 * double(w) * (1.0 + 0.15 * (rng.uniform() - 0.5));
  f.b = 0.38 * double(h) * (1.0 + 0.15 * (rng.uniform() - 0.5));
  f.t_wm = 0.52 + 0.06 * (rng.uniform() - 0.5);
  f.t_gm = 0.78 + 0.06 * (rng.uniform() - 0.5);
  f.t_csf = 1.00 + 0.06 * (rng.uniform() - 0.5);
  for (int k = 0; k < 3; ++k) {
    f.amp[k] = 0.03 * rng.uniform();
    f.phase[k] = 6.2831853071795864769 * rng.uniform();
  }
  f.shade_amp = rng.uniform();
  f.shade_phase = 6.2831853071795864769 * rng.uniform();
  return f;
}

}  // namespace detail

// Deterministic synthetic "tissue" phantom: smooth concentric bands, exactly
// mirror-symmetric by construction, optionally broken by label-flipping discs
// on the left side and by per-pixel (non-mirrored) Gaussian noise.
template <typename T>
Phantom<T> generate_phantom(std::uint64_t seed, std::size_t h, std::size_t w, double noise_sigma,
                            const LesionParams& lp = {}) {
  if (h < 16 || w < 16 || h % 2 != 0 || w % 2 != 0)
    throw std::invalid_argument("phantom: dims must be even and at least 16");
  if (noise_sigma < 0) throw std::invalid_argument("phantom: noise sigma must be >= 0");
  if (lp.radius_min > lp.radius_max || lp.radius_min < 1)
    throw std::invalid_argument("phantom: bad lesion radius range");

  for (int attempt = 0; attempt < 32; ++attempt) {
    Rng rng(Rng::mix(seed) + std::uint64_t(attempt));
    const auto field = detail::make_field(rng, h, w);

    Phantom<T> ph;
    ph.image = Tensor<T>(Shape{1, h, w});
    ph.label.assign(h * w, kClassBg);
    T* img = ph.image.data();
    bool present[kNumClasses] = {false, false, false, false};
    for (std::size_t r = 0; r < h; ++r)
      for (std::size_t c = 0; c < w; ++c) {
        const double au = std::abs(c + 0.5 - 0.5 * double(w));
        const double rho = field.rho(double(r), au);
        const int cls = field.label_at(rho);
        ph.label[r * w + c] = cls;
        img[r * w + c] = static_cast<T>(field.intensity_at(rho, cls));
        present[cls] = true;
      }
    if (!(present[0] && present[1] && present[2] && present[3])) continue;  // retry

    // lesions: whole discs strictly on the left side of the midline; flips are
    // applied once per pixel of the disc union so overlapping discs cannot
    // cancel each other out
    const std::size_t n_lesions = rng.uniform_index(lp.max_lesions + 1);
    std::vector<std::uint8_t> in_lesion(h * w, 0);
    bool placed_ok = true;
    for (std::size_t li = 0; li < n_lesions; ++li) {
      const double rad = lp.radius_min + (lp.radius_max - lp.radius_min) * rng.uniform();
      const std::size_t irad = static_cast<std::size_t>(std::ceil(rad));
      if (w / 2 < 2 * irad + 3 || h < 2 * irad + 4) {
        placed_ok = false;
        break;
      }
      const std::size_t cr = irad + 1 + rng.uniform_index(h - 2 * irad - 2);
      const std::size_t cc = irad + 1 + rng.uniform_index(w / 2 - 2 * irad - 2);
      ph.lesions.push_back(LesionSpec{cr, cc, rad});
      for (std::size_t r = cr - irad; r <= cr + irad; ++r)
        for (std::size_t c = cc - irad; c <= cc + irad; ++c) {
          const double dr = double(r) - double(cr), dc = double(c) - double(cc);
          if (dr * dr + dc * dc <= rad * rad) in_lesion[r * w + c] = 1;
        }
    }
    if (!placed_ok) continue;
    for (std::size_t p = 0; p < h * w; ++p) {
      if (!in_lesion[p]) continue;
      ph.label[p] = lesion_flip(ph.label[p]);
      img[p] = static_cast<T>(
          std::min(1.0, std::max(0.0, double(img[p]) + lp.intensity_shift)));
    }

    if (noise_sigma > 0) {
      for (std::size_t i = 0; i < h * w; ++i)
        img[i] = static_cast<T>(std::min(
            1.0, std::max(0.0, double(img[i]) + rng.normal(0.0, noise_sigma))));
    }
    return ph;
  }
  throw std::runtime_error("phantom: class balance not reached within retry budget");
}

// ---------------------------------------------------------------------------
// Dataset directory IO.

enum class Split { Train, Val, Test };

inline std::vector<Split> split_assignment(std::size_t n, double f_train, double f_val,
                                           std::uint64_t seed) {
  if (f_train < 0 || f_val < 0 || f_train + f_val > 1.0 + 1e-12)
    throw std::invalid_argument("split: fractions must be nonnegative and sum to <= 1");
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(Rng::mix(seed) ^ 0x517cc1b727220a95ULL);  // split stream, distinct from samples
  rng.shuffle(order);
  const std::size_t n_train = static_cast<std::size_t>(std::floor(f_train * double(n)));
  const std::size_t n_val = static_cast<std::size_t>(std::floor(f_val * double(n)));
  std::vector<Split> out(n, Split::Test);
  for (std::size_t i = 0; i < n && i < n_train; ++i) out[order[i]] = Split::Train;
  for (std::size_t i = n_train; i < n && i < n_train + n_val; ++i) out[order[i]] = Split::Val;
  return out;
}

struct DatasetManifest {
  std::size_t n_samples = 0;
  std::size_t height = 64, width = 64;
  std::uint64_t seed = 1;
  double noise_sigma = 0.02;
  LesionParams lesions;
  double split_train = 0.7, split_val = 0.15, split_test = 0.15;

  void validate() const {
    if (n_samples < 1) throw std::invalid_argument("manifest: need at least one sample");
    if (std::abs(split_train + split_val + split_test - 1.0) > 1e-9)
      throw std::invalid_argument("manifest: split fractions must sum to 1");
    if (split_train < 0 || split_val < 0 || split_test < 0)
      throw std::invalid_argument("manifest: split fractions must be nonnegative");
  }
};

template <typename T>
struct Dataset {
  DatasetManifest manifest;
  std::vector<Phantom<T>> samples;
  std::vector<Split> split;

  std::vector<std::size_t> indices(Split s) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < split.size(); ++i)
      if (split[i] == s) out.push_back(i);
    return out;
  }
};

namespace detail {

inline std::string sample_file(const std::string& dir, const char* stem, std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s_%05zu.pctn", stem, i);
  return (std::filesystem::path(dir) / buf).string();
}

inline std::string lesion_str(const std::vector<LesionSpec>& ls) {
  std::string s;
  for (const auto& l : ls) {
    if (!s.empty()) s += ";";
    s += std::to_string(l.row) + "," + std::to_string(l.col) + "," + std::to_string(l.radius);
  }
  return s;
}

inline std::vector<LesionSpec> parse_lesions(const std::string& s) {
  std::vector<LesionSpec> out;
  std::size_t pos = 0;
  while (pos < s.size()) {
    std::size_t end = s.find(';', pos);
    if (end == std::string::npos) end = s.size();
    const std::string item = s.substr(pos, end - pos);
    LesionSpec l;
    if (std::sscanf(item.c_str(), "%zu,%zu,%lf", &l.row, &l.col, &l.radius) != 3)
      throw std::runtime_error("dataset: bad lesion entry '" + item + "'");
    out.push_back(l);
    pos = end + 1;
  }
  return out;
}

}  // namespace detail

// Generates manifest.n_samples phantoms (per-sample seeds derived from the
// manifest seed) and writes manifest.txt plus one image and one label tensor
// per sample.
template <typename T>
Dataset<T> write_dataset(const DatasetManifest& m, const std::string& dir) {
  m.validate();
  std::filesystem::create_directories(dir);
  Dataset<T> ds;
  ds.manifest = m;
  ds.split = split_assignment(m.n_samples, m.split_train, m.split_val, m.seed);

  KvFile kv;
  kv.set("format", "pcmamba-dataset v1");
  kv.set_num("n_samples", double(m.n_samples));
  kv.set_num("height", double(m.height));
  kv.set_num("width", double(m.width));
  kv.set_num("seed", double(m.seed));
  kv.set_num("noise_sigma", m.noise_sigma);
  kv.set_num("lesion_max", double(m.lesions.max_lesions));
  kv.set_num("lesion_radius_min", m.lesions.radius_min);
  kv.set_num("lesion_radius_max", m.lesions.radius_max);
  kv.set_num("lesion_intensity_shift", m.lesions.intensity_shift);
  kv.set_num("split_train", m.split_train);
  kv.set_num("split_val", m.split_val);
  kv.set_num("split_test", m.split_test);

  for (std::size_t i = 0; i < m.n_samples; ++i) {
    auto ph = generate_phantom<T>(Rng::mix(m.seed) + 0x9e3779b97f4a7c15ULL * (i + 1), m.height,
                                  m.width, m.noise_sigma, m.lesions);
    save_tensor(detail::sample_file(dir, "img", i), ph.image);
    Tensor<T> lbl(Shape{m.height * m.width});
    for (std::size_t p = 0; p < ph.label.size(); ++p) lbl.data()[p] = static_cast<T>(ph.label[p]);
    save_tensor(detail::sample_file(dir, "lbl", i), lbl);
    if (!ph.lesions.empty())
      kv.set("lesions_" + std::to_string(i), detail::lesion_str(ph.lesions));
    ds.samples.push_back(std::move(ph));
  }
  kv.save((std::filesystem::path(dir) / "manifest.txt").string());
  return ds;
}

template <typename T>
Dataset<T> read_dataset(const std::string& dir) {
  const std::string mpath = (std::filesystem::path(dir) / "manifest.txt").string();
  KvFile kv = KvFile::load(mpath);
  if (kv.get_or("format", "") != "pcmamba-dataset v1")
    throw std::runtime_error("dataset " + dir + ": unrecognized manifest format");
  Dataset<T> ds;
  DatasetManifest& m = ds.manifest;
  m.n_samples = static_cast<std::size_t>(kv.get_num("n_samples"));
  m.height = static_cast<std::size_t>(kv.get_num("height"));
  m.width = static_cast<std::size_t>(kv.get_num("width"));
  m.seed = static_cast<std::uint64_t>(kv.get_num("seed"));
  m.noise_sigma = kv.get_num("noise_sigma");
  m.lesions.max_lesions = static_cast<std::size_t>(kv.get_num("lesion_max"));
  m.lesions.radius_min = kv.get_num("lesion_radius_min");
  m.lesions.radius_max = kv.get_num("lesion_radius_max");
  m.lesions.intensity_shift = kv.get_num("lesion_intensity_shift");
  m.split_train = kv.get_num("split_train");
  m.split_val = kv.get_num("split_val");
  m.split_test = kv.get_num("split_test");
  m.validate();
  ds.split = split_assignment(m.n_samples, m.split_train, m.split_val, m.seed);

  for (std::size_t i = 0; i < m.n_samples; ++i) {
    Phantom<T> ph;
    ph.image = load_tensor<T>(detail::sample_file(dir, "img", i));
    if (ph.image.shape() != Shape{1, m.height, m.width})
      throw std::runtime_error("dataset " + dir + ": image " + std::to_string(i) +
                               " has shape " + shape_str(ph.image.shape()));
    Tensor<T> lbl = load_tensor<T>(detail::sample_file(dir, "lbl", i));
    if (lbl.size() != m.height * m.width)
      throw std::runtime_error("dataset " + dir + ": label " + std::to_string(i) +
                               " has wrong size");
    ph.label.resize(lbl.size());
    for (std::size_t p = 0; p < lbl.size(); ++p) {
      const long v = std::lround(double(lbl.values()[p]));
      if (v < 0 || v >= long(kNumClasses))
        throw std::runtime_error("dataset " + dir + ": label value out of range");
      ph.label[p] = static_cast<int>(v);
    }
    ph.lesions = detail::parse_lesions(kv.get_or("lesions_" + std::to_string(i), ""));
    ds.samples.push_back(std::move(ph));
  }
  return ds;
}

}  // namespace pcm
