#pragma once

#include <cstdint>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "pcmamba/io.hpp"
#include "pcmamba/pcblock.hpp"
#include "pcmamba/rng.hpp"
#include "pcmamba/ssm.hpp"
#include "pcmamba/tensor.hpp"

namespace pcm {

enum class VariantKind { FullPC, CrnOnly, RandomMaskPpm, PpmOnly, CnnCrn, PlainE2E };

inline const char* variant_name(VariantKind v) {
  switch (v) {
    case VariantKind::FullPC: return "full";
    case VariantKind::CrnOnly: return "crn-only";
    case VariantKind::RandomMaskPpm: return "random-mask";
    case VariantKind::PpmOnly: return "ppm-only";
    case VariantKind::CnnCrn: return "cnn-crn";
    case VariantKind::PlainE2E: return "e2e";
  }
  throw std::invalid_argument("variant_name: bad enum value");
}

inline VariantKind parse_variant(const std::string& s) {
  for (VariantKind v : {VariantKind::FullPC, VariantKind::CrnOnly, VariantKind::RandomMaskPpm,
                        VariantKind::PpmOnly, VariantKind::CnnCrn, VariantKind::PlainE2E})
    if (s == variant_name(v)) return v;
  throw std::invalid_argument("unknown variant '" + s +
                              "' (full|crn-only|random-mask|ppm-only|cnn-crn|e2e)");
}

inline BlockWiring variant_wiring(VariantKind v, bool bidirectional) {
  BlockWiring w;
  w.bidirectional = bidirectional;
  switch (v) {
    case VariantKind::FullPC: break;
    case VariantKind::CrnOnly: w.use_ppm = false; break;
    case VariantKind::RandomMaskPpm: w.random_mask = true; break;
    case VariantKind::PpmOnly: w.use_crn = false; break;
    case VariantKind::CnnCrn: w.conv_crn = true; break;
    case VariantKind::PlainE2E: w.unit_gate = true; break;
  }
  return w;
}

// Four encoder scales (1/4 .. 1/32 of the input), a bottleneck at the coarsest
// scale, three decoder scales back up to 1/4, then a patch-expansion head.
struct NetworkConfig {
  std::size_t height = 64, width = 64;
  std::size_t in_channels = 1;
  std::size_t patch_size = 4;
  std::size_t embed_dim = 32;
  std::size_t num_classes = 4;
  std::size_t state_dim = 8;
  std::vector<std::size_t> stage_depths = {2, 2, 2, 2};
  std::size_t bottleneck_depth = 2;
  std::vector<std::size_t> decoder_depths = {2, 2, 2};
  VariantKind variant = VariantKind::FullPC;
  PpmConfig ppm;
  CrnConfig crn;
  bool bidirectional = true;

  std::size_t stage_width(std::size_t s) const { return embed_dim << s; }

  void validate() const {
    if (patch_size < 1) throw std::invalid_argument("config: patch size must be >= 1");
    const std::size_t unit = patch_size * 8;  // patch embed plus three 2x merges
    if (height == 0 || width == 0 || height % unit != 0 || width % unit != 0)
      throw std::invalid_argument("config: input size " + std::to_string(height) + "x" +
                                  std::to_string(width) + " must be a positive multiple of " +
                                  std::to_string(unit));
    if (embed_dim < 2 || embed_dim % 2 != 0)
      throw std::invalid_argument("config: embed dim must be even (midline mirror exactness)");
    if (num_classes < 2) throw std::invalid_argument("config: need at least two classes");
    if (state_dim < 1) throw std::invalid_argument("config: state dim must be >= 1");
    if (in_channels < 1) throw std::invalid_argument("config: input channels must be >= 1");
    if (stage_depths.size() != 4)
      throw std::invalid_argument("config: expected 4 encoder stage depths");
    if (decoder_depths.size() != 3)
      throw std::invalid_argument("config: expected 3 decoder stage depths");
    ppm.validate();
    crn.validate();
  }
};

template <typename T>
struct Network {
  NetworkConfig cfg;
  Tensor<T> embed_w, embed_b;
  std::vector<std::vector<BlockParams<T>>> enc;  // [4][stage_depths[s]]
  std::vector<Tensor<T>> down_w, down_b;         // [3]
  std::vector<BlockParams<T>> bottleneck;
  std::vector<Tensor<T>> up_w, up_b;             // [3]
  std::vector<Tensor<T>> reduce_w, reduce_b;     // [3]
  std::vector<std::vector<BlockParams<T>>> dec;  // [3][decoder_depths[s]]
  Tensor<T> head_expand_w, head_expand_b, head_cls_w, head_cls_b;
};

namespace detail {

template <typename T, typename F>
void visit_block(BlockParams<T>& b, const std::string& prefix, F&& f) {
  f(prefix + ".ln_gamma", b.ln_gamma);
  f(prefix + ".ln_beta", b.ln_beta);
  f(prefix + ".crn.w1", b.crn.w1);
  f(prefix + ".crn.b1", b.crn.b1);
  f(prefix + ".crn.w2", b.crn.w2);
  f(prefix + ".crn.b2", b.crn.b2);
  f(prefix + ".crn.wo", b.crn.wo);
  f(prefix + ".crn.bo", b.crn.bo);
  f(prefix + ".conv.weight", b.conv_w);
  f(prefix + ".conv.bias", b.conv_b);
  f(prefix + ".fuse.w1", b.fuse.w1);
  f(prefix + ".fuse.b1", b.fuse.b1);
  f(prefix + ".fuse.w2", b.fuse.w2);
  f(prefix + ".fuse.b2", b.fuse.b2);
  f(prefix + ".ssm.a", b.ssm.a);
  f(prefix + ".ssm.b_weight", b.ssm.b_weight);
  f(prefix + ".ssm.b_bias", b.ssm.b_bias);
  f(prefix + ".ssm.c_weight", b.ssm.c_weight);
  f(prefix + ".ssm.c_bias", b.ssm.c_bias);
  f(prefix + ".ssm.dt_weight", b.ssm.dt_weight);
  f(prefix + ".ssm.dt_bias", b.ssm.dt_bias);
  f(prefix + ".ssm.skip", b.ssm.skip);
}

}  // namespace detail

// Walks every parameter in a fixed order; f(name, tensor&). The same walk
// drives initialization, the optimizer, checkpoints, and parameter distances.
template <typename T, typename F>
void visit_params(Network<T>& net, F&& f) {
  f("embed.weight", net.embed_w);
  f("embed.bias", net.embed_b);
  for (std::size_t s = 0; s < net.enc.size(); ++s) {
    for (std::size_t d = 0; d < net.enc[s].size(); ++d)
      detail::visit_block(net.enc[s][d], "enc" + std::to_string(s) + ".blk" + std::to_string(d),
                          f);
    if (s + 1 < net.enc.size()) {
      f("down" + std::to_string(s) + ".weight", net.down_w[s]);
      f("down" + std::to_string(s) + ".bias", net.down_b[s]);
    }
  }
  for (std::size_t d = 0; d < net.bottleneck.size(); ++d)
    detail::visit_block(net.bottleneck[d], "bottleneck.blk" + std::to_string(d), f);
  for (std::size_t s = 0; s < net.dec.size(); ++s) {
    f("up" + std::to_string(s) + ".weight", net.up_w[s]);
    f("up" + std::to_string(s) + ".bias", net.up_b[s]);
    f("reduce" + std::to_string(s) + ".weight", net.reduce_w[s]);
    f("reduce" + std::to_string(s) + ".bias", net.reduce_b[s]);
    for (std::size_t d = 0; d < net.dec[s].size(); ++d)
      detail::visit_block(net.dec[s][d], "dec" + std::to_string(s) + ".blk" + std::to_string(d),
                          f);
  }
  f("head.expand.weight", net.head_expand_w);
  f("head.expand.bias", net.head_expand_b);
  f("head.cls.weight", net.head_cls_w);
  f("head.cls.bias", net.head_cls_b);
}

template <typename T>
std::vector<std::pair<std::string, Tensor<T>*>> param_map(Network<T>& net) {
  std::vector<std::pair<std::string, Tensor<T>*>> out;
  visit_params(net, [&](const std::string& n, Tensor<T>& t) { out.emplace_back(n, &t); });
  return out;
}

namespace detail {

inline bool ends_with(const std::string& s, const std::string& suf) {
  return s.size() >= suf.size() && s.compare(s.size() - suf.size(), suf.size(), suf) == 0;
}

// Every parameter is seeded from (run seed, parameter name), so two networks
// built from the same seed agree parameter-by-parameter regardless of variant.
template <typename T>
void init_param(std::uint64_t seed, const std::string& name, Tensor<T>& t) {
  T* d = t.data();
  const std::size_t n = t.size();
  if (ends_with(name, ".ln_gamma") || ends_with(name, ".ssm.skip")) {
    std::fill(d, d + n, T(1));
    return;
  }
  if (ends_with(name, ".ssm.a")) {
    for (std::size_t i = 0; i < n; ++i) d[i] = -T(i + 1);
    return;
  }
  if (name.find("bias") != std::string::npos || ends_with(name, ".ln_beta") ||
      ends_with(name, ".b1") || ends_with(name, ".b2") || ends_with(name, ".bo")) {
    std::fill(d, d + n, T(0));
    return;
  }
  Rng rng(Rng::mix(seed) ^ Rng::hash_name(name));
  double fan_sum;
  const Shape& sh = t.shape();
  if (sh.size() == 4)
    fan_sum = double((sh[0] + sh[1]) * sh[2] * sh[3]);  // conv kernel
  else if (sh.size() == 2)
    fan_sum = double(sh[0] + sh[1]);
  else
    fan_sum = double(n + 1);  // vector weight (per-channel projection)
  const double sd = std::sqrt(2.0 / fan_sum);
  for (std::size_t i = 0; i < n; ++i) d[i] = static_cast<T>(rng.normal(0.0, sd));
}

template <typename T>
BlockParams<T> alloc_block(std::size_t c, std::size_t n_state, const CrnConfig& crn) {
  const std::size_t kk = static_cast<std::size_t>(crn.kernel_size * crn.kernel_size);
  const std::size_t hid = static_cast<std::size_t>(crn.mlp_hidden);
  BlockParams<T> b;
  b.ln_gamma = Tensor<T>(Shape{c});
  b.ln_beta = Tensor<T>(Shape{c});
  b.crn = CrnParams<T>{Tensor<T>(Shape{kk * c, hid}), Tensor<T>(Shape{hid}),
                       Tensor<T>(Shape{hid, kk}),     Tensor<T>(Shape{kk}),
                       Tensor<T>(Shape{c, c}),        Tensor<T>(Shape{c})};
  b.fuse = FuseParams<T>{Tensor<T>(Shape{2 * c, 2 * c}), Tensor<T>(Shape{2 * c}),
                         Tensor<T>(Shape{2 * c, c}), Tensor<T>(Shape{c})};
  b.ssm.a = Tensor<T>(Shape{n_state});
  b.ssm.b_weight = Tensor<T>(Shape{n_state, c});
  b.ssm.b_bias = Tensor<T>(Shape{n_state});
  b.ssm.c_weight = Tensor<T>(Shape{n_state, c});
  b.ssm.c_bias = Tensor<T>(Shape{n_state});
  b.ssm.dt_weight = Tensor<T>(Shape{c});
  b.ssm.dt_bias = Tensor<T>(Shape{1});
  b.ssm.skip = Tensor<T>(Shape{c});
  b.conv_w = Tensor<T>(Shape{c, c, 3, 3});
  b.conv_b = Tensor<T>(Shape{c});
  return b;
}

}  // namespace detail

template <typename T>
Network<T> build_variant(const NetworkConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Network<T> net;
  net.cfg = cfg;
  const std::size_t pe = cfg.patch_size * cfg.patch_size * cfg.in_channels;
  const std::size_t c0 = cfg.embed_dim;
  net.embed_w = Tensor<T>(Shape{pe, c0});
  net.embed_b = Tensor<T>(Shape{c0});
  net.enc.resize(4);
  for (std::size_t s = 0; s < 4; ++s) {
    const std::size_t cs = cfg.stage_width(s);
    for (std::size_t d = 0; d < cfg.stage_depths[s]; ++d)
      net.enc[s].push_back(detail::alloc_block<T>(cs, cfg.state_dim, cfg.crn));
    if (s < 3) {
      net.down_w.push_back(Tensor<T>(Shape{4 * cs, 2 * cs}));
      net.down_b.push_back(Tensor<T>(Shape{2 * cs}));
    }
  }
  const std::size_t cb = cfg.stage_width(3);
  for (std::size_t d = 0; d < cfg.bottleneck_depth; ++d)
    net.bottleneck.push_back(detail::alloc_block<T>(cb, cfg.state_dim, cfg.crn));
  net.dec.resize(3);
  for (std::size_t s = 0; s < 3; ++s) {
    const std::size_t cin = cfg.stage_width(3 - s);   // incoming coarse width
    const std::size_t cout = cfg.stage_width(2 - s);  // width after the 2x expansion
    net.up_w.push_back(Tensor<T>(Shape{cin, 2 * cin}));
    net.up_b.push_back(Tensor<T>(Shape{2 * cin}));
    net.reduce_w.push_back(Tensor<T>(Shape{2 * cout, cout}));
    net.reduce_b.push_back(Tensor<T>(Shape{cout}));
    for (std::size_t d = 0; d < cfg.decoder_depths[s]; ++d)
      net.dec[s].push_back(detail::alloc_block<T>(cout, cfg.state_dim, cfg.crn));
  }
  const std::size_t px = cfg.patch_size * cfg.patch_size;
  net.head_expand_w = Tensor<T>(Shape{c0, px * c0});
  net.head_expand_b = Tensor<T>(Shape{px * c0});
  net.head_cls_w = Tensor<T>(Shape{c0, cfg.num_classes});
  net.head_cls_b = Tensor<T>(Shape{cfg.num_classes});

  visit_params(net, [&](const std::string& name, Tensor<T>& t) {
    detail::init_param(seed, name, t);
    t.set_requires_grad(true);
  });
  return net;
}

template <typename T>
std::size_t param_count(Network<T>& net) {
  std::size_t n = 0;
  visit_params(net, [&](const std::string&, Tensor<T>& t) { n += t.size(); });
  return n;
}

// ---------------------------------------------------------------------------
// Forward pass.

template <typename T>
FeatureMap<T> patch_embed(const Network<T>& net, const Tensor<T>& image) {
  const auto& cfg = net.cfg;
  if (image.shape() != Shape{cfg.in_channels, cfg.height, cfg.width})
    throw std::invalid_argument("patch_embed: image is " + shape_str(image.shape()) +
                                ", config wants [" + std::to_string(cfg.in_channels) + "x" +
                                std::to_string(cfg.height) + "x" + std::to_string(cfg.width) +
                                "]");
  // [Cin x H x W] -> tokens [H*W x Cin] -> patch fold -> linear
  auto tokens = transpose2d(reshape(image, Shape{cfg.in_channels, cfg.height * cfg.width}));
  auto folded = space_to_depth(tokens, cfg.height, cfg.width, cfg.patch_size);
  auto emb = add(matmul(folded, net.embed_w), net.embed_b);
  return FeatureMap<T>{cfg.height / cfg.patch_size, cfg.width / cfg.patch_size, cfg.embed_dim,
                       emb};
}

template <typename T>
FeatureMap<T> downsample(const FeatureMap<T>& f, const Tensor<T>& w, const Tensor<T>& b) {
  f.validate();
  if (f.h % 2 != 0 || f.w % 2 != 0)
    throw std::invalid_argument("downsample: grid " + std::to_string(f.h) + "x" +
                                std::to_string(f.w) + " must have even dims");
  auto merged = space_to_depth(f.values, f.h, f.w, 2);
  auto out = add(matmul(merged, w), b);
  return FeatureMap<T>{f.h / 2, f.w / 2, 2 * f.c, out};
}

template <typename T>
FeatureMap<T> upsample(const FeatureMap<T>& f, const Tensor<T>& w, const Tensor<T>& b) {
  f.validate();
  auto expanded = add(matmul(f.values, w), b);  // [hw x 2*Cin] = [hw x 4*(Cin/2)]
  auto spread = depth_to_space(expanded, f.h, f.w, 2);
  return FeatureMap<T>{2 * f.h, 2 * f.w, f.c / 2, spread};
}

template <typename T>
FeatureMap<T> run_blocks(const FeatureMap<T>& f, const std::vector<BlockParams<T>>& blocks,
                         const NetworkConfig& cfg, const BlockWiring& wiring, Rng* mask_rng) {
  FeatureMap<T> cur = f;
  for (const auto& b : blocks)
    cur = pcmamba_block_forward(cur, b, cfg.ppm, cfg.crn, wiring, mask_rng);
  return cur;
}

// Per-token class logits [H*W x K]; mask_rng supplies Bernoulli draws for the
// random-mask variant and is ignored otherwise.
template <typename T>
Tensor<T> forward_tokens(const Network<T>& net, const Tensor<T>& image, Rng* mask_rng = nullptr) {
  const auto& cfg = net.cfg;
  const BlockWiring wiring = variant_wiring(cfg.variant, cfg.bidirectional);

  FeatureMap<T> cur = patch_embed(net, image);
  std::vector<FeatureMap<T>> skips;
  for (std::size_t s = 0; s < 4; ++s) {
    cur = run_blocks(cur, net.enc[s], cfg, wiring, mask_rng);
    if (s < 3) {
      skips.push_back(cur);
      cur = downsample(cur, net.down_w[s], net.down_b[s]);
    }
  }
  cur = run_blocks(cur, net.bottleneck, cfg, wiring, mask_rng);
  for (std::size_t s = 0; s < 3; ++s) {
    cur = upsample(cur, net.up_w[s], net.up_b[s]);
    const FeatureMap<T>& skip = skips[2 - s];
    auto cat = concat_cols(cur.values, skip.values);
    auto red = add(matmul(cat, net.reduce_w[s]), net.reduce_b[s]);
    cur = FeatureMap<T>{skip.h, skip.w, skip.c, red};
    cur = run_blocks(cur, net.dec[s], cfg, wiring, mask_rng);
  }
  auto expanded = add(matmul(cur.values, net.head_expand_w), net.head_expand_b);
  auto full = depth_to_space(expanded, cur.h, cur.w, cfg.patch_size);  // [H*W x C]
  return add(matmul(full, net.head_cls_w), net.head_cls_b);
}

template <typename T>
Tensor<T> forward(const Network<T>& net, const Tensor<T>& image, Rng* mask_rng = nullptr) {
  auto tok = forward_tokens(net, image, mask_rng);
  return reshape(transpose2d(tok),
                 Shape{net.cfg.num_classes, net.cfg.height, net.cfg.width});
}

// ---------------------------------------------------------------------------
// Checkpoints: a text manifest (ordered names and shapes) followed by the
// tensors in manifest order, each in the tensor file format.

template <typename T>
void save_checkpoint(Network<T>& net, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open checkpoint for writing: " + path);
  auto params = param_map(net);
  os << "pcmamba-checkpoint v1\n";
  os << "params = " << params.size() << "\n";
  for (auto& [name, t] : params) {
    os << name << " " << shape_str(t->shape()) << "\n";
  }
  os << "\n";
  for (auto& [name, t] : params) save_tensor(os, *t);
  if (!os) throw std::runtime_error("checkpoint write failed: " + path);
}

template <typename T>
void load_checkpoint(Network<T>& net, const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open checkpoint: " + path);
  std::string line;
  if (!std::getline(is, line) || line != "pcmamba-checkpoint v1")
    throw std::runtime_error("checkpoint " + path + ": bad header '" + line + "'");
  if (!std::getline(is, line) || line.rfind("params = ", 0) != 0)
    throw std::runtime_error("checkpoint " + path + ": missing parameter count");
  const std::size_t count = std::stoul(line.substr(9));
  auto params = param_map(net);
  if (count != params.size())
    throw std::runtime_error("checkpoint " + path + ": has " + std::to_string(count) +
                             " parameters, network expects " + std::to_string(params.size()));
  for (auto& [name, t] : params) {
    if (!std::getline(is, line))
      throw std::runtime_error("checkpoint " + path + ": truncated manifest");
    std::istringstream ls(line);
    std::string mname, mshape;
    ls >> mname >> mshape;
    if (mname != name || mshape != shape_str(t->shape()))
      throw std::runtime_error("checkpoint " + path + ": expected '" + name + " " +
                               shape_str(t->shape()) + "', found '" + line + "'");
  }
  if (!std::getline(is, line) || !line.empty())
    throw std::runtime_error("checkpoint " + path + ": manifest not terminated");
  for (auto& [name, t] : params) {
    Tensor<T> loaded = load_tensor<T>(is);
    if (loaded.shape() != t->shape())
      throw std::runtime_error("checkpoint " + path + ": tensor '" + name + "' is " +
                               shape_str(loaded.shape()) + ", expected " +
                               shape_str(t->shape()));
    std::copy(loaded.data(), loaded.data() + loaded.size(), t->data());
  }
}

// Key=value round trip of the architecture description, so a checkpoint can
// carry a sidecar file that reconstructs the matching network.
inline KvFile net_config_kv(const NetworkConfig& cfg) {
  KvFile kv;
  kv.set_num("height", double(cfg.height));
  kv.set_num("width", double(cfg.width));
  kv.set_num("in_channels", double(cfg.in_channels));
  kv.set_num("patch_size", double(cfg.patch_size));
  kv.set_num("embed_dim", double(cfg.embed_dim));
  kv.set_num("num_classes", double(cfg.num_classes));
  kv.set_num("state_dim", double(cfg.state_dim));
  auto join = [](const std::vector<std::size_t>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
    return s;
  };
  kv.set("stage_depths", join(cfg.stage_depths));
  kv.set_num("bottleneck_depth", double(cfg.bottleneck_depth));
  kv.set("decoder_depths", join(cfg.decoder_depths));
  kv.set("variant", variant_name(cfg.variant));
  kv.set_num("bidirectional", cfg.bidirectional ? 1 : 0);
  kv.set_num("ppm_theta", cfg.ppm.theta);
  kv.set_num("ppm_radius", double(cfg.ppm.neighborhood_radius));
  kv.set_num("crn_kernel", double(cfg.crn.kernel_size));
  kv.set_num("crn_dilation", double(cfg.crn.dilation));
  kv.set_num("crn_hidden", double(cfg.crn.mlp_hidden));
  return kv;
}

inline NetworkConfig net_config_from_kv(const KvFile& kv) {
  NetworkConfig cfg;
  cfg.height = std::size_t(kv.get_num_or("height", double(cfg.height)));
  cfg.width = std::size_t(kv.get_num_or("width", double(cfg.width)));
  cfg.in_channels = std::size_t(kv.get_num_or("in_channels", double(cfg.in_channels)));
  cfg.patch_size = std::size_t(kv.get_num_or("patch_size", double(cfg.patch_size)));
  cfg.embed_dim = std::size_t(kv.get_num_or("embed_dim", double(cfg.embed_dim)));
  cfg.num_classes = std::size_t(kv.get_num_or("num_classes", double(cfg.num_classes)));
  cfg.state_dim = std::size_t(kv.get_num_or("state_dim", double(cfg.state_dim)));
  auto split = [](const std::string& s) {
    std::vector<std::size_t> v;
    std::istringstream ss(s);
    std::string tok;
    while (std::getline(ss, tok, ',')) v.push_back(std::stoul(tok));
    return v;
  };
  if (kv.has("stage_depths")) cfg.stage_depths = split(kv.get("stage_depths"));
  cfg.bottleneck_depth =
      std::size_t(kv.get_num_or("bottleneck_depth", double(cfg.bottleneck_depth)));
  if (kv.has("decoder_depths")) cfg.decoder_depths = split(kv.get("decoder_depths"));
  if (kv.has("variant")) cfg.variant = parse_variant(kv.get("variant"));
  cfg.bidirectional = kv.get_num_or("bidirectional", cfg.bidirectional ? 1 : 0) != 0;
  cfg.ppm.theta = kv.get_num_or("ppm_theta", cfg.ppm.theta);
  cfg.ppm.neighborhood_radius =
      std::size_t(kv.get_num_or("ppm_radius", double(cfg.ppm.neighborhood_radius)));
  cfg.crn.kernel_size = std::size_t(kv.get_num_or("crn_kernel", double(cfg.crn.kernel_size)));
  cfg.crn.dilation = std::size_t(kv.get_num_or("crn_dilation", double(cfg.crn.dilation)));
  cfg.crn.mlp_hidden = std::size_t(kv.get_num_or("crn_hidden", double(cfg.crn.mlp_hidden)));
  cfg.validate();
  return cfg;
}

}  // namespace pcm
