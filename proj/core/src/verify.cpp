#include "pcmamba/verify.hpp"

#include <algorithm>

namespace pcm {

namespace {

// ---------------------------------------------------------------------------
// Independent stepwise scan oracle in long double. Deliberately written as
// plain per-token scalar loops with the exact (e^w - 1)/a factor, no shared
// code with the production scan.

std::vector<double> oracle_scan(const Tensor<double>& u, const Tensor<double>* z,
                                const SsmParams<double>& p) {
  const std::size_t l = u.shape()[0], c = u.shape()[1], n = p.state_dim();
  std::vector<long double> x(c * n, 0.0L);
  std::vector<double> y(l * c);
  for (std::size_t t = 0; t < l; ++t) {
    const double* ut = u.data() + t * c;
    long double dtp = p.dt_bias.at(0);
    for (std::size_t j = 0; j < c; ++j) dtp += (long double)p.dt_weight.at(j) * ut[j];
    const long double dt = dtp > 30.0L ? dtp : std::log1p(std::exp(dtp));
    for (std::size_t ch = 0; ch < c; ++ch) {
      const long double zch = z ? (long double)z->data()[t * c + ch] : 1.0L;
      long double acc = 0.0L;
      for (std::size_t i = 0; i < n; ++i) {
        long double b = p.b_bias.at(i), cc = p.c_bias.at(i);
        for (std::size_t j = 0; j < c; ++j) {
          b += (long double)p.b_weight.at(i * c + j) * ut[j];
          cc += (long double)p.c_weight.at(i * c + j) * ut[j];
        }
        const long double a = p.a.at(i);
        const long double w = dt * a;
        const long double abar = std::exp(w);
        const long double f = w == 0.0L ? dt : (abar - 1.0L) / a;
        long double& xs = x[ch * n + i];
        xs = abar * xs + f * b * ut[ch];
        acc += cc * zch * xs;
      }
      y[t * c + ch] = double(acc + (long double)p.skip.at(ch) * ut[ch]);
    }
  }
  return y;
}

double rel_err_max(const double* a, const double* b, std::size_t n, double floor = 1e-9) {
  double worst = 0;
  for (std::size_t i = 0; i < n; ++i)
    worst = std::max(worst, std::abs(a[i] - b[i]) / std::max(std::abs(a[i]) + std::abs(b[i]), floor));
  return worst;
}

NetworkConfig one_block_config() {
  NetworkConfig cfg;
  cfg.height = 32;
  cfg.width = 32;
  cfg.embed_dim = 2;
  cfg.state_dim = 2;
  cfg.stage_depths = {1, 0, 0, 0};
  cfg.bottleneck_depth = 0;
  cfg.decoder_depths = {0, 0, 0};
  cfg.ppm.theta = 0.6;  // keep some pairs below threshold so the mask path is live
  return cfg;
}

template <typename T>
Dataset<T> synth_dataset(std::size_t train_n, std::size_t val_n, std::size_t h, std::size_t w,
                         double noise, std::uint64_t seed) {
  Dataset<T> ds;
  const std::size_t n = train_n + val_n;
  ds.manifest.n_samples = n;
  ds.manifest.height = h;
  ds.manifest.width = w;
  ds.manifest.seed = seed;
  ds.manifest.noise_sigma = noise;
  ds.manifest.split_train = double(train_n) / double(n);
  ds.manifest.split_val = double(val_n) / double(n);
  ds.manifest.split_test = 1.0 - ds.manifest.split_train - ds.manifest.split_val;
  ds.samples.reserve(n);
  for (std::size_t i = 0; i < n; ++i)
    ds.samples.push_back(generate_phantom<T>(Rng::mix(seed) + i, h, w, noise));
  ds.split.assign(n, Split::Test);
  for (std::size_t i = 0; i < train_n; ++i) ds.split[i] = Split::Train;
  for (std::size_t i = train_n; i < n; ++i) ds.split[i] = Split::Val;
  return ds;
}

template <typename T>
void set_params_from(Network<T>& net, const std::vector<double>& theta) {
  std::size_t k = 0;
  visit_params(net, [&](const std::string&, Tensor<T>& t) {
    for (std::size_t i = 0; i < t.size(); ++i) t.data()[i] = T(theta[k++]);
  });
  if (k != theta.size()) throw std::invalid_argument("set_params_from: size mismatch");
}

// Mean seg_loss gradient over a fixed batch, flattened in visit order.
std::vector<double> batch_grad(Network<double>& net, const std::vector<Phantom<double>>& batch,
                               double ce_w, double dice_w) {
  auto params = param_map(net);
  std::vector<double> flat;
  std::vector<std::vector<double>> acc(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) acc[i].assign(params[i].second->size(), 0.0);
  for (const auto& ph : batch) {
    Tape<double> tape;
    TapeScope<double> scope(tape);
    Tensor<double> loss = seg_loss(forward_tokens(net, ph.image), ph.label, ce_w, dice_w);
    tape.backward(loss, false);
    for (std::size_t i = 0; i < params.size(); ++i) {
      const std::vector<double>* g = tape.find_grad(*params[i].second);
      if (g)
        for (std::size_t j = 0; j < g->size(); ++j) acc[i][j] += (*g)[j];
    }
  }
  const double inv = 1.0 / double(batch.size());
  for (auto& a : acc)
    for (double& x : a) flat.push_back(x * inv);
  return flat;
}

std::vector<float> softmax_row(const float* row, std::size_t k) {
  float mx = row[0];
  for (std::size_t i = 1; i < k; ++i) mx = std::max(mx, row[i]);
  std::vector<float> p(k);
  float s = 0;
  for (std::size_t i = 0; i < k; ++i) {
    p[i] = std::exp(row[i] - mx);
    s += p[i];
  }
  for (auto& v : p) v /= s;
  return p;
}

}  // namespace

// ---------------------------------------------------------------------------

ProbeReport grad_check_suite(std::uint64_t seed) {
  detail::Stopwatch sw;
  ProbeReport rep;
  rep.probe = "grad_check";
  rep.seed = seed;
  rep.seeds = 1;
  nlohmann::json per = nlohmann::json::object();
  Rng rng(Rng::mix(seed) ^ 0x67726164636bULL);

  // Linear map: loss = sum(r .* (x w + b)); gradients are exact up to rounding.
  {
    Tensor<double> x = Tensor<double>::randn(Shape{4, 5}, rng, 1.0);
    Tensor<double> w = Tensor<double>::randn(Shape{5, 3}, rng, 0.7);
    Tensor<double> b = Tensor<double>::randn(Shape{4, 3}, rng, 0.5);
    Tensor<double> r = Tensor<double>::randn(Shape{4, 3}, rng, 1.0);
    w.set_requires_grad(true);
    b.set_requires_grad(true);
    auto loss = [&] { return sum_all(mul(add(matmul(x, w), b), r)); };
    rep.measurements["linear"] =
        grad_check_params(loss, {{"w", &w}, {"b", &b}}, 1e-6, &per);
  }

  // Modulated scan, L=6 N=4 C=3, including both sequence inputs.
  {
    SsmParams<double> p = detail::random_ssm<double>(3, 4, rng);
    Tensor<double> u = Tensor<double>::randn(Shape{6, 3}, rng, 0.8);
    Tensor<double> z = Tensor<double>::randn(Shape{6, 3}, rng, 0.5);
    for (std::size_t i = 0; i < z.size(); ++i) z.data()[i] += 0.75;
    Tensor<double> r = Tensor<double>::randn(Shape{6, 3}, rng, 1.0);
    u.set_requires_grad(true);
    z.set_requires_grad(true);
    auto loss = [&] { return sum_all(mul(modulated_scan(u, z, p), r)); };
    std::vector<std::pair<std::string, Tensor<double>*>> params = {
        {"u", &u},          {"z", &z},          {"a", &p.a},
        {"b_weight", &p.b_weight}, {"b_bias", &p.b_bias}, {"c_weight", &p.c_weight},
        {"c_bias", &p.c_bias},     {"dt_weight", &p.dt_weight}, {"dt_bias", &p.dt_bias},
        {"skip", &p.skip}};
    rep.measurements["modulated_scan"] = grad_check_params(loss, params, 1e-6, &per);
  }

  // One-block end-to-end network on 32x32 against its training objective.
  double net64 = 0;
  {
    auto net = build_variant<double>(one_block_config(), Rng::mix(seed) ^ 0x6e6574ULL);
    const auto ph = generate_phantom<double>(Rng::mix(seed) + 17, 32, 32, 0.05);
    auto loss = [&] { return seg_loss(forward_tokens(net, ph.image), ph.label, 1.0, 1.0); };
    net64 = grad_check_params(loss, param_map(net), 1e-4, &per);
    rep.measurements["network_1block_f64"] = net64;
  }

  // Same check in 32-bit: tape gradients of the f32 network against a
  // 64-bit central-difference oracle evaluated at the f32 parameter point.
  double net32 = 0;
  {
    auto netf = build_variant<float>(one_block_config(), Rng::mix(seed) ^ 0x6e6574ULL);
    auto netd = build_variant<double>(one_block_config(), Rng::mix(seed) ^ 0x6e6574ULL);
    std::vector<double> theta;
    visit_params(netf, [&](const std::string&, Tensor<float>& t) {
      for (std::size_t i = 0; i < t.size(); ++i) theta.push_back(double(t.data()[i]));
    });
    set_params_from(netd, theta);

    const auto phd = generate_phantom<double>(Rng::mix(seed) + 17, 32, 32, 0.05);
    const auto phf = generate_phantom<float>(Rng::mix(seed) + 17, 32, 32, 0.05);

    std::vector<std::vector<float>> g32;
    {
      auto params = param_map(netf);
      Tape<float> tape;
      TapeScope<float> scope(tape);
      Tensor<float> loss = seg_loss(forward_tokens(netf, phf.image), phf.label, 1.0, 1.0);
      tape.backward(loss, false);
      for (auto& pr : params) {
        const std::vector<float>* g = tape.find_grad(*pr.second);
        g32.push_back(g ? *g : std::vector<float>(pr.second->size(), 0.f));
      }
    }
    auto paramsd = param_map(netd);
    auto lossd = [&] { return seg_loss(forward_tokens(netd, phd.image), phd.label, 1.0, 1.0); };
    std::size_t pi = 0;
    for (auto& pr : paramsd) {
      Tensor<double>& p = *pr.second;
      std::vector<double> fd(p.size());
      for (std::size_t j = 0; j < p.size(); ++j) {
        const double orig = p.data()[j];
        p.data()[j] = orig + 1e-4;
        const double fp = lossd().data()[0];
        p.data()[j] = orig - 1e-4;
        const double fm = lossd().data()[0];
        p.data()[j] = orig;
        fd[j] = (fp - fm) / 2e-4;
      }
      double linf = 0;
      for (double x : fd) linf = std::max(linf, std::abs(x));
      const double floor = std::max(1e-6, 0.01 * linf);
      for (std::size_t j = 0; j < p.size(); ++j) {
        const double a = fd[j], b = double(g32[pi][j]);
        net32 = std::max(net32, std::abs(a - b) / std::max(std::abs(a) + std::abs(b), floor));
      }
      ++pi;
    }
    rep.measurements["network_1block_f32"] = net32;
  }

  rep.measurements["per_target"] = per;
  rep.checks.push_back(
      make_check("linear_rel_err", rep.measurements["linear"], "<=", 1e-8));
  rep.checks.push_back(
      make_check("modulated_scan_rel_err", rep.measurements["modulated_scan"], "<=", 1e-6));
  rep.checks.push_back(make_check("network_f64_rel_err", net64, "<=", 1e-5));
  rep.checks.push_back(make_check("network_f32_rel_err", net32, "<=", 1e-3));
  rep.runtime_seconds = sw.seconds();
  return rep;
}

// ---------------------------------------------------------------------------

ProbeReport scan_oracle_suite(std::uint64_t seed, int n_seeds) {
  detail::Stopwatch sw;
  ProbeReport rep;
  rep.probe = "scan_oracle";
  rep.seed = seed;
  rep.seeds = n_seeds;

  const std::size_t c = 3, n = 4;
  double worst_all = 0;
  for (std::size_t l : {std::size_t(1), std::size_t(2), std::size_t(8), std::size_t(64),
                        std::size_t(1024)}) {
    double worst = 0;
    for (int s = 0; s < n_seeds; ++s) {
      Rng rng(Rng::mix(seed) ^ Rng::mix(l * 1000 + std::uint64_t(s)));
      SsmParams<double> p = detail::random_ssm<double>(c, n, rng);
      Tensor<double> u = Tensor<double>::randn(Shape{l, c}, rng, 0.8);
      Tensor<double> z = Tensor<double>::randn(Shape{l, c}, rng, 0.5);
      for (std::size_t i = 0; i < z.size(); ++i) z.data()[i] += 0.8;

      const auto plain = selective_scan(u, p);
      const auto mod = modulated_scan(u, z, p);
      const auto oplain = oracle_scan(u, nullptr, p);
      const auto omod = oracle_scan(u, &z, p);
      worst = std::max(worst, rel_err_max(plain.y.data(), oplain.data(), l * c));
      worst = std::max(worst, rel_err_max(mod.data(), omod.data(), l * c));
    }
    rep.measurements["rel_err_L" + std::to_string(l)] = worst;
    worst_all = std::max(worst_all, worst);
  }

  // Unit gate: the modulated scan with z == 1 is bitwise the plain scan.
  double gate_diff = 0;
  {
    Rng rng(Rng::mix(seed) ^ 0x756e6974ULL);
    SsmParams<double> p = detail::random_ssm<double>(c, n, rng);
    Tensor<double> u = Tensor<double>::randn(Shape{64, c}, rng, 0.8);
    Tensor<double> ones(Shape{64, c});
    for (std::size_t i = 0; i < ones.size(); ++i) ones.data()[i] = 1.0;
    const auto plain = selective_scan(u, p);
    const auto mod = modulated_scan(u, ones, p);
    for (std::size_t i = 0; i < plain.y.size(); ++i)
      gate_diff = std::max(gate_diff, std::abs(plain.y.data()[i] - mod.data()[i]));
    rep.measurements["unit_gate_max_abs_diff"] = gate_diff;
  }

  // Memoryless limit: A so negative that exp(dt*A) underflows to zero; the
  // output must equal the per-token feedthrough C_t (Bbar_t u_t) + D u_t.
  double memless = 0;
  {
    Rng rng(Rng::mix(seed) ^ 0x6d656d30ULL);
    SsmParams<double> p = detail::random_ssm<double>(c, n, rng);
    for (std::size_t i = 0; i < n; ++i) p.a.data()[i] = -1e9;
    Tensor<double> u = Tensor<double>::randn(Shape{32, c}, rng, 0.8);
    const auto got = selective_scan(u, p);
    for (std::size_t t = 0; t < 32; ++t) {
      const double* ut = u.data() + t * c;
      double dtp = p.dt_bias.at(0);
      for (std::size_t j = 0; j < c; ++j) dtp += p.dt_weight.at(j) * ut[j];
      for (std::size_t ch = 0; ch < c; ++ch) {
        double acc = 0;
        for (std::size_t i = 0; i < n; ++i) {
          double b = p.b_bias.at(i), cc = p.c_bias.at(i);
          for (std::size_t j = 0; j < c; ++j) {
            b += p.b_weight.at(i * c + j) * ut[j];
            cc += p.c_weight.at(i * c + j) * ut[j];
          }
          acc += cc * (-1.0 / p.a.at(i)) * b * ut[ch];
        }
        acc += p.skip.at(ch) * ut[ch];
        const double y = got.y.at(t * c + ch);
        memless = std::max(memless, std::abs(y - acc) / std::max(std::abs(y) + std::abs(acc), 1e-9));
      }
    }
    rep.measurements["memoryless_rel_err"] = memless;
  }

  rep.checks.push_back(make_check("scan_vs_oracle_rel_err", worst_all, "<=", 1e-5));
  rep.checks.push_back(make_check("unit_gate_bitwise", gate_diff, "==", 0.0));
  rep.checks.push_back(make_check("memoryless_rel_err", memless, "<=", 1e-9));
  rep.runtime_seconds = sw.seconds();
  return rep;
}

// ---------------------------------------------------------------------------

ProbeReport convergence_experiment(const ConvergenceConfig& cfg) {
  detail::Stopwatch sw;
  ProbeReport rep;
  rep.probe = "convergence";
  rep.seed = cfg.base_seed;
  rep.seeds = cfg.seeds;
  rep.measurements["dice_threshold"] = cfg.dice_threshold;
  rep.measurements["budget_epochs"] = cfg.budget;
  auto per_seed = nlohmann::json::array();

  int ok = 0;
  for (int s = 0; s < cfg.seeds; ++s) {
    const std::uint64_t dseed = Rng::mix(cfg.base_seed) + std::uint64_t(s);
    Dataset<float> ds = synth_dataset<float>(cfg.train_n, cfg.val_n, cfg.height, cfg.width,
                                             cfg.noise_sigma, dseed);
    nlohmann::json entry;
    entry["seed_index"] = s;
    int e_full = 0, e_e2e = 0;
    for (VariantKind v : {VariantKind::FullPC, VariantKind::PlainE2E}) {
      NetworkConfig nc = cfg.net;
      nc.height = cfg.height;
      nc.width = cfg.width;
      nc.variant = v;
      auto net = build_variant<float>(nc, Rng::mix(cfg.base_seed ^ 0x696e6974ULL) + s);
      TrainConfig tc = cfg.train;
      tc.epochs = cfg.budget;
      tc.seed = dseed;
      const History h = train_loop(net, ds, tc);
      const int e = epochs_to_threshold(h, cfg.dice_threshold, cfg.budget);
      nlohmann::json curve = nlohmann::json::array();
      for (const auto& ep : h.epochs) curve.push_back(ep.val_dice_mean);
      const char* key = v == VariantKind::FullPC ? "full" : "e2e";
      entry[std::string(key) + "_epochs_to_threshold"] = e;
      entry[std::string(key) + "_val_dice"] = curve;
      entry[std::string(key) + "_aborted"] = h.aborted;
      (v == VariantKind::FullPC ? e_full : e_e2e) = e;
    }
    const bool seed_ok = e_full <= cfg.budget && e_full <= e_e2e;
    entry["pass"] = seed_ok;
    ok += seed_ok;
    per_seed.push_back(std::move(entry));
  }
  rep.measurements["per_seed"] = std::move(per_seed);

  const double need = std::ceil(2.0 * cfg.seeds / 3.0);
  rep.checks.push_back(make_check("seeds_full_within_budget_and_not_slower", double(ok), ">=", need));
  rep.runtime_seconds = sw.seconds();
  return rep;
}

// ---------------------------------------------------------------------------

ProbeReport smoothness_probe(const SmoothnessConfig& cfg) {
  if (!(cfg.radius > 0)) throw std::invalid_argument("smoothness_probe: radius must be positive");
  detail::Stopwatch sw;
  ProbeReport rep;
  rep.probe = "smoothness";
  rep.seed = cfg.base_seed;
  rep.seeds = cfg.seeds;
  rep.measurements["radius"] = cfg.radius;
  rep.measurements["n_pairs"] = cfg.n_pairs;
  auto per_seed = nlohmann::json::array();

  int ok = 0;
  for (int s = 0; s < cfg.seeds; ++s) {
    const std::uint64_t dseed = Rng::mix(cfg.base_seed ^ 0x736d6f6fULL) + s;
    std::vector<Phantom<double>> batch;
    for (std::size_t i = 0; i < cfg.batch; ++i)
      batch.push_back(
          generate_phantom<double>(dseed + 101 * i, cfg.height, cfg.width, cfg.noise_sigma));

    double lhat_full = 0, lhat_e2e = 0;
    for (VariantKind v : {VariantKind::FullPC, VariantKind::PlainE2E}) {
      NetworkConfig nc = cfg.net;
      nc.height = cfg.height;
      nc.width = cfg.width;
      nc.variant = v;
      auto net = build_variant<double>(nc, Rng::mix(cfg.base_seed) + s);
      std::vector<double> theta0;
      visit_params(net, [&](const std::string&, Tensor<double>& t) {
        for (std::size_t i = 0; i < t.size(); ++i) theta0.push_back(t.data()[i]);
      });
      auto grad_fn = [&](const std::vector<double>& theta) {
        set_params_from(net, theta);
        return batch_grad(net, batch, cfg.ce_w, cfg.dice_w);
      };
      Rng dir_rng(Rng::mix(cfg.base_seed ^ 0x64697273ULL) + s);  // same directions per variant
      const double lhat =
          smoothness_estimate(grad_fn, theta0, cfg.n_pairs, cfg.radius, dir_rng);
      set_params_from(net, theta0);
      (v == VariantKind::FullPC ? lhat_full : lhat_e2e) = lhat;
    }
    const double ratio = lhat_full / lhat_e2e;
    nlohmann::json entry;
    entry["seed_index"] = s;
    entry["lhat_full"] = lhat_full;
    entry["lhat_e2e"] = lhat_e2e;
    entry["ratio"] = ratio;
    entry["pass"] = ratio < 1.0;
    ok += ratio < 1.0;
    per_seed.push_back(std::move(entry));
  }
  rep.measurements["per_seed"] = std::move(per_seed);
  const double need = std::ceil(2.0 * cfg.seeds / 3.0);
  rep.checks.push_back(make_check("seeds_ratio_lt_1", double(ok), ">=", need));
  rep.runtime_seconds = sw.seconds();
  return rep;
}

// ---------------------------------------------------------------------------

BvOutcome bias_variance_run(VariantKind variant, const BiasVarianceConfig& cfg,
                            std::uint64_t seed) {
  if (cfg.n_resamples < 4)
    throw std::invalid_argument("bias_variance: need at least 4 resamples");
  if (cfg.probe_pixels < 1 || cfg.probe_images < 1)
    throw std::invalid_argument("bias_variance: need probe points");

  NetworkConfig nc = cfg.net;
  nc.height = cfg.height;
  nc.width = cfg.width;
  nc.variant = variant;
  const std::size_t k = nc.num_classes;

  // Fixed probe inputs with generator ground truth, shared by both variants.
  std::vector<Phantom<float>> probes;
  for (int i = 0; i < cfg.probe_images; ++i)
    probes.push_back(
        generate_phantom<float>(Rng::mix(seed ^ 0x70726f6265ULL) + i, cfg.height, cfg.width,
                                cfg.noise_sigma));
  Rng pick(Rng::mix(seed ^ 0x7069636bULL));
  std::vector<std::pair<std::size_t, std::size_t>> px(cfg.probe_pixels);
  for (auto& pr : px)
    pr = {pick.uniform_index(probes.size()), pick.uniform_index(cfg.height * cfg.width)};

  std::vector<std::vector<float>> preds;  // [kept][pixels*k]
  int excluded = 0;
  for (int r = 0; r < cfg.n_resamples; ++r) {
    const std::uint64_t rseed = Rng::mix(seed) ^ Rng::mix(7919u * (r + 1));
    Dataset<float> ds = synth_dataset<float>(cfg.train_n, cfg.val_n, cfg.height, cfg.width,
                                             cfg.noise_sigma, rseed);
    auto net = build_variant<float>(nc, Rng::mix(seed ^ 0x696e6974ULL));
    TrainConfig tc = cfg.train;
    tc.seed = rseed;
    const History h = train_loop(net, ds, tc);
    if (h.aborted) {
      ++excluded;
      continue;
    }
    std::vector<std::vector<float>> probs(probes.size());
    bool finite = true;
    for (std::size_t i = 0; i < probes.size(); ++i) {
      Tensor<float> logits = forward_tokens(net, probes[i].image);
      probs[i].resize(logits.size());
      const std::size_t rows = logits.shape()[0];
      for (std::size_t row = 0; row < rows; ++row) {
        const auto p = softmax_row(logits.data() + row * k, k);
        for (std::size_t cc = 0; cc < k; ++cc) {
          if (!std::isfinite(p[cc])) finite = false;
          probs[i][row * k + cc] = p[cc];
        }
      }
    }
    if (!finite) {
      ++excluded;
      continue;
    }
    std::vector<float> row(px.size() * k);
    for (std::size_t q = 0; q < px.size(); ++q)
      for (std::size_t cc = 0; cc < k; ++cc)
        row[q * k + cc] = probs[px[q].first][px[q].second * k + cc];
    preds.push_back(std::move(row));
  }
  if (preds.size() < 2)
    throw std::runtime_error("bias_variance: fewer than 2 usable resamples");

  BvOutcome out;
  out.excluded = excluded;
  const double nr = double(preds.size());
  double var_sum = 0, bias_sum = 0;
  for (std::size_t q = 0; q < px.size(); ++q) {
    const int gt = probes[px[q].first].label[px[q].second];
    for (std::size_t cc = 0; cc < k; ++cc) {
      double mean = 0;
      for (const auto& p : preds) mean += p[q * k + cc];
      mean /= nr;
      double var = 0;
      for (const auto& p : preds) {
        const double d = p[q * k + cc] - mean;
        var += d * d;
      }
      var /= nr;
      var_sum += var;
      const double target = gt == int(cc) ? 1.0 : 0.0;
      bias_sum += (mean - target) * (mean - target);
    }
  }
  out.mean_variance = var_sum / double(px.size());
  out.mean_bias_sq = bias_sum / double(px.size());
  return out;
}

ProbeReport bias_variance_probe(const BiasVarianceConfig& cfg) {
  detail::Stopwatch sw;
  ProbeReport rep;
  rep.probe = "bias_variance";
  rep.seed = cfg.base_seed;
  rep.seeds = cfg.seeds;
  rep.measurements["n_resamples"] = cfg.n_resamples;
  rep.measurements["probe_pixels"] = cfg.probe_pixels;
  auto per_seed = nlohmann::json::array();

  int ok = 0;
  for (int s = 0; s < cfg.seeds; ++s) {
    const std::uint64_t seed = Rng::mix(cfg.base_seed ^ 0x62766172ULL) + s;
    const BvOutcome full = bias_variance_run(VariantKind::FullPC, cfg, seed);
    const BvOutcome e2e = bias_variance_run(VariantKind::PlainE2E, cfg, seed);
    nlohmann::json entry;
    entry["seed_index"] = s;
    entry["full"] = {{"variance", full.mean_variance},
                     {"bias_sq", full.mean_bias_sq},
                     {"excluded", full.excluded}};
    entry["e2e"] = {{"variance", e2e.mean_variance},
                    {"bias_sq", e2e.mean_bias_sq},
                    {"excluded", e2e.excluded}};
    entry["pass"] = full.mean_variance < e2e.mean_variance;
    ok += full.mean_variance < e2e.mean_variance;
    per_seed.push_back(std::move(entry));
  }
  rep.measurements["per_seed"] = std::move(per_seed);
  const double need = std::ceil(2.0 * cfg.seeds / 3.0);
  rep.checks.push_back(make_check("seeds_variance_full_lt_e2e", double(ok), ">=", need));
  rep.runtime_seconds = sw.seconds();
  return rep;
}

}  // namespace pcm
