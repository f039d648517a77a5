// pcmamba: dataset generation, training, evaluation, verification probes and
// microbenchmarks behind one executable. Exit codes: 0 success, 1 usage error,
// 2 runtime failure, 3 verification threshold failure.

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "pcmamba/verify.hpp"

namespace fs = std::filesystem;
using namespace pcm;

namespace {

std::pair<std::size_t, std::size_t> parse_size(const std::string& s) {
  const auto x = s.find('x');
  if (x == std::string::npos || x == 0 || x + 1 >= s.size())
    throw CLI::ValidationError("--size", "expected HxW, e.g. 64x64");
  return {std::stoul(s.substr(0, x)), std::stoul(s.substr(x + 1))};
}

std::vector<double> parse_csv_nums(const std::string& s) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) out.push_back(std::stod(tok));
  return out;
}

int env_threads() {
  if (const char* v = std::getenv("PCMAMBA_THREADS")) {
    const int t = std::atoi(v);
    if (t >= 1) return t;
  }
  return 1;
}

// ---------------------------------------------------------------------------

struct GenDataArgs {
  std::string out;
  std::size_t n = 20;
  std::string size = "64x64";
  std::uint64_t seed = 1;
  double noise = 0.02;
  std::string lesions;  // "max,rmin,rmax,shift"
  double split_train = 0.7, split_val = 0.15;
};

int run_gen_data(const GenDataArgs& a) {
  DatasetManifest m;
  std::tie(m.height, m.width) = parse_size(a.size);
  m.n_samples = a.n;
  m.seed = a.seed;
  m.noise_sigma = a.noise;
  m.split_train = a.split_train;
  m.split_val = a.split_val;
  m.split_test = 1.0 - a.split_train - a.split_val;
  if (!a.lesions.empty()) {
    const auto v = parse_csv_nums(a.lesions);
    if (v.size() != 4)
      throw std::invalid_argument("--lesions expects max,radius_min,radius_max,shift");
    m.lesions.max_lesions = std::size_t(v[0]);
    m.lesions.radius_min = v[1];
    m.lesions.radius_max = v[2];
    m.lesions.intensity_shift = v[3];
  }
  const auto ds = write_dataset<float>(m, a.out);
  std::printf("wrote %zu samples (%zux%zu) to %s: %zu train / %zu val / %zu test\n",
              ds.samples.size(), m.height, m.width, a.out.c_str(),
              ds.indices(Split::Train).size(), ds.indices(Split::Val).size(),
              ds.indices(Split::Test).size());
  return 0;
}

// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string data, variant = "full", config, out;
  std::optional<int> epochs, batch, threads;
  std::optional<double> lr0, lr_min, weight_decay, ce_w, dice_w;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> embed, state_dim;
  bool no_clip = false;
};

TrainConfig train_config_from(const KvFile& kv) {
  TrainConfig tc;
  tc.lr0 = kv.get_num_or("lr0", tc.lr0);
  tc.lr_min = kv.get_num_or("lr_min", tc.lr_min);
  tc.epochs = int(kv.get_num_or("epochs", tc.epochs));
  tc.batch_size = int(kv.get_num_or("batch_size", tc.batch_size));
  tc.weight_decay = kv.get_num_or("weight_decay", tc.weight_decay);
  tc.beta1 = kv.get_num_or("beta1", tc.beta1);
  tc.beta2 = kv.get_num_or("beta2", tc.beta2);
  tc.eps = kv.get_num_or("eps", tc.eps);
  tc.ce_w = kv.get_num_or("ce_w", tc.ce_w);
  tc.dice_w = kv.get_num_or("dice_w", tc.dice_w);
  tc.clip_gradients = kv.get_num_or("clip_gradients", tc.clip_gradients ? 1 : 0) != 0;
  tc.clip_norm = kv.get_num_or("clip_norm", tc.clip_norm);
  tc.seed = std::uint64_t(kv.get_num_or("seed", double(tc.seed)));
  tc.threads = int(kv.get_num_or("threads", tc.threads));
  return tc;
}

int run_train(const TrainArgs& a) {
  KvFile kv;
  if (!a.config.empty()) kv = KvFile::load(a.config);
  TrainConfig tc = train_config_from(kv);
  if (tc.threads == 1) tc.threads = env_threads();
  if (a.epochs) tc.epochs = *a.epochs;
  if (a.batch) tc.batch_size = *a.batch;
  if (a.threads) tc.threads = *a.threads;
  if (a.lr0) tc.lr0 = *a.lr0;
  if (a.lr_min) tc.lr_min = *a.lr_min;
  if (a.weight_decay) tc.weight_decay = *a.weight_decay;
  if (a.ce_w) tc.ce_w = *a.ce_w;
  if (a.dice_w) tc.dice_w = *a.dice_w;
  if (a.seed) tc.seed = *a.seed;
  if (a.no_clip) tc.clip_gradients = false;
  tc.checkpoint_dir = a.out;

  const Dataset<float> ds = read_dataset<float>(a.data);
  NetworkConfig nc;
  nc.height = ds.manifest.height;
  nc.width = ds.manifest.width;
  nc.variant = parse_variant(a.variant);
  nc.embed_dim = std::size_t(kv.get_num_or("embed_dim", double(nc.embed_dim)));
  nc.state_dim = std::size_t(kv.get_num_or("state_dim", double(nc.state_dim)));
  if (a.embed) nc.embed_dim = *a.embed;
  if (a.state_dim) nc.state_dim = *a.state_dim;
  nc.validate();

  fs::create_directories(a.out);
  auto net = build_variant<float>(nc, tc.seed);
  const History hist = train_loop(net, ds, tc);
  hist.write_csv((fs::path(a.out) / "history.csv").string());
  net_config_kv(nc).save((fs::path(a.out) / "net_config.txt").string());

  if (hist.aborted) {
    std::fprintf(stderr, "training aborted: %s\n", hist.abort_reason.c_str());
    return 2;
  }
  std::printf("trained %s for %zu epochs: best val dice %.4f at epoch %d\n",
              variant_name(nc.variant), hist.epochs.size(), hist.best_val_dice,
              hist.best_epoch);
  std::printf("checkpoint: %s\nhistory:    %s\n",
              (fs::path(a.out) / "best.ckpt").string().c_str(),
              (fs::path(a.out) / "history.csv").string().c_str());
  return 0;
}

// ---------------------------------------------------------------------------

struct EvalArgs {
  std::string data, checkpoint, out, net_config;
};

const char* split_name(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
  }
  return "?";
}

int run_eval(const EvalArgs& a) {
  const Dataset<float> ds = read_dataset<float>(a.data);
  std::string cfg_path = a.net_config;
  if (cfg_path.empty())
    cfg_path = (fs::path(a.checkpoint).parent_path() / "net_config.txt").string();
  const NetworkConfig nc = net_config_from_kv(KvFile::load(cfg_path));
  if (nc.height != ds.manifest.height || nc.width != ds.manifest.width)
    throw std::runtime_error("checkpoint was trained on " + std::to_string(nc.height) + "x" +
                             std::to_string(nc.width) + ", dataset is " +
                             std::to_string(ds.manifest.height) + "x" +
                             std::to_string(ds.manifest.width));
  auto net = build_variant<float>(nc, 0);
  load_checkpoint(net, a.checkpoint);

  std::ofstream csv(a.out);
  if (!csv) throw std::runtime_error("cannot write " + a.out);
  csv << "sample,split,class,dice,iou,acc,pre,sen,spe,hd95,asd\n";
  csv.precision(10);

  const std::size_t k = nc.num_classes;
  std::vector<double> dice_sum(k - 1, 0.0);
  std::size_t no_boundary = 0;
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    const auto& ph = ds.samples[i];
    Rng mask_rng(Rng::mix(0x6576616cULL) ^ Rng::mix(i));
    const Tensor<float> logits = forward_tokens(net, ph.image, &mask_rng);
    const auto pred = argmax_labels(logits.data(), logits.shape()[0], k);
    for (std::size_t c = 1; c < k; ++c) {
      const ClassMetrics m = class_metrics(pred, ph.label, nc.height, nc.width, int(c));
      csv << i << ',' << split_name(ds.split[i]) << ',' << c << ',' << m.dice << ',' << m.iou
          << ',' << m.acc << ',' << m.pre << ',' << m.sen << ',' << m.spe << ',';
      if (m.hd95)
        csv << *m.hd95;
      else
        ++no_boundary;
      csv << ',';
      if (m.asd) csv << *m.asd;
      csv << '\n';
      dice_sum[c - 1] += m.dice;
    }
  }
  std::printf("evaluated %zu samples; mean dice per class:", ds.samples.size());
  for (std::size_t c = 1; c < k; ++c)
    std::printf(" %zu=%.4f", c, dice_sum[c - 1] / double(ds.samples.size()));
  std::printf("\n");
  if (no_boundary > 0)
    std::printf("%zu rows without boundary metrics (one side empty)\n", no_boundary);
  return 0;
}

// ---------------------------------------------------------------------------

struct VerifyArgs {
  std::string suite = "all", out = "reports";
  std::uint64_t seed = 0;
  bool seed_set = false;
  int seeds = 3, threads = 0;
  // convergence
  std::size_t train_n = 200, val_n = 40;
  int budget = 5;
  double dice_threshold = 0.90;
  double lr0 = 8e-4;
  int batch = 4;
  // smoothness
  int pairs = 8;
  double radius = 1e-3;
  // bias-variance
  int resamples = 8, probe_pixels = 64;
};

int run_verify(const VerifyArgs& a) {
  fs::create_directories(a.out);
  const int threads = a.threads > 0 ? a.threads : env_threads();
  std::vector<ProbeReport> reports;
  auto want = [&](const char* s) { return a.suite == "all" || a.suite == s; };

  if (want("grad")) reports.push_back(grad_check_suite(a.seed_set ? a.seed : 11));
  if (want("scan")) reports.push_back(scan_oracle_suite(a.seed_set ? a.seed : 5, 20));
  if (want("convergence")) {
    ConvergenceConfig cfg;
    if (a.seed_set) cfg.base_seed = a.seed;
    cfg.seeds = a.seeds;
    cfg.train_n = a.train_n;
    cfg.val_n = a.val_n;
    cfg.budget = a.budget;
    cfg.dice_threshold = a.dice_threshold;
    cfg.train.lr0 = a.lr0;
    cfg.train.batch_size = a.batch;
    cfg.train.threads = threads;
    reports.push_back(convergence_experiment(cfg));
  }
  if (want("smoothness")) {
    SmoothnessConfig cfg;
    if (a.seed_set) cfg.base_seed = a.seed;
    cfg.seeds = a.seeds;
    cfg.n_pairs = a.pairs;
    cfg.radius = a.radius;
    reports.push_back(smoothness_probe(cfg));
  }
  if (want("biasvar")) {
    BiasVarianceConfig cfg;
    if (a.seed_set) cfg.base_seed = a.seed;
    cfg.seeds = a.seeds;
    cfg.n_resamples = a.resamples;
    cfg.probe_pixels = a.probe_pixels;
    cfg.train.lr0 = a.lr0;
    cfg.train.batch_size = a.batch;
    cfg.train.threads = threads;
    reports.push_back(bias_variance_probe(cfg));
  }
  if (reports.empty())
    throw CLI::ValidationError("--suite",
                               "expected grad|scan|convergence|smoothness|biasvar|all");

  bool all_pass = true;
  for (const auto& rep : reports) {
    const std::string path = (fs::path(a.out) / (rep.probe + ".json")).string();
    rep.save(path);
    std::printf("[%s] %-12s %6.1fs  -> %s\n", rep.passed() ? "PASS" : "FAIL",
                rep.probe.c_str(), rep.runtime_seconds, path.c_str());
    for (const auto& c : rep.checks)
      std::printf("       %-40s %.6g %s %.6g\n", c.name.c_str(), c.value, c.relation.c_str(),
                  c.threshold);
    all_pass = all_pass && rep.passed();
  }
  return all_pass ? 0 : 3;
}

// ---------------------------------------------------------------------------

struct BenchArgs {
  std::string op;
  std::string sizes = "64,128";
};

template <typename F>
double time_ms(F&& f) {
  f();  // warmup
  int iters = 0;
  const auto t0 = std::chrono::steady_clock::now();
  double el = 0;
  do {
    f();
    ++iters;
    el = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  } while (el < 0.2 && iters < 50);
  return el * 1000.0 / iters;
}

int run_bench(const BenchArgs& a) {
  Rng rng(7);
  std::printf("%-10s %8s %12s\n", "op", "size", "ms/iter");
  for (const double szd : parse_csv_nums(a.sizes)) {
    const std::size_t sz = std::size_t(szd);
    double ms = 0;
    if (a.op == "scan") {
      SsmParams<float> p = detail::random_ssm<float>(32, 8, rng);
      const Tensor<float> u = Tensor<float>::randn(Shape{sz, 32}, rng, 0.5f);
      ms = time_ms([&] { selective_scan(u, p); });
    } else if (a.op == "ppm" || a.op == "crn") {
      FeatureMap<float> f;
      f.h = sz;
      f.w = sz;
      f.c = 32;
      f.values = Tensor<float>::randn(Shape{sz * sz, 32}, rng, 0.5f);
      if (a.op == "ppm") {
        PpmConfig cfg;
        ms = time_ms([&] { ppm_forward(f, cfg); });
      } else {
        CrnConfig cfg;
        const std::size_t kk = std::size_t(cfg.kernel_size) * std::size_t(cfg.kernel_size);
        const std::size_t hid = std::size_t(cfg.mlp_hidden);
        Rng crng(3);
        CrnParams<float> cp;
        cp.w1 = Tensor<float>::randn(Shape{kk * 32, hid}, crng, 0.1f);
        cp.b1 = Tensor<float>::zeros(Shape{hid});
        cp.w2 = Tensor<float>::randn(Shape{hid, kk}, crng, 0.1f);
        cp.b2 = Tensor<float>::zeros(Shape{kk});
        cp.wo = Tensor<float>::randn(Shape{32, 32}, crng, 0.1f);
        cp.bo = Tensor<float>::zeros(Shape{32});
        ms = time_ms([&] { crn_forward(f, cfg, cp); });
      }
    } else if (a.op == "forward") {
      NetworkConfig nc;
      nc.height = nc.width = sz;
      auto net = build_variant<float>(nc, 1);
      const auto ph = generate_phantom<float>(5, sz, sz, 0.02);
      ms = time_ms([&] { forward_tokens(net, ph.image); });
    } else {
      throw CLI::ValidationError("--op", "expected scan|ppm|crn|forward");
    }
    std::printf("%-10s %8zu %12.3f\n", a.op.c_str(), sz, ms);
  }
  return 0;
}

// ---------------------------------------------------------------------------

int run_report(const std::string& in) {
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(in))
    if (e.path().extension() == ".json") files.push_back(e.path());
  if (files.empty()) throw std::runtime_error("no .json reports under " + in);
  std::sort(files.begin(), files.end());

  bool all_pass = true;
  std::printf("%-14s %-6s %9s  checks\n", "probe", "status", "runtime");
  for (const auto& f : files) {
    std::ifstream is(f);
    nlohmann::json j;
    is >> j;
    const bool pass = j.value("passed", false);
    all_pass = all_pass && pass;
    std::printf("%-14s %-6s %8.1fs", j.value("probe", f.stem().string()).c_str(),
                pass ? "PASS" : "FAIL", j.value("runtime_seconds", 0.0));
    bool first = true;
    for (const auto& c : j["checks"]) {
      std::printf("%s %s=%.4g[%s]", first ? " " : ",", c["name"].get<std::string>().c_str(),
                  c["value"].get<double>(), c["pass"].get<bool>() ? "ok" : "FAIL");
      first = false;
    }
    std::printf("\n");
  }
  std::printf("overall: %s\n", all_pass ? "PASS" : "FAIL");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"predictive-corrective state-space segmentation workbench"};
  app.require_subcommand(1);

  GenDataArgs gd;
  auto* gen = app.add_subcommand("gen-data", "generate a synthetic phantom dataset");
  gen->add_option("--out", gd.out, "output directory")->required();
  gen->add_option("--n", gd.n, "number of samples");
  gen->add_option("--size", gd.size, "image size HxW (default 64x64)");
  gen->add_option("--seed", gd.seed, "generator seed");
  gen->add_option("--noise", gd.noise, "gaussian intensity noise sigma");
  gen->add_option("--lesions", gd.lesions, "lesion spec max,radius_min,radius_max,shift");
  gen->add_option("--split-train", gd.split_train, "train fraction");
  gen->add_option("--split-val", gd.split_val, "val fraction");

  TrainArgs tr;
  auto* train = app.add_subcommand("train", "train a model variant");
  train->add_option("--data", tr.data, "dataset directory")->required();
  train->add_option("--variant", tr.variant, "full|crn-only|random-mask|ppm-only|cnn-crn|e2e");
  train->add_option("--config", tr.config, "key = value training config file");
  train->add_option("--out", tr.out, "output directory")->required();
  train->add_option("--epochs", tr.epochs, "training epochs");
  train->add_option("--batch", tr.batch, "batch size");
  train->add_option("--threads", tr.threads, "worker threads");
  train->add_option("--lr0", tr.lr0, "initial learning rate");
  train->add_option("--lr-min", tr.lr_min, "final learning rate");
  train->add_option("--weight-decay", tr.weight_decay, "decoupled weight decay");
  train->add_option("--ce-w", tr.ce_w, "cross-entropy weight");
  train->add_option("--dice-w", tr.dice_w, "soft-dice weight");
  train->add_option("--seed", tr.seed, "training seed");
  train->add_option("--embed", tr.embed, "embedding width");
  train->add_option("--state-dim", tr.state_dim, "state dimension");
  train->add_flag("--no-clip", tr.no_clip, "disable gradient clipping");

  EvalArgs ev;
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
  eval->add_option("--data", ev.data, "dataset directory")->required();
  eval->add_option("--checkpoint", ev.checkpoint, "checkpoint file")->required();
  eval->add_option("--out", ev.out, "output CSV path")->required();
  eval->add_option("--net-config", ev.net_config,
                   "architecture sidecar (default: net_config.txt beside the checkpoint)");

  VerifyArgs vf;
  auto* verify = app.add_subcommand("verify", "run verification probes");
  verify->add_option("--suite", vf.suite, "grad|scan|convergence|smoothness|biasvar|all");
  verify->add_option("--out", vf.out, "report directory (default reports)");
  auto* vseed = verify->add_option("--seed", vf.seed, "base seed");
  verify->add_option("--seeds", vf.seeds, "seed count for directional probes");
  verify->add_option("--threads", vf.threads, "worker threads");
  verify->add_option("--train-n", vf.train_n, "convergence training samples");
  verify->add_option("--val-n", vf.val_n, "convergence validation samples");
  verify->add_option("--budget", vf.budget, "convergence epoch budget");
  verify->add_option("--dice-threshold", vf.dice_threshold, "convergence dice threshold");
  verify->add_option("--lr0", vf.lr0, "probe training learning rate");
  verify->add_option("--batch", vf.batch, "probe training batch size");
  verify->add_option("--pairs", vf.pairs, "smoothness probe pairs");
  verify->add_option("--radius", vf.radius, "smoothness probe radius");
  verify->add_option("--resamples", vf.resamples, "bias-variance resamples");
  verify->add_option("--probe-pixels", vf.probe_pixels, "bias-variance probe pixels");

  BenchArgs bn;
  auto* bench = app.add_subcommand("bench", "time core operations");
  bench->add_option("--op", bn.op, "scan|ppm|crn|forward")->required();
  bench->add_option("--sizes", bn.sizes, "comma-separated sizes");

  std::string report_in;
  auto* report = app.add_subcommand("report", "summarize saved probe reports");
  report->add_option("--in", report_in, "report directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    vf.seed_set = vseed->count() > 0;
    if (gen->parsed()) return run_gen_data(gd);
    if (train->parsed()) return run_train(tr);
    if (eval->parsed()) return run_eval(ev);
    if (verify->parsed()) return run_verify(vf);
    if (bench->parsed()) return run_bench(bn);
    if (report->parsed()) return run_report(report_in);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 0;
}
