#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <stdexcept>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "pcmamba/data.hpp"
#include "pcmamba/metrics.hpp"
#include "pcmamba/network.hpp"

namespace pcm {

// Cosine annealing from lr0 at epoch 0 down to lr_min at the last epoch.
inline double cosine_lr(int epoch, int epochs, double lr0, double lr_min) {
  if (epochs < 1) throw std::invalid_argument("cosine_lr: epochs must be >= 1");
  if (epoch < 0 || epoch >= epochs) throw std::invalid_argument("cosine_lr: epoch out of range");
  if (epochs == 1) return lr0;
  const double t = double(epoch) / double(epochs - 1);
  return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + std::cos(t * 3.14159265358979323846));
}

struct TrainConfig {
  double lr0 = 1e-4;
  double lr_min = 0.0;
  int epochs = 5;
  int batch_size = 4;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double ce_w = 1.0;
  double dice_w = 1.0;
  bool clip_gradients = true;
  double clip_norm = 1.0;
  std::uint64_t seed = 0;
  int threads = 1;
  std::string checkpoint_dir;  // empty disables checkpoint files

  void validate() const {
    if (!(lr0 > 0)) throw std::invalid_argument("train config: lr0 must be positive");
    if (epochs < 0) throw std::invalid_argument("train config: epochs must be >= 0");
    if (batch_size < 1) throw std::invalid_argument("train config: batch_size must be >= 1");
    if (lr_min < 0 || lr_min > lr0)
      throw std::invalid_argument("train config: need 0 <= lr_min <= lr0");
    if (ce_w < 0 || dice_w < 0)
      throw std::invalid_argument("train config: loss weights must be non-negative");
    if (clip_norm <= 0) throw std::invalid_argument("train config: clip_norm must be positive");
    if (threads < 1) throw std::invalid_argument("train config: threads must be >= 1");
  }
};

// Cross-entropy plus soft-Dice on [n x k] logits. The Dice term averages the
// smoothed per-class overlap of softmax probabilities against one-hot labels
// over foreground classes 1..k-1; smoothing 1.0 keeps absent classes neutral.
template <typename T>
Tensor<T> seg_loss(const Tensor<T>& logits, const std::vector<int>& labels, double ce_w,
                   double dice_w) {
  if (logits.shape().size() != 2) throw std::invalid_argument("seg_loss: logits must be [n x k]");
  const std::size_t n = logits.shape()[0], k = logits.shape()[1];
  if (labels.size() != n) throw std::invalid_argument("seg_loss: label count mismatch");
  for (int l : labels)
    if (l < 0 || l >= int(k)) throw std::invalid_argument("seg_loss: label out of range");

  Tensor<T> total = scale(cross_entropy_mean(logits, labels), T(ce_w));
  if (dice_w == 0) return total;

  Tensor<T> probs = softmax(logits, 1);
  Tensor<T> dice_sum;
  for (std::size_t c = 1; c < k; ++c) {
    Tensor<T> hit(Shape{n, k});
    Tensor<T> col(Shape{n, k});
    std::size_t nc = 0;
    for (std::size_t i = 0; i < n; ++i) {
      col.data()[i * k + c] = T(1);
      if (labels[i] == int(c)) {
        hit.data()[i * k + c] = T(1);
        ++nc;
      }
    }
    Tensor<T> inter = sum_all(mul(probs, hit));
    Tensor<T> psum = sum_all(mul(probs, col));
    Tensor<T> d = div(shift(scale(inter, T(2)), T(1)), shift(psum, T(double(nc) + 1.0)));
    dice_sum = c == 1 ? d : add(dice_sum, d);
  }
  // 1 - mean dice, weighted.
  Tensor<T> dice_loss = shift(scale(dice_sum, T(-1.0 / double(k - 1))), T(1));
  return add(total, scale(dice_loss, T(dice_w)));
}

// AdamW over an ordered parameter list. Moments are kept in double regardless
// of the parameter type. step() refuses non-finite gradients and leaves both
// parameters and state untouched in that case.
template <typename T>
class AdamW {
 public:
  AdamW(double beta1, double beta2, double eps, double weight_decay)
      : beta1_(beta1), beta2_(beta2), eps_(eps), wd_(weight_decay) {}

  bool step(const std::vector<Tensor<T>*>& params, const std::vector<std::vector<T>>& grads,
            double lr, std::string* error = nullptr) {
    if (params.size() != grads.size()) throw std::invalid_argument("adamw: grad list mismatch");
    if (m_.empty()) {
      m_.resize(params.size());
      v_.resize(params.size());
      for (std::size_t i = 0; i < params.size(); ++i) {
        m_[i].assign(params[i]->size(), 0.0);
        v_[i].assign(params[i]->size(), 0.0);
      }
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (grads[i].size() != params[i]->size())
        throw std::invalid_argument("adamw: grad shape mismatch at index " + std::to_string(i));
      for (T g : grads[i])
        if (!std::isfinite(double(g))) {
          if (error) *error = "non-finite gradient in parameter " + std::to_string(i);
          return false;
        }
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, double(t_));
    const double bc2 = 1.0 - std::pow(beta2_, double(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      T* p = params[i]->data();
      for (std::size_t j = 0; j < grads[i].size(); ++j) {
        const double g = double(grads[i][j]);
        m_[i][j] = beta1_ * m_[i][j] + (1.0 - beta1_) * g;
        v_[i][j] = beta2_ * v_[i][j] + (1.0 - beta2_) * g * g;
        const double mhat = m_[i][j] / bc1;
        const double vhat = v_[i][j] / bc2;
        const double decay = lr * wd_ * double(p[j]);
        p[j] = T(double(p[j]) - lr * mhat / (std::sqrt(vhat) + eps_) - decay);
      }
    }
    return true;
  }

  long step_count() const { return t_; }

 private:
  double beta1_, beta2_, eps_, wd_;
  long t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

// Scales grads in place so their global L2 norm is at most max_norm. Returns
// the norm before clipping.
template <typename T>
double clip_global_norm(std::vector<std::vector<T>>& grads, double max_norm) {
  double sq = 0;
  for (const auto& g : grads)
    for (T x : g) sq += double(x) * double(x);
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0) {
    const T s = T(max_norm / norm);
    for (auto& g : grads)
      for (T& x : g) x *= s;
  }
  return norm;
}

struct EpochStats {
  int epoch = 0;
  double lr = 0;
  double train_loss = 0;
  double val_loss = 0;
  double val_dice_mean = 0;
  std::vector<double> val_dice;  // foreground classes 1..k-1
  double param_delta = 0;        // L2 distance to the previous epoch's parameters
  double seconds = 0;
};

struct History {
  std::vector<EpochStats> epochs;
  int best_epoch = -1;
  double best_val_dice = -1.0;
  bool aborted = false;
  std::string abort_reason;

  void write_csv(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("history: cannot write " + path);
    out << "epoch,lr,train_loss,val_loss,val_dice_mean";
    const std::size_t nd = epochs.empty() ? 0 : epochs.front().val_dice.size();
    for (std::size_t c = 0; c < nd; ++c) out << ",val_dice_" << (c + 1);
    out << ",param_delta,seconds\n";
    out.precision(10);
    for (const auto& e : epochs) {
      out << e.epoch << ',' << e.lr << ',' << e.train_loss << ',' << e.val_loss << ','
          << e.val_dice_mean;
      for (double d : e.val_dice) out << ',' << d;
      out << ',' << e.param_delta << ',' << e.seconds << '\n';
    }
  }
};

namespace detail {

inline std::uint64_t sample_stream(std::uint64_t seed, std::uint64_t salt, std::uint64_t epoch,
                                   std::uint64_t sample) {
  return Rng::mix(seed ^ salt) ^ Rng::mix((epoch << 32) ^ Rng::mix(sample));
}

template <typename T>
std::vector<double> flatten_params(Network<T>& net) {
  std::vector<double> out;
  visit_params(net, [&](const std::string&, Tensor<T>& t) {
    for (std::size_t i = 0; i < t.size(); ++i) out.push_back(double(t.data()[i]));
  });
  return out;
}

// One sample's loss value and parameter gradients, produced on a private tape.
template <typename T>
double sample_grads(const Network<T>& net, const Phantom<T>& ph,
                    const std::vector<std::pair<std::string, Tensor<T>*>>& params,
                    const TrainConfig& cfg, std::uint64_t stream,
                    std::vector<std::vector<T>>& grads_out) {
  Tape<T> tape;
  TapeScope<T> scope(tape);
  Rng mask_rng(stream);
  Tensor<T> logits = forward_tokens(net, ph.image, &mask_rng);
  Tensor<T> loss = seg_loss(logits, ph.label, cfg.ce_w, cfg.dice_w);
  tape.backward(loss, false);
  grads_out.resize(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    const std::vector<T>* g = tape.find_grad(*params[i].second);
    if (g)
      grads_out[i] = *g;
    else
      grads_out[i].assign(params[i].second->size(), T(0));
  }
  return double(loss.data()[0]);
}

}  // namespace detail

// Loss and Dice of one split, with deterministic per-sample mask streams.
struct SplitEval {
  double loss = 0;
  std::vector<double> dice;  // foreground classes
  double dice_mean = 0;
};

template <typename T>
SplitEval evaluate_split(const Network<T>& net, const Dataset<T>& data, Split which,
                         std::uint64_t seed, double ce_w = 1.0, double dice_w = 1.0) {
  const auto idx = data.indices(which);
  if (idx.empty()) throw std::invalid_argument("evaluate_split: empty split");
  const std::size_t k = std::size_t(net.cfg.num_classes);
  SplitEval ev;
  ev.dice.assign(k - 1, 0.0);
  for (std::size_t i : idx) {
    const Phantom<T>& ph = data.samples[i];
    Rng mask_rng(detail::sample_stream(seed, 0x65762d7374726dULL, 0, i));
    Tensor<T> logits = forward_tokens(net, ph.image, &mask_rng);
    ev.loss += double(seg_loss(logits, ph.label, ce_w, dice_w).data()[0]);
    const auto pred = argmax_labels(logits.data(), logits.shape()[0], k);
    for (std::size_t c = 1; c < k; ++c) {
      std::vector<std::uint8_t> pm(pred.size()), gm(pred.size());
      for (std::size_t j = 0; j < pred.size(); ++j) {
        pm[j] = pred[j] == int(c);
        gm[j] = ph.label[j] == int(c);
      }
      ev.dice[c - 1] += overlap_metrics(pm, gm).dice;
    }
  }
  ev.loss /= double(idx.size());
  for (auto& d : ev.dice) d /= double(idx.size());
  ev.dice_mean = std::accumulate(ev.dice.begin(), ev.dice.end(), 0.0) / double(ev.dice.size());
  return ev;
}

// Epoch-shuffled minibatch training with per-epoch validation. The best
// validation-Dice weights go to <checkpoint_dir>/best.ckpt; a non-finite loss
// or gradient aborts the run and leaves that file as the last good state.
// Batch items run on independent tapes (cfg.threads workers); gradients merge
// in sample order, so results do not depend on the thread count.
template <typename T>
History train_loop(Network<T>& net, const Dataset<T>& data, const TrainConfig& cfg) {
  cfg.validate();
  const auto train_idx = data.indices(Split::Train);
  if (train_idx.empty()) throw std::invalid_argument("train_loop: empty training split");

  auto params = param_map(net);
  std::vector<Tensor<T>*> plist;
  for (auto& p : params) plist.push_back(p.second);
  AdamW<T> opt(cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay);

  const std::string ckpt =
      cfg.checkpoint_dir.empty() ? std::string() : cfg.checkpoint_dir + "/best.ckpt";
  if (!cfg.checkpoint_dir.empty()) std::filesystem::create_directories(cfg.checkpoint_dir);

  History hist;
  std::vector<double> prev = detail::flatten_params(net);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const double lr = cosine_lr(epoch, cfg.epochs, cfg.lr0, cfg.lr_min);

    std::vector<std::size_t> order = train_idx;
    Rng shuffle_rng(Rng::mix(cfg.seed ^ 0x7368756666ULL) ^ Rng::mix(std::uint64_t(epoch)));
    shuffle_rng.shuffle(order);

    double loss_sum = 0;
    bool ok = true;
    for (std::size_t b = 0; b < order.size() && ok; b += std::size_t(cfg.batch_size)) {
      const std::size_t bn = std::min(order.size() - b, std::size_t(cfg.batch_size));
      std::vector<std::vector<std::vector<T>>> grads(bn);
      std::vector<double> losses(bn);

      auto work = [&](std::size_t w, std::size_t stride) {
        for (std::size_t j = w; j < bn; j += stride) {
          const std::size_t si = order[b + j];
          const std::uint64_t stream =
              detail::sample_stream(cfg.seed, 0x747261696eULL, std::uint64_t(epoch), si);
          losses[j] = detail::sample_grads(net, data.samples[si], params, cfg, stream, grads[j]);
        }
      };
      const std::size_t nw = std::min<std::size_t>(std::size_t(cfg.threads), bn);
      if (nw <= 1) {
        work(0, 1);
      } else {
        std::vector<std::thread> pool;
        for (std::size_t w = 0; w < nw; ++w) pool.emplace_back(work, w, nw);
        for (auto& th : pool) th.join();
      }

      std::vector<std::vector<T>> acc(plist.size());
      for (std::size_t i = 0; i < plist.size(); ++i) acc[i].assign(plist[i]->size(), T(0));
      for (std::size_t j = 0; j < bn; ++j) {
        loss_sum += losses[j];
        for (std::size_t i = 0; i < plist.size(); ++i)
          for (std::size_t e = 0; e < acc[i].size(); ++e) acc[i][e] += grads[j][i][e];
      }
      const T inv = T(1.0 / double(bn));
      for (auto& g : acc)
        for (T& x : g) x *= inv;

      bool finite = true;
      for (double l : losses)
        if (!std::isfinite(l)) finite = false;
      if (!finite) {
        hist.aborted = true;
        hist.abort_reason = "non-finite training loss at epoch " + std::to_string(epoch);
        ok = false;
        break;
      }
      if (cfg.clip_gradients) clip_global_norm(acc, cfg.clip_norm);
      std::string err;
      if (!opt.step(plist, acc, lr, &err)) {
        hist.aborted = true;
        hist.abort_reason = err + " at epoch " + std::to_string(epoch);
        ok = false;
      }
    }
    if (!ok) break;

    EpochStats st;
    st.epoch = epoch;
    st.lr = lr;
    st.train_loss = loss_sum / double(order.size());
    const SplitEval ev = evaluate_split(net, data, Split::Val, cfg.seed, cfg.ce_w, cfg.dice_w);
    st.val_loss = ev.loss;
    st.val_dice = ev.dice;
    st.val_dice_mean = ev.dice_mean;

    const std::vector<double> cur = detail::flatten_params(net);
    double sq = 0;
    for (std::size_t i = 0; i < cur.size(); ++i) {
      const double d = cur[i] - prev[i];
      sq += d * d;
    }
    st.param_delta = std::sqrt(sq);
    prev = cur;

    if (st.val_dice_mean > hist.best_val_dice) {
      hist.best_val_dice = st.val_dice_mean;
      hist.best_epoch = epoch;
      if (!ckpt.empty()) save_checkpoint(net, ckpt);
    }
    st.seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    hist.epochs.push_back(std::move(st));
  }
  return hist;
}

}  // namespace pcm
