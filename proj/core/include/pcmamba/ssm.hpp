#pragma once

#include <cmath>
#include <cstddef>
#include <memory>
#include <stdexcept>
#include <vector>

#include "pcmamba/tensor.hpp"

namespace pcm {

// State-space machinery. A is diagonal real with per-channel independent
// states; each token yields one step size (softplus link), one input vector
// B_t and one output vector C_t of length N shared across channels.

template <typename T>
struct SsmParams {
  Tensor<T> a;          // [N], negative at init
  Tensor<T> b_weight;   // [N x C]
  Tensor<T> b_bias;     // [N]
  Tensor<T> c_weight;   // [N x C]
  Tensor<T> c_bias;     // [N]
  Tensor<T> dt_weight;  // [C]
  Tensor<T> dt_bias;    // [1]
  Tensor<T> skip;       // [C], per-channel passthrough

  std::size_t state_dim() const { return a.size(); }
  std::size_t channels() const { return dt_weight.size(); }

  void validate() const {
    const std::size_t n = state_dim(), c = channels();
    if (n < 1) throw std::invalid_argument("ssm: state dim must be >= 1");
    if (b_weight.shape() != Shape{n, c} || c_weight.shape() != Shape{n, c} ||
        b_bias.size() != n || c_bias.size() != n || dt_bias.size() != 1 || skip.size() != c)
      throw std::invalid_argument("ssm: parameter shapes inconsistent with N=" +
                                  std::to_string(n) + " C=" + std::to_string(c));
  }
};

template <typename T>
struct ScanStep {
  std::vector<T> a_bar;  // [N]
  std::vector<T> b_bar;  // [N]
  std::vector<T> c;      // [N]
  T dt = T(0);
};

namespace detail {

// (exp(dt*a) - 1)/a with the cancellation-safe series for small |dt*a|
template <typename T>
inline void zoh_factors(const T* a, std::size_t n, T dt, T* a_bar, T* f) {
  for (std::size_t i = 0; i < n; ++i) {
    const T w = dt * a[i];
    a_bar[i] = std::exp(w);
    if (std::abs(w) < T(1e-4))
      f[i] = dt * (T(1) + w / T(2));
    else
      f[i] = (a_bar[i] - T(1)) / a[i];
  }
}

}  // namespace detail

template <typename T>
std::pair<std::vector<T>, std::vector<T>> zoh_discretize(const std::vector<T>& a_diag,
                                                         const std::vector<T>& b, T dt) {
  if (!(dt > T(0))) throw std::invalid_argument("zoh_discretize: step size must be positive");
  if (a_diag.size() != b.size())
    throw std::invalid_argument("zoh_discretize: A and B length mismatch");
  const std::size_t n = a_diag.size();
  std::vector<T> a_bar(n), f(n);
  detail::zoh_factors(a_diag.data(), n, dt, a_bar.data(), f.data());
  std::vector<T> b_bar(n);
  for (std::size_t i = 0; i < n; ++i) b_bar[i] = f[i] * b[i];
  return {std::move(a_bar), std::move(b_bar)};
}

template <typename T>
ScanStep<T> selective_params(const std::vector<T>& u_t, const SsmParams<T>& p) {
  p.validate();
  const std::size_t n = p.state_dim(), c = p.channels();
  if (u_t.size() != c)
    throw std::invalid_argument("selective_params: token has " + std::to_string(u_t.size()) +
                                " channels, params expect " + std::to_string(c));
  ScanStep<T> s;
  T dtp = p.dt_bias.at(0);
  for (std::size_t j = 0; j < c; ++j) dtp += p.dt_weight.at(j) * u_t[j];
  s.dt = softplus_val(dtp);
  std::vector<T> b(n);
  s.c.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    T bb = p.b_bias.at(i), cc = p.c_bias.at(i);
    const T* wb = p.b_weight.data() + i * c;
    const T* wc = p.c_weight.data() + i * c;
    for (std::size_t j = 0; j < c; ++j) {
      bb += wb[j] * u_t[j];
      cc += wc[j] * u_t[j];
    }
    b[i] = bb;
    s.c[i] = cc;
  }
  s.a_bar.resize(n);
  s.b_bar.resize(n);
  std::vector<T> f(n);
  detail::zoh_factors(p.a.data(), n, s.dt, s.a_bar.data(), f.data());
  for (std::size_t i = 0; i < n; ++i) s.b_bar[i] = f[i] * b[i];
  return s;
}

template <typename T>
struct ScanResult {
  Tensor<T> y;      // [L x C]
  Tensor<T> state;  // [L x C x N], diagnostic, not on the grad path
};

namespace detail {

template <typename T>
struct ScanCache {
  std::vector<T> dtp, dt;          // [L]
  std::vector<T> b, cc;            // [L x N]
  std::vector<T> abar, bbar, f;    // [L x N]
  std::vector<T> x;                // [L x C x N]
};

// Shared forward/backward for the plain and modulated scans; z == nullptr
// means no modulation (h_t = x_t).
template <typename T>
Tensor<T> scan_impl(const Tensor<T>& u, const Tensor<T>* z, const SsmParams<T>& p,
                    Tensor<T>* state_out) {
  p.validate();
  if (u.rank() != 2)
    throw std::invalid_argument("scan: expected [L x C] input, got " + shape_str(u.shape()));
  const std::size_t l = u.shape()[0], c = u.shape()[1], n = p.state_dim();
  if (l < 1) throw std::invalid_argument("scan: empty sequence");
  if (c != p.channels())
    throw std::invalid_argument("scan: input has " + std::to_string(c) +
                                " channels, params expect " + std::to_string(p.channels()));
  if (z && z->shape() != u.shape())
    throw std::invalid_argument("scan: modulation shape " + shape_str(z->shape()) +
                                " does not match input " + shape_str(u.shape()));

  auto cache = std::make_shared<ScanCache<T>>();
  cache->dtp.resize(l);
  cache->dt.resize(l);
  cache->b.resize(l * n);
  cache->cc.resize(l * n);
  cache->abar.resize(l * n);
  cache->bbar.resize(l * n);
  cache->f.resize(l * n);
  cache->x.assign(l * c * n, T(0));

  Tensor<T> y(Shape{l, c});
  const T* uv = u.data();
  const T* zv = z ? z->data() : nullptr;
  const T* wd = p.dt_weight.data();
  const T* wb = p.b_weight.data();
  const T* wc = p.c_weight.data();
  const T* av = p.a.data();
  const T* dv = p.skip.data();
  const T* bbias = p.b_bias.data();
  const T* cbias = p.c_bias.data();
  const T dt_bias0 = p.dt_bias.at(0);
  T* yv = y.data();

  for (std::size_t t = 0; t < l; ++t) {
    const T* ut = uv + t * c;
    T dtp = dt_bias0;
    for (std::size_t j = 0; j < c; ++j) dtp += wd[j] * ut[j];
    const T dt = softplus_val(dtp);
    cache->dtp[t] = dtp;
    cache->dt[t] = dt;
    T* bt = cache->b.data() + t * n;
    T* ct = cache->cc.data() + t * n;
    for (std::size_t i = 0; i < n; ++i) {
      T bb = bbias[i], ccv = cbias[i];
      const T* wbr = wb + i * c;
      const T* wcr = wc + i * c;
      for (std::size_t j = 0; j < c; ++j) {
        bb += wbr[j] * ut[j];
        ccv += wcr[j] * ut[j];
      }
      bt[i] = bb;
      ct[i] = ccv;
    }
    T* abt = cache->abar.data() + t * n;
    T* ft = cache->f.data() + t * n;
    zoh_factors(av, n, dt, abt, ft);
    T* bbt = cache->bbar.data() + t * n;
    for (std::size_t i = 0; i < n; ++i) bbt[i] = ft[i] * bt[i];

    const T* xprev = t == 0 ? nullptr : cache->x.data() + (t - 1) * c * n;
    T* xt = cache->x.data() + t * c * n;
    for (std::size_t ch = 0; ch < c; ++ch) {
      const T uc = ut[ch];
      T* xrow = xt + ch * n;
      const T zch = zv ? zv[t * c + ch] : T(1);
      T acc = T(0);
      if (xprev) {
        const T* prow = xprev + ch * n;
        for (std::size_t i = 0; i < n; ++i) {
          const T xv = abt[i] * prow[i] + bbt[i] * uc;
          xrow[i] = xv;
          acc += ct[i] * (zch * xv);
        }
      } else {
        for (std::size_t i = 0; i < n; ++i) {
          const T xv = bbt[i] * uc;
          xrow[i] = xv;
          acc += ct[i] * (zch * xv);
        }
      }
      yv[t * c + ch] = acc + dv[ch] * uc;
    }
  }

  if (state_out) {
    Tensor<T> st(Shape{l, c, n});
    std::copy(cache->x.begin(), cache->x.end(), st.data());
    *state_out = std::move(st);
  }

  const bool wants =
      z ? detail::tape_wants<T>({&u, z, &p.a, &p.b_weight, &p.b_bias, &p.c_weight, &p.c_bias,
                                 &p.dt_weight, &p.dt_bias, &p.skip})
        : detail::tape_wants<T>({&u, &p.a, &p.b_weight, &p.b_bias, &p.c_weight, &p.c_bias,
                                 &p.dt_weight, &p.dt_bias, &p.skip});
  if (wants) {
    detail::mark_output(y);
    Tape<T>* tp = active_tape<T>();
    auto un = u.node;
    auto zn = z ? z->node : nullptr;
    auto pan = p.a.node;
    auto pwb = p.b_weight.node, pbb = p.b_bias.node;
    auto pwc = p.c_weight.node, pbc = p.c_bias.node;
    auto pwd = p.dt_weight.node, pbd = p.dt_bias.node;
    auto pd = p.skip.node;
    auto yn = y.node;
    tp->record([=] {
      const std::vector<T>* gyv = tp->find_grad(yn.get());
      if (!gyv) return;
      const T* gy = gyv->data();
      const T* uv = un->value.data();
      const T* zv = zn ? zn->value.data() : nullptr;
      const T* av = pan->value.data();
      const T* wb = pwb->value.data();
      const T* wc = pwc->value.data();
      const T* wd = pwd->value.data();
      const T* dv = pd->value.data();

      std::vector<T>* gu = un->requires_grad ? &tp->grad_buffer(un) : nullptr;
      std::vector<T>* gz = (zn && zn->requires_grad) ? &tp->grad_buffer(zn) : nullptr;
      std::vector<T>* ga = pan->requires_grad ? &tp->grad_buffer(pan) : nullptr;
      std::vector<T>* gwb = pwb->requires_grad ? &tp->grad_buffer(pwb) : nullptr;
      std::vector<T>* gbb = pbb->requires_grad ? &tp->grad_buffer(pbb) : nullptr;
      std::vector<T>* gwc = pwc->requires_grad ? &tp->grad_buffer(pwc) : nullptr;
      std::vector<T>* gbc = pbc->requires_grad ? &tp->grad_buffer(pbc) : nullptr;
      std::vector<T>* gwd = pwd->requires_grad ? &tp->grad_buffer(pwd) : nullptr;
      std::vector<T>* gbd = pbd->requires_grad ? &tp->grad_buffer(pbd) : nullptr;
      std::vector<T>* gd = pd->requires_grad ? &tp->grad_buffer(pd) : nullptr;

      std::vector<T> lam(c * n, T(0));       // dL/dx[t]
      std::vector<T> gab(n), gbbar(n), gbv(n), gcv(n);

      for (std::size_t t = l; t-- > 0;) {
        const T* ut = uv + t * c;
        const T* abt = cache->abar.data() + t * n;
        const T* bbt = cache->bbar.data() + t * n;
        const T* bt = cache->b.data() + t * n;
        const T* ct = cache->cc.data() + t * n;
        const T* ft = cache->f.data() + t * n;
        const T* xt = cache->x.data() + t * c * n;
        const T* xprev = t == 0 ? nullptr : cache->x.data() + (t - 1) * c * n;
        const T dt = cache->dt[t];

        std::fill(gab.begin(), gab.end(), T(0));
        std::fill(gbbar.begin(), gbbar.end(), T(0));
        std::fill(gcv.begin(), gcv.end(), T(0));

        for (std::size_t ch = 0; ch < c; ++ch) {
          const T g = gy[t * c + ch];
          const T zch = zv ? zv[t * c + ch] : T(1);
          const T uc = ut[ch];
          T* lrow = lam.data() + ch * n;
          const T* xrow = xt + ch * n;
          // carry from t+1 already applied; add local contributions
          T gzacc = T(0);
          for (std::size_t i = 0; i < n; ++i) {
            lrow[i] += g * ct[i] * zch;
            gcv[i] += g * zch * xrow[i];
            if (gz) gzacc += g * ct[i] * xrow[i];
          }
          if (gz) (*gz)[t * c + ch] += gzacc;
          if (gd) (*gd)[ch] += g * uc;
          if (gu) (*gu)[t * c + ch] += g * dv[ch];

          T guacc = T(0);
          if (xprev) {
            const T* prow = xprev + ch * n;
            for (std::size_t i = 0; i < n; ++i) {
              gab[i] += lrow[i] * prow[i];
              gbbar[i] += lrow[i] * uc;
              guacc += lrow[i] * bbt[i];
            }
          } else {
            for (std::size_t i = 0; i < n; ++i) {
              gbbar[i] += lrow[i] * uc;
              guacc += lrow[i] * bbt[i];
            }
          }
          if (gu) (*gu)[t * c + ch] += guacc;
        }

        // through the discretization into dt, A and the B projection
        T gdt = T(0);
        for (std::size_t i = 0; i < n; ++i) {
          const T w = dt * av[i];
          T dfddt, dfda;
          if (std::abs(w) < T(1e-4)) {
            dfddt = T(1) + w;
            dfda = dt * dt / T(2);
          } else {
            dfddt = abt[i];
            dfda = (dt * abt[i] - ft[i]) / av[i];
          }
          const T gf = gbbar[i] * bt[i];
          gdt += gab[i] * av[i] * abt[i] + gf * dfddt;
          if (ga) (*ga)[i] += gab[i] * dt * abt[i] + gf * dfda;
          gbv[i] = gbbar[i] * ft[i];
        }

        // projections back to the token
        for (std::size_t i = 0; i < n; ++i) {
          if (gbb) (*gbb)[i] += gbv[i];
          if (gbc) (*gbc)[i] += gcv[i];
          const T* wbr = wb + i * c;
          const T* wcr = wc + i * c;
          T* gwbr = gwb ? gwb->data() + i * c : nullptr;
          T* gwcr = gwc ? gwc->data() + i * c : nullptr;
          for (std::size_t j = 0; j < c; ++j) {
            if (gwbr) gwbr[j] += gbv[i] * ut[j];
            if (gwcr) gwcr[j] += gcv[i] * ut[j];
            if (gu) (*gu)[t * c + j] += gbv[i] * wbr[j] + gcv[i] * wcr[j];
          }
        }

        const T gdtp = gdt * sigmoid_val(cache->dtp[t]);
        if (gbd) (*gbd)[0] += gdtp;
        for (std::size_t j = 0; j < c; ++j) {
          if (gwd) (*gwd)[j] += gdtp * ut[j];
          if (gu) (*gu)[t * c + j] += gdtp * wd[j];
        }

        // push the recurrence carry to t-1
        if (t > 0) {
          const T* abprev = abt;  // abar at step t multiplies x[t-1]
          for (std::size_t ch = 0; ch < c; ++ch) {
            T* lrow = lam.data() + ch * n;
            for (std::size_t i = 0; i < n; ++i) lrow[i] *= abprev[i];
          }
        }
      }
    });
  }
  return y;
}

}  // namespace detail

// y_t = C_t x_t + D u_t with x_t = Abar_t x_{t-1} + Bbar_t u_t. The returned
// state tensor is a value snapshot; gradients flow through y only.
template <typename T>
ScanResult<T> selective_scan(const Tensor<T>& u, const SsmParams<T>& p) {
  ScanResult<T> r;
  r.y = detail::scan_impl<T>(u, nullptr, p, &r.state);
  return r;
}

// Same recurrence, but the emitted state is gated per channel: h_t = z_t * x_t,
// y_t = C_t h_t + D u_t. The gate never enters the recurrence itself.
template <typename T>
Tensor<T> modulated_scan(const Tensor<T>& u, const Tensor<T>& z, const SsmParams<T>& p) {
  return detail::scan_impl<T>(u, &z, p, nullptr);
}

}  // namespace pcm
