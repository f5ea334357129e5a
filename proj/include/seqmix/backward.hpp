#pragma once

#include <cmath>
#include <functional>
#include <limits>
#include <vector>

#include "seqmix/forward.hpp"
#include "seqmix/mask.hpp"
#include "seqmix/ops.hpp"

namespace seqmix {

// Gradients of one attention kernel with respect to its inputs. dA_cs is the
// gradient with respect to the cumulative decay A^CS, dA_logits with respect
// to the per-position logits before the cumsum.
template <typename T = double>
struct GradBundle {
  Tensor<T> dQ, dK, dV;  // [H, N, d]
  Tensor<T> dA_cs;       // [H, N]
  Tensor<T> dA_logits;   // [H, N]
};

namespace detail {

template <typename T>
struct HeadView {
  const T* q;
  const T* k;
  const T* v;
  const T* d_out;
};

template <typename T>
GradBundle<T> empty_bundle(const Tensor<T>& q, const Tensor<T>& v) {
  GradBundle<T> g;
  g.dQ = Tensor<T>(q.shape());
  g.dK = Tensor<T>(q.shape());
  g.dV = Tensor<T>(v.shape());
  g.dA_cs = Tensor<T>({q.dim(0), q.dim(1)});
  g.dA_logits = Tensor<T>({q.dim(0), q.dim(1)});
  return g;
}

template <typename T>
void check_kernel_inputs(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                         const Tensor<T>& d_out) {
  if (q.rank() != 3) throw DimensionError("kernel inputs must be [H, N, d]");
  q.require_same_shape(k, "kernel gradient");
  if (v.dim(0) != q.dim(0) || v.dim(1) != q.dim(1))
    throw DimensionError("V must share the [H, N] layout of Q");
  v.require_same_shape(d_out, "kernel gradient");
}

// x = Q K^T for one head, [N, N] (upper triangle computed but never read).
template <typename T>
std::vector<T> qk(const T* q, const T* k, std::size_t n, std::size_t d) {
  std::vector<T> x(n * n);
  gemm_nt(q, k, x.data(), n, d, n);
  return x;
}

// G = dO V^T, [N, N].
template <typename T>
std::vector<T> dov(const T* d_out, const T* v, std::size_t n, std::size_t dv) {
  std::vector<T> g(n * n);
  gemm_nt(d_out, v, g.data(), n, dv, n);
  return g;
}

// Zeros the strict upper triangle (the causal mask M).
template <typename T>
void apply_causal(std::vector<T>& m, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) m[i * n + j] = T(0);
}

// dQ = D K, dK = D^T Q, dV = W^T dO for one head.
template <typename T>
void project_head(const std::vector<T>& dscore, const std::vector<T>& weights, const T* q,
                  const T* k, const T* d_out, T* dq, T* dk, T* dv, std::size_t n, std::size_t d,
                  std::size_t d_v) {
  gemm(dscore.data(), k, dq, n, n, d);
  gemm_tn(dscore.data(), q, dk, n, n, d);
  gemm_tn(weights.data(), d_out, dv, n, n, d_v);
}

// dA_cs[i] = sum_j P[i, j] - sum_i' P[i', i]
template <typename T>
void decay_grad_head(const std::vector<T>& p, T* da_cs, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) {
    T row{0}, col{0};
    for (std::size_t j = 0; j < n; ++j) row += p[i * n + j];
    for (std::size_t r = 0; r < n; ++r) col += p[r * n + i];
    da_cs[i] = row - col;
  }
}

template <typename T>
std::vector<T> decay_dense_head(const DecayMatrix<T>& dm, std::size_t h) {
  const std::size_t n = dm.length();
  std::vector<T> a(n * n, T(0));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j <= i; ++j) a[i * n + j] = decay_factor(dm, h, i, j);
  return a;
}

template <typename T, typename PerHead>
GradBundle<T> per_head(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                       const Tensor<T>& d_out, PerHead&& body) {
  check_kernel_inputs(q, k, v, d_out);
  GradBundle<T> g = empty_bundle(q, v);
  const std::size_t heads = q.dim(0), n = q.dim(1), d = q.dim(2), d_v = v.dim(2);
  for (std::size_t h = 0; h < heads; ++h)
    body(h, HeadView<T>{q.data().data() + h * n * d, k.data().data() + h * n * d,
                        v.data().data() + h * n * d_v, d_out.data().data() + h * n * d_v},
         g.dQ.data().data() + h * n * d, g.dK.data().data() + h * n * d,
         g.dV.data().data() + h * n * d_v, g.dA_cs.data().data() + h * n, n, d, d_v);
  g.dA_logits = reverse_cumsum_last(g.dA_cs);
  require_finite(g.dQ, "kernel gradient");
  require_finite(g.dK, "kernel gradient");
  require_finite(g.dV, "kernel gradient");
  return g;
}

}  // namespace detail

// O = (Q K^T o M) V
//   dQ = (dO V^T o M) K,  dK = (V dO^T o M^T) Q,  dV = (Q K^T o M)^T dO
template <typename T>
GradBundle<T> grad_linear(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                          const Tensor<T>& d_out) {
  return detail::per_head(q, k, v, d_out,
                          [](std::size_t, const detail::HeadView<T>& hv, T* dq, T* dk, T* dv,
                             T*, std::size_t n, std::size_t d, std::size_t d_v) {
                            auto x = detail::qk(hv.q, hv.k, n, d);
                            auto g = detail::dov(hv.d_out, hv.v, n, d_v);
                            detail::apply_causal(x, n);
                            detail::apply_causal(g, n);
                            detail::project_head(g, x, hv.q, hv.k, hv.d_out, dq, dk, dv, n, d, d_v);
                          });
}

// O = Y_N V with Y = Q K^T o M, S = sum_j Y, Y_N = Y / S
//   G = dO V^T o M,  D = (G - sum_j(Y_N o G)) / S o M
//   dQ = D K,  dK = D^T Q,  dV = Y_N^T dO
template <typename T>
GradBundle<T> grad_linear_smnorm(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                                 const Tensor<T>& d_out) {
  return detail::per_head(
      q, k, v, d_out,
      [](std::size_t, const detail::HeadView<T>& hv, T* dq, T* dk, T* dv, T*, std::size_t n,
         std::size_t d, std::size_t d_v) {
        auto y = detail::qk(hv.q, hv.k, n, d);
        auto g = detail::dov(hv.d_out, hv.v, n, d_v);
        detail::apply_causal(y, n);
        detail::apply_causal(g, n);
        std::vector<T> dd(n * n, T(0));
        for (std::size_t i = 0; i < n; ++i) {
          T s{0};
          for (std::size_t j = 0; j <= i; ++j) s += y[i * n + j];
          T c{0};
          for (std::size_t j = 0; j <= i; ++j) {
            y[i * n + j] = guarded_div(y[i * n + j], s);
            c += y[i * n + j] * g[i * n + j];
          }
          for (std::size_t j = 0; j <= i; ++j) dd[i * n + j] = guarded_div(g[i * n + j] - c, s);
        }
        detail::project_head(dd, y, hv.q, hv.k, hv.d_out, dq, dk, dv, n, d, d_v);
      });
}

// O = (Q K^T o M o A_M) V
//   dQ = (dO V^T o M o A_M) K,  dK = (dO V^T o M o A_M)^T Q
//   dV = (Q K^T o M o A_M)^T dO
//   dA^CS = sum_j P - sum_i P with P = Q K^T o M o A_M o dO V^T
template <typename T>
GradBundle<T> grad_linear_amask(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                                const DecayMatrix<T>& dm, const Tensor<T>& d_out) {
  return detail::per_head(
      q, k, v, d_out,
      [&dm](std::size_t h, const detail::HeadView<T>& hv, T* dq, T* dk, T* dv, T* da,
            std::size_t n, std::size_t d, std::size_t d_v) {
        const auto am = detail::decay_dense_head(dm, h);
        auto x = detail::qk(hv.q, hv.k, n, d);
        auto g = detail::dov(hv.d_out, hv.v, n, d_v);
        std::vector<T> w(n * n), ga(n * n), p(n * n);
        for (std::size_t i = 0; i < n * n; ++i) {
          w[i] = x[i] * am[i];
          ga[i] = g[i] * am[i];
          p[i] = w[i] * g[i];
        }
        detail::project_head(ga, w, hv.q, hv.k, hv.d_out, dq, dk, dv, n, d, d_v);
        detail::decay_grad_head(p, da, n);
      });
}

// O = ((Q K^T)^2 o M o A_M) V
//   dQ = (2 Q K^T o dO V^T o M o A_M) K,  dK = (...)^T Q
//   dV = ((Q K^T)^2 o M o A_M)^T dO
//   dA^CS = sum_j P - sum_i P with P = (Q K^T)^2 o M o A_M o dO V^T
template <typename T>
GradBundle<T> grad_squared_amask(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                                 const DecayMatrix<T>& dm, const Tensor<T>& d_out) {
  return detail::per_head(
      q, k, v, d_out,
      [&dm](std::size_t h, const detail::HeadView<T>& hv, T* dq, T* dk, T* dv, T* da,
            std::size_t n, std::size_t d, std::size_t d_v) {
        const auto am = detail::decay_dense_head(dm, h);
        auto x = detail::qk(hv.q, hv.k, n, d);
        auto g = detail::dov(hv.d_out, hv.v, n, d_v);
        std::vector<T> w(n * n), ds(n * n), p(n * n);
        for (std::size_t i = 0; i < n * n; ++i) {
          w[i] = x[i] * x[i] * am[i];
          ds[i] = T(2) * x[i] * g[i] * am[i];
          p[i] = w[i] * g[i];
        }
        detail::project_head(ds, w, hv.q, hv.k, hv.d_out, dq, dk, dv, n, d, d_v);
        detail::decay_grad_head(p, da, n);
      });
}

// 2Mamba: O = Y_N V, Y = (Q K^T)^2 o M o A_M, S = sum_j Y, Y_N = Y / S.
//   dY = (dO V^T o M - sum_j(Y_N o dO V^T)) / S
//   dQ = (2 Q K^T o A_M o M o dY) K,  dK = (...)^T Q,  dV = Y_N^T dO
//   dA^CS = sum_j P - sum_i P with P = Y o dY
// The A_M factor in the score gradient and the 1/S factor in P are both
// required; dropping either fails the finite-difference check.
template <typename T>
GradBundle<T> grad_twomamba(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                            const DecayMatrix<T>& dm, const Tensor<T>& d_out) {
  return detail::per_head(
      q, k, v, d_out,
      [&dm](std::size_t h, const detail::HeadView<T>& hv, T* dq, T* dk, T* dv, T* da,
            std::size_t n, std::size_t d, std::size_t d_v) {
        const auto am = detail::decay_dense_head(dm, h);
        const auto x = detail::qk(hv.q, hv.k, n, d);
        auto g = detail::dov(hv.d_out, hv.v, n, d_v);
        detail::apply_causal(g, n);
        std::vector<T> y(n * n, T(0)), yn(n * n, T(0)), ds(n * n, T(0)), p(n * n, T(0));
        for (std::size_t i = 0; i < n; ++i) {
          T s{0};
          for (std::size_t j = 0; j <= i; ++j) {
            y[i * n + j] = x[i * n + j] * x[i * n + j] * am[i * n + j];
            s += y[i * n + j];
          }
          T c{0};
          for (std::size_t j = 0; j <= i; ++j) {
            yn[i * n + j] = guarded_div(y[i * n + j], s);
            c += yn[i * n + j] * g[i * n + j];
          }
          for (std::size_t j = 0; j <= i; ++j) {
            const T dy = guarded_div(g[i * n + j] - c, s);
            ds[i * n + j] = T(2) * x[i * n + j] * am[i * n + j] * dy;
            p[i * n + j] = y[i * n + j] * dy;
          }
        }
        detail::project_head(ds, yn, hv.q, hv.k, hv.d_out, dq, dk, dv, n, d, d_v);
        detail::decay_grad_head(p, da, n);
      });
}

// 2Mamba-E: O = Y_N V, Y = exp(Q K^T) o M o A_M, Y_N = Y / sum_j Y.
//   G = dO V^T o M - sum_j(O o dO),  D = Y_N o G o M
//   dQ = D K,  dK = D^T Q,  dV = Y_N^T dO,  dA^CS = sum_j D - sum_i D
// D is [N, M] and K is [M, d], so the query gradient is D K.
template <typename T>
GradBundle<T> grad_twomamba_e(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                              const DecayMatrix<T>& dm, const Tensor<T>& d_out) {
  const Tensor<T> w_all = attention_weights(q, k, dm, ScoreOrder::exponential, true);
  const Tensor<T> o_all = matmul(w_all, v);
  return detail::per_head(
      q, k, v, d_out,
      [&](std::size_t h, const detail::HeadView<T>& hv, T* dq, T* dk, T* dv, T* da,
          std::size_t n, std::size_t, std::size_t d_v) {
        const std::size_t d = q.dim(2);
        std::vector<T> yn(w_all.data().begin() + h * n * n, w_all.data().begin() + (h + 1) * n * n);
        auto g = detail::dov(hv.d_out, hv.v, n, d_v);
        detail::apply_causal(g, n);
        std::vector<T> dd(n * n, T(0));
        for (std::size_t i = 0; i < n; ++i) {
          T od{0};
          for (std::size_t c = 0; c < d_v; ++c) od += o_all(h, i, c) * hv.d_out[i * d_v + c];
          for (std::size_t j = 0; j <= i; ++j) dd[i * n + j] = yn[i * n + j] * (g[i * n + j] - od);
        }
        detail::project_head(dd, yn, hv.q, hv.k, hv.d_out, dq, dk, dv, n, d, d_v);
        detail::decay_grad_head(dd, da, n);
      });
}

// Plain causal softmax attention backward, written per row:
//   P = softmax(q_i . k_j), dP_ij = dO_i . v_j, dS = P o (dP - sum_j P dP)
template <typename T>
GradBundle<T> grad_softmax(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                           const Tensor<T>& d_out) {
  detail::check_kernel_inputs(q, k, v, d_out);
  GradBundle<T> g = detail::empty_bundle(q, v);
  const std::size_t heads = q.dim(0), n = q.dim(1), d = q.dim(2), dv = v.dim(2);
  std::vector<T> p(n), dp(n);
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t i = 0; i < n; ++i) {
      T m = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j <= i; ++j) {
        T s{0};
        for (std::size_t c = 0; c < d; ++c) s += q(h, i, c) * k(h, j, c);
        p[j] = s;
        m = std::max(m, s);
      }
      T z{0};
      for (std::size_t j = 0; j <= i; ++j) z += (p[j] = std::exp(p[j] - m));
      T mix{0};
      for (std::size_t j = 0; j <= i; ++j) {
        p[j] /= z;
        T s{0};
        for (std::size_t c = 0; c < dv; ++c) s += d_out(h, i, c) * v(h, j, c);
        dp[j] = s;
        mix += p[j] * s;
      }
      for (std::size_t j = 0; j <= i; ++j) {
        const T ds = p[j] * (dp[j] - mix);
        for (std::size_t c = 0; c < d; ++c) {
          g.dQ(h, i, c) += ds * k(h, j, c);
          g.dK(h, j, c) += ds * q(h, i, c);
        }
        for (std::size_t c = 0; c < dv; ++c) g.dV(h, j, c) += p[j] * d_out(h, i, c);
      }
    }
  return g;
}

// Backward of attention_kernel for any (order, normalization) pair. Used when
// composing block gradients; the named kernels above cover the six cases
// individually and are cross-checked against this one.
template <typename T>
GradBundle<T> grad_attention_kernel(ScoreOrder order, bool normalize, const Tensor<T>& q,
                                    const Tensor<T>& k, const Tensor<T>& v,
                                    const DecayMatrix<T>& dm, const Tensor<T>& d_out) {
  const Tensor<T> w_all = raw_attention_scores(q, k, dm, order, normalize);
  return detail::per_head(
      q, k, v, d_out,
      [&](std::size_t h, const detail::HeadView<T>& hv, T* dq, T* dk, T* dv, T* da,
          std::size_t n, std::size_t d, std::size_t d_v) {
        std::vector<T> w(w_all.data().begin() + h * n * n, w_all.data().begin() + (h + 1) * n * n);
        auto g = detail::dov(hv.d_out, hv.v, n, d_v);
        detail::apply_causal(g, n);
        std::vector<T> dw = g, used = w;
        if (normalize) {
          for (std::size_t i = 0; i < n; ++i) {
            T s{0};
            for (std::size_t j = 0; j <= i; ++j) s += w[i * n + j];
            T c{0};
            for (std::size_t j = 0; j <= i; ++j) {
              used[i * n + j] = guarded_div(w[i * n + j], s);
              c += used[i * n + j] * g[i * n + j];
            }
            for (std::size_t j = 0; j <= i; ++j) dw[i * n + j] = guarded_div(g[i * n + j] - c, s);
          }
        }
        const auto x = detail::qk(hv.q, hv.k, n, d);
        std::vector<T> dx(n * n, T(0)), p(n * n, T(0));
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j <= i; ++j) {
            const std::size_t ij = i * n + j;
            T dfdx;
            switch (order) {
              case ScoreOrder::linear: dfdx = decay_factor(dm, h, i, j); break;
              case ScoreOrder::squared: dfdx = T(2) * x[ij] * decay_factor(dm, h, i, j); break;
              default: dfdx = w[ij]; break;
            }
            dx[ij] = dw[ij] * dfdx;
            p[ij] = dw[ij] * w[ij];
          }
        detail::project_head(dx, used, hv.q, hv.k, hv.d_out, dq, dk, dv, n, d, d_v);
        detail::decay_grad_head(p, da, n);
      });
}

// Central-difference gradient of sum(forward(params) o d_out) with respect to
// every scalar of every parameter tensor.
using ForwardFn = std::function<Tensor<double>(const std::vector<Tensor<double>>&)>;

inline std::vector<Tensor<double>> finite_diff_oracle(const ForwardFn& forward,
                                                      std::vector<Tensor<double>> params,
                                                      const Tensor<double>& d_out,
                                                      double step = 1e-5) {
  if (!(step > 0.0)) throw DomainError("finite difference step must be positive");
  const Tensor<double> base = forward(params);
  if (!(forward(params) == base))
    throw OracleError("forward is not deterministic: two identical calls differ");
  base.require_same_shape(d_out, "finite_diff_oracle");
  auto contract = [&d_out](const Tensor<double>& y) {
    double s = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) s += y[i] * d_out[i];
    return s;
  };
  std::vector<Tensor<double>> grads;
  grads.reserve(params.size());
  for (auto& p : params) {
    Tensor<double> g(p.shape());
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double keep = p[i];
      p[i] = keep + step;
      const double up = contract(forward(params));
      p[i] = keep - step;
      const double down = contract(forward(params));
      p[i] = keep;
      g[i] = (up - down) / (2.0 * step);
    }
    grads.push_back(std::move(g));
  }
  return grads;
}

// Scalar-loss variant: d loss / d params by central differences.
using LossFn = std::function<double(const std::vector<Tensor<double>>&)>;

inline std::vector<Tensor<double>> finite_diff_scalar(const LossFn& loss,
                                                      std::vector<Tensor<double>> params,
                                                      double step = 1e-5) {
  if (!(step > 0.0)) throw DomainError("finite difference step must be positive");
  if (loss(params) != loss(params)) throw OracleError("loss is not deterministic");
  std::vector<Tensor<double>> grads;
  for (auto& p : params) {
    Tensor<double> g(p.shape());
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double keep = p[i];
      p[i] = keep + step;
      const double up = loss(params);
      p[i] = keep - step;
      const double down = loss(params);
      p[i] = keep;
      g[i] = (up - down) / (2.0 * step);
    }
    grads.push_back(std::move(g));
  }
  return grads;
}

template <typename T>
void rms_norm_backward(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& dy,
                       Tensor<T>& dx, Tensor<T>& dgain, T eps = T(kRmsNormEps)) {
  const std::size_t c = x.shape().back();
  dx = Tensor<T>(x.shape());
  for (std::size_t r = 0; r < x.size() / c; ++r) {
    auto xr = x.row(r);
    auto dyr = dy.row(r);
    T ms{0};
    for (auto v : xr) ms += v * v;
    const T rinv = T(1) / std::sqrt(ms / T(c) + eps);
    T dot{0};
    for (std::size_t i = 0; i < c; ++i) {
      dot += gain[i] * dyr[i] * xr[i];
      dgain[i] += dyr[i] * xr[i] * rinv;
    }
    const T coef = dot * rinv * rinv * rinv / T(c);
    auto dxr = dx.row(r);
    for (std::size_t i = 0; i < c; ++i) dxr[i] = gain[i] * dyr[i] * rinv - xr[i] * coef;
  }
}

template <typename T>
T qk_activation_grad(QkActivation a, T x) {
  switch (a) {
    case QkActivation::relu: return x > T(0) ? T(1) : T(0);
    case QkActivation::silu: return silu_grad(x);
    case QkActivation::none: break;
  }
  return T(1);
}

template <typename T = double>
struct BlockGrads {
  BlockWeights<T> dw;
  Tensor<T> dh;
};

// Backward of variant_forward_trace. Gradients of shared activations
// accumulate (dt reaches the loss through both the decay and the values).
template <typename T>
BlockGrads<T> variant_backward(const Tensor<T>& h, const VariantConfig& cfg,
                               const BlockWeights<T>& w, const BlockTrace<T>& tr,
                               const Tensor<T>& d_out) {
  const std::size_t n = h.dim(0), dmodel = w.d_model(), heads = w.heads, dh = w.d_head;
  const std::size_t inner = w.inner();
  BlockGrads<T> g{zeros_like(w), Tensor<T>(h.shape())};
  auto& dw = g.dw;
  const T* hp = h.data().data();
  T* dhp = g.dh.data().data();

  detail::gemm_tn(tr.y_n.data().data(), d_out.data().data(), dw.w_out.data().data(), inner, n,
                  dmodel);
  Tensor<T> dy_n({n, inner});
  detail::gemm_nt(d_out.data().data(), w.w_out.data().data(), dy_n.data().data(), n, dmodel,
                  inner);

  Tensor<T> dgated;
  if (cfg.norm == NormKind::output_rmsnorm)
    rms_norm_backward(tr.gated, w.rms_gain, dy_n, dgated, dw.rms_gain);
  else
    dgated = std::move(dy_n);

  Tensor<T> dy_d = dgated;
  if (cfg.z_gate) {
    Tensor<T> dz({n, inner});
    for (std::size_t i = 0; i < dz.size(); ++i) {
      const T s = sigmoid((*tr.z_pre)[i]);
      dy_d[i] = dgated[i] * s;
      dz[i] = dgated[i] * tr.y_d[i] * s * (T(1) - s);
    }
    detail::gemm_tn(hp, dz.data().data(), dw.w_z->data().data(), dmodel, n, inner);
    detail::gemm_nt(dz.data().data(), w.w_z->data().data(), dhp, n, inner, dmodel, true);
  }

  const Tensor<T> dy = split_heads(dy_d, 0, heads, dh);
  GradBundle<T> kg = grad_attention_kernel(cfg.order, cfg.normalized(), tr.q, tr.k, tr.v_eff,
                                           tr.dm, dy);

  Tensor<T> dv = kg.dV;
  std::optional<Tensor<T>> ddt;
  if (cfg.uses_dt()) ddt = Tensor<T>({n, heads});
  if (cfg.discretize_values)
    for (std::size_t hh = 0; hh < heads; ++hh)
      for (std::size_t t = 0; t < n; ++t) {
        const T s = (*tr.dt)(t, hh);
        T acc{0};
        for (std::size_t c = 0; c < dh; ++c) {
          acc += kg.dV(hh, t, c) * tr.v(hh, t, c);
          dv(hh, t, c) = kg.dV(hh, t, c) * s;
        }
        (*ddt)(t, hh) += acc;
      }
  if (cfg.d_residual)
    for (std::size_t hh = 0; hh < heads; ++hh)
      for (std::size_t t = 0; t < n; ++t)
        for (std::size_t c = 0; c < dh; ++c) {
          const std::size_t col = hh * dh + c;
          dv(hh, t, c) += dy_d(t, col) * (*w.d_skip)[col];
          (*dw.d_skip)[col] += dy_d(t, col) * tr.v(hh, t, c);
        }

  switch (cfg.amask) {
    case DecayKind::none: break;
    case DecayKind::original:
      for (std::size_t hh = 0; hh < heads; ++hh) {
        const T rate = std::exp((*w.a_log)[hh]);
        for (std::size_t t = 0; t < n; ++t) {
          const T dl = kg.dA_logits(hh, t);
          (*dw.a_log)[hh] += dl * tr.logits.a(hh, t);
          (*ddt)(t, hh) += -dl * rate;
        }
      }
      break;
    case DecayKind::softplus: {
      Tensor<T> dpre({n, heads});
      for (std::size_t t = 0; t < n; ++t)
        for (std::size_t hh = 0; hh < heads; ++hh)
          dpre(t, hh) = -kg.dA_logits(hh, t) * sigmoid((*tr.a_pre)(t, hh));
      detail::gemm_tn(hp, dpre.data().data(), dw.w_a->data().data(), dmodel, n, heads);
      detail::gemm_nt(dpre.data().data(), w.w_a->data().data(), dhp, n, heads, dmodel, true);
      break;
    }
  }

  if (cfg.uses_dt()) {
    Tensor<T> dpre({n, heads});
    for (std::size_t t = 0; t < n; ++t)
      for (std::size_t hh = 0; hh < heads; ++hh) {
        dpre(t, hh) = (*ddt)(t, hh) * sigmoid((*tr.dt_pre)(t, hh));
        (*dw.dt_bias)[hh] += dpre(t, hh);
      }
    detail::gemm_tn(hp, dpre.data().data(), dw.w_dt->data().data(), dmodel, n, heads);
    detail::gemm_nt(dpre.data().data(), w.w_dt->data().data(), dhp, n, heads, dmodel, true);
  }

  const T scale = qk_scale<T>(cfg, dh);
  Tensor<T> dconv({n, 3 * inner});
  for (std::size_t hh = 0; hh < heads; ++hh)
    for (std::size_t t = 0; t < n; ++t)
      for (std::size_t c = 0; c < dh; ++c) {
        const std::size_t col = hh * dh + c;
        dconv(t, col) = kg.dQ(hh, t, c) * scale *
                        qk_activation_grad(cfg.qk_activation, tr.q_raw(hh, t, c));
        dconv(t, inner + col) =
            kg.dK(hh, t, c) * qk_activation_grad(cfg.qk_activation, tr.k_raw(hh, t, c));
        dconv(t, 2 * inner + col) = dv(hh, t, c);
      }
  if (cfg.conv_activation == ConvActivation::silu)
    for (std::size_t i = 0; i < dconv.size(); ++i) dconv[i] *= silu_grad(tr.conv_pre[i]);

  const std::size_t ch = 3 * inner;
  Tensor<T> dproj({n, ch});
  for (std::size_t t = 0; t < n; ++t)
    for (std::size_t s = 0; s < w.conv.window && s <= t; ++s)
      for (std::size_t c = 0; c < ch; ++c) {
        dw.conv.weight(c, s) += dconv(t, c) * tr.proj(t - s, c);
        dproj(t - s, c) += dconv(t, c) * w.conv.weight(c, s);
      }
  if (w.conv.bias)
    for (std::size_t t = 0; t < n; ++t)
      for (std::size_t c = 0; c < ch; ++c) (*dw.conv.bias)[c] += dconv(t, c);

  detail::gemm_tn(hp, dproj.data().data(), dw.w_qkv.data().data(), dmodel, n, ch);
  detail::gemm_nt(dproj.data().data(), w.w_qkv.data().data(), dhp, n, ch, dmodel, true);
  require_finite(g.dh, "variant_backward");
  return g;
}

}  // namespace seqmix
