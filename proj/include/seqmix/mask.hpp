#pragma once

#include <cmath>
#include <optional>

#include "seqmix/ops.hpp"
#include "seqmix/tensor.hpp"

namespace seqmix {

enum class DecayKind { none, original, softplus };

// Per-head, per-position decay log-rates, shape [H, N], every entry <= 0.
template <typename T = double>
struct DecayLogits {
  Tensor<T> a;
  DecayKind variant = DecayKind::none;

  std::size_t heads() const { return a.dim(0); }
  std::size_t length() const { return a.dim(1); }
};

// Cumulative decay and (optionally) its materialized causal decay matrix.
template <typename T = double>
struct DecayMatrix {
  Tensor<T> a_cs;                  // [H, N]
  std::optional<Tensor<T>> dense;  // [H, N, N]

  std::size_t heads() const { return a_cs.dim(0); }
  std::size_t length() const { return a_cs.dim(1); }
};

// exp(x) with exponents below the double underflow limit flushed to exact 0.
template <typename T>
T decay_exp(T x) {
  return x < T(-745) ? T(0) : std::exp(x);
}

template <typename T>
DecayLogits<T> zero_decay(std::size_t heads, std::size_t n) {
  return {Tensor<T>({heads, n}), DecayKind::none};
}

// a[h,t] = -exp(A_log[h]) * dt[h,t]
template <typename T>
DecayLogits<T> decay_original(const Tensor<T>& a_log, const Tensor<T>& dt) {
  if (a_log.rank() != 1 || dt.rank() != 2 || dt.dim(0) != a_log.dim(0))
    throw DimensionError("decay_original expects A_log [H] and dt [H,N], got " +
                         shape_string(a_log.shape()) + " and " + shape_string(dt.shape()));
  Tensor<T> a(dt.shape());
  for (std::size_t h = 0; h < dt.dim(0); ++h) {
    const T rate = std::exp(a_log[h]);
    for (std::size_t t = 0; t < dt.dim(1); ++t) {
      if (dt(h, t) < T(0)) throw DomainError("decay_original requires dt >= 0");
      a(h, t) = -rate * dt(h, t);
    }
  }
  require_finite(a, "decay_original");
  return {std::move(a), DecayKind::original};
}

// a[h,t] = -softplus((x . W_A)[t,h])
template <typename T>
DecayLogits<T> decay_softplus(const Tensor<T>& x, const Tensor<T>& w_a) {
  Tensor<T> pre = matmul(x, w_a);  // [N, H]
  const std::size_t n = pre.dim(0), heads = pre.dim(1);
  Tensor<T> a({heads, n});
  for (std::size_t t = 0; t < n; ++t)
    for (std::size_t h = 0; h < heads; ++h) a(h, t) = -softplus(pre(t, h));
  return {std::move(a), DecayKind::softplus};
}

// Builds A^CS by inclusive cumsum and, if requested, the dense matrix
// dense[h,i,j] = exp(a_cs[h,i] - a_cs[h,j]) for i >= j and 0 above the
// diagonal. The diagonal is written as exactly 1.
template <typename T>
DecayMatrix<T> build_decay_matrix(const DecayLogits<T>& logits, bool materialize = true) {
  DecayMatrix<T> dm;
  dm.a_cs = cumsum_axis(logits.a, 1);
  if (!materialize) return dm;
  const std::size_t heads = logits.heads(), n = logits.length();
  Tensor<T> dense({heads, n, n});
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < i; ++j) dense(h, i, j) = decay_exp(dm.a_cs(h, i) - dm.a_cs(h, j));
      dense(h, i, i) = T(1);
    }
  dm.dense = std::move(dense);
  return dm;
}

// max |log(1/(1+e^{-x})) - (-softplus(-x))| over the grid.
inline double logsigmoid_softplus_identity_check(const Tensor<double>& grid) {
  double worst = 0.0;
  for (double x : grid.data()) {
    if (!std::isfinite(x)) throw DomainError("identity check grid must be finite");
    const double lhs = std::log(1.0 / (1.0 + std::exp(-x)));
    const double rhs = -softplus(-x);
    worst = std::max(worst, std::abs(lhs - rhs));
  }
  return worst;
}

inline Tensor<double> uniform_grid(double lo, double hi, double step) {
  const auto count = static_cast<std::size_t>(std::llround((hi - lo) / step)) + 1;
  Tensor<double> g({count});
  for (std::size_t i = 0; i < count; ++i) g[i] = lo + static_cast<double>(i) * step;
  return g;
}

}  // namespace seqmix
