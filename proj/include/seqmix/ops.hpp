#pragma once

#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <string>

#include "seqmix/tensor.hpp"

namespace seqmix {

namespace detail {

// c[m,n] (+)= a[m,k] * b[k,n], row-major, i-k-j order so the inner loop is a
// contiguous axpy.
template <typename T>
void gemm(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n,
          bool accumulate = false) {
  if (!accumulate)
    for (std::size_t i = 0; i < m * n; ++i) c[i] = T{0};
  for (std::size_t i = 0; i < m; ++i) {
    T* ci = c + i * n;
    const T* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = ai[p];
      if (av == T{0}) continue;
      const T* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

// c[m,n] (+)= a[k,m]^T * b[k,n]
template <typename T>
void gemm_tn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n,
             bool accumulate = false) {
  if (!accumulate)
    for (std::size_t i = 0; i < m * n; ++i) c[i] = T{0};
  for (std::size_t p = 0; p < k; ++p) {
    const T* ap = a + p * m;
    const T* bp = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const T av = ap[i];
      if (av == T{0}) continue;
      T* ci = c + i * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

// c[m,n] (+)= a[m,k] * b[n,k]^T
template <typename T>
void gemm_nt(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n,
             bool accumulate = false) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* ai = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const T* bj = b + j * k;
      T s{0};
      for (std::size_t p = 0; p < k; ++p) s += ai[p] * bj[p];
      if (accumulate)
        c[i * n + j] += s;
      else
        c[i * n + j] = s;
    }
  }
}

template <typename T>
T dot(std::span<const T> a, std::span<const T> b) {
  T s{0};
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

}  // namespace detail

// Batched matrix product [*,m,k] x [*,k,n] -> [*,m,n]. Leading batch axes
// broadcast numpy-style (missing or extent-1 axes repeat).
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() < 2 || b.rank() < 2)
    throw DimensionError("matmul needs rank >= 2, got " + shape_string(a.shape()) + " x " +
                         shape_string(b.shape()));
  const std::size_t m = a.shape()[a.rank() - 2], k = a.shape().back();
  const std::size_t kb = b.shape()[b.rank() - 2], n = b.shape().back();
  if (k != kb)
    throw DimensionError("matmul inner extents differ: " + shape_string(a.shape()) + " x " +
                         shape_string(b.shape()));

  const std::size_t ra = a.rank() - 2, rb = b.rank() - 2;
  const std::size_t rank = std::max(ra, rb);
  Shape batch(rank, 1), ba(rank, 1), bb(rank, 1);
  for (std::size_t i = 0; i < ra; ++i) ba[rank - ra + i] = a.shape()[i];
  for (std::size_t i = 0; i < rb; ++i) bb[rank - rb + i] = b.shape()[i];
  for (std::size_t i = 0; i < rank; ++i) {
    if (ba[i] != bb[i] && ba[i] != 1 && bb[i] != 1)
      throw DimensionError("matmul batch axes not broadcastable: " + shape_string(a.shape()) +
                           " x " + shape_string(b.shape()));
    batch[i] = std::max(ba[i], bb[i]);
  }

  Shape out_shape = batch;
  out_shape.push_back(m);
  out_shape.push_back(n);
  Tensor<T> out(out_shape);
  const std::size_t nbatch = shape_numel(batch);
  std::vector<std::size_t> idx(rank, 0);
  for (std::size_t bi = 0; bi < nbatch; ++bi) {
    std::size_t oa = 0, ob = 0;
    for (std::size_t i = 0; i < rank; ++i) {
      oa = oa * ba[i] + (ba[i] == 1 ? 0 : idx[i]);
      ob = ob * bb[i] + (bb[i] == 1 ? 0 : idx[i]);
    }
    detail::gemm(a.data().data() + oa * m * k, b.data().data() + ob * k * n,
                 out.data().data() + bi * m * n, m, k, n);
    for (std::size_t i = rank; i-- > 0;) {
      if (++idx[i] < batch[i]) break;
      idx[i] = 0;
    }
  }
  require_finite(out, "matmul");
  return out;
}

// Swap the last two axes.
template <typename T>
Tensor<T> transpose_last(const Tensor<T>& x) {
  if (x.rank() < 2) throw DimensionError("transpose needs rank >= 2");
  Shape s = x.shape();
  const std::size_t r = s[s.size() - 2], c = s.back();
  std::swap(s[s.size() - 2], s.back());
  Tensor<T> out(s);
  const std::size_t nb = x.size() / (r * c);
  for (std::size_t b = 0; b < nb; ++b)
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) out[b * r * c + j * r + i] = x[b * r * c + i * c + j];
  return out;
}

// Inclusive prefix sum along one axis.
template <typename T>
Tensor<T> cumsum_axis(const Tensor<T>& x, std::size_t axis) {
  if (axis >= x.rank())
    throw DimensionError("cumsum axis " + std::to_string(axis) + " invalid for shape " +
                         shape_string(x.shape()));
  Tensor<T> out = x;
  std::size_t inner = 1;
  for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.shape()[i];
  const std::size_t len = x.shape()[axis];
  const std::size_t outer = x.size() / (inner * len);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t in = 0; in < inner; ++in) {
      T acc{0};
      for (std::size_t s = 0; s < len; ++s) {
        T& v = out[(o * len + s) * inner + in];
        acc += v;
        v = acc;
      }
    }
  require_finite(out, "cumsum_axis");
  return out;
}

// Suffix sum along the last axis: the adjoint of an inclusive cumsum.
template <typename T>
Tensor<T> reverse_cumsum_last(const Tensor<T>& x) {
  Tensor<T> out = x;
  const std::size_t len = x.shape().back();
  for (std::size_t r = 0; r < x.size() / len; ++r) {
    T acc{0};
    for (std::size_t s = len; s-- > 0;) {
      acc += out[r * len + s];
      out[r * len + s] = acc;
    }
  }
  return out;
}

// log(1 + e^x) with saturating branches beyond |x| > 30.
template <typename T>
T softplus(T x) {
  if (x > T(30)) return x;
  if (x < T(-30)) return std::exp(x);
  return std::log1p(std::exp(x));
}

// Inverse of softplus for y > 0, in the form y + log(1 - e^{-y}).
template <typename T>
T softplus_inverse(T y) {
  if (!(y > T(0))) throw DomainError("softplus_inverse requires y > 0");
  return y + std::log(-std::expm1(-y));
}

template <typename T>
T sigmoid(T x) {
  if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

template <typename T>
T silu(T x) {
  return x * sigmoid(x);
}

template <typename T>
T silu_grad(T x) {
  const T s = sigmoid(x);
  return s * (T(1) + x * (T(1) - s));
}

template <typename T>
T relu(T x) {
  return x > T(0) ? x : T(0);
}

template <typename T, typename F>
Tensor<T> map(const Tensor<T>& x, F&& f, const char* op = "map") {
  Tensor<T> out = x;
  for (auto& v : out.data()) v = f(v);
  require_finite(out, op);
  return out;
}

template <typename T>
Tensor<T> softplus(const Tensor<T>& x) {
  return map(x, [](T v) { return softplus(v); }, "softplus");
}

template <typename T>
Tensor<T> softplus_inverse(const Tensor<T>& y) {
  return map(y, [](T v) { return softplus_inverse(v); }, "softplus_inverse");
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return map(x, [](T v) { return sigmoid(v); }, "sigmoid");
}

template <typename T>
Tensor<T> silu(const Tensor<T>& x) {
  return map(x, [](T v) { return silu(v); }, "silu");
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  return map(x, [](T v) { return relu(v); }, "relu");
}

enum class ConvActivation { none, silu };

// Depthwise causal convolution parameters. weight[c, s] multiplies the input
// s steps in the past, so weight[c, 0] is the current-token tap.
template <typename T = double>
struct ConvSpec {
  std::size_t window = 1;
  Tensor<T> weight;                 // [channels, window]
  std::optional<Tensor<T>> bias;    // [channels]
  ConvActivation activation = ConvActivation::none;

  std::size_t channels() const { return weight.dim(0); }

  static ConvSpec identity(std::size_t channels, std::size_t window = 1) {
    ConvSpec spec;
    spec.window = window;
    spec.weight = Tensor<T>({channels, window});
    for (std::size_t c = 0; c < channels; ++c) spec.weight(c, 0) = T(1);
    return spec;
  }

  void validate() const {
    if (window < 1 || window > 4)
      throw DimensionError("conv window must be in [1,4], got " + std::to_string(window));
    if (weight.rank() != 2 || weight.dim(1) != window)
      throw DimensionError("conv weight shape " + shape_string(weight.shape()) +
                           " does not match window " + std::to_string(window));
    if (bias && bias->shape() != Shape{weight.dim(0)})
      throw DimensionError("conv bias shape mismatch");
  }
};

// Pre-activation conv output; the activation is applied by the caller or by
// causal_conv1d.
template <typename T>
Tensor<T> causal_conv1d_linear(const Tensor<T>& x, const ConvSpec<T>& spec) {
  spec.validate();
  if (x.rank() != 2 || x.dim(1) != spec.channels())
    throw DimensionError("conv input " + shape_string(x.shape()) + " does not match " +
                         std::to_string(spec.channels()) + " channels");
  const std::size_t n = x.dim(0), ch = x.dim(1);
  Tensor<T> out({n, ch});
  for (std::size_t t = 0; t < n; ++t) {
    auto o = out.row(t);
    if (spec.bias)
      for (std::size_t c = 0; c < ch; ++c) o[c] = (*spec.bias)[c];
    for (std::size_t s = 0; s < spec.window && s <= t; ++s) {
      auto xi = x.row(t - s);
      for (std::size_t c = 0; c < ch; ++c) o[c] += spec.weight(c, s) * xi[c];
    }
  }
  return out;
}

template <typename T>
Tensor<T> causal_conv1d(const Tensor<T>& x, const ConvSpec<T>& spec) {
  Tensor<T> out = causal_conv1d_linear(x, spec);
  if (spec.activation == ConvActivation::silu)
    for (auto& v : out.data()) v = silu(v);
  require_finite(out, "causal_conv1d");
  return out;
}

inline constexpr double kRmsNormEps = 1e-6;

// Row-wise RMS normalization over the last axis with a per-channel gain.
template <typename T>
Tensor<T> rms_norm(const Tensor<T>& x, const Tensor<T>& gain, T eps = T(kRmsNormEps)) {
  const std::size_t c = x.shape().back();
  if (gain.size() != c) throw DimensionError("rms_norm gain length mismatch");
  Tensor<T> out = x;
  for (std::size_t r = 0; r < x.size() / c; ++r) {
    auto xr = x.row(r);
    T ms{0};
    for (auto v : xr) ms += v * v;
    const T inv = T(1) / std::sqrt(ms / T(c) + eps);
    auto o = out.row(r);
    for (std::size_t i = 0; i < c; ++i) o[i] = xr[i] * inv * gain[i];
  }
  require_finite(out, "rms_norm");
  return out;
}

}  // namespace seqmix
