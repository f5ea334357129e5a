#pragma once

#include <cmath>
#include <limits>
#include <optional>
#include <random>
#include <string_view>

#include "seqmix/mask.hpp"
#include "seqmix/ops.hpp"
#include "seqmix/variant.hpp"

namespace seqmix {

// Normalizer guard: a row whose scores are all exactly zero produces zero
// output instead of 0/0.
template <typename T>
T guarded_div(T num, T den) {
  return den == T(0) ? T(0) : num / den;
}

template <typename T>
T apply_qk_activation(QkActivation a, T x) {
  switch (a) {
    case QkActivation::relu: return relu(x);
    case QkActivation::silu: return silu(x);
    case QkActivation::none: break;
  }
  return x;
}

template <typename T>
Tensor<T> apply_qk_activation(QkActivation a, const Tensor<T>& x) {
  if (a == QkActivation::none) return x;
  return map(x, [a](T v) { return apply_qk_activation(a, v); }, "qk_activation");
}

// [N, C] columns [offset, offset + H*d) -> [H, N, d]
template <typename T>
Tensor<T> split_heads(const Tensor<T>& x, std::size_t offset, std::size_t heads,
                      std::size_t d_head) {
  const std::size_t n = x.dim(0);
  if (offset + heads * d_head > x.dim(1)) throw DimensionError("split_heads out of range");
  Tensor<T> out({heads, n, d_head});
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t t = 0; t < n; ++t)
      for (std::size_t c = 0; c < d_head; ++c) out(h, t, c) = x(t, offset + h * d_head + c);
  return out;
}

// [H, N, d] -> [N, H*d]
template <typename T>
Tensor<T> merge_heads(const Tensor<T>& y) {
  const std::size_t heads = y.dim(0), n = y.dim(1), d = y.dim(2);
  Tensor<T> out({n, heads * d});
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t t = 0; t < n; ++t)
      for (std::size_t c = 0; c < d; ++c) out(t, h * d + c) = y(h, t, c);
  return out;
}

template <typename T>
T decay_factor(const DecayMatrix<T>& dm, std::size_t h, std::size_t i, std::size_t j) {
  if (dm.dense) return (*dm.dense)(h, i, j);
  return i == j ? T(1) : decay_exp(dm.a_cs(h, i) - dm.a_cs(h, j));
}

// Masked, unnormalized attention scores [H, N, N] for one score order:
//   linear      f = q.k
//   squared     f = (q.k)^2          (the decay factor is never squared)
//   exponential f = exp(q.k + A^CS_i - A^CS_j - m_i), m_i the row max when
//               shift_exponential is set and 0 otherwise
// times the decay factor (A^M_ij) and the causal mask.
template <typename T>
Tensor<T> raw_attention_scores(const Tensor<T>& q, const Tensor<T>& k, const DecayMatrix<T>& dm,
                               ScoreOrder order, bool shift_exponential) {
  q.require_same_shape(k, "attention_weights");
  const std::size_t heads = q.dim(0), n = q.dim(1), d = q.dim(2);
  if (dm.heads() != heads || dm.length() != n)
    throw DimensionError("decay matrix does not match Q/K layout");
  Tensor<T> w({heads, n, n});
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t i = 0; i < n; ++i) {
      auto qi = std::span<const T>(q.data()).subspan((h * n + i) * d, d);
      auto wi = std::span<T>(w.data()).subspan((h * n + i) * n, n);
      if (order == ScoreOrder::exponential) {
        T m = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j <= i; ++j) {
          auto kj = std::span<const T>(k.data()).subspan((h * n + j) * d, d);
          wi[j] = detail::dot(qi, kj) + (dm.a_cs(h, i) - dm.a_cs(h, j));
          m = std::max(m, wi[j]);
        }
        const T shift = shift_exponential ? m : T(0);
        for (std::size_t j = 0; j <= i; ++j) wi[j] = std::exp(wi[j] - shift);
      } else {
        for (std::size_t j = 0; j <= i; ++j) {
          auto kj = std::span<const T>(k.data()).subspan((h * n + j) * d, d);
          const T x = detail::dot(qi, kj);
          const T f = order == ScoreOrder::squared ? x * x : x;
          wi[j] = f * decay_factor(dm, h, i, j);
        }
      }
    }
  require_finite(w, "attention_scores");
  return w;
}

// Attention weights; with normalize each causal row is divided by its sum.
template <typename T>
Tensor<T> attention_weights(const Tensor<T>& q, const Tensor<T>& k, const DecayMatrix<T>& dm,
                            ScoreOrder order, bool normalize) {
  Tensor<T> w = raw_attention_scores(q, k, dm, order, normalize);
  if (!normalize) return w;
  const std::size_t n = q.dim(1);
  for (std::size_t r = 0; r < w.size() / n; ++r) {
    auto wi = w.row(r);
    const std::size_t i = r % n;
    T s{0};
    for (std::size_t j = 0; j <= i; ++j) s += wi[j];
    for (std::size_t j = 0; j <= i; ++j) wi[j] = guarded_div(wi[j], s);
  }
  return w;
}

template <typename T>
Tensor<T> attention_kernel(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                           const DecayMatrix<T>& dm, ScoreOrder order, bool normalize) {
  q.require_same_shape(v, "attention_kernel");
  return matmul(attention_weights(q, k, dm, order, normalize), v);
}

// Normalized squared scores with decay: the 2Mamba attention matrix.
template <typename T>
Tensor<T> two_mamba_scores(const Tensor<T>& q, const Tensor<T>& k, const DecayMatrix<T>& dm) {
  return attention_weights(q, k, dm, ScoreOrder::squared, true);
}

// Causal softmax attention, row max subtracted before exponentiation.
template <typename T>
Tensor<T> softmax_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                            bool scale_qk = false) {
  q.require_same_shape(k, "softmax_attention");
  q.require_same_shape(v, "softmax_attention");
  const std::size_t heads = q.dim(0), n = q.dim(1), d = q.dim(2);
  const T scale = scale_qk ? T(1) / std::sqrt(T(d)) : T(1);
  Tensor<T> out(q.shape());
  std::vector<T> logits(n);
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t i = 0; i < n; ++i) {
      T m = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j <= i; ++j) {
        T s{0};
        for (std::size_t c = 0; c < d; ++c) s += q(h, i, c) * k(h, j, c);
        logits[j] = s * scale;
        m = std::max(m, logits[j]);
      }
      T den{0};
      for (std::size_t j = 0; j <= i; ++j) {
        logits[j] = std::exp(logits[j] - m);
        den += logits[j];
      }
      for (std::size_t j = 0; j <= i; ++j)
        for (std::size_t c = 0; c < d; ++c) out(h, i, c) += logits[j] * v(h, j, c);
      for (std::size_t c = 0; c < d; ++c) out(h, i, c) = guarded_div(out(h, i, c), den);
    }
  require_finite(out, "softmax_attention");
  return out;
}

// Linear attention computed score-first: (phi(Q) phi(K)^T o M) V, divided by
// the causal row sums of the scores.
template <typename T>
Tensor<T> linear_attention_qk_first(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                                    QkActivation activation,
                                    std::size_t* guarded_rows = nullptr) {
  const Tensor<T> fq = apply_qk_activation(activation, q);
  const Tensor<T> fk = apply_qk_activation(activation, k);
  Tensor<T> scores = matmul(fq, transpose_last(fk));
  const std::size_t heads = q.dim(0), n = q.dim(1), dv = v.dim(2);
  Tensor<T> out(v.shape());
  std::size_t guarded = 0;
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t i = 0; i < n; ++i) {
      T den{0};
      for (std::size_t j = 0; j <= i; ++j) den += scores(h, i, j);
      if (den == T(0)) ++guarded;
      for (std::size_t c = 0; c < dv; ++c) {
        T num{0};
        for (std::size_t j = 0; j <= i; ++j) num += scores(h, i, j) * v(h, j, c);
        out(h, i, c) = guarded_div(num, den);
      }
    }
  if (guarded_rows) *guarded_rows = guarded;
  require_finite(out, "linear_attention_qk_first");
  return out;
}

// Same contract, computed state-first: S_t = S_{t-1} + phi(k_t) v_t^T and
// z_t = z_{t-1} + phi(k_t), y_t = phi(q_t)^T S_t / phi(q_t)^T z_t.
template <typename T>
Tensor<T> linear_attention_kv_first(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                                    QkActivation activation,
                                    std::size_t* guarded_rows = nullptr) {
  const Tensor<T> fq = apply_qk_activation(activation, q);
  const Tensor<T> fk = apply_qk_activation(activation, k);
  const std::size_t heads = q.dim(0), n = q.dim(1), d = q.dim(2), dv = v.dim(2);
  Tensor<T> out(v.shape());
  std::size_t guarded = 0;
  std::vector<T> state(d * dv), z(d);
  for (std::size_t h = 0; h < heads; ++h) {
    std::fill(state.begin(), state.end(), T(0));
    std::fill(z.begin(), z.end(), T(0));
    for (std::size_t t = 0; t < n; ++t) {
      for (std::size_t a = 0; a < d; ++a) {
        const T ka = fk(h, t, a);
        z[a] += ka;
        for (std::size_t c = 0; c < dv; ++c) state[a * dv + c] += ka * v(h, t, c);
      }
      T den{0};
      for (std::size_t a = 0; a < d; ++a) den += fq(h, t, a) * z[a];
      if (den == T(0)) ++guarded;
      for (std::size_t c = 0; c < dv; ++c) {
        T num{0};
        for (std::size_t a = 0; a < d; ++a) num += fq(h, t, a) * state[a * dv + c];
        out(h, t, c) = guarded_div(num, den);
      }
    }
  }
  if (guarded_rows) *guarded_rows = guarded;
  require_finite(out, "linear_attention_kv_first");
  return out;
}

// Parameters of one attention block. Optional tensors are present exactly when
// the variant needs them.
template <typename T = double>
struct BlockWeights {
  std::size_t heads = 0;
  std::size_t d_head = 0;
  Tensor<T> w_qkv;                     // [d, 3*H*d_H]
  Tensor<T> w_out;                     // [H*d_H, d]
  std::optional<Tensor<T>> w_a;        // [d, H]
  std::optional<Tensor<T>> w_dt;       // [d, H]
  std::optional<Tensor<T>> dt_bias;    // [H]
  std::optional<Tensor<T>> a_log;      // [H]
  std::optional<Tensor<T>> d_skip;     // [H*d_H]
  std::optional<Tensor<T>> w_z;        // [d, H*d_H]
  ConvSpec<T> conv;                    // channels 3*H*d_H
  Tensor<T> rms_gain;                  // [H*d_H]

  std::size_t d_model() const { return w_qkv.dim(0); }
  std::size_t inner() const { return heads * d_head; }
};

namespace detail {
inline void require_present(bool present, const char* name, const char* why) {
  if (!present)
    throw ConfigError(std::string("missing weight ") + name + " required by " + why);
}
}  // namespace detail

template <typename T>
void validate_weights(const VariantConfig& cfg, const BlockWeights<T>& w) {
  cfg.validate();
  const std::size_t d = w.d_model(), inner = w.inner();
  if (w.w_qkv.shape() != Shape{d, 3 * inner}) throw DimensionError("w_qkv shape mismatch");
  if (w.w_out.shape() != Shape{inner, w.w_out.dim(1)}) throw DimensionError("w_out shape mismatch");
  w.conv.validate();
  if (w.conv.channels() != 3 * inner) throw DimensionError("conv channels must be 3*H*d_H");
  if (w.conv.window != cfg.conv_window)
    throw ConfigError("conv window " + std::to_string(w.conv.window) +
                      " does not match config window " + std::to_string(cfg.conv_window));
  if (w.conv.activation != cfg.conv_activation)
    throw ConfigError("conv activation does not match config");
  if (cfg.uses_dt()) {
    detail::require_present(w.w_dt.has_value(), "w_dt", "dt (discretize_values or original amask)");
    detail::require_present(w.dt_bias.has_value(), "dt_bias", "dt");
  }
  if (cfg.amask == DecayKind::original)
    detail::require_present(w.a_log.has_value(), "a_log", "original amask");
  if (cfg.amask == DecayKind::softplus)
    detail::require_present(w.w_a.has_value(), "w_a", "softplus amask");
  if (cfg.d_residual) detail::require_present(w.d_skip.has_value(), "d_skip", "d_residual");
  if (cfg.z_gate) detail::require_present(w.w_z.has_value(), "w_z", "z_gate");
  if (w.rms_gain.size() != inner) throw DimensionError("rms_gain must have H*d_H entries");
}

inline constexpr double kDtMin = 0.001;
inline constexpr double kDtMax = 0.1;

// Gaussian projections with std 1/sqrt(fan_in); identity-start conv; dt bias
// from a log-uniform dt in [dt_min, dt_max]; A_log = log U[1,16]; D = 1.
template <typename T>
BlockWeights<T> init_block_weights(const VariantConfig& cfg, std::size_t d_model,
                                   std::size_t heads, std::size_t d_head, std::mt19937_64& rng) {
  cfg.validate();
  BlockWeights<T> w;
  w.heads = heads;
  w.d_head = d_head;
  const std::size_t inner = heads * d_head;
  auto gaussian = [&rng](Shape s, std::size_t fan_in) {
    std::normal_distribution<double> nd(0.0, 1.0 / std::sqrt(static_cast<double>(fan_in)));
    Tensor<T> t(std::move(s));
    for (auto& x : t.data()) x = static_cast<T>(nd(rng));
    return t;
  };
  w.w_qkv = gaussian({d_model, 3 * inner}, d_model);
  w.w_out = gaussian({inner, d_model}, inner);
  if (cfg.amask == DecayKind::softplus) w.w_a = gaussian({d_model, heads}, d_model);
  if (cfg.uses_dt()) {
    w.w_dt = gaussian({d_model, heads}, d_model);
    std::uniform_real_distribution<double> ud(std::log(kDtMin), std::log(kDtMax));
    Tensor<T> bias({heads});
    for (auto& b : bias.data()) b = static_cast<T>(softplus_inverse(std::exp(ud(rng))));
    w.dt_bias = std::move(bias);
  }
  if (cfg.amask == DecayKind::original) {
    std::uniform_real_distribution<double> ud(1.0, 16.0);
    Tensor<T> a({heads});
    for (auto& x : a.data()) x = static_cast<T>(std::log(ud(rng)));
    w.a_log = std::move(a);
  }
  if (cfg.d_residual) w.d_skip = Tensor<T>({inner}, T(1));
  if (cfg.z_gate) w.w_z = gaussian({d_model, inner}, d_model);
  w.conv = ConvSpec<T>::identity(3 * inner, cfg.conv_window);
  w.conv.activation = cfg.conv_activation;
  if (cfg.conv_activation == ConvActivation::silu) w.conv.bias = Tensor<T>({3 * inner});
  w.rms_gain = Tensor<T>({inner}, T(1));
  return w;
}

// Visits every trainable tensor the config actually uses, in a fixed order.
template <typename W, typename F>
void for_each_param(const VariantConfig& cfg, W& w, F&& f) {
  f("w_qkv", w.w_qkv);
  f("conv.weight", w.conv.weight);
  if (w.conv.bias) f("conv.bias", *w.conv.bias);
  if (cfg.amask == DecayKind::softplus) f("w_a", *w.w_a);
  if (cfg.uses_dt()) {
    f("w_dt", *w.w_dt);
    f("dt_bias", *w.dt_bias);
  }
  if (cfg.amask == DecayKind::original) f("a_log", *w.a_log);
  if (cfg.d_residual) f("d_skip", *w.d_skip);
  if (cfg.z_gate) f("w_z", *w.w_z);
  if (cfg.norm == NormKind::output_rmsnorm) f("rms_gain", w.rms_gain);
  f("w_out", w.w_out);
}

template <typename T>
BlockWeights<T> zeros_like(const BlockWeights<T>& w) {
  BlockWeights<T> z = w;
  auto clear = [](Tensor<T>& t) { t.fill(T(0)); };
  clear(z.w_qkv);
  clear(z.w_out);
  for (auto* o : {&z.w_a, &z.w_dt, &z.dt_bias, &z.a_log, &z.d_skip, &z.w_z})
    if (*o) clear(**o);
  clear(z.conv.weight);
  if (z.conv.bias) clear(*z.conv.bias);
  clear(z.rms_gain);
  return z;
}

// Every intermediate of one block forward, kept for the backward pass.
template <typename T = double>
struct BlockTrace {
  Tensor<T> proj;                      // [N, 3I]
  Tensor<T> conv_pre;                  // [N, 3I]
  Tensor<T> conv_out;                  // [N, 3I]
  Tensor<T> q_raw, k_raw;              // [H, N, d_H] before qk activation
  Tensor<T> q, k, v;                   // [H, N, d_H] kernel inputs
  std::optional<Tensor<T>> dt_pre, dt; // [N, H]
  std::optional<Tensor<T>> a_pre;      // [N, H]
  DecayLogits<T> logits;               // [H, N]
  DecayMatrix<T> dm;
  Tensor<T> v_eff;                     // [H, N, d_H]
  Tensor<T> y;                         // [H, N, d_H]
  Tensor<T> y_d;                       // [N, I]
  std::optional<Tensor<T>> z_pre;      // [N, I]
  Tensor<T> gated;                     // [N, I]
  Tensor<T> y_n;                       // [N, I]
  Tensor<T> out;                       // [N, d]
};

template <typename T>
T qk_scale(const VariantConfig& cfg, std::size_t d_head) {
  return cfg.scale_qk ? T(1) / std::sqrt(T(d_head)) : T(1);
}

// Configurable block: project -> causal conv -> qk activation -> scores of the
// configured order -> decay mask and causal mask -> normalization -> optional
// dt on values -> D residual -> Z gate -> output RMSNorm -> W_out.
template <typename T>
BlockTrace<T> variant_forward_trace(const Tensor<T>& h, const VariantConfig& cfg,
                                    const BlockWeights<T>& w) {
  validate_weights(cfg, w);
  if (h.rank() != 2 || h.dim(1) != w.d_model())
    throw DimensionError("block input must be [N, d_model], got " + shape_string(h.shape()));
  const std::size_t n = h.dim(0), heads = w.heads, dh = w.d_head, inner = w.inner();
  BlockTrace<T> tr;
  tr.proj = matmul(h, w.w_qkv);
  tr.conv_pre = causal_conv1d_linear(tr.proj, w.conv);
  tr.conv_out = cfg.conv_activation == ConvActivation::silu ? silu(tr.conv_pre) : tr.conv_pre;
  tr.q_raw = split_heads(tr.conv_out, 0, heads, dh);
  tr.k_raw = split_heads(tr.conv_out, inner, heads, dh);
  tr.v = split_heads(tr.conv_out, 2 * inner, heads, dh);
  tr.q = apply_qk_activation(cfg.qk_activation, tr.q_raw);
  tr.k = apply_qk_activation(cfg.qk_activation, tr.k_raw);
  if (cfg.scale_qk) tr.q *= qk_scale<T>(cfg, dh);

  if (cfg.uses_dt()) {
    Tensor<T> pre = matmul(h, *w.w_dt);
    for (std::size_t t = 0; t < n; ++t)
      for (std::size_t hh = 0; hh < heads; ++hh) pre(t, hh) += (*w.dt_bias)[hh];
    tr.dt = softplus(pre);
    tr.dt_pre = std::move(pre);
  }
  switch (cfg.amask) {
    case DecayKind::none: tr.logits = zero_decay<T>(heads, n); break;
    case DecayKind::original: tr.logits = decay_original(*w.a_log, transpose_last(*tr.dt)); break;
    case DecayKind::softplus:
      tr.a_pre = matmul(h, *w.w_a);
      tr.logits = decay_softplus(h, *w.w_a);
      break;
  }
  tr.dm = build_decay_matrix(tr.logits, cfg.order != ScoreOrder::exponential);

  tr.v_eff = tr.v;
  if (cfg.discretize_values)
    for (std::size_t hh = 0; hh < heads; ++hh)
      for (std::size_t t = 0; t < n; ++t)
        for (std::size_t c = 0; c < dh; ++c) tr.v_eff(hh, t, c) *= (*tr.dt)(t, hh);

  tr.y = attention_kernel(tr.q, tr.k, tr.v_eff, tr.dm, cfg.order, cfg.normalized());
  tr.y_d = merge_heads(tr.y);
  if (cfg.d_residual) {
    const Tensor<T> vm = merge_heads(tr.v);
    for (std::size_t t = 0; t < n; ++t)
      for (std::size_t c = 0; c < inner; ++c) tr.y_d(t, c) += vm(t, c) * (*w.d_skip)[c];
  }
  tr.gated = tr.y_d;
  if (cfg.z_gate) {
    tr.z_pre = matmul(h, *w.w_z);
    for (std::size_t i = 0; i < tr.gated.size(); ++i) tr.gated[i] *= sigmoid((*tr.z_pre)[i]);
  }
  tr.y_n = cfg.norm == NormKind::output_rmsnorm ? rms_norm(tr.gated, w.rms_gain) : tr.gated;
  tr.out = matmul(tr.y_n, w.w_out);
  return tr;
}

template <typename T>
Tensor<T> variant_forward(const Tensor<T>& h, const VariantConfig& cfg, const BlockWeights<T>& w) {
  return variant_forward_trace(h, cfg, w).out;
}

// Direct transcription of the full Mamba-2 block:
//   Q,K,V = silu(conv(h W_QKV)); dt = softplus(h W_dt + dt_bias)
//   A = -exp(A_log); A^CS = cumsum(A dt); y = (Q K^T o A^M o M)(V o dt)
//   y_D = y + V o D; out = RMSNorm(y_D o sigmoid(h W_z)) W_out
template <typename T>
Tensor<T> mamba2_full_forward(const Tensor<T>& h, const BlockWeights<T>& w) {
  detail::require_present(w.w_dt && w.dt_bias, "w_dt/dt_bias", "mamba2");
  detail::require_present(w.a_log.has_value(), "a_log", "mamba2");
  detail::require_present(w.d_skip.has_value(), "d_skip", "mamba2");
  detail::require_present(w.w_z.has_value(), "w_z", "mamba2");
  const std::size_t n = h.dim(0), heads = w.heads, dh = w.d_head, inner = w.inner();

  const Tensor<T> qkv = silu(causal_conv1d_linear(matmul(h, w.w_qkv), w.conv));
  const Tensor<T> q = split_heads(qkv, 0, heads, dh);
  const Tensor<T> k = split_heads(qkv, inner, heads, dh);
  const Tensor<T> v = split_heads(qkv, 2 * inner, heads, dh);

  Tensor<T> dt_p = matmul(h, *w.w_dt);
  const Tensor<T> z = matmul(h, *w.w_z);
  for (std::size_t t = 0; t < n; ++t)
    for (std::size_t hh = 0; hh < heads; ++hh) dt_p(t, hh) += (*w.dt_bias)[hh];
  const Tensor<T> dt = softplus(dt_p);

  Tensor<T> v_dt = v;
  for (std::size_t hh = 0; hh < heads; ++hh)
    for (std::size_t t = 0; t < n; ++t)
      for (std::size_t c = 0; c < dh; ++c) v_dt(hh, t, c) *= dt(t, hh);

  const DecayMatrix<T> dm = build_decay_matrix(decay_original(*w.a_log, transpose_last(dt)));
  const Tensor<T> y = attention_kernel(q, k, v_dt, dm, ScoreOrder::linear, false);

  Tensor<T> y_d = merge_heads(y);
  const Tensor<T> vm = merge_heads(v);
  for (std::size_t t = 0; t < n; ++t)
    for (std::size_t c = 0; c < inner; ++c) y_d(t, c) += vm(t, c) * (*w.d_skip)[c];
  for (std::size_t i = 0; i < y_d.size(); ++i) y_d[i] *= sigmoid(z[i]);
  return matmul(rms_norm(y_d, w.rms_gain), w.w_out);
}

}  // namespace seqmix
