#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <deque>
#include <limits>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "seqmix/forward.hpp"
#include "seqmix/ops.hpp"

namespace seqmix {

// Compressed second-order feature map: one entry per unordered pair i <= j,
// row-major, with coefficient sqrt(2) off the diagonal so that
// phi2(x) . phi2(y) == (x . y)^2.
class Phi2Map {
 public:
  explicit Phi2Map(std::size_t d) : d_(d) {
    if (d == 0) throw DimensionError("phi2 needs d >= 1");
    pairs_.reserve(d * (d + 1) / 2);
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = i; j < d; ++j) {
        pairs_.emplace_back(i, j);
        coeffs_.push_back(i == j ? 1.0 : std::sqrt(2.0));
      }
  }

  std::size_t input_dim() const noexcept { return d_; }
  std::size_t feature_dim() const noexcept { return pairs_.size(); }
  const std::vector<std::pair<std::size_t, std::size_t>>& index_table() const noexcept {
    return pairs_;
  }
  const std::vector<double>& coeffs() const noexcept { return coeffs_; }

  template <typename T>
  void apply(std::span<const T> x, std::span<T> out) const {
    if (x.size() != d_ || out.size() != pairs_.size())
      throw DimensionError("phi2 input/output length mismatch");
    for (std::size_t p = 0; p < pairs_.size(); ++p)
      out[p] = static_cast<T>(coeffs_[p]) * x[pairs_[p].first] * x[pairs_[p].second];
  }

  template <typename T>
  Tensor<T> operator()(const Tensor<T>& x) const {
    Tensor<T> out({feature_dim()});
    apply<T>(x.data(), out.data());
    return out;
  }

 private:
  std::size_t d_;
  std::vector<std::pair<std::size_t, std::size_t>> pairs_;
  std::vector<double> coeffs_;
};

template <typename T>
Tensor<T> phi2(const Tensor<T>& x) {
  if (x.rank() != 1) throw DimensionError("phi2 expects a vector");
  return Phi2Map(x.dim(0))(x);
}

// Last (window - 1) pre-conv rows of one head's fused q|k|v channels.
template <typename T = double>
struct ConvRing {
  std::size_t window = 1;
  std::size_t width = 0;
  std::deque<std::vector<T>> rows;  // front = most recent

  // Input row s steps in the past (s >= 1), or nullptr before the sequence.
  const std::vector<T>* past(std::size_t s) const {
    return s - 1 < rows.size() ? &rows[s - 1] : nullptr;
  }

  void push(std::span<const T> r) {
    if (window <= 1) return;
    rows.emplace_front(r.begin(), r.end());
    if (rows.size() > window - 1) rows.pop_back();
  }

  std::size_t stored_scalars() const { return rows.size() * width; }
};

// Fixed-size recurrent state for order-1 and order-2 variants.
template <typename T = double>
struct RecurrentState {
  int order = 1;
  std::size_t d_head = 0;
  std::size_t features = 0;       // d_head for order 1, d_head(d_head+1)/2 for order 2
  Tensor<T> S;                    // [features, d_head]
  std::optional<Tensor<T>> z;     // [features], present iff normalized
  ConvRing<T> conv;
  std::size_t step = 0;

  static RecurrentState make(int order, std::size_t d_head, bool normalized,
                             std::size_t window) {
    if (order != 1 && order != 2) throw ConfigError("recurrent state order must be 1 or 2");
    RecurrentState s;
    s.order = order;
    s.d_head = d_head;
    s.features = order == 1 ? d_head : d_head * (d_head + 1) / 2;
    s.S = Tensor<T>({s.features, d_head});
    if (normalized) s.z = Tensor<T>({s.features});
    s.conv.window = window;
    s.conv.width = 3 * d_head;
    return s;
  }

  std::size_t persisted_scalars() const {
    return S.size() + (z ? z->size() : 0) + conv.stored_scalars();
  }
};

namespace detail {

// S <- e^a S + f v^T; z <- e^a z + f; y = (q_f^T S) / (q_f^T z) or q_f^T S.
template <typename T>
std::vector<T> recurrent_update(RecurrentState<T>& st, std::span<const T> qf,
                                std::span<const T> kf, std::span<const T> v, T a_t) {
  const std::size_t f = st.features, dv = st.d_head;
  const T decay = decay_exp(a_t);
  T* s = st.S.data().data();
  for (std::size_t r = 0; r < f; ++r)
    for (std::size_t c = 0; c < dv; ++c) s[r * dv + c] = decay * s[r * dv + c] + kf[r] * v[c];
  std::vector<T> y(dv, T(0));
  for (std::size_t r = 0; r < f; ++r) {
    if (qf[r] == T(0)) continue;
    for (std::size_t c = 0; c < dv; ++c) y[c] += qf[r] * s[r * dv + c];
  }
  if (st.z) {
    T den{0};
    for (std::size_t r = 0; r < f; ++r) {
      (*st.z)[r] = decay * (*st.z)[r] + kf[r];
      den += qf[r] * (*st.z)[r];
    }
    for (auto& yc : y) yc = guarded_div(yc, den);
  }
  ++st.step;
  return y;
}

}  // namespace detail

// S_t = e^{a_t} S_{t-1} + k_t (dt_t v_t)^T, y_t = q_t^T S_t (normalized by
// q_t^T z_t when the state carries a normalizer).
template <typename T>
std::vector<T> step_first_order(RecurrentState<T>& st, std::span<const T> q,
                                std::span<const T> k, std::span<const T> v, T a_t,
                                std::optional<T> dt_t = std::nullopt) {
  if (st.order != 1) throw PreconditionError("step_first_order needs an order-1 state");
  if (q.size() != st.d_head || k.size() != st.d_head || v.size() != st.d_head)
    throw DimensionError("step_first_order row length mismatch");
  if (!dt_t) return detail::recurrent_update(st, q, k, v, a_t);
  std::vector<T> vs(v.begin(), v.end());
  for (auto& x : vs) x *= *dt_t;
  return detail::recurrent_update<T>(st, q, k, vs, a_t);
}

// Same recurrence over phi2 features:
//   S <- e^{a_t} S + phi2(k) v^T, z <- e^{a_t} z + phi2(k),
//   y = phi2(q)^T S / phi2(q)^T z
template <typename T>
std::vector<T> step_second_order(RecurrentState<T>& st, const Phi2Map& map, std::span<const T> q,
                                 std::span<const T> k, std::span<const T> v, T a_t,
                                 std::optional<T> dt_t = std::nullopt) {
  if (st.order != 2) throw PreconditionError("step_second_order needs an order-2 state");
  if (map.input_dim() != st.d_head) throw DimensionError("phi2 map dimension mismatch");
  std::vector<T> qf(st.features), kf(st.features);
  map.apply<T>(q, qf);
  map.apply<T>(k, kf);
  if (!dt_t) return detail::recurrent_update<T>(st, qf, kf, v, a_t);
  std::vector<T> vs(v.begin(), v.end());
  for (auto& x : vs) x *= *dt_t;
  return detail::recurrent_update<T>(st, qf, kf, vs, a_t);
}

// Growing key/value history for exponential-order variants.
template <typename T = double>
struct KVCache {
  std::size_t d_head = 0;
  bool track_decay = false;
  std::vector<T> keys;          // [length, d_head]
  std::vector<T> values;        // [length, d_head]
  std::vector<T> a_cs_history;  // [length] when track_decay
  ConvRing<T> conv;
  std::size_t length = 0;

  static KVCache make(std::size_t d_head, bool track_decay, std::size_t window) {
    KVCache c;
    c.d_head = d_head;
    c.track_decay = track_decay;
    c.conv.window = window;
    c.conv.width = 3 * d_head;
    return c;
  }

  void append(std::span<const T> k, std::span<const T> v, T a_cs) {
    if (k.size() != d_head || v.size() != d_head) throw DimensionError("kv row length mismatch");
    keys.insert(keys.end(), k.begin(), k.end());
    values.insert(values.end(), v.begin(), v.end());
    if (track_decay) a_cs_history.push_back(a_cs);
    ++length;
  }

  T a_cs(std::size_t j) const { return track_decay ? a_cs_history[j] : T(0); }

  std::size_t persisted_scalars() const {
    return keys.size() + values.size() + (track_decay ? a_cs_history.size() : 0) +
           conv.stored_scalars();
  }
};

// Exponential-score readout over the cache for the newest query:
// score_j = q.k_j + A^CS_t - A^CS_j. Normalized readout streams over blocks
// of block_size entries (0 = whole cache) keeping a running max m and
// accumulators rescaled by e^{m_old - m_new}.
template <typename T>
std::vector<T> step_kv_exponential(const KVCache<T>& cache, std::span<const T> q, T a_cs_t,
                                   std::size_t block_size = 0, bool normalize = true) {
  if (cache.length == 0) throw PreconditionError("step_kv_exponential on an empty cache");
  if (q.size() != cache.d_head) throw DimensionError("query length mismatch");
  const std::size_t d = cache.d_head, len = cache.length;
  const std::size_t block = block_size == 0 ? len : block_size;
  std::vector<T> num(d, T(0)), logits(block);
  T den{0};
  T m = -std::numeric_limits<T>::infinity();
  for (std::size_t b0 = 0; b0 < len; b0 += block) {
    const std::size_t b1 = std::min(len, b0 + block);
    T mb = -std::numeric_limits<T>::infinity();
    for (std::size_t j = b0; j < b1; ++j) {
      T s{0};
      for (std::size_t c = 0; c < d; ++c) s += q[c] * cache.keys[j * d + c];
      logits[j - b0] = s + (a_cs_t - cache.a_cs(j));
      mb = std::max(mb, logits[j - b0]);
    }
    if (!normalize) {
      for (std::size_t j = b0; j < b1; ++j) {
        const T e = std::exp(logits[j - b0]);
        for (std::size_t c = 0; c < d; ++c) num[c] += e * cache.values[j * d + c];
      }
      continue;
    }
    const T m_new = std::max(m, mb);
    const T rescale = std::exp(m - m_new);
    den *= rescale;
    for (auto& x : num) x *= rescale;
    for (std::size_t j = b0; j < b1; ++j) {
      const T e = std::exp(logits[j - b0] - m_new);
      den += e;
      for (std::size_t c = 0; c < d; ++c) num[c] += e * cache.values[j * d + c];
    }
    m = m_new;
  }
  if (normalize)
    for (auto& x : num) x = guarded_div(x, den);
  return num;
}

// Persisted-scalar counts after each token, for head 0 and summed over heads.
struct MemoryTrace {
  std::vector<std::size_t> per_head;
  std::vector<std::size_t> total;
};

template <typename T = double>
struct StatefulResult {
  Tensor<T> out;  // [N, d_model]
  MemoryTrace trace;
};

// Token-by-token execution of any preset: project, conv through the ring
// buffer, step the order-1/order-2 state or the KV cache, then D residual,
// Z gate, output norm and W_out.
template <typename T>
StatefulResult<T> run_stateful(const Tensor<T>& h, const VariantConfig& cfg,
                               const BlockWeights<T>& w, std::size_t block_size = 0) {
  validate_weights(cfg, w);
  if (h.rank() != 2 || h.dim(1) != w.d_model())
    throw DimensionError("stateful input must be [N, d_model]");
  const std::size_t n = h.dim(0), dmodel = w.d_model(), heads = w.heads, dh = w.d_head;
  const std::size_t inner = w.inner();
  const bool exponential = cfg.order == ScoreOrder::exponential;
  const T scale = qk_scale<T>(cfg, dh);

  std::vector<RecurrentState<T>> states;
  std::vector<KVCache<T>> caches;
  std::vector<T> a_cs_running(heads, T(0));
  for (std::size_t hh = 0; hh < heads; ++hh) {
    if (exponential)
      caches.push_back(KVCache<T>::make(dh, cfg.amask != DecayKind::none, cfg.conv_window));
    else
      states.push_back(RecurrentState<T>::make(cfg.order == ScoreOrder::squared ? 2 : 1, dh,
                                               cfg.normalized(), cfg.conv_window));
  }
  std::optional<Phi2Map> map;
  if (cfg.order == ScoreOrder::squared) map.emplace(dh);

  StatefulResult<T> res{Tensor<T>({n, dmodel}), {}};
  std::vector<T> proj(3 * inner), pre(3 * dh), conv(3 * dh), y_d(inner), gated(inner);
  std::vector<T> dt(heads), a(heads), tmp(heads), z(inner);

  for (std::size_t t = 0; t < n; ++t) {
    const T* ht = h.data().data() + t * dmodel;
    detail::gemm(ht, w.w_qkv.data().data(), proj.data(), 1, dmodel, 3 * inner);
    if (cfg.uses_dt()) {
      detail::gemm(ht, w.w_dt->data().data(), tmp.data(), 1, dmodel, heads);
      for (std::size_t hh = 0; hh < heads; ++hh) dt[hh] = softplus(tmp[hh] + (*w.dt_bias)[hh]);
    }
    switch (cfg.amask) {
      case DecayKind::none: std::fill(a.begin(), a.end(), T(0)); break;
      case DecayKind::original:
        for (std::size_t hh = 0; hh < heads; ++hh) a[hh] = -std::exp((*w.a_log)[hh]) * dt[hh];
        break;
      case DecayKind::softplus:
        detail::gemm(ht, w.w_a->data().data(), tmp.data(), 1, dmodel, heads);
        for (std::size_t hh = 0; hh < heads; ++hh) a[hh] = -softplus(tmp[hh]);
        break;
    }

    for (std::size_t hh = 0; hh < heads; ++hh) {
      ConvRing<T>& ring = exponential ? caches[hh].conv : states[hh].conv;
      for (std::size_t part = 0; part < 3; ++part)
        for (std::size_t c = 0; c < dh; ++c) pre[part * dh + c] = proj[part * inner + hh * dh + c];
      for (std::size_t part = 0; part < 3; ++part)
        for (std::size_t c = 0; c < dh; ++c) {
          const std::size_t ch = part * inner + hh * dh + c, li = part * dh + c;
          T o = w.conv.bias ? (*w.conv.bias)[ch] : T(0);
          o += w.conv.weight(ch, 0) * pre[li];
          for (std::size_t s = 1; s < w.conv.window; ++s)
            if (const auto* past = ring.past(s)) o += w.conv.weight(ch, s) * (*past)[li];
          conv[li] = cfg.conv_activation == ConvActivation::silu ? silu(o) : o;
        }
      ring.push(pre);

      std::span<T> q(conv.data(), dh), k(conv.data() + dh, dh), v(conv.data() + 2 * dh, dh);
      std::vector<T> qa(dh), ka(dh), ve(v.begin(), v.end());
      for (std::size_t c = 0; c < dh; ++c) {
        qa[c] = apply_qk_activation(cfg.qk_activation, q[c]);
        ka[c] = apply_qk_activation(cfg.qk_activation, k[c]);
        if (cfg.scale_qk) qa[c] *= scale;
        if (cfg.discretize_values) ve[c] *= dt[hh];
      }

      std::vector<T> y;
      if (exponential) {
        a_cs_running[hh] += a[hh];
        caches[hh].append(ka, ve, a_cs_running[hh]);
        y = step_kv_exponential<T>(caches[hh], qa, a_cs_running[hh], block_size,
                                   cfg.normalized());
      } else if (cfg.order == ScoreOrder::squared) {
        y = step_second_order<T>(states[hh], *map, qa, ka, ve, a[hh]);
      } else {
        y = step_first_order<T>(states[hh], qa, ka, ve, a[hh]);
      }
      for (std::size_t c = 0; c < dh; ++c) {
        y_d[hh * dh + c] = y[c];
        if (cfg.d_residual) y_d[hh * dh + c] += v[c] * (*w.d_skip)[hh * dh + c];
      }
    }

    gated = y_d;
    if (cfg.z_gate) {
      detail::gemm(ht, w.w_z->data().data(), z.data(), 1, dmodel, inner);
      for (std::size_t c = 0; c < inner; ++c) gated[c] *= sigmoid(z[c]);
    }
    if (cfg.norm == NormKind::output_rmsnorm) {
      T ms{0};
      for (auto x : gated) ms += x * x;
      const T inv = T(1) / std::sqrt(ms / T(inner) + T(kRmsNormEps));
      for (std::size_t c = 0; c < inner; ++c) gated[c] = gated[c] * inv * w.rms_gain[c];
    }
    detail::gemm(gated.data(), w.w_out.data().data(), res.out.data().data() + t * dmodel, 1,
                 inner, dmodel);

    std::size_t total = 0;
    for (std::size_t hh = 0; hh < heads; ++hh)
      total += exponential ? caches[hh].persisted_scalars() : states[hh].persisted_scalars();
    res.trace.per_head.push_back(exponential ? caches[0].persisted_scalars()
                                             : states[0].persisted_scalars());
    res.trace.total.push_back(total);
  }
  require_finite(res.out, "run_stateful");
  return res;
}

// Serialized state: five little-endian uint64 header fields (order, d, f,
// window, step) followed by little-endian doubles: S [f*d], z [f] when the
// state is normalized, then the conv ring [(window-1)*3d], oldest row first,
// zero rows for slots not yet filled.
namespace detail {
inline void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int b = 0; b < 8; ++b) out.push_back(static_cast<std::uint8_t>(v >> (8 * b)));
}
inline std::uint64_t get_u64(std::span<const std::uint8_t> in, std::size_t off) {
  std::uint64_t v = 0;
  for (int b = 0; b < 8; ++b) v |= static_cast<std::uint64_t>(in[off + b]) << (8 * b);
  return v;
}
inline void put_f64(std::vector<std::uint8_t>& out, double v) {
  put_u64(out, std::bit_cast<std::uint64_t>(v));
}
inline double get_f64(std::span<const std::uint8_t> in, std::size_t off) {
  return std::bit_cast<double>(get_u64(in, off));
}
}  // namespace detail

inline constexpr std::size_t kStateHeaderBytes = 5 * 8;

template <typename T>
std::vector<std::uint8_t> serialize_state(const RecurrentState<T>& st) {
  std::vector<std::uint8_t> out;
  const std::size_t window = st.conv.window;
  detail::put_u64(out, static_cast<std::uint64_t>(st.order));
  detail::put_u64(out, st.d_head);
  detail::put_u64(out, st.features);
  detail::put_u64(out, window);
  detail::put_u64(out, st.step);
  for (auto x : st.S.data()) detail::put_f64(out, static_cast<double>(x));
  if (st.z)
    for (auto x : st.z->data()) detail::put_f64(out, static_cast<double>(x));
  const std::size_t slots = window - 1, width = st.conv.width;
  for (std::size_t slot = 0; slot < slots; ++slot) {
    // slot 0 is the oldest position
    const std::size_t age = slots - slot;
    const auto* row = st.conv.past(age);
    for (std::size_t c = 0; c < width; ++c)
      detail::put_f64(out, row ? static_cast<double>((*row)[c]) : 0.0);
  }
  return out;
}

template <typename T = double>
RecurrentState<T> deserialize_state(std::span<const std::uint8_t> in) {
  if (in.size() < kStateHeaderBytes || (in.size() - kStateHeaderBytes) % 8 != 0)
    throw DimensionError("serialized state has a malformed length");
  const auto order = static_cast<int>(detail::get_u64(in, 0));
  const std::size_t d = detail::get_u64(in, 8), f = detail::get_u64(in, 16);
  const std::size_t window = detail::get_u64(in, 24), step = detail::get_u64(in, 32);
  if (window < 1 || window > 4) throw DimensionError("serialized state has invalid window");
  const std::size_t payload = (in.size() - kStateHeaderBytes) / 8;
  const std::size_t base = f * d + (window - 1) * 3 * d;
  bool normalized;
  if (payload == base)
    normalized = false;
  else if (payload == base + f)
    normalized = true;
  else
    throw DimensionError("serialized state payload does not match its header");
  RecurrentState<T> st = RecurrentState<T>::make(order, d, normalized, window);
  if (st.features != f) throw DimensionError("serialized feature count does not match order");
  std::size_t off = kStateHeaderBytes;
  for (auto& x : st.S.data()) {
    x = static_cast<T>(detail::get_f64(in, off));
    off += 8;
  }
  if (st.z)
    for (auto& x : st.z->data()) {
      x = static_cast<T>(detail::get_f64(in, off));
      off += 8;
    }
  const std::size_t slots = window - 1, filled = std::min(step, slots);
  std::vector<std::vector<T>> rows(slots, std::vector<T>(3 * d));
  for (auto& r : rows)
    for (auto& x : r) {
      x = static_cast<T>(detail::get_f64(in, off));
      off += 8;
    }
  for (std::size_t i = slots - filled; i < slots; ++i) st.conv.rows.push_front(rows[i]);
  st.step = step;
  return st;
}

}  // namespace seqmix
