#pragma once

#include <array>
#include <cmath>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "seqmix/backward.hpp"
#include "seqmix/memmodel.hpp"
#include "seqmix/recurrence.hpp"

namespace seqmix {

inline constexpr double kGradTolerance = 1e-6;
inline constexpr double kEquivalenceTolerance = 1e-9;
inline constexpr double kPhi2Tolerance = 1e-12;
inline constexpr double kIdentityTolerance = 1e-12;
inline constexpr double kReductionTolerance = 1e-10;
inline constexpr double kComputeOrderTolerance = 1e-12;
inline constexpr double kRowSumTolerance = 1e-10;
inline constexpr double kBlockingTolerance = 1e-12;

template <typename T = double>
Tensor<T> random_normal(Shape s, std::mt19937_64& rng, double stddev = 1.0) {
  std::normal_distribution<double> nd(0.0, stddev);
  Tensor<T> t(std::move(s));
  for (auto& x : t.data()) x = static_cast<T>(nd(rng));
  return t;
}

// ---------------------------------------------------------------- gradients

enum class KernelId { linear, linear_smnorm, linear_amask, squared_amask, twomamba, twomamba_e };

inline constexpr std::array<std::string_view, 6> kKernelNames = {
    "linear", "linear_smnorm", "linear_amask", "squared_amask", "twomamba", "twomamba_e"};

inline KernelId parse_kernel(std::string_view s) {
  for (std::size_t i = 0; i < kKernelNames.size(); ++i)
    if (s == kKernelNames[i]) return static_cast<KernelId>(i);
  std::string valid;
  for (auto n : kKernelNames) valid += std::string(valid.empty() ? "" : ", ") + std::string(n);
  throw ConfigError("unknown kernel '" + std::string(s) + "'; valid kernels: " + valid + ", all");
}

inline std::string_view kernel_name(KernelId k) { return kKernelNames[static_cast<std::size_t>(k)]; }

inline bool kernel_has_decay(KernelId k) {
  return k != KernelId::linear && k != KernelId::linear_smnorm;
}

// Forward of one kernel from (Q, K, V[, per-position decay logits]).
inline Tensor<double> kernel_forward(KernelId k, const std::vector<Tensor<double>>& p) {
  const auto& q = p[0];
  const auto& key = p[1];
  const auto& v = p[2];
  const DecayMatrix<double> dm =
      build_decay_matrix(kernel_has_decay(k) ? DecayLogits<double>{p[3], DecayKind::softplus}
                                             : zero_decay<double>(q.dim(0), q.dim(1)));
  switch (k) {
    case KernelId::linear: return attention_kernel(q, key, v, dm, ScoreOrder::linear, false);
    case KernelId::linear_smnorm: return attention_kernel(q, key, v, dm, ScoreOrder::linear, true);
    case KernelId::linear_amask: return attention_kernel(q, key, v, dm, ScoreOrder::linear, false);
    case KernelId::squared_amask: return attention_kernel(q, key, v, dm, ScoreOrder::squared, false);
    case KernelId::twomamba: return attention_kernel(q, key, v, dm, ScoreOrder::squared, true);
    case KernelId::twomamba_e: return attention_kernel(q, key, v, dm, ScoreOrder::exponential, true);
  }
  throw ConfigError("unhandled kernel");
}

inline GradBundle<double> kernel_gradient(KernelId k, const std::vector<Tensor<double>>& p,
                                          const Tensor<double>& d_out) {
  const auto& q = p[0];
  const auto& key = p[1];
  const auto& v = p[2];
  const DecayMatrix<double> dm =
      kernel_has_decay(k) ? build_decay_matrix(DecayLogits<double>{p[3], DecayKind::softplus})
                          : build_decay_matrix(zero_decay<double>(q.dim(0), q.dim(1)));
  switch (k) {
    case KernelId::linear: return grad_linear(q, key, v, d_out);
    case KernelId::linear_smnorm: return grad_linear_smnorm(q, key, v, d_out);
    case KernelId::linear_amask: return grad_linear_amask(q, key, v, dm, d_out);
    case KernelId::squared_amask: return grad_squared_amask(q, key, v, dm, d_out);
    case KernelId::twomamba: return grad_twomamba(q, key, v, dm, d_out);
    case KernelId::twomamba_e: return grad_twomamba_e(q, key, v, dm, d_out);
  }
  throw ConfigError("unhandled kernel");
}

struct GradCheckResult {
  KernelId kernel{};
  std::size_t instance = 0;
  double rel_dq = 0, rel_dk = 0, rel_dv = 0;
  std::optional<double> rel_da;

  double worst() const { return std::max({rel_dq, rel_dk, rel_dv, rel_da.value_or(0.0)}); }
  bool pass(double tol = kGradTolerance) const { return worst() < tol; }
};

// Random instance: Gaussian Q, K, V, dO; decay logits -softplus(N(0,1)).
// The linear softmax-normalized kernel needs a non-negative score image, so
// its Q and K are drawn from U[0.1, 1].
inline GradCheckResult gradcheck_instance(KernelId k, std::size_t heads, std::size_t n,
                                          std::size_t d, std::mt19937_64& rng,
                                          std::size_t instance = 0) {
  std::vector<Tensor<double>> p;
  if (k == KernelId::linear_smnorm) {
    std::uniform_real_distribution<double> ud(0.1, 1.0);
    for (int i = 0; i < 2; ++i) {
      Tensor<double> t({heads, n, d});
      for (auto& x : t.data()) x = ud(rng);
      p.push_back(std::move(t));
    }
  } else {
    p.push_back(random_normal({heads, n, d}, rng));
    p.push_back(random_normal({heads, n, d}, rng));
  }
  p.push_back(random_normal({heads, n, d}, rng));
  if (kernel_has_decay(k)) {
    Tensor<double> a = random_normal({heads, n}, rng);
    for (auto& x : a.data()) x = -softplus(x);
    p.push_back(std::move(a));
  }
  const Tensor<double> d_out = random_normal({heads, n, d}, rng);
  const GradBundle<double> g = kernel_gradient(k, p, d_out);
  const auto fd = finite_diff_oracle([k](const auto& ps) { return kernel_forward(k, ps); }, p,
                                     d_out);
  GradCheckResult r{k, instance, relative_error(g.dQ, fd[0]), relative_error(g.dK, fd[1]),
                    relative_error(g.dV, fd[2]), std::nullopt};
  if (kernel_has_decay(k)) r.rel_da = relative_error(g.dA_logits, fd[3]);
  return r;
}

// ------------------------------------------------------------- equivalence

struct TokenDeviation {
  std::size_t token = 0;
  double max_abs = 0.0;
  double rel = 0.0;
};

struct EquivalenceResult {
  std::vector<TokenDeviation> tokens;
  double worst_rel = 0.0;
  bool pass(double tol = kEquivalenceTolerance) const { return worst_rel < tol; }
};

// Per-token relative deviation between two [N, d] outputs.
template <typename T>
EquivalenceResult compare_rows(const Tensor<T>& a, const Tensor<T>& b) {
  a.require_same_shape(b, "compare_rows");
  EquivalenceResult r;
  const std::size_t n = a.dim(0);
  for (std::size_t t = 0; t < n; ++t) {
    auto ra = a.row(t);
    auto rb = b.row(t);
    double diff = 0.0, scale = 0.0;
    for (std::size_t c = 0; c < ra.size(); ++c) {
      diff = std::max(diff, static_cast<double>(std::abs(ra[c] - rb[c])));
      scale = std::max({scale, static_cast<double>(std::abs(ra[c])),
                        static_cast<double>(std::abs(rb[c]))});
    }
    const double rel = diff / (scale + 1e-8);
    r.tokens.push_back({t, diff, rel});
    r.worst_rel = std::max(r.worst_rel, rel);
  }
  return r;
}

// Quadratic reference vs token-by-token stateful execution for one preset,
// unit-Gaussian input, freshly initialized weights.
template <typename T = double>
EquivalenceResult equivalence_run(const VariantConfig& cfg, std::size_t heads, std::size_t n,
                                  std::size_t d_head, std::uint64_t seed,
                                  std::size_t block_size = 0) {
  std::mt19937_64 rng(seed);
  const std::size_t dmodel = heads * d_head;
  const auto w = init_block_weights<T>(cfg, dmodel, heads, d_head, rng);
  const Tensor<T> h = random_normal<T>({n, dmodel}, rng);
  return compare_rows(variant_forward(h, cfg, w), run_stateful(h, cfg, w, block_size).out);
}

// -------------------------------------------------------------- identities

struct Phi2CheckResult {
  std::size_t d = 0, feature_len = 0, pairs = 0;
  double rel = 0.0;           // relative_error over the vector of all pair results
  double worst_scaled = 0.0;  // |phi.phi - (x.y)^2| / (|x|.|y|)^2
  double worst_plain = 0.0;   // |phi.phi - (x.y)^2| / max(|phi.phi|, (x.y)^2)
  bool length_ok = false;
  bool pass(double tol = kPhi2Tolerance) const {
    return length_ok && rel < tol && worst_scaled < tol;
  }
};

// rel applies the tensor metric to the vector of per-pair results. The scaled
// error divides by (|x|.|y|)^2, the magnitude of the terms being summed. The
// per-pair plain relative error is unbounded as x.y -> 0 in any floating
// point evaluation and is reported for information.
inline Phi2CheckResult phi2_check(std::size_t d, std::size_t pairs, std::mt19937_64& rng) {
  const Phi2Map map(d);
  Phi2CheckResult r{d, map.feature_dim(), pairs, 0.0, 0.0, 0.0,
                    map.feature_dim() == d * (d + 1) / 2};
  Tensor<double> lhs_all({pairs}), rhs_all({pairs});
  std::normal_distribution<double> nd(0.0, 1.0);
  std::vector<double> x(d), y(d), fx(map.feature_dim()), fy(map.feature_dim());
  for (std::size_t p = 0; p < pairs; ++p) {
    for (auto& v : x) v = nd(rng);
    for (auto& v : y) v = nd(rng);
    map.apply<double>(x, fx);
    map.apply<double>(y, fy);
    double lhs = 0.0, dot = 0.0, absdot = 0.0;
    for (std::size_t i = 0; i < fx.size(); ++i) lhs += fx[i] * fy[i];
    for (std::size_t i = 0; i < d; ++i) {
      dot += x[i] * y[i];
      absdot += std::abs(x[i] * y[i]);
    }
    const double rhs = dot * dot, err = std::abs(lhs - rhs);
    lhs_all[p] = lhs;
    rhs_all[p] = rhs;
    r.worst_scaled = std::max(r.worst_scaled, err / (absdot * absdot));
    const double mag = std::max(std::abs(lhs), rhs);
    if (mag > 0.0) r.worst_plain = std::max(r.worst_plain, err / mag);
  }
  r.rel = relative_error(lhs_all, rhs_all);
  return r;
}

inline double logsigmoid_identity_deviation() {
  return logsigmoid_softplus_identity_check(uniform_grid(-30.0, 30.0, 0.01));
}

// ---------------------------------------------------------------- memory

struct MemoryCheckResult {
  std::uint64_t crossover = 0;
  std::optional<std::uint64_t> first_exceedance_n;
  std::size_t mismatched_rows = 0;
  std::vector<MemcurveRow> rows;
  bool pass(std::uint64_t expected_crossover) const {
    return crossover == expected_crossover && first_exceedance_n == expected_crossover &&
           mismatched_rows == 0;
  }
};

inline MemoryCheckResult memory_check(std::uint64_t d, std::uint64_t n_max, std::uint64_t seed,
                                      bool measured = true) {
  MemoryCheckResult r;
  r.crossover = crossover(d);
  r.rows = memcurve(d, n_max);
  if (measured) attach_measured(r.rows, d, seed);
  for (const auto& row : r.rows)
    if (!row.matches()) ++r.mismatched_rows;
  if (auto i = first_exceedance(r.rows)) r.first_exceedance_n = r.rows[*i].n;
  return r;
}

// ------------------------------------------------------------- reductions

// dphi2(x) -> dx through the pair map.
inline Tensor<double> phi2_pullback(const Phi2Map& map, const Tensor<double>& x,
                                    const Tensor<double>& dphi) {
  Tensor<double> dx(x.shape());
  const std::size_t rows = x.size() / map.input_dim(), d = map.input_dim(), f = map.feature_dim();
  const auto& pairs = map.index_table();
  const auto& coeffs = map.coeffs();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t p = 0; p < f; ++p) {
      const auto [i, j] = pairs[p];
      const double g = dphi[r * f + p] * coeffs[p];
      dx[r * d + i] += g * x[r * d + j];
      dx[r * d + j] += g * x[r * d + i];
    }
  return dx;
}

inline Tensor<double> phi2_rows(const Phi2Map& map, const Tensor<double>& x) {
  Shape s = x.shape();
  s.back() = map.feature_dim();
  Tensor<double> out(s);
  const std::size_t rows = x.size() / map.input_dim();
  for (std::size_t r = 0; r < rows; ++r)
    map.apply<double>(std::span<const double>(x.data()).subspan(r * map.input_dim(), map.input_dim()),
                      std::span<double>(out.data()).subspan(r * map.feature_dim(), map.feature_dim()));
  return out;
}

struct ReductionResult {
  double twomamba_block_fwd = 0.0;   // block with zero decay, window 1 vs phi2 linear attention
  double twomamba_kernel_grad = 0.0; // grad_twomamba(zero decay) vs phi2 chain of grad_linear_smnorm
  double twomamba_e_fwd = 0.0;       // exponential kernel, zero decay vs softmax_attention
  double twomamba_e_grad = 0.0;      // grad_twomamba_e(zero decay) vs grad_softmax
  double worst() const {
    return std::max({twomamba_block_fwd, twomamba_kernel_grad, twomamba_e_fwd, twomamba_e_grad});
  }
  bool pass(double tol = kReductionTolerance) const { return worst() < tol; }
};

inline ReductionResult reduction_check(std::size_t heads, std::size_t n, std::size_t d_head,
                                       std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  ReductionResult r;
  const Phi2Map map(d_head);
  const std::size_t dmodel = heads * d_head, inner = heads * d_head;

  VariantConfig cfg = preset("twomamba");
  cfg.amask = DecayKind::none;
  cfg.conv_window = 1;
  const auto w = init_block_weights<double>(cfg, dmodel, heads, d_head, rng);
  const Tensor<double> h = random_normal({n, dmodel}, rng);
  const Tensor<double> proj = matmul(h, w.w_qkv);
  const Tensor<double> q = split_heads(proj, 0, heads, d_head);
  const Tensor<double> k = split_heads(proj, inner, heads, d_head);
  const Tensor<double> v = split_heads(proj, 2 * inner, heads, d_head);
  const Tensor<double> ref = matmul(
      merge_heads(linear_attention_qk_first(phi2_rows(map, q), phi2_rows(map, k), v,
                                            QkActivation::none)),
      w.w_out);
  r.twomamba_block_fwd = relative_error(variant_forward(h, cfg, w), ref);

  const Tensor<double> kq = random_normal({heads, n, d_head}, rng);
  const Tensor<double> kk = random_normal({heads, n, d_head}, rng);
  const Tensor<double> kv = random_normal({heads, n, d_head}, rng);
  const Tensor<double> d_out = random_normal({heads, n, d_head}, rng);
  const DecayMatrix<double> none = build_decay_matrix(zero_decay<double>(heads, n));

  const GradBundle<double> g2 = grad_twomamba(kq, kk, kv, none, d_out);
  const Tensor<double> fq = phi2_rows(map, kq), fk = phi2_rows(map, kk);
  const GradBundle<double> gl = grad_linear_smnorm(fq, fk, kv, d_out);
  r.twomamba_kernel_grad = std::max({relative_error(g2.dQ, phi2_pullback(map, kq, gl.dQ)),
                                     relative_error(g2.dK, phi2_pullback(map, kk, gl.dK)),
                                     relative_error(g2.dV, gl.dV)});

  r.twomamba_e_fwd =
      relative_error(attention_kernel(kq, kk, kv, none, ScoreOrder::exponential, true),
                     softmax_attention(kq, kk, kv));
  const GradBundle<double> ge = grad_twomamba_e(kq, kk, kv, none, d_out);
  const GradBundle<double> gs = grad_softmax(kq, kk, kv, d_out);
  r.twomamba_e_grad = std::max({relative_error(ge.dQ, gs.dQ), relative_error(ge.dK, gs.dK),
                                relative_error(ge.dV, gs.dV)});
  return r;
}

// -------------------------------------------------------- compute order

inline double compute_order_check(std::size_t heads, std::size_t n, std::size_t d,
                                  std::mt19937_64& rng) {
  const Tensor<double> q = random_normal({heads, n, d}, rng);
  const Tensor<double> k = random_normal({heads, n, d}, rng);
  const Tensor<double> v = random_normal({heads, n, d}, rng);
  return relative_error(linear_attention_qk_first(q, k, v, QkActivation::relu),
                        linear_attention_kv_first(q, k, v, QkActivation::relu));
}

// --------------------------------------------------------- normalization

struct NormalizationResult {
  double worst_row_sum_dev = 0.0;
  double most_negative = 0.0;
  std::size_t nonzero_upper = 0;
  std::size_t zero_mass_rows = 0;
  std::size_t rows = 0;
  bool pass(double tol = kRowSumTolerance) const {
    return worst_row_sum_dev <= tol && most_negative >= 0.0 && nonzero_upper == 0;
  }
};

// Normalized score matrices of a block's actual Q, K and decay for a
// softmax-normalized preset. Rows with zero total mass (possible only with
// relu features) are reported separately.
inline void normalization_check(const VariantConfig& cfg, std::size_t heads, std::size_t n,
                                std::size_t d_head, std::uint64_t seed, NormalizationResult& r) {
  if (!cfg.normalized()) throw ConfigError("normalization check needs a softmax_norm preset");
  std::mt19937_64 rng(seed);
  const auto w = init_block_weights<double>(cfg, heads * d_head, heads, d_head, rng);
  const Tensor<double> h = random_normal({n, heads * d_head}, rng);
  const BlockTrace<double> tr = variant_forward_trace(h, cfg, w);
  const Tensor<double> s = attention_weights(tr.q, tr.k, tr.dm, cfg.order, true);
  for (std::size_t row = 0; row < heads * n; ++row) {
    const std::size_t i = row % n;
    auto wi = s.row(row);
    double sum = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      if (j > i) {
        if (wi[j] != 0.0) ++r.nonzero_upper;
        continue;
      }
      sum += wi[j];
      r.most_negative = std::min(r.most_negative, wi[j]);
    }
    ++r.rows;
    if (sum == 0.0) {
      ++r.zero_mass_rows;
      continue;
    }
    r.worst_row_sum_dev = std::max(r.worst_row_sum_dev, std::abs(sum - 1.0));
  }
}

// -------------------------------------------------------------- blocking

// Max relative deviation of twomamba_e stateful outputs across block sizes,
// against the single-pass (block = full cache) result.
inline double blocking_check(std::size_t heads, std::size_t n, std::size_t d_head,
                             std::uint64_t seed, const std::vector<std::size_t>& blocks) {
  std::mt19937_64 rng(seed);
  const VariantConfig cfg = preset("twomamba_e");
  const auto w = init_block_weights<double>(cfg, heads * d_head, heads, d_head, rng);
  const Tensor<double> h = random_normal({n, heads * d_head}, rng);
  const Tensor<double> full = run_stateful(h, cfg, w, 0).out;
  double worst = 0.0;
  for (auto b : blocks) worst = std::max(worst, compare_rows(run_stateful(h, cfg, w, b).out, full).worst_rel);
  return worst;
}

}  // namespace seqmix
