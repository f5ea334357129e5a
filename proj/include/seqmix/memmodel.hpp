#pragma once

#include <cstdint>
#include <limits>
#include <optional>
#include <ostream>
#include <random>
#include <vector>

#include "seqmix/recurrence.hpp"

namespace seqmix {

// Number of degree-p monomials in d variables, binomial(p + d - 1, d - 1),
// computed exactly; throws RangeError when it does not fit in 64 bits.
inline std::uint64_t term_count(std::uint64_t d, std::uint64_t p = 2) {
  if (d < 1) throw DomainError("term_count needs d >= 1");
  // binomial(p + d - 1, p) with the smaller of the two lower arguments
  const std::uint64_t n = p + d - 1;
  const std::uint64_t k = std::min(p, d - 1);
  unsigned __int128 acc = 1;
  for (std::uint64_t i = 1; i <= k; ++i) {
    acc = acc * (n - k + i) / i;
    if (acc > std::numeric_limits<std::uint64_t>::max())
      throw RangeError("term_count overflows 64 bits");
  }
  return static_cast<std::uint64_t>(acc);
}

namespace detail {
inline std::uint64_t checked_mul(std::uint64_t a, std::uint64_t b) {
  if (a != 0 && b > std::numeric_limits<std::uint64_t>::max() / a)
    throw RangeError("memory count overflows 64 bits");
  return a * b;
}
}  // namespace detail

// Per-head scalar counts.
inline std::uint64_t kv_cache_elems(std::uint64_t d, std::uint64_t n) {
  return detail::checked_mul(detail::checked_mul(2, n), d);
}
// KV cache plus one cumulative-decay scalar per cached token.
inline std::uint64_t kv_decay_elems(std::uint64_t d, std::uint64_t n) {
  return kv_cache_elems(d, n) + n;
}
// d(d+1)^2/2 + 3d: phi2 state, its normalizer and one fused-QKV conv row.
inline std::uint64_t second_order_state_elems(std::uint64_t d) {
  const std::uint64_t f = term_count(d, 2);
  return detail::checked_mul(f, d) + f + detail::checked_mul(3, d);
}

// Smallest N with 2Nd > d(d+1)^2/2 + 3d, i.e. 4N > (d+1)^2 + 6.
inline std::uint64_t crossover(std::uint64_t d) {
  if (d < 1) throw DomainError("crossover needs d >= 1");
  const std::uint64_t rhs = detail::checked_mul(d + 1, d + 1) + 6;
  const std::uint64_t n = rhs / 4 + 1;
  const std::uint64_t state = second_order_state_elems(d);
  if (!(kv_cache_elems(d, n) > state) || (n > 1 && kv_cache_elems(d, n - 1) > state))
    throw OracleError("crossover closed form disagrees with direct scan");
  return n;
}

struct MemcurveRow {
  std::uint64_t n = 0;
  std::uint64_t kv = 0;
  std::uint64_t state2 = 0;
  std::uint64_t kv_e = 0;
  std::optional<std::uint64_t> measured_kv;
  std::optional<std::uint64_t> measured_state;

  bool matches() const {
    return (!measured_kv || *measured_kv == kv) && (!measured_state || *measured_state == state2);
  }
};

inline std::vector<MemcurveRow> memcurve(std::uint64_t d, std::uint64_t n_max) {
  if (n_max < 1) throw DomainError("memcurve needs N_max >= 1");
  const std::uint64_t state = second_order_state_elems(d);
  std::vector<MemcurveRow> rows;
  rows.reserve(n_max);
  for (std::uint64_t n = 1; n <= n_max; ++n)
    rows.push_back({n, kv_cache_elems(d, n), state, kv_decay_elems(d, n), {}, {}});
  return rows;
}

// Single-head stateful runs (d_model = d_head = d) of the softmax and
// twomamba presets over n_max random tokens; fills the measured columns.
inline void attach_measured(std::vector<MemcurveRow>& rows, std::uint64_t d, std::uint64_t seed) {
  const std::size_t n = rows.size(), dd = static_cast<std::size_t>(d);
  std::mt19937_64 rng(seed);
  Tensor<double> h({n, dd});
  std::normal_distribution<double> nd(0.0, 1.0);
  for (auto& x : h.data()) x = nd(rng);
  auto trace = [&](const char* name) {
    const VariantConfig cfg = preset(name);
    const auto w = init_block_weights<double>(cfg, dd, 1, dd, rng);
    return run_stateful(h, cfg, w).trace.per_head;
  };
  const auto kv = trace("softmax");
  const auto st = trace("twomamba");
  for (std::size_t i = 0; i < n; ++i) {
    rows[i].measured_kv = kv[i];
    rows[i].measured_state = st[i];
  }
}

// Index of the first row whose KV count strictly exceeds the state count.
inline std::optional<std::size_t> first_exceedance(const std::vector<MemcurveRow>& rows) {
  for (std::size_t i = 0; i < rows.size(); ++i)
    if (rows[i].kv > rows[i].state2) return i;
  return std::nullopt;
}

inline constexpr const char* kMemcurveHeader =
    "N,kv_elems,state2_elems,measured_kv,measured_state,match,kv_e_elems";

// Counts are scalar elements; bytes_per_elem > 1 rescales every count column.
inline void write_memcurve_csv(std::ostream& os, const std::vector<MemcurveRow>& rows,
                               std::uint64_t bytes_per_elem = 1) {
  os << kMemcurveHeader << '\n';
  auto opt = [&](const std::optional<std::uint64_t>& v) {
    if (v) os << *v * bytes_per_elem;
  };
  for (const auto& r : rows) {
    os << r.n << ',' << r.kv * bytes_per_elem << ',' << r.state2 * bytes_per_elem << ',';
    opt(r.measured_kv);
    os << ',';
    opt(r.measured_state);
    os << ',' << (r.measured_kv || r.measured_state ? (r.matches() ? "1" : "0") : "") << ','
       << r.kv_e * bytes_per_elem << '\n';
  }
}

}  // namespace seqmix
