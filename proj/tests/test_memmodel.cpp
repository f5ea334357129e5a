#include <gtest/gtest.h>

#include <set>
#include <sstream>
#include <vector>

#include "seqmix/checks.hpp"
#include "seqmix/memmodel.hpp"

using namespace seqmix;

namespace {

// Oracle: count degree-2 monomials by enumerating sorted index multisets.
std::uint64_t enumerate_pairs(std::uint64_t d) {
  std::set<std::pair<std::uint64_t, std::uint64_t>> s;
  for (std::uint64_t i = 0; i < d; ++i)
    for (std::uint64_t j = 0; j < d; ++j) s.insert({std::min(i, j), std::max(i, j)});
  return s.size();
}

// Oracle: linear scan for the first N where the cache outgrows the state.
std::uint64_t crossover_scan(std::uint64_t d) {
  const std::uint64_t state = d * (d + 1) * (d + 1) / 2 + 3 * d;
  for (std::uint64_t n = 1;; ++n)
    if (2 * n * d > state) return n;
}

}  // namespace

TEST(TermCount, KnownValuesAndEnumeration) {
  EXPECT_EQ(term_count(64), 2080u);
  EXPECT_EQ(term_count(1), 1u);
  EXPECT_EQ(term_count(5), 15u);
  EXPECT_EQ(term_count(4, 3), 20u);
  for (std::uint64_t d = 1; d <= 40; ++d) EXPECT_EQ(term_count(d), enumerate_pairs(d)) << d;
}

TEST(TermCount, ErrorsOnBadInput) {
  EXPECT_THROW(term_count(0), DomainError);
  EXPECT_THROW(term_count(1u << 20, 8), RangeError);
}

TEST(StateSize, ClosedFormAtD64) {
  EXPECT_EQ(second_order_state_elems(64), 64u * 65 * 65 / 2 + 3 * 64);
  EXPECT_EQ(second_order_state_elems(64), 135392u);
  EXPECT_EQ(kv_cache_elems(64, 10), 1280u);
  EXPECT_EQ(kv_decay_elems(64, 10), 1290u);
}

TEST(Crossover, KnownValues) {
  EXPECT_EQ(crossover(64), 1058u);
  EXPECT_EQ(crossover(1), 3u);
  EXPECT_EQ(crossover(2), 4u);
  EXPECT_THROW(crossover(0), DomainError);
}

TEST(Crossover, MatchesScanAndIsMonotone) {
  std::uint64_t prev = 0;
  for (std::uint64_t d = 1; d <= 4096; d += (d < 128 ? 1 : 37)) {
    const auto c = crossover(d);
    EXPECT_EQ(c, crossover_scan(d)) << d;
    EXPECT_GE(c, prev);
    prev = c;
  }
}

TEST(Memcurve, RowsAndFirstExceedance) {
  const auto rows = memcurve(64, 2048);
  ASSERT_EQ(rows.size(), 2048u);
  EXPECT_EQ(rows[0].n, 1u);
  EXPECT_EQ(rows[0].kv, 128u);
  EXPECT_EQ(rows.back().kv, 2u * 2048 * 64);
  const auto i = first_exceedance(rows);
  ASSERT_TRUE(i.has_value());
  EXPECT_EQ(rows[*i].n, 1058u);
  EXPECT_FALSE(first_exceedance(memcurve(64, 1057)).has_value());
  EXPECT_THROW(memcurve(64, 0), DomainError);
}

TEST(Memcurve, MeasuredCountsMatchModelAtSmallD) {
  const auto r = memory_check(4, 40, 3);
  EXPECT_EQ(r.mismatched_rows, 0u);
  EXPECT_TRUE(r.pass(crossover(4)));
  EXPECT_EQ(*r.first_exceedance_n, crossover(4));
}

TEST(Memcurve, CsvLayoutAndByteScaling) {
  auto rows = memcurve(2, 2);
  rows[0].measured_kv = 4;
  rows[0].measured_state = rows[0].state2;
  std::ostringstream os;
  write_memcurve_csv(os, rows, 8);
  EXPECT_EQ(os.str(), std::string(kMemcurveHeader) + "\n1,32,120,32,120,1,40\n2,64,120,,,,80\n");
}
