#include <doctest.h>

#include <algorithm>
#include <numeric>
#include <set>

#include "attmask/error.hpp"
#include "attmask/masking.hpp"
#include "attmask/ops.hpp"

using attmask::MaskPolicy;
using attmask::MaskVector;
using attmask::Rng;

namespace {

MaskVector from_bits(std::initializer_list<int> bits) {
  MaskVector m(bits.size());
  std::size_t i = 0;
  for (const int b : bits) m.bits[i++] = static_cast<std::uint8_t>(b);
  return m;
}

// 4-connected components of the set bits on a g x g grid.
int components(const MaskVector& m, int g) {
  std::vector<int> seen(m.size(), 0);
  int count = 0;
  for (std::size_t s = 0; s < m.size(); ++s) {
    if (!m.bits[s] || seen[s]) continue;
    ++count;
    std::vector<std::size_t> stack{s};
    seen[s] = 1;
    while (!stack.empty()) {
      const auto c = stack.back();
      stack.pop_back();
      const int y = static_cast<int>(c) / g, x = static_cast<int>(c) % g;
      const int dy[4] = {-1, 1, 0, 0}, dx[4] = {0, 0, -1, 1};
      for (int k = 0; k < 4; ++k) {
        const int ny = y + dy[k], nx = x + dx[k];
        if (ny < 0 || nx < 0 || ny >= g || nx >= g) continue;
        const auto nb = static_cast<std::size_t>(ny * g + nx);
        if (m.bits[nb] && !seen[nb]) {
          seen[nb] = 1;
          stack.push_back(nb);
        }
      }
    }
  }
  return count;
}

}  // namespace

TEST_SUITE("masking") {

TEST_CASE("strategy names round-trip") {
  for (const auto s : attmask::kAllStrategies) CHECK(attmask::parse_strategy(attmask::strategy_name(s)) == s);
  CHECK(attmask::parse_strategy("blockwise") == attmask::MaskStrategy::Blockwise);
  CHECK_THROWS_AS(attmask::parse_strategy("bogus"), attmask::ConfigError);
}

TEST_CASE("masked_count floors") {
  CHECK(attmask::masked_count(64, 0.5) == 32);
  CHECK(attmask::masked_count(196, 0.3) == 58);
  CHECK(attmask::masked_count(100, 0.29) == 29);
  CHECK(attmask::masked_count(16, 0.1) == 1);
  CHECK(attmask::masked_count(16, 1.0) == 16);
}

TEST_CASE("policy validation") {
  MaskPolicy p;
  CHECK_NOTHROW(p.validate());
  p.ratio_min = 0.6;
  CHECK_THROWS(p.validate());
  p = MaskPolicy{};
  p.probability = 1.5;
  CHECK_THROWS(p.validate());
}

TEST_CASE("sample_ratio edge cases and Monte-Carlo moments") {
  Rng rng(1);
  MaskPolicy never;
  never.probability = 0;
  for (int i = 0; i < 100; ++i) CHECK_FALSE(attmask::sample_ratio(never, rng).apply);
  MaskPolicy fixed;
  fixed.probability = 1;
  fixed.ratio_min = fixed.ratio_max = 0.3;
  for (int i = 0; i < 100; ++i) CHECK(attmask::sample_ratio(fixed, rng).ratio == 0.3);
  // Binomial sd of the rate is 0.005 and the sd of mean r over ~5000 draws is
  // about 0.0016, so the bounds are 4 and 6 standard deviations wide.
  MaskPolicy def;
  int applied = 0;
  double rsum = 0;
  for (int i = 0; i < 10000; ++i) {
    const auto d = attmask::sample_ratio(def, rng);
    if (d.apply) {
      ++applied;
      rsum += d.ratio;
      CHECK(d.ratio >= 0.1);
      CHECK(d.ratio <= 0.5);
    }
  }
  CHECK(std::abs(applied / 10000.0 - 0.5) < 0.02);
  CHECK(std::abs(rsum / applied - 0.3) < 0.01);
}

TEST_CASE("random mask cardinality") {
  Rng rng(2);
  CHECK(attmask::random_mask(16, 0.0, rng).count() == 0);
  CHECK(attmask::random_mask(16, 1.0, rng).count() == 16);
  for (int i = 0; i < 50; ++i) CHECK(attmask::random_mask(64, 0.5, rng).count() == 32);
}

TEST_CASE("block-wise cardinality and contiguity") {
  Rng rng(3);
  CHECK(attmask::blockwise_mask(64, 0.0, rng).count() == 0);
  for (double r : {0.1, 0.2, 0.3, 0.4, 0.5}) {
    for (int i = 0; i < 200; ++i) {
      REQUIRE(attmask::blockwise_mask(64, r, rng).count() == attmask::masked_count(64, r));
    }
  }
  CHECK_THROWS_AS(attmask::blockwise_mask(10, 0.5, rng), attmask::ParameterError);
  // Blocks should form fewer connected pieces than scattered tokens.
  double block_components = 0, random_components = 0;
  for (int i = 0; i < 1000; ++i) {
    block_components += components(attmask::blockwise_mask(64, 0.3, rng), 8);
    random_components += components(attmask::random_mask(64, 0.3, rng), 8);
  }
  CHECK(block_components < random_components);
}

TEST_CASE("attmask-high and low hand cases") {
  const std::vector<double> attn{0.1, 0.4, 0.2, 0.3};
  CHECK(attmask::attmask_high<double>(attn, 0.5) == from_bits({0, 1, 0, 1}));
  CHECK(attmask::attmask_low<double>(attn, 0.5) == from_bits({1, 0, 1, 0}));
  CHECK(attmask::attmask_high<double>(attn, 0.0).count() == 0);
  CHECK(attmask::attmask_low<double>(attn, 1.0).count() == 4);
  // Ties go to the lower index: the first two of eight equal values.
  const std::vector<double> flat(8, 0.125);
  CHECK(attmask::attmask_high<double>(flat, 0.25) == from_bits({1, 1, 0, 0, 0, 0, 0, 0}));
}

TEST_CASE("high and low are disjoint for distinct values") {
  Rng rng(4);
  for (int t = 0; t < 200; ++t) {
    std::vector<double> a(20);
    for (auto& v : a) v = rng.uniform();
    const auto hi = attmask::attmask_high<double>(a, 0.5);
    const auto lo = attmask::attmask_low<double>(a, 0.5);
    for (std::size_t i = 0; i < 20; ++i) CHECK_FALSE((hi.bits[i] && lo.bits[i]));
  }
}

TEST_CASE("attmask-hint") {
  Rng rng(5);
  const std::vector<double> attn{0.05, 0.3, 0.02, 0.2, 0.08, 0.1, 0.04, 0.06, 0.1, 0.05};
  const auto high = attmask::attmask_high<double>(attn, 0.5);
  CHECK(attmask::attmask_hint<double>(attn, 0.5, 0.0, rng) == high);
  CHECK(attmask::attmask_hint<double>(attn, 0.0, 0.2, rng).count() == 0);
  // k = 5, one reveal from the two most attended tokens (indices 1 and 3).
  std::set<std::size_t> revealed;
  for (int i = 0; i < 200; ++i) {
    const auto m = attmask::attmask_hint<double>(attn, 0.5, 0.2, rng);
    REQUIRE(m.count() == 4);
    for (std::size_t j = 0; j < 10; ++j) {
      if (high.bits[j] && !m.bits[j]) revealed.insert(j);
      CHECK((!m.bits[j] || high.bits[j]));
    }
  }
  CHECK(revealed == std::set<std::size_t>{1, 3});
}

TEST_CASE("mask text round-trip") {
  Rng rng(6);
  for (std::size_t n : {1u, 4u, 7u, 16u, 64u, 196u}) {
    const auto m = attmask::random_mask(n, 0.4, rng);
    CHECK(MaskVector::from_text(m.to_text()) == m);
  }
  CHECK(from_bits({1, 0, 0, 1, 1}).to_text() == "5 98");
  CHECK_THROWS(MaskVector::from_text("4 zz"));
}

TEST_CASE("apply_mask substitutes only masked patch rows") {
  attmask::TokenSequence<double> seq;
  seq.batch = 1;
  seq.num_patches = 4;
  seq.grid_side = 2;
  seq.tokens = attmask::Tensor<double>::from({5, 2}, {0, 0, 1, 1, 2, 2, 3, 3, 4, 4});
  const auto embed = attmask::Tensor<double>::from({2}, {9, 9});
  const MaskVector masks[] = {from_bits({0, 1, 0, 1})};
  const auto out = attmask::apply_mask<double>(seq, masks, embed);
  const std::vector<double> expect{0, 0, 1, 1, 9, 9, 3, 3, 9, 9};
  CHECK(std::vector<double>(out.tokens.data().begin(), out.tokens.data().end()) == expect);
  const MaskVector none[] = {MaskVector(4)};
  const auto same = attmask::apply_mask<double>(seq, none, embed);
  for (std::size_t i = 0; i < 10; ++i) CHECK(same.tokens[i] == seq.tokens[i]);
  const MaskVector all[] = {from_bits({1, 1, 1, 1})};
  const auto full = attmask::apply_mask<double>(seq, all, embed);
  CHECK(full.tokens.at(0, 0) == 0.0);
  for (std::size_t r = 1; r < 5; ++r) CHECK(full.tokens.at(r, 1) == 9.0);
}

}
