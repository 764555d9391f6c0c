#include <doctest.h>

#include <algorithm>
#include <numeric>
#include <set>

#include "attmask/rng.hpp"

using attmask::Rng;

TEST_SUITE("rng") {

TEST_CASE("philox4x32-10 known-answer vectors") {
  using C = std::array<std::uint32_t, 4>;
  using K = std::array<std::uint32_t, 2>;
  CHECK(attmask::philox4x32_10(C{0, 0, 0, 0}, K{0, 0}) ==
        C{0x6627e8d5, 0xe169c58d, 0xbc57ac4c, 0x9b00dbd8});
  CHECK(attmask::philox4x32_10(C{0xffffffff, 0xffffffff, 0xffffffff, 0xffffffff},
                               K{0xffffffff, 0xffffffff}) ==
        C{0x408f276d, 0x41c83b0e, 0xa20bc7c6, 0x6d5451fd});
  CHECK(attmask::philox4x32_10(C{0x243f6a88, 0x85a308d3, 0x13198a2e, 0x03707344},
                               K{0xa4093822, 0x299f31d0}) ==
        C{0xd16cfe09, 0x94fdcceb, 0x5001e420, 0x24126ea1});
}

TEST_CASE("same seed and path reproduce the stream") {
  Rng a = Rng(42).path(std::string_view("mask"), std::uint64_t{7});
  Rng b = Rng(42).path(std::string_view("mask"), std::uint64_t{7});
  for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
}

TEST_CASE("sibling streams differ") {
  Rng root(1);
  Rng a = root.split(std::uint64_t{0});
  Rng b = root.split(std::uint64_t{1});
  Rng c = root.split(std::string_view("init"));
  int same_ab = 0, same_ac = 0;
  for (int i = 0; i < 64; ++i) {
    const auto x = a.next_u32(), y = b.next_u32(), z = c.next_u32();
    same_ab += x == y;
    same_ac += x == z;
  }
  CHECK(same_ab < 3);
  CHECK(same_ac < 3);
}

TEST_CASE("uniform stays in [0, 1) and has the right mean") {
  Rng rng(3);
  double sum = 0;
  for (int i = 0; i < 100000; ++i) {
    const double u = rng.uniform();
    REQUIRE(u >= 0.0);
    REQUIRE(u < 1.0);
    sum += u;
  }
  CHECK(sum / 100000 == doctest::Approx(0.5).epsilon(0.01));
}

TEST_CASE("below covers its range without bias") {
  Rng rng(5);
  std::vector<int> counts(6, 0);
  for (int i = 0; i < 60000; ++i) ++counts[rng.below(6)];
  for (const int c : counts) CHECK(std::abs(c - 10000) < 400);
  CHECK(rng.below(1) == 0);
}

TEST_CASE("normal and truncated normal moments") {
  Rng rng(9);
  double s = 0, s2 = 0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    const double x = rng.normal();
    s += x;
    s2 += x * x;
  }
  CHECK(std::abs(s / n) < 0.01);
  CHECK(s2 / n == doctest::Approx(1.0).epsilon(0.02));
  for (int i = 0; i < 10000; ++i) {
    const double t = rng.truncated_normal(0.02);
    REQUIRE(std::abs(t) <= 0.04);
  }
}

TEST_CASE("shuffle is a permutation") {
  Rng rng(11);
  std::vector<int> v(50);
  std::iota(v.begin(), v.end(), 0);
  rng.shuffle(std::span<int>(v));
  std::vector<int> sorted = v;
  std::sort(sorted.begin(), sorted.end());
  for (int i = 0; i < 50; ++i) CHECK(sorted[static_cast<std::size_t>(i)] == i);
  CHECK_FALSE(std::is_sorted(v.begin(), v.end()));
}

TEST_CASE("fnv1a64 reference values") {
  CHECK(attmask::fnv1a64("") == 0xcbf29ce484222325ULL);
  CHECK(attmask::fnv1a64("a") == 0xaf63dc4c8601ec8cULL);
  CHECK(attmask::fnv1a64("foobar") == 0x85944171f73967e8ULL);
}

}
