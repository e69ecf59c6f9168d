// Copyright 2026 The Mogen Authors
// SPDX-License-Identifier: Apache-2.0

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "mogen/rng.hpp"

using mogen::Rng;

TEST_CASE("same seed gives identical streams", "[rng]") {
  Rng a(1234), b(1234);
  for (int i = 0; i < 1000; ++i) {
    REQUIRE(a.uniform() == b.uniform());
    REQUIRE(a.normal() == b.normal());
  }
}

TEST_CASE("different streams from one seed disagree", "[rng]") {
  Rng a(7, 0), b(7, 1);
  int equal = 0;
  for (int i = 0; i < 100; ++i) {
    equal += a.bits() == b.bits() ? 1 : 0;
  }
  REQUIRE(equal == 0);
}

TEST_CASE("uniform stays in range and looks flat", "[rng]") {
  Rng rng(42);
  double sum = 0.0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    const double u = rng.uniform();
    REQUIRE(u >= 0.0);
    REQUIRE(u < 1.0);
    sum += u;
  }
  REQUIRE(std::abs(sum / n - 0.5) < 0.01);
}

TEST_CASE("normal moments", "[rng]") {
  Rng rng(43);
  const int n = 40000;
  double s1 = 0.0, s2 = 0.0;
  for (int i = 0; i < n; ++i) {
    const double x = rng.normal();
    s1 += x;
    s2 += x * x;
  }
  REQUIRE(std::abs(s1 / n) < 0.02);
  REQUIRE(std::abs(s2 / n - 1.0) < 0.05);
}

TEST_CASE("index covers range uniformly", "[rng]") {
  Rng rng(44);
  std::vector<int> counts(7, 0);
  for (int i = 0; i < 7000; ++i) counts[rng.index(7)]++;
  for (int c : counts) {
    REQUIRE(c > 800);
    REQUIRE(c < 1200);
  }
}

TEST_CASE("shuffle is a permutation and seed-stable", "[rng]") {
  std::vector<int> v{0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
  Rng a(5);
  a.shuffle(v);
  std::vector<int> sorted = v;
  std::sort(sorted.begin(), sorted.end());
  REQUIRE(sorted == std::vector<int>{0, 1, 2, 3, 4, 5, 6, 7, 8, 9});

  std::vector<int> w{0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
  Rng b(5);
  b.shuffle(w);
  REQUIRE(v == w);
}
