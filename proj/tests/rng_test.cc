// tests/rng_test.cc
//
// Copyright 2026 The jeitlab Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "jeitlab/rng.h"

#include <cmath>
#include <set>
#include <vector>

#include "doctest.h"

using namespace jeitlab;

TEST_CASE("identical seeds reproduce the stream") {
  Rng a(1234), b(1234);
  for (int i = 0; i < 1000; ++i) {
    CHECK(a.next_u64() == b.next_u64());
  }
}

TEST_CASE("derived streams are stable and tag-sensitive") {
  uint64_t s1 = Rng::derive_seed(7, "corpus", 0);
  uint64_t s2 = Rng::derive_seed(7, "corpus", 0);
  CHECK(s1 == s2);
  CHECK(Rng::derive_seed(7, "corpus", 1) != s1);
  CHECK(Rng::derive_seed(7, "train", 0) != s1);
  CHECK(Rng::derive_seed(8, "corpus", 0) != s1);
}

TEST_CASE("uniform stays in the half-open unit interval") {
  Rng rng(5);
  for (int i = 0; i < 10000; ++i) {
    double u = rng.uniform();
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
  }
}

TEST_CASE("uniform_int covers its inclusive range and nothing else") {
  Rng rng(11);
  std::set<int> seen;
  for (int i = 0; i < 5000; ++i) {
    int v = rng.uniform_int(3, 7);
    CHECK(v >= 3);
    CHECK(v <= 7);
    seen.insert(v);
  }
  CHECK(seen.size() == 5);
}

TEST_CASE("bernoulli respects the degenerate probabilities") {
  Rng rng(2);
  for (int i = 0; i < 100; ++i) {
    CHECK_FALSE(rng.bernoulli(0.0));
    CHECK(rng.bernoulli(1.0));
  }
}

TEST_CASE("normal has the requested first two moments") {
  Rng rng(99);
  const int n = 40000;
  double sum = 0.0, sq = 0.0;
  for (int i = 0; i < n; ++i) {
    double x = rng.normal(2.0, 3.0);
    sum += x;
    sq += x * x;
  }
  double mean = sum / n;
  double var = sq / n - mean * mean;
  CHECK(mean == doctest::Approx(2.0).epsilon(0.05));
  CHECK(std::sqrt(var) == doctest::Approx(3.0).epsilon(0.05));
}

TEST_CASE("categorical never draws a zero-weight entry") {
  Rng rng(3);
  std::vector<double> w = {0.0, 2.0, 0.0, 1.0};
  std::vector<int> counts(4, 0);
  for (int i = 0; i < 9000; ++i) {
    int k = rng.categorical(w);
    REQUIRE(k >= 0);
    REQUIRE(k < 4);
    ++counts[k];
  }
  CHECK(counts[0] == 0);
  CHECK(counts[2] == 0);
  // Frequencies track the 2:1 weight ratio.
  double ratio = static_cast<double>(counts[1]) / counts[3];
  CHECK(ratio == doctest::Approx(2.0).epsilon(0.15));
}

TEST_CASE("shuffle permutes and is seed-deterministic") {
  std::vector<int> v1 = {0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
  std::vector<int> v2 = v1;
  Rng a(17), b(17);
  a.shuffle(v1);
  b.shuffle(v2);
  CHECK(v1 == v2);
  std::set<int> s(v1.begin(), v1.end());
  CHECK(s.size() == 10);
}
