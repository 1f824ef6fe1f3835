// jeitlab/rng.cc
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

namespace jeitlab {

namespace {

uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

uint64_t fnv1a(std::string_view s) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace

uint64_t Rng::derive_seed(uint64_t base, std::string_view tag, uint64_t index) {
  uint64_t h = splitmix64(base ^ fnv1a(tag));
  return splitmix64(h ^ splitmix64(index + 0x51ed2701ULL));
}

uint64_t Rng::uniform_u64(uint64_t n) {
  JL_CHECK(n >= 1, "uniform_u64: n must be >= 1");
  // Rejection sampling to avoid modulo bias.
  uint64_t limit = UINT64_MAX - UINT64_MAX % n;
  uint64_t x;
  do {
    x = next_u64();
  } while (x >= limit);
  return x % n;
}

int64_t Rng::uniform_int(int64_t lo, int64_t hi) {
  JL_CHECK(lo <= hi, "uniform_int: empty range [", lo, ", ", hi, "]");
  uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
  return lo + static_cast<int64_t>(uniform_u64(span));
}

double Rng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  double u1, u2;
  do {
    u1 = uniform();
  } while (u1 <= 0.0);
  u2 = uniform();
  double r = std::sqrt(-2.0 * std::log(u1));
  double theta = 2.0 * M_PI * u2;
  spare_ = r * std::sin(theta);
  has_spare_ = true;
  return r * std::cos(theta);
}

size_t Rng::categorical(const std::vector<double>& weights) {
  JL_CHECK(!weights.empty(), "categorical: empty weight vector");
  double total = 0.0;
  for (double w : weights) {
    JL_CHECK(w >= 0.0 && is_finite(w), "categorical: weights must be finite and non-negative");
    total += w;
  }
  JL_CHECK(total > 0.0, "categorical: all weights are zero");
  double x = uniform() * total;
  double acc = 0.0;
  for (size_t i = 0; i < weights.size(); ++i) {
    acc += weights[i];
    if (x < acc) return i;
  }
  return weights.size() - 1;
}

}  // namespace jeitlab
