// jeitlab/rng.h
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

#pragma once

#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

#include "jeitlab/common.h"

namespace jeitlab {

// Deterministic random source. All sampling helpers are hand-rolled on top
// of mt19937_64 so that streams are reproducible across standard library
// implementations, and every consumer derives its own stream from
// (seed, tag, index) instead of sharing engine state. That keeps runs
// resumable: nothing depends on how much randomness someone else consumed.
class Rng {
 public:
  explicit Rng(uint64_t seed) : engine_(seed) {}

  // Stable stream derivation: hash the tag and index into the base seed.
  static uint64_t derive_seed(uint64_t base, std::string_view tag, uint64_t index = 0);
  static Rng derive(uint64_t base, std::string_view tag, uint64_t index = 0) {
    return Rng(derive_seed(base, tag, index));
  }

  uint64_t next_u64() { return engine_(); }

  // Uniform integer in [0, n), n >= 1.
  uint64_t uniform_u64(uint64_t n);

  // Uniform integer in [lo, hi] inclusive.
  int64_t uniform_int(int64_t lo, int64_t hi);

  // Uniform double in [0, 1) with 53 bits of precision.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform double in [lo, hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  bool bernoulli(double p) { return uniform() < p; }

  // Standard normal via Box-Muller with a cached spare.
  double normal();
  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  // Index sampled from unnormalized non-negative weights.
  size_t categorical(const std::vector<double>& weights);

  // Deterministic Fisher-Yates shuffle.
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = static_cast<size_t>(uniform_u64(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace jeitlab
