// jeitlab/common.h
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

#include <cmath>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <string>

namespace jeitlab {

// Contract violations (bad shapes, invalid configs, broken invariants).
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

namespace detail {
inline void cat_into(std::ostringstream&) {}
template <typename T, typename... Rest>
void cat_into(std::ostringstream& os, T&& first, Rest&&... rest) {
  os << std::forward<T>(first);
  cat_into(os, std::forward<Rest>(rest)...);
}
}  // namespace detail

template <typename... Args>
std::string cat(Args&&... args) {
  std::ostringstream os;
  detail::cat_into(os, std::forward<Args>(args)...);
  return os.str();
}

template <typename... Args>
[[noreturn]] void fail(Args&&... args) {
  throw Error(cat(std::forward<Args>(args)...));
}

#define JL_CHECK(cond, ...)                      \
  do {                                           \
    if (!(cond)) ::jeitlab::fail(__VA_ARGS__);   \
  } while (0)

inline bool is_finite(double x) { return std::isfinite(x); }

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

// log(a + b) given log a, log b; handles -inf operands.
inline double log_add(double la, double lb) {
  if (la == kNegInf) return lb;
  if (lb == kNegInf) return la;
  double hi = la > lb ? la : lb;
  double lo = la > lb ? lb : la;
  return hi + std::log1p(std::exp(lo - hi));
}

// log(sigmoid(x)), stable for large |x|.
inline double log_sigmoid(double x) {
  return x >= 0.0 ? -std::log1p(std::exp(-x)) : x - std::log1p(std::exp(x));
}

}  // namespace jeitlab
