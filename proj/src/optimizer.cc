// jeitlab/optimizer.cc
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

#include "jeitlab/optimizer.h"

#include <cmath>

#include "jeitlab/common.h"
#include "jeitlab/container.h"

namespace jeitlab {

void AdamConfig::validate() const {
  // A zero rate is allowed: it runs the full update pipeline (moments, clip
  // checks) without moving parameters, which dry runs rely on.
  JL_CHECK(is_finite(learning_rate) && learning_rate >= 0.0, "learning_rate must be >= 0");
  JL_CHECK(beta1 >= 0.0 && beta1 < 1.0, "beta1 must be in [0, 1)");
  JL_CHECK(beta2 >= 0.0 && beta2 < 1.0, "beta2 must be in [0, 1)");
  JL_CHECK(eps > 0.0, "eps must be > 0");
  JL_CHECK(is_finite(clip_norm) && clip_norm >= 0.0, "clip_norm must be >= 0");
}

Adam::Adam(const AdamConfig& cfg) : cfg_(cfg) { cfg_.validate(); }

void Adam::reset() {
  t_ = 0;
  m_.clear();
  v_.clear();
}

double Adam::step(ParamStore& params) {
  double norm_sq = 0.0;
  for (auto& [name, p] : params.items()) {
    if (!p.trainable) continue;
    p.tensor->ensure_grad();
    for (double g : p.tensor->grad) {
      JL_CHECK(is_finite(g), "non-finite gradient in ", name);
      norm_sq += g * g;
    }
  }
  double norm = std::sqrt(norm_sq);
  double scale = 1.0;
  if (cfg_.clip_norm > 0.0 && norm > cfg_.clip_norm) scale = cfg_.clip_norm / norm;

  ++t_;
  double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (auto& [name, p] : params.items()) {
    if (!p.trainable) continue;
    auto& value = p.tensor->value;
    auto& grad = p.tensor->grad;
    auto& m = m_[name];
    auto& v = v_[name];
    if (m.empty()) m.assign(value.size(), 0.0);
    if (v.empty()) v.assign(value.size(), 0.0);
    JL_CHECK(m.size() == value.size(), "moment state for ", name,
             " does not match the parameter");
    for (size_t i = 0; i < value.size(); ++i) {
      double g = grad[i] * scale;
      m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g;
      v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g * g;
      double mhat = m[i] / bc1;
      double vhat = v[i] / bc2;
      value[i] -= cfg_.learning_rate * mhat / (std::sqrt(vhat) + cfg_.eps);
    }
  }
  return norm;
}

void Adam::save_state(const std::string& path) const {
  std::vector<NamedTensor> out;
  out.push_back(NamedTensor{"adam/t", {1}, {static_cast<double>(t_)}});
  for (const auto& [name, m] : m_)
    out.push_back(NamedTensor{"adam/m/" + name, {static_cast<int>(m.size())}, m});
  for (const auto& [name, v] : v_)
    out.push_back(NamedTensor{"adam/v/" + name, {static_cast<int>(v.size())}, v});
  write_tensor_container(path, out);
}

void Adam::load_state(const std::string& path, const ParamStore& params) {
  reset();
  t_ = -1;  // a valid state file always carries the step counter
  for (NamedTensor& t : read_tensor_container(path)) {
    if (t.name == "adam/t") {
      JL_CHECK(t.values.size() == 1, "adam/t must hold one value");
      t_ = static_cast<std::int64_t>(t.values[0]);
      continue;
    }
    bool is_m = t.name.rfind("adam/m/", 0) == 0;
    bool is_v = t.name.rfind("adam/v/", 0) == 0;
    JL_CHECK(is_m || is_v, "unexpected entry '", t.name, "' in optimizer state");
    std::string pname = t.name.substr(7);
    JL_CHECK(params.has(pname), "optimizer state names unknown parameter '", pname, "'");
    JL_CHECK(t.values.size() == params.get(pname)->value.size(),
             "optimizer state for ", pname, " has the wrong size");
    (is_m ? m_ : v_)[pname] = std::move(t.values);
  }
  JL_CHECK(t_ >= 0, "optimizer state is missing its step counter");
}

}  // namespace jeitlab
