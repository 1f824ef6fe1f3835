// jeitlab/optimizer.h
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

// Adam with global-norm gradient clipping. Updates touch trainable
// parameters only; frozen entries keep their exact bit patterns, which the
// adaptation mode relies on. Moment state serializes through the tensor
// container so a resumed run continues bit-for-bit.

#ifndef JEITLAB_OPTIMIZER_H_
#define JEITLAB_OPTIMIZER_H_

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "jeitlab/tensor.h"

namespace jeitlab {

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip_norm = 5.0;  // 0 disables clipping
  void validate() const;
};

class Adam {
 public:
  explicit Adam(const AdamConfig& cfg);

  // One update from the gradients currently stored in params. Returns the
  // global gradient norm over trainable parameters before clipping.
  double step(ParamStore& params);

  std::int64_t step_count() const { return t_; }
  void reset();

  // Moment state round-trip. Loading validates that the state matches the
  // parameter set exactly.
  void save_state(const std::string& path) const;
  void load_state(const std::string& path, const ParamStore& params);

 private:
  AdamConfig cfg_;
  std::int64_t t_ = 0;
  std::map<std::string, std::vector<double>> m_, v_;
};

}  // namespace jeitlab

#endif  // JEITLAB_OPTIMIZER_H_
