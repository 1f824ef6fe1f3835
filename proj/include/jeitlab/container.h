// jeitlab/container.h
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

// Versioned binary container for named double tensors. One format serves
// checkpoints, optimizer state, and synthesized feature files. All numeric
// payloads are little-endian; writing then reading is byte-exact.

#ifndef JEITLAB_CONTAINER_H_
#define JEITLAB_CONTAINER_H_

#include <string>
#include <vector>

#include "jeitlab/tensor.h"

namespace jeitlab {

struct NamedTensor {
  std::string name;
  std::vector<int> shape;
  std::vector<double> values;
};

void write_tensor_container(const std::string& path, const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> read_tensor_container(const std::string& path);

// Parameter values only, in name order. Loading requires an exact name and
// shape match against the store.
void save_param_values(const std::string& path, const ParamStore& params);
void load_param_values(const std::string& path, ParamStore& params);

}  // namespace jeitlab

#endif  // JEITLAB_CONTAINER_H_
