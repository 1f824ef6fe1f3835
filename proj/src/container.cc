// jeitlab/container.cc
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

#include "jeitlab/container.h"

#include <cstdint>
#include <cstring>
#include <fstream>

namespace jeitlab {

namespace {

constexpr char kMagic[4] = {'J', 'L', 'T', 'C'};
constexpr uint32_t kVersion = 1;

void put_u32(std::ostream& os, uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  os.write(reinterpret_cast<const char*>(b), 4);
}

void put_u64(std::ostream& os, uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  os.write(reinterpret_cast<const char*>(b), 8);
}

void put_f64(std::ostream& os, double v) {
  uint64_t bits;
  std::memcpy(&bits, &v, 8);
  put_u64(os, bits);
}

uint32_t get_u32(std::istream& is, const std::string& path) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  JL_CHECK(is.good(), "truncated container: ", path);
  uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(b[i]) << (8 * i);
  return v;
}

uint64_t get_u64(std::istream& is, const std::string& path) {
  unsigned char b[8];
  is.read(reinterpret_cast<char*>(b), 8);
  JL_CHECK(is.good(), "truncated container: ", path);
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(b[i]) << (8 * i);
  return v;
}

double get_f64(std::istream& is, const std::string& path) {
  uint64_t bits = get_u64(is, path);
  double v;
  std::memcpy(&v, &bits, 8);
  return v;
}

}  // namespace

void write_tensor_container(const std::string& path, const std::vector<NamedTensor>& tensors) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  JL_CHECK(os.good(), "cannot open for writing: ", path);
  os.write(kMagic, 4);
  put_u32(os, kVersion);
  put_u64(os, tensors.size());
  for (const auto& t : tensors) {
    JL_CHECK(shape_size(t.shape) == static_cast<int64_t>(t.values.size()),
             "tensor '", t.name, "': shape ", shape_str(t.shape), " does not match ",
             t.values.size(), " values");
    put_u32(os, static_cast<uint32_t>(t.name.size()));
    os.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
    put_u32(os, static_cast<uint32_t>(t.shape.size()));
    for (int d : t.shape) put_u32(os, static_cast<uint32_t>(d));
    put_u64(os, t.values.size());
    for (double v : t.values) put_f64(os, v);
  }
  os.flush();
  JL_CHECK(os.good(), "write failed: ", path);
}

std::vector<NamedTensor> read_tensor_container(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  JL_CHECK(is.good(), "cannot open for reading: ", path);
  char magic[4];
  is.read(magic, 4);
  JL_CHECK(is.good() && std::memcmp(magic, kMagic, 4) == 0, "not a tensor container: ", path);
  uint32_t version = get_u32(is, path);
  JL_CHECK(version == kVersion, "unsupported container version ", version, " in ", path);
  uint64_t count = get_u64(is, path);
  std::vector<NamedTensor> out;
  out.reserve(count);
  for (uint64_t i = 0; i < count; ++i) {
    NamedTensor t;
    uint32_t name_len = get_u32(is, path);
    t.name.resize(name_len);
    is.read(t.name.data(), name_len);
    JL_CHECK(is.good(), "truncated container: ", path);
    uint32_t ndim = get_u32(is, path);
    t.shape.resize(ndim);
    for (uint32_t d = 0; d < ndim; ++d) t.shape[d] = static_cast<int>(get_u32(is, path));
    uint64_t numel = get_u64(is, path);
    JL_CHECK(static_cast<int64_t>(numel) == shape_size(t.shape),
             "corrupt container entry '", t.name, "' in ", path);
    t.values.resize(numel);
    for (uint64_t k = 0; k < numel; ++k) t.values[k] = get_f64(is, path);
    out.push_back(std::move(t));
  }
  return out;
}

void save_param_values(const std::string& path, const ParamStore& params) {
  std::vector<NamedTensor> tensors;
  for (const auto& [name, p] : params.items()) {
    tensors.push_back(NamedTensor{name, p.tensor->shape, p.tensor->value});
  }
  write_tensor_container(path, tensors);
}

void load_param_values(const std::string& path, ParamStore& params) {
  auto tensors = read_tensor_container(path);
  JL_CHECK(tensors.size() == params.items().size(), "parameter count mismatch loading ", path,
           ": file has ", tensors.size(), ", store has ", params.items().size());
  for (const auto& t : tensors) {
    TensorPtr dst = params.get(t.name);
    JL_CHECK(dst->shape == t.shape, "parameter '", t.name, "' shape mismatch loading ", path,
             ": file ", shape_str(t.shape), ", store ", shape_str(dst->shape));
    dst->value = t.values;
  }
}

}  // namespace jeitlab
