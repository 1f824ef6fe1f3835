// tests/container_test.cc
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
#include <filesystem>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include "doctest.h"
#include "jeitlab/rng.h"

using namespace jeitlab;

namespace {

std::string tmp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

std::string read_bytes(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  REQUIRE(is.good());
  return std::string(std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>());
}

bool bits_equal(double a, double b) {
  uint64_t ba, bb;
  std::memcpy(&ba, &a, 8);
  std::memcpy(&bb, &b, 8);
  return ba == bb;
}

}  // namespace

TEST_CASE("containers round-trip values bit for bit") {
  std::vector<NamedTensor> tensors;
  tensors.push_back({"enc.W", {2, 3}, {1.0, -0.0, 1e-308, 3.141592653589793, 1e300, -2.5}});
  tensors.push_back({"enc.b", {3}, {std::numeric_limits<double>::infinity(),
                                    -std::numeric_limits<double>::infinity(),
                                    std::numeric_limits<double>::quiet_NaN()}});
  tensors.push_back({"empty", {0}, {}});

  auto path = tmp_path("jl_container_roundtrip.bin");
  write_tensor_container(path, tensors);
  auto back = read_tensor_container(path);

  REQUIRE(back.size() == tensors.size());
  for (size_t i = 0; i < tensors.size(); ++i) {
    CHECK(back[i].name == tensors[i].name);
    CHECK(back[i].shape == tensors[i].shape);
    REQUIRE(back[i].values.size() == tensors[i].values.size());
    for (size_t k = 0; k < tensors[i].values.size(); ++k) {
      CHECK(bits_equal(back[i].values[k], tensors[i].values[k]));
    }
  }
  std::filesystem::remove(path);
}

TEST_CASE("write-read-write produces identical bytes") {
  Rng rng(41);
  std::vector<NamedTensor> tensors;
  tensors.push_back({"a", {4, 4}, {}});
  tensors.push_back({"b", {7}, {}});
  for (auto& t : tensors) {
    t.values.resize(shape_size(t.shape));
    for (auto& v : t.values) v = rng.normal();
  }
  auto p1 = tmp_path("jl_container_first.bin");
  auto p2 = tmp_path("jl_container_second.bin");
  write_tensor_container(p1, tensors);
  write_tensor_container(p2, read_tensor_container(p1));
  CHECK(read_bytes(p1) == read_bytes(p2));
  std::filesystem::remove(p1);
  std::filesystem::remove(p2);
}

TEST_CASE("parameter values survive a save and load cycle") {
  Rng rng(42);
  ParamStore ps;
  ps.add("layer.W", {3, 2}, rng, 1.0);
  ps.add("layer.b", {3}, rng, 1.0);

  auto path = tmp_path("jl_container_params.bin");
  save_param_values(path, ps);

  ParamStore fresh;
  fresh.add("layer.W", {3, 2});
  fresh.add("layer.b", {3});
  load_param_values(path, fresh);
  for (const auto& name : ps.names()) {
    const auto& a = ps.get(name)->value;
    const auto& b = fresh.get(name)->value;
    REQUIRE(a.size() == b.size());
    for (size_t i = 0; i < a.size(); ++i) CHECK(bits_equal(a[i], b[i]));
  }
  std::filesystem::remove(path);
}

TEST_CASE("loading rejects wrong magic, truncation, and shape drift") {
  auto path = tmp_path("jl_container_bad.bin");
  {
    std::ofstream os(path, std::ios::binary);
    os << "NOPE garbage";
  }
  CHECK_THROWS_AS(read_tensor_container(path), Error);

  std::vector<NamedTensor> tensors = {{"w", {2}, {1.0, 2.0}}};
  write_tensor_container(path, tensors);
  auto bytes = read_bytes(path);
  {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size() - 5));
  }
  CHECK_THROWS_AS(read_tensor_container(path), Error);

  write_tensor_container(path, tensors);
  ParamStore ps;
  ps.add("w", {3});
  CHECK_THROWS_AS(load_param_values(path, ps), Error);
  std::filesystem::remove(path);
}

TEST_CASE("missing files fail loudly") {
  CHECK_THROWS_AS(read_tensor_container(tmp_path("jl_container_never_written.bin")), Error);
}
