// jeitlab/tensor.h
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
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "jeitlab/common.h"
#include "jeitlab/rng.h"

namespace jeitlab {

class Tensor;
using TensorPtr = std::shared_ptr<Tensor>;

// Dense double-precision tensor and reverse-mode tape node in one.  Ops
// below build a DAG of these; backward(root) accumulates gradients into
// every node that requires them.  Gradient buffers are additive and are
// zeroed explicitly between steps (see ParamStore::zero_grad).
class Tensor : public std::enable_shared_from_this<Tensor> {
 public:
  std::vector<int> shape;
  std::vector<double> value;
  std::vector<double> grad;  // same element count as value once allocated
  bool requires_grad = false;

  std::vector<TensorPtr> parents;
  std::function<void(Tensor&)> backward_fn;

  int64_t size() const { return static_cast<int64_t>(value.size()); }
  bool is_scalar() const { return value.size() == 1; }
  int rows() const {
    JL_CHECK(shape.size() == 2, "rows(): tensor is not 2-D");
    return shape[0];
  }
  int cols() const {
    JL_CHECK(shape.size() == 2, "cols(): tensor is not 2-D");
    return shape[1];
  }
  double scalar_value() const {
    JL_CHECK(is_scalar(), "scalar_value(): tensor has ", value.size(), " elements");
    return value[0];
  }

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  }
  void zero_grad() {
    if (!grad.empty()) grad.assign(grad.size(), 0.0);
  }

  static TensorPtr zeros(std::vector<int> shape, bool requires_grad = false);
  static TensorPtr from_values(std::vector<int> shape, std::vector<double> values,
                               bool requires_grad = false);
  static TensorPtr scalar(double v, bool requires_grad = false);
};

int64_t shape_size(const std::vector<int>& shape);
std::string shape_str(const std::vector<int>& shape);

// While a NoGradGuard is alive, ops produce value-only tensors with no tape.
// Used for inference-time evaluation and finite-difference probes.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};
bool grad_enabled();

// Runs reverse-mode accumulation from a scalar root. Gradients add into the
// .grad buffers of every reachable tensor with requires_grad set.
void backward(const TensorPtr& root);

// ---------------------------------------------------------------------------
// Elementwise and reduction ops.
// ---------------------------------------------------------------------------
TensorPtr add(const TensorPtr& a, const TensorPtr& b);
TensorPtr sub(const TensorPtr& a, const TensorPtr& b);
TensorPtr mul(const TensorPtr& a, const TensorPtr& b);
TensorPtr scale(const TensorPtr& a, double c);
TensorPtr sum(const TensorPtr& a);
TensorPtr dot(const TensorPtr& a, const TensorPtr& b);
TensorPtr tanh_op(const TensorPtr& a);
TensorPtr sigmoid(const TensorPtr& a);
TensorPtr exp_op(const TensorPtr& a);

// y = W x (+ b).  x: [n], W: [m x n], b: [m] or null.
TensorPtr affine(const TensorPtr& x, const TensorPtr& W, const TensorPtr& b = nullptr);

// Y = X W^T (+ b per row).  X: [n x in], W: [out x in], b: [out] or null.
TensorPtr linear(const TensorPtr& X, const TensorPtr& W, const TensorPtr& b = nullptr);

// Normalized log-probabilities of a vector of logits.
TensorPtr log_softmax(const TensorPtr& v);
// Row-wise log_softmax of a [n x V] matrix.
TensorPtr log_softmax_rows(const TensorPtr& X);

TensorPtr pick(const TensorPtr& v, int index);
TensorPtr slice(const TensorPtr& v, int offset, int length);

// Appends constant columns to every row: [n x d] -> [n x (d + extra.size())].
TensorPtr append_const_cols(const TensorPtr& X, const std::vector<double>& extra);

// Rows gathered from an embedding table: table [R x d], ids in [0, R).
TensorPtr embedding_rows(const TensorPtr& table, const std::vector<int>& ids);

// Row r = sum_k tables[k][ctx[r][k]].  Tables may repeat (shared look-up
// table); gradients then accumulate once per slot occurrence.
TensorPtr embedding_context_sum(const std::vector<TensorPtr>& tables,
                                const std::vector<std::vector<int>>& ctx);

// ---------------------------------------------------------------------------
// Recurrent cell. Gate layout in Wx/Wh/b is [input; forget; cell; output],
// each block of size H.  Wx: [4H x I], Wh: [4H x H], b: [4H].
// ---------------------------------------------------------------------------
struct LstmStepResult {
  TensorPtr h;
  TensorPtr c;
};

// Single gated recurrent update, built from primitive ops.
LstmStepResult recurrent_step(const TensorPtr& x, const TensorPtr& h_prev,
                              const TensorPtr& c_prev, const TensorPtr& Wx,
                              const TensorPtr& Wh, const TensorPtr& b);

// Whole-sequence fused cell with hand-written backward; zero initial state.
// x: [T x I] -> h: [T x H].  Matches chained recurrent_step outputs.
TensorPtr lstm_sequence(const TensorPtr& x, const TensorPtr& Wx, const TensorPtr& Wh,
                        const TensorPtr& b);

// Raw single step on plain buffers (shared by the fused op and by decoding).
namespace detail {
void lstm_step_raw(const double* x, int input_dim, const double* h_prev,
                   const double* c_prev, int hidden, const double* Wx,
                   const double* Wh, const double* b, double* h_out, double* c_out,
                   double* gates_out /* 4H, may be null */);

// Node constructor for fused ops defined outside this translation unit.
// The backward_fn receives the node and must accumulate into parent grads,
// guarding each write on that parent's requires_grad. Tape linkage is dropped
// when gradients are globally disabled or no parent requires them.
TensorPtr make_op_node(std::vector<int> shape, std::vector<TensorPtr> parents,
                       std::function<void(Tensor&)> backward_fn);
}  // namespace detail

// ---------------------------------------------------------------------------
// Loss heads.
// ---------------------------------------------------------------------------
// Summed negative log-likelihood of targets under row-wise softmax of logits.
TensorPtr cross_entropy_rows(const TensorPtr& logits, const std::vector<int>& targets);

// Sum over rows of KL(softmax-from(frozen_logprobs) || softmax(logits)).
// frozen_logprobs are constant normalized log-probabilities, one row each.
TensorPtr kl_divergence_rows(const std::vector<std::vector<double>>& frozen_logprobs,
                             const TensorPtr& logits);

// ---------------------------------------------------------------------------
// Parameters.
// ---------------------------------------------------------------------------
struct Parameter {
  std::string name;
  TensorPtr tensor;
  bool trainable = true;
};

// Named parameter set with deterministic (name-sorted) iteration order.
class ParamStore {
 public:
  TensorPtr add(const std::string& name, std::vector<int> shape);
  TensorPtr add(const std::string& name, std::vector<int> shape, Rng& rng,
                double init_scale);  // uniform(-s, s)
  bool has(const std::string& name) const { return items_.count(name) > 0; }
  TensorPtr get(const std::string& name) const;
  Parameter& param(const std::string& name);
  const std::map<std::string, Parameter>& items() const { return items_; }
  std::map<std::string, Parameter>& items() { return items_; }
  std::vector<std::string> names() const;
  int64_t total_size() const;
  void zero_grad();
  void set_all_trainable(bool trainable);
  ParamStore clone() const;  // deep copy of values; fresh gradient buffers

 private:
  std::map<std::string, Parameter> items_;
};

// Uniform init scaled by fan-in: U(-1/sqrt(fan_in), +1/sqrt(fan_in)).
double fan_in_scale(int fan_in);

// ---------------------------------------------------------------------------
// Gradient checking harness: compares reverse-mode gradients of f against
// central finite differences over every trainable coordinate and returns the
// max scaled error |a - b| / (max(|a|, |b|) + 1e-4). The additive term keeps
// finite-difference roundoff on vanishing coordinates from masquerading as a
// gradient mismatch.
// ---------------------------------------------------------------------------
double grad_check(const std::function<TensorPtr()>& f, ParamStore& params,
                  double eps = 1e-5);

}  // namespace jeitlab
