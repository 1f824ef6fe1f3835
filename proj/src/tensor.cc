// jeitlab/tensor.cc
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

#include "jeitlab/tensor.h"

#include <algorithm>
#include <cmath>
#include <unordered_set>

namespace jeitlab {

namespace {

thread_local int g_no_grad_depth = 0;

bool any_requires_grad(const std::vector<TensorPtr>& parents) {
  for (const auto& p : parents) {
    if (p && p->requires_grad) return true;
  }
  return false;
}

// Creates a node; drops the tape when grads are disabled or no parent needs them.
TensorPtr make_node(std::vector<int> shape, std::vector<TensorPtr> parents,
                    std::function<void(Tensor&)> fn) {
  auto t = std::make_shared<Tensor>();
  t->value.resize(static_cast<size_t>(shape_size(shape)));
  t->shape = std::move(shape);
  if (grad_enabled() && any_requires_grad(parents)) {
    t->requires_grad = true;
    t->parents = std::move(parents);
    t->backward_fn = std::move(fn);
  }
  return t;
}

void check_same_shape(const TensorPtr& a, const TensorPtr& b, const char* op) {
  JL_CHECK(a->shape == b->shape, op, ": shape mismatch ", shape_str(a->shape), " vs ",
           shape_str(b->shape));
}

double row_logsumexp(const double* x, int n) {
  double m = x[0];
  for (int i = 1; i < n; ++i) m = std::max(m, x[i]);
  double s = 0.0;
  for (int i = 0; i < n; ++i) s += std::exp(x[i] - m);
  return m + std::log(s);
}

}  // namespace

namespace detail {
TensorPtr make_op_node(std::vector<int> shape, std::vector<TensorPtr> parents,
                       std::function<void(Tensor&)> backward_fn) {
  return make_node(std::move(shape), std::move(parents), std::move(backward_fn));
}
}  // namespace detail

int64_t shape_size(const std::vector<int>& shape) {
  int64_t n = 1;
  for (int d : shape) {
    JL_CHECK(d >= 0, "shape has negative dimension ", d);
    n *= d;
  }
  return n;
}

std::string shape_str(const std::vector<int>& shape) {
  std::string s = "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) s += " x ";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

TensorPtr Tensor::zeros(std::vector<int> shape, bool requires_grad) {
  auto t = std::make_shared<Tensor>();
  t->value.assign(static_cast<size_t>(shape_size(shape)), 0.0);
  t->shape = std::move(shape);
  t->requires_grad = requires_grad;
  return t;
}

TensorPtr Tensor::from_values(std::vector<int> shape, std::vector<double> values,
                              bool requires_grad) {
  JL_CHECK(shape_size(shape) == static_cast<int64_t>(values.size()),
           "from_values: shape ", shape_str(shape), " does not match ", values.size(),
           " values");
  auto t = std::make_shared<Tensor>();
  t->shape = std::move(shape);
  t->value = std::move(values);
  t->requires_grad = requires_grad;
  return t;
}

TensorPtr Tensor::scalar(double v, bool requires_grad) {
  return from_values({1}, {v}, requires_grad);
}

NoGradGuard::NoGradGuard() { ++g_no_grad_depth; }
NoGradGuard::~NoGradGuard() { --g_no_grad_depth; }
bool grad_enabled() { return g_no_grad_depth == 0; }

void backward(const TensorPtr& root) {
  JL_CHECK(root != nullptr && root->is_scalar(), "backward: root must be a scalar");
  JL_CHECK(is_finite(root->value[0]), "backward: root value is not finite");
  if (!root->requires_grad) return;

  // Iterative post-order DFS for a topological order.
  std::vector<Tensor*> topo;
  std::unordered_set<Tensor*> visited;
  std::vector<std::pair<Tensor*, size_t>> stack;
  stack.emplace_back(root.get(), 0);
  visited.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Tensor* p = node->parents[next].get();
      ++next;
      if (p->requires_grad && visited.insert(p).second) stack.emplace_back(p, 0);
    } else {
      topo.push_back(node);
      stack.pop_back();
    }
  }

  root->ensure_grad();
  root->grad[0] += 1.0;
  for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
    Tensor* node = *it;
    if (!node->backward_fn) continue;
    for (auto& p : node->parents) {
      if (p->requires_grad) p->ensure_grad();
    }
    node->backward_fn(*node);
  }
}

// ---------------------------------------------------------------------------
// Elementwise / reduction ops.
// ---------------------------------------------------------------------------

TensorPtr add(const TensorPtr& a, const TensorPtr& b) {
  check_same_shape(a, b, "add");
  auto out = make_node(a->shape, {a, b}, [](Tensor& self) {
    Tensor& a = *self.parents[0];
    Tensor& b = *self.parents[1];
    for (size_t i = 0; i < self.grad.size(); ++i) {
      if (a.requires_grad) a.grad[i] += self.grad[i];
      if (b.requires_grad) b.grad[i] += self.grad[i];
    }
  });
  for (size_t i = 0; i < out->value.size(); ++i) out->value[i] = a->value[i] + b->value[i];
  return out;
}

TensorPtr sub(const TensorPtr& a, const TensorPtr& b) {
  check_same_shape(a, b, "sub");
  auto out = make_node(a->shape, {a, b}, [](Tensor& self) {
    Tensor& a = *self.parents[0];
    Tensor& b = *self.parents[1];
    for (size_t i = 0; i < self.grad.size(); ++i) {
      if (a.requires_grad) a.grad[i] += self.grad[i];
      if (b.requires_grad) b.grad[i] -= self.grad[i];
    }
  });
  for (size_t i = 0; i < out->value.size(); ++i) out->value[i] = a->value[i] - b->value[i];
  return out;
}

TensorPtr mul(const TensorPtr& a, const TensorPtr& b) {
  check_same_shape(a, b, "mul");
  auto out = make_node(a->shape, {a, b}, [](Tensor& self) {
    Tensor& a = *self.parents[0];
    Tensor& b = *self.parents[1];
    for (size_t i = 0; i < self.grad.size(); ++i) {
      if (a.requires_grad) a.grad[i] += self.grad[i] * b.value[i];
      if (b.requires_grad) b.grad[i] += self.grad[i] * a.value[i];
    }
  });
  for (size_t i = 0; i < out->value.size(); ++i) out->value[i] = a->value[i] * b->value[i];
  return out;
}

TensorPtr scale(const TensorPtr& a, double c) {
  auto out = make_node(a->shape, {a}, [c](Tensor& self) {
    Tensor& a = *self.parents[0];
    for (size_t i = 0; i < self.grad.size(); ++i) a.grad[i] += c * self.grad[i];
  });
  for (size_t i = 0; i < out->value.size(); ++i) out->value[i] = c * a->value[i];
  return out;
}

TensorPtr sum(const TensorPtr& a) {
  auto out = make_node({1}, {a}, [](Tensor& self) {
    Tensor& a = *self.parents[0];
    for (size_t i = 0; i < a.grad.size(); ++i) a.grad[i] += self.grad[0];
  });
  double s = 0.0;
  for (double v : a->value) s += v;
  out->value[0] = s;
  return out;
}

TensorPtr dot(const TensorPtr& a, const TensorPtr& b) {
  check_same_shape(a, b, "dot");
  auto out = make_node({1}, {a, b}, [](Tensor& self) {
    Tensor& a = *self.parents[0];
    Tensor& b = *self.parents[1];
    double g = self.grad[0];
    for (size_t i = 0; i < a.value.size(); ++i) {
      if (a.requires_grad) a.grad[i] += g * b.value[i];
      if (b.requires_grad) b.grad[i] += g * a.value[i];
    }
  });
  double s = 0.0;
  for (size_t i = 0; i < a->value.size(); ++i) s += a->value[i] * b->value[i];
  out->value[0] = s;
  return out;
}

TensorPtr tanh_op(const TensorPtr& a) {
  auto out = make_node(a->shape, {a}, [](Tensor& self) {
    Tensor& a = *self.parents[0];
    for (size_t i = 0; i < self.grad.size(); ++i) {
      double y = self.value[i];
      a.grad[i] += self.grad[i] * (1.0 - y * y);
    }
  });
  for (size_t i = 0; i < out->value.size(); ++i) out->value[i] = std::tanh(a->value[i]);
  return out;
}

TensorPtr sigmoid(const TensorPtr& a) {
  auto out = make_node(a->shape, {a}, [](Tensor& self) {
    Tensor& a = *self.parents[0];
    for (size_t i = 0; i < self.grad.size(); ++i) {
      double y = self.value[i];
      a.grad[i] += self.grad[i] * y * (1.0 - y);
    }
  });
  for (size_t i = 0; i < out->value.size(); ++i) {
    double x = a->value[i];
    JL_CHECK(is_finite(x), "sigmoid: non-finite input");
    // Evaluate from the side that cannot overflow.
    out->value[i] = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x))
                             : std::exp(x) / (1.0 + std::exp(x));
  }
  return out;
}

TensorPtr exp_op(const TensorPtr& a) {
  auto out = make_node(a->shape, {a}, [](Tensor& self) {
    Tensor& a = *self.parents[0];
    for (size_t i = 0; i < self.grad.size(); ++i) a.grad[i] += self.grad[i] * self.value[i];
  });
  for (size_t i = 0; i < out->value.size(); ++i) out->value[i] = std::exp(a->value[i]);
  return out;
}

// ---------------------------------------------------------------------------
// Linear algebra.
// ---------------------------------------------------------------------------

TensorPtr affine(const TensorPtr& x, const TensorPtr& W, const TensorPtr& b) {
  JL_CHECK(x->shape.size() == 1, "affine: x must be a vector, got ", shape_str(x->shape));
  JL_CHECK(W->shape.size() == 2, "affine: W must be a matrix, got ", shape_str(W->shape));
  int m = W->shape[0], n = W->shape[1];
  JL_CHECK(n == x->shape[0], "affine: inner dimensions disagree: W is ", shape_str(W->shape),
           ", x is ", shape_str(x->shape));
  if (b) {
    JL_CHECK(b->shape.size() == 1 && b->shape[0] == m, "affine: bias is ", shape_str(b->shape),
             ", expected [", m, "]");
  }
  std::vector<TensorPtr> parents = {x, W};
  if (b) parents.push_back(b);
  auto out = make_node({m}, std::move(parents), [m, n](Tensor& self) {
    Tensor& x = *self.parents[0];
    Tensor& W = *self.parents[1];
    Tensor* b = self.parents.size() > 2 ? self.parents[2].get() : nullptr;
    for (int i = 0; i < m; ++i) {
      double g = self.grad[i];
      if (g == 0.0) continue;
      const double* wrow = W.value.data() + static_cast<size_t>(i) * n;
      if (x.requires_grad) {
        for (int j = 0; j < n; ++j) x.grad[j] += g * wrow[j];
      }
      if (W.requires_grad) {
        double* gw = W.grad.data() + static_cast<size_t>(i) * n;
        for (int j = 0; j < n; ++j) gw[j] += g * x.value[j];
      }
      if (b && b->requires_grad) b->grad[i] += g;
    }
  });
  for (int i = 0; i < m; ++i) {
    const double* wrow = W->value.data() + static_cast<size_t>(i) * n;
    double s = b ? b->value[i] : 0.0;
    for (int j = 0; j < n; ++j) s += wrow[j] * x->value[j];
    out->value[i] = s;
  }
  return out;
}

TensorPtr linear(const TensorPtr& X, const TensorPtr& W, const TensorPtr& b) {
  JL_CHECK(X->shape.size() == 2 && W->shape.size() == 2,
           "linear: expected matrices, got ", shape_str(X->shape), " and ",
           shape_str(W->shape));
  int n = X->shape[0], in = X->shape[1];
  int out_dim = W->shape[0];
  JL_CHECK(W->shape[1] == in, "linear: inner dimensions disagree: X is ", shape_str(X->shape),
           ", W is ", shape_str(W->shape));
  if (b) {
    JL_CHECK(b->shape.size() == 1 && b->shape[0] == out_dim, "linear: bias is ",
             shape_str(b->shape), ", expected [", out_dim, "]");
  }
  std::vector<TensorPtr> parents = {X, W};
  if (b) parents.push_back(b);
  auto out = make_node({n, out_dim}, std::move(parents), [n, in, out_dim](Tensor& self) {
    Tensor& X = *self.parents[0];
    Tensor& W = *self.parents[1];
    Tensor* b = self.parents.size() > 2 ? self.parents[2].get() : nullptr;
    for (int r = 0; r < n; ++r) {
      const double* gy = self.grad.data() + static_cast<size_t>(r) * out_dim;
      const double* xr = X.value.data() + static_cast<size_t>(r) * in;
      double* gx = X.requires_grad ? X.grad.data() + static_cast<size_t>(r) * in : nullptr;
      for (int o = 0; o < out_dim; ++o) {
        double g = gy[o];
        if (g == 0.0) continue;
        const double* wrow = W.value.data() + static_cast<size_t>(o) * in;
        if (gx) {
          for (int j = 0; j < in; ++j) gx[j] += g * wrow[j];
        }
        if (W.requires_grad) {
          double* gw = W.grad.data() + static_cast<size_t>(o) * in;
          for (int j = 0; j < in; ++j) gw[j] += g * xr[j];
        }
        if (b && b->requires_grad) b->grad[o] += g;
      }
    }
  });
  for (int r = 0; r < n; ++r) {
    const double* xr = X->value.data() + static_cast<size_t>(r) * in;
    double* yr = out->value.data() + static_cast<size_t>(r) * out_dim;
    for (int o = 0; o < out_dim; ++o) {
      const double* wrow = W->value.data() + static_cast<size_t>(o) * in;
      double s = b ? b->value[o] : 0.0;
      for (int j = 0; j < in; ++j) s += wrow[j] * xr[j];
      yr[o] = s;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Softmax family.
// ---------------------------------------------------------------------------

TensorPtr log_softmax(const TensorPtr& v) {
  JL_CHECK(v->shape.size() == 1 && v->shape[0] > 0,
           "log_softmax: expected a non-empty vector, got ", shape_str(v->shape));
  int n = v->shape[0];
  auto out = make_node({n}, {v}, [n](Tensor& self) {
    Tensor& v = *self.parents[0];
    double gsum = 0.0;
    for (int i = 0; i < n; ++i) gsum += self.grad[i];
    for (int i = 0; i < n; ++i) {
      v.grad[i] += self.grad[i] - std::exp(self.value[i]) * gsum;
    }
  });
  double lse = row_logsumexp(v->value.data(), n);
  JL_CHECK(is_finite(lse), "log_softmax: non-finite input");
  for (int i = 0; i < n; ++i) out->value[i] = v->value[i] - lse;
  return out;
}

TensorPtr log_softmax_rows(const TensorPtr& X) {
  JL_CHECK(X->shape.size() == 2 && X->shape[1] > 0,
           "log_softmax_rows: expected [n x V] with V > 0, got ", shape_str(X->shape));
  int n = X->shape[0], V = X->shape[1];
  auto out = make_node({n, V}, {X}, [n, V](Tensor& self) {
    Tensor& X = *self.parents[0];
    for (int r = 0; r < n; ++r) {
      const double* g = self.grad.data() + static_cast<size_t>(r) * V;
      const double* y = self.value.data() + static_cast<size_t>(r) * V;
      double* gx = X.grad.data() + static_cast<size_t>(r) * V;
      double gsum = 0.0;
      for (int j = 0; j < V; ++j) gsum += g[j];
      for (int j = 0; j < V; ++j) gx[j] += g[j] - std::exp(y[j]) * gsum;
    }
  });
  for (int r = 0; r < n; ++r) {
    const double* xr = X->value.data() + static_cast<size_t>(r) * V;
    double* yr = out->value.data() + static_cast<size_t>(r) * V;
    double lse = row_logsumexp(xr, V);
    for (int j = 0; j < V; ++j) yr[j] = xr[j] - lse;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Indexing / shaping.
// ---------------------------------------------------------------------------

TensorPtr pick(const TensorPtr& v, int index) {
  JL_CHECK(index >= 0 && index < static_cast<int>(v->value.size()),
           "pick: index ", index, " out of range for ", shape_str(v->shape));
  auto out = make_node({1}, {v}, [index](Tensor& self) {
    self.parents[0]->grad[index] += self.grad[0];
  });
  out->value[0] = v->value[index];
  return out;
}

TensorPtr slice(const TensorPtr& v, int offset, int length) {
  JL_CHECK(v->shape.size() == 1, "slice: expected a vector");
  JL_CHECK(offset >= 0 && length >= 0 && offset + length <= v->shape[0],
           "slice: range [", offset, ", ", offset + length, ") out of bounds for ",
           shape_str(v->shape));
  auto out = make_node({length}, {v}, [offset, length](Tensor& self) {
    Tensor& v = *self.parents[0];
    for (int i = 0; i < length; ++i) v.grad[offset + i] += self.grad[i];
  });
  for (int i = 0; i < length; ++i) out->value[i] = v->value[offset + i];
  return out;
}

TensorPtr append_const_cols(const TensorPtr& X, const std::vector<double>& extra) {
  JL_CHECK(X->shape.size() == 2, "append_const_cols: expected a matrix");
  int n = X->shape[0], d = X->shape[1];
  int k = static_cast<int>(extra.size());
  auto out = make_node({n, d + k}, {X}, [n, d, k](Tensor& self) {
    Tensor& X = *self.parents[0];
    for (int r = 0; r < n; ++r) {
      const double* g = self.grad.data() + static_cast<size_t>(r) * (d + k);
      double* gx = X.grad.data() + static_cast<size_t>(r) * d;
      for (int j = 0; j < d; ++j) gx[j] += g[j];
    }
  });
  for (int r = 0; r < n; ++r) {
    const double* xr = X->value.data() + static_cast<size_t>(r) * d;
    double* yr = out->value.data() + static_cast<size_t>(r) * (d + k);
    std::copy(xr, xr + d, yr);
    std::copy(extra.begin(), extra.end(), yr + d);
  }
  return out;
}

TensorPtr embedding_rows(const TensorPtr& table, const std::vector<int>& ids) {
  JL_CHECK(table->shape.size() == 2, "embedding_rows: table must be [R x d]");
  int R = table->shape[0], d = table->shape[1];
  int n = static_cast<int>(ids.size());
  for (int id : ids) {
    JL_CHECK(id >= 0 && id < R, "embedding_rows: id ", id, " out of range [0, ", R, ")");
  }
  auto ids_copy = ids;
  auto out = make_node({n, d}, {table}, [ids_copy, d](Tensor& self) {
    Tensor& table = *self.parents[0];
    for (size_t r = 0; r < ids_copy.size(); ++r) {
      const double* g = self.grad.data() + r * d;
      double* gt = table.grad.data() + static_cast<size_t>(ids_copy[r]) * d;
      for (int j = 0; j < d; ++j) gt[j] += g[j];
    }
  });
  for (int r = 0; r < n; ++r) {
    const double* src = table->value.data() + static_cast<size_t>(ids[r]) * d;
    std::copy(src, src + d, out->value.data() + static_cast<size_t>(r) * d);
  }
  return out;
}

TensorPtr embedding_context_sum(const std::vector<TensorPtr>& tables,
                                const std::vector<std::vector<int>>& ctx) {
  JL_CHECK(!tables.empty(), "embedding_context_sum: no tables");
  int K = static_cast<int>(tables.size());
  int d = tables[0]->shape[1];
  for (const auto& t : tables) {
    JL_CHECK(t->shape.size() == 2 && t->shape[1] == d,
             "embedding_context_sum: tables must share the embedding dim");
  }
  int n = static_cast<int>(ctx.size());
  for (const auto& row : ctx) {
    JL_CHECK(static_cast<int>(row.size()) == K,
             "embedding_context_sum: context width must equal table count");
    for (int k = 0; k < K; ++k) {
      JL_CHECK(row[k] >= 0 && row[k] < tables[k]->shape[0],
               "embedding_context_sum: id out of range");
    }
  }
  auto ctx_copy = ctx;
  auto out = make_node({n, d}, {tables.begin(), tables.end()}, [ctx_copy, d, K](Tensor& self) {
    for (size_t r = 0; r < ctx_copy.size(); ++r) {
      const double* g = self.grad.data() + r * d;
      for (int k = 0; k < K; ++k) {
        Tensor& table = *self.parents[k];
        if (!table.requires_grad) continue;
        double* gt = table.grad.data() + static_cast<size_t>(ctx_copy[r][k]) * d;
        for (int j = 0; j < d; ++j) gt[j] += g[j];
      }
    }
  });
  std::fill(out->value.begin(), out->value.end(), 0.0);
  for (int r = 0; r < n; ++r) {
    double* yr = out->value.data() + static_cast<size_t>(r) * d;
    for (int k = 0; k < K; ++k) {
      const double* src = tables[k]->value.data() + static_cast<size_t>(ctx[r][k]) * d;
      for (int j = 0; j < d; ++j) yr[j] += src[j];
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Recurrent cell.
// ---------------------------------------------------------------------------

namespace detail {

void lstm_step_raw(const double* x, int input_dim, const double* h_prev,
                   const double* c_prev, int hidden, const double* Wx, const double* Wh,
                   const double* b, double* h_out, double* c_out, double* gates_out) {
  // Gate order: input, forget, cell candidate, output.
  std::vector<double> pre(static_cast<size_t>(4) * hidden);
  for (int g = 0; g < 4 * hidden; ++g) {
    const double* wx = Wx + static_cast<size_t>(g) * input_dim;
    const double* wh = Wh + static_cast<size_t>(g) * hidden;
    double s = b[g];
    for (int j = 0; j < input_dim; ++j) s += wx[j] * x[j];
    for (int j = 0; j < hidden; ++j) s += wh[j] * h_prev[j];
    pre[g] = s;
  }
  auto sgm = [](double v) {
    return v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
  };
  for (int j = 0; j < hidden; ++j) {
    double i = sgm(pre[j]);
    double f = sgm(pre[hidden + j]);
    double g = std::tanh(pre[2 * hidden + j]);
    double o = sgm(pre[3 * hidden + j]);
    double c = f * c_prev[j] + i * g;
    c_out[j] = c;
    h_out[j] = o * std::tanh(c);
    if (gates_out) {
      gates_out[j] = i;
      gates_out[hidden + j] = f;
      gates_out[2 * hidden + j] = g;
      gates_out[3 * hidden + j] = o;
    }
  }
}

}  // namespace detail

LstmStepResult recurrent_step(const TensorPtr& x, const TensorPtr& h_prev,
                              const TensorPtr& c_prev, const TensorPtr& Wx,
                              const TensorPtr& Wh, const TensorPtr& b) {
  JL_CHECK(Wx->shape.size() == 2 && Wh->shape.size() == 2 && b->shape.size() == 1,
           "recurrent_step: malformed parameters");
  int hidden = Wh->shape[1];
  JL_CHECK(Wx->shape[0] == 4 * hidden && Wh->shape[0] == 4 * hidden &&
               b->shape[0] == 4 * hidden,
           "recurrent_step: gate blocks must be 4 x hidden; Wx is ", shape_str(Wx->shape),
           ", Wh is ", shape_str(Wh->shape));
  JL_CHECK(x->shape.size() == 1 && x->shape[0] == Wx->shape[1],
           "recurrent_step: input is ", shape_str(x->shape), ", expected [", Wx->shape[1], "]");
  JL_CHECK(h_prev->shape.size() == 1 && h_prev->shape[0] == hidden &&
               c_prev->shape.size() == 1 && c_prev->shape[0] == hidden,
           "recurrent_step: state dims must match the configured hidden size ", hidden);

  TensorPtr pre = add(add(affine(x, Wx), affine(h_prev, Wh)), b);
  TensorPtr i = sigmoid(slice(pre, 0, hidden));
  TensorPtr f = sigmoid(slice(pre, hidden, hidden));
  TensorPtr g = tanh_op(slice(pre, 2 * hidden, hidden));
  TensorPtr o = sigmoid(slice(pre, 3 * hidden, hidden));
  TensorPtr c = add(mul(f, c_prev), mul(i, g));
  TensorPtr h = mul(o, tanh_op(c));
  return {h, c};
}

TensorPtr lstm_sequence(const TensorPtr& x, const TensorPtr& Wx, const TensorPtr& Wh,
                        const TensorPtr& b) {
  JL_CHECK(x->shape.size() == 2, "lstm_sequence: input must be [T x I]");
  int T = x->shape[0], I = x->shape[1];
  int hidden = Wh->shape[1];
  JL_CHECK(Wx->shape.size() == 2 && Wx->shape[0] == 4 * hidden && Wx->shape[1] == I &&
               Wh->shape[0] == 4 * hidden && b->shape[0] == 4 * hidden,
           "lstm_sequence: parameter shapes inconsistent with input ", shape_str(x->shape));

  struct Aux {
    std::vector<double> gates;  // [T x 4H], post-activation (i, f, g, o)
    std::vector<double> cseq;   // [T x H]
  };
  auto aux = std::make_shared<Aux>();
  aux->gates.resize(static_cast<size_t>(T) * 4 * hidden);
  aux->cseq.resize(static_cast<size_t>(T) * hidden);

  auto out = make_node({T, hidden}, {x, Wx, Wh, b}, [aux, T, I, hidden](Tensor& self) {
    Tensor& x = *self.parents[0];
    Tensor& Wx = *self.parents[1];
    Tensor& Wh = *self.parents[2];
    Tensor& b = *self.parents[3];
    const int H = hidden;
    std::vector<double> dh_rec(H, 0.0), dc(H, 0.0), dpre(static_cast<size_t>(4) * H);
    for (int t = T - 1; t >= 0; --t) {
      const double* gates = aux->gates.data() + static_cast<size_t>(t) * 4 * H;
      const double* ct = aux->cseq.data() + static_cast<size_t>(t) * H;
      const double* cprev = t > 0 ? aux->cseq.data() + static_cast<size_t>(t - 1) * H : nullptr;
      const double* hprev = t > 0 ? self.value.data() + static_cast<size_t>(t - 1) * H : nullptr;
      const double* gh = self.grad.data() + static_cast<size_t>(t) * H;
      for (int j = 0; j < H; ++j) {
        double dh = gh[j] + dh_rec[j];
        double i = gates[j], f = gates[H + j], g = gates[2 * H + j], o = gates[3 * H + j];
        double tc = std::tanh(ct[j]);
        double dcj = dc[j] + dh * o * (1.0 - tc * tc);
        double cp = cprev ? cprev[j] : 0.0;
        dpre[j] = dcj * g * i * (1.0 - i);                 // input gate
        dpre[H + j] = dcj * cp * f * (1.0 - f);            // forget gate
        dpre[2 * H + j] = dcj * i * (1.0 - g * g);         // cell candidate
        dpre[3 * H + j] = dh * tc * o * (1.0 - o);         // output gate
        dc[j] = dcj * f;
      }
      const double* xt = x.value.data() + static_cast<size_t>(t) * I;
      double* gx = x.requires_grad ? x.grad.data() + static_cast<size_t>(t) * I : nullptr;
      std::fill(dh_rec.begin(), dh_rec.end(), 0.0);
      for (int g = 0; g < 4 * H; ++g) {
        double d = dpre[g];
        if (d == 0.0) continue;
        if (b.requires_grad) b.grad[g] += d;
        const double* wx = Wx.value.data() + static_cast<size_t>(g) * I;
        const double* wh = Wh.value.data() + static_cast<size_t>(g) * H;
        if (gx) {
          for (int j = 0; j < I; ++j) gx[j] += d * wx[j];
        }
        if (Wx.requires_grad) {
          double* gwx = Wx.grad.data() + static_cast<size_t>(g) * I;
          for (int j = 0; j < I; ++j) gwx[j] += d * xt[j];
        }
        if (hprev) {
          if (Wh.requires_grad) {
            double* gwh = Wh.grad.data() + static_cast<size_t>(g) * H;
            for (int j = 0; j < H; ++j) gwh[j] += d * hprev[j];
          }
          for (int j = 0; j < H; ++j) dh_rec[j] += d * wh[j];
        }
      }
    }
  });

  std::vector<double> h_prev(hidden, 0.0), c_prev(hidden, 0.0);
  for (int t = 0; t < T; ++t) {
    double* h_out = out->value.data() + static_cast<size_t>(t) * hidden;
    double* c_out = aux->cseq.data() + static_cast<size_t>(t) * hidden;
    double* gates = aux->gates.data() + static_cast<size_t>(t) * 4 * hidden;
    detail::lstm_step_raw(x->value.data() + static_cast<size_t>(t) * I, I, h_prev.data(),
                          c_prev.data(), hidden, Wx->value.data(), Wh->value.data(),
                          b->value.data(), h_out, c_out, gates);
    std::copy(h_out, h_out + hidden, h_prev.begin());
    std::copy(c_out, c_out + hidden, c_prev.begin());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Loss heads.
// ---------------------------------------------------------------------------

TensorPtr cross_entropy_rows(const TensorPtr& logits, const std::vector<int>& targets) {
  JL_CHECK(logits->shape.size() == 2, "cross_entropy_rows: logits must be [n x V]");
  int n = logits->shape[0], V = logits->shape[1];
  JL_CHECK(static_cast<int>(targets.size()) == n,
           "cross_entropy_rows: ", targets.size(), " targets for ", n, " rows");
  for (int y : targets) {
    JL_CHECK(y >= 0 && y < V, "cross_entropy_rows: target ", y, " out of range [0, ", V, ")");
  }
  auto aux = std::make_shared<std::vector<double>>(n);  // per-row logsumexp
  auto targets_copy = targets;
  auto out = make_node({1}, {logits}, [aux, targets_copy, n, V](Tensor& self) {
    Tensor& X = *self.parents[0];
    double g = self.grad[0];
    for (int r = 0; r < n; ++r) {
      const double* xr = X.value.data() + static_cast<size_t>(r) * V;
      double* gx = X.grad.data() + static_cast<size_t>(r) * V;
      double lse = (*aux)[r];
      for (int j = 0; j < V; ++j) gx[j] += g * std::exp(xr[j] - lse);
      gx[targets_copy[r]] -= g;
    }
  });
  double loss = 0.0;
  for (int r = 0; r < n; ++r) {
    const double* xr = logits->value.data() + static_cast<size_t>(r) * V;
    double lse = row_logsumexp(xr, V);
    (*aux)[r] = lse;
    loss += lse - xr[targets[r]];
  }
  out->value[0] = loss;
  return out;
}

TensorPtr kl_divergence_rows(const std::vector<std::vector<double>>& frozen_logprobs,
                             const TensorPtr& logits) {
  JL_CHECK(logits->shape.size() == 2, "kl_divergence_rows: logits must be [n x V]");
  int n = logits->shape[0], V = logits->shape[1];
  JL_CHECK(static_cast<int>(frozen_logprobs.size()) == n,
           "kl_divergence_rows: row count mismatch");
  for (const auto& row : frozen_logprobs) {
    JL_CHECK(static_cast<int>(row.size()) == V, "kl_divergence_rows: row width mismatch");
  }
  auto frozen = std::make_shared<std::vector<std::vector<double>>>(frozen_logprobs);
  auto out = make_node({1}, {logits}, [frozen, n, V](Tensor& self) {
    Tensor& X = *self.parents[0];
    double g = self.grad[0];
    for (int r = 0; r < n; ++r) {
      const double* xr = X.value.data() + static_cast<size_t>(r) * V;
      double* gx = X.grad.data() + static_cast<size_t>(r) * V;
      double lse = row_logsumexp(xr, V);
      const auto& lf = (*frozen)[r];
      for (int j = 0; j < V; ++j) {
        gx[j] += g * (std::exp(xr[j] - lse) - std::exp(lf[j]));
      }
    }
  });
  double total = 0.0;
  for (int r = 0; r < n; ++r) {
    const double* xr = logits->value.data() + static_cast<size_t>(r) * V;
    double lse = row_logsumexp(xr, V);
    const auto& lf = frozen_logprobs[r];
    for (int j = 0; j < V; ++j) {
      total += std::exp(lf[j]) * (lf[j] - (xr[j] - lse));
    }
  }
  out->value[0] = total;
  return out;
}

// ---------------------------------------------------------------------------
// Parameters.
// ---------------------------------------------------------------------------

TensorPtr ParamStore::add(const std::string& name, std::vector<int> shape) {
  JL_CHECK(!items_.count(name), "parameter name '", name, "' already exists");
  auto t = Tensor::zeros(std::move(shape), /*requires_grad=*/true);
  t->ensure_grad();
  items_[name] = Parameter{name, t, true};
  return t;
}

TensorPtr ParamStore::add(const std::string& name, std::vector<int> shape, Rng& rng,
                          double init_scale) {
  auto t = add(name, std::move(shape));
  for (auto& v : t->value) v = rng.uniform(-init_scale, init_scale);
  return t;
}

TensorPtr ParamStore::get(const std::string& name) const {
  auto it = items_.find(name);
  JL_CHECK(it != items_.end(), "unknown parameter '", name, "'");
  return it->second.tensor;
}

Parameter& ParamStore::param(const std::string& name) {
  auto it = items_.find(name);
  JL_CHECK(it != items_.end(), "unknown parameter '", name, "'");
  return it->second;
}

std::vector<std::string> ParamStore::names() const {
  std::vector<std::string> out;
  out.reserve(items_.size());
  for (const auto& [name, p] : items_) out.push_back(name);
  return out;
}

int64_t ParamStore::total_size() const {
  int64_t n = 0;
  for (const auto& [name, p] : items_) n += p.tensor->size();
  return n;
}

void ParamStore::zero_grad() {
  for (auto& [name, p] : items_) {
    p.tensor->ensure_grad();
    p.tensor->zero_grad();
  }
}

void ParamStore::set_all_trainable(bool trainable) {
  for (auto& [name, p] : items_) p.trainable = trainable;
}

ParamStore ParamStore::clone() const {
  ParamStore out;
  for (const auto& [name, p] : items_) {
    auto t = Tensor::from_values(p.tensor->shape, p.tensor->value, /*requires_grad=*/true);
    t->ensure_grad();
    out.items_[name] = Parameter{name, t, p.trainable};
  }
  return out;
}

double fan_in_scale(int fan_in) {
  JL_CHECK(fan_in >= 1, "fan_in_scale: fan_in must be >= 1");
  return 1.0 / std::sqrt(static_cast<double>(fan_in));
}

// ---------------------------------------------------------------------------
// Gradient checking.
// ---------------------------------------------------------------------------

double grad_check(const std::function<TensorPtr()>& f, ParamStore& params, double eps) {
  JL_CHECK(eps > 0.0, "grad_check: eps must be positive");
  params.zero_grad();
  TensorPtr root = f();
  JL_CHECK(root && root->is_scalar(), "grad_check: f must return a scalar");
  JL_CHECK(is_finite(root->value[0]), "grad_check: f evaluated to a non-finite value");
  backward(root);

  std::map<std::string, std::vector<double>> analytic;
  for (const auto& [name, p] : params.items()) {
    if (!p.trainable) continue;
    p.tensor->ensure_grad();
    analytic[name] = p.tensor->grad;
  }

  auto eval = [&]() {
    NoGradGuard guard;
    TensorPtr t = f();
    JL_CHECK(is_finite(t->value[0]), "grad_check: f evaluated to a non-finite value");
    return t->value[0];
  };

  double max_rel = 0.0;
  for (auto& [name, p] : params.items()) {
    if (!p.trainable) continue;
    auto& v = p.tensor->value;
    const auto& ga = analytic[name];
    for (size_t k = 0; k < v.size(); ++k) {
      double orig = v[k];
      v[k] = orig + eps;
      double fp = eval();
      v[k] = orig - eps;
      double fm = eval();
      v[k] = orig;
      double fd = (fp - fm) / (2.0 * eps);
      double a = ga[k];
      // Additive floor so near-zero coordinates are compared absolutely.
      // Central differences carry roundoff noise of about eps_mach * |f| / eps,
      // which would otherwise dominate the ratio whenever |grad| is tiny.
      double denom = std::max(std::fabs(a), std::fabs(fd)) + 1e-4;
      max_rel = std::max(max_rel, std::fabs(a - fd) / denom);
    }
  }
  return max_rel;
}

}  // namespace jeitlab
