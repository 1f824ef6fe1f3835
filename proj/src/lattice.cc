// jeitlab/lattice.cc
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

#include "jeitlab/lattice.h"

#include <algorithm>
#include <cmath>

namespace jeitlab {

namespace {

void check_grid(const LatticeGrid& g) {
  JL_CHECK(g.T >= 1 && g.U >= 0, "lattice: T=", g.T, " U=", g.U);
  JL_CHECK(g.blank_lp.size() == static_cast<size_t>(g.T) * (g.U + 1),
           "lattice: blank grid has ", g.blank_lp.size(), " entries, want ",
           static_cast<size_t>(g.T) * (g.U + 1));
  JL_CHECK(g.label_lp.size() == static_cast<size_t>(g.T) * g.U, "lattice: label grid has ",
           g.label_lp.size(), " entries, want ", static_cast<size_t>(g.T) * g.U);
  for (double v : g.blank_lp) {
    JL_CHECK(std::isfinite(v) || v == kNegInf, "lattice: blank score must be finite or -inf");
  }
  for (double v : g.label_lp) {
    JL_CHECK(std::isfinite(v) || v == kNegInf, "lattice: label score must be finite or -inf");
  }
}

// Forward scores: alpha[t][u] = log-sum over partial paths (0,0) -> (t,u).
// Label arcs keep the frame index, so none enter states at t == T.
std::vector<double> forward_alphas(const LatticeGrid& g) {
  int T = g.T, U = g.U;
  std::vector<double> alpha(static_cast<size_t>(T + 1) * (U + 1), kNegInf);
  auto at = [&](int t, int u) -> double& { return alpha[static_cast<size_t>(t) * (U + 1) + u]; };
  at(0, 0) = 0.0;
  for (int t = 0; t <= T; ++t) {
    for (int u = 0; u <= U; ++u) {
      if (t == 0 && u == 0) continue;
      double v = kNegInf;
      if (t > 0) v = at(t - 1, u) + g.blank(t - 1, u);
      if (u > 0 && t < T) v = log_add(v, at(t, u - 1) + g.label(t, u - 1));
      at(t, u) = v;
    }
  }
  return alpha;
}

// Backward scores: beta[t][u] = log-sum over path suffixes (t,u) -> (T,U).
std::vector<double> backward_betas(const LatticeGrid& g) {
  int T = g.T, U = g.U;
  std::vector<double> beta(static_cast<size_t>(T + 1) * (U + 1), kNegInf);
  auto at = [&](int t, int u) -> double& { return beta[static_cast<size_t>(t) * (U + 1) + u]; };
  at(T, U) = 0.0;
  for (int t = T; t >= 0; --t) {
    for (int u = U; u >= 0; --u) {
      if (t == T && u == U) continue;
      double v = kNegInf;
      if (t < T) {
        v = g.blank(t, u) + at(t + 1, u);
        if (u < U) v = log_add(v, g.label(t, u) + at(t, u + 1));
      }
      at(t, u) = v;
    }
  }
  return beta;
}

}  // namespace

LatticeGrid LatticeGrid::make(int T, int U) {
  JL_CHECK(T >= 1 && U >= 0, "lattice grid: T=", T, " U=", U);
  LatticeGrid g;
  g.T = T;
  g.U = U;
  g.blank_lp.assign(static_cast<size_t>(T) * (U + 1), 0.0);
  g.label_lp.assign(static_cast<size_t>(T) * U, 0.0);
  return g;
}

void LatticeGrid::check_mass() const {
  check_grid(*this);
  for (int t = 0; t < T; ++t) {
    for (int u = 0; u < U; ++u) {
      double mass = std::exp(blank(t, u)) + std::exp(label(t, u));
      JL_CHECK(mass <= 1.0 + 1e-9, "lattice: emission mass ", mass, " at (", t, ",", u, ")");
    }
  }
  for (int t = 0; t < T; ++t) {
    JL_CHECK(std::exp(blank(t, U)) <= 1.0 + 1e-9, "lattice: blank mass > 1 at (", t, ",", U, ")");
  }
}

double forward_loglik(const LatticeGrid& grid) {
  check_grid(grid);
  std::vector<double> alpha = forward_alphas(grid);
  return alpha[static_cast<size_t>(grid.T) * (grid.U + 1) + grid.U];
}

ForwardBackwardResult forward_backward(const LatticeGrid& grid) {
  check_grid(grid);
  int T = grid.T, U = grid.U;
  std::vector<double> alpha = forward_alphas(grid);
  std::vector<double> beta = backward_betas(grid);
  auto a = [&](int t, int u) { return alpha[static_cast<size_t>(t) * (U + 1) + u]; };
  auto b = [&](int t, int u) { return beta[static_cast<size_t>(t) * (U + 1) + u]; };

  ForwardBackwardResult out;
  out.loglik = a(T, U);
  out.blank_occupancy.assign(grid.blank_lp.size(), 0.0);
  out.label_occupancy.assign(grid.label_lp.size(), 0.0);
  if (out.loglik == kNegInf) return out;  // Unreachable; flagged by the -inf.

  for (int t = 0; t < T; ++t) {
    for (int u = 0; u <= U; ++u) {
      out.blank_occupancy[static_cast<size_t>(t) * (U + 1) + u] =
          std::exp(a(t, u) + grid.blank(t, u) + b(t + 1, u) - out.loglik);
      if (u < U) {
        out.label_occupancy[static_cast<size_t>(t) * U + u] =
            std::exp(a(t, u) + grid.label(t, u) + b(t, u + 1) - out.loglik);
      }
    }
  }
  return out;
}

double alignment_score(const LatticeGrid& grid, const Alignment& a) {
  check_grid(grid);
  int t = 0, u = 0;
  double s = 0.0;
  for (ArcKind k : a.arcs) {
    if (k == ArcKind::kBlank) {
      JL_CHECK(t < grid.T, "alignment: blank arc past the last frame");
      s += grid.blank(t, u);
      ++t;
    } else {
      JL_CHECK(t < grid.T && u < grid.U, "alignment: label arc outside the grid");
      s += grid.label(t, u);
      ++u;
    }
  }
  JL_CHECK(t == grid.T && u == grid.U, "alignment: path ends at (", t, ",", u, "), want (",
           grid.T, ",", grid.U, ")");
  return s;
}

namespace {

void enumerate_rec(int T, int U, int t, int u, std::vector<ArcKind>& arcs,
                   std::vector<Alignment>& out) {
  if (t == T && u == U) {
    out.push_back(Alignment{arcs});
    return;
  }
  if (t < T) {
    arcs.push_back(ArcKind::kBlank);
    enumerate_rec(T, U, t + 1, u, arcs, out);
    arcs.pop_back();
    if (u < U) {
      arcs.push_back(ArcKind::kLabel);
      enumerate_rec(T, U, t, u + 1, arcs, out);
      arcs.pop_back();
    }
  }
  // States (T, u < U) are dead ends: no frames remain to emit from.
}

}  // namespace

std::vector<Alignment> enumerate_alignments(int T, int U) {
  JL_CHECK(T >= 1 && U >= 0, "enumerate: T=", T, " U=", U);
  JL_CHECK(T + U <= 22, "enumerate: instance too large (T+U=", T + U, ", limit 22)");
  std::vector<Alignment> out;
  std::vector<ArcKind> arcs;
  arcs.reserve(static_cast<size_t>(T) + U);
  enumerate_rec(T, U, 0, 0, arcs, out);
  return out;
}

std::int64_t path_count(int T, int U) {
  JL_CHECK(T >= 1 && U >= 0, "path_count: T=", T, " U=", U);
  // choose(T-1+U, U): the final blank is pinned to the end of every path.
  std::int64_t c = 1;
  for (int k = 1; k <= U; ++k) c = c * (T - 1 + k) / k;
  return c;
}

double brute_force_likelihood(const LatticeGrid& grid) {
  check_grid(grid);
  JL_CHECK(grid.T + grid.U <= 22, "brute force: instance too large (T+U=", grid.T + grid.U,
           ", limit 22)");
  double total = kNegInf;
  for (const Alignment& a : enumerate_alignments(grid.T, grid.U)) {
    total = log_add(total, alignment_score(grid, a));
  }
  return total;
}

// ---------------------------------------------------------------------------
// Grid scoring against the model joint.
// ---------------------------------------------------------------------------

namespace {

double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}

// out[r] = M x_r for every row of X. Same accumulation order as the cell
// kernels in the models module, so cached rows reproduce them bitwise.
std::vector<double> matvec_rows(const Tensor& M, const Tensor& X) {
  JL_CHECK(M.shape.size() == 2 && X.shape.size() == 2 && M.shape[1] == X.shape[1],
           "lattice matvec: M is ", shape_str(M.shape), ", X is ", shape_str(X.shape));
  int m = M.shape[0], n = M.shape[1], r = X.shape[0];
  std::vector<double> out(static_cast<size_t>(r) * m);
  for (int i = 0; i < r; ++i) {
    const double* x = X.value.data() + static_cast<size_t>(i) * n;
    for (int k = 0; k < m; ++k) {
      const double* row = M.value.data() + static_cast<size_t>(k) * n;
      double s = 0.0;
      for (int j = 0; j < n; ++j) s += row[j] * x[j];
      out[static_cast<size_t>(i) * m + k] = s;
    }
  }
  return out;
}

double row_lse(const double* x, int n) {
  double m = x[0];
  for (int i = 1; i < n; ++i) m = std::max(m, x[i]);
  double s = 0.0;
  for (int i = 0; i < n; ++i) s += std::exp(x[i] - m);
  return m + std::log(s);
}

void lsm_rows_inplace(std::vector<double>& rows, int n) {
  for (size_t off = 0; off < rows.size(); off += n) {
    double lse = row_lse(rows.data() + off, n);
    for (int i = 0; i < n; ++i) rows[off + i] -= lse;
  }
}

// Everything the backward pass needs besides the parents' values. Cached at
// forward time; cheap relative to the per-cell recomputation it avoids.
struct HatStash {
  int T, U, df, dg, dh, V;
  std::vector<int> y;
  std::vector<double> zf;  // T x dh, joint.W1 f_t
  std::vector<double> zg;  // (U+1) x dh, joint.W2 g_u
  LatticeGrid grid;
};

struct MhatStash {
  int T, U, df, dg, db, V;
  std::vector<int> y;
  std::vector<double> a;   // T x V, log-softmaxed acoustic scores
  std::vector<double> l;   // U x V, log-softmaxed label scores
  std::vector<double> z1;  // T x db, blank_joint.W1 f_t
  std::vector<double> z2;  // (U+1) x db, blank_joint.W2 gb_u
  LatticeGrid grid;
};

// Scores every cell from the cached bottleneck rows. h, s, and the label
// softmax match hat_joint exactly.
void hat_fill(HatStash& st, const double* w, const double* W) {
  int dh = st.dh, V = st.V;
  st.grid = LatticeGrid::make(st.T, st.U);
  std::vector<double> h(dh), q(V);
  for (int t = 0; t < st.T; ++t) {
    const double* zf = st.zf.data() + static_cast<size_t>(t) * dh;
    for (int u = 0; u <= st.U; ++u) {
      const double* zg = st.zg.data() + static_cast<size_t>(u) * dh;
      for (int k = 0; k < dh; ++k) h[k] = std::tanh(zf[k] + zg[k]);
      double s = 0.0;
      for (int k = 0; k < dh; ++k) s += w[k] * h[k];
      st.grid.blank(t, u) = log_sigmoid(s);
      if (u < st.U) {
        for (int v = 0; v < V; ++v) {
          const double* row = W + static_cast<size_t>(v) * dh;
          double acc = 0.0;
          for (int k = 0; k < dh; ++k) acc += row[k] * h[k];
          q[v] = acc;
        }
        st.grid.label(t, u) = log_sigmoid(-s) + q[st.y[u]] - row_lse(q.data(), V);
      }
    }
  }
}

// Scores every cell from cached log-softmax rows and blank bottlenecks,
// matching mhat_scores exactly.
void mhat_fill(MhatStash& st, const double* wb) {
  int db = st.db, V = st.V;
  st.grid = LatticeGrid::make(st.T, st.U);
  std::vector<double> hb(db), m(V);
  for (int t = 0; t < st.T; ++t) {
    const double* at = st.a.data() + static_cast<size_t>(t) * V;
    const double* z1 = st.z1.data() + static_cast<size_t>(t) * db;
    for (int u = 0; u <= st.U; ++u) {
      const double* z2 = st.z2.data() + static_cast<size_t>(u) * db;
      for (int k = 0; k < db; ++k) hb[k] = std::tanh(z1[k] + z2[k]);
      double s = 0.0;
      for (int k = 0; k < db; ++k) s += wb[k] * hb[k];
      st.grid.blank(t, u) = log_sigmoid(s);
      if (u < st.U) {
        const double* lu = st.l.data() + static_cast<size_t>(u) * V;
        for (int v = 0; v < V; ++v) m[v] = at[v] + lu[v];
        st.grid.label(t, u) = log_sigmoid(-s) + m[st.y[u]] - row_lse(m.data(), V);
      }
    }
  }
}

void check_transcript(const std::vector<int>& y, int vocab_size) {
  for (int v : y) {
    JL_CHECK(v >= 0 && v < vocab_size, "lattice: transcript token ", v,
             " outside label range [0, ", vocab_size, ")");
  }
}

void check_mat(const Tensor& M, int r, int c, const char* name) {
  JL_CHECK(M.shape.size() == 2 && M.shape[0] == r && M.shape[1] == c, name, " is ",
           shape_str(M.shape), ", want [", r, " x ", c, "]");
}

// Distributes cached row gradients dz [rows x m] of z_r = M x_r:
// M.grad += sum_r dz_r x_r^T and X.grad row r += M^T dz_r.
void distribute_matvec(const std::vector<double>& dz, int m, Tensor& M, Tensor& X) {
  int n = M.shape[1], rows = X.shape[0];
  for (int r = 0; r < rows; ++r) {
    const double* dzr = dz.data() + static_cast<size_t>(r) * m;
    const double* xr = X.value.data() + static_cast<size_t>(r) * n;
    if (M.requires_grad) {
      for (int k = 0; k < m; ++k) {
        if (dzr[k] == 0.0) continue;
        double* gk = M.grad.data() + static_cast<size_t>(k) * n;
        for (int j = 0; j < n; ++j) gk[j] += dzr[k] * xr[j];
      }
    }
    if (X.requires_grad) {
      double* gx = X.grad.data() + static_cast<size_t>(r) * n;
      for (int k = 0; k < m; ++k) {
        if (dzr[k] == 0.0) continue;
        const double* mrow = M.value.data() + static_cast<size_t>(k) * n;
        for (int j = 0; j < n; ++j) gx[j] += mrow[j] * dzr[k];
      }
    }
  }
}

// Reverse pass for the fused negative log-likelihood, shared bottleneck
// variant. Arc occupancies scale the per-cell chain rule:
//   d(-loglik)/d blank_lp = -occ_b, d(-loglik)/d label_lp = -occ_l,
//   blank_lp = log sigmoid(s), label_lp = log sigmoid(-s) + q[y] - lse(q),
//   s = w.h, q = W h, h = tanh(W1 f + W2 g).
void hat_nll_backward(const HatStash& st, Tensor& self) {
  double go = self.grad[0];
  if (go == 0.0) return;
  Tensor& F = *self.parents[0];
  Tensor& G = *self.parents[1];
  Tensor& W1 = *self.parents[2];
  Tensor& W2 = *self.parents[3];
  Tensor& w = *self.parents[4];
  Tensor& W = *self.parents[5];
  int dh = st.dh, V = st.V;

  ForwardBackwardResult fb = forward_backward(st.grid);
  std::vector<double> dzf(st.zf.size(), 0.0);
  std::vector<double> dzg(st.zg.size(), 0.0);
  std::vector<double> h(dh), q(V), dq(V), dhv(dh);
  for (int t = 0; t < st.T; ++t) {
    const double* zf = st.zf.data() + static_cast<size_t>(t) * dh;
    for (int u = 0; u <= st.U; ++u) {
      double occ_b = fb.blank_occupancy[static_cast<size_t>(t) * (st.U + 1) + u];
      double occ_l = u < st.U ? fb.label_occupancy[static_cast<size_t>(t) * st.U + u] : 0.0;
      double dblank = -go * occ_b;
      double dlabel = -go * occ_l;
      if (dblank == 0.0 && dlabel == 0.0) continue;
      const double* zg = st.zg.data() + static_cast<size_t>(u) * dh;
      for (int k = 0; k < dh; ++k) h[k] = std::tanh(zf[k] + zg[k]);
      double s = 0.0;
      for (int k = 0; k < dh; ++k) s += w.value[k] * h[k];

      double ds = dblank * stable_sigmoid(-s) - dlabel * stable_sigmoid(s);
      for (int k = 0; k < dh; ++k) dhv[k] = ds * w.value[k];
      if (dlabel != 0.0) {
        for (int v = 0; v < V; ++v) {
          const double* row = W.value.data() + static_cast<size_t>(v) * dh;
          double acc = 0.0;
          for (int k = 0; k < dh; ++k) acc += row[k] * h[k];
          q[v] = acc;
        }
        double lse = row_lse(q.data(), V);
        int target = st.y[u];
        for (int v = 0; v < V; ++v) {
          dq[v] = dlabel * ((v == target ? 1.0 : 0.0) - std::exp(q[v] - lse));
        }
        for (int v = 0; v < V; ++v) {
          const double* row = W.value.data() + static_cast<size_t>(v) * dh;
          for (int k = 0; k < dh; ++k) dhv[k] += row[k] * dq[v];
        }
        if (W.requires_grad) {
          for (int v = 0; v < V; ++v) {
            double* gr = W.grad.data() + static_cast<size_t>(v) * dh;
            for (int k = 0; k < dh; ++k) gr[k] += dq[v] * h[k];
          }
        }
      }
      if (w.requires_grad) {
        for (int k = 0; k < dh; ++k) w.grad[k] += ds * h[k];
      }
      double* dzf_t = dzf.data() + static_cast<size_t>(t) * dh;
      double* dzg_u = dzg.data() + static_cast<size_t>(u) * dh;
      for (int k = 0; k < dh; ++k) {
        double dz = dhv[k] * (1.0 - h[k] * h[k]);
        dzf_t[k] += dz;
        dzg_u[k] += dz;
      }
    }
  }
  distribute_matvec(dzf, dh, W1, F);
  distribute_matvec(dzg, dh, W2, G);
}

// Reverse pass for the modular variant. The label side renormalizes the sum
// of two log-softmax rows, so per-cell gradients accumulate into per-frame
// and per-row score gradients first, then chain through each log-softmax.
void mhat_nll_backward(const MhatStash& st, Tensor& self) {
  double go = self.grad[0];
  if (go == 0.0) return;
  Tensor& F = *self.parents[0];
  Tensor& G = *self.parents[1];
  Tensor& GB = *self.parents[2];
  Tensor& W3 = *self.parents[3];
  Tensor& W4 = *self.parents[4];
  Tensor& W1b = *self.parents[5];
  Tensor& W2b = *self.parents[6];
  Tensor& wb = *self.parents[7];
  int db = st.db, V = st.V;

  ForwardBackwardResult fb = forward_backward(st.grid);
  std::vector<double> da(static_cast<size_t>(st.T) * V, 0.0);
  std::vector<double> dl(static_cast<size_t>(st.U) * V, 0.0);
  std::vector<double> dz1(st.z1.size(), 0.0);
  std::vector<double> dz2(st.z2.size(), 0.0);
  std::vector<double> hb(db), m(V);
  for (int t = 0; t < st.T; ++t) {
    const double* at = st.a.data() + static_cast<size_t>(t) * V;
    const double* z1 = st.z1.data() + static_cast<size_t>(t) * db;
    for (int u = 0; u <= st.U; ++u) {
      double occ_b = fb.blank_occupancy[static_cast<size_t>(t) * (st.U + 1) + u];
      double occ_l = u < st.U ? fb.label_occupancy[static_cast<size_t>(t) * st.U + u] : 0.0;
      double dblank = -go * occ_b;
      double dlabel = -go * occ_l;
      if (dblank == 0.0 && dlabel == 0.0) continue;
      const double* z2 = st.z2.data() + static_cast<size_t>(u) * db;
      for (int k = 0; k < db; ++k) hb[k] = std::tanh(z1[k] + z2[k]);
      double s = 0.0;
      for (int k = 0; k < db; ++k) s += wb.value[k] * hb[k];

      double ds = dblank * stable_sigmoid(-s) - dlabel * stable_sigmoid(s);
      if (dlabel != 0.0) {
        const double* lu = st.l.data() + static_cast<size_t>(u) * V;
        for (int v = 0; v < V; ++v) m[v] = at[v] + lu[v];
        double lse = row_lse(m.data(), V);
        int target = st.y[u];
        double* da_t = da.data() + static_cast<size_t>(t) * V;
        double* dl_u = dl.data() + static_cast<size_t>(u) * V;
        for (int v = 0; v < V; ++v) {
          double dm = dlabel * ((v == target ? 1.0 : 0.0) - std::exp(m[v] - lse));
          da_t[v] += dm;
          dl_u[v] += dm;
        }
      }
      if (wb.requires_grad) {
        for (int k = 0; k < db; ++k) wb.grad[k] += ds * hb[k];
      }
      double* dz1_t = dz1.data() + static_cast<size_t>(t) * db;
      double* dz2_u = dz2.data() + static_cast<size_t>(u) * db;
      for (int k = 0; k < db; ++k) {
        double dz = ds * wb.value[k] * (1.0 - hb[k] * hb[k]);
        dz1_t[k] += dz;
        dz2_u[k] += dz;
      }
    }
  }

  // a = log_softmax(W3 f): dq = da - softmax . sum(da), softmax = exp(a).
  std::vector<double> dq(V);
  std::vector<double> dq3(static_cast<size_t>(st.T) * V, 0.0);
  for (int t = 0; t < st.T; ++t) {
    const double* da_t = da.data() + static_cast<size_t>(t) * V;
    const double* at = st.a.data() + static_cast<size_t>(t) * V;
    double sum = 0.0;
    for (int v = 0; v < V; ++v) sum += da_t[v];
    double* out = dq3.data() + static_cast<size_t>(t) * V;
    for (int v = 0; v < V; ++v) out[v] = da_t[v] - std::exp(at[v]) * sum;
  }
  std::vector<double> dq4(static_cast<size_t>(st.U) * V, 0.0);
  for (int u = 0; u < st.U; ++u) {
    const double* dl_u = dl.data() + static_cast<size_t>(u) * V;
    const double* lu = st.l.data() + static_cast<size_t>(u) * V;
    double sum = 0.0;
    for (int v = 0; v < V; ++v) sum += dl_u[v];
    double* out = dq4.data() + static_cast<size_t>(u) * V;
    for (int v = 0; v < V; ++v) out[v] = dl_u[v] - std::exp(lu[v]) * sum;
  }

  distribute_matvec(dq3, V, W3, F);
  distribute_matvec(dz1, db, W1b, F);
  distribute_matvec(dz2, db, W2b, GB);
  if (st.U > 0) {
    Tensor Glabels;  // value view of the first U rows; gradient written back
    Glabels.shape = {st.U, st.dg};
    Glabels.value.assign(G.value.begin(), G.value.begin() + static_cast<size_t>(st.U) * st.dg);
    Glabels.requires_grad = G.requires_grad;
    if (G.requires_grad) Glabels.grad.assign(Glabels.value.size(), 0.0);
    distribute_matvec(dq4, V, W4, Glabels);
    if (G.requires_grad) {
      for (size_t i = 0; i < Glabels.grad.size(); ++i) G.grad[i] += Glabels.grad[i];
    }
  }
}

}  // namespace

TensorPtr transducer_nll(const Model& model, const TensorPtr& F, const TensorPtr& G,
                         const TensorPtr& GB, const std::vector<int>& transcript) {
  const ModelConfig& cfg = model.config;
  check_transcript(transcript, cfg.vocab_size);
  JL_CHECK(F != nullptr && F->shape.size() == 2 && F->rows() >= 1,
           "transducer_nll: encoder output must be [T x d] with T >= 1");
  int T = F->rows();
  int U = static_cast<int>(transcript.size());
  JL_CHECK(G != nullptr && G->shape.size() == 2 && G->rows() == U + 1,
           "transducer_nll: label decoder rows must cover the transcript plus start");
  int V = cfg.vocab_size;

  if (cfg.variant == Variant::kHat) {
    JL_CHECK(GB == nullptr, "transducer_nll: blank rows only apply to the modular variant");
    TensorPtr W1 = model.params.get("joint.W1");
    TensorPtr W2 = model.params.get("joint.W2");
    TensorPtr w = model.params.get("joint.w");
    TensorPtr W = model.params.get("joint.W");
    auto st = std::make_shared<HatStash>();
    st->T = T;
    st->U = U;
    st->df = F->cols();
    st->dg = G->cols();
    st->dh = static_cast<int>(w->value.size());
    st->V = V;
    st->y = transcript;
    check_mat(*W1, st->dh, st->df, "joint.W1");
    check_mat(*W2, st->dh, st->dg, "joint.W2");
    check_mat(*W, V, st->dh, "joint.W");
    st->zf = matvec_rows(*W1, *F);
    st->zg = matvec_rows(*W2, *G);
    hat_fill(*st, w->value.data(), W->value.data());
    double loglik = forward_loglik(st->grid);
    JL_CHECK(std::isfinite(loglik), "transducer_nll: log-likelihood is ", loglik, " (T=", T,
             ", U=", U, ")");
    TensorPtr out = detail::make_op_node(
        {1}, {F, G, W1, W2, w, W}, [st](Tensor& self) { hat_nll_backward(*st, self); });
    out->value[0] = -loglik;
    return out;
  }

  JL_CHECK(GB != nullptr && GB->shape.size() == 2 && GB->rows() == U + 1,
           "transducer_nll: the modular variant needs blank decoder rows for the transcript");
  TensorPtr W3 = model.params.get("am_head.W3");
  TensorPtr W4 = model.params.get("ilm_head.W4");
  TensorPtr W1b = model.params.get("blank_joint.W1");
  TensorPtr W2b = model.params.get("blank_joint.W2");
  TensorPtr wb = model.params.get("blank_joint.w");
  auto st = std::make_shared<MhatStash>();
  st->T = T;
  st->U = U;
  st->df = F->cols();
  st->dg = G->cols();
  st->db = static_cast<int>(wb->value.size());
  st->V = V;
  st->y = transcript;
  check_mat(*W3, V, st->df, "am_head.W3");
  check_mat(*W4, V, st->dg, "ilm_head.W4");
  check_mat(*W1b, st->db, st->df, "blank_joint.W1");
  check_mat(*W2b, st->db, GB->cols(), "blank_joint.W2");
  st->a = matvec_rows(*W3, *F);
  lsm_rows_inplace(st->a, V);
  if (U > 0) {
    Tensor Glabels;
    Glabels.shape = {U, st->dg};
    Glabels.value.assign(G->value.begin(), G->value.begin() + static_cast<size_t>(U) * st->dg);
    st->l = matvec_rows(*W4, Glabels);
    lsm_rows_inplace(st->l, V);
  }
  st->z1 = matvec_rows(*W1b, *F);
  st->z2 = matvec_rows(*W2b, *GB);
  mhat_fill(*st, wb->value.data());
  double loglik = forward_loglik(st->grid);
  JL_CHECK(std::isfinite(loglik), "transducer_nll: log-likelihood is ", loglik, " (T=", T,
           ", U=", U, ")");
  TensorPtr out = detail::make_op_node(
      {1}, {F, G, GB, W3, W4, W1b, W2b, wb},
      [st](Tensor& self) { mhat_nll_backward(*st, self); });
  out->value[0] = -loglik;
  return out;
}

double transducer_nll_value(const Model& model, const TensorPtr& features, int domain_id,
                            const std::vector<int>& transcript) {
  NoGradGuard ng;
  LatticeGrid grid = fill_grid(model, features, domain_id, transcript);
  double loglik = forward_loglik(grid);
  JL_CHECK(std::isfinite(loglik), "transducer nll: log-likelihood is ", loglik, " (T=", grid.T,
           ", U=", grid.U, ")");
  return -loglik;
}

LatticeGrid fill_grid(const Model& model, const TensorPtr& features, int domain_id,
                      const std::vector<int>& transcript) {
  NoGradGuard ng;
  const ModelConfig& cfg = model.config;
  check_transcript(transcript, cfg.vocab_size);
  int U = static_cast<int>(transcript.size());
  TensorPtr F = model.encode(features, domain_id);
  TensorPtr G = model.label_decode_rows(transcript, U + 1);
  if (cfg.variant == Variant::kHat) {
    HatStash st;
    st.T = F->rows();
    st.U = U;
    st.df = F->cols();
    st.dg = G->cols();
    const Tensor& w = *model.params.get("joint.w");
    const Tensor& W = *model.params.get("joint.W");
    st.dh = static_cast<int>(w.value.size());
    st.V = cfg.vocab_size;
    st.y = transcript;
    st.zf = matvec_rows(*model.params.get("joint.W1"), *F);
    st.zg = matvec_rows(*model.params.get("joint.W2"), *G);
    hat_fill(st, w.value.data(), W.value.data());
    return std::move(st.grid);
  }
  TensorPtr GB = model.blank_decode_rows(transcript, U + 1);
  MhatStash st;
  st.T = F->rows();
  st.U = U;
  st.df = F->cols();
  st.dg = G->cols();
  const Tensor& wb = *model.params.get("blank_joint.w");
  st.db = static_cast<int>(wb.value.size());
  st.V = cfg.vocab_size;
  st.y = transcript;
  st.a = matvec_rows(*model.params.get("am_head.W3"), *F);
  lsm_rows_inplace(st.a, st.V);
  if (U > 0) {
    Tensor Glabels;  // first U rows only; row U feeds no label arc
    Glabels.shape = {U, st.dg};
    Glabels.value.assign(G->value.begin(), G->value.begin() + static_cast<size_t>(U) * st.dg);
    st.l = matvec_rows(*model.params.get("ilm_head.W4"), Glabels);
    lsm_rows_inplace(st.l, st.V);
  }
  st.z1 = matvec_rows(*model.params.get("blank_joint.W1"), *F);
  st.z2 = matvec_rows(*model.params.get("blank_joint.W2"), *GB);
  mhat_fill(st, wb.value.data());
  return std::move(st.grid);
}

}  // namespace jeitlab
