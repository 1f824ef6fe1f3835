// jeitlab/lattice.h
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

// Alignment lattice for transducer training: per-arc log-probabilities over
// the (frame, label) grid, forward-backward in the log domain, a path
// enumeration oracle for small grids, and a fused differentiable negative
// log-likelihood op.

#ifndef JEITLAB_LATTICE_H_
#define JEITLAB_LATTICE_H_

#include <cstdint>
#include <vector>

#include "jeitlab/model.h"
#include "jeitlab/tensor.h"

namespace jeitlab {

// Arc scores over lattice states (t, u), t in [0, T], u in [0, U].
//   blank arc (t, u) -> (t+1, u): consumes frame t, scored blank(t, u).
//   label arc (t, u) -> (t, u+1): emits transcript token u, scored
//   label(t, u). Label arcs exist only for t < T, so every complete path
//   from (0, 0) to (T, U) ends with the blank arc of frame T-1 at u = U.
// A complete path has exactly T blank arcs and U label arcs, and there are
// choose(T-1+U, U) such paths.
struct LatticeGrid {
  int T = 0;
  int U = 0;
  std::vector<double> blank_lp;  // T x (U+1), row-major over t.
  std::vector<double> label_lp;  // T x U, empty when U == 0.

  static LatticeGrid make(int T, int U);

  double blank(int t, int u) const { return blank_lp[static_cast<size_t>(t) * (U + 1) + u]; }
  double& blank(int t, int u) { return blank_lp[static_cast<size_t>(t) * (U + 1) + u]; }
  double label(int t, int u) const { return label_lp[static_cast<size_t>(t) * U + u]; }
  double& label(int t, int u) { return label_lp[static_cast<size_t>(t) * U + u]; }

  // Every entry must be finite or -inf, and per cell the blank and label
  // emission mass may not exceed 1 (up to 1e-9 slack).
  void check_mass() const;
};

enum class ArcKind : std::uint8_t { kBlank, kLabel };

// One complete lattice path, as the arc sequence taken from (0, 0). Valid
// paths consume exactly T blank and U label arcs and never emit a label once
// all frames are used up.
struct Alignment {
  std::vector<ArcKind> arcs;
};

// Sum of arc scores along the path. Rejects paths that leave the grid.
double alignment_score(const LatticeGrid& grid, const Alignment& a);

// All complete paths for a T x U grid, in depth-first order. Rejects
// T + U > 22.
std::vector<Alignment> enumerate_alignments(int T, int U);

struct ForwardBackwardResult {
  double loglik = kNegInf;  // -inf when the transcript is unreachable.
  // Posterior expected arc counts, same layout as the grids. They sum to T
  // and U respectively, and equal d loglik / d arc_lp.
  std::vector<double> blank_occupancy;
  std::vector<double> label_occupancy;
};

// Log-likelihood of the full grid by the forward recursion alone.
double forward_loglik(const LatticeGrid& grid);

ForwardBackwardResult forward_backward(const LatticeGrid& grid);

// Exact enumeration of every complete path. Rejects T + U > 22.
double brute_force_likelihood(const LatticeGrid& grid);

// Closed-form number of complete paths, choose(T-1+U, U), for cross-checking
// the enumeration.
std::int64_t path_count(int T, int U);

// Scores the whole grid with the model's joint. Tape-free; meant for
// evaluation and tests. Encodes features internally.
LatticeGrid fill_grid(const Model& model, const TensorPtr& features, int domain_id,
                      const std::vector<int>& transcript);

// Negative log-likelihood of the transcript, on the tape. F is the encoder
// output [T x d], G the label decoder rows [(U+1) x d]; GB the blank decoder
// rows (required for the modular variant, must be null otherwise). One node
// per utterance: backward rebuilds the grid and the forward-backward pass and
// hand-propagates arc occupancies through the joint into F, G, GB and the
// joint parameters. Fails if the likelihood is not finite.
TensorPtr transducer_nll(const Model& model, const TensorPtr& F, const TensorPtr& G,
                         const TensorPtr& GB, const std::vector<int>& transcript);

// Convenience wrapper: encode + decode + score, tape-free, returns the NLL.
double transducer_nll_value(const Model& model, const TensorPtr& features, int domain_id,
                            const std::vector<int>& transcript);

}  // namespace jeitlab

#endif  // JEITLAB_LATTICE_H_
