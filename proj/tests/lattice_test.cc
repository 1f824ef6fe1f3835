// tests/lattice_test.cc
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

#include <cmath>
#include <cstring>
#include <limits>
#include <set>
#include <vector>

#include "doctest.h"
#include "jeitlab/rng.h"

using namespace jeitlab;

namespace {

ModelConfig tiny_hat() {
  ModelConfig c;
  c.variant = Variant::kHat;
  c.vocab_size = 5;
  c.feature_dim = 3;
  c.num_domains = 2;
  c.encoder_layers = 1;
  c.encoder_dim = 4;
  c.label_decoder.kind = LabelDecoderKind::kRecurrent;
  c.label_decoder.layers = 1;
  c.label_decoder.width = 4;
  c.joint_dim = 3;
  c.blank_decoder_dim = 0;
  c.text_encoder.layers = 1;
  c.text_encoder.injection_layer = 0;
  return c;
}

ModelConfig tiny_mhat() {
  ModelConfig c = tiny_hat();
  c.variant = Variant::kMhat;
  c.joint_dim = 0;
  c.blank_decoder_dim = 3;
  c.label_decoder.kind = LabelDecoderKind::kV2Embed;
  c.label_decoder.embed_dim = 4;
  return c;
}

TensorPtr random_features(int T, int d, uint64_t seed) {
  Rng rng(seed);
  std::vector<double> v(static_cast<size_t>(T) * d);
  for (auto& x : v) x = rng.uniform(-1.0, 1.0);
  return Tensor::from_values({T, d}, v);
}

// Arbitrary real-valued arc scores. The DP never assumes normalized masses.
LatticeGrid random_grid(int T, int U, uint64_t seed, double neginf_prob = 0.0) {
  Rng rng(seed);
  LatticeGrid g = LatticeGrid::make(T, U);
  for (auto& v : g.blank_lp) v = rng.bernoulli(neginf_prob) ? kNegInf : rng.normal(0.0, 1.5);
  for (auto& v : g.label_lp) v = rng.bernoulli(neginf_prob) ? kNegInf : rng.normal(0.0, 1.5);
  return g;
}

std::int64_t binomial(int n, int k) {
  std::int64_t c = 1;
  for (int i = 1; i <= k; ++i) c = c * (n - k + i) / i;
  return c;
}

}  // namespace

TEST_CASE("path enumeration matches the closed form and stays in the grid") {
  CHECK(path_count(1, 0) == 1);
  CHECK(path_count(2, 1) == 2);
  CHECK(path_count(3, 2) == 6);
  CHECK(path_count(7, 0) == 1);
  for (int T = 1; T <= 5; ++T) {
    for (int U = 0; U <= 4; ++U) {
      auto paths = enumerate_alignments(T, U);
      CHECK(static_cast<std::int64_t>(paths.size()) == path_count(T, U));
      CHECK(path_count(T, U) == binomial(T - 1 + U, U));
      std::set<std::vector<ArcKind>> distinct;
      for (const auto& p : paths) {
        CHECK(static_cast<int>(p.arcs.size()) == T + U);
        int blanks = 0;
        for (ArcKind k : p.arcs) blanks += k == ArcKind::kBlank ? 1 : 0;
        CHECK(blanks == T);
        // A full frame count with labels still pending would strand the path.
        CHECK(p.arcs.back() == ArcKind::kBlank);
        distinct.insert(p.arcs);
      }
      CHECK(distinct.size() == paths.size());
    }
  }
  CHECK_THROWS_AS(enumerate_alignments(20, 3), Error);
}

TEST_CASE("alignment scoring walks the stored arcs") {
  LatticeGrid g = LatticeGrid::make(2, 1);
  g.blank(0, 0) = -1.0;
  g.blank(0, 1) = -2.0;
  g.blank(1, 0) = -4.0;
  g.blank(1, 1) = -8.0;
  g.label(0, 0) = -16.0;
  g.label(1, 0) = -32.0;

  Alignment label_first{{ArcKind::kLabel, ArcKind::kBlank, ArcKind::kBlank}};
  CHECK(alignment_score(g, label_first) == doctest::Approx(-16.0 - 2.0 - 8.0));
  Alignment blank_first{{ArcKind::kBlank, ArcKind::kLabel, ArcKind::kBlank}};
  CHECK(alignment_score(g, blank_first) == doctest::Approx(-1.0 - 32.0 - 8.0));

  Alignment short_path{{ArcKind::kBlank, ArcKind::kBlank}};
  CHECK_THROWS_AS(alignment_score(g, short_path), Error);
  Alignment stranded{{ArcKind::kBlank, ArcKind::kBlank, ArcKind::kLabel}};
  CHECK_THROWS_AS(alignment_score(g, stranded), Error);
}

TEST_CASE("single-arc and single-path grids") {
  LatticeGrid g = LatticeGrid::make(1, 0);
  g.blank(0, 0) = -0.75;
  CHECK(forward_loglik(g) == doctest::Approx(-0.75));
  CHECK(brute_force_likelihood(g) == doctest::Approx(-0.75));

  // All-blank path at probability 1.
  LatticeGrid certain = LatticeGrid::make(4, 0);
  CHECK(forward_loglik(certain) == doctest::Approx(0.0));

  // One viable path through a label: the rest is walled off.
  LatticeGrid walled = LatticeGrid::make(3, 1);
  for (auto& v : walled.blank_lp) v = kNegInf;
  for (auto& v : walled.label_lp) v = kNegInf;
  walled.label(0, 0) = 0.0;
  walled.blank(0, 1) = 0.0;
  walled.blank(1, 1) = 0.0;
  walled.blank(2, 1) = 0.0;
  CHECK(forward_loglik(walled) == doctest::Approx(0.0));
  CHECK(brute_force_likelihood(walled) == doctest::Approx(0.0));
}

TEST_CASE("two-path grid matches the hand-computed log-sum-exp") {
  LatticeGrid g = LatticeGrid::make(2, 1);
  g.blank(0, 0) = -0.3;
  g.blank(0, 1) = -0.9;
  g.blank(1, 0) = -1.7;
  g.blank(1, 1) = -0.2;
  g.label(0, 0) = -1.1;
  g.label(1, 0) = -0.6;
  // Emit then march: label(0,0) blank(0,1) blank(1,1).
  double early = -1.1 + -0.9 + -0.2;
  // March then emit: blank(0,0) label(1,0) blank(1,1).
  double late = -0.3 + -0.6 + -0.2;
  double expected = log_add(early, late);
  CHECK(forward_loglik(g) == doctest::Approx(expected).epsilon(1e-12));
  CHECK(brute_force_likelihood(g) == doctest::Approx(expected).epsilon(1e-12));
  CHECK(enumerate_alignments(2, 1).size() == 2);
}

TEST_CASE("forward DP equals brute-force enumeration on random grids") {
  Rng rng(2026);
  int checked = 0;
  for (int i = 0; i < 200; ++i) {
    int T = static_cast<int>(rng.uniform_int(1, 8));
    int U = static_cast<int>(rng.uniform_int(0, 12 - T));
    double pinf = i % 4 == 3 ? 0.15 : 0.0;  // every fourth grid has holes
    LatticeGrid g = random_grid(T, U, Rng::derive_seed(99, "grid", i), pinf);
    double dp = forward_loglik(g);
    double bf = brute_force_likelihood(g);
    if (dp == kNegInf || bf == kNegInf) {
      CHECK(dp == bf);
    } else {
      CHECK(std::abs(dp - bf) < 1e-9);
    }
    ++checked;
  }
  CHECK(checked == 200);
}

TEST_CASE("occupancies are arc-score gradients and sum to T and U") {
  for (int i = 0; i < 20; ++i) {
    int T = 2 + i % 4;
    int U = 1 + i % 3;
    LatticeGrid g = random_grid(T, U, Rng::derive_seed(7, "occ", i));
    ForwardBackwardResult fb = forward_backward(g);
    REQUIRE(std::isfinite(fb.loglik));

    double blank_total = 0.0, label_total = 0.0;
    for (double v : fb.blank_occupancy) blank_total += v;
    for (double v : fb.label_occupancy) label_total += v;
    CHECK(blank_total == doctest::Approx(T).epsilon(1e-9));
    CHECK(label_total == doctest::Approx(U).epsilon(1e-9));

    // Central differences on a couple of arcs per grid.
    Rng pick(Rng::derive_seed(7, "pick", i));
    const double h = 1e-6;
    for (int probe = 0; probe < 2; ++probe) {
      int t = static_cast<int>(pick.uniform_int(0, T - 1));
      int u = static_cast<int>(pick.uniform_int(0, U));
      double saved = g.blank(t, u);
      g.blank(t, u) = saved + h;
      double up = forward_loglik(g);
      g.blank(t, u) = saved - h;
      double down = forward_loglik(g);
      g.blank(t, u) = saved;
      double fd = (up - down) / (2.0 * h);
      CHECK(fb.blank_occupancy[static_cast<size_t>(t) * (U + 1) + u] ==
            doctest::Approx(fd).epsilon(1e-5));

      int ul = static_cast<int>(pick.uniform_int(0, U - 1));
      saved = g.label(t, ul);
      g.label(t, ul) = saved + h;
      up = forward_loglik(g);
      g.label(t, ul) = saved - h;
      down = forward_loglik(g);
      g.label(t, ul) = saved;
      fd = (up - down) / (2.0 * h);
      CHECK(fb.label_occupancy[static_cast<size_t>(t) * U + ul] ==
            doctest::Approx(fd).epsilon(1e-5));
    }
  }
}

TEST_CASE("raising a used arc raises the likelihood") {
  LatticeGrid g = random_grid(4, 2, 515);
  ForwardBackwardResult fb = forward_backward(g);
  double base = fb.loglik;
  for (int t = 0; t < g.T; ++t) {
    for (int u = 0; u <= g.U; ++u) {
      if (fb.blank_occupancy[static_cast<size_t>(t) * (g.U + 1) + u] < 1e-6) continue;
      LatticeGrid bumped = g;
      bumped.blank(t, u) += 0.1;
      CHECK(forward_loglik(bumped) > base);
    }
  }
  for (int t = 0; t < g.T; ++t) {
    for (int u = 0; u < g.U; ++u) {
      if (fb.label_occupancy[static_cast<size_t>(t) * g.U + u] < 1e-6) continue;
      LatticeGrid bumped = g;
      bumped.label(t, u) += 0.1;
      CHECK(forward_loglik(bumped) > base);
    }
  }
}

TEST_CASE("unreachable transcripts are flagged with -inf and zero occupancy") {
  LatticeGrid g = random_grid(3, 2, 81);
  for (int t = 0; t < g.T; ++t) g.label(t, 0) = kNegInf;  // first label blocked
  ForwardBackwardResult fb = forward_backward(g);
  CHECK(fb.loglik == kNegInf);
  for (double v : fb.blank_occupancy) CHECK(v == 0.0);
  for (double v : fb.label_occupancy) CHECK(v == 0.0);
}

TEST_CASE("grids reject NaN and +inf entries") {
  LatticeGrid g = LatticeGrid::make(2, 1);
  g.blank(0, 0) = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(forward_loglik(g), Error);
  g.blank(0, 0) = 0.0;
  g.label(1, 0) = std::numeric_limits<double>::infinity();
  CHECK_THROWS_AS(forward_loglik(g), Error);
}

TEST_CASE("emission mass audit accepts model grids and rejects overweight cells") {
  Model m = Model::init(tiny_hat(), 11);
  LatticeGrid g = fill_grid(m, random_features(3, 3, 5), 0, {1, 4});
  CHECK_NOTHROW(g.check_mass());
  g.blank(0, 0) = 0.5;  // exp(0.5) > 1 on its own
  CHECK_THROWS_AS(g.check_mass(), Error);
}

TEST_CASE("filled grids match the per-cell joint kernels") {
  Model m = Model::init(tiny_hat(), 21);
  TensorPtr x = random_features(4, 3, 22);
  std::vector<int> y = {2, 0, 3};
  LatticeGrid g = fill_grid(m, x, 1, y);
  REQUIRE(g.T == 4);
  REQUIRE(g.U == 3);

  NoGradGuard ng;
  TensorPtr F = m.encode(x, 1);
  TensorPtr G = m.label_decode_rows(y, 4);
  for (int t = 0; t < g.T; ++t) {
    std::vector<double> f(F->value.begin() + static_cast<size_t>(t) * F->cols(),
                          F->value.begin() + static_cast<size_t>(t + 1) * F->cols());
    for (int u = 0; u <= g.U; ++u) {
      std::vector<double> grow(G->value.begin() + static_cast<size_t>(u) * G->cols(),
                               G->value.begin() + static_cast<size_t>(u + 1) * G->cols());
      HatCellOutput cell = hat_joint(m, f, grow);
      CHECK(g.blank(t, u) == cell.blank_logprob);  // same arithmetic, cached rows
      if (u < g.U) {
        double expected = std::log1p(-std::exp(cell.blank_logprob)) + cell.label_logprobs[y[u]];
        CHECK(g.label(t, u) == doctest::Approx(expected).epsilon(1e-12));
      }
    }
  }
}

TEST_CASE("filled modular grids factor into blank and renormalized label mass") {
  Model m = Model::init(tiny_mhat(), 23);
  TensorPtr x = random_features(3, 3, 24);
  std::vector<int> y = {4, 1};
  LatticeGrid g = fill_grid(m, x, 0, y);

  NoGradGuard ng;
  TensorPtr F = m.encode(x, 0);
  TensorPtr G = m.label_decode_rows(y, 3);
  TensorPtr GB = m.blank_decode_rows(y, 3);
  for (int t = 0; t < g.T; ++t) {
    std::vector<double> f(F->value.begin() + static_cast<size_t>(t) * F->cols(),
                          F->value.begin() + static_cast<size_t>(t + 1) * F->cols());
    for (int u = 0; u <= g.U; ++u) {
      std::vector<double> grow(G->value.begin() + static_cast<size_t>(u) * G->cols(),
                               G->value.begin() + static_cast<size_t>(u + 1) * G->cols());
      std::vector<double> gbrow(GB->value.begin() + static_cast<size_t>(u) * GB->cols(),
                                GB->value.begin() + static_cast<size_t>(u + 1) * GB->cols());
      MhatCellOutput cell = mhat_scores(m, f, grow, gbrow);
      CHECK(g.blank(t, u) == cell.blank_logprob);
      if (u < g.U) {
        double expected = std::log1p(-std::exp(cell.blank_logprob)) + cell.label_logprobs[y[u]];
        CHECK(g.label(t, u) == doctest::Approx(expected).epsilon(1e-12));
      }
    }
  }
}

TEST_CASE("empty transcripts leave only the blank column") {
  Model m = Model::init(tiny_hat(), 31);
  LatticeGrid g = fill_grid(m, random_features(3, 3, 32), 0, {});
  CHECK(g.U == 0);
  CHECK(g.label_lp.empty());
  CHECK(g.blank_lp.size() == 3);
  CHECK(std::isfinite(forward_loglik(g)));
}

TEST_CASE("fill_grid rejects out-of-vocab transcripts") {
  Model m = Model::init(tiny_hat(), 41);
  TensorPtr x = random_features(2, 3, 42);
  CHECK_THROWS_AS(fill_grid(m, x, 0, {5}), Error);
  CHECK_THROWS_AS(fill_grid(m, x, 0, {-1}), Error);
}

TEST_CASE("grid regression checksum is stable") {
  Model m = Model::init(tiny_hat(), 1234);
  LatticeGrid g = fill_grid(m, random_features(4, 3, 4321), 1, {1, 2, 3});
  double checksum = 0.0;
  for (size_t i = 0; i < g.blank_lp.size(); ++i) checksum += g.blank_lp[i] * (i + 1);
  for (size_t i = 0; i < g.label_lp.size(); ++i) checksum += g.label_lp[i] * (i + 1);
  CHECK(checksum == doctest::Approx(-277.09513410854987).epsilon(1e-12));
}

TEST_CASE("fused loss value equals the grid pipeline") {
  for (bool modular : {false, true}) {
    Model m = Model::init(modular ? tiny_mhat() : tiny_hat(), 51);
    TensorPtr x = random_features(4, 3, 52);
    std::vector<int> y = {0, 2};
    double reference = -forward_loglik(fill_grid(m, x, 1, y));

    TensorPtr F = m.encode(x, 1);
    TensorPtr G = m.label_decode_rows(y, 3);
    TensorPtr GB = modular ? m.blank_decode_rows(y, 3) : nullptr;
    TensorPtr loss = transducer_nll(m, F, G, GB, y);
    CHECK(loss->value[0] == reference);
    CHECK(transducer_nll_value(m, x, 1, y) == reference);
  }
}

TEST_CASE("fused loss enforces variant-specific decoder rows") {
  Model hat = Model::init(tiny_hat(), 61);
  TensorPtr x = random_features(2, 3, 62);
  std::vector<int> y = {1};
  TensorPtr F = hat.encode(x, 0);
  TensorPtr G = hat.label_decode_rows(y, 2);
  CHECK_THROWS_AS(transducer_nll(hat, F, G, G, y), Error);

  Model mhat = Model::init(tiny_mhat(), 63);
  TensorPtr Fm = mhat.encode(x, 0);
  TensorPtr Gm = mhat.label_decode_rows(y, 2);
  CHECK_THROWS_AS(transducer_nll(mhat, Fm, Gm, nullptr, y), Error);
  CHECK_THROWS_AS(transducer_nll(mhat, Fm, mhat.label_decode_rows(y, 1), nullptr, y), Error);
}

TEST_CASE("fused loss gradients match finite differences") {
  std::vector<int> y = {2, 0, 1};
  SUBCASE("shared bottleneck joint") {
    Model m = Model::init(tiny_hat(), 71);
    TensorPtr x = random_features(3, 3, 72);
    auto f = [&]() {
      TensorPtr F = m.encode(x, 1);
      TensorPtr G = m.label_decode_rows(y, static_cast<int>(y.size()) + 1);
      return transducer_nll(m, F, G, nullptr, y);
    };
    CHECK(grad_check(f, m.params) < 1e-4);
  }
  SUBCASE("modular joint") {
    Model m = Model::init(tiny_mhat(), 73);
    TensorPtr x = random_features(3, 3, 74);
    auto f = [&]() {
      TensorPtr F = m.encode(x, 0);
      TensorPtr G = m.label_decode_rows(y, static_cast<int>(y.size()) + 1);
      TensorPtr GB = m.blank_decode_rows(y, static_cast<int>(y.size()) + 1);
      return transducer_nll(m, F, G, GB, y);
    };
    CHECK(grad_check(f, m.params) < 1e-4);
  }
  SUBCASE("empty transcript") {
    Model m = Model::init(tiny_hat(), 75);
    TensorPtr x = random_features(2, 3, 76);
    auto f = [&]() {
      TensorPtr F = m.encode(x, 0);
      TensorPtr G = m.label_decode_rows({}, 1);
      return transducer_nll(m, F, G, nullptr, {});
    };
    CHECK(grad_check(f, m.params) < 1e-4);
  }
}

TEST_CASE("fused loss under no-grad leaves no tape") {
  Model m = Model::init(tiny_hat(), 81);
  TensorPtr x = random_features(2, 3, 82);
  std::vector<int> y = {3};
  NoGradGuard ng;
  TensorPtr F = m.encode(x, 0);
  TensorPtr G = m.label_decode_rows(y, 2);
  TensorPtr loss = transducer_nll(m, F, G, nullptr, y);
  CHECK_FALSE(loss->requires_grad);
  CHECK(loss->parents.empty());
}
