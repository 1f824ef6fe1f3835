// tests/training_test.cc
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

#include "jeitlab/training.h"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "doctest.h"
#include "jeitlab/common.h"
#include "jeitlab/container.h"
#include "jeitlab/corpus.h"
#include "jeitlab/losses.h"
#include "jeitlab/model.h"
#include "jeitlab/optimizer.h"
#include "jeitlab/rng.h"
#include "jeitlab/tensor.h"

namespace jeitlab {
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
  std::vector<double> v(static_cast<size_t>(T) * static_cast<size_t>(d));
  for (double& x : v) x = rng.normal(0.0, 0.8);
  return Tensor::from_values({T, d}, std::move(v));
}

std::vector<Utterance> tiny_batch(const ModelConfig& cfg, int n, uint64_t seed) {
  Rng rng(seed);
  std::vector<Utterance> batch(n);
  for (int i = 0; i < n; ++i) {
    int U = 1 + static_cast<int>(rng.uniform_int(0, 2));
    int T = U + 1 + static_cast<int>(rng.uniform_int(0, 2));
    batch[i].features = random_features(T, cfg.feature_dim, Rng::derive_seed(seed, "feat", i));
    batch[i].transcript.resize(U);
    for (int& t : batch[i].transcript) t = static_cast<int>(rng.uniform_int(0, cfg.vocab_size - 1));
    batch[i].domain_id = static_cast<int>(rng.uniform_int(0, cfg.num_domains - 1));
  }
  return batch;
}

std::vector<std::vector<int>> tiny_text(int n, int vocab, uint64_t seed) {
  Rng rng(seed);
  std::vector<std::vector<int>> out(n);
  for (auto& s : out) {
    s.resize(1 + static_cast<size_t>(rng.uniform_int(0, 3)));
    for (int& t : s) t = static_cast<int>(rng.uniform_int(0, vocab - 1));
  }
  return out;
}

bool bits_equal(double a, double b) {
  if (std::isnan(a) && std::isnan(b)) return true;
  return a == b;
}

bool params_equal(const ParamStore& a, const ParamStore& b) {
  if (a.items().size() != b.items().size()) return false;
  auto it = b.items().begin();
  for (const auto& [name, p] : a.items()) {
    if (it->first != name) return false;
    const std::vector<double>& av = p.tensor->value;
    const std::vector<double>& bv = it->second.tensor->value;
    if (av.size() != bv.size()) return false;
    for (size_t i = 0; i < av.size(); ++i)
      if (av[i] != bv[i]) return false;
    ++it;
  }
  return true;
}

std::map<std::string, std::vector<double>> snapshot(const ParamStore& params) {
  std::map<std::string, std::vector<double>> out;
  for (const auto& [name, p] : params.items()) out[name] = p.tensor->value;
  return out;
}

std::string tmp_dir(const std::string& name) {
  std::string d = (std::filesystem::temp_directory_path() / name).string();
  std::filesystem::remove_all(d);
  return d;
}

TrainConfig quick_cfg(const ObjectiveSpec& spec, double lr, uint64_t seed) {
  TrainConfig cfg;
  cfg.objective = spec;
  cfg.paired_batch_size = 2;
  cfg.unpaired_batch_size = 4;
  cfg.steps = 4;
  cfg.optimizer.learning_rate = lr;
  cfg.eval_every = 2;
  cfg.seed = seed;
  cfg.eval_beam_width = 2;
  cfg.eval_max_symbols = 2;
  return cfg;
}

// Shared across the run-level cases; generation is the expensive part.
const CorpusSpec& train_spec() {
  static const CorpusSpec s = [] {
    CorpusSpec spec;
    spec.common_words = 20;
    spec.carrier_words_per_domain = 2;
    spec.rare_domains = 2;
    spec.rare_words_per_domain = 3;
    spec.paired_count = 40;
    spec.unpaired_count = 200;
    spec.heldout_count = 30;
    spec.base_test_count = 10;
    spec.rare_test_count_per_domain = 7;
    spec.rare_word_threshold = 5;
    spec.min_unpaired_occurrences = 20;
    spec.unpaired_domain_weights = {1.0, 1.0, 1.0};
    spec.feature_dim = 5;
    spec.frames_per_token_min = 1;
    spec.frames_per_token_max = 2;
    spec.noise_level = 0.05;
    spec.rare_offset_scale = 0.3;
    spec.seed = 99;
    return spec;
  }();
  return s;
}

const SplitBundle& train_bundle() {
  static const SplitBundle bundle = generate_corpus(train_spec());
  return bundle;
}

ModelConfig corpus_hat() {
  ModelConfig c = tiny_hat();
  c.vocab_size = train_spec().vocab_size();
  c.feature_dim = train_spec().feature_dim;
  c.num_domains = train_spec().utterance_domains();
  return c;
}

ModelConfig corpus_mhat() {
  ModelConfig c = tiny_mhat();
  c.vocab_size = train_spec().vocab_size();
  c.feature_dim = train_spec().feature_dim;
  c.num_domains = train_spec().utterance_domains();
  return c;
}

void check_logs_equal(const MetricsLog& a, const MetricsLog& b) {
  REQUIRE(a.steps.size() == b.steps.size());
  REQUIRE(a.evals.size() == b.evals.size());
  for (size_t i = 0; i < a.steps.size(); ++i) {
    const StepMetrics& x = a.steps[i];
    const StepMetrics& y = b.steps[i];
    CHECK(x.step == y.step);
    CHECK(bits_equal(x.loss, y.loss));
    CHECK(bits_equal(x.e2e_paired, y.e2e_paired));
    CHECK(bits_equal(x.e2e_unpaired, y.e2e_unpaired));
    CHECK(bits_equal(x.ilm, y.ilm));
    CHECK(bits_equal(x.kld, y.kld));
    CHECK(bits_equal(x.grad_norm, y.grad_norm));
  }
  for (size_t i = 0; i < a.evals.size(); ++i) {
    const EvalMetrics& x = a.evals[i];
    const EvalMetrics& y = b.evals[i];
    CHECK(x.step == y.step);
    CHECK(bits_equal(x.base_wer, y.base_wer));
    REQUIRE(x.rare_wer.size() == y.rare_wer.size());
    for (size_t d = 0; d < x.rare_wer.size(); ++d) CHECK(bits_equal(x.rare_wer[d], y.rare_wer[d]));
    CHECK(bits_equal(x.rare_aggregate_wer, y.rare_aggregate_wer));
    CHECK(bits_equal(x.overall_wer, y.overall_wer));
    CHECK(bits_equal(x.ilm_ppl, y.ilm_ppl));
  }
}

TEST_CASE("config validation covers mode and batch constraints") {
  TrainConfig cfg;
  CHECK_NOTHROW(cfg.validate());

  cfg = TrainConfig{};
  cfg.paired_batch_size = 0;
  CHECK_THROWS_AS(cfg.validate(), Error);

  cfg = TrainConfig{};
  cfg.steps = -1;
  CHECK_THROWS_AS(cfg.validate(), Error);

  cfg = TrainConfig{};
  cfg.eval_every = 0;
  CHECK_THROWS_AS(cfg.validate(), Error);

  cfg = TrainConfig{};
  cfg.eval_beam_width = 0;
  CHECK_THROWS_AS(cfg.validate(), Error);

  cfg = TrainConfig{};
  cfg.eval_max_symbols = 0;
  CHECK_THROWS_AS(cfg.validate(), Error);

  // Text-consuming modes must not starve the text stream.
  cfg = TrainConfig{};
  cfg.objective = default_objective(Mode::kJeit, Variant::kHat);
  cfg.paired_batch_size = 16;
  cfg.unpaired_batch_size = 8;
  CHECK_THROWS_AS(cfg.validate(), Error);
  cfg.unpaired_batch_size = 16;
  CHECK_NOTHROW(cfg.validate());

  // The paired-only baseline ignores the text batch size entirely.
  cfg = TrainConfig{};
  cfg.paired_batch_size = 16;
  cfg.unpaired_batch_size = 1;
  CHECK_NOTHROW(cfg.validate());

  // Objective consistency is part of config validation.
  cfg = TrainConfig{};
  cfg.objective.mode = Mode::kJeit;
  cfg.objective.beta = 0.0;
  CHECK_THROWS_AS(cfg.validate(), Error);
}

TEST_CASE("stream predicates match the objective definitions") {
  CHECK(mode_uses_paired_stream(Mode::kBase));
  CHECK(mode_uses_paired_stream(Mode::kIlmt));
  CHECK(mode_uses_paired_stream(Mode::kJeit));
  CHECK(mode_uses_paired_stream(Mode::kJoist));
  CHECK(mode_uses_paired_stream(Mode::kCjjt));
  CHECK_FALSE(mode_uses_paired_stream(Mode::kIlma));

  CHECK_FALSE(mode_uses_unpaired_stream(Mode::kBase));
  CHECK_FALSE(mode_uses_unpaired_stream(Mode::kIlmt));
  CHECK(mode_uses_unpaired_stream(Mode::kJeit));
  CHECK(mode_uses_unpaired_stream(Mode::kJoist));
  CHECK(mode_uses_unpaired_stream(Mode::kCjjt));
  CHECK(mode_uses_unpaired_stream(Mode::kIlma));
}

namespace {

// Identity-tagged pools so draws can be traced back to pool indices.
std::vector<Utterance> tagged_pool(int n) {
  std::vector<Utterance> pool(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) pool[static_cast<size_t>(i)].transcript = {i};
  return pool;
}

std::vector<std::vector<int>> tagged_text_pool(int n) {
  std::vector<std::vector<int>> pool(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) pool[static_cast<size_t>(i)] = {i};
  return pool;
}

TrainConfig mixer_cfg() {
  TrainConfig cfg;
  cfg.objective = default_objective(Mode::kJeit, Variant::kHat);
  cfg.paired_batch_size = 3;
  cfg.unpaired_batch_size = 5;
  cfg.seed = 17;
  return cfg;
}

}  // namespace

TEST_CASE("mixer cycles each stream with a fresh shuffle per epoch") {
  std::vector<Utterance> paired = tagged_pool(7);
  std::vector<std::vector<int>> unpaired = tagged_text_pool(5);
  BatchMixer mixer(&paired, &unpaired, mixer_cfg());

  std::vector<int> paired_ids;
  std::vector<int> text_ids;
  for (int step = 0; step < 5; ++step) {
    BatchMixer::StepBatches b = mixer.next();
    REQUIRE(b.paired.size() == 3);
    REQUIRE(b.text.size() == 5);
    for (const Utterance& u : b.paired) paired_ids.push_back(u.transcript[0]);
    for (const auto& s : b.text) text_ids.push_back(s[0]);
  }
  CHECK(mixer.paired_consumed() == 15);
  CHECK(mixer.unpaired_consumed() == 25);

  // Each full cycle is a permutation of the pool, and consecutive cycles use
  // different orders.
  auto window = [](const std::vector<int>& v, size_t off, size_t len) {
    return std::vector<int>(v.begin() + off, v.begin() + off + len);
  };
  std::vector<int> epoch0 = window(paired_ids, 0, 7);
  std::vector<int> epoch1 = window(paired_ids, 7, 7);
  std::vector<int> sorted0 = epoch0;
  std::vector<int> sorted1 = epoch1;
  std::sort(sorted0.begin(), sorted0.end());
  std::sort(sorted1.begin(), sorted1.end());
  CHECK(sorted0 == std::vector<int>{0, 1, 2, 3, 4, 5, 6});
  CHECK(sorted1 == std::vector<int>{0, 1, 2, 3, 4, 5, 6});
  CHECK(epoch0 != epoch1);

  for (size_t e = 0; e < 5; ++e) {
    std::vector<int> cycle = window(text_ids, e * 5, 5);
    std::sort(cycle.begin(), cycle.end());
    CHECK(cycle == std::vector<int>{0, 1, 2, 3, 4});
  }
  CHECK(window(text_ids, 0, 5) != window(text_ids, 5, 5));
}

TEST_CASE("mixer is deterministic and resumes from consumed counters") {
  std::vector<Utterance> paired = tagged_pool(7);
  std::vector<std::vector<int>> unpaired = tagged_text_pool(9);

  auto draw = [&](BatchMixer& m, int steps) {
    std::vector<std::pair<std::vector<int>, std::vector<int>>> seq;
    for (int i = 0; i < steps; ++i) {
      BatchMixer::StepBatches b = m.next();
      std::vector<int> p, t;
      for (const Utterance& u : b.paired) p.push_back(u.transcript[0]);
      for (const auto& s : b.text) t.push_back(s[0]);
      seq.emplace_back(std::move(p), std::move(t));
    }
    return seq;
  };

  BatchMixer a(&paired, &unpaired, mixer_cfg());
  BatchMixer b(&paired, &unpaired, mixer_cfg());
  auto seq_a = draw(a, 6);
  CHECK(seq_a == draw(b, 6));

  // A fresh mixer fast-forwarded to the counters after two steps continues
  // with the third step's draw.
  BatchMixer c(&paired, &unpaired, mixer_cfg());
  c.set_consumed(2 * 3, 2 * 5);
  auto tail = draw(c, 4);
  for (int i = 0; i < 4; ++i) CHECK(tail[static_cast<size_t>(i)] == seq_a[static_cast<size_t>(i) + 2]);

  CHECK_THROWS_AS(c.set_consumed(-1, 0), Error);
}

TEST_CASE("modes that ignore a stream never touch it") {
  std::vector<Utterance> paired = tagged_pool(4);
  std::vector<std::vector<int>> unpaired = tagged_text_pool(6);

  TrainConfig base = mixer_cfg();
  base.objective = ObjectiveSpec{};
  // The baseline runs without any text pool at all.
  BatchMixer bm(&paired, nullptr, base);
  BatchMixer::StepBatches b = bm.next();
  CHECK(b.paired.size() == 3);
  CHECK(b.text.empty());
  CHECK(bm.unpaired_consumed() == 0);

  TrainConfig ilma = mixer_cfg();
  ilma.objective = default_objective(Mode::kIlma, Variant::kHat);
  ilma.paired_batch_size = 2;
  ilma.unpaired_batch_size = 4;
  BatchMixer am(nullptr, &unpaired, ilma);
  BatchMixer::StepBatches ab = am.next();
  CHECK(ab.paired.empty());
  CHECK(ab.text.size() == 4);
  CHECK(am.paired_consumed() == 0);

  // A required stream must be present and non-empty.
  std::vector<Utterance> no_paired;
  std::vector<std::vector<int>> no_text;
  CHECK_THROWS_AS(BatchMixer(&no_paired, &unpaired, base), Error);
  CHECK_THROWS_AS(BatchMixer(&paired, &no_text, mixer_cfg()), Error);
  CHECK_THROWS_AS(BatchMixer(&paired, nullptr, mixer_cfg()), Error);
  CHECK_THROWS_AS(BatchMixer(nullptr, &no_text, ilma), Error);
}

TEST_CASE("zero learning rate leaves parameters unchanged") {
  Model m = Model::init(tiny_hat(), 301);
  auto before = snapshot(m.params);
  TrainConfig cfg = quick_cfg(ObjectiveSpec{}, 0.0, 3);
  Adam adam(cfg.optimizer);

  StepMetrics sm = train_step(m, adam, cfg, tiny_batch(tiny_hat(), 2, 302), {}, 1);
  CHECK(sm.step == 1);
  CHECK(std::isfinite(sm.loss));
  CHECK(sm.grad_norm > 0.0);
  CHECK(adam.step_count() == 1);
  for (const auto& [name, p] : m.params.items()) CHECK(p.tensor->value == before.at(name));
}

TEST_CASE("repeated steps on one batch reduce the training loss") {
  Model m = Model::init(tiny_hat(), 311);
  TrainConfig cfg = quick_cfg(ObjectiveSpec{}, 1e-3, 4);
  Adam adam(cfg.optimizer);
  std::vector<Utterance> batch = tiny_batch(tiny_hat(), 2, 312);

  std::vector<double> losses;
  for (int step = 1; step <= 50; ++step)
    losses.push_back(train_step(m, adam, cfg, batch, {}, step).loss);
  for (size_t i = 1; i < losses.size(); ++i) CHECK(losses[i] < losses[i - 1]);
}

namespace {

void check_reduction(const ModelConfig& mc, const ObjectiveSpec& a, const ObjectiveSpec& b) {
  Model ma = Model::init(mc, 77);
  Model mb = Model::init(mc, 77);
  TrainConfig ca = quick_cfg(a, 5e-3, 11);
  TrainConfig cb = quick_cfg(b, 5e-3, 11);
  Adam oa(ca.optimizer);
  Adam ob(cb.optimizer);
  for (int step = 1; step <= 5; ++step) {
    std::vector<Utterance> batch = tiny_batch(mc, 2, 1000 + static_cast<uint64_t>(step));
    std::vector<std::vector<int>> text =
        tiny_text(3, mc.vocab_size, 2000 + static_cast<uint64_t>(step));
    StepMetrics sa = train_step(ma, oa, ca, batch, text, step);
    StepMetrics sb = train_step(mb, ob, cb, batch, text, step);
    CHECK(sa.loss == sb.loss);
    CHECK(sa.grad_norm == sb.grad_norm);
    CHECK(params_equal(ma.params, mb.params));
  }
}

}  // namespace

TEST_CASE("a zeroed weight reproduces the smaller objective bitwise") {
  // Dropping the ILM term turns text injection into the baseline.
  ObjectiveSpec jeit_zero;
  jeit_zero.mode = Mode::kJeit;
  jeit_zero.beta = 0.0;
  check_reduction(tiny_hat(), jeit_zero, ObjectiveSpec{});

  // Dropping the unpaired lattice term turns the combined objective into
  // pure ILM injection.
  ObjectiveSpec cjjt_no_alpha;
  cjjt_no_alpha.mode = Mode::kCjjt;
  cjjt_no_alpha.alpha = 0.0;
  cjjt_no_alpha.beta = 0.3;
  ObjectiveSpec jeit;
  jeit.mode = Mode::kJeit;
  jeit.beta = 0.3;
  check_reduction(tiny_mhat(), cjjt_no_alpha, jeit);

  // Dropping the ILM term instead leaves the masked-text lattice objective.
  ObjectiveSpec cjjt_no_beta;
  cjjt_no_beta.mode = Mode::kCjjt;
  cjjt_no_beta.alpha = 0.25;
  cjjt_no_beta.beta = 0.0;
  cjjt_no_beta.upsample.k_min = 1;
  cjjt_no_beta.upsample.k_max = 2;
  cjjt_no_beta.upsample.mask_prob = 0.25;
  ObjectiveSpec joist = cjjt_no_beta;
  joist.mode = Mode::kJoist;
  check_reduction(tiny_hat(), cjjt_no_beta, joist);
}

TEST_CASE("loss equals the weighted sum of its logged components") {
  Model m = Model::init(tiny_mhat(), 321);
  ObjectiveSpec spec = default_objective(Mode::kCjjt, Variant::kMhat);
  TrainConfig cfg = quick_cfg(spec, 0.0, 5);
  Adam adam(cfg.optimizer);
  std::vector<Utterance> batch = tiny_batch(tiny_mhat(), 2, 322);
  std::vector<std::vector<int>> text = tiny_text(3, tiny_mhat().vocab_size, 323);

  StepMetrics sm = train_step(m, adam, cfg, batch, text, 1);
  CHECK(std::isfinite(sm.e2e_paired));
  CHECK(std::isfinite(sm.e2e_unpaired));
  CHECK(std::isfinite(sm.ilm));
  CHECK(std::isnan(sm.kld));
  CHECK(sm.loss == (sm.e2e_paired + spec.alpha * sm.e2e_unpaired) + spec.beta * sm.ilm);

  // The baseline logs only the paired term.
  Model mb = Model::init(tiny_hat(), 324);
  TrainConfig cb = quick_cfg(ObjectiveSpec{}, 0.0, 5);
  Adam ob(cb.optimizer);
  StepMetrics sb = train_step(mb, ob, cb, tiny_batch(tiny_hat(), 2, 325), {}, 1);
  CHECK(sb.loss == sb.e2e_paired);
  CHECK(std::isnan(sb.e2e_unpaired));
  CHECK(std::isnan(sb.ilm));
  CHECK(std::isnan(sb.kld));

  // ILM training on the paired transcripts needs no text batch at all.
  Model mi = Model::init(tiny_hat(), 326);
  ObjectiveSpec ilmt = default_objective(Mode::kIlmt, Variant::kHat);
  TrainConfig ci = quick_cfg(ilmt, 0.0, 5);
  Adam oi(ci.optimizer);
  StepMetrics si = train_step(mi, oi, ci, tiny_batch(tiny_hat(), 2, 327), {}, 1);
  CHECK(std::isfinite(si.ilm));
  CHECK(std::isnan(si.e2e_unpaired));
  CHECK(si.loss == si.e2e_paired + ilmt.beta * si.ilm);
}

TEST_CASE("adaptation updates only the language side") {
  ModelConfig mc = tiny_mhat();
  Model m = Model::init(mc, 331);
  auto before = snapshot(m.params);

  Model frozen;
  frozen.config = m.config;
  frozen.params = m.params.clone();

  ObjectiveSpec spec = default_objective(Mode::kIlma, Variant::kMhat);
  TrainConfig cfg = quick_cfg(spec, 5e-3, 6);
  Adam adam(cfg.optimizer);
  std::vector<std::vector<int>> text = tiny_text(4, mc.vocab_size, 332);

  // The freeze must be in place before any adaptation step.
  CHECK_THROWS_AS(train_step(m, adam, cfg, {}, text, 1, &frozen), Error);
  apply_ilm_only_freeze(m);
  // And the frozen reference is not optional.
  CHECK_THROWS_AS(train_step(m, adam, cfg, {}, text, 1, nullptr), Error);

  StepMetrics sm{};
  for (int step = 1; step <= 3; ++step) sm = train_step(m, adam, cfg, {}, text, step, &frozen);
  CHECK(std::isfinite(sm.ilm));
  CHECK(std::isfinite(sm.kld));
  CHECK(std::isnan(sm.e2e_paired));
  CHECK(sm.loss == sm.ilm + spec.kld_weight * sm.kld);

  bool ilm_moved = false;
  for (const auto& [name, p] : m.params.items()) {
    if (m.is_ilm_param(name)) {
      ilm_moved = ilm_moved || p.tensor->value != before.at(name);
    } else {
      CHECK(p.tensor->value == before.at(name));
    }
  }
  CHECK(ilm_moved);

  // Dropping the regularizer keeps the contract: the reference must still be
  // supplied, it just contributes nothing.
  ObjectiveSpec plain = spec;
  plain.kld_weight = 0.0;
  TrainConfig cp = quick_cfg(plain, 5e-3, 6);
  CHECK_THROWS_AS(train_step(m, adam, cp, {}, text, 4, nullptr), Error);
  StepMetrics sp = train_step(m, adam, cp, {}, text, 4, &frozen);
  CHECK(std::isnan(sp.kld));
  CHECK(sp.loss == sp.ilm);
}

TEST_CASE("a poisoned parameter halts the run before the update") {
  ModelConfig mc = tiny_hat();
  TrainConfig cfg = quick_cfg(ObjectiveSpec{}, 5e-3, 7);
  std::vector<Utterance> batch = tiny_batch(mc, 2, 341);

  Model m = Model::init(mc, 342);
  m.params.get("joint.W")->value[0] = std::numeric_limits<double>::quiet_NaN();
  Adam adam(cfg.optimizer);
  CHECK_THROWS_AS(train_step(m, adam, cfg, batch, {}, 1), Error);

  Model m2 = Model::init(mc, 343);
  m2.params.get("joint.W")->value[0] = std::numeric_limits<double>::infinity();
  Adam adam2(cfg.optimizer);
  CHECK_THROWS_AS(train_step(m2, adam2, cfg, batch, {}, 1), Error);
}

TEST_CASE("text masking redraws each step") {
  ModelConfig mc = tiny_hat();
  Model m = Model::init(mc, 351);
  ObjectiveSpec spec;
  spec.mode = Mode::kJoist;
  spec.alpha = 0.25;
  spec.upsample.k_min = 1;
  spec.upsample.k_max = 3;
  spec.upsample.mask_prob = 0.5;
  TrainConfig cfg = quick_cfg(spec, 0.0, 8);
  Adam adam(cfg.optimizer);
  std::vector<Utterance> batch = tiny_batch(mc, 2, 352);
  std::vector<std::vector<int>> text = tiny_text(4, mc.vocab_size, 353);

  StepMetrics first = train_step(m, adam, cfg, batch, text, 1);
  StepMetrics again = train_step(m, adam, cfg, batch, text, 1);
  StepMetrics second = train_step(m, adam, cfg, batch, text, 2);
  CHECK(first.e2e_unpaired == again.e2e_unpaired);
  CHECK(first.e2e_unpaired != second.e2e_unpaired);
  // The paired term sees no randomness.
  CHECK(first.e2e_paired == second.e2e_paired);
}

TEST_CASE("internal LM perplexity matches a prefix-walk oracle") {
  for (bool modular : {false, true}) {
    CAPTURE(modular);
    ModelConfig mc = modular ? tiny_mhat() : tiny_hat();
    Model m = Model::init(mc, modular ? 361 : 362);
    std::vector<std::vector<int>> text = tiny_text(4, mc.vocab_size, 363);

    double nll = 0.0;
    long count = 0;
    for (const auto& sentence : text) {
      std::vector<int> prefix;
      for (int tok : sentence) {
        nll -= m.ilm_logprobs(prefix)[static_cast<size_t>(tok)];
        ++count;
        prefix.push_back(tok);
      }
    }
    double oracle = std::exp(nll / static_cast<double>(count));
    CHECK(ilm_perplexity(m, text) == oracle);

    // A freshly initialized label side is close to uniform.
    double ppl = ilm_perplexity(m, text);
    CHECK(ppl > 0.5 * mc.vocab_size);
    CHECK(ppl < 2.0 * mc.vocab_size);
  }

  Model m = Model::init(tiny_hat(), 364);
  CHECK_THROWS_AS(ilm_perplexity(m, {}), Error);
  CHECK_THROWS_AS(ilm_perplexity(m, {{0, 1}, {}}), Error);
  CHECK_THROWS_AS(ilm_perplexity(m, {{0, 99}}), Error);
}

TEST_CASE("metrics records survive the file round trip") {
  MetricsLog log;
  StepMetrics s1;
  s1.step = 1;
  s1.loss = 2.5;
  s1.e2e_paired = 2.5;
  s1.grad_norm = 0.75;
  s1.elapsed_ms = 12.0;
  StepMetrics s2;
  s2.step = 2;
  s2.loss = 3.0;
  s2.e2e_paired = 1.0;
  s2.e2e_unpaired = 4.0;
  s2.ilm = 2.0;
  s2.grad_norm = 1.5;
  s2.elapsed_ms = 20.0;
  log.steps = {s1, s2};
  EvalMetrics e;
  e.step = 2;
  e.base_wer = 0.125;
  e.rare_wer = {0.5, 0.25};
  e.rare_aggregate_wer = 0.375;
  e.overall_wer = 0.25;
  e.ilm_ppl = 17.5;
  e.elapsed_ms = 30.0;
  log.evals = {e};

  std::string path = (std::filesystem::temp_directory_path() / "jl_metrics.jsonl").string();
  save_metrics(path, log);
  MetricsLog loaded = load_metrics(path);
  check_logs_equal(log, loaded);
  CHECK(loaded.steps[0].elapsed_ms == 12.0);
  CHECK(std::isnan(loaded.steps[0].ilm));
  CHECK(loaded.steps[1].ilm == 2.0);

  // Eval lines appear after the step they measured.
  {
    std::ifstream in(path);
    std::string l1, l2, l3;
    std::getline(in, l1);
    std::getline(in, l2);
    std::getline(in, l3);
    CHECK(l1.find("\"kind\":\"step\"") != std::string::npos);
    CHECK(l2.find("\"kind\":\"step\"") != std::string::npos);
    CHECK(l3.find("\"kind\":\"eval\"") != std::string::npos);
  }

  // Unknown schema versions and malformed lines are rejected.
  {
    std::ofstream out(path, std::ios::trunc);
    out << "{\"schema\":99,\"kind\":\"step\",\"step\":1}\n";
  }
  CHECK_THROWS_AS(load_metrics(path), Error);
  {
    std::ofstream out(path, std::ios::trunc);
    out << "not json\n";
  }
  CHECK_THROWS_AS(load_metrics(path), Error);
  std::filesystem::remove(path);
}

TEST_CASE("a zero-step run returns the initial model and an empty log") {
  std::string dir = tmp_dir("jl_run_zero");
  TrainConfig cfg = quick_cfg(ObjectiveSpec{}, 5e-3, 21);
  cfg.steps = 0;
  RunResult res = run_training(cfg, corpus_hat(), train_bundle(), dir);

  CHECK(res.log.steps.empty());
  CHECK(res.log.evals.empty());
  Model fresh = Model::init(corpus_hat(), Rng::derive_seed(cfg.seed, "model_init"));
  CHECK(params_equal(res.model.params, fresh.params));
  CHECK(res.best_checkpoint == res.last_checkpoint);
  CHECK(std::filesystem::exists(res.last_checkpoint));
  CHECK(std::filesystem::exists(dir + "/train_state.json"));
  CHECK(load_metrics(dir + "/metrics.jsonl").steps.empty());

  // Mismatched model and corpus shapes are rejected up front.
  ModelConfig wrong = corpus_hat();
  wrong.vocab_size += 1;
  CHECK_THROWS_AS(run_training(cfg, wrong, train_bundle(), dir), Error);
  std::filesystem::remove_all(dir);
}

TEST_CASE("a short run logs every step and evaluates on schedule") {
  std::string dir = tmp_dir("jl_run_short");
  TrainConfig cfg = quick_cfg(default_objective(Mode::kJeit, Variant::kHat), 5e-3, 22);
  cfg.steps = 5;
  cfg.eval_every = 2;
  RunResult res = run_training(cfg, corpus_hat(), train_bundle(), dir);

  REQUIRE(res.log.steps.size() == 5);
  for (size_t i = 0; i < res.log.steps.size(); ++i) {
    const StepMetrics& s = res.log.steps[i];
    CHECK(s.step == static_cast<std::int64_t>(i) + 1);
    CHECK(std::isfinite(s.loss));
    CHECK(std::isfinite(s.e2e_paired));
    CHECK(std::isfinite(s.ilm));
    CHECK(std::isfinite(s.grad_norm));
    if (i > 0) CHECK(s.elapsed_ms >= res.log.steps[i - 1].elapsed_ms);
  }
  // Scheduled evals plus the final step.
  REQUIRE(res.log.evals.size() == 3);
  CHECK(res.log.evals[0].step == 2);
  CHECK(res.log.evals[1].step == 4);
  CHECK(res.log.evals[2].step == 5);
  for (const EvalMetrics& e : res.log.evals) {
    REQUIRE(e.rare_wer.size() == 2);
    CHECK(std::isfinite(e.base_wer));
    CHECK(std::isfinite(e.rare_aggregate_wer));
    CHECK(std::isfinite(e.overall_wer));
    CHECK(e.ilm_ppl > 1.0);
  }

  // The saved log is the returned log.
  check_logs_equal(res.log, load_metrics(dir + "/metrics.jsonl"));

  // The best checkpoint is the first eval reaching the lowest pooled WER.
  double best = res.log.evals[0].overall_wer;
  std::int64_t best_step = res.log.evals[0].step;
  for (const EvalMetrics& e : res.log.evals) {
    if (e.overall_wer < best) {
      best = e.overall_wer;
      best_step = e.step;
    }
  }
  std::ifstream in(dir + "/train_state.json");
  std::string state((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  CHECK(state.find("\"best_step\": " + std::to_string(best_step)) != std::string::npos);
  CHECK(std::filesystem::exists(res.best_checkpoint));
  std::filesystem::remove_all(dir);
}

TEST_CASE("identical configurations reproduce the metrics log bitwise") {
  TrainConfig cfg = quick_cfg(default_objective(Mode::kJeit, Variant::kHat), 5e-3, 23);
  cfg.steps = 4;
  cfg.eval_every = 2;
  std::string dir_a = tmp_dir("jl_run_rep_a");
  std::string dir_b = tmp_dir("jl_run_rep_b");
  RunResult a = run_training(cfg, corpus_hat(), train_bundle(), dir_a);
  RunResult b = run_training(cfg, corpus_hat(), train_bundle(), dir_b);
  check_logs_equal(a.log, b.log);
  CHECK(params_equal(a.model.params, b.model.params));
  std::filesystem::remove_all(dir_a);
  std::filesystem::remove_all(dir_b);
}

TEST_CASE("a resumed run reproduces the uninterrupted metrics") {
  TrainConfig full = quick_cfg(default_objective(Mode::kJeit, Variant::kHat), 5e-3, 24);
  full.steps = 6;
  full.eval_every = 2;
  std::string dir_a = tmp_dir("jl_run_full");
  RunResult a = run_training(full, corpus_hat(), train_bundle(), dir_a);

  TrainConfig head = full;
  head.steps = 4;
  std::string dir_b = tmp_dir("jl_run_halted");
  run_training(head, corpus_hat(), train_bundle(), dir_b);

  RunOptions resume;
  resume.resume = true;
  RunResult b = run_training(full, corpus_hat(), train_bundle(), dir_b, resume);

  check_logs_equal(a.log, b.log);
  CHECK(params_equal(a.model.params, b.model.params));

  // Resuming an empty directory is an error, not a silent fresh start.
  std::string dir_c = tmp_dir("jl_run_nothing");
  CHECK_THROWS_AS(run_training(full, corpus_hat(), train_bundle(), dir_c, resume), Error);
  std::filesystem::remove_all(dir_a);
  std::filesystem::remove_all(dir_b);
  std::filesystem::remove_all(dir_c);
}

TEST_CASE("text injection lowers held-out ILM perplexity vs the paired baseline") {
  ModelConfig mc = corpus_mhat();
  TrainConfig base = quick_cfg(ObjectiveSpec{}, 5e-3, 25);
  base.paired_batch_size = 4;
  base.steps = 40;
  base.eval_every = 40;
  std::string dir_base = tmp_dir("jl_run_ppl_base");
  RunResult rb = run_training(base, mc, train_bundle(), dir_base);

  TrainConfig jeit = base;
  jeit.objective = default_objective(Mode::kJeit, Variant::kMhat);
  jeit.unpaired_batch_size = 8;
  std::string dir_jeit = tmp_dir("jl_run_ppl_jeit");
  RunResult rj = run_training(jeit, mc, train_bundle(), dir_jeit);

  REQUIRE(rb.log.evals.size() == 1);
  REQUIRE(rj.log.evals.size() == 1);
  CHECK(rj.log.evals.back().ilm_ppl < rb.log.evals.back().ilm_ppl);
  std::filesystem::remove_all(dir_base);
  std::filesystem::remove_all(dir_jeit);
}

TEST_CASE("adaptation seeds from a checkpoint and freezes the rest") {
  ModelConfig mc = corpus_mhat();
  TrainConfig seed_cfg = quick_cfg(default_objective(Mode::kIlmt, Variant::kMhat), 5e-3, 26);
  seed_cfg.steps = 2;
  seed_cfg.eval_every = 2;
  std::string dir_seed = tmp_dir("jl_run_ilma_seed");
  RunResult seeded = run_training(seed_cfg, mc, train_bundle(), dir_seed);

  TrainConfig adapt = quick_cfg(default_objective(Mode::kIlma, Variant::kMhat), 5e-3, 27);
  adapt.steps = 3;
  adapt.eval_every = 3;
  std::string dir_adapt = tmp_dir("jl_run_ilma");

  // The adaptation run refuses to start from scratch.
  CHECK_THROWS_AS(run_training(adapt, mc, train_bundle(), dir_adapt), Error);

  RunOptions opts;
  opts.init_params = seeded.last_checkpoint;
  RunResult adapted = run_training(adapt, mc, train_bundle(), dir_adapt, opts);

  REQUIRE(adapted.log.steps.size() == 3);
  for (const StepMetrics& s : adapted.log.steps) {
    CHECK(std::isfinite(s.ilm));
    CHECK(std::isfinite(s.kld));
    CHECK(std::isnan(s.e2e_paired));
  }

  Model ref = Model::init(mc, 1);
  load_param_values(seeded.last_checkpoint, ref.params);
  bool ilm_moved = false;
  auto it = adapted.model.params.items().begin();
  for (const auto& [name, p] : ref.params.items()) {
    REQUIRE(it->first == name);
    if (ref.is_ilm_param(name)) {
      ilm_moved = ilm_moved || it->second.tensor->value != p.tensor->value;
    } else {
      CHECK(it->second.tensor->value == p.tensor->value);
    }
    ++it;
  }
  CHECK(ilm_moved);
  std::filesystem::remove_all(dir_seed);
  std::filesystem::remove_all(dir_adapt);
}

}  // namespace
}  // namespace jeitlab
