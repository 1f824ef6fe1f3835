// jeitlab/config.cc
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

#include "jeitlab/config.h"

#include <fstream>
#include <initializer_list>
#include <string>

#include "json.hpp"

#include "jeitlab/losses.h"
#include "jeitlab/rng.h"

namespace jeitlab {

using nlohmann::json;

namespace {

constexpr int kConfigSchema = 1;

void check_keys(const json& j, std::initializer_list<const char*> allowed, const char* where) {
  JL_CHECK(j.is_object(), where, " must be a JSON object");
  for (const auto& item : j.items()) {
    bool known = false;
    for (const char* k : allowed) known = known || item.key() == k;
    JL_CHECK(known, "unknown key '", item.key(), "' in ", where);
  }
}

template <typename T>
T field(const json& j, const char* key, T fallback) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    JL_CHECK(false, "bad value for '", key, "': ", e.what());
  }
  return fallback;  // unreachable
}

void apply_corpus(const json& j, CorpusSpec& c, std::uint64_t master, bool seed_overridden) {
  check_keys(j,
             {"common_words", "carrier_words_per_domain", "rare_domains", "rare_words_per_domain",
              "paired_count", "unpaired_count", "heldout_count", "base_test_count",
              "rare_test_count_per_domain", "rare_word_threshold", "min_unpaired_occurrences",
              "unpaired_domain_weights", "base_len_min", "base_len_max", "rare_filler_max",
              "feature_dim", "frames_per_token_min", "frames_per_token_max", "noise_level",
              "rare_offset_scale", "seed"},
             "corpus");
  c.common_words = field(j, "common_words", c.common_words);
  c.carrier_words_per_domain = field(j, "carrier_words_per_domain", c.carrier_words_per_domain);
  c.rare_domains = field(j, "rare_domains", c.rare_domains);
  c.rare_words_per_domain = field(j, "rare_words_per_domain", c.rare_words_per_domain);
  c.paired_count = field(j, "paired_count", c.paired_count);
  c.unpaired_count = field(j, "unpaired_count", c.unpaired_count);
  c.heldout_count = field(j, "heldout_count", c.heldout_count);
  c.base_test_count = field(j, "base_test_count", c.base_test_count);
  c.rare_test_count_per_domain = field(j, "rare_test_count_per_domain", c.rare_test_count_per_domain);
  c.rare_word_threshold = field(j, "rare_word_threshold", c.rare_word_threshold);
  c.min_unpaired_occurrences = field(j, "min_unpaired_occurrences", c.min_unpaired_occurrences);
  c.unpaired_domain_weights = field(j, "unpaired_domain_weights", c.unpaired_domain_weights);
  c.base_len_min = field(j, "base_len_min", c.base_len_min);
  c.base_len_max = field(j, "base_len_max", c.base_len_max);
  c.rare_filler_max = field(j, "rare_filler_max", c.rare_filler_max);
  c.feature_dim = field(j, "feature_dim", c.feature_dim);
  c.frames_per_token_min = field(j, "frames_per_token_min", c.frames_per_token_min);
  c.frames_per_token_max = field(j, "frames_per_token_max", c.frames_per_token_max);
  c.noise_level = field(j, "noise_level", c.noise_level);
  c.rare_offset_scale = field(j, "rare_offset_scale", c.rare_offset_scale);
  if (j.contains("seed") && !seed_overridden) {
    c.seed = j.at("seed").get<std::uint64_t>();
  } else {
    c.seed = Rng::derive_seed(master, "corpus");
  }
}

void apply_model(const json& j, ModelConfig& m, const CorpusSpec& corpus) {
  check_keys(j,
             {"variant", "vocab_size", "feature_dim", "num_domains", "encoder_layers",
              "encoder_dim", "label_decoder", "blank_decoder_dim", "joint_dim", "text_encoder"},
             "model");
  m.variant = variant_from_name(field<std::string>(j, "variant", variant_name(m.variant)));
  m.encoder_layers = field(j, "encoder_layers", m.encoder_layers);
  m.encoder_dim = field(j, "encoder_dim", m.encoder_dim);
  if (j.contains("label_decoder")) {
    const json& jd = j.at("label_decoder");
    check_keys(jd, {"kind", "layers", "width", "embed_dim"}, "model.label_decoder");
    m.label_decoder.kind =
        label_decoder_kind_from_name(field<std::string>(jd, "kind", label_decoder_kind_name(m.label_decoder.kind)));
    m.label_decoder.layers = field(jd, "layers", m.label_decoder.layers);
    m.label_decoder.width = field(jd, "width", m.label_decoder.width);
    m.label_decoder.embed_dim = field(jd, "embed_dim", m.label_decoder.embed_dim);
  }
  // The joint widths default per variant; an explicit zero is meaningful.
  int default_joint = m.variant == Variant::kHat ? 16 : 0;
  int default_blank = m.variant == Variant::kMhat ? 16 : 0;
  m.joint_dim = field(j, "joint_dim", default_joint);
  m.blank_decoder_dim = field(j, "blank_decoder_dim", default_blank);
  if (j.contains("text_encoder")) {
    const json& jt = j.at("text_encoder");
    check_keys(jt, {"layers", "injection_layer"}, "model.text_encoder");
    m.text_encoder.layers = field(jt, "layers", m.text_encoder.layers);
    m.text_encoder.injection_layer = field(jt, "injection_layer", m.text_encoder.injection_layer);
  }
  // Shapes implied by the corpus; explicit values must agree.
  m.vocab_size = field(j, "vocab_size", corpus.vocab_size());
  m.feature_dim = field(j, "feature_dim", corpus.feature_dim);
  m.num_domains = field(j, "num_domains", corpus.utterance_domains());
  JL_CHECK(m.vocab_size == corpus.vocab_size(), "model.vocab_size must match the corpus (",
           corpus.vocab_size(), ")");
  JL_CHECK(m.feature_dim == corpus.feature_dim, "model.feature_dim must match the corpus (",
           corpus.feature_dim, ")");
  JL_CHECK(m.num_domains == corpus.utterance_domains(),
           "model.num_domains must match the corpus (", corpus.utterance_domains(), ")");
}

void apply_train(const json& j, TrainConfig& t, Variant variant, std::uint64_t master,
                 const ConfigOverrides& o) {
  check_keys(j,
             {"mode", "alpha", "beta", "kld_weight", "upsample", "paired_batch_size",
              "unpaired_batch_size", "steps", "learning_rate", "beta1", "beta2", "eps",
              "clip_norm", "eval_every", "eval_beam_width", "eval_max_symbols", "seed"},
             "train");
  Mode document_mode = mode_from_name(field<std::string>(j, "mode", "base"));
  Mode mode = o.mode ? mode_from_name(*o.mode) : document_mode;
  ObjectiveSpec obj = default_objective(mode, variant);
  if (mode == document_mode) {
    obj.alpha = field(j, "alpha", obj.alpha);
    obj.beta = field(j, "beta", obj.beta);
    obj.kld_weight = field(j, "kld_weight", obj.kld_weight);
  }
  if (j.contains("upsample")) {
    const json& ju = j.at("upsample");
    check_keys(ju, {"k_min", "k_max", "mask_prob"}, "train.upsample");
    obj.upsample.k_min = field(ju, "k_min", obj.upsample.k_min);
    obj.upsample.k_max = field(ju, "k_max", obj.upsample.k_max);
    obj.upsample.mask_prob = field(ju, "mask_prob", obj.upsample.mask_prob);
  }
  if (o.kld_weight) obj.kld_weight = *o.kld_weight;
  t.objective = obj;
  t.paired_batch_size = field(j, "paired_batch_size", t.paired_batch_size);
  t.unpaired_batch_size = field(j, "unpaired_batch_size", t.unpaired_batch_size);
  t.steps = field(j, "steps", t.steps);
  t.optimizer.learning_rate = field(j, "learning_rate", t.optimizer.learning_rate);
  t.optimizer.beta1 = field(j, "beta1", t.optimizer.beta1);
  t.optimizer.beta2 = field(j, "beta2", t.optimizer.beta2);
  t.optimizer.eps = field(j, "eps", t.optimizer.eps);
  t.optimizer.clip_norm = field(j, "clip_norm", t.optimizer.clip_norm);
  t.eval_every = field(j, "eval_every", t.eval_every);
  t.eval_beam_width = field(j, "eval_beam_width", t.eval_beam_width);
  t.eval_max_symbols = field(j, "eval_max_symbols", t.eval_max_symbols);
  if (j.contains("seed") && !o.seed) {
    t.seed = j.at("seed").get<std::uint64_t>();
  } else {
    t.seed = Rng::derive_seed(master, "train");
  }
}

void apply_fusion(const json& j, FusionConfig& f, const ConfigOverrides& o) {
  check_keys(j, {"lambda_lm", "lambda_ilm", "beam_width", "max_symbols_per_frame"}, "fusion");
  f.lambda_lm = field(j, "lambda_lm", f.lambda_lm);
  f.lambda_ilm = field(j, "lambda_ilm", f.lambda_ilm);
  f.beam_width = field(j, "beam_width", f.beam_width);
  f.max_symbols_per_frame = field(j, "max_symbols_per_frame", f.max_symbols_per_frame);
  if (o.lambda_lm) f.lambda_lm = *o.lambda_lm;
  if (o.lambda_ilm) f.lambda_ilm = *o.lambda_ilm;
  if (o.beam_width) f.beam_width = *o.beam_width;
}

void apply_lm(const json& j, LmSection& lm, const CorpusSpec& corpus, std::uint64_t master,
              bool seed_overridden) {
  check_keys(j,
             {"vocab_size", "layers", "embed_dim", "hidden_dim", "steps", "batch_size",
              "learning_rate", "clip_norm", "paired_fraction", "seed"},
             "lm");
  lm.arch.layers = field(j, "layers", lm.arch.layers);
  lm.arch.embed_dim = field(j, "embed_dim", lm.arch.embed_dim);
  lm.arch.hidden_dim = field(j, "hidden_dim", lm.arch.hidden_dim);
  lm.arch.vocab_size = field(j, "vocab_size", corpus.vocab_size());
  JL_CHECK(lm.arch.vocab_size == corpus.vocab_size(), "lm.vocab_size must match the corpus (",
           corpus.vocab_size(), ")");
  lm.train.steps = field(j, "steps", lm.train.steps);
  lm.train.batch_size = field(j, "batch_size", lm.train.batch_size);
  lm.train.learning_rate = field(j, "learning_rate", lm.train.learning_rate);
  lm.train.clip_norm = field(j, "clip_norm", lm.train.clip_norm);
  lm.train.paired_fraction = field(j, "paired_fraction", lm.train.paired_fraction);
  if (j.contains("seed") && !seed_overridden) {
    lm.train.seed = j.at("seed").get<std::uint64_t>();
  } else {
    lm.train.seed = Rng::derive_seed(master, "lm");
  }
}

void apply_sweep(const json& j, SweepGrid& s) {
  check_keys(j, {"lambda_lm", "lambda_ilm"}, "sweep");
  s.lambda_lm = field(j, "lambda_lm", s.lambda_lm);
  s.lambda_ilm = field(j, "lambda_ilm", s.lambda_ilm);
}

}  // namespace

void SweepGrid::validate() const {
  JL_CHECK(!lambda_lm.empty() && !lambda_ilm.empty(), "sweep grids must be non-empty");
  for (double v : lambda_lm) JL_CHECK(is_finite(v) && v >= 0.0, "sweep lambda_lm must be >= 0");
  for (double v : lambda_ilm) JL_CHECK(is_finite(v) && v >= 0.0, "sweep lambda_ilm must be >= 0");
}

void RunConfig::validate() const {
  JL_CHECK(!out_dir.empty(), "out_dir must be set");
  corpus.validate();
  model.validate();
  train.validate();
  fusion.validate();
  lm.arch.validate();
  lm.train.validate();
  sweep.validate();
  JL_CHECK(model.vocab_size == corpus.vocab_size(), "model vocabulary does not match the corpus");
  JL_CHECK(model.feature_dim == corpus.feature_dim, "model feature width does not match the corpus");
  JL_CHECK(model.num_domains == corpus.utterance_domains(),
           "model speech domains do not match the corpus");
  JL_CHECK(lm.arch.vocab_size == corpus.vocab_size(), "lm vocabulary does not match the corpus");
}

RunConfig default_run_config(Variant variant) {
  RunConfig cfg;
  cfg.model.variant = variant;
  cfg.model.encoder_layers = 2;
  cfg.model.encoder_dim = 16;
  if (variant == Variant::kHat) {
    cfg.model.label_decoder.kind = LabelDecoderKind::kRecurrent;
    cfg.model.label_decoder.layers = 1;
    cfg.model.label_decoder.width = 16;
    cfg.model.joint_dim = 16;
    cfg.model.blank_decoder_dim = 0;
  } else {
    cfg.model.label_decoder.kind = LabelDecoderKind::kV2Embed;
    cfg.model.label_decoder.embed_dim = 16;
    cfg.model.joint_dim = 0;
    cfg.model.blank_decoder_dim = 16;
  }
  cfg.model.vocab_size = cfg.corpus.vocab_size();
  cfg.model.feature_dim = cfg.corpus.feature_dim;
  cfg.model.num_domains = cfg.corpus.utterance_domains();
  cfg.corpus.seed = Rng::derive_seed(cfg.seed, "corpus");
  cfg.train.objective = default_objective(Mode::kBase, variant);
  cfg.train.seed = Rng::derive_seed(cfg.seed, "train");
  cfg.lm.arch.vocab_size = cfg.corpus.vocab_size();
  cfg.lm.train.seed = Rng::derive_seed(cfg.seed, "lm");
  cfg.validate();
  return cfg;
}

RunConfig load_run_config(const std::string& path, const ConfigOverrides& overrides) {
  std::ifstream in(path);
  JL_CHECK(in.good(), "cannot read config ", path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    JL_CHECK(false, "config ", path, " is not valid JSON: ", e.what());
  }
  check_keys(j, {"schema", "seed", "out_dir", "corpus", "model", "train", "fusion", "lm", "sweep"},
             "config");
  JL_CHECK(j.value("schema", -1) == kConfigSchema, "config ", path,
           " has an unsupported schema version");

  RunConfig cfg;
  cfg.seed = field<std::uint64_t>(j, "seed", cfg.seed);
  if (overrides.seed) cfg.seed = *overrides.seed;
  cfg.out_dir = field<std::string>(j, "out_dir", cfg.out_dir);
  if (overrides.out_dir) cfg.out_dir = *overrides.out_dir;

  bool seed_overridden = overrides.seed.has_value();
  apply_corpus(j.value("corpus", json::object()), cfg.corpus, cfg.seed, seed_overridden);
  apply_model(j.value("model", json::object()), cfg.model, cfg.corpus);
  apply_train(j.value("train", json::object()), cfg.train, cfg.model.variant, cfg.seed, overrides);
  apply_fusion(j.value("fusion", json::object()), cfg.fusion, overrides);
  apply_lm(j.value("lm", json::object()), cfg.lm, cfg.corpus, cfg.seed, seed_overridden);
  apply_sweep(j.value("sweep", json::object()), cfg.sweep);

  cfg.validate();
  return cfg;
}

std::string run_config_json(const RunConfig& cfg) {
  json j;
  j["schema"] = kConfigSchema;
  j["seed"] = cfg.seed;
  j["out_dir"] = cfg.out_dir;

  json jc;
  const CorpusSpec& c = cfg.corpus;
  jc["common_words"] = c.common_words;
  jc["carrier_words_per_domain"] = c.carrier_words_per_domain;
  jc["rare_domains"] = c.rare_domains;
  jc["rare_words_per_domain"] = c.rare_words_per_domain;
  jc["paired_count"] = c.paired_count;
  jc["unpaired_count"] = c.unpaired_count;
  jc["heldout_count"] = c.heldout_count;
  jc["base_test_count"] = c.base_test_count;
  jc["rare_test_count_per_domain"] = c.rare_test_count_per_domain;
  jc["rare_word_threshold"] = c.rare_word_threshold;
  jc["min_unpaired_occurrences"] = c.min_unpaired_occurrences;
  jc["unpaired_domain_weights"] = c.unpaired_domain_weights;
  jc["base_len_min"] = c.base_len_min;
  jc["base_len_max"] = c.base_len_max;
  jc["rare_filler_max"] = c.rare_filler_max;
  jc["feature_dim"] = c.feature_dim;
  jc["frames_per_token_min"] = c.frames_per_token_min;
  jc["frames_per_token_max"] = c.frames_per_token_max;
  jc["noise_level"] = c.noise_level;
  jc["rare_offset_scale"] = c.rare_offset_scale;
  jc["seed"] = c.seed;
  j["corpus"] = jc;

  json jm;
  const ModelConfig& m = cfg.model;
  jm["variant"] = variant_name(m.variant);
  jm["vocab_size"] = m.vocab_size;
  jm["feature_dim"] = m.feature_dim;
  jm["num_domains"] = m.num_domains;
  jm["encoder_layers"] = m.encoder_layers;
  jm["encoder_dim"] = m.encoder_dim;
  jm["label_decoder"] = {{"kind", label_decoder_kind_name(m.label_decoder.kind)},
                         {"layers", m.label_decoder.layers},
                         {"width", m.label_decoder.width},
                         {"embed_dim", m.label_decoder.embed_dim}};
  jm["blank_decoder_dim"] = m.blank_decoder_dim;
  jm["joint_dim"] = m.joint_dim;
  jm["text_encoder"] = {{"layers", m.text_encoder.layers},
                        {"injection_layer", m.text_encoder.injection_layer}};
  j["model"] = jm;

  json jt;
  const TrainConfig& t = cfg.train;
  jt["mode"] = mode_name(t.objective.mode);
  jt["alpha"] = t.objective.alpha;
  jt["beta"] = t.objective.beta;
  jt["kld_weight"] = t.objective.kld_weight;
  jt["upsample"] = {{"k_min", t.objective.upsample.k_min},
                    {"k_max", t.objective.upsample.k_max},
                    {"mask_prob", t.objective.upsample.mask_prob}};
  jt["paired_batch_size"] = t.paired_batch_size;
  jt["unpaired_batch_size"] = t.unpaired_batch_size;
  jt["steps"] = t.steps;
  jt["learning_rate"] = t.optimizer.learning_rate;
  jt["beta1"] = t.optimizer.beta1;
  jt["beta2"] = t.optimizer.beta2;
  jt["eps"] = t.optimizer.eps;
  jt["clip_norm"] = t.optimizer.clip_norm;
  jt["eval_every"] = t.eval_every;
  jt["eval_beam_width"] = t.eval_beam_width;
  jt["eval_max_symbols"] = t.eval_max_symbols;
  jt["seed"] = t.seed;
  j["train"] = jt;

  j["fusion"] = {{"lambda_lm", cfg.fusion.lambda_lm},
                 {"lambda_ilm", cfg.fusion.lambda_ilm},
                 {"beam_width", cfg.fusion.beam_width},
                 {"max_symbols_per_frame", cfg.fusion.max_symbols_per_frame}};

  json jl;
  jl["vocab_size"] = cfg.lm.arch.vocab_size;
  jl["layers"] = cfg.lm.arch.layers;
  jl["embed_dim"] = cfg.lm.arch.embed_dim;
  jl["hidden_dim"] = cfg.lm.arch.hidden_dim;
  jl["steps"] = cfg.lm.train.steps;
  jl["batch_size"] = cfg.lm.train.batch_size;
  jl["learning_rate"] = cfg.lm.train.learning_rate;
  jl["clip_norm"] = cfg.lm.train.clip_norm;
  jl["paired_fraction"] = cfg.lm.train.paired_fraction;
  jl["seed"] = cfg.lm.train.seed;
  j["lm"] = jl;

  j["sweep"] = {{"lambda_lm", cfg.sweep.lambda_lm}, {"lambda_ilm", cfg.sweep.lambda_ilm}};

  return j.dump(2) + "\n";
}

void save_run_config(const std::string& path, const RunConfig& cfg) {
  std::ofstream out(path, std::ios::trunc);
  JL_CHECK(out.good(), "cannot write config to ", path);
  out << run_config_json(cfg);
  JL_CHECK(out.good(), "write failed for ", path);
}

}  // namespace jeitlab
