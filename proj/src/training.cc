// jeitlab/training.cc
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

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "jeitlab/container.h"
#include "jeitlab/decoding.h"
#include "jeitlab/rng.h"

namespace jeitlab {

using nlohmann::json;

namespace {

constexpr int kMetricsSchema = 1;
constexpr int kStateSchema = 1;

constexpr double kAbsent = std::numeric_limits<double>::quiet_NaN();

std::vector<int> epoch_order(size_t n, std::uint64_t seed, const char* tag, std::int64_t epoch) {
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng = Rng::derive(seed, tag, static_cast<std::uint64_t>(epoch));
  rng.shuffle(order);
  return order;
}

}  // namespace

bool mode_uses_paired_stream(Mode mode) { return mode != Mode::kIlma; }

bool mode_uses_unpaired_stream(Mode mode) {
  return mode == Mode::kJeit || mode == Mode::kJoist || mode == Mode::kCjjt ||
         mode == Mode::kIlma;
}

void TrainConfig::validate() const {
  objective.validate();
  optimizer.validate();
  JL_CHECK(paired_batch_size >= 1, "paired_batch_size must be >= 1");
  JL_CHECK(steps >= 0, "steps must be >= 0");
  JL_CHECK(eval_every >= 1, "eval_every must be >= 1");
  JL_CHECK(eval_beam_width >= 1, "eval_beam_width must be >= 1");
  JL_CHECK(eval_max_symbols >= 1, "eval_max_symbols must be >= 1");
  if (mode_uses_unpaired_stream(objective.mode)) {
    JL_CHECK(unpaired_batch_size >= 1, "unpaired_batch_size must be >= 1");
    JL_CHECK(unpaired_batch_size >= paired_batch_size,
             "text batches must be at least as large as paired batches");
  }
}

BatchMixer::BatchMixer(const std::vector<Utterance>* paired_pool,
                       const std::vector<std::vector<int>>* unpaired_pool,
                       const TrainConfig& cfg)
    : paired_pool_(paired_pool), unpaired_pool_(unpaired_pool), cfg_(cfg) {
  cfg_.validate();
  if (mode_uses_paired_stream(cfg_.objective.mode)) {
    JL_CHECK(paired_pool_ != nullptr && !paired_pool_->empty(),
             "objective consumes paired utterances but the stream is empty");
  }
  if (mode_uses_unpaired_stream(cfg_.objective.mode)) {
    JL_CHECK(unpaired_pool_ != nullptr && !unpaired_pool_->empty(),
             "objective consumes unpaired text but the stream is empty");
  }
}

BatchMixer::StepBatches BatchMixer::next() {
  StepBatches out;
  if (mode_uses_paired_stream(cfg_.objective.mode)) {
    const std::int64_t n = static_cast<std::int64_t>(paired_pool_->size());
    out.paired.reserve(static_cast<size_t>(cfg_.paired_batch_size));
    for (int i = 0; i < cfg_.paired_batch_size; ++i) {
      std::int64_t epoch = paired_consumed_ / n;
      std::int64_t pos = paired_consumed_ % n;
      if (epoch != paired_epoch_) {
        paired_order_ = epoch_order(paired_pool_->size(), cfg_.seed, "paired_order", epoch);
        paired_epoch_ = epoch;
      }
      out.paired.push_back((*paired_pool_)[static_cast<size_t>(paired_order_[pos])]);
      ++paired_consumed_;
    }
  }
  if (mode_uses_unpaired_stream(cfg_.objective.mode)) {
    const std::int64_t n = static_cast<std::int64_t>(unpaired_pool_->size());
    out.text.reserve(static_cast<size_t>(cfg_.unpaired_batch_size));
    for (int i = 0; i < cfg_.unpaired_batch_size; ++i) {
      std::int64_t epoch = unpaired_consumed_ / n;
      std::int64_t pos = unpaired_consumed_ % n;
      if (epoch != unpaired_epoch_) {
        unpaired_order_ =
            epoch_order(unpaired_pool_->size(), cfg_.seed, "unpaired_order", epoch);
        unpaired_epoch_ = epoch;
      }
      out.text.push_back((*unpaired_pool_)[static_cast<size_t>(unpaired_order_[pos])]);
      ++unpaired_consumed_;
    }
  }
  return out;
}

void BatchMixer::set_consumed(std::int64_t paired, std::int64_t unpaired) {
  JL_CHECK(paired >= 0 && unpaired >= 0, "consumed counters must be >= 0");
  paired_consumed_ = paired;
  unpaired_consumed_ = unpaired;
  // Cached epoch orders are stale; recompute lazily on the next draw.
  paired_epoch_ = -1;
  unpaired_epoch_ = -1;
}

namespace {

json step_record(const StepMetrics& s) {
  json j;
  j["schema"] = kMetricsSchema;
  j["kind"] = "step";
  j["step"] = s.step;
  j["loss"] = s.loss;
  if (std::isfinite(s.e2e_paired)) j["e2e_paired"] = s.e2e_paired;
  if (std::isfinite(s.e2e_unpaired)) j["e2e_unpaired"] = s.e2e_unpaired;
  if (std::isfinite(s.ilm)) j["ilm"] = s.ilm;
  if (std::isfinite(s.kld)) j["kld"] = s.kld;
  j["grad_norm"] = s.grad_norm;
  j["elapsed_ms"] = s.elapsed_ms;
  return j;
}

json eval_record(const EvalMetrics& e) {
  json j;
  j["schema"] = kMetricsSchema;
  j["kind"] = "eval";
  j["step"] = e.step;
  j["base_wer"] = e.base_wer;
  j["rare_wer"] = e.rare_wer;
  j["rare_aggregate_wer"] = e.rare_aggregate_wer;
  j["overall_wer"] = e.overall_wer;
  j["ilm_ppl"] = e.ilm_ppl;
  j["elapsed_ms"] = e.elapsed_ms;
  return j;
}

}  // namespace

void save_metrics(const std::string& path, const MetricsLog& log) {
  std::ofstream out(path, std::ios::trunc);
  JL_CHECK(out.good(), "cannot write metrics to ", path);
  // Chronological interleave: each eval follows the step it measured.
  size_t ei = 0;
  for (const StepMetrics& s : log.steps) {
    out << step_record(s).dump() << "\n";
    while (ei < log.evals.size() && log.evals[ei].step <= s.step)
      out << eval_record(log.evals[ei++]).dump() << "\n";
  }
  while (ei < log.evals.size()) out << eval_record(log.evals[ei++]).dump() << "\n";
  JL_CHECK(out.good(), "write failed for ", path);
}

MetricsLog load_metrics(const std::string& path) {
  std::ifstream in(path);
  JL_CHECK(in.good(), "cannot read metrics from ", path);
  MetricsLog log;
  std::string line;
  size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      JL_CHECK(false, "metrics line ", lineno, " is not valid JSON: ", e.what());
    }
    JL_CHECK(j.value("schema", -1) == kMetricsSchema, "metrics line ", lineno,
             " has an unsupported schema version");
    const std::string kind = j.value("kind", "");
    if (kind == "step") {
      StepMetrics s;
      s.step = j.at("step").get<std::int64_t>();
      s.loss = j.at("loss").get<double>();
      s.e2e_paired = j.value("e2e_paired", kAbsent);
      s.e2e_unpaired = j.value("e2e_unpaired", kAbsent);
      s.ilm = j.value("ilm", kAbsent);
      s.kld = j.value("kld", kAbsent);
      s.grad_norm = j.at("grad_norm").get<double>();
      s.elapsed_ms = j.at("elapsed_ms").get<double>();
      log.steps.push_back(std::move(s));
    } else if (kind == "eval") {
      EvalMetrics e;
      e.step = j.at("step").get<std::int64_t>();
      e.base_wer = j.at("base_wer").get<double>();
      e.rare_wer = j.at("rare_wer").get<std::vector<double>>();
      e.rare_aggregate_wer = j.at("rare_aggregate_wer").get<double>();
      e.overall_wer = j.at("overall_wer").get<double>();
      e.ilm_ppl = j.at("ilm_ppl").get<double>();
      e.elapsed_ms = j.at("elapsed_ms").get<double>();
      log.evals.push_back(std::move(e));
    } else {
      JL_CHECK(false, "metrics line ", lineno, " has unknown kind '", kind, "'");
    }
  }
  return log;
}

double ilm_perplexity(const Model& model, const std::vector<std::vector<int>>& text) {
  JL_CHECK(!text.empty(), "perplexity needs at least one sentence");
  NoGradGuard guard;
  double total_nll = 0.0;
  std::int64_t tokens = 0;
  for (const auto& sentence : text) {
    JL_CHECK(!sentence.empty(), "perplexity over an empty sentence");
    DecoderState state = initial_decoder_state(model);
    for (int y : sentence) {
      JL_CHECK(y >= 0 && y < model.config.vocab_size, "token ", y, " outside the label range");
      total_nll -= model.ilm_logprobs_from_g(state.g)[static_cast<size_t>(y)];
      ++tokens;
      state = advance_decoder_state(model, state, y);
    }
  }
  return std::exp(total_nll / static_cast<double>(tokens));
}

void apply_ilm_only_freeze(Model& model) {
  for (auto& [name, param] : model.params.items()) param.trainable = model.is_ilm_param(name);
}

StepMetrics train_step(Model& model, Adam& optimizer, const TrainConfig& cfg,
                       const std::vector<Utterance>& paired_batch,
                       const std::vector<std::vector<int>>& text_batch, std::int64_t step_index,
                       const Model* frozen) {
  const ObjectiveSpec& spec = cfg.objective;
  StepMetrics out;
  out.step = step_index;
  out.e2e_paired = out.e2e_unpaired = out.ilm = out.kld = kAbsent;

  // Terms are built as batch means in the same order as the summed composite,
  // and zero-weight terms are skipped entirely so a zeroed weight yields a
  // graph bitwise identical to the smaller objective's.
  TensorPtr total;
  if (spec.mode == Mode::kIlma) {
    JL_CHECK(frozen != nullptr, "adaptation requires the frozen reference model");
    for (const auto& [name, param] : model.params.items()) {
      JL_CHECK(!param.trainable || model.is_ilm_param(name),
               "adaptation requires the non-ILM freeze, but '", name, "' is trainable");
    }
    JL_CHECK(!text_batch.empty(), "adaptation step needs a text batch");
    const double inv = 1.0 / static_cast<double>(text_batch.size());
    TensorPtr ilm_term = scale(ilm_loss(model, text_batch), inv);
    out.ilm = ilm_term->scalar_value();
    total = ilm_term;
    if (spec.kld_weight > 0.0) {
      TensorPtr kld_term = scale(kld_regularizer(model, *frozen, text_batch), inv);
      out.kld = kld_term->scalar_value();
      total = add(total, scale(kld_term, spec.kld_weight));
    }
  } else {
    JL_CHECK(!paired_batch.empty(), "training step needs a paired batch");
    TensorPtr paired_term =
        scale(e2e_loss_paired(model, paired_batch), 1.0 / static_cast<double>(paired_batch.size()));
    out.e2e_paired = paired_term->scalar_value();
    total = paired_term;
    if (spec.alpha > 0.0) {
      JL_CHECK(!text_batch.empty(), "objective needs a text batch");
      UpsampleMaskConfig up = spec.upsample;
      up.rng_seed = Rng::derive_seed(cfg.seed, "upsample", static_cast<std::uint64_t>(step_index));
      TensorPtr unpaired_term = scale(e2e_loss_unpaired(model, text_batch, up),
                                      1.0 / static_cast<double>(text_batch.size()));
      out.e2e_unpaired = unpaired_term->scalar_value();
      total = add(total, scale(unpaired_term, spec.alpha));
    }
    if (spec.beta > 0.0) {
      const std::vector<std::vector<int>>* ilm_text = &text_batch;
      std::vector<std::vector<int>> transcripts;
      if (spec.ilm_text_source == IlmTextSource::kPairedTranscripts) {
        transcripts.reserve(paired_batch.size());
        for (const Utterance& u : paired_batch) transcripts.push_back(u.transcript);
        ilm_text = &transcripts;
      } else {
        JL_CHECK(!text_batch.empty(), "objective needs a text batch");
      }
      TensorPtr ilm_term =
          scale(ilm_loss(model, *ilm_text), 1.0 / static_cast<double>(ilm_text->size()));
      out.ilm = ilm_term->scalar_value();
      total = add(total, scale(ilm_term, spec.beta));
    }
  }

  out.loss = total->scalar_value();
  JL_CHECK(is_finite(out.loss), "non-finite loss at step ", step_index, " in mode ",
           mode_name(spec.mode), "; run halted before the update");
  model.params.zero_grad();
  backward(total);
  out.grad_norm = optimizer.step(model.params);
  return out;
}

namespace {

EvalMetrics evaluate_checkpoint(const Model& model, const SplitBundle& bundle,
                                const TrainConfig& cfg, std::int64_t step) {
  FusionConfig fusion;
  fusion.lambda_lm = 0.0;
  fusion.lambda_ilm = 0.0;
  fusion.beam_width = cfg.eval_beam_width;
  fusion.max_symbols_per_frame = cfg.eval_max_symbols;

  auto decode_set = [&](const std::vector<Utterance>& set) {
    WerTotals totals;
    for (const Utterance& utt : set) {
      std::vector<Hypothesis> nbest = beam_search(model, utt.features, utt.domain_id, fusion);
      JL_CHECK(!nbest.empty(), "decoder produced no hypotheses");
      totals.add(wer(utt.transcript, nbest[0].tokens));
    }
    return totals;
  };

  EvalMetrics ev;
  ev.step = step;
  WerTotals base = decode_set(bundle.base_test);
  ev.base_wer = base.rate();
  WerTotals pooled_rare;
  WerTotals pooled_all = base;
  for (const auto& domain_set : bundle.rare_tests) {
    WerTotals d = decode_set(domain_set);
    ev.rare_wer.push_back(d.rate());
    pooled_rare.substitutions += d.substitutions;
    pooled_rare.deletions += d.deletions;
    pooled_rare.insertions += d.insertions;
    pooled_rare.ref_len += d.ref_len;
  }
  pooled_all.substitutions += pooled_rare.substitutions;
  pooled_all.deletions += pooled_rare.deletions;
  pooled_all.insertions += pooled_rare.insertions;
  pooled_all.ref_len += pooled_rare.ref_len;
  ev.rare_aggregate_wer = pooled_rare.ref_len > 0 ? pooled_rare.rate() : 0.0;
  ev.overall_wer = pooled_all.rate();
  ev.ilm_ppl = ilm_perplexity(model, bundle.unpaired_heldout);
  return ev;
}

}  // namespace

RunResult run_training(const TrainConfig& cfg, const ModelConfig& model_cfg,
                       const SplitBundle& bundle, const std::string& out_dir,
                       const RunOptions& opts) {
  cfg.validate();
  model_cfg.validate();
  const Mode mode = cfg.objective.mode;
  JL_CHECK(model_cfg.vocab_size == bundle.spec.vocab_size(),
           "model vocabulary does not match the corpus");
  JL_CHECK(model_cfg.feature_dim == bundle.spec.feature_dim,
           "model feature width does not match the corpus");
  JL_CHECK(model_cfg.num_domains == bundle.spec.utterance_domains(),
           "model speech domains do not match the corpus");

  std::filesystem::create_directories(out_dir);
  const std::string init_path = out_dir + "/checkpoint_init.bin";
  const std::string last_path = out_dir + "/checkpoint_last.bin";
  const std::string best_path = out_dir + "/checkpoint_best.bin";
  const std::string adam_path = out_dir + "/adam_state.bin";
  const std::string state_path = out_dir + "/train_state.json";
  const std::string metrics_path = out_dir + "/metrics.jsonl";

  Model model = Model::init(model_cfg, Rng::derive_seed(cfg.seed, "model_init"));
  Adam adam(cfg.optimizer);
  BatchMixer mixer(&bundle.paired_train, &bundle.unpaired_text, cfg);
  MetricsLog log;
  std::int64_t start_step = 0;
  bool has_best = false;
  std::int64_t best_step = -1;
  double best_metric = 0.0;

  if (opts.resume) {
    JL_CHECK(std::filesystem::exists(state_path), "nothing to resume under ", out_dir);
    std::ifstream in(state_path);
    json state;
    try {
      in >> state;
      JL_CHECK(state.value("schema", -1) == kStateSchema,
               "saved run has an unsupported state schema");
      start_step = state.at("step").get<std::int64_t>();
      mixer.set_consumed(state.at("paired_consumed").get<std::int64_t>(),
                         state.at("unpaired_consumed").get<std::int64_t>());
      has_best = state.at("has_best").get<bool>();
      if (has_best) {
        best_step = state.at("best_step").get<std::int64_t>();
        best_metric = state.at("best_metric").get<double>();
      }
    } catch (const json::exception& e) {
      JL_CHECK(false, "corrupt train state in ", state_path, ": ", e.what());
    }
    load_param_values(last_path, model.params);
    adam.load_state(adam_path, model.params);
    log = load_metrics(metrics_path);
    // Records past the saved step belong to a halted attempt; recompute them.
    while (!log.steps.empty() && log.steps.back().step > start_step) log.steps.pop_back();
    while (!log.evals.empty() && log.evals.back().step > start_step) log.evals.pop_back();
  } else {
    if (!opts.init_params.empty()) {
      load_param_values(opts.init_params, model.params);
    } else {
      JL_CHECK(mode != Mode::kIlma, "adaptation must start from a trained checkpoint");
    }
    save_param_values(init_path, model.params);
  }

  // The adaptation reference: the starting parameters, value-frozen.
  Model frozen;
  if (mode == Mode::kIlma) {
    frozen.config = model.config;
    frozen.params = model.params.clone();
    if (opts.resume) load_param_values(init_path, frozen.params);
    apply_ilm_only_freeze(model);
  }

  const auto run_start = std::chrono::steady_clock::now();
  auto elapsed_ms = [&run_start]() {
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - run_start)
        .count();
  };

  auto save_run_state = [&](std::int64_t step) {
    save_param_values(last_path, model.params);
    adam.save_state(adam_path);
    json state;
    state["schema"] = kStateSchema;
    state["step"] = step;
    state["paired_consumed"] = mixer.paired_consumed();
    state["unpaired_consumed"] = mixer.unpaired_consumed();
    state["has_best"] = has_best;
    if (has_best) {
      state["best_step"] = best_step;
      state["best_metric"] = best_metric;
    }
    std::ofstream out(state_path, std::ios::trunc);
    out << state.dump(2) << "\n";
    JL_CHECK(out.good(), "cannot write train state to ", state_path);
    save_metrics(metrics_path, log);
  };

  for (std::int64_t step = start_step + 1; step <= cfg.steps; ++step) {
    BatchMixer::StepBatches batches = mixer.next();
    StepMetrics sm = train_step(model, adam, cfg, batches.paired, batches.text, step,
                                mode == Mode::kIlma ? &frozen : nullptr);
    sm.elapsed_ms = elapsed_ms();
    log.steps.push_back(sm);

    if (step % cfg.eval_every == 0 || step == cfg.steps) {
      EvalMetrics ev = evaluate_checkpoint(model, bundle, cfg, step);
      ev.elapsed_ms = elapsed_ms();
      log.evals.push_back(ev);
      if (!has_best || ev.overall_wer < best_metric) {
        has_best = true;
        best_step = step;
        best_metric = ev.overall_wer;
        save_param_values(best_path, model.params);
      }
      save_run_state(step);
    }
  }

  if (cfg.steps <= start_step) save_run_state(start_step);

  RunResult result;
  result.model = std::move(model);
  result.log = std::move(log);
  result.last_checkpoint = last_path;
  result.best_checkpoint = has_best ? best_path : last_path;
  return result;
}

}  // namespace jeitlab
