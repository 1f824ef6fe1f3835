// jeitlab/training.h
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

// Training loop: mixed paired/unpaired batch scheduling, per-step optimizer
// updates on the composite objective, ILM adaptation with a frozen reference,
// periodic evaluation, checkpointing, and a line-delimited metrics log.
//
// Determinism contract: given (seed, config, corpus), every field of the
// metrics log except elapsed_ms is bitwise reproducible, and resuming from a
// saved run reproduces the uninterrupted run's remaining records exactly.

#ifndef JEITLAB_TRAINING_H_
#define JEITLAB_TRAINING_H_

#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "jeitlab/corpus.h"
#include "jeitlab/losses.h"
#include "jeitlab/model.h"
#include "jeitlab/optimizer.h"

namespace jeitlab {

// Which corpus streams a mode consumes. Adaptation is text-only; the text
// injection modes consume both.
bool mode_uses_paired_stream(Mode mode);
bool mode_uses_unpaired_stream(Mode mode);

struct TrainConfig {
  ObjectiveSpec objective;
  int paired_batch_size = 16;
  int unpaired_batch_size = 128;  // >= paired size whenever text is consumed
  int steps = 1000;
  AdamConfig optimizer;
  int eval_every = 200;
  std::uint64_t seed = 0;

  // Evaluation decoding, fusion off.
  int eval_beam_width = 4;
  int eval_max_symbols = 4;

  void validate() const;
};

// Cycles each required stream with a fresh shuffle per epoch. Draw order
// depends only on (seed, items consumed so far), so a resumed mixer that is
// fast-forwarded to the saved counters continues the exact sequence.
class BatchMixer {
 public:
  struct StepBatches {
    std::vector<Utterance> paired;
    std::vector<std::vector<int>> text;
  };

  BatchMixer(const std::vector<Utterance>* paired_pool,
             const std::vector<std::vector<int>>* unpaired_pool, const TrainConfig& cfg);

  // One step's draw: a paired batch, plus a text batch when the mode uses
  // unpaired text. Streams the mode does not use are never touched.
  StepBatches next();

  std::int64_t paired_consumed() const { return paired_consumed_; }
  std::int64_t unpaired_consumed() const { return unpaired_consumed_; }
  void set_consumed(std::int64_t paired, std::int64_t unpaired);

 private:
  const std::vector<Utterance>* paired_pool_;
  const std::vector<std::vector<int>>* unpaired_pool_;
  TrainConfig cfg_;
  std::int64_t paired_consumed_ = 0;
  std::int64_t unpaired_consumed_ = 0;
  // Cached shuffle of the current epoch per stream; index is epoch number.
  std::vector<int> paired_order_, unpaired_order_;
  std::int64_t paired_epoch_ = -1, unpaired_epoch_ = -1;
};

// One step/eval record each. Component losses are batch means; a quiet NaN
// marks a term the objective did not build, and such fields are omitted from
// the serialized record. elapsed_ms is wall clock since run start and is the
// one field outside the determinism contract.
struct StepMetrics {
  std::int64_t step = 0;  // 1-based index of the completed step
  double loss = 0.0;      // weighted total, batch-mean scale
  double e2e_paired = std::numeric_limits<double>::quiet_NaN();
  double e2e_unpaired = std::numeric_limits<double>::quiet_NaN();
  double ilm = std::numeric_limits<double>::quiet_NaN();
  double kld = std::numeric_limits<double>::quiet_NaN();
  double grad_norm = 0.0;  // pre-clip global norm
  double elapsed_ms = 0.0;
};

struct EvalMetrics {
  std::int64_t step = 0;
  double base_wer = 0.0;
  std::vector<double> rare_wer;     // one entry per rare domain
  double rare_aggregate_wer = 0.0;  // pooled over the rare sets
  double overall_wer = 0.0;         // pooled over every test set; selects the best checkpoint
  double ilm_ppl = 0.0;             // on the held-out unpaired slice
  double elapsed_ms = 0.0;
};

struct MetricsLog {
  std::vector<StepMetrics> steps;
  std::vector<EvalMetrics> evals;
};

// Line-delimited records, one JSON object per line, schema field on every
// record. Loading rejects unknown schema versions and malformed lines.
void save_metrics(const std::string& path, const MetricsLog& log);
MetricsLog load_metrics(const std::string& path);

// Internal-LM perplexity over full sentences (start symbol implicit).
double ilm_perplexity(const Model& model, const std::vector<std::vector<int>>& text);

// Marks every non-ILM parameter as frozen so the optimizer cannot move it.
// Adaptation runs call this once on the seeded model.
void apply_ilm_only_freeze(Model& model);

// One optimizer update on the composite objective built from the given
// batches. Terms are batch means; zero-weight terms are not built, so a
// zeroed weight reproduces the smaller objective bitwise. step_index seeds
// the per-step mask draw for the upsampled text term. frozen is required in
// adaptation mode, which also requires the non-ILM freeze to be in place.
// A non-finite loss or gradient throws with diagnostics; the step is not
// applied.
StepMetrics train_step(Model& model, Adam& optimizer, const TrainConfig& cfg,
                       const std::vector<Utterance>& paired_batch,
                       const std::vector<std::vector<int>>& text_batch, std::int64_t step_index,
                       const Model* frozen = nullptr);

struct RunOptions {
  // Checkpoint of parameter values to start from; required for adaptation,
  // which freezes everything outside the ILM and regularizes toward this
  // starting point.
  std::string init_params;
  // Continue a halted run from out_dir's saved state instead of starting
  // fresh. The remaining steps reproduce the uninterrupted run exactly.
  bool resume = false;
};

struct RunResult {
  Model model;  // parameters after the final step
  MetricsLog log;
  std::string last_checkpoint;
  std::string best_checkpoint;  // lowest pooled WER seen at eval; equals last when never evaluated
};

// Full training run: mixes batches, applies steps, evaluates every
// eval_every steps and at the final step, and keeps best and last
// checkpoints plus optimizer state and the metrics log under out_dir.
RunResult run_training(const TrainConfig& cfg, const ModelConfig& model_cfg,
                       const SplitBundle& bundle, const std::string& out_dir,
                       const RunOptions& opts = {});

}  // namespace jeitlab

#endif  // JEITLAB_TRAINING_H_
