// jeitlab/config.h
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

// One declarative document drives a whole experiment: corpus, model, training
// objective, fusion decoding, external LM, and the fusion sweep grid. A run
// is fully determined by the resolved document, so every command echoes it
// into its output directory.
//
// Resolution rules: the top-level seed is the master seed; section seeds and
// the model/LM shapes implied by the corpus are derived from it unless the
// document pins them explicitly. Unknown keys are rejected.

#ifndef JEITLAB_CONFIG_H_
#define JEITLAB_CONFIG_H_

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "jeitlab/corpus.h"
#include "jeitlab/decoding.h"
#include "jeitlab/model.h"
#include "jeitlab/training.h"

namespace jeitlab {

// Grid for the fusion weight sweep. Combinations with an ILM weight but no
// LM weight are skipped during the sweep (subtraction needs fusion).
struct SweepGrid {
  std::vector<double> lambda_lm = {0.0, 0.1, 0.2, 0.3};
  std::vector<double> lambda_ilm = {0.0, 0.1, 0.2};
  void validate() const;
};

struct LmSection {
  ExternalLmConfig arch;  // vocab_size resolved from the corpus
  LmTrainConfig train;
};

struct RunConfig {
  std::uint64_t seed = 1;
  std::string out_dir = "runs/desk";
  CorpusSpec corpus;
  ModelConfig model;
  TrainConfig train;
  FusionConfig fusion;
  LmSection lm;
  SweepGrid sweep;

  void validate() const;
};

// Command-line overrides applied during load, before validation.
struct ConfigOverrides {
  std::optional<std::uint64_t> seed;  // replaces the master seed and re-derives section seeds
  std::optional<std::string> out_dir;
  std::optional<std::string> mode;  // training mode; resets weights to the mode's defaults
  std::optional<double> kld_weight;
  std::optional<double> lambda_lm;
  std::optional<double> lambda_ilm;
  std::optional<int> beam_width;
};

// Desk-scale defaults for one model variant, already resolved and valid.
RunConfig default_run_config(Variant variant);

// Strict load: unknown keys, schema mismatches, and inconsistent shapes are
// all errors. Weight fields in the document apply only when the resolved
// mode equals the document's mode; a --mode override starts from that mode's
// default weights.
RunConfig load_run_config(const std::string& path, const ConfigOverrides& overrides = {});

// Fully resolved document, byte-stable for a given config. Loading the saved
// form reproduces the config exactly.
std::string run_config_json(const RunConfig& cfg);
void save_run_config(const std::string& path, const RunConfig& cfg);

}  // namespace jeitlab

#endif  // JEITLAB_CONFIG_H_
