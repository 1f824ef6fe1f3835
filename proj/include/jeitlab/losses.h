// jeitlab/losses.h
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

// Training objectives. The paired E2E loss is the transducer NLL; unpaired
// text enters either through the same lattice loss on upsampled and masked
// token features, or through a cross-entropy loss on the internal LM, or
// both. Objectives are summed over the batch; trainers rescale gradients.

#ifndef JEITLAB_LOSSES_H_
#define JEITLAB_LOSSES_H_

#include <cstdint>
#include <string>
#include <vector>

#include "jeitlab/corpus.h"
#include "jeitlab/model.h"
#include "jeitlab/tensor.h"

namespace jeitlab {

// Which terms make up the objective and where the ILM's text comes from.
//   kBase: paired E2E only.
//   kIlmt: paired E2E + beta * ILM loss on the paired transcripts.
//   kJeit: paired E2E + beta * ILM loss on unpaired text.
//   kJoist: paired E2E + alpha * unpaired E2E on upsampled masked text.
//   kCjjt: paired E2E + alpha * unpaired E2E + beta * ILM loss on unpaired.
//   kIlma: ILM loss on unpaired text + kld_weight * KLD to a frozen snapshot;
//          only the ILM parameters are meant to move.
enum class Mode { kBase, kIlmt, kJeit, kJoist, kCjjt, kIlma };

std::string mode_name(Mode m);
Mode mode_from_name(const std::string& s);

enum class IlmTextSource { kPairedTranscripts, kUnpaired };

// Token repetition and masking applied to unpaired text before it is fed to
// the encoder as pseudo-acoustic input. k_min == k_max gives fixed-rate
// repetition.
struct UpsampleMaskConfig {
  int k_min = 2;
  int k_max = 2;
  double mask_prob = 0.0;
  std::uint64_t rng_seed = 0;

  void validate() const;
};

struct ObjectiveSpec {
  Mode mode = Mode::kBase;
  double alpha = 0.0;       // unpaired E2E weight
  double beta = 0.0;        // ILM loss weight
  double kld_weight = 0.0;  // KLD regularizer weight, adaptation only
  IlmTextSource ilm_text_source = IlmTextSource::kUnpaired;
  UpsampleMaskConfig upsample;  // used when alpha > 0; trainers reseed per step

  // Strict mode/weight consistency, enforced when configs are loaded. The
  // objective builder itself accepts any non-negative weights and simply
  // drops zero-weight terms, so ablations can zero a weight without changing
  // mode.
  void validate() const;
};

// Paper-calibrated default weights per mode; the ILM weight differs by
// variant (the modular joint tolerates a much stronger ILM pull).
ObjectiveSpec default_objective(Mode mode, Variant variant);

// Replicates each token per the policy, then independently replaces each
// output position with mask_id with probability mask_prob. Deterministic in
// (rng_seed, stream_index); batches pass their utterance index as the stream.
std::vector<int> upsample_mask(const std::vector<int>& sentence, const UpsampleMaskConfig& cfg,
                               int mask_id, std::uint64_t stream_index = 0);

// Summed transducer NLL over paired utterances. One lattice per utterance.
TensorPtr e2e_loss_paired(const Model& model, const std::vector<Utterance>& batch);

// Summed transducer NLL of each sentence against its upsampled, masked self
// fed through the text encoder. Sentences must be nonempty.
TensorPtr e2e_loss_unpaired(const Model& model, const std::vector<std::vector<int>>& text_batch,
                            const UpsampleMaskConfig& cfg);

// Summed next-token NLL of each sentence under the internal LM. Touches only
// the ILM parameters.
TensorPtr ilm_loss(const Model& model, const std::vector<std::vector<int>>& text_batch);

// Sum over sentence positions of KL(frozen ILM || adapted ILM). Zero exactly
// when the two parameter sets agree.
TensorPtr kld_regularizer(const Model& model, const Model& frozen,
                          const std::vector<std::vector<int>>& text_batch);

// Weighted sum of the terms selected by the spec. Zero-weight terms are not
// built at all, so the reduced objective is bitwise identical to the smaller
// mode. frozen is required only when kld_weight > 0.
TensorPtr composite_objective(const Model& model, const ObjectiveSpec& spec,
                              const std::vector<Utterance>& paired_batch,
                              const std::vector<std::vector<int>>& text_batch,
                              const Model* frozen = nullptr);

}  // namespace jeitlab

#endif  // JEITLAB_LOSSES_H_
