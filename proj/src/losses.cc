// jeitlab/losses.cc
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

#include "jeitlab/losses.h"

#include "jeitlab/lattice.h"
#include "jeitlab/rng.h"

namespace jeitlab {

std::string mode_name(Mode m) {
  switch (m) {
    case Mode::kBase: return "base";
    case Mode::kIlmt: return "ilmt";
    case Mode::kJeit: return "jeit";
    case Mode::kJoist: return "joist";
    case Mode::kCjjt: return "cjjt";
    case Mode::kIlma: return "ilma";
  }
  fail("unreachable mode");
}

Mode mode_from_name(const std::string& s) {
  for (Mode m : {Mode::kBase, Mode::kIlmt, Mode::kJeit, Mode::kJoist, Mode::kCjjt, Mode::kIlma}) {
    if (s == mode_name(m)) return m;
  }
  fail("unknown objective mode '", s, "'");
}

void ObjectiveSpec::validate() const {
  JL_CHECK(alpha >= 0.0 && beta >= 0.0 && kld_weight >= 0.0,
           "objective: weights must be non-negative");
  switch (mode) {
    case Mode::kBase:
      JL_CHECK(alpha == 0.0 && beta == 0.0, "objective: base uses no auxiliary weights");
      break;
    case Mode::kIlmt:
      JL_CHECK(alpha == 0.0 && beta > 0.0, "objective: ilmt needs beta > 0 and alpha = 0");
      JL_CHECK(ilm_text_source == IlmTextSource::kPairedTranscripts,
               "objective: ilmt reads ILM text from the paired transcripts");
      break;
    case Mode::kJeit:
      JL_CHECK(alpha == 0.0 && beta > 0.0, "objective: jeit needs beta > 0 and alpha = 0");
      JL_CHECK(ilm_text_source == IlmTextSource::kUnpaired,
               "objective: jeit reads ILM text from the unpaired pool");
      break;
    case Mode::kJoist:
      JL_CHECK(alpha > 0.0 && beta == 0.0, "objective: joist needs alpha > 0 and beta = 0");
      break;
    case Mode::kCjjt:
      JL_CHECK(alpha > 0.0 && beta > 0.0, "objective: cjjt needs alpha > 0 and beta > 0");
      JL_CHECK(ilm_text_source == IlmTextSource::kUnpaired,
               "objective: cjjt reads ILM text from the unpaired pool");
      break;
    case Mode::kIlma:
      JL_CHECK(alpha == 0.0 && beta == 0.0, "objective: ilma uses only the KLD weight");
      break;
  }
  if (mode != Mode::kIlma) {
    JL_CHECK(kld_weight == 0.0, "objective: the KLD regularizer applies to adaptation only");
  }
  if (alpha > 0.0) upsample.validate();
}

ObjectiveSpec default_objective(Mode mode, Variant variant) {
  ObjectiveSpec s;
  s.mode = mode;
  switch (mode) {
    case Mode::kBase:
      break;
    case Mode::kIlmt:
      s.beta = 0.1;
      s.ilm_text_source = IlmTextSource::kPairedTranscripts;
      break;
    case Mode::kJeit:
      s.beta = variant == Variant::kHat ? 0.2 : 4.0;
      break;
    case Mode::kJoist:
      s.alpha = 0.25;
      s.upsample.mask_prob = 0.25;
      break;
    case Mode::kCjjt:
      s.alpha = 0.25;
      s.beta = 1.5;
      s.upsample.mask_prob = 0.25;
      break;
    case Mode::kIlma:
      s.kld_weight = 0.5;
      break;
  }
  return s;
}

void UpsampleMaskConfig::validate() const {
  JL_CHECK(k_min >= 1 && k_min <= k_max, "upsample: need 1 <= k_min <= k_max, got [", k_min,
           ", ", k_max, "]");
  JL_CHECK(mask_prob >= 0.0 && mask_prob <= 1.0, "upsample: mask_prob ", mask_prob,
           " outside [0, 1]");
}

std::vector<int> upsample_mask(const std::vector<int>& sentence, const UpsampleMaskConfig& cfg,
                               int mask_id, std::uint64_t stream_index) {
  cfg.validate();
  Rng rng = Rng::derive(cfg.rng_seed, "upsample_mask", stream_index);
  std::vector<int> out;
  out.reserve(sentence.size() * cfg.k_max);
  for (int tok : sentence) {
    int k = cfg.k_min == cfg.k_max
                ? cfg.k_min
                : static_cast<int>(rng.uniform_int(cfg.k_min, cfg.k_max));
    for (int i = 0; i < k; ++i) out.push_back(tok);
  }
  for (int& tok : out) {
    if (rng.bernoulli(cfg.mask_prob)) tok = mask_id;
  }
  return out;
}

namespace {

// Transducer NLL for one utterance-shaped input, shared by both E2E losses.
TensorPtr utterance_nll(const Model& model, const TensorPtr& encoded,
                        const std::vector<int>& transcript) {
  int rows = static_cast<int>(transcript.size()) + 1;
  TensorPtr G = model.label_decode_rows(transcript, rows);
  TensorPtr GB = model.config.variant == Variant::kMhat
                     ? model.blank_decode_rows(transcript, rows)
                     : nullptr;
  return transducer_nll(model, encoded, G, GB, transcript);
}

TensorPtr accumulate(TensorPtr total, TensorPtr term) {
  return total == nullptr ? term : add(total, term);
}

}  // namespace

TensorPtr e2e_loss_paired(const Model& model, const std::vector<Utterance>& batch) {
  JL_CHECK(!batch.empty(), "paired e2e loss: empty batch");
  TensorPtr total;
  for (const Utterance& utt : batch) {
    JL_CHECK(utt.features != nullptr, "paired e2e loss: utterance without features");
    TensorPtr F = model.encode(utt.features, utt.domain_id);
    total = accumulate(total, utterance_nll(model, F, utt.transcript));
  }
  return total;
}

TensorPtr e2e_loss_unpaired(const Model& model, const std::vector<std::vector<int>>& text_batch,
                            const UpsampleMaskConfig& cfg) {
  JL_CHECK(!text_batch.empty(), "unpaired e2e loss: empty batch");
  TensorPtr total;
  for (size_t i = 0; i < text_batch.size(); ++i) {
    const std::vector<int>& sentence = text_batch[i];
    JL_CHECK(!sentence.empty(), "unpaired e2e loss: empty sentence at index ", i);
    std::vector<int> pseudo = upsample_mask(sentence, cfg, model.config.mask_id(), i);
    TensorPtr F = model.encode_text(pseudo);
    total = accumulate(total, utterance_nll(model, F, sentence));
  }
  return total;
}

TensorPtr ilm_loss(const Model& model, const std::vector<std::vector<int>>& text_batch) {
  JL_CHECK(!text_batch.empty(), "ilm loss: empty batch");
  TensorPtr total;
  for (const std::vector<int>& sentence : text_batch) {
    if (sentence.empty()) continue;
    int U = static_cast<int>(sentence.size());
    TensorPtr G = model.label_decode_rows(sentence, U);
    TensorPtr logits = model.ilm_logits_rows(G);
    total = accumulate(total, cross_entropy_rows(logits, sentence));
  }
  return total != nullptr ? total : Tensor::scalar(0.0);
}

TensorPtr kld_regularizer(const Model& model, const Model& frozen,
                          const std::vector<std::vector<int>>& text_batch) {
  JL_CHECK(!text_batch.empty(), "kld regularizer: empty batch");
  JL_CHECK(frozen.config.variant == model.config.variant &&
               frozen.config.vocab_size == model.config.vocab_size,
           "kld regularizer: frozen snapshot is structurally different");
  TensorPtr total;
  for (const std::vector<int>& sentence : text_batch) {
    if (sentence.empty()) continue;
    int U = static_cast<int>(sentence.size());
    TensorPtr G = model.label_decode_rows(sentence, U);
    TensorPtr logits = model.ilm_logits_rows(G);
    std::vector<std::vector<double>> reference(U);
    std::vector<int> prefix;
    for (int u = 0; u < U; ++u) {
      reference[u] = frozen.ilm_logprobs(prefix);
      prefix.push_back(sentence[u]);
    }
    total = accumulate(total, kl_divergence_rows(reference, logits));
  }
  return total != nullptr ? total : Tensor::scalar(0.0);
}

TensorPtr composite_objective(const Model& model, const ObjectiveSpec& spec,
                              const std::vector<Utterance>& paired_batch,
                              const std::vector<std::vector<int>>& text_batch,
                              const Model* frozen) {
  JL_CHECK(spec.alpha >= 0.0 && spec.beta >= 0.0 && spec.kld_weight >= 0.0,
           "objective: weights must be non-negative");

  if (spec.mode == Mode::kIlma) {
    TensorPtr total = ilm_loss(model, text_batch);
    if (spec.kld_weight > 0.0) {
      JL_CHECK(frozen != nullptr, "objective: KLD regularizer needs the frozen snapshot");
      total = add(total, scale(kld_regularizer(model, *frozen, text_batch), spec.kld_weight));
    }
    return total;
  }

  TensorPtr total = e2e_loss_paired(model, paired_batch);
  if (spec.alpha > 0.0) {
    total = add(total, scale(e2e_loss_unpaired(model, text_batch, spec.upsample), spec.alpha));
  }
  if (spec.beta > 0.0) {
    if (spec.ilm_text_source == IlmTextSource::kPairedTranscripts) {
      std::vector<std::vector<int>> transcripts;
      transcripts.reserve(paired_batch.size());
      for (const Utterance& utt : paired_batch) transcripts.push_back(utt.transcript);
      total = add(total, scale(ilm_loss(model, transcripts), spec.beta));
    } else {
      total = add(total, scale(ilm_loss(model, text_batch), spec.beta));
    }
  }
  return total;
}

}  // namespace jeitlab
