// jeitlab/decoding.h
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

// Inference: frame-synchronous transducer beam search with optional external
// LM fusion and internal-LM score subtraction, a small recurrent external LM
// with its trainer, and word-error-rate scoring.
//
// Fusion scoring is log-linear: fused = e2e + lambda_lm * lm - lambda_ilm * ilm.
// The subtracted internal-LM score comes from the same estimator the training
// objectives drive, and it is charged on label expansions only, never on
// blank arcs.

#ifndef JEITLAB_DECODING_H_
#define JEITLAB_DECODING_H_

#include <cstdint>
#include <string>
#include <vector>

#include "jeitlab/model.h"
#include "jeitlab/tensor.h"

namespace jeitlab {

// One n-best entry. The component scores always reproduce fused_score under
// the fusion weights that produced it.
struct Hypothesis {
  std::vector<int> tokens;
  double e2e_logscore = 0.0;
  double lm_logscore = 0.0;
  double ilm_logscore = 0.0;
  double fused_score = 0.0;
};

struct FusionConfig {
  double lambda_lm = 0.3;
  double lambda_ilm = 0.1;
  int beam_width = 8;
  int max_symbols_per_frame = 4;  // guards against non-blank loops
  void validate() const;          // lambda_ilm > 0 requires lambda_lm > 0
};

double fused_score(const FusionConfig& cfg, double e2e, double lm, double ilm);

// ---------------------------------------------------------------------------
// External LM: stacked recurrent layers over the label vocabulary with an
// implicit start symbol. Row layout mirrors the transducer's label decoder.
// ---------------------------------------------------------------------------

struct ExternalLmConfig {
  int vocab_size = 0;
  int layers = 2;
  int embed_dim = 16;
  int hidden_dim = 32;
  void validate() const;
  int start_id() const { return vocab_size; }
  int table_rows() const { return vocab_size + 1; }
};

// Tape-free incremental scoring state.
struct LmState {
  std::vector<std::vector<double>> h, c;  // per layer
};

struct ExternalLm {
  ExternalLmConfig config;
  ParamStore params;

  static ExternalLm init(const ExternalLmConfig& config, std::uint64_t seed);

  // Graph-building sum of next-token cross entropies over one sentence.
  TensorPtr sequence_nll(const std::vector<int>& tokens) const;
  double sequence_nll_value(const std::vector<int>& tokens) const;

  // State after consuming the start symbol; next_logprobs on it scores the
  // first real token.
  LmState start_state() const;
  LmState advance(const LmState& s, int token) const;
  // Normalized log-distribution over the label vocabulary.
  std::vector<double> next_logprobs(const LmState& s) const;
};

// Conditional log-probability of `next` after `prefix`.
double lm_logprob(const ExternalLm& lm, const std::vector<int>& prefix, int next);

// exp(total nll / total tokens) over a text set.
double lm_perplexity(const ExternalLm& lm, const std::vector<std::vector<int>>& text);

// One tensor container holds the architecture dims and every parameter, so a
// saved LM reloads without a sidecar. Loading validates the layout.
void save_external_lm(const std::string& path, const ExternalLm& lm);
ExternalLm load_external_lm(const std::string& path);

struct LmTrainConfig {
  int steps = 300;
  int batch_size = 16;
  double learning_rate = 5e-3;
  double clip_norm = 5.0;
  // Probability that a batch slot draws from paired transcripts rather than
  // unpaired text.
  double paired_fraction = 0.5;
  std::uint64_t seed = 0;
  void validate() const;
};

struct LmTrainResult {
  ExternalLm lm;
  long paired_drawn = 0;
  long unpaired_drawn = 0;
  std::vector<double> step_losses;  // mean sentence nll per step
};

// Trains a fresh LM on the transcript/text mixture. Deterministic under the
// training seed.
LmTrainResult train_external_lm(const ExternalLmConfig& config,
                                const std::vector<std::vector<int>>& paired_transcripts,
                                const std::vector<std::vector<int>>& unpaired_text,
                                const LmTrainConfig& train);

// ---------------------------------------------------------------------------
// Beam search.
// ---------------------------------------------------------------------------

// Frame-synchronous transducer beam search. Within a frame, hypotheses are
// expanded in token-length order and identical token sequences merge their
// alignment mass by log-sum-exp before further expansion, so with an
// unbounded beam the e2e score of each surviving sequence equals its full
// alignment marginal. Candidate pruning and the returned n-best order sort
// by fused score with a lexicographic token tie-break, which makes decoding
// deterministic. `ext_lm` may be null when lambda_lm is zero.
std::vector<Hypothesis> beam_search(const Model& model, const TensorPtr& features,
                                    int domain_id, const FusionConfig& cfg,
                                    const ExternalLm* ext_lm = nullptr);

// One line per hypothesis: utterance id, rank, the four scores, then the
// token string (ids when `words` is empty).
std::string nbest_record(const std::string& utt_id, int rank, const Hypothesis& hyp,
                         const std::vector<std::string>& words);

// ---------------------------------------------------------------------------
// Word error rate.
// ---------------------------------------------------------------------------

// Levenshtein alignment counts. Ties prefer substitution, then deletion,
// then insertion, so the breakdown is deterministic.
struct EditStats {
  long substitutions = 0;
  long deletions = 0;
  long insertions = 0;
  long ref_len = 0;
  long edits() const { return substitutions + deletions + insertions; }
  double rate() const;
};

EditStats wer(const std::vector<int>& ref, const std::vector<int>& hyp);

// Corpus-level accumulation: rate = total edits / total reference length.
struct WerTotals {
  long substitutions = 0;
  long deletions = 0;
  long insertions = 0;
  long ref_len = 0;
  void add(const EditStats& s);
  long edits() const { return substitutions + deletions + insertions; }
  double rate() const;
};

}  // namespace jeitlab

#endif  // JEITLAB_DECODING_H_
