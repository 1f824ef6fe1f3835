// jeitlab/model.h
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

// Transducer model components: acoustic encoder, label decoders (recurrent
// and context-embedding variants), blank decoder, joint networks, internal-LM
// readout, and the text encoder for unpaired-text injection.
//
// Two joint factorizations are supported:
//   HAT:  a shared tanh bottleneck feeds a sigmoid blank gate and a label
//         softmax; emission mass is {b} for blank and {(1-b) P(y)} per label.
//   MHAT: acoustic and label log-softmax scores are added and renormalized;
//         the blank gate has its own decoder, so the label-side scores form
//         a self-contained internal LM.

#ifndef JEITLAB_MODEL_H_
#define JEITLAB_MODEL_H_

#include <cstdint>
#include <string>
#include <vector>

#include "jeitlab/rng.h"
#include "jeitlab/tensor.h"

namespace jeitlab {

enum class Variant { kHat, kMhat };
enum class LabelDecoderKind { kRecurrent, kV2Embed, kV4Embed };

std::string variant_name(Variant v);
Variant variant_from_name(const std::string& s);
std::string label_decoder_kind_name(LabelDecoderKind k);
LabelDecoderKind label_decoder_kind_from_name(const std::string& s);

struct LabelDecoderConfig {
  LabelDecoderKind kind = LabelDecoderKind::kRecurrent;
  int layers = 1;      // recurrent only
  int width = 16;      // recurrent only: hidden size and output dim
  int embed_dim = 16;  // context variants: per-position table width and output dim

  int output_dim() const;
  int context_size() const;  // 2 or 4; 0 for the recurrent variant
};

struct TextEncoderConfig {
  int layers = 1;
  int injection_layer = 0;  // 0 injects at the feature level
};

struct ModelConfig {
  Variant variant = Variant::kHat;
  int vocab_size = 8;  // labels only; blank, mask, and start are not members
  int feature_dim = 8;
  int num_domains = 4;  // speech domains; one extra text domain is reserved
  int encoder_layers = 2;
  int encoder_dim = 16;
  LabelDecoderConfig label_decoder;
  int blank_decoder_dim = 0;  // MHAT only; also the blank joint's tanh width
  int joint_dim = 0;          // HAT only
  TextEncoderConfig text_encoder;

  // Reserved token IDs live just above the label range.
  int mask_id() const { return vocab_size; }
  int bos_id() const { return vocab_size + 1; }
  int decoder_table_rows() const { return vocab_size + 2; }
  int text_table_rows() const { return vocab_size + 1; }  // labels + mask
  int text_domain() const { return num_domains; }
  int domain_onehot_dim() const { return num_domains + 1; }
  int encoder_input_dim() const { return feature_dim + domain_onehot_dim(); }
  // Width the text branch must produce at its injection point.
  int injection_input_dim() const {
    return text_encoder.injection_layer == 0 ? feature_dim : encoder_dim;
  }

  void validate() const;
};

struct Model {
  ModelConfig config;
  ParamStore params;

  static Model init(const ModelConfig& config, uint64_t seed);

  // Graph-building forward passes. `features` is [T x feature_dim]; the
  // domain one-hot is appended internally before the first encoder layer.
  TensorPtr encode(const TensorPtr& features, int domain_id) const;
  TensorPtr encode_from_layer(const TensorPtr& X, int first_layer) const;

  // Rows 0..rows-1 are the decoder outputs after consuming prefixes of
  // length 0..rows-1 of `tokens` (start symbol implicit). rows may be at
  // most tokens.size() + 1.
  TensorPtr label_decode_rows(const std::vector<int>& tokens, int rows) const;
  TensorPtr blank_decode_rows(const std::vector<int>& tokens, int rows) const;

  // Text branch: token/mask IDs -> per-position injection inputs, and the
  // full composition through the encoder tail.
  TensorPtr text_encode(const std::vector<int>& upsampled) const;
  TensorPtr encode_text(const std::vector<int>& upsampled) const;

  // Unnormalized internal-LM logits for each decoder-output row. The HAT
  // readout is the label path of the joint with the acoustic input zeroed;
  // the MHAT readout is the label-side score head.
  TensorPtr ilm_logits_rows(const TensorPtr& g_rows) const;

  // Tape-free normalized internal-LM distribution for one prefix.
  std::vector<double> ilm_logprobs(const std::vector<int>& prefix) const;
  std::vector<double> ilm_logprobs_from_g(const std::vector<double>& g) const;

  bool is_ilm_param(const std::string& name) const;
  std::vector<std::string> ilm_param_names() const;
};

// Single-cell joint evaluation on plain vectors; reads parameter values
// directly and builds no graph. Used by decoding and by tests.
struct HatCellOutput {
  double blank_logprob;
  double nonblank_logprob;             // log(1 - blank), shared by every label arc
  std::vector<double> label_logprobs;  // normalized over labels only
  // A label arc emitting y scores nonblank_logprob + label_logprobs[y].
};
HatCellOutput hat_joint(const Model& model, const std::vector<double>& f,
                        const std::vector<double>& g);

struct MhatCellOutput {
  double blank_logprob;
  double nonblank_logprob;  // log(1 - blank), shared by every label arc
  std::vector<double> a;    // normalized acoustic label scores
  std::vector<double> l;    // normalized label-side scores (the internal LM)
  std::vector<double> label_logprobs;
};
MhatCellOutput mhat_scores(const Model& model, const std::vector<double>& f,
                           const std::vector<double>& g, const std::vector<double>& gb);

// Incremental decoder state for frame-synchronous search (tape-free).
struct DecoderState {
  std::vector<int> context;               // context variants: newest token last
  std::vector<std::vector<double>> h, c;  // recurrent variant: per-layer states
  std::vector<double> g;                  // label decoder output for the prefix
  std::vector<double> gb;                 // blank decoder output (MHAT)
};
DecoderState initial_decoder_state(const Model& model);
DecoderState advance_decoder_state(const Model& model, const DecoderState& s, int token);

}  // namespace jeitlab

#endif  // JEITLAB_MODEL_H_
