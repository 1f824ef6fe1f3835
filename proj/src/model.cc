// jeitlab/model.cc
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

#include "jeitlab/model.h"

#include <algorithm>
#include <cmath>

namespace jeitlab {

namespace {

// y = W x on raw values.
std::vector<double> raw_affine(const Tensor& W, const std::vector<double>& x) {
  JL_CHECK(W.shape.size() == 2 && static_cast<size_t>(W.shape[1]) == x.size(),
           "raw affine: W is ", shape_str(W.shape), ", x has ", x.size(), " entries");
  int m = W.shape[0], n = W.shape[1];
  std::vector<double> y(m);
  for (int i = 0; i < m; ++i) {
    const double* row = W.value.data() + static_cast<size_t>(i) * n;
    double s = 0.0;
    for (int j = 0; j < n; ++j) s += row[j] * x[j];
    y[i] = s;
  }
  return y;
}

void raw_log_softmax_inplace(std::vector<double>& v) {
  JL_CHECK(!v.empty(), "raw log_softmax: empty input");
  double m = *std::max_element(v.begin(), v.end());
  double s = 0.0;
  for (double x : v) s += std::exp(x - m);
  double lse = m + std::log(s);
  for (double& x : v) x -= lse;
}

void check_labels(const std::vector<int>& tokens, int vocab_size, const char* where) {
  for (int t : tokens) {
    JL_CHECK(t >= 0 && t < vocab_size, where, ": token ", t, " outside label range [0, ",
             vocab_size, ")");
  }
}

}  // namespace

std::string variant_name(Variant v) { return v == Variant::kHat ? "hat" : "mhat"; }

Variant variant_from_name(const std::string& s) {
  if (s == "hat" || s == "HAT") return Variant::kHat;
  if (s == "mhat" || s == "MHAT") return Variant::kMhat;
  fail("unknown model variant '", s, "' (expected hat or mhat)");
}

std::string label_decoder_kind_name(LabelDecoderKind k) {
  switch (k) {
    case LabelDecoderKind::kRecurrent: return "recurrent";
    case LabelDecoderKind::kV2Embed: return "v2_embed";
    case LabelDecoderKind::kV4Embed: return "v4_embed";
  }
  fail("unreachable label decoder kind");
}

LabelDecoderKind label_decoder_kind_from_name(const std::string& s) {
  if (s == "recurrent") return LabelDecoderKind::kRecurrent;
  if (s == "v2_embed") return LabelDecoderKind::kV2Embed;
  if (s == "v4_embed") return LabelDecoderKind::kV4Embed;
  fail("unknown label decoder kind '", s, "'");
}

int LabelDecoderConfig::output_dim() const {
  return kind == LabelDecoderKind::kRecurrent ? width : embed_dim;
}

int LabelDecoderConfig::context_size() const {
  switch (kind) {
    case LabelDecoderKind::kRecurrent: return 0;
    case LabelDecoderKind::kV2Embed: return 2;
    case LabelDecoderKind::kV4Embed: return 4;
  }
  fail("unreachable label decoder kind");
}

void ModelConfig::validate() const {
  JL_CHECK(vocab_size >= 2, "vocab_size must be >= 2, got ", vocab_size);
  JL_CHECK(feature_dim >= 1 && encoder_dim >= 1 && encoder_layers >= 1 && num_domains >= 1,
           "all model dimensions must be >= 1");
  if (label_decoder.kind == LabelDecoderKind::kRecurrent) {
    JL_CHECK(label_decoder.layers >= 1 && label_decoder.width >= 1,
             "recurrent label decoder needs layers >= 1 and width >= 1");
  } else {
    JL_CHECK(label_decoder.embed_dim >= 1, "embedding label decoder needs embed_dim >= 1");
  }
  if (variant == Variant::kHat) {
    JL_CHECK(joint_dim >= 1, "hat variant requires joint_dim >= 1");
    JL_CHECK(blank_decoder_dim == 0, "hat variant has no blank decoder");
  } else {
    JL_CHECK(blank_decoder_dim >= 1, "mhat variant requires blank_decoder_dim >= 1");
    JL_CHECK(joint_dim == 0, "mhat variant has no shared joint bottleneck");
  }
  JL_CHECK(text_encoder.layers >= 0, "text_encoder.layers must be >= 0");
  JL_CHECK(text_encoder.injection_layer >= 0 && text_encoder.injection_layer <= encoder_layers,
           "injection_layer must lie in [0, encoder_layers]");
}

Model Model::init(const ModelConfig& config, uint64_t seed) {
  config.validate();
  Model m;
  m.config = config;
  ParamStore& ps = m.params;
  auto addw = [&](const std::string& name, std::vector<int> shape, int fan_in) {
    Rng rng = Rng::derive(seed, "init/" + name, 0);
    ps.add(name, std::move(shape), rng, fan_in_scale(fan_in));
  };
  auto addb = [&](const std::string& name, int n) { ps.add(name, {n}); };

  const int V = config.vocab_size;
  const int df = config.encoder_dim;
  for (int i = 0; i < config.encoder_layers; ++i) {
    int in = i == 0 ? config.encoder_input_dim() : df;
    std::string p = "encoder." + std::to_string(i) + ".";
    addw(p + "Wx", {4 * df, in}, in);
    addw(p + "Wh", {4 * df, df}, df);
    addb(p + "b", 4 * df);
  }

  const LabelDecoderConfig& ld = config.label_decoder;
  if (ld.kind == LabelDecoderKind::kRecurrent) {
    addw("label_decoder.embed", {config.decoder_table_rows(), ld.width}, ld.width);
    for (int i = 0; i < ld.layers; ++i) {
      std::string p = "label_decoder." + std::to_string(i) + ".";
      addw(p + "Wx", {4 * ld.width, ld.width}, ld.width);
      addw(p + "Wh", {4 * ld.width, ld.width}, ld.width);
      addb(p + "b", 4 * ld.width);
    }
  } else {
    for (int k = 0; k < ld.context_size(); ++k) {
      addw("label_decoder.embed" + std::to_string(k),
           {config.decoder_table_rows(), ld.embed_dim}, ld.embed_dim);
    }
  }

  const int dg = ld.output_dim();
  if (config.variant == Variant::kHat) {
    addw("joint.W1", {config.joint_dim, df}, df);
    addw("joint.W2", {config.joint_dim, dg}, dg);
    addw("joint.w", {config.joint_dim}, config.joint_dim);
    addw("joint.W", {V, config.joint_dim}, config.joint_dim);
  } else {
    addw("am_head.W3", {V, df}, df);
    addw("ilm_head.W4", {V, dg}, dg);
    const int db = config.blank_decoder_dim;
    addw("blank_decoder.embed", {config.decoder_table_rows(), db}, db);
    addw("blank_joint.W1", {db, df}, df);
    addw("blank_joint.W2", {db, db}, db);
    addw("blank_joint.w", {db}, db);
  }

  addw("text_encoder.embed", {config.text_table_rows(), df}, df);
  for (int i = 0; i < config.text_encoder.layers; ++i) {
    std::string p = "text_encoder." + std::to_string(i) + ".";
    addw(p + "Wx", {4 * df, df}, df);
    addw(p + "Wh", {4 * df, df}, df);
    addb(p + "b", 4 * df);
  }
  addw("text_encoder.proj.W", {config.injection_input_dim(), df}, df);
  addb("text_encoder.proj.b", config.injection_input_dim());
  return m;
}

TensorPtr Model::encode(const TensorPtr& features, int domain_id) const {
  JL_CHECK(features->shape.size() == 2 && features->shape[1] == config.feature_dim,
           "encode: features are ", shape_str(features->shape), ", expected [T x ",
           config.feature_dim, "]");
  JL_CHECK(features->shape[0] >= 1, "encode: need at least one frame");
  JL_CHECK(domain_id >= 0 && domain_id < config.num_domains, "encode: domain ", domain_id,
           " outside [0, ", config.num_domains, ")");
  std::vector<double> onehot(config.domain_onehot_dim(), 0.0);
  onehot[domain_id] = 1.0;
  return encode_from_layer(append_const_cols(features, onehot), 0);
}

TensorPtr Model::encode_from_layer(const TensorPtr& X, int first_layer) const {
  JL_CHECK(first_layer >= 0 && first_layer <= config.encoder_layers,
           "encode_from_layer: layer ", first_layer, " outside [0, ", config.encoder_layers,
           "]");
  int expected = first_layer == 0 ? config.encoder_input_dim() : config.encoder_dim;
  JL_CHECK(X->shape.size() == 2 && X->shape[1] == expected, "encode_from_layer: input is ",
           shape_str(X->shape), ", expected [* x ", expected, "]");
  TensorPtr h = X;
  for (int i = first_layer; i < config.encoder_layers; ++i) {
    std::string p = "encoder." + std::to_string(i) + ".";
    h = lstm_sequence(h, params.get(p + "Wx"), params.get(p + "Wh"), params.get(p + "b"));
  }
  return h;
}

TensorPtr Model::label_decode_rows(const std::vector<int>& tokens, int rows) const {
  check_labels(tokens, config.vocab_size, "label_decode");
  JL_CHECK(rows >= 1 && rows <= static_cast<int>(tokens.size()) + 1,
           "label_decode: rows ", rows, " incompatible with ", tokens.size(), " tokens");
  const LabelDecoderConfig& ld = config.label_decoder;
  if (ld.kind == LabelDecoderKind::kRecurrent) {
    std::vector<int> ids(rows);
    ids[0] = config.bos_id();
    for (int u = 1; u < rows; ++u) ids[u] = tokens[u - 1];
    TensorPtr h = embedding_rows(params.get("label_decoder.embed"), ids);
    for (int i = 0; i < ld.layers; ++i) {
      std::string p = "label_decoder." + std::to_string(i) + ".";
      h = lstm_sequence(h, params.get(p + "Wx"), params.get(p + "Wh"), params.get(p + "b"));
    }
    return h;
  }
  const int K = ld.context_size();
  std::vector<std::vector<int>> ctx(rows, std::vector<int>(K));
  for (int u = 0; u < rows; ++u) {
    for (int k = 0; k < K; ++k) {
      int idx = u - 1 - k;  // slot 0 is the newest token
      ctx[u][k] = idx >= 0 ? tokens[idx] : config.bos_id();
    }
  }
  std::vector<TensorPtr> tables;
  for (int k = 0; k < K; ++k) tables.push_back(params.get("label_decoder.embed" + std::to_string(k)));
  return embedding_context_sum(tables, ctx);
}

TensorPtr Model::blank_decode_rows(const std::vector<int>& tokens, int rows) const {
  JL_CHECK(config.variant == Variant::kMhat, "blank_decode: hat variant has no blank decoder");
  check_labels(tokens, config.vocab_size, "blank_decode");
  JL_CHECK(rows >= 1 && rows <= static_cast<int>(tokens.size()) + 1,
           "blank_decode: rows ", rows, " incompatible with ", tokens.size(), " tokens");
  std::vector<std::vector<int>> ctx(rows, std::vector<int>(2));
  for (int u = 0; u < rows; ++u) {
    for (int k = 0; k < 2; ++k) {
      int idx = u - 1 - k;
      ctx[u][k] = idx >= 0 ? tokens[idx] : config.bos_id();
    }
  }
  TensorPtr table = params.get("blank_decoder.embed");
  return embedding_context_sum({table, table}, ctx);
}

TensorPtr Model::text_encode(const std::vector<int>& upsampled) const {
  for (int t : upsampled) {
    JL_CHECK(t >= 0 && t <= config.mask_id(), "text_encode: token ", t,
             " outside [0, ", config.mask_id(), "]");
  }
  TensorPtr h = embedding_rows(params.get("text_encoder.embed"), upsampled);
  for (int i = 0; i < config.text_encoder.layers; ++i) {
    std::string p = "text_encoder." + std::to_string(i) + ".";
    h = lstm_sequence(h, params.get(p + "Wx"), params.get(p + "Wh"), params.get(p + "b"));
  }
  return linear(h, params.get("text_encoder.proj.W"), params.get("text_encoder.proj.b"));
}

TensorPtr Model::encode_text(const std::vector<int>& upsampled) const {
  TensorPtr E = text_encode(upsampled);
  int inj = config.text_encoder.injection_layer;
  if (inj == 0) {
    std::vector<double> onehot(config.domain_onehot_dim(), 0.0);
    onehot[config.text_domain()] = 1.0;
    return encode_from_layer(append_const_cols(E, onehot), 0);
  }
  return encode_from_layer(E, inj);
}

TensorPtr Model::ilm_logits_rows(const TensorPtr& g_rows) const {
  JL_CHECK(g_rows->shape.size() == 2 &&
               g_rows->shape[1] == config.label_decoder.output_dim(),
           "ilm_logits: decoder rows are ", shape_str(g_rows->shape));
  if (config.variant == Variant::kHat) {
    return linear(tanh_op(linear(g_rows, params.get("joint.W2"))), params.get("joint.W"));
  }
  return linear(g_rows, params.get("ilm_head.W4"));
}

std::vector<double> Model::ilm_logprobs_from_g(const std::vector<double>& g) const {
  std::vector<double> logits;
  if (config.variant == Variant::kHat) {
    std::vector<double> z = raw_affine(*params.get("joint.W2"), g);
    for (double& v : z) v = std::tanh(v);
    logits = raw_affine(*params.get("joint.W"), z);
  } else {
    logits = raw_affine(*params.get("ilm_head.W4"), g);
  }
  raw_log_softmax_inplace(logits);
  return logits;
}

std::vector<double> Model::ilm_logprobs(const std::vector<int>& prefix) const {
  check_labels(prefix, config.vocab_size, "ilm_logprobs");
  DecoderState s = initial_decoder_state(*this);
  for (int t : prefix) s = advance_decoder_state(*this, s, t);
  return ilm_logprobs_from_g(s.g);
}

bool Model::is_ilm_param(const std::string& name) const {
  if (name.rfind("label_decoder.", 0) == 0) return true;
  if (config.variant == Variant::kHat) {
    return name == "joint.W2" || name == "joint.W";
  }
  return name == "ilm_head.W4";
}

std::vector<std::string> Model::ilm_param_names() const {
  std::vector<std::string> out;
  for (const auto& name : params.names()) {
    if (is_ilm_param(name)) out.push_back(name);
  }
  return out;
}

HatCellOutput hat_joint(const Model& model, const std::vector<double>& f,
                        const std::vector<double>& g) {
  JL_CHECK(model.config.variant == Variant::kHat, "hat_joint: model is not hat");
  std::vector<double> z = raw_affine(*model.params.get("joint.W1"), f);
  std::vector<double> z2 = raw_affine(*model.params.get("joint.W2"), g);
  for (size_t i = 0; i < z.size(); ++i) z[i] = std::tanh(z[i] + z2[i]);
  const auto& w = model.params.get("joint.w")->value;
  double s = 0.0;
  for (size_t i = 0; i < z.size(); ++i) s += w[i] * z[i];
  HatCellOutput out;
  out.blank_logprob = log_sigmoid(s);
  out.nonblank_logprob = log_sigmoid(-s);
  out.label_logprobs = raw_affine(*model.params.get("joint.W"), z);
  raw_log_softmax_inplace(out.label_logprobs);
  return out;
}

MhatCellOutput mhat_scores(const Model& model, const std::vector<double>& f,
                           const std::vector<double>& g, const std::vector<double>& gb) {
  JL_CHECK(model.config.variant == Variant::kMhat, "mhat_scores: model is not mhat");
  MhatCellOutput out;
  out.a = raw_affine(*model.params.get("am_head.W3"), f);
  raw_log_softmax_inplace(out.a);
  out.l = model.ilm_logprobs_from_g(g);
  out.label_logprobs.resize(out.a.size());
  for (size_t i = 0; i < out.a.size(); ++i) out.label_logprobs[i] = out.a[i] + out.l[i];
  raw_log_softmax_inplace(out.label_logprobs);

  std::vector<double> z = raw_affine(*model.params.get("blank_joint.W1"), f);
  std::vector<double> z2 = raw_affine(*model.params.get("blank_joint.W2"), gb);
  for (size_t i = 0; i < z.size(); ++i) z[i] = std::tanh(z[i] + z2[i]);
  const auto& w = model.params.get("blank_joint.w")->value;
  double s = 0.0;
  for (size_t i = 0; i < z.size(); ++i) s += w[i] * z[i];
  out.blank_logprob = log_sigmoid(s);
  out.nonblank_logprob = log_sigmoid(-s);
  return out;
}

namespace {

// Sum of per-slot embedding rows for the most recent tokens, start-padded.
std::vector<double> context_sum_raw(const Model& model, const std::vector<TensorPtr>& tables,
                                    const std::vector<int>& context) {
  int K = static_cast<int>(tables.size());
  int d = tables[0]->shape[1];
  std::vector<double> g(d, 0.0);
  for (int k = 0; k < K; ++k) {
    int idx = static_cast<int>(context.size()) - 1 - k;
    int id = idx >= 0 ? context[idx] : model.config.bos_id();
    const double* row = tables[k]->value.data() + static_cast<size_t>(id) * d;
    for (int j = 0; j < d; ++j) g[j] += row[j];
  }
  return g;
}

void refresh_state_outputs(const Model& model, DecoderState& s) {
  const LabelDecoderConfig& ld = model.config.label_decoder;
  if (ld.kind != LabelDecoderKind::kRecurrent) {
    std::vector<TensorPtr> tables;
    for (int k = 0; k < ld.context_size(); ++k) {
      tables.push_back(model.params.get("label_decoder.embed" + std::to_string(k)));
    }
    s.g = context_sum_raw(model, tables, s.context);
  }
  if (model.config.variant == Variant::kMhat) {
    TensorPtr table = model.params.get("blank_decoder.embed");
    s.gb = context_sum_raw(model, {table, table}, s.context);
  }
}

void recurrent_state_step(const Model& model, DecoderState& s, int token) {
  const LabelDecoderConfig& ld = model.config.label_decoder;
  const Tensor& embed = *model.params.get("label_decoder.embed");
  const int w = ld.width;
  std::vector<double> x(embed.value.begin() + static_cast<size_t>(token) * w,
                        embed.value.begin() + static_cast<size_t>(token + 1) * w);
  for (int i = 0; i < ld.layers; ++i) {
    std::string p = "label_decoder." + std::to_string(i) + ".";
    const Tensor& Wx = *model.params.get(p + "Wx");
    const Tensor& Wh = *model.params.get(p + "Wh");
    const Tensor& b = *model.params.get(p + "b");
    std::vector<double> h_new(w), c_new(w);
    detail::lstm_step_raw(x.data(), w, s.h[i].data(), s.c[i].data(), w, Wx.value.data(),
                          Wh.value.data(), b.value.data(), h_new.data(), c_new.data(),
                          nullptr);
    s.h[i] = std::move(h_new);
    s.c[i] = std::move(c_new);
    x = s.h[i];
  }
  s.g = x;
}

}  // namespace

DecoderState initial_decoder_state(const Model& model) {
  DecoderState s;
  const LabelDecoderConfig& ld = model.config.label_decoder;
  if (ld.kind == LabelDecoderKind::kRecurrent) {
    s.h.assign(ld.layers, std::vector<double>(ld.width, 0.0));
    s.c.assign(ld.layers, std::vector<double>(ld.width, 0.0));
    recurrent_state_step(model, s, model.config.bos_id());
  }
  refresh_state_outputs(model, s);
  return s;
}

DecoderState advance_decoder_state(const Model& model, const DecoderState& s, int token) {
  JL_CHECK(token >= 0 && token < model.config.vocab_size, "advance_decoder_state: token ",
           token, " outside label range");
  DecoderState next = s;
  next.context.push_back(token);
  if (model.config.label_decoder.kind == LabelDecoderKind::kRecurrent) {
    recurrent_state_step(model, next, token);
  }
  refresh_state_outputs(model, next);
  return next;
}

}  // namespace jeitlab
