// jeitlab/decoding.cc
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

#include "jeitlab/decoding.h"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>

#include "jeitlab/common.h"
#include "jeitlab/container.h"
#include "jeitlab/optimizer.h"
#include "jeitlab/rng.h"

namespace jeitlab {

void FusionConfig::validate() const {
  JL_CHECK(is_finite(lambda_lm) && lambda_lm >= 0.0, "lambda_lm must be >= 0");
  JL_CHECK(is_finite(lambda_ilm) && lambda_ilm >= 0.0, "lambda_ilm must be >= 0");
  JL_CHECK(lambda_ilm == 0.0 || lambda_lm > 0.0,
           "ilm subtraction requires lm fusion: lambda_ilm > 0 needs lambda_lm > 0");
  JL_CHECK(beam_width >= 1, "beam_width must be >= 1");
  JL_CHECK(max_symbols_per_frame >= 1, "max_symbols_per_frame must be >= 1");
}

double fused_score(const FusionConfig& cfg, double e2e, double lm, double ilm) {
  return e2e + cfg.lambda_lm * lm - cfg.lambda_ilm * ilm;
}

// ---------------------------------------------------------------------------
// External LM.
// ---------------------------------------------------------------------------

void ExternalLmConfig::validate() const {
  JL_CHECK(vocab_size >= 1, "external lm needs vocab_size >= 1");
  JL_CHECK(layers >= 1, "external lm needs layers >= 1");
  JL_CHECK(embed_dim >= 1 && hidden_dim >= 1, "external lm dims must be positive");
}

ExternalLm ExternalLm::init(const ExternalLmConfig& config, std::uint64_t seed) {
  config.validate();
  ExternalLm lm;
  lm.config = config;
  auto addw = [&](const std::string& name, std::vector<int> shape, int fan_in) {
    Rng rng = Rng::derive(seed, "init/" + name, 0);
    lm.params.add(name, std::move(shape), rng, fan_in_scale(fan_in));
  };
  const int h = config.hidden_dim;
  addw("embed", {config.table_rows(), config.embed_dim}, config.embed_dim);
  for (int i = 0; i < config.layers; ++i) {
    int in = i == 0 ? config.embed_dim : h;
    std::string p = "rnn." + std::to_string(i) + ".";
    addw(p + "Wx", {4 * h, in}, in);
    addw(p + "Wh", {4 * h, h}, h);
    lm.params.add(p + "b", {4 * h});
  }
  addw("out.W", {config.vocab_size, h}, h);
  lm.params.add("out.b", {config.vocab_size});
  return lm;
}

TensorPtr ExternalLm::sequence_nll(const std::vector<int>& tokens) const {
  JL_CHECK(!tokens.empty(), "sequence_nll: empty sentence");
  for (int t : tokens)
    JL_CHECK(t >= 0 && t < config.vocab_size, "sequence_nll: token ", t,
             " outside vocabulary of ", config.vocab_size);
  std::vector<int> inputs;
  inputs.reserve(tokens.size());
  inputs.push_back(config.start_id());
  inputs.insert(inputs.end(), tokens.begin(), tokens.end() - 1);

  TensorPtr x = embedding_rows(params.get("embed"), inputs);
  for (int i = 0; i < config.layers; ++i) {
    std::string p = "rnn." + std::to_string(i) + ".";
    x = lstm_sequence(x, params.get(p + "Wx"), params.get(p + "Wh"), params.get(p + "b"));
  }
  TensorPtr logits = linear(x, params.get("out.W"), params.get("out.b"));
  return cross_entropy_rows(logits, tokens);
}

double ExternalLm::sequence_nll_value(const std::vector<int>& tokens) const {
  NoGradGuard guard;
  return sequence_nll(tokens)->scalar_value();
}

namespace {

LmState advance_raw(const ExternalLm& lm, const LmState& s, int row) {
  const int h = lm.config.hidden_dim;
  const double* x = &lm.params.get("embed")->value[static_cast<size_t>(row) *
                                                   static_cast<size_t>(lm.config.embed_dim)];
  int input_dim = lm.config.embed_dim;
  LmState out = s;
  std::vector<double> carry;
  for (int i = 0; i < lm.config.layers; ++i) {
    std::string p = "rnn." + std::to_string(i) + ".";
    detail::lstm_step_raw(x, input_dim, s.h[static_cast<size_t>(i)].data(),
                          s.c[static_cast<size_t>(i)].data(), h,
                          lm.params.get(p + "Wx")->value.data(),
                          lm.params.get(p + "Wh")->value.data(),
                          lm.params.get(p + "b")->value.data(),
                          out.h[static_cast<size_t>(i)].data(),
                          out.c[static_cast<size_t>(i)].data(), nullptr);
    carry = out.h[static_cast<size_t>(i)];
    x = carry.data();
    input_dim = h;
  }
  return out;
}

}  // namespace

LmState ExternalLm::start_state() const {
  LmState zero;
  zero.h.assign(static_cast<size_t>(config.layers),
                std::vector<double>(static_cast<size_t>(config.hidden_dim), 0.0));
  zero.c = zero.h;
  return advance_raw(*this, zero, config.start_id());
}

LmState ExternalLm::advance(const LmState& s, int token) const {
  JL_CHECK(token >= 0 && token < config.vocab_size, "advance: token ", token,
           " outside vocabulary of ", config.vocab_size);
  JL_CHECK(static_cast<int>(s.h.size()) == config.layers, "advance: bad state");
  return advance_raw(*this, s, token);
}

std::vector<double> ExternalLm::next_logprobs(const LmState& s) const {
  JL_CHECK(static_cast<int>(s.h.size()) == config.layers, "next_logprobs: bad state");
  const std::vector<double>& hl = s.h.back();
  const std::vector<double>& W = params.get("out.W")->value;
  const std::vector<double>& b = params.get("out.b")->value;
  const int V = config.vocab_size;
  const int H = config.hidden_dim;
  std::vector<double> logits(static_cast<size_t>(V));
  for (int v = 0; v < V; ++v) {
    double acc = b[static_cast<size_t>(v)];
    const double* row = &W[static_cast<size_t>(v) * static_cast<size_t>(H)];
    for (int j = 0; j < H; ++j) acc += row[j] * hl[static_cast<size_t>(j)];
    logits[static_cast<size_t>(v)] = acc;
  }
  double hi = logits[0];
  for (double l : logits) hi = std::max(hi, l);
  double sum = 0.0;
  for (double l : logits) sum += std::exp(l - hi);
  double lse = hi + std::log(sum);
  for (double& l : logits) l -= lse;
  return logits;
}

double lm_logprob(const ExternalLm& lm, const std::vector<int>& prefix, int next) {
  LmState s = lm.start_state();
  for (int t : prefix) s = lm.advance(s, t);
  std::vector<double> lp = lm.next_logprobs(s);
  JL_CHECK(next >= 0 && next < lm.config.vocab_size, "lm_logprob: bad token ", next);
  return lp[static_cast<size_t>(next)];
}

double lm_perplexity(const ExternalLm& lm, const std::vector<std::vector<int>>& text) {
  double nll = 0.0;
  long tokens = 0;
  for (const auto& s : text) {
    if (s.empty()) continue;
    nll += lm.sequence_nll_value(s);
    tokens += static_cast<long>(s.size());
  }
  JL_CHECK(tokens > 0, "lm_perplexity: no tokens to score");
  return std::exp(nll / static_cast<double>(tokens));
}

void save_external_lm(const std::string& path, const ExternalLm& lm) {
  std::vector<NamedTensor> out;
  out.push_back(NamedTensor{"lm/arch",
                            {4},
                            {static_cast<double>(lm.config.vocab_size),
                             static_cast<double>(lm.config.layers),
                             static_cast<double>(lm.config.embed_dim),
                             static_cast<double>(lm.config.hidden_dim)}});
  for (const auto& [name, p] : lm.params.items())
    out.push_back(NamedTensor{"param/" + name, p.tensor->shape, p.tensor->value});
  write_tensor_container(path, out);
}

ExternalLm load_external_lm(const std::string& path) {
  std::vector<NamedTensor> tensors = read_tensor_container(path);
  JL_CHECK(!tensors.empty() && tensors[0].name == "lm/arch" && tensors[0].values.size() == 4,
           "file ", path, " does not hold an external LM");
  ExternalLmConfig cfg;
  cfg.vocab_size = static_cast<int>(tensors[0].values[0]);
  cfg.layers = static_cast<int>(tensors[0].values[1]);
  cfg.embed_dim = static_cast<int>(tensors[0].values[2]);
  cfg.hidden_dim = static_cast<int>(tensors[0].values[3]);
  cfg.validate();
  ExternalLm lm = ExternalLm::init(cfg, 0);
  JL_CHECK(tensors.size() == lm.params.items().size() + 1,
           "external LM file has the wrong parameter count");
  for (size_t i = 1; i < tensors.size(); ++i) {
    const NamedTensor& t = tensors[i];
    JL_CHECK(t.name.rfind("param/", 0) == 0, "unexpected entry '", t.name, "' in LM file");
    TensorPtr dst = lm.params.get(t.name.substr(6));
    JL_CHECK(dst->value.size() == t.values.size(), "LM parameter ", t.name, " has the wrong size");
    dst->value = t.values;
  }
  return lm;
}

void LmTrainConfig::validate() const {
  JL_CHECK(steps >= 1, "lm training needs steps >= 1");
  JL_CHECK(batch_size >= 1, "lm training needs batch_size >= 1");
  JL_CHECK(is_finite(learning_rate) && learning_rate > 0.0, "learning_rate must be > 0");
  JL_CHECK(is_finite(clip_norm) && clip_norm >= 0.0, "clip_norm must be >= 0");
  JL_CHECK(paired_fraction >= 0.0 && paired_fraction <= 1.0,
           "paired_fraction must lie in [0, 1]");
}

LmTrainResult train_external_lm(const ExternalLmConfig& config,
                                const std::vector<std::vector<int>>& paired_transcripts,
                                const std::vector<std::vector<int>>& unpaired_text,
                                const LmTrainConfig& train) {
  config.validate();
  train.validate();
  JL_CHECK(train.paired_fraction == 0.0 || !paired_transcripts.empty(),
           "paired_fraction > 0 but there are no paired transcripts");
  JL_CHECK(train.paired_fraction == 1.0 || !unpaired_text.empty(),
           "paired_fraction < 1 but there is no unpaired text");

  LmTrainResult result;
  result.lm = ExternalLm::init(config, Rng::derive_seed(train.seed, "lm_init"));
  AdamConfig acfg;
  acfg.learning_rate = train.learning_rate;
  acfg.clip_norm = train.clip_norm;
  Adam adam(acfg);

  for (int step = 0; step < train.steps; ++step) {
    Rng rng = Rng::derive(train.seed, "lm_batch", static_cast<uint64_t>(step));
    TensorPtr loss;
    for (int i = 0; i < train.batch_size; ++i) {
      bool from_paired = rng.bernoulli(train.paired_fraction);
      const auto& pool = from_paired ? paired_transcripts : unpaired_text;
      const auto& sent = pool[rng.uniform_u64(pool.size())];
      (from_paired ? result.paired_drawn : result.unpaired_drawn) += 1;
      TensorPtr nll = result.lm.sequence_nll(sent);
      loss = loss ? add(loss, nll) : nll;
    }
    loss = scale(loss, 1.0 / train.batch_size);
    JL_CHECK(is_finite(loss->scalar_value()), "lm training step ", step,
             " produced a non-finite loss");
    result.lm.params.zero_grad();
    backward(loss);
    adam.step(result.lm.params);
    result.step_losses.push_back(loss->scalar_value());
  }
  return result;
}

// ---------------------------------------------------------------------------
// Beam search.
// ---------------------------------------------------------------------------

namespace {

struct ParentStates {
  DecoderState dec;
  LmState lms;
};

struct BeamItem {
  std::vector<int> tokens;
  double e2e = 0.0;  // log alignment mass
  double lm = 0.0;
  double ilm = 0.0;
  DecoderState dec;
  LmState lms;
  int entry_len = 0;  // token count when the item entered this frame
  // Children defer the state update until they survive pruning; until then
  // they borrow the parent's states.
  std::shared_ptr<const ParentStates> parent;
  int pending_token = -1;
};

struct BeamOrder {
  const FusionConfig* cfg;
  bool operator()(const BeamItem& a, const BeamItem& b) const {
    double fa = fused_score(*cfg, a.e2e, a.lm, a.ilm);
    double fb = fused_score(*cfg, b.e2e, b.lm, b.ilm);
    if (fa != fb) return fa > fb;
    return a.tokens < b.tokens;
  }
};

void prune(std::vector<BeamItem>& items, const FusionConfig& cfg) {
  std::sort(items.begin(), items.end(), BeamOrder{&cfg});
  if (static_cast<int>(items.size()) > cfg.beam_width)
    items.resize(static_cast<size_t>(cfg.beam_width));
}

}  // namespace

std::vector<Hypothesis> beam_search(const Model& model, const TensorPtr& features,
                                    int domain_id, const FusionConfig& cfg,
                                    const ExternalLm* ext_lm) {
  cfg.validate();
  JL_CHECK(cfg.lambda_lm == 0.0 || ext_lm != nullptr,
           "lambda_lm > 0 requires an external LM");
  if (ext_lm != nullptr)
    JL_CHECK(ext_lm->config.vocab_size == model.config.vocab_size,
             "external LM vocabulary does not match the model");
  NoGradGuard guard;

  TensorPtr F = model.encode(features, domain_id);
  const int T = F->rows();
  const int df = F->cols();
  const int V = model.config.vocab_size;
  const bool mhat = model.config.variant == Variant::kMhat;

  std::vector<BeamItem> frame_items;
  {
    BeamItem root;
    root.dec = initial_decoder_state(model);
    if (ext_lm != nullptr) root.lms = ext_lm->start_state();
    frame_items.push_back(std::move(root));
  }

  for (int t = 0; t < T; ++t) {
    std::vector<double> f(F->value.begin() + static_cast<long>(t) * df,
                          F->value.begin() + static_cast<long>(t + 1) * df);
    // Within the frame, expand in token-length order so all alignment mass
    // for a sequence merges before the sequence itself expands.
    std::map<int, std::map<std::vector<int>, BeamItem>> levels;
    for (BeamItem& item : frame_items) {
      int len = static_cast<int>(item.tokens.size());
      item.entry_len = len;
      levels[len].emplace(item.tokens, std::move(item));
    }
    std::map<std::vector<int>, BeamItem> blanked;

    while (!levels.empty()) {
      auto level_it = levels.begin();
      int len = level_it->first;
      std::vector<BeamItem> work;
      for (auto& [tokens, item] : level_it->second) work.push_back(std::move(item));
      levels.erase(level_it);
      prune(work, cfg);

      for (BeamItem& item : work) {
        if (item.parent != nullptr) {
          item.dec = advance_decoder_state(model, item.parent->dec, item.pending_token);
          if (ext_lm != nullptr)
            item.lms = ext_lm->advance(item.parent->lms, item.pending_token);
          item.parent.reset();
          item.pending_token = -1;
        }

        double blank_lp;
        double nonblank_lp;
        std::vector<double> label_lps;
        if (mhat) {
          MhatCellOutput cell = mhat_scores(model, f, item.dec.g, item.dec.gb);
          blank_lp = cell.blank_logprob;
          nonblank_lp = cell.nonblank_logprob;
          label_lps = std::move(cell.label_logprobs);
        } else {
          HatCellOutput cell = hat_joint(model, f, item.dec.g);
          blank_lp = cell.blank_logprob;
          nonblank_lp = cell.nonblank_logprob;
          label_lps = std::move(cell.label_logprobs);
        }

        // Label arcs first (they read the item's states), charging fusion
        // scores on labels only, never on blank.
        if (len - item.entry_len < cfg.max_symbols_per_frame) {
          std::vector<double> ilm_lps = model.ilm_logprobs_from_g(item.dec.g);
          std::vector<double> lm_lps;
          if (ext_lm != nullptr) lm_lps = ext_lm->next_logprobs(item.lms);
          auto shared = std::make_shared<const ParentStates>(
              ParentStates{item.dec, item.lms});
          auto& next_level = levels[len + 1];
          for (int y = 0; y < V; ++y) {
            std::vector<int> child_tokens = item.tokens;
            child_tokens.push_back(y);
            double child_e2e = item.e2e + nonblank_lp + label_lps[static_cast<size_t>(y)];
            auto it = next_level.find(child_tokens);
            if (it != next_level.end()) {
              // An item that entered the frame with these tokens already
              // holds states and fusion scores; only alignment mass
              // accumulates. The symbol budget keeps the more permissive
              // entry point.
              it->second.e2e = log_add(it->second.e2e, child_e2e);
              it->second.entry_len = std::max(it->second.entry_len, item.entry_len);
            } else {
              BeamItem child;
              child.tokens = std::move(child_tokens);
              child.e2e = child_e2e;
              child.lm =
                  item.lm + (ext_lm != nullptr ? lm_lps[static_cast<size_t>(y)] : 0.0);
              child.ilm = item.ilm + ilm_lps[static_cast<size_t>(y)];
              child.entry_len = item.entry_len;
              child.parent = shared;
              child.pending_token = y;
              next_level.emplace(child.tokens, std::move(child));
            }
          }
        }

        // Blank arc: all mass for this sequence at this frame is already
        // merged here, so the sequence enters the next frame exactly once.
        item.e2e += blank_lp;
        item.entry_len = len;
        std::vector<int> key = item.tokens;
        auto [it, inserted] = blanked.emplace(std::move(key), std::move(item));
        JL_CHECK(inserted, "duplicate sequence crossing a frame boundary");
      }
    }

    frame_items.clear();
    for (auto& [tokens, item] : blanked) frame_items.push_back(std::move(item));
    prune(frame_items, cfg);
  }

  std::vector<Hypothesis> nbest;
  nbest.reserve(frame_items.size());
  for (const BeamItem& item : frame_items) {
    Hypothesis h;
    h.tokens = item.tokens;
    h.e2e_logscore = item.e2e;
    h.lm_logscore = item.lm;
    h.ilm_logscore = item.ilm;
    h.fused_score = fused_score(cfg, item.e2e, item.lm, item.ilm);
    nbest.push_back(std::move(h));
  }
  return nbest;
}

std::string nbest_record(const std::string& utt_id, int rank, const Hypothesis& hyp,
                         const std::vector<std::string>& words) {
  char scores[160];
  std::snprintf(scores, sizeof(scores), "%d\t%.6f\t%.6f\t%.6f\t%.6f", rank,
                hyp.fused_score, hyp.e2e_logscore, hyp.lm_logscore, hyp.ilm_logscore);
  std::string text;
  for (size_t i = 0; i < hyp.tokens.size(); ++i) {
    if (i) text += ' ';
    int t = hyp.tokens[i];
    if (words.empty()) {
      text += std::to_string(t);
    } else {
      JL_CHECK(t >= 0 && t < static_cast<int>(words.size()),
               "nbest_record: token ", t, " has no word");
      text += words[static_cast<size_t>(t)];
    }
  }
  return utt_id + "\t" + scores + "\t" + text;
}

// ---------------------------------------------------------------------------
// Word error rate.
// ---------------------------------------------------------------------------

double EditStats::rate() const {
  JL_CHECK(ref_len > 0, "rate(): empty reference");
  return static_cast<double>(edits()) / static_cast<double>(ref_len);
}

EditStats wer(const std::vector<int>& ref, const std::vector<int>& hyp) {
  JL_CHECK(!ref.empty(), "wer: reference must be non-empty");
  const size_t n = ref.size(), m = hyp.size();
  // op codes: 1 match, 2 substitution, 3 deletion, 4 insertion
  std::vector<std::vector<long>> cost(n + 1, std::vector<long>(m + 1, 0));
  std::vector<std::vector<int>> op(n + 1, std::vector<int>(m + 1, 0));
  for (size_t i = 1; i <= n; ++i) {
    cost[i][0] = static_cast<long>(i);
    op[i][0] = 3;
  }
  for (size_t j = 1; j <= m; ++j) {
    cost[0][j] = static_cast<long>(j);
    op[0][j] = 4;
  }
  for (size_t i = 1; i <= n; ++i) {
    for (size_t j = 1; j <= m; ++j) {
      bool match = ref[i - 1] == hyp[j - 1];
      long diag = cost[i - 1][j - 1] + (match ? 0 : 1);
      long del = cost[i - 1][j] + 1;
      long ins = cost[i][j - 1] + 1;
      if (diag <= del && diag <= ins) {
        cost[i][j] = diag;
        op[i][j] = match ? 1 : 2;
      } else if (del <= ins) {
        cost[i][j] = del;
        op[i][j] = 3;
      } else {
        cost[i][j] = ins;
        op[i][j] = 4;
      }
    }
  }
  EditStats s;
  s.ref_len = static_cast<long>(n);
  size_t i = n, j = m;
  while (i > 0 || j > 0) {
    switch (op[i][j]) {
      case 1: --i; --j; break;
      case 2: ++s.substitutions; --i; --j; break;
      case 3: ++s.deletions; --i; break;
      case 4: ++s.insertions; --j; break;
      default: fail("wer: corrupt backtrace");
    }
  }
  return s;
}

void WerTotals::add(const EditStats& s) {
  substitutions += s.substitutions;
  deletions += s.deletions;
  insertions += s.insertions;
  ref_len += s.ref_len;
}

double WerTotals::rate() const {
  JL_CHECK(ref_len > 0, "rate(): nothing scored");
  return static_cast<double>(edits()) / static_cast<double>(ref_len);
}

}  // namespace jeitlab
