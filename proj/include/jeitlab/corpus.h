// jeitlab/corpus.h
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

// Synthetic corpus: paired utterances with pseudo-TTS features, a much larger
// unpaired text pool with domain-specific rare words, and the held-out test
// sets used to measure rare-word recall.
//
// Vocabulary layout (token id ranges, fixed by construction):
//   [0, carriers)                 carrier words, carrier_words_per_domain per
//                                 rare domain, in domain order; these appear
//                                 only as the fixed prefix of rare sentences
//   [carriers, common_words)      free common words, Zipf-weighted, used for
//                                 base sentences and filler
//   [common_words, vocab_size)    rare words, rare_words_per_domain per
//                                 domain, in domain order
//
// Every rare word is acoustically anchored to a free common word: its feature
// prototype is that neighbor's prototype plus a small frozen offset. A model
// trained on paired data alone therefore tends to emit the neighbor, and the
// gap is closable only through the text side, which is the effect the rare
// test sets measure.
//
// Domain ids: 0 is the base distribution, 1..rare_domains are the rare-word
// domains. Text-only batches use the separate reserved text domain that the
// model adds after these.

#ifndef JEITLAB_CORPUS_H_
#define JEITLAB_CORPUS_H_

#include <cstdint>
#include <string>
#include <vector>

#include "jeitlab/tensor.h"

namespace jeitlab {

// One paired training or test example.
struct Utterance {
  TensorPtr features;       // [T x d_x], T >= transcript length
  std::vector<int> transcript;
  int domain_id = 0;
};

struct CorpusSpec {
  // Vocabulary shape. common_words includes the reserved carrier block.
  int common_words = 60;
  int carrier_words_per_domain = 2;
  int rare_domains = 4;
  int rare_words_per_domain = 12;

  // Split sizes.
  int paired_count = 2000;
  int unpaired_count = 200000;
  int heldout_count = 1000;          // unpaired sentences never trained on
  int base_test_count = 200;
  int rare_test_count_per_domain = 50;

  // Occurrence constraints. Paired transcripts hold every rare word strictly
  // below rare_word_threshold; the unpaired pool holds it at least
  // min_unpaired_occurrences times.
  int rare_word_threshold = 5;
  int min_unpaired_occurrences = 50;

  // Mixture over sentence sources for unpaired text and the held-out slice:
  // index 0 is the base distribution, 1..rare_domains the rare domains.
  // Weights are unnormalized.
  std::vector<double> unpaired_domain_weights = {1.0, 1.0, 1.0, 1.0, 1.0};

  // Sentence shape.
  int base_len_min = 3;
  int base_len_max = 8;
  int rare_filler_max = 3;           // common words after the rare target

  // Pseudo-TTS.
  int feature_dim = 16;
  int frames_per_token_min = 2;
  int frames_per_token_max = 3;
  double noise_level = 0.1;          // stddev of additive frame noise
  double rare_offset_scale = 0.35;   // per-component stddev of the rare offset

  std::uint64_t seed = 1;

  void validate() const;

  int carrier_count() const { return rare_domains * carrier_words_per_domain; }
  int free_common_count() const { return common_words - carrier_count(); }
  int rare_count() const { return rare_domains * rare_words_per_domain; }
  int vocab_size() const { return common_words + rare_count(); }
  bool is_rare(int token) const {
    return token >= common_words && token < vocab_size();
  }
  // Domain of a rare token, in 1..rare_domains.
  int rare_domain_of(int token) const;
  // Token ids of domain k's carrier phrase, in emission order.
  std::vector<int> carrier_phrase(int domain) const;
  // Audio domains: base plus the rare domains. The model's text domain comes
  // after these.
  int utterance_domains() const { return rare_domains + 1; }
};

// Display strings for the token inventory, generated from the spec seed.
struct Vocabulary {
  std::vector<std::string> words;   // index == token id
  int common_count = 0;
  int carrier_count = 0;
  int rare_domains = 0;
  int rare_words_per_domain = 0;

  int size() const { return static_cast<int>(words.size()); }
  const std::string& word(int token) const;
  int find(const std::string& w) const;   // -1 when absent
  std::vector<int> rare_ids(int domain) const;  // domain in 1..rare_domains
};

struct SplitBundle {
  CorpusSpec spec;
  Vocabulary vocab;
  std::vector<Utterance> paired_train;
  std::vector<std::vector<int>> unpaired_text;
  std::vector<int> unpaired_domain;            // source domain per sentence
  std::vector<std::vector<int>> unpaired_heldout;
  std::vector<int> heldout_domain;
  std::vector<Utterance> base_test;
  std::vector<std::vector<Utterance>> rare_tests;  // [domain-1] -> utterances
};

// Frozen feature prototype of one token, length spec.feature_dim. Rare-word
// prototypes are the neighbor prototype plus the frozen offset.
std::vector<double> token_prototype(const CorpusSpec& spec, int token);

// The free common word a rare token is acoustically anchored to.
int rare_neighbor(const CorpusSpec& spec, int rare_token);

// Pseudo-TTS: each token becomes frames_per_token copies of its prototype
// with additive Gaussian noise. Frame counts and noise draw from `seed`;
// prototypes are frozen by spec.seed, so the same transcript rendered twice
// with the same seed is byte-identical.
TensorPtr synthesize_features(const std::vector<int>& transcript,
                              const CorpusSpec& spec, std::uint64_t seed);

// Deterministic corpus construction. Paired occurrence caps and unpaired
// coverage floors hold by construction and are re-audited before returning.
SplitBundle generate_corpus(const CorpusSpec& spec);

// Occurrence audit for every rare word across the bundle.
struct RareWordAudit {
  struct Row {
    int token = 0;
    std::string word;
    int domain = 0;
    long paired = 0;     // occurrences in paired transcripts
    long unpaired = 0;   // occurrences in the unpaired training pool
    long tested = 0;     // occurrences across the domain's test set
    bool ok = false;
  };
  std::vector<Row> rows;
  bool passed = false;
  std::string to_table() const;
};

RareWordAudit rare_word_report(const SplitBundle& bundle);

// Disk layout: manifest.json, vocab.txt, line-oriented transcript and domain
// files per split, and one tensor container per audio split. load_bundle
// re-runs the audit and rejects a bundle that fails it.
void save_bundle(const SplitBundle& bundle, const std::string& dir);
SplitBundle load_bundle(const std::string& dir);

}  // namespace jeitlab

#endif  // JEITLAB_CORPUS_H_
