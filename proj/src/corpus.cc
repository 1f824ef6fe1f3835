// jeitlab/corpus.cc
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

#include "jeitlab/corpus.h"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include "json.hpp"

#include "jeitlab/common.h"
#include "jeitlab/container.h"
#include "jeitlab/rng.h"

namespace jeitlab {

namespace {

using nlohmann::json;

// Base-sentence unigram weights over the free common words: rank-skewed so
// the paired set has a clear high-frequency core.
std::vector<double> zipf_weights(int n) {
  std::vector<double> w(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) w[static_cast<size_t>(i)] = 1.0 / (i + 2.0);
  return w;
}

int sample_free_common(const CorpusSpec& spec, const std::vector<double>& w, Rng& rng) {
  return spec.carrier_count() + static_cast<int>(rng.categorical(w));
}

std::vector<int> base_sentence(const CorpusSpec& spec, const std::vector<double>& w,
                               Rng& rng) {
  int len = static_cast<int>(rng.uniform_int(spec.base_len_min, spec.base_len_max));
  std::vector<int> s;
  s.reserve(static_cast<size_t>(len));
  for (int i = 0; i < len; ++i) s.push_back(sample_free_common(spec, w, rng));
  return s;
}

// Carrier phrase, the rare target, then a short common-word tail.
std::vector<int> rare_sentence(const CorpusSpec& spec, const std::vector<double>& w,
                               int target, Rng& rng) {
  std::vector<int> s = spec.carrier_phrase(spec.rare_domain_of(target));
  s.push_back(target);
  int tail = static_cast<int>(rng.uniform_int(0, spec.rare_filler_max));
  for (int i = 0; i < tail; ++i) s.push_back(sample_free_common(spec, w, rng));
  return s;
}

std::string make_word(Rng& rng, int syllables) {
  static const char* kConsonants[] = {"b", "d", "f", "g", "h", "k", "l", "m",
                                      "n", "p", "r", "s", "t", "v", "z"};
  static const char* kVowels[] = {"a", "e", "i", "o", "u"};
  std::string w;
  for (int i = 0; i < syllables; ++i) {
    w += kConsonants[rng.uniform_u64(15)];
    w += kVowels[rng.uniform_u64(5)];
  }
  return w;
}

Vocabulary make_vocab(const CorpusSpec& spec) {
  Vocabulary v;
  v.common_count = spec.common_words;
  v.carrier_count = spec.carrier_count();
  v.rare_domains = spec.rare_domains;
  v.rare_words_per_domain = spec.rare_words_per_domain;
  Rng rng = Rng::derive(spec.seed, "words");
  std::unordered_set<std::string> seen;
  v.words.reserve(static_cast<size_t>(spec.vocab_size()));
  for (int id = 0; id < spec.vocab_size(); ++id) {
    // Common words get two syllables, rare words three, so transcripts stay
    // readable and name-like words stand out.
    int syllables = spec.is_rare(id) ? 3 : 2;
    std::string w = make_word(rng, syllables);
    while (!seen.insert(w).second) w = make_word(rng, syllables);
    v.words.push_back(std::move(w));
  }
  return v;
}

void check_token_range(const CorpusSpec& spec, const std::vector<int>& tokens) {
  for (int t : tokens)
    JL_CHECK(t >= 0 && t < spec.vocab_size(), "token ", t, " outside vocabulary of ",
             spec.vocab_size());
}

// Shuffles a and the parallel array b with one permutation.
template <typename A, typename B>
void co_shuffle(std::vector<A>& a, std::vector<B>& b, Rng& rng) {
  JL_CHECK(a.size() == b.size(), "co_shuffle: length mismatch");
  for (size_t i = a.size(); i > 1; --i) {
    size_t j = static_cast<size_t>(rng.uniform_u64(i));
    std::swap(a[i - 1], a[j]);
    std::swap(b[i - 1], b[j]);
  }
}

}  // namespace

void CorpusSpec::validate() const {
  JL_CHECK(rare_domains >= 1, "rare_domains must be positive");
  JL_CHECK(carrier_words_per_domain >= 1, "carrier_words_per_domain must be positive");
  JL_CHECK(rare_words_per_domain >= 1, "rare_words_per_domain must be positive");
  JL_CHECK(free_common_count() >= 2, "common_words leaves fewer than 2 words after the ",
           carrier_count(), " reserved carriers");
  JL_CHECK(rare_word_threshold >= 2,
           "rare_word_threshold must be at least 2 so rare words can occur at all");
  JL_CHECK(min_unpaired_occurrences >= 1, "min_unpaired_occurrences must be positive");
  // Every rare word draws 1..threshold-1 paired occurrences; require room for
  // the worst case so feasibility does not depend on the seed.
  JL_CHECK(paired_count >= (rare_word_threshold - 1) * rare_count() + 1,
           "paired_count ", paired_count, " cannot hold up to ",
           (rare_word_threshold - 1) * rare_count(),
           " rare utterances plus at least one base utterance");
  JL_CHECK(unpaired_count >= rare_count() * min_unpaired_occurrences,
           "unpaired_count ", unpaired_count, " cannot cover ", rare_count(),
           " rare words at ", min_unpaired_occurrences, " occurrences each");
  JL_CHECK(heldout_count >= 0, "heldout_count must be non-negative");
  JL_CHECK(base_test_count >= 0, "base_test_count must be non-negative");
  JL_CHECK(rare_test_count_per_domain >= 0, "rare_test_count_per_domain must be non-negative");
  JL_CHECK(static_cast<int>(unpaired_domain_weights.size()) == rare_domains + 1,
           "unpaired_domain_weights needs ", rare_domains + 1, " entries, got ",
           unpaired_domain_weights.size());
  double wsum = 0.0;
  for (double w : unpaired_domain_weights) {
    JL_CHECK(is_finite(w) && w >= 0.0, "domain weights must be finite and non-negative");
    wsum += w;
  }
  JL_CHECK(wsum > 0.0, "domain weights must not all be zero");
  JL_CHECK(base_len_min >= 1 && base_len_min <= base_len_max,
           "base sentence length range invalid");
  JL_CHECK(rare_filler_max >= 0, "rare_filler_max must be non-negative");
  JL_CHECK(feature_dim >= 1, "feature_dim must be positive");
  JL_CHECK(frames_per_token_min >= 1 && frames_per_token_min <= frames_per_token_max,
           "frames_per_token range invalid");
  JL_CHECK(is_finite(noise_level) && noise_level >= 0.0, "noise_level must be >= 0");
  JL_CHECK(is_finite(rare_offset_scale) && rare_offset_scale >= 0.0,
           "rare_offset_scale must be >= 0");
}

int CorpusSpec::rare_domain_of(int token) const {
  JL_CHECK(is_rare(token), "token ", token, " is not a rare word");
  return 1 + (token - common_words) / rare_words_per_domain;
}

std::vector<int> CorpusSpec::carrier_phrase(int domain) const {
  JL_CHECK(domain >= 1 && domain <= rare_domains, "carrier_phrase: bad domain ", domain);
  std::vector<int> ids;
  int base = (domain - 1) * carrier_words_per_domain;
  for (int i = 0; i < carrier_words_per_domain; ++i) ids.push_back(base + i);
  return ids;
}

const std::string& Vocabulary::word(int token) const {
  JL_CHECK(token >= 0 && token < size(), "word(): token ", token, " out of range");
  return words[static_cast<size_t>(token)];
}

int Vocabulary::find(const std::string& w) const {
  for (int i = 0; i < size(); ++i)
    if (words[static_cast<size_t>(i)] == w) return i;
  return -1;
}

std::vector<int> Vocabulary::rare_ids(int domain) const {
  JL_CHECK(domain >= 1 && domain <= rare_domains, "rare_ids: bad domain ", domain);
  std::vector<int> ids;
  int base = common_count + (domain - 1) * rare_words_per_domain;
  for (int i = 0; i < rare_words_per_domain; ++i) ids.push_back(base + i);
  return ids;
}

int rare_neighbor(const CorpusSpec& spec, int rare_token) {
  JL_CHECK(spec.is_rare(rare_token), "rare_neighbor: token ", rare_token, " is not rare");
  Rng rng = Rng::derive(spec.seed, "rare_neighbor", static_cast<uint64_t>(rare_token));
  return spec.carrier_count() +
         static_cast<int>(rng.uniform_int(0, spec.free_common_count() - 1));
}

std::vector<double> token_prototype(const CorpusSpec& spec, int token) {
  JL_CHECK(token >= 0 && token < spec.vocab_size(), "token_prototype: token ", token,
           " out of range");
  size_t d = static_cast<size_t>(spec.feature_dim);
  if (spec.is_rare(token)) {
    std::vector<double> proto = token_prototype(spec, rare_neighbor(spec, token));
    Rng rng = Rng::derive(spec.seed, "rare_offset", static_cast<uint64_t>(token));
    for (size_t j = 0; j < d; ++j) proto[j] += spec.rare_offset_scale * rng.normal();
    return proto;
  }
  Rng rng = Rng::derive(spec.seed, "prototype", static_cast<uint64_t>(token));
  std::vector<double> proto(d);
  for (size_t j = 0; j < d; ++j) proto[j] = rng.normal();
  return proto;
}

TensorPtr synthesize_features(const std::vector<int>& transcript,
                              const CorpusSpec& spec, std::uint64_t seed) {
  JL_CHECK(!transcript.empty(), "synthesize_features: empty transcript");
  check_token_range(spec, transcript);
  Rng rng = Rng::derive(seed, "pseudo_tts");

  std::vector<int> frames(transcript.size());
  int total = 0;
  for (size_t u = 0; u < transcript.size(); ++u) {
    frames[u] = static_cast<int>(
        rng.uniform_int(spec.frames_per_token_min, spec.frames_per_token_max));
    total += frames[u];
  }

  std::unordered_map<int, std::vector<double>> protos;
  size_t d = static_cast<size_t>(spec.feature_dim);
  std::vector<double> data;
  data.reserve(static_cast<size_t>(total) * d);
  for (size_t u = 0; u < transcript.size(); ++u) {
    auto it = protos.find(transcript[u]);
    if (it == protos.end())
      it = protos.emplace(transcript[u], token_prototype(spec, transcript[u])).first;
    const std::vector<double>& p = it->second;
    for (int f = 0; f < frames[u]; ++f) {
      for (size_t j = 0; j < d; ++j) {
        double x = p[j];
        if (spec.noise_level > 0.0) x += spec.noise_level * rng.normal();
        data.push_back(x);
      }
    }
  }
  return Tensor::from_values({total, spec.feature_dim}, std::move(data));
}

SplitBundle generate_corpus(const CorpusSpec& spec) {
  spec.validate();
  SplitBundle b;
  b.spec = spec;
  b.vocab = make_vocab(spec);
  std::vector<double> zw = zipf_weights(spec.free_common_count());

  // Paired split: every rare word gets a fixed small number of utterances,
  // the rest is base traffic, then one shuffle fixes the order.
  {
    Rng plan = Rng::derive(spec.seed, "paired_plan");
    Rng sent = Rng::derive(spec.seed, "paired_sentences");
    uint64_t feat_index = 0;
    for (int r = spec.common_words; r < spec.vocab_size(); ++r) {
      int reps = static_cast<int>(plan.uniform_int(1, spec.rare_word_threshold - 1));
      for (int i = 0; i < reps; ++i) {
        Utterance u;
        u.transcript = rare_sentence(spec, zw, r, sent);
        u.domain_id = spec.rare_domain_of(r);
        u.features = synthesize_features(
            u.transcript, spec, Rng::derive_seed(spec.seed, "paired_feat", feat_index++));
        b.paired_train.push_back(std::move(u));
      }
    }
    JL_CHECK(static_cast<int>(b.paired_train.size()) < spec.paired_count,
             "paired_count too small for the drawn rare utterances");
    while (static_cast<int>(b.paired_train.size()) < spec.paired_count) {
      Utterance u;
      u.transcript = base_sentence(spec, zw, sent);
      u.domain_id = 0;
      u.features = synthesize_features(
          u.transcript, spec, Rng::derive_seed(spec.seed, "paired_feat", feat_index++));
      b.paired_train.push_back(std::move(u));
    }
    Rng shuf = Rng::derive(spec.seed, "paired_shuffle");
    shuf.shuffle(b.paired_train);
  }

  // Unpaired pool: a coverage floor guarantees every rare word its minimum,
  // the remainder is mixture-sampled from the shifted domain weights.
  {
    Rng sent = Rng::derive(spec.seed, "unpaired_sentences");
    for (int r = spec.common_words; r < spec.vocab_size(); ++r) {
      for (int i = 0; i < spec.min_unpaired_occurrences; ++i) {
        b.unpaired_text.push_back(rare_sentence(spec, zw, r, sent));
        b.unpaired_domain.push_back(spec.rare_domain_of(r));
      }
    }
    while (static_cast<int>(b.unpaired_text.size()) < spec.unpaired_count) {
      int k = static_cast<int>(sent.categorical(spec.unpaired_domain_weights));
      if (k == 0) {
        b.unpaired_text.push_back(base_sentence(spec, zw, sent));
      } else {
        int r = spec.common_words + (k - 1) * spec.rare_words_per_domain +
                static_cast<int>(sent.uniform_int(0, spec.rare_words_per_domain - 1));
        b.unpaired_text.push_back(rare_sentence(spec, zw, r, sent));
      }
      b.unpaired_domain.push_back(k);
    }
    Rng shuf = Rng::derive(spec.seed, "unpaired_shuffle");
    co_shuffle(b.unpaired_text, b.unpaired_domain, shuf);
  }

  // Held-out text: same mixture, never trained on.
  {
    Rng sent = Rng::derive(spec.seed, "heldout_sentences");
    for (int i = 0; i < spec.heldout_count; ++i) {
      int k = static_cast<int>(sent.categorical(spec.unpaired_domain_weights));
      if (k == 0) {
        b.unpaired_heldout.push_back(base_sentence(spec, zw, sent));
      } else {
        int r = spec.common_words + (k - 1) * spec.rare_words_per_domain +
                static_cast<int>(sent.uniform_int(0, spec.rare_words_per_domain - 1));
        b.unpaired_heldout.push_back(rare_sentence(spec, zw, r, sent));
      }
      b.heldout_domain.push_back(k);
    }
  }

  // Base test: same distribution as paired base traffic.
  {
    Rng sent = Rng::derive(spec.seed, "base_test_sentences");
    for (int i = 0; i < spec.base_test_count; ++i) {
      Utterance u;
      u.transcript = base_sentence(spec, zw, sent);
      u.domain_id = 0;
      u.features = synthesize_features(
          u.transcript, spec,
          Rng::derive_seed(spec.seed, "base_test_feat", static_cast<uint64_t>(i)));
      b.base_test.push_back(std::move(u));
    }
  }

  // Rare tests: round-robin over each domain's words so every word is tested.
  b.rare_tests.resize(static_cast<size_t>(spec.rare_domains));
  for (int k = 1; k <= spec.rare_domains; ++k) {
    Rng sent = Rng::derive(spec.seed, "rare_test_sentences", static_cast<uint64_t>(k));
    for (int i = 0; i < spec.rare_test_count_per_domain; ++i) {
      int r = spec.common_words + (k - 1) * spec.rare_words_per_domain +
              i % spec.rare_words_per_domain;
      Utterance u;
      u.transcript = rare_sentence(spec, zw, r, sent);
      u.domain_id = k;
      u.features = synthesize_features(
          u.transcript, spec,
          Rng::derive_seed(spec.seed, "rare_test_feat",
                           (static_cast<uint64_t>(k) << 32) | static_cast<uint64_t>(i)));
      b.rare_tests[static_cast<size_t>(k - 1)].push_back(std::move(u));
    }
  }

  RareWordAudit audit = rare_word_report(b);
  JL_CHECK(audit.passed, "generated corpus failed its own audit:\n", audit.to_table());
  return b;
}

RareWordAudit rare_word_report(const SplitBundle& b) {
  const CorpusSpec& spec = b.spec;
  std::unordered_map<int, long> paired_counts, unpaired_counts, tested_counts;
  for (const Utterance& u : b.paired_train)
    for (int t : u.transcript)
      if (spec.is_rare(t)) ++paired_counts[t];
  for (const auto& s : b.unpaired_text)
    for (int t : s)
      if (spec.is_rare(t)) ++unpaired_counts[t];
  for (const auto& domain_set : b.rare_tests)
    for (const Utterance& u : domain_set)
      for (int t : u.transcript)
        if (spec.is_rare(t)) ++tested_counts[t];

  RareWordAudit audit;
  audit.passed = true;
  for (int r = spec.common_words; r < spec.vocab_size(); ++r) {
    RareWordAudit::Row row;
    row.token = r;
    row.word = r < b.vocab.size() ? b.vocab.word(r) : cat("token", r);
    row.domain = spec.rare_domain_of(r);
    row.paired = paired_counts.count(r) ? paired_counts[r] : 0;
    row.unpaired = unpaired_counts.count(r) ? unpaired_counts[r] : 0;
    row.tested = tested_counts.count(r) ? tested_counts[r] : 0;
    row.ok = row.paired < spec.rare_word_threshold &&
             row.unpaired >= spec.min_unpaired_occurrences;
    audit.passed = audit.passed && row.ok;
    audit.rows.push_back(std::move(row));
  }
  return audit;
}

std::string RareWordAudit::to_table() const {
  std::ostringstream os;
  os << "token  word          domain  paired  unpaired  tested  ok\n";
  char line[128];
  for (const Row& r : rows) {
    std::snprintf(line, sizeof(line), "%5d  %-12s  %6d  %6ld  %8ld  %6ld  %s\n",
                  r.token, r.word.c_str(), r.domain, r.paired, r.unpaired, r.tested,
                  r.ok ? "yes" : "NO");
    os << line;
  }
  long bad = std::count_if(rows.begin(), rows.end(), [](const Row& r) { return !r.ok; });
  os << (passed ? "audit passed" : cat("audit FAILED: ", bad, " words in violation"))
     << "\n";
  return os.str();
}

// ---------------------------------------------------------------------------
// Disk layout.
// ---------------------------------------------------------------------------

namespace {

constexpr int kManifestVersion = 1;

void write_lines(const std::string& path, const std::vector<std::string>& lines) {
  std::ofstream out(path, std::ios::trunc);
  JL_CHECK(out.good(), "cannot open ", path, " for writing");
  for (const auto& l : lines) out << l << '\n';
  JL_CHECK(out.good(), "write failed for ", path);
}

std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream in(path);
  JL_CHECK(in.good(), "cannot open ", path);
  std::vector<std::string> lines;
  std::string l;
  while (std::getline(in, l)) lines.push_back(l);
  return lines;
}

std::string render_sentence(const Vocabulary& vocab, const std::vector<int>& s) {
  std::string line;
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) line += ' ';
    line += vocab.word(s[i]);
  }
  return line;
}

void write_text_split(const std::string& dir, const std::string& stem,
                      const Vocabulary& vocab, const std::vector<std::vector<int>>& sents,
                      const std::vector<int>* domains) {
  std::vector<std::string> lines;
  lines.reserve(sents.size());
  for (const auto& s : sents) {
    JL_CHECK(!s.empty(), "refusing to write an empty sentence in ", stem);
    lines.push_back(render_sentence(vocab, s));
  }
  write_lines(dir + "/" + stem + ".txt", lines);
  if (domains) {
    JL_CHECK(domains->size() == sents.size(), stem, ": domain list length mismatch");
    std::vector<std::string> dl;
    dl.reserve(domains->size());
    for (int d : *domains) dl.push_back(std::to_string(d));
    write_lines(dir + "/" + stem + ".domains", dl);
  }
}

void write_audio_split(const std::string& dir, const std::string& stem,
                       const Vocabulary& vocab, const std::vector<Utterance>& utts) {
  std::vector<std::vector<int>> sents;
  std::vector<int> domains;
  std::vector<NamedTensor> feats;
  char name[32];
  for (size_t i = 0; i < utts.size(); ++i) {
    sents.push_back(utts[i].transcript);
    domains.push_back(utts[i].domain_id);
    JL_CHECK(utts[i].features != nullptr, stem, ": utterance ", i, " has no features");
    std::snprintf(name, sizeof(name), "u%06zu", i);
    feats.push_back(NamedTensor{name, utts[i].features->shape, utts[i].features->value});
  }
  write_text_split(dir, stem, vocab, sents, &domains);
  write_tensor_container(dir + "/" + stem + ".feat", feats);
}

std::vector<std::vector<int>> parse_sentences(const std::vector<std::string>& lines,
                                              const std::unordered_map<std::string, int>& ids,
                                              const std::string& what) {
  std::vector<std::vector<int>> sents;
  sents.reserve(lines.size());
  for (const auto& line : lines) {
    std::istringstream is(line);
    std::vector<int> s;
    std::string w;
    while (is >> w) {
      auto it = ids.find(w);
      JL_CHECK(it != ids.end(), what, ": unknown word '", w, "'");
      s.push_back(it->second);
    }
    JL_CHECK(!s.empty(), what, ": empty sentence line");
    sents.push_back(std::move(s));
  }
  return sents;
}

std::vector<int> parse_domains(const std::vector<std::string>& lines,
                               const std::string& what) {
  std::vector<int> out;
  out.reserve(lines.size());
  for (const auto& l : lines) {
    try {
      out.push_back(std::stoi(l));
    } catch (const std::exception&) {
      fail(what, ": bad domain line '", l, "'");
    }
  }
  return out;
}

std::vector<Utterance> read_audio_split(const std::string& dir, const std::string& stem,
                                        const std::unordered_map<std::string, int>& ids,
                                        int feature_dim) {
  auto sents = parse_sentences(read_lines(dir + "/" + stem + ".txt"), ids, stem);
  auto domains = parse_domains(read_lines(dir + "/" + stem + ".domains"), stem);
  JL_CHECK(domains.size() == sents.size(), stem, ": transcript/domain count mismatch");
  auto feats = read_tensor_container(dir + "/" + stem + ".feat");
  JL_CHECK(feats.size() == sents.size(), stem, ": transcript/feature count mismatch");
  std::vector<Utterance> utts;
  utts.reserve(sents.size());
  for (size_t i = 0; i < sents.size(); ++i) {
    JL_CHECK(feats[i].shape.size() == 2 && feats[i].shape[1] == feature_dim, stem,
             ": feature tensor ", i, " is not [T x ", feature_dim, "]");
    Utterance u;
    u.transcript = std::move(sents[i]);
    u.domain_id = domains[i];
    u.features = Tensor::from_values(feats[i].shape, std::move(feats[i].values));
    utts.push_back(std::move(u));
  }
  return utts;
}

json spec_to_json(const CorpusSpec& s) {
  return json{{"common_words", s.common_words},
              {"carrier_words_per_domain", s.carrier_words_per_domain},
              {"rare_domains", s.rare_domains},
              {"rare_words_per_domain", s.rare_words_per_domain},
              {"paired_count", s.paired_count},
              {"unpaired_count", s.unpaired_count},
              {"heldout_count", s.heldout_count},
              {"base_test_count", s.base_test_count},
              {"rare_test_count_per_domain", s.rare_test_count_per_domain},
              {"rare_word_threshold", s.rare_word_threshold},
              {"min_unpaired_occurrences", s.min_unpaired_occurrences},
              {"unpaired_domain_weights", s.unpaired_domain_weights},
              {"base_len_min", s.base_len_min},
              {"base_len_max", s.base_len_max},
              {"rare_filler_max", s.rare_filler_max},
              {"feature_dim", s.feature_dim},
              {"frames_per_token_min", s.frames_per_token_min},
              {"frames_per_token_max", s.frames_per_token_max},
              {"noise_level", s.noise_level},
              {"rare_offset_scale", s.rare_offset_scale},
              {"seed", s.seed}};
}

CorpusSpec spec_from_json(const json& j) {
  CorpusSpec s;
  try {
    s.common_words = j.at("common_words").get<int>();
    s.carrier_words_per_domain = j.at("carrier_words_per_domain").get<int>();
    s.rare_domains = j.at("rare_domains").get<int>();
    s.rare_words_per_domain = j.at("rare_words_per_domain").get<int>();
    s.paired_count = j.at("paired_count").get<int>();
    s.unpaired_count = j.at("unpaired_count").get<int>();
    s.heldout_count = j.at("heldout_count").get<int>();
    s.base_test_count = j.at("base_test_count").get<int>();
    s.rare_test_count_per_domain = j.at("rare_test_count_per_domain").get<int>();
    s.rare_word_threshold = j.at("rare_word_threshold").get<int>();
    s.min_unpaired_occurrences = j.at("min_unpaired_occurrences").get<int>();
    s.unpaired_domain_weights = j.at("unpaired_domain_weights").get<std::vector<double>>();
    s.base_len_min = j.at("base_len_min").get<int>();
    s.base_len_max = j.at("base_len_max").get<int>();
    s.rare_filler_max = j.at("rare_filler_max").get<int>();
    s.feature_dim = j.at("feature_dim").get<int>();
    s.frames_per_token_min = j.at("frames_per_token_min").get<int>();
    s.frames_per_token_max = j.at("frames_per_token_max").get<int>();
    s.noise_level = j.at("noise_level").get<double>();
    s.rare_offset_scale = j.at("rare_offset_scale").get<double>();
    s.seed = j.at("seed").get<std::uint64_t>();
  } catch (const json::exception& e) {
    fail("corpus manifest spec is malformed: ", e.what());
  }
  return s;
}

}  // namespace

void save_bundle(const SplitBundle& b, const std::string& dir) {
  b.spec.validate();
  RareWordAudit audit = rare_word_report(b);
  JL_CHECK(audit.passed, "refusing to save a bundle that fails its audit:\n",
           audit.to_table());
  std::filesystem::create_directories(dir);

  write_lines(dir + "/vocab.txt", b.vocab.words);
  write_audio_split(dir, "paired_train", b.vocab, b.paired_train);
  write_text_split(dir, "unpaired_text", b.vocab, b.unpaired_text, &b.unpaired_domain);
  write_text_split(dir, "unpaired_heldout", b.vocab, b.unpaired_heldout,
                   &b.heldout_domain);
  write_audio_split(dir, "base_test", b.vocab, b.base_test);
  JL_CHECK(static_cast<int>(b.rare_tests.size()) == b.spec.rare_domains,
           "bundle holds ", b.rare_tests.size(), " rare test sets, spec says ",
           b.spec.rare_domains);
  for (int k = 1; k <= b.spec.rare_domains; ++k)
    write_audio_split(dir, cat("rare_test_", k), b.vocab,
                      b.rare_tests[static_cast<size_t>(k - 1)]);

  long min_unpaired = std::numeric_limits<long>::max(), max_paired = 0;
  for (const auto& r : audit.rows) {
    min_unpaired = std::min(min_unpaired, r.unpaired);
    max_paired = std::max(max_paired, r.paired);
  }
  json manifest{
      {"format", "jeitlab-corpus"},
      {"format_version", kManifestVersion},
      {"spec", spec_to_json(b.spec)},
      {"counts",
       {{"paired_train", b.paired_train.size()},
        {"unpaired_text", b.unpaired_text.size()},
        {"unpaired_heldout", b.unpaired_heldout.size()},
        {"base_test", b.base_test.size()},
        {"rare_test_per_domain", b.spec.rare_test_count_per_domain}}},
      {"audit",
       {{"passed", audit.passed},
        {"max_paired_occurrences", max_paired},
        {"min_unpaired_occurrences", min_unpaired}}},
  };
  std::ofstream out(dir + "/manifest.json", std::ios::trunc);
  JL_CHECK(out.good(), "cannot open ", dir, "/manifest.json for writing");
  out << manifest.dump(2) << '\n';
  JL_CHECK(out.good(), "write failed for ", dir, "/manifest.json");
}

SplitBundle load_bundle(const std::string& dir) {
  std::ifstream in(dir + "/manifest.json");
  JL_CHECK(in.good(), "cannot open ", dir, "/manifest.json");
  json manifest;
  try {
    in >> manifest;
  } catch (const json::exception& e) {
    fail("corpus manifest is not valid JSON: ", e.what());
  }
  JL_CHECK(manifest.value("format", "") == "jeitlab-corpus",
           "not a corpus directory: ", dir);
  JL_CHECK(manifest.value("format_version", -1) == kManifestVersion,
           "unsupported corpus format version");

  SplitBundle b;
  b.spec = spec_from_json(manifest.at("spec"));
  b.spec.validate();

  b.vocab.words = read_lines(dir + "/vocab.txt");
  JL_CHECK(static_cast<int>(b.vocab.words.size()) == b.spec.vocab_size(),
           "vocab.txt holds ", b.vocab.words.size(), " words, spec says ",
           b.spec.vocab_size());
  b.vocab.common_count = b.spec.common_words;
  b.vocab.carrier_count = b.spec.carrier_count();
  b.vocab.rare_domains = b.spec.rare_domains;
  b.vocab.rare_words_per_domain = b.spec.rare_words_per_domain;

  std::unordered_map<std::string, int> ids;
  for (int i = 0; i < b.vocab.size(); ++i) {
    JL_CHECK(ids.emplace(b.vocab.words[static_cast<size_t>(i)], i).second,
             "vocab.txt contains a duplicate word");
  }

  b.paired_train = read_audio_split(dir, "paired_train", ids, b.spec.feature_dim);
  b.unpaired_text =
      parse_sentences(read_lines(dir + "/unpaired_text.txt"), ids, "unpaired_text");
  b.unpaired_domain =
      parse_domains(read_lines(dir + "/unpaired_text.domains"), "unpaired_text");
  JL_CHECK(b.unpaired_domain.size() == b.unpaired_text.size(),
           "unpaired_text: sentence/domain count mismatch");
  b.unpaired_heldout = parse_sentences(read_lines(dir + "/unpaired_heldout.txt"), ids,
                                       "unpaired_heldout");
  b.heldout_domain =
      parse_domains(read_lines(dir + "/unpaired_heldout.domains"), "unpaired_heldout");
  JL_CHECK(b.heldout_domain.size() == b.unpaired_heldout.size(),
           "unpaired_heldout: sentence/domain count mismatch");
  b.base_test = read_audio_split(dir, "base_test", ids, b.spec.feature_dim);
  for (int k = 1; k <= b.spec.rare_domains; ++k)
    b.rare_tests.push_back(
        read_audio_split(dir, cat("rare_test_", k), ids, b.spec.feature_dim));

  RareWordAudit audit = rare_word_report(b);
  JL_CHECK(audit.passed, "loaded corpus fails its audit:\n", audit.to_table());
  return b;
}

}  // namespace jeitlab
