// jeitlab_main.cc
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

// Command line front end. One run configuration document drives every stage:
//
//   gen-data   build, audit, and save the synthetic corpus
//   train      one training run per objective mode
//   adapt      text-only adaptation of a trained checkpoint
//   train-lm   external LM on transcripts plus unpaired text
//   decode     n-best decoding of every test set
//   score      word error rates recomputed from n-best files
//   sweep      fusion weight grid for one checkpoint
//   report     tables and plots over everything above
//
// Artifact layout under out_dir: corpus/, lm/, train_<mode>/, adapt/,
// decode_<tag>/, sweep_<tag>/, report/. Every command echoes its resolved
// configuration into the directory it writes. Artifacts are byte-stable
// across reruns; wall-clock text appears only in the stderr header line.
//
// Exit codes: 0 success, 1 failed audit or runtime invariant, 2 bad usage
// or configuration.

#include <algorithm>
#include <array>
#include <chrono>
#include <cstdint>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "jeitlab/common.h"
#include "jeitlab/config.h"
#include "jeitlab/container.h"
#include "jeitlab/corpus.h"
#include "jeitlab/decoding.h"
#include "jeitlab/losses.h"
#include "jeitlab/model.h"
#include "jeitlab/training.h"

namespace {

using namespace jeitlab;
namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Shared plumbing.
// ---------------------------------------------------------------------------

struct Flags {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<std::string> mode;
  std::optional<double> kld_weight;
  std::optional<double> lambda_lm;
  std::optional<double> lambda_ilm;
  std::optional<int> beam;
  std::optional<int> steps;
  std::optional<int> eval_every;
  std::string checkpoint;
  std::string lm_path;
  std::string tag;
  std::vector<std::string> decode_dirs;
  bool resume = false;
};

ConfigOverrides to_overrides(const Flags& f) {
  ConfigOverrides o;
  o.seed = f.seed;
  o.out_dir = f.out;
  o.mode = f.mode;
  o.kld_weight = f.kld_weight;
  o.lambda_lm = f.lambda_lm;
  o.lambda_ilm = f.lambda_ilm;
  o.beam_width = f.beam;
  return o;
}

void log_header(const std::string& cmd) {
  std::time_t now = std::time(nullptr);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&now));
  std::cerr << "# jeitlab " << cmd << " " << buf << "\n";
}

void log_line(const std::string& msg) { std::cerr << msg << "\n"; }

std::string fmt(const char* spec, double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), spec, v);
  return buf;
}

std::string pct(double rate) { return fmt("%.2f", 100.0 * rate); }

void write_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  JL_CHECK(out.good(), "cannot open ", path, " for writing");
  out << content;
  out.flush();
  JL_CHECK(out.good(), "failed while writing ", path);
}

std::string corpus_dir(const RunConfig& cfg) { return cfg.out_dir + "/corpus"; }

void echo_config(const std::string& dir, const RunConfig& cfg) {
  fs::create_directories(dir);
  save_run_config(dir + "/run_config.json", cfg);
}

// Subdirectory names under out_dir with a given prefix, sorted for stable
// iteration (directory_iterator order is unspecified).
std::vector<std::string> subdirs_with_prefix(const std::string& root, const std::string& prefix) {
  std::vector<std::string> names;
  if (!fs::is_directory(root)) return names;
  for (const auto& entry : fs::directory_iterator(root)) {
    if (!entry.is_directory()) continue;
    std::string name = entry.path().filename().string();
    if (name.rfind(prefix, 0) == 0) names.push_back(name);
  }
  std::sort(names.begin(), names.end());
  return names;
}

// Decode/sweep outputs are tagged by the checkpoint's parent directory, so
// decoding train_jeit/checkpoint_best.bin lands in decode_train_jeit.
std::string default_tag(const std::string& checkpoint_path) {
  std::string parent = fs::path(checkpoint_path).parent_path().filename().string();
  return parent.empty() ? "run" : parent;
}

Model load_model_checkpoint(const ModelConfig& model_cfg, const std::string& path) {
  Model model = Model::init(model_cfg, 0);
  load_param_values(path, model.params);
  return model;
}

struct TestSet {
  std::string name;
  const std::vector<Utterance>* utts;
};

std::vector<TestSet> test_sets(const SplitBundle& bundle) {
  std::vector<TestSet> sets{{"base", &bundle.base_test}};
  for (std::size_t d = 0; d < bundle.rare_tests.size(); ++d) {
    sets.push_back({"rare" + std::to_string(d + 1), &bundle.rare_tests[d]});
  }
  return sets;
}

std::string utt_id(const std::string& set_name, std::size_t index) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%04zu", index);
  return set_name + "-" + buf;
}

// ---------------------------------------------------------------------------
// Tiny SVG line plots. Hand-rolled on purpose: the output must be identical
// across reruns, and a polyline per series is all the reports need.
// ---------------------------------------------------------------------------

struct PlotSeries {
  std::string name;
  std::vector<std::array<double, 2>> points;
};

std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    if (c == '&') out += "&amp;";
    else if (c == '<') out += "&lt;";
    else if (c == '>') out += "&gt;";
    else out += c;
  }
  return out;
}

void write_line_plot(const std::string& path, const std::string& title,
                     const std::string& xlabel, const std::string& ylabel,
                     const std::vector<PlotSeries>& series) {
  static const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd",
                                   "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f"};
  constexpr int kColors = 8;
  const double width = 720, height = 440;
  const double left = 64, right = 16, top = 30, bottom = 46;

  double xmin = 0, xmax = 1, ymin = 0, ymax = 1;
  bool any = false;
  for (const auto& s : series) {
    for (const auto& p : s.points) {
      if (!is_finite(p[0]) || !is_finite(p[1])) continue;
      if (!any) {
        xmin = xmax = p[0];
        ymin = ymax = p[1];
        any = true;
      } else {
        xmin = std::min(xmin, p[0]);
        xmax = std::max(xmax, p[0]);
        ymin = std::min(ymin, p[1]);
        ymax = std::max(ymax, p[1]);
      }
    }
  }
  if (xmax <= xmin) xmax = xmin + 1;
  if (ymax <= ymin) ymax = ymin + 1;
  const double px0 = left, px1 = width - right, py0 = height - bottom, py1 = top;
  auto sx = [&](double x) { return px0 + (x - xmin) / (xmax - xmin) * (px1 - px0); };
  auto sy = [&](double y) { return py0 + (y - ymin) / (ymax - ymin) * (py1 - py0); };

  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\""
      << height << "\" viewBox=\"0 0 " << width << " " << height << "\">\n";
  svg << "<rect width=\"" << width << "\" height=\"" << height << "\" fill=\"white\"/>\n";
  svg << "<text x=\"" << width / 2 << "\" y=\"18\" text-anchor=\"middle\" "
      << "font-family=\"sans-serif\" font-size=\"13\">" << xml_escape(title) << "</text>\n";

  for (int i = 0; i <= 4; ++i) {
    double xv = xmin + (xmax - xmin) * i / 4.0;
    double yv = ymin + (ymax - ymin) * i / 4.0;
    std::string gx = fmt("%.2f", sx(xv));
    std::string gy = fmt("%.2f", sy(yv));
    svg << "<line x1=\"" << gx << "\" y1=\"" << py1 << "\" x2=\"" << gx << "\" y2=\"" << py0
        << "\" stroke=\"#dddddd\" stroke-width=\"1\"/>\n";
    svg << "<line x1=\"" << px0 << "\" y1=\"" << gy << "\" x2=\"" << px1 << "\" y2=\"" << gy
        << "\" stroke=\"#dddddd\" stroke-width=\"1\"/>\n";
    svg << "<text x=\"" << gx << "\" y=\"" << py0 + 16
        << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"10\">"
        << fmt("%.4g", xv) << "</text>\n";
    svg << "<text x=\"" << px0 - 6 << "\" y=\"" << fmt("%.2f", sy(yv) + 3)
        << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"10\">"
        << fmt("%.4g", yv) << "</text>\n";
  }
  svg << "<rect x=\"" << px0 << "\" y=\"" << py1 << "\" width=\"" << px1 - px0 << "\" height=\""
      << py0 - py1 << "\" fill=\"none\" stroke=\"#333333\" stroke-width=\"1\"/>\n";
  svg << "<text x=\"" << (px0 + px1) / 2 << "\" y=\"" << height - 10
      << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">"
      << xml_escape(xlabel) << "</text>\n";
  svg << "<text x=\"14\" y=\"" << (py0 + py1) / 2 << "\" text-anchor=\"middle\" "
      << "font-family=\"sans-serif\" font-size=\"11\" transform=\"rotate(-90 14 "
      << (py0 + py1) / 2 << ")\">" << xml_escape(ylabel) << "</text>\n";

  for (std::size_t i = 0; i < series.size(); ++i) {
    const char* color = kPalette[i % kColors];
    std::ostringstream pts;
    bool first = true;
    for (const auto& p : series[i].points) {
      if (!is_finite(p[0]) || !is_finite(p[1])) continue;
      if (!first) pts << " ";
      pts << fmt("%.2f", sx(p[0])) << "," << fmt("%.2f", sy(p[1]));
      first = false;
    }
    if (!first) {
      svg << "<polyline points=\"" << pts.str() << "\" fill=\"none\" stroke=\"" << color
          << "\" stroke-width=\"1.5\"/>\n";
    }
    double ly = py1 + 14 + 14 * static_cast<double>(i);
    svg << "<line x1=\"" << px1 - 130 << "\" y1=\"" << ly << "\" x2=\"" << px1 - 112
        << "\" y2=\"" << ly << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
    svg << "<text x=\"" << px1 - 106 << "\" y=\"" << ly + 3
        << "\" font-family=\"sans-serif\" font-size=\"10\">" << xml_escape(series[i].name)
        << "</text>\n";
  }
  svg << "</svg>\n";
  write_file(path, svg.str());
}

// ---------------------------------------------------------------------------
// WER bookkeeping shared by score and sweep.
// ---------------------------------------------------------------------------

json wer_block(const WerTotals& t) {
  json j;
  j["substitutions"] = t.substitutions;
  j["deletions"] = t.deletions;
  j["insertions"] = t.insertions;
  j["ref_len"] = t.ref_len;
  j["wer"] = t.rate();
  return j;
}

struct ScoredSets {
  std::vector<std::pair<std::string, WerTotals>> sets;  // in decode order
  WerTotals rare_aggregate;
  WerTotals overall;
};

json wer_table_json(const ScoredSets& s) {
  json sets = json::object();
  for (const auto& [name, totals] : s.sets) sets[name] = wer_block(totals);
  json j;
  j["schema"] = 1;
  j["sets"] = std::move(sets);
  j["rare_aggregate"] = wer_block(s.rare_aggregate);
  j["overall"] = wer_block(s.overall);
  return j;
}

std::string wer_table_tsv(const ScoredSets& s) {
  std::ostringstream os;
  os << "set\tsubstitutions\tdeletions\tinsertions\tref_len\twer\n";
  auto row = [&os](const std::string& name, const WerTotals& t) {
    os << name << "\t" << t.substitutions << "\t" << t.deletions << "\t" << t.insertions << "\t"
       << t.ref_len << "\t" << fmt("%.6f", t.rate()) << "\n";
  };
  for (const auto& [name, totals] : s.sets) row(name, totals);
  row("rare_aggregate", s.rare_aggregate);
  row("overall", s.overall);
  return os.str();
}

void accumulate(ScoredSets& scored, const std::string& set_name, const WerTotals& totals) {
  scored.sets.emplace_back(set_name, totals);
  if (set_name != "base") scored.rare_aggregate.add(EditStats{totals.substitutions,
                                                              totals.deletions, totals.insertions,
                                                              totals.ref_len});
  scored.overall.add(
      EditStats{totals.substitutions, totals.deletions, totals.insertions, totals.ref_len});
}

// Top-1 decode of every test set under one fusion setting.
ScoredSets decode_and_score(const Model& model, const SplitBundle& bundle,
                            const FusionConfig& fusion, const ExternalLm* lm) {
  ScoredSets scored;
  for (const TestSet& set : test_sets(bundle)) {
    WerTotals totals;
    for (const Utterance& utt : *set.utts) {
      std::vector<Hypothesis> hyps = beam_search(model, utt.features, utt.domain_id, fusion, lm);
      const std::vector<int> empty;
      totals.add(wer(utt.transcript, hyps.empty() ? empty : hyps[0].tokens));
    }
    accumulate(scored, set.name, totals);
  }
  return scored;
}

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

int cmd_gen_data(const RunConfig& cfg) {
  log_line(cat("generating corpus with seed ", cfg.corpus.seed));
  SplitBundle bundle = generate_corpus(cfg.corpus);
  RareWordAudit audit = rare_word_report(bundle);
  const std::string dir = corpus_dir(cfg);
  fs::create_directories(dir);
  write_file(dir + "/audit.txt", audit.to_table());
  JL_CHECK(audit.passed, "rare word audit failed; see ", dir, "/audit.txt");
  save_bundle(bundle, dir);
  echo_config(dir, cfg);
  log_line(cat("paired ", bundle.paired_train.size(), ", unpaired ", bundle.unpaired_text.size(),
               ", heldout ", bundle.unpaired_heldout.size(), ", base test ",
               bundle.base_test.size(), ", rare domains ", bundle.rare_tests.size()));
  std::cout << audit.to_table();
  std::cout << "corpus written to " << dir << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// train / adapt
// ---------------------------------------------------------------------------

void write_eval_summary(const MetricsLog& log) {
  for (const EvalMetrics& e : log.evals) {
    std::cout << "step " << e.step << "  base " << pct(e.base_wer) << "  rare "
              << pct(e.rare_aggregate_wer) << "  overall " << pct(e.overall_wer) << "  ilm_ppl "
              << fmt("%.3f", e.ilm_ppl) << "\n";
  }
}

// Training length and eval cadence may be overridden from the command line;
// the echoed config reflects the values that actually ran.
RunConfig with_train_overrides(RunConfig cfg, const Flags& f) {
  if (f.steps) cfg.train.steps = *f.steps;
  if (f.eval_every) cfg.train.eval_every = *f.eval_every;
  cfg.train.validate();
  return cfg;
}

int cmd_train(const RunConfig& cfg0, const Flags& f) {
  RunConfig cfg = with_train_overrides(cfg0, f);
  const Mode mode = cfg.train.objective.mode;
  SplitBundle bundle = load_bundle(corpus_dir(cfg));
  const std::string dir = cfg.out_dir + "/train_" + mode_name(mode);
  echo_config(dir, cfg);
  log_line(cat("training ", mode_name(mode), " for ", cfg.train.steps, " steps into ", dir));
  RunOptions opts;
  opts.resume = f.resume;
  RunResult res = run_training(cfg.train, cfg.model, bundle, dir, opts);
  write_eval_summary(res.log);
  std::cout << "checkpoints: " << res.last_checkpoint << ", best " << res.best_checkpoint << "\n";
  return 0;
}

int cmd_adapt(const RunConfig& cfg0, const Flags& f) {
  RunConfig cfg = with_train_overrides(cfg0, f);
  SplitBundle bundle = load_bundle(corpus_dir(cfg));
  const std::string tag = f.tag.empty() ? "adapt" : f.tag;
  const std::string dir = cfg.out_dir + "/" + tag;
  echo_config(dir, cfg);
  log_line(cat("adapting from ", f.checkpoint.empty() ? "saved state" : f.checkpoint, " with kld ",
               fmt("%.3f", cfg.train.objective.kld_weight)));
  RunOptions opts;
  opts.init_params = f.checkpoint;
  opts.resume = f.resume;
  RunResult res = run_training(cfg.train, cfg.model, bundle, dir, opts);

  // Per-eval WER trajectory: the artifact the adaptation study reads.
  std::ostringstream tsv;
  tsv << "step\tbase_wer\trare_aggregate_wer\toverall_wer\tilm_ppl\n";
  std::vector<PlotSeries> curves(3);
  curves[0].name = "base";
  curves[1].name = "rare";
  curves[2].name = "overall";
  for (const EvalMetrics& e : res.log.evals) {
    tsv << e.step << "\t" << fmt("%.6f", e.base_wer) << "\t" << fmt("%.6f", e.rare_aggregate_wer)
        << "\t" << fmt("%.6f", e.overall_wer) << "\t" << fmt("%.6f", e.ilm_ppl) << "\n";
    double step = static_cast<double>(e.step);
    curves[0].points.push_back({step, e.base_wer});
    curves[1].points.push_back({step, e.rare_aggregate_wer});
    curves[2].points.push_back({step, e.overall_wer});
  }
  write_file(dir + "/wer_curve.tsv", tsv.str());
  write_line_plot(dir + "/wer_curve.svg", "adaptation word error rate", "step", "WER", curves);
  write_eval_summary(res.log);
  std::cout << "checkpoints: " << res.last_checkpoint << ", best " << res.best_checkpoint << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// train-lm
// ---------------------------------------------------------------------------

int cmd_train_lm(const RunConfig& cfg) {
  SplitBundle bundle = load_bundle(corpus_dir(cfg));
  std::vector<std::vector<int>> transcripts;
  transcripts.reserve(bundle.paired_train.size());
  for (const Utterance& u : bundle.paired_train) transcripts.push_back(u.transcript);
  log_line(cat("training external LM for ", cfg.lm.train.steps, " steps"));
  LmTrainResult res = train_external_lm(cfg.lm.arch, transcripts, bundle.unpaired_text,
                                        cfg.lm.train);
  const std::string dir = cfg.out_dir + "/lm";
  echo_config(dir, cfg);
  save_external_lm(dir + "/external_lm.bin", res.lm);

  std::ostringstream tsv;
  tsv << "step\tloss\n";
  for (std::size_t i = 0; i < res.step_losses.size(); ++i) {
    tsv << i + 1 << "\t" << fmt("%.6f", res.step_losses[i]) << "\n";
  }
  write_file(dir + "/lm_train.tsv", tsv.str());

  double ppl = lm_perplexity(res.lm, bundle.unpaired_heldout);
  json eval;
  eval["schema"] = 1;
  eval["heldout_ppl"] = ppl;
  eval["paired_drawn"] = res.paired_drawn;
  eval["unpaired_drawn"] = res.unpaired_drawn;
  eval["final_loss"] = res.step_losses.empty() ? 0.0 : res.step_losses.back();
  write_file(dir + "/lm_eval.json", eval.dump(2) + "\n");
  std::cout << "external LM heldout perplexity " << fmt("%.4f", ppl) << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// decode
// ---------------------------------------------------------------------------

int cmd_decode(const RunConfig& cfg, const Flags& f) {
  SplitBundle bundle = load_bundle(corpus_dir(cfg));
  Model model = load_model_checkpoint(cfg.model, f.checkpoint);
  std::optional<ExternalLm> lm;
  if (!f.lm_path.empty()) {
    lm = load_external_lm(f.lm_path);
    JL_CHECK(lm->config.vocab_size == cfg.model.vocab_size,
             "external LM vocabulary does not match the model");
  }
  const FusionConfig fusion = cfg.fusion;
  const std::string tag = f.tag.empty() ? default_tag(f.checkpoint) : f.tag;
  const std::string dir = cfg.out_dir + "/decode_" + tag;
  echo_config(dir, cfg);
  log_line(cat("decoding with lambda_lm ", fmt("%.3f", fusion.lambda_lm), ", lambda_ilm ",
               fmt("%.3f", fusion.lambda_ilm), ", beam ", fusion.beam_width));

  for (const TestSet& set : test_sets(bundle)) {
    std::ostringstream os;
    for (std::size_t i = 0; i < set.utts->size(); ++i) {
      const Utterance& utt = (*set.utts)[i];
      std::vector<Hypothesis> hyps =
          beam_search(model, utt.features, utt.domain_id, fusion, lm ? &*lm : nullptr);
      const std::string id = utt_id(set.name, i);
      for (std::size_t r = 0; r < hyps.size(); ++r) {
        os << nbest_record(id, static_cast<int>(r), hyps[r], bundle.vocab.words) << "\n";
      }
    }
    write_file(dir + "/" + set.name + ".nbest.txt", os.str());
    log_line(cat("decoded ", set.utts->size(), " utterances of ", set.name));
  }
  std::cout << "n-best files written to " << dir << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// score
// ---------------------------------------------------------------------------

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> fields;
  std::size_t start = 0;
  while (true) {
    std::size_t tab = line.find('\t', start);
    if (tab == std::string::npos) {
      fields.push_back(line.substr(start));
      return fields;
    }
    fields.push_back(line.substr(start, tab - start));
    start = tab + 1;
  }
}

std::vector<std::string> split_words(const std::string& s) {
  std::vector<std::string> words;
  std::istringstream is(s);
  std::string w;
  while (is >> w) words.push_back(w);
  return words;
}

long parse_long(const std::string& s, const char* what) {
  try {
    std::size_t used = 0;
    long v = std::stol(s, &used);
    JL_CHECK(used == s.size(), "trailing characters in ", what, " '", s, "'");
    return v;
  } catch (const std::logic_error&) {
    JL_CHECK(false, "bad ", what, " '", s, "'");
  }
  return 0;  // unreachable
}

// Re-derives the hypothesis token sequences from the persisted n-best words
// and audits coverage: every utterance exactly once at rank 0, every word in
// the vocabulary. Any gap means the decode artifacts are not trustworthy.
WerTotals score_nbest_file(const std::string& path, const std::string& set_name,
                           const std::vector<Utterance>& refs, const Vocabulary& vocab) {
  std::ifstream in(path);
  JL_CHECK(in.good(), "cannot read ", path);
  std::vector<bool> seen(refs.size(), false);
  std::vector<std::vector<int>> hyps(refs.size());
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> fields = split_tabs(line);
    JL_CHECK(fields.size() == 7, "malformed n-best line in ", path, ": ", line);
    if (parse_long(fields[1], "rank") != 0) continue;
    const std::string& id = fields[0];
    const std::string prefix = set_name + "-";
    JL_CHECK(id.rfind(prefix, 0) == 0, "utterance id '", id, "' does not belong to ", set_name);
    long index = parse_long(id.substr(prefix.size()), "utterance index");
    JL_CHECK(index >= 0 && index < static_cast<long>(refs.size()), "utterance id '", id,
             "' is out of range for ", set_name);
    JL_CHECK(!seen[static_cast<std::size_t>(index)], "duplicate hypothesis for '", id, "'");
    seen[static_cast<std::size_t>(index)] = true;
    std::vector<int> tokens;
    for (const std::string& w : split_words(fields[6])) {
      int token = vocab.find(w);
      JL_CHECK(token >= 0, "hypothesis word '", w, "' is not in the vocabulary");
      tokens.push_back(token);
    }
    hyps[static_cast<std::size_t>(index)] = std::move(tokens);
  }
  for (std::size_t i = 0; i < refs.size(); ++i) {
    JL_CHECK(seen[i], "missing hypothesis for '", utt_id(set_name, i), "' in ", path);
  }
  WerTotals totals;
  for (std::size_t i = 0; i < refs.size(); ++i) totals.add(wer(refs[i].transcript, hyps[i]));
  return totals;
}

const std::vector<Utterance>* find_test_set(const SplitBundle& bundle, const std::string& name) {
  if (name == "base") return &bundle.base_test;
  if (name.rfind("rare", 0) == 0) {
    long d = parse_long(name.substr(4), "rare set index");
    if (d >= 1 && d <= static_cast<long>(bundle.rare_tests.size())) {
      return &bundle.rare_tests[static_cast<std::size_t>(d - 1)];
    }
  }
  return nullptr;
}

int cmd_score(const RunConfig& cfg, const Flags& f) {
  SplitBundle bundle = load_bundle(corpus_dir(cfg));
  std::vector<std::string> dirs = f.decode_dirs;
  if (dirs.empty()) {
    for (const std::string& name : subdirs_with_prefix(cfg.out_dir, "decode_")) {
      dirs.push_back(cfg.out_dir + "/" + name);
    }
  }
  JL_CHECK(!dirs.empty(), "nothing to score under ", cfg.out_dir);

  for (const std::string& dir : dirs) {
    std::vector<std::string> files;
    JL_CHECK(fs::is_directory(dir), "no decode directory at ", dir);
    for (const auto& entry : fs::directory_iterator(dir)) {
      std::string name = entry.path().filename().string();
      const std::string suffix = ".nbest.txt";
      if (name.size() > suffix.size() &&
          name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0) {
        files.push_back(name.substr(0, name.size() - suffix.size()));
      }
    }
    std::sort(files.begin(), files.end());
    JL_CHECK(!files.empty(), "no n-best files under ", dir);

    ScoredSets scored;
    for (const std::string& set_name : files) {
      const std::vector<Utterance>* refs = find_test_set(bundle, set_name);
      JL_CHECK(refs != nullptr, "unknown test set '", set_name, "' in ", dir);
      accumulate(scored, set_name,
                 score_nbest_file(dir + "/" + set_name + ".nbest.txt", set_name, *refs,
                                  bundle.vocab));
    }
    write_file(dir + "/wer.json", wer_table_json(scored).dump(2) + "\n");
    write_file(dir + "/wer_table.tsv", wer_table_tsv(scored));
    std::cout << dir << "\n" << wer_table_tsv(scored);
  }
  return 0;
}

// ---------------------------------------------------------------------------
// sweep
// ---------------------------------------------------------------------------

int cmd_sweep(const RunConfig& cfg, const Flags& f) {
  SplitBundle bundle = load_bundle(corpus_dir(cfg));
  Model model = load_model_checkpoint(cfg.model, f.checkpoint);
  std::optional<ExternalLm> lm;
  if (!f.lm_path.empty()) {
    lm = load_external_lm(f.lm_path);
    JL_CHECK(lm->config.vocab_size == cfg.model.vocab_size,
             "external LM vocabulary does not match the model");
  }
  const std::string tag = f.tag.empty() ? default_tag(f.checkpoint) : f.tag;
  const std::string dir = cfg.out_dir + "/sweep_" + tag;
  echo_config(dir, cfg);

  std::ostringstream tsv;
  tsv << "lambda_lm\tlambda_ilm\tbase_wer\trare_aggregate_wer\toverall_wer\n";
  bool have_best = false;
  double best_rare = 0.0;
  json best;
  for (double llm : cfg.sweep.lambda_lm) {
    for (double lilm : cfg.sweep.lambda_ilm) {
      if (lilm > 0.0 && llm == 0.0) continue;  // subtraction needs fusion
      FusionConfig fusion;
      fusion.lambda_lm = llm;
      fusion.lambda_ilm = lilm;
      fusion.beam_width = cfg.fusion.beam_width;
      fusion.max_symbols_per_frame = cfg.fusion.max_symbols_per_frame;
      fusion.validate();
      ScoredSets scored = decode_and_score(model, bundle, fusion, lm ? &*lm : nullptr);
      double base = scored.sets[0].second.rate();
      double rare = scored.rare_aggregate.rate();
      double overall = scored.overall.rate();
      tsv << fmt("%.3f", llm) << "\t" << fmt("%.3f", lilm) << "\t" << fmt("%.6f", base) << "\t"
          << fmt("%.6f", rare) << "\t" << fmt("%.6f", overall) << "\n";
      log_line(cat("lambda_lm ", fmt("%.3f", llm), " lambda_ilm ", fmt("%.3f", lilm), " rare ",
                   pct(rare), " overall ", pct(overall)));
      // Ascending loops plus strict < keep the lexicographically smallest
      // pair on ties.
      if (!have_best || rare < best_rare) {
        have_best = true;
        best_rare = rare;
        best = json{{"schema", 1},        {"lambda_lm", llm},
                    {"lambda_ilm", lilm}, {"base_wer", base},
                    {"rare_aggregate_wer", rare}, {"overall_wer", overall}};
      }
    }
  }
  JL_CHECK(have_best, "sweep grid produced no valid fusion settings");
  write_file(dir + "/sweep.tsv", tsv.str());
  write_file(dir + "/best.json", best.dump(2) + "\n");
  std::cout << "best lambda_lm " << fmt("%.3f", best["lambda_lm"].get<double>())
            << ", lambda_ilm " << fmt("%.3f", best["lambda_ilm"].get<double>()) << ", rare WER "
            << pct(best["rare_aggregate_wer"].get<double>()) << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

struct RunSummary {
  std::string name;
  MetricsLog log;
};

std::string tsv_cell(double v) { return is_finite(v) ? fmt("%.6f", v) : "nan"; }

int cmd_report(const RunConfig& cfg) {
  const std::string rdir = cfg.out_dir + "/report";
  echo_config(rdir, cfg);

  // Training and adaptation runs.
  std::vector<RunSummary> runs;
  std::vector<std::string> run_names = subdirs_with_prefix(cfg.out_dir, "train_");
  for (const std::string& name : subdirs_with_prefix(cfg.out_dir, "adapt")) {
    run_names.push_back(name);
  }
  for (const std::string& name : run_names) {
    const std::string metrics = cfg.out_dir + "/" + name + "/metrics.jsonl";
    if (!fs::exists(metrics)) continue;
    runs.push_back({name, load_metrics(metrics)});
  }

  for (const RunSummary& run : runs) {
    std::ostringstream loss;
    loss << "step\tloss\te2e_paired\te2e_unpaired\tilm\tkld\tgrad_norm\n";
    for (const StepMetrics& s : run.log.steps) {
      loss << s.step << "\t" << tsv_cell(s.loss) << "\t" << tsv_cell(s.e2e_paired) << "\t"
           << tsv_cell(s.e2e_unpaired) << "\t" << tsv_cell(s.ilm) << "\t" << tsv_cell(s.kld)
           << "\t" << tsv_cell(s.grad_norm) << "\n";
    }
    write_file(rdir + "/loss_" + run.name + ".tsv", loss.str());

    std::ostringstream eval;
    eval << "step\tbase_wer\trare_aggregate_wer\toverall_wer\tilm_ppl\n";
    for (const EvalMetrics& e : run.log.evals) {
      eval << e.step << "\t" << tsv_cell(e.base_wer) << "\t" << tsv_cell(e.rare_aggregate_wer)
           << "\t" << tsv_cell(e.overall_wer) << "\t" << tsv_cell(e.ilm_ppl) << "\n";
    }
    write_file(rdir + "/eval_" + run.name + ".tsv", eval.str());
  }

  std::vector<PlotSeries> loss_series, wer_series, ppl_series;
  for (const RunSummary& run : runs) {
    PlotSeries ls{run.name, {}}, ws{run.name, {}}, ps{run.name, {}};
    for (const StepMetrics& s : run.log.steps) {
      ls.points.push_back({static_cast<double>(s.step), s.loss});
    }
    for (const EvalMetrics& e : run.log.evals) {
      ws.points.push_back({static_cast<double>(e.step), e.overall_wer});
      ps.points.push_back({static_cast<double>(e.step), e.ilm_ppl});
    }
    loss_series.push_back(std::move(ls));
    wer_series.push_back(std::move(ws));
    ppl_series.push_back(std::move(ps));
  }
  if (!runs.empty()) {
    write_line_plot(rdir + "/loss_curves.svg", "training loss", "step", "loss", loss_series);
    write_line_plot(rdir + "/wer_curves.svg", "overall word error rate", "step", "WER",
                    wer_series);
    write_line_plot(rdir + "/ilm_ppl_curves.svg", "internal LM perplexity", "step", "perplexity",
                    ppl_series);
  }

  // Word error rate table over the scored decodes.
  struct WerRow {
    std::string label;
    json table;
  };
  std::vector<WerRow> wer_rows;
  for (const std::string& name : subdirs_with_prefix(cfg.out_dir, "decode_")) {
    const std::string path = cfg.out_dir + "/" + name + "/wer.json";
    if (!fs::exists(path)) continue;
    std::ifstream in(path);
    json table;
    try {
      in >> table;
    } catch (const json::exception& e) {
      JL_CHECK(false, "corrupt WER table in ", path, ": ", e.what());
    }
    wer_rows.push_back({name.substr(std::string("decode_").size()), std::move(table)});
  }

  std::vector<std::string> columns{"base"};
  for (int d = 1; d <= cfg.corpus.rare_domains; ++d) columns.push_back("rare" + std::to_string(d));

  std::ostringstream md, tsv;
  md << "# jeitlab report\n\n";
  if (!wer_rows.empty()) {
    md << "## Word error rate (%)\n\n";
    md << "| run |";
    tsv << "run";
    for (const std::string& c : columns) {
      md << " " << c << " |";
      tsv << "\t" << c;
    }
    md << " rare aggregate | overall |\n|---|";
    tsv << "\trare_aggregate\toverall\n";
    for (std::size_t i = 0; i < columns.size() + 2; ++i) md << "---|";
    md << "\n";
    for (const WerRow& row : wer_rows) {
      md << "| " << row.label << " |";
      tsv << row.label;
      for (const std::string& c : columns) {
        if (row.table.contains("sets") && row.table["sets"].contains(c)) {
          double rate = row.table["sets"][c].value("wer", 0.0);
          md << " " << pct(rate) << " |";
          tsv << "\t" << fmt("%.6f", rate);
        } else {
          md << " - |";
          tsv << "\t" << "nan";
        }
      }
      double rare = row.table.contains("rare_aggregate")
                        ? row.table["rare_aggregate"].value("wer", 0.0)
                        : 0.0;
      double overall = row.table.contains("overall") ? row.table["overall"].value("wer", 0.0)
                                                     : 0.0;
      md << " " << pct(rare) << " | " << pct(overall) << " |\n";
      tsv << "\t" << fmt("%.6f", rare) << "\t" << fmt("%.6f", overall) << "\n";
    }
    md << "\n";
  }

  if (!runs.empty()) {
    md << "## Training runs\n\n";
    md << "| run | steps | final loss | best step | final overall WER (%) | final ILM ppl |\n";
    md << "|---|---|---|---|---|---|\n";
    for (const RunSummary& run : runs) {
      std::int64_t steps = run.log.steps.empty() ? 0 : run.log.steps.back().step;
      std::string loss = run.log.steps.empty() ? "-" : fmt("%.4f", run.log.steps.back().loss);
      std::string wer_s = "-", ppl_s = "-", best_s = "-";
      if (!run.log.evals.empty()) {
        wer_s = pct(run.log.evals.back().overall_wer);
        ppl_s = fmt("%.3f", run.log.evals.back().ilm_ppl);
        const EvalMetrics* best = &run.log.evals[0];
        for (const EvalMetrics& e : run.log.evals) {
          if (e.overall_wer < best->overall_wer) best = &e;
        }
        best_s = std::to_string(best->step);
      }
      md << "| " << run.name << " | " << steps << " | " << loss << " | " << best_s << " | "
         << wer_s << " | " << ppl_s << " |\n";
    }
    md << "\n";
  }

  std::vector<std::string> sweep_names = subdirs_with_prefix(cfg.out_dir, "sweep_");
  bool wrote_sweep_header = false;
  for (const std::string& name : sweep_names) {
    const std::string path = cfg.out_dir + "/" + name + "/best.json";
    if (!fs::exists(path)) continue;
    std::ifstream in(path);
    json best;
    try {
      in >> best;
    } catch (const json::exception& e) {
      JL_CHECK(false, "corrupt sweep result in ", path, ": ", e.what());
    }
    if (!wrote_sweep_header) {
      md << "## Fusion sweeps\n\n";
      md << "| sweep | lambda_lm | lambda_ilm | rare aggregate WER (%) | overall WER (%) |\n";
      md << "|---|---|---|---|---|\n";
      wrote_sweep_header = true;
    }
    md << "| " << name.substr(std::string("sweep_").size()) << " | "
       << fmt("%.3f", best.value("lambda_lm", 0.0)) << " | "
       << fmt("%.3f", best.value("lambda_ilm", 0.0)) << " | "
       << pct(best.value("rare_aggregate_wer", 0.0)) << " | "
       << pct(best.value("overall_wer", 0.0)) << " |\n";
  }
  if (wrote_sweep_header) md << "\n";

  const std::string lm_eval = cfg.out_dir + "/lm/lm_eval.json";
  if (fs::exists(lm_eval)) {
    std::ifstream in(lm_eval);
    json eval;
    try {
      in >> eval;
      md << "## External LM\n\nHeld-out perplexity " << fmt("%.4f", eval.value("heldout_ppl", 0.0))
         << "\n";
    } catch (const json::exception& e) {
      JL_CHECK(false, "corrupt LM evaluation in ", lm_eval, ": ", e.what());
    }
  }

  JL_CHECK(!runs.empty() || !wer_rows.empty(), "no artifacts to report under ", cfg.out_dir);
  write_file(rdir + "/report.md", md.str());
  if (!wer_rows.empty()) write_file(rdir + "/report.tsv", tsv.str());
  std::cout << md.str();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"desk-scale joint transducer and internal-LM training lab"};
  app.require_subcommand(1);
  Flags f;

  auto add_common = [&f](CLI::App* cmd) {
    cmd->add_option("--config", f.config_path, "run configuration document")
        ->required()
        ->check(CLI::ExistingFile);
    cmd->add_option("--seed-override", f.seed, "replace the master seed");
    cmd->add_option("--out", f.out, "replace the output directory");
  };

  CLI::App* gen = app.add_subcommand("gen-data", "build and audit the synthetic corpus");
  add_common(gen);

  CLI::App* train = app.add_subcommand("train", "run one training objective");
  add_common(train);
  train->add_option("--mode", f.mode, "objective mode")
      ->check(CLI::IsMember({"base", "ilmt", "jeit", "joist", "cjjt"}));
  train->add_option("--steps", f.steps, "override the step count");
  train->add_option("--eval-every", f.eval_every, "override the eval cadence");
  train->add_flag("--resume", f.resume, "continue from the saved state");

  CLI::App* adapt = app.add_subcommand("adapt", "text-only adaptation of a checkpoint");
  add_common(adapt);
  adapt->add_option("--checkpoint", f.checkpoint, "trained parameters to adapt")
      ->check(CLI::ExistingFile);
  adapt->add_option("--kld-weight", f.kld_weight, "regularization toward the checkpoint");
  adapt->add_option("--steps", f.steps, "override the step count");
  adapt->add_option("--eval-every", f.eval_every, "override the eval cadence");
  adapt->add_option("--tag", f.tag, "output directory name (default adapt)");
  adapt->add_flag("--resume", f.resume, "continue from the saved state");

  CLI::App* train_lm = app.add_subcommand("train-lm", "train the external LM");
  add_common(train_lm);

  CLI::App* decode = app.add_subcommand("decode", "n-best decoding of the test sets");
  add_common(decode);
  decode->add_option("--checkpoint", f.checkpoint, "model parameters to decode with")
      ->required()
      ->check(CLI::ExistingFile);
  decode->add_option("--lm", f.lm_path, "external LM for fusion")->check(CLI::ExistingFile);
  decode->add_option("--lambda-lm", f.lambda_lm, "external LM fusion weight");
  decode->add_option("--lambda-ilm", f.lambda_ilm, "internal LM subtraction weight");
  decode->add_option("--beam", f.beam, "beam width");
  decode->add_option("--tag", f.tag, "output tag (default: checkpoint directory name)");

  CLI::App* score = app.add_subcommand("score", "word error rates from n-best files");
  add_common(score);
  score->add_option("--decode-dir", f.decode_dirs, "decode directory (default: all under out)");

  CLI::App* sweep = app.add_subcommand("sweep", "fusion weight grid for one checkpoint");
  add_common(sweep);
  sweep->add_option("--checkpoint", f.checkpoint, "model parameters to decode with")
      ->required()
      ->check(CLI::ExistingFile);
  sweep->add_option("--lm", f.lm_path, "external LM for fusion")->check(CLI::ExistingFile);
  sweep->add_option("--beam", f.beam, "beam width");
  sweep->add_option("--tag", f.tag, "output tag (default: checkpoint directory name)");

  CLI::App* report = app.add_subcommand("report", "tables and plots from run artifacts");
  add_common(report);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  // Adaptation always runs the ILM-only objective; the override path also
  // resets the weights to that mode's defaults before --kld-weight applies.
  if (adapt->parsed()) f.mode = "ilma";

  RunConfig cfg;
  try {
    cfg = load_run_config(f.config_path, to_overrides(f));
    if (train->parsed()) {
      JL_CHECK(cfg.train.objective.mode != Mode::kIlma,
               "train does not run adaptation; use the adapt command");
    }
    if (adapt->parsed()) {
      JL_CHECK(!f.checkpoint.empty() || f.resume, "adapt needs --checkpoint or --resume");
    }
    if (decode->parsed()) {
      JL_CHECK(cfg.fusion.lambda_lm == 0.0 || !f.lm_path.empty(),
               "lambda_lm > 0 needs --lm");
    }
    if (sweep->parsed() && f.lm_path.empty()) {
      for (double v : cfg.sweep.lambda_lm) {
        JL_CHECK(v == 0.0, "the sweep grid uses LM fusion; pass --lm");
      }
    }
  } catch (const std::exception& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  }

  try {
    if (gen->parsed()) {
      log_header("gen-data");
      return cmd_gen_data(cfg);
    }
    if (train->parsed()) {
      log_header("train");
      return cmd_train(cfg, f);
    }
    if (adapt->parsed()) {
      log_header("adapt");
      return cmd_adapt(cfg, f);
    }
    if (train_lm->parsed()) {
      log_header("train-lm");
      return cmd_train_lm(cfg);
    }
    if (decode->parsed()) {
      log_header("decode");
      return cmd_decode(cfg, f);
    }
    if (score->parsed()) {
      log_header("score");
      return cmd_score(cfg, f);
    }
    if (sweep->parsed()) {
      log_header("sweep");
      return cmd_sweep(cfg, f);
    }
    if (report->parsed()) {
      log_header("report");
      return cmd_report(cfg);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  std::cerr << "error: no command\n";
  return 2;
}
