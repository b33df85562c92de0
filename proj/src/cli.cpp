// Copyright 2026 The divseq Authors. All Rights Reserved.
// SPDX-License-Identifier: Apache-2.0

#include "divseq/cli.hpp"

#include <cstdio>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "divseq/checkpoint.hpp"
#include "divseq/metrics.hpp"
#include "divseq/trainer.hpp"

namespace divseq::cli {

namespace {

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

struct Options {
  std::string corpus, vocab, objective, config, checkpoint, source, mode = "greedy", responses, references,
      activities, entities, report, avgout, tokens, out;
  Index min_count = 1;
  Index max_size = 0;
  std::optional<double> lft_score;
  std::optional<std::uint64_t> seed;
  Index num_examples = 2000;
  double dull_fraction = 0.8;
};

void print_resolved(std::ostream& out, const CLI::App& sub) {
  out << "# " << sub.get_name() << "\n";
  for (const auto* opt : sub.get_options()) {
    if (opt->get_name() == "--help" || opt->get_name() == "-h") continue;
    std::string value;
    if (opt->count() > 0) {
      for (const auto& r : opt->results()) value += (value.empty() ? "" : " ") + r;
    } else {
      value = opt->get_default_str();
      if (value.empty()) value = "(unset)";
    }
    out << opt->get_single_name() << " = " << value << "\n";
  }
}

int build_vocab(const Options& o, std::ostream& out, std::ostream& err) {
  VocabularyBuildReport report;
  auto vocab = build_vocabulary(o.corpus, o.min_count, o.max_size, &report);
  for (const auto& w : report.warnings) err << w << "\n";
  vocab.save(o.out);
  out << "vocabulary: " << vocab.size() << " tokens (" << report.distinct_tokens << " distinct, "
      << report.total_tokens << " total in corpus) -> " << o.out << "\n";
  return kExitOk;
}

int synth(const Options& o, std::ostream& out) {
  if (o.dull_fraction < 0.0 || o.dull_fraction > 1.0) throw UsageError("--dull-fraction must lie in [0, 1]");
  const auto dull = generate_synthetic_corpus(o.num_examples, o.dull_fraction, o.seed.value_or(1), o.out);
  out << "wrote " << o.num_examples << " examples (" << dull << " dull) -> " << o.out << "\n";
  return kExitOk;
}

int train_cmd(const Options& o, std::ostream& out) {
  std::set<std::string> present;
  TrainConfig cfg;
  try {
    cfg = load_train_config(o.config, &present);
  } catch (const ConfigError& e) {
    throw UsageError(e.what());
  }
  if (!o.objective.empty()) {
    try {
      cfg.objective = parse_objective(o.objective);
    } catch (const LossError& e) {
      throw UsageError(e.what());
    }
  }
  try {
    require_objective_keys(cfg.objective, present);
  } catch (const ConfigError& e) {
    throw UsageError(e.what());
  }
  if (o.seed) cfg.seed = *o.seed;
  cfg.validate();
  out << "# train config\n" << to_text(cfg);
  auto ckpt = train(cfg, {o.corpus, o.vocab, o.checkpoint});
  out << "trained " << ckpt.state.step << " steps -> " << o.checkpoint << "\n";
  if (ckpt.state.skipped_samples > 0) out << "skipped samples: " << ckpt.state.skipped_samples << "\n";
  return kExitOk;
}

int generate_cmd(const Options& o, std::ostream& out) {
  DecodeMode mode;
  if (o.mode == "greedy")
    mode = DecodeMode::greedy;
  else if (o.mode == "sample")
    mode = DecodeMode::sample;
  else
    throw UsageError("--mode must be greedy or sample");
  generate(o.checkpoint, o.source, mode, o.lft_score, o.seed.value_or(0), o.out);
  out << "responses -> " << o.out << "\n";
  return kExitOk;
}

int evaluate_cmd(const Options& o, std::ostream& out) {
  if (o.responses.empty()) {
    if (o.report.empty() || o.out.empty()) throw UsageError("evaluate needs --responses, or --report with --out");
    for (const auto& p : emit_curves(o.report, o.out)) out << "curve -> " << p.string() << "\n";
    return kExitOk;
  }
  const bool want_f1 = !o.activities.empty() || !o.entities.empty();
  if (want_f1 && (o.activities.empty() || o.entities.empty()))
    throw UsageError("--activities and --entities must be given together");
  if (want_f1 && o.references.empty()) throw UsageError("F1 needs --references");

  auto responses = read_responses(o.responses);
  std::optional<std::vector<Response>> refs;
  if (!o.references.empty()) {
    refs = read_responses(o.references);
    if (refs->size() != responses.size()) throw MetricsError("responses and references differ in length");
  }
  std::optional<LexiconF1Input> lex;
  if (want_f1) lex = LexiconF1Input{load_lexicon(o.activities), load_lexicon(o.entities)};
  auto report = evaluate_corpus(responses, refs ? &*refs : nullptr, lex ? &*lex : nullptr);

  if (!o.report.empty()) {
    write_report(report, o.report);
    out << "report -> " << o.report << "\n";
  } else {
    out << report_to_json(report);
  }
  if (!o.out.empty()) {
    if (o.report.empty()) throw UsageError("--out needs --report to emit curves");
    for (const auto& p : emit_curves(o.report, o.out)) out << "curve -> " << p.string() << "\n";
  }
  return kExitOk;
}

int score_cmd(const Options& o, std::ostream& out) {
  auto exported = read_avgout_json(o.avgout);
  auto vocab = Vocabulary::from_tokens(
      std::vector<std::string>(exported.tokens.begin() + std::min<std::ptrdiff_t>(kNumReserved, exported.tokens.size()),
                               exported.tokens.end()));
  if (vocab.tokens() != exported.tokens) throw CheckpointError("avgout export tokens do not form a vocabulary");
  const auto words = split_tokens(o.tokens);
  const auto ids = vocab.encode(words);
  auto result = discrete_diversity(exported.tracker, ids);
  out << "token\tP\n";
  std::size_t k = 0;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] == kEos || ids[i] == kPad) continue;
    out << words[i] << "\t" << fmt(result.probabilities[k++]) << "\n";
  }
  out << "N_g\t" << result.n_g << "\n";
  out << "N_unique\t" << result.n_unique << "\n";
  out << "B_d\t" << fmt(result.b_d) << "\n";
  return kExitOk;
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Diversity-promoting dialogue response generation toolkit", "divseq"};
  app.require_subcommand(1);
  Options o;

  auto* bv = app.add_subcommand("build-vocab", "Build a vocabulary from a corpus");
  bv->add_option("--corpus", o.corpus, "Corpus file (source<TAB>target per line)")->required();
  bv->add_option("--out", o.out, "Vocabulary output file")->required();
  bv->add_option("--min-count", o.min_count, "Minimum token frequency")->capture_default_str()->check(CLI::PositiveNumber);
  bv->add_option("--max-size", o.max_size, "Maximum non-reserved tokens (0 = unlimited)")
      ->capture_default_str()
      ->check(CLI::NonNegativeNumber);

  auto* sy = app.add_subcommand("synth", "Write a synthetic dull/diverse corpus");
  sy->add_option("--out", o.out, "Corpus output file")->required();
  sy->add_option("--num-examples", o.num_examples, "Number of examples")->capture_default_str()->check(CLI::PositiveNumber);
  sy->add_option("--dull-fraction", o.dull_fraction, "Probability of the dull response")->capture_default_str();
  sy->add_option("--seed", o.seed, "Random seed (default 1)");

  auto* tr = app.add_subcommand("train", "Train a model");
  tr->add_option("--config", o.config, "Training config file (key = value)")->required();
  tr->add_option("--corpus", o.corpus, "Training corpus")->required();
  tr->add_option("--vocab", o.vocab, "Vocabulary file")->required();
  tr->add_option("--checkpoint", o.checkpoint, "Output checkpoint directory")->required();
  tr->add_option("--objective", o.objective, "ml, minavgout, lft, rl or hybrid (overrides the config)");
  tr->add_option("--seed", o.seed, "Random seed (overrides the config)");

  auto* ge = app.add_subcommand("generate", "Generate responses from a checkpoint");
  ge->add_option("--checkpoint", o.checkpoint, "Checkpoint directory")->required();
  ge->add_option("--source", o.source, "One context per line")->required();
  ge->add_option("--out", o.out, "Response output file")->required();
  ge->add_option("--mode", o.mode, "greedy or sample")->capture_default_str();
  ge->add_option("--lft-score", o.lft_score, "Diversity label score (LFT checkpoints only)");
  ge->add_option("--seed", o.seed, "Sampling seed (default 0)");

  auto* ev = app.add_subcommand("evaluate", "Diversity and F1 metrics over a response file");
  ev->add_option("--responses", o.responses, "Model responses, one per line");
  ev->add_option("--references", o.references, "Gold responses, one per line");
  ev->add_option("--activities", o.activities, "Activity lexicon");
  ev->add_option("--entities", o.entities, "Entity lexicon");
  ev->add_option("--report", o.report, "Report JSON path");
  ev->add_option("--out", o.out, "Directory for Diversity-32 curve CSVs");

  auto* sc = app.add_subcommand("score", "Discrete AvgOut score of a token sequence");
  sc->add_option("--avgout", o.avgout, "AvgOut export (avgout.json)")->required();
  sc->add_option("--tokens", o.tokens, "Space-separated tokens")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      out << app.help();
      return kExitOk;
    }
    err << "error: " << e.what() << "\n\n" << app.help();
    return kExitUsage;
  }

  auto* sub = app.get_subcommands().front();
  print_resolved(out, *sub);
  try {
    if (sub == bv) return build_vocab(o, out, err);
    if (sub == sy) return synth(o, out);
    if (sub == tr) return train_cmd(o, out);
    if (sub == ge) return generate_cmd(o, out);
    if (sub == ev) return evaluate_cmd(o, out);
    return score_cmd(o, out);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n\n" << sub->help();
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
}

}  // namespace divseq::cli
