// Copyright 2026 The divseq Authors. All Rights Reserved.
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <limits>

#include "divseq/trainer.hpp"
#include "doctest.h"
#include "support.hpp"

using namespace divseq;
using divseq::testing::read_file;
using divseq::testing::TempDir;
using divseq::testing::write_file;

namespace {

TrainConfig small_config(Objective objective) {
  TrainConfig c;
  c.objective = objective;
  c.epochs = 2;
  c.batch_size = 4;
  c.embedding_dim = 8;
  c.encoder_hidden = 8;
  c.decoder_hidden = 16;
  c.attention_dim = 8;
  c.max_target_len = 8;
  c.seed = 5;
  return c;
}

struct SmallCorpus {
  TempDir dir;
  Vocabulary vocab;
  std::vector<DialogueExample> examples;

  SmallCorpus() {
    generate_synthetic_corpus(24, 0.5, 3, dir / "c.txt");
    vocab = build_vocabulary(dir / "c.txt", 1, 0);
    vocab.save(dir / "vocab.txt");
    examples = load_examples(dir / "c.txt", vocab, LengthCaps{128, 8});
  }
};

std::vector<std::string> lines_of(const std::string& text) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (start < text.size()) {
    auto end = text.find('\n', start);
    out.push_back(text.substr(start, end - start));
    start = end + 1;
  }
  return out;
}

std::vector<double> csv_fields(const std::string& line) {
  std::vector<double> out;
  std::size_t start = 0;
  while (start <= line.size()) {
    auto end = line.find(',', start);
    if (end == std::string::npos) end = line.size();
    out.push_back(std::stod(line.substr(start, end - start)));
    start = end + 1;
  }
  return out;
}

}  // namespace

TEST_CASE("ML with zero diversity weights logs zero L_B and L_RL columns") {
  SmallCorpus c;
  auto cfg = small_config(Objective::ml);
  cfg.weights = {0.0, 0.0, 0.0};
  Trainer t(cfg, c.vocab);
  auto records = t.run(c.examples, {}, c.dir / "run");
  CHECK(records.size() == 12);
  auto lines = lines_of(read_file(c.dir / "run" / "train_log.csv"));
  REQUIRE(lines.size() == 13);
  CHECK(lines[0] == kTrainLogHeader);
  for (std::size_t i = 1; i < lines.size(); ++i) {
    auto f = csv_fields(lines[i]);
    REQUIRE(f.size() == 8);
    CHECK(f[0] == static_cast<double>(i));
    CHECK(f[2] == 0.0);
    CHECK(f[3] == 0.0);
    CHECK(f[4] == f[1]);
  }
}

TEST_CASE("logged totals equal the sum of their terms") {
  SmallCorpus c;
  for (auto o : {Objective::minavgout, Objective::rl, Objective::hybrid, Objective::lft}) {
    Trainer t(small_config(o), c.vocab);
    for (const auto& r : t.run(c.examples)) {
      CHECK(std::abs(r.loss.total - (r.loss.ml + r.loss.b_loss + r.loss.rl)) <= 1e-6);
      CHECK(std::isfinite(r.loss.total));
    }
    CHECK(t.state().tracker.update_count() == 12);
  }
}

TEST_CASE("training is a deterministic function of config and seed") {
  SmallCorpus c;
  auto cfg = small_config(Objective::hybrid);
  TrainConfig other = cfg;
  other.seed = 6;
  Trainer a(cfg, c.vocab), b(cfg, c.vocab), d(other, c.vocab);
  a.run(c.examples, {}, c.dir / "a");
  b.run(c.examples, {}, c.dir / "b");
  d.run(c.examples, {}, c.dir / "d");
  for (const char* f : {"train_log.csv", "params.bin", "optimizer_m.bin", "optimizer_v.bin", "avgout.json", "manifest.json"})
    CHECK(read_file(c.dir / "a" / f) == read_file(c.dir / "b" / f));
  CHECK(read_file(c.dir / "a" / "train_log.csv") != read_file(c.dir / "d" / "train_log.csv"));
}

TEST_CASE("a reloaded checkpoint evaluates and responds identically") {
  SmallCorpus c;
  Trainer t(small_config(Objective::minavgout), c.vocab);
  t.run(c.examples, {}, c.dir / "run");
  Trainer back(load_checkpoint(c.dir / "run"));
  CHECK(back.example_ml_losses(c.examples) == t.example_ml_losses(c.examples));
  std::vector<TokenSeq> sources;
  for (const auto& e : c.examples) sources.push_back(e.source);
  CHECK(back.respond(sources) == t.respond(sources));
  CHECK(back.state().tracker.distribution() == t.state().tracker.distribution());
  CHECK(back.state().step == t.state().step);
}

TEST_CASE("resuming from a mid-run checkpoint matches an uninterrupted run") {
  SmallCorpus c;
  for (auto o : {Objective::ml, Objective::hybrid}) {
    auto full_cfg = small_config(o);
    Trainer full(full_cfg, c.vocab);
    auto full_records = full.run(c.examples);

    auto half_cfg = full_cfg;
    half_cfg.epochs = 1;
    Trainer half(half_cfg, c.vocab);
    half.run(c.examples, {}, c.dir / "half");
    auto ckpt = load_checkpoint(c.dir / "half");
    CHECK(ckpt.state.tracker.update_count() == 6);
    ckpt.train.epochs = 2;
    Trainer resumed(std::move(ckpt));
    auto rest = resumed.run(c.examples, {}, c.dir / "half");
    REQUIRE(rest.size() == 6);
    for (std::size_t i = 0; i < rest.size(); ++i) {
      CHECK(rest[i].step == full_records[6 + i].step);
      CHECK(rest[i].loss.total == full_records[6 + i].loss.total);
    }
    CHECK(resumed.state().tracker.update_count() == 12);
    CHECK(resumed.state().params.flatten() == full.state().params.flatten());
    CHECK(lines_of(read_file(c.dir / "half" / "train_log.csv")).size() == 13);
  }
}

TEST_CASE("periodic evaluation writes an eval log and keeps the best checkpoint") {
  SmallCorpus c;
  auto cfg = small_config(Objective::ml);
  cfg.eval_interval = 3;
  cfg.checkpoint_interval = 6;
  Trainer t(cfg, c.vocab);
  std::vector<DialogueExample> train(c.examples.begin(), c.examples.end() - 4), holdout(c.examples.end() - 4, c.examples.end());
  t.run(train, holdout, c.dir / "run");
  auto lines = lines_of(read_file(c.dir / "run" / "eval_log.csv"));
  CHECK(lines.front() == "step,dev_ml,distinct_1,iauc_1");
  CHECK(lines.size() == 1 + 10 / 3);
  CHECK(std::filesystem::exists(c.dir / "run" / "step-6" / "params.bin"));
  CHECK(std::filesystem::exists(c.dir / "run" / "best" / "params.bin"));
  REQUIRE(t.state().best_eval.has_value());
}

TEST_CASE("greedy generation is reproducible and empty input gives empty output") {
  SmallCorpus c;
  auto cfg = small_config(Objective::ml);
  TrainPaths paths{c.dir / "c.txt", c.dir / "vocab.txt", c.dir / "ckpt"};
  train(cfg, paths);
  generate(c.dir / "ckpt", c.dir / "c.txt", DecodeMode::greedy, std::nullopt, 0, c.dir / "g1.txt");
  generate(c.dir / "ckpt", c.dir / "c.txt", DecodeMode::greedy, std::nullopt, 0, c.dir / "g2.txt");
  CHECK(read_file(c.dir / "g1.txt") == read_file(c.dir / "g2.txt"));
  CHECK(lines_of(read_file(c.dir / "g1.txt")).size() == 24);

  generate(c.dir / "ckpt", c.dir / "c.txt", DecodeMode::sample, std::nullopt, 9, c.dir / "s1.txt");
  generate(c.dir / "ckpt", c.dir / "c.txt", DecodeMode::sample, std::nullopt, 9, c.dir / "s2.txt");
  CHECK(read_file(c.dir / "s1.txt") == read_file(c.dir / "s2.txt"));

  write_file(c.dir / "empty.txt", "");
  generate(c.dir / "ckpt", c.dir / "empty.txt", DecodeMode::greedy, std::nullopt, 0, c.dir / "e.txt");
  CHECK(read_file(c.dir / "e.txt").empty());

  CHECK_THROWS(generate(c.dir / "ckpt", c.dir / "c.txt", DecodeMode::greedy, 0.5, 0, c.dir / "x.txt"));
}

TEST_CASE("an LFT checkpoint accepts an explicit inference score") {
  SmallCorpus c;
  Trainer t(small_config(Objective::lft), c.vocab);
  t.run(c.examples);
  std::vector<TokenSeq> sources = {c.examples[0].source, c.examples[1].source};
  CHECK(t.respond(sources) == t.respond(sources, false, 0, t.config().lft_inference_score));
  CHECK(t.respond(sources, false, 0, 0.5).size() == 2);
  Trainer plain(small_config(Objective::ml), c.vocab);
  CHECK_THROWS_AS(plain.respond(sources, false, 0, 0.5), TrainingError);
}

TEST_CASE("the holdout must leave examples to train on") {
  SmallCorpus c;
  auto cfg = small_config(Objective::ml);
  cfg.holdout_size = 24;
  CHECK_THROWS(train(cfg, {c.dir / "c.txt", c.dir / "vocab.txt", c.dir / "out"}));
}

TEST_CASE("a non-finite loss aborts and dumps the batch") {
  SmallCorpus c;
  Trainer t(small_config(Objective::ml), c.vocab);
  auto ckpt = t.checkpoint();
  ckpt.state.params.output_bias(5) = std::numeric_limits<double>::quiet_NaN();
  Trainer broken(std::move(ckpt));
  CHECK_THROWS_AS(broken.run(c.examples, {}, c.dir / "nan"), TrainingError);
  CHECK(std::filesystem::exists(c.dir / "nan" / "nonfinite_step_0.json"));
}

TEST_CASE("free-running AvgOut accumulation trains") {
  SmallCorpus c;
  auto cfg = small_config(Objective::minavgout);
  cfg.avgout_source = AvgOutSource::free_running;
  Trainer t(cfg, c.vocab);
  auto records = t.run(c.examples);
  CHECK(records.size() == 12);
  CHECK(t.state().tracker.update_count() == 12);
  CHECK(std::abs(t.state().tracker.distribution().sum() - 1.0) <= 1e-9);
}
