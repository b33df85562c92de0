// Copyright 2026 The divseq Authors. All Rights Reserved.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <functional>
#include <fstream>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "divseq/checkpoint.hpp"
#include "divseq/config.hpp"
#include "divseq/corpus.hpp"
#include "divseq/losses.hpp"
#include "divseq/metrics.hpp"

namespace divseq {

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct StepRecord {
  Index step = 0;
  LossBreakdown loss;
};

/// One CSV row: step,L_ML,L_B,L_RL,total,B_c,B_d,R_b
std::string format_log_row(const StepRecord& record);
inline const char* kTrainLogHeader = "step,L_ML,L_B,L_RL,total,B_c,B_d,R_b";

struct EvalRecord {
  Index step = 0;
  double dev_ml = 0.0;
  double distinct_1 = 0.0;
  double iauc_1 = 0.0;
};

/// Owns the parameters, tracker and baseline of a single training run.
class Trainer {
 public:
  Trainer(TrainConfig config, Vocabulary vocab);
  /// Continues from a checkpoint; tracker, baseline and optimizer resume.
  explicit Trainer(Checkpoint checkpoint);

  /// One optimization step on `batch`; updates the tracker and baseline
  /// after the loss has been formed.
  StepRecord step(const PaddedBatch& batch);

  /// Runs `config.epochs` epochs over `examples` (continuing from the current
  /// step). When `out_dir` is set the log, periodic checkpoints and the final
  /// checkpoint go there.
  std::vector<StepRecord> run(const std::vector<DialogueExample>& examples,
                              const std::vector<DialogueExample>& holdout = {},
                              const std::optional<std::filesystem::path>& out_dir = std::nullopt);

  EvalRecord evaluate(const std::vector<DialogueExample>& holdout) const;

  /// Greedy (or sampled) responses; LFT models use `lft_score` or the
  /// configured inference score.
  std::vector<TokenSeq> respond(const std::vector<TokenSeq>& sources, bool sample = false, std::uint64_t seed = 0,
                                std::optional<double> lft_score = std::nullopt) const;

  /// Teacher-forced L_ML per example (LFT models see their ground-truth score).
  std::vector<double> example_ml_losses(const std::vector<DialogueExample>& examples) const;

  Checkpoint checkpoint() const;
  const TrainState& state() const { return state_; }
  const TrainConfig& config() const { return config_; }
  const ModelConfig& model_config() const { return model_; }
  const Vocabulary& vocab() const { return vocab_; }

 private:
  Index batches_per_epoch(Index n) const;

  TrainConfig config_;
  ModelConfig model_;
  Vocabulary vocab_;
  TrainState state_;
  std::optional<std::filesystem::path> dump_dir_;
};

/// Response generation over `sources` for an arbitrary checkpointed model.
std::vector<TokenSeq> generate_responses(const Checkpoint& ckpt, const std::vector<TokenSeq>& sources, bool sample,
                                         std::uint64_t seed, std::optional<double> lft_score);

struct TrainPaths {
  std::filesystem::path corpus;
  std::filesystem::path vocab;
  std::filesystem::path out_dir;
};

/// Loads the corpus, trains, writes `out_dir`/{train_log.csv, manifest.json,
/// params.bin, ...}. Returns the final checkpoint.
Checkpoint train(const TrainConfig& config, const TrainPaths& paths);

enum class DecodeMode { greedy, sample };

/// One response line per source line. Source lines may be corpus lines, in
/// which case only the context before the tab is used. Blank lines yield blank
/// responses.
void generate(const std::filesystem::path& checkpoint_dir, const std::filesystem::path& source_path, DecodeMode mode,
              std::optional<double> lft_score, std::uint64_t seed, const std::filesystem::path& out_path);

}  // namespace divseq
