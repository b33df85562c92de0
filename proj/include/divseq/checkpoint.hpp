// Copyright 2026 The divseq Authors. All Rights Reserved.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>

#include "divseq/avgout.hpp"
#include "divseq/config.hpp"
#include "divseq/corpus.hpp"
#include "divseq/losses.hpp"
#include "divseq/model.hpp"
#include "divseq/optimizer.hpp"

namespace divseq {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct BestEval {
  Index step = 0;
  double dev_ml = 0.0;
};

/// Mutable training state. Tracker and baseline round-trip bit-exactly.
struct TrainState {
  Seq2SeqParams<double> params;
  AdamState<double> optimizer;
  AvgOutTracker<double> tracker;
  RewardBaseline<double> baseline;
  Index step = 0;
  Index skipped_samples = 0;
  std::optional<BestEval> best_eval;
};

struct Checkpoint {
  ModelConfig model;
  TrainConfig train;
  Vocabulary vocab;
  TrainState state;
};

/// Directory layout: manifest.json, params.bin, optimizer_m.bin,
/// optimizer_v.bin, vocab.txt,
/// avgout.json.
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& dir);
Checkpoint load_checkpoint(const std::filesystem::path& dir);

void write_parameters(const Seq2SeqParams<double>& params, const std::filesystem::path& path);
void read_parameters(Seq2SeqParams<double>& params, const std::filesystem::path& path);

/// Standalone D export with the vocabulary tokens alongside.
struct AvgOutExport {
  AvgOutTracker<double> tracker;
  std::vector<std::string> tokens;
};
void write_avgout_json(const AvgOutTracker<double>& tracker, const Vocabulary& vocab,
                       const std::filesystem::path& path);
AvgOutExport read_avgout_json(const std::filesystem::path& path);

}  // namespace divseq
