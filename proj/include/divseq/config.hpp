// Copyright 2026 The divseq Authors. All Rights Reserved.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <set>
#include <stdexcept>
#include <string>

#include "divseq/losses.hpp"
#include "divseq/model.hpp"

namespace divseq {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class AvgOutSource { teacher_forced, free_running };

/// Training configuration. Keys in the flat `key = value` file format are the
/// field names with '-' separators (see `config_keys()`).
struct TrainConfig {
  Objective objective = Objective::ml;
  LossWeights weights;
  double gamma = 0.01;
  double baseline_decay = 0.01;
  Index epochs = 10;
  Index batch_size = 32;
  double learning_rate = 1e-3;
  double gradient_clip_norm = 5.0;
  std::uint64_t seed = 1;
  Index checkpoint_interval = 0;  // steps; 0 keeps only the final checkpoint
  Index eval_interval = 0;        // steps; 0 disables periodic evaluation
  Index holdout_size = 0;         // trailing examples held out for evaluation
  double lft_inference_score = 0.015;
  AvgOutSource avgout_source = AvgOutSource::teacher_forced;

  Index embedding_dim = 256;
  Index encoder_hidden = 256;
  Index decoder_hidden = 512;
  Index attention_dim = 256;
  double init_range = 0.08;
  Index max_source_len = 128;
  Index max_target_len = 32;
  double sample_temperature = 1.0;

  ModelConfig model_config(Index vocab_size) const;
  LengthCaps caps() const { return {max_source_len, max_target_len}; }
  void validate() const;
};

const std::set<std::string>& config_keys();

/// Parses `key = value` lines; '#' starts a comment. Keys seen are added to
/// `present` when given.
TrainConfig parse_train_config(const std::string& text, std::set<std::string>* present = nullptr);
TrainConfig load_train_config(const std::filesystem::path& path, std::set<std::string>* present = nullptr);

/// Canonical text form, one `key = value` per line in `config_keys()` order.
std::string to_text(const TrainConfig& cfg);

/// The weight key the objective reads (alpha, beta or hybrid-shared), if any.
std::string objective_weight_key(Objective o);

/// Throws ConfigError naming the objective's weight key when it is absent.
void require_objective_keys(Objective o, const std::set<std::string>& present);

}  // namespace divseq
