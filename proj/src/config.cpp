// Copyright 2026 The divseq Authors. All Rights Reserved.
// SPDX-License-Identifier: Apache-2.0

#include "divseq/config.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <vector>

#include "divseq/corpus.hpp"

namespace divseq {

namespace {

const std::vector<std::string> kKeyOrder = {
    "objective",       "alpha",           "beta",           "hybrid-shared",      "gamma",
    "baseline-decay",  "epochs",          "batch-size",     "learning-rate",      "gradient-clip-norm",
    "seed",            "checkpoint-interval", "eval-interval", "holdout-size",    "lft-inference-score",
    "avgout-source",   "embedding-dim",   "encoder-hidden", "decoder-hidden",     "attention-dim",
    "init-range",      "max-source-len",  "max-target-len", "sample-temperature"};

std::string trim(const std::string& s) {
  auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

double to_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    double d = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw ConfigError("key '" + key + "' expects a number, got '" + v + "'");
  }
}

long long to_integer(const std::string& key, const std::string& v) {
  long long out = 0;
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size())
    throw ConfigError("key '" + key + "' expects an integer, got '" + v + "'");
  return out;
}

std::string fmt_double(double d) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", d);
  return buf;
}

}  // namespace

const std::set<std::string>& config_keys() {
  static const std::set<std::string> keys(kKeyOrder.begin(), kKeyOrder.end());
  return keys;
}

ModelConfig TrainConfig::model_config(Index vocab_size) const {
  ModelConfig m;
  m.vocab_size = vocab_size;
  m.embedding_dim = embedding_dim;
  m.encoder_hidden = encoder_hidden;
  m.decoder_hidden = decoder_hidden;
  m.attention_dim = attention_dim;
  m.diversity_label = objective == Objective::lft;
  return m;
}

void TrainConfig::validate() const {
  weights.validate();
  if (!(gamma > 0.0 && gamma <= 1.0)) throw ConfigError("gamma must lie in (0, 1]");
  if (!(baseline_decay > 0.0 && baseline_decay <= 1.0)) throw ConfigError("baseline-decay must lie in (0, 1]");
  if (epochs < 0) throw ConfigError("epochs must be non-negative");
  if (batch_size < 1) throw ConfigError("batch-size must be at least 1");
  if (!(learning_rate > 0.0)) throw ConfigError("learning-rate must be positive");
  if (!(gradient_clip_norm >= 0.0)) throw ConfigError("gradient-clip-norm must be non-negative");
  if (checkpoint_interval < 0 || eval_interval < 0 || holdout_size < 0)
    throw ConfigError("intervals and holdout-size must be non-negative");
  if (!std::isfinite(lft_inference_score)) throw ConfigError("lft-inference-score must be finite");
  if (embedding_dim < 1 || encoder_hidden < 1 || decoder_hidden < 1 || attention_dim < 1)
    throw ConfigError("model dimensions must be positive");
  if (!(init_range > 0.0)) throw ConfigError("init-range must be positive");
  if (max_source_len < 1 || max_target_len < 2) throw ConfigError("length caps too small");
  if (!(sample_temperature > 0.0)) throw ConfigError("sample-temperature must be positive");
}

TrainConfig parse_train_config(const std::string& text, std::set<std::string>* present) {
  TrainConfig cfg;
  std::istringstream in(text);
  std::string line;
  int number = 0;
  while (std::getline(in, line)) {
    ++number;
    auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(number) + ": expected key = value");
    auto key = trim(line.substr(0, eq));
    auto value = trim(line.substr(eq + 1));
    if (!config_keys().count(key)) throw ConfigError("unknown config key '" + key + "'");
    if (value.empty()) throw ConfigError("config key '" + key + "' has no value");
    if (present) present->insert(key);

    if (key == "objective") {
      try {
        cfg.objective = parse_objective(value);
      } catch (const LossError& e) {
        throw ConfigError(e.what());
      }
    } else if (key == "alpha") cfg.weights.alpha = to_double(key, value);
    else if (key == "beta") cfg.weights.beta = to_double(key, value);
    else if (key == "hybrid-shared") cfg.weights.hybrid_shared = to_double(key, value);
    else if (key == "gamma") cfg.gamma = to_double(key, value);
    else if (key == "baseline-decay") cfg.baseline_decay = to_double(key, value);
    else if (key == "epochs") cfg.epochs = to_integer(key, value);
    else if (key == "batch-size") cfg.batch_size = to_integer(key, value);
    else if (key == "learning-rate") cfg.learning_rate = to_double(key, value);
    else if (key == "gradient-clip-norm") cfg.gradient_clip_norm = to_double(key, value);
    else if (key == "seed") cfg.seed = static_cast<std::uint64_t>(to_integer(key, value));
    else if (key == "checkpoint-interval") cfg.checkpoint_interval = to_integer(key, value);
    else if (key == "eval-interval") cfg.eval_interval = to_integer(key, value);
    else if (key == "holdout-size") cfg.holdout_size = to_integer(key, value);
    else if (key == "lft-inference-score") cfg.lft_inference_score = to_double(key, value);
    else if (key == "avgout-source") {
      if (value == "teacher-forced") cfg.avgout_source = AvgOutSource::teacher_forced;
      else if (value == "free-running") cfg.avgout_source = AvgOutSource::free_running;
      else throw ConfigError("avgout-source must be teacher-forced or free-running");
    } else if (key == "embedding-dim") cfg.embedding_dim = to_integer(key, value);
    else if (key == "encoder-hidden") cfg.encoder_hidden = to_integer(key, value);
    else if (key == "decoder-hidden") cfg.decoder_hidden = to_integer(key, value);
    else if (key == "attention-dim") cfg.attention_dim = to_integer(key, value);
    else if (key == "init-range") cfg.init_range = to_double(key, value);
    else if (key == "max-source-len") cfg.max_source_len = to_integer(key, value);
    else if (key == "max-target-len") cfg.max_target_len = to_integer(key, value);
    else if (key == "sample-temperature") cfg.sample_temperature = to_double(key, value);
  }
  cfg.validate();
  return cfg;
}

TrainConfig load_train_config(const std::filesystem::path& path, std::set<std::string>* present) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_train_config(ss.str(), present);
}

std::string to_text(const TrainConfig& c) {
  std::ostringstream out;
  auto put = [&](const std::string& k, const std::string& v) { out << k << " = " << v << '\n'; };
  put("objective", std::string(to_string(c.objective)));
  put("alpha", fmt_double(c.weights.alpha));
  put("beta", fmt_double(c.weights.beta));
  put("hybrid-shared", fmt_double(c.weights.hybrid_shared));
  put("gamma", fmt_double(c.gamma));
  put("baseline-decay", fmt_double(c.baseline_decay));
  put("epochs", std::to_string(c.epochs));
  put("batch-size", std::to_string(c.batch_size));
  put("learning-rate", fmt_double(c.learning_rate));
  put("gradient-clip-norm", fmt_double(c.gradient_clip_norm));
  put("seed", std::to_string(c.seed));
  put("checkpoint-interval", std::to_string(c.checkpoint_interval));
  put("eval-interval", std::to_string(c.eval_interval));
  put("holdout-size", std::to_string(c.holdout_size));
  put("lft-inference-score", fmt_double(c.lft_inference_score));
  put("avgout-source", c.avgout_source == AvgOutSource::teacher_forced ? "teacher-forced" : "free-running");
  put("embedding-dim", std::to_string(c.embedding_dim));
  put("encoder-hidden", std::to_string(c.encoder_hidden));
  put("decoder-hidden", std::to_string(c.decoder_hidden));
  put("attention-dim", std::to_string(c.attention_dim));
  put("init-range", fmt_double(c.init_range));
  put("max-source-len", std::to_string(c.max_source_len));
  put("max-target-len", std::to_string(c.max_target_len));
  put("sample-temperature", fmt_double(c.sample_temperature));
  return out.str();
}

std::string objective_weight_key(Objective o) {
  switch (o) {
    case Objective::minavgout: return "alpha";
    case Objective::rl: return "beta";
    case Objective::hybrid: return "hybrid-shared";
    default: return {};
  }
}

void require_objective_keys(Objective o, const std::set<std::string>& present) {
  auto key = objective_weight_key(o);
  if (!key.empty() && !present.count(key))
    throw ConfigError("missing config key '" + key + "' required by objective " + std::string(to_string(o)));
}

}  // namespace divseq
