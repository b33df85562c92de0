// Copyright 2026 The divseq Authors. All Rights Reserved.
// SPDX-License-Identifier: Apache-2.0

#include "divseq/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <random>

#include "json.hpp"

namespace divseq {

namespace {

constexpr Index kInferenceBatch = 64;

std::uint64_t derived_seed(std::uint64_t seed, std::uint64_t salt, std::uint64_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(salt), static_cast<std::uint32_t>(index),
                    static_cast<std::uint32_t>(index >> 32)};
  std::uint32_t words[2];
  seq.generate(words, words + 2);
  return (static_cast<std::uint64_t>(words[0]) << 32) | words[1];
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::vector<Response> to_responses(const Vocabulary& vocab, const std::vector<TokenSeq>& seqs) {
  std::vector<Response> out;
  out.reserve(seqs.size());
  for (const auto& s : seqs) out.push_back(vocab.decode(s));
  return out;
}

double metric_or_zero(const std::function<double()>& f) {
  try {
    return f();
  } catch (const MetricsError&) {
    return 0.0;
  }
}

TokenSeq row_tokens(const TokenMatrix& m, const MaskMatrix* mask, Index b, Index len) {
  TokenSeq out;
  for (Index t = 0; t < len; ++t)
    if (!mask || (*mask)(b, t)) out.push_back(m(b, t));
  return out;
}

void write_dump(const std::filesystem::path& path, Index step, const PaddedBatch& batch, const LossBreakdown& lb) {
  nlohmann::ordered_json j;
  j["step"] = step;
  j["loss"] = {{"L_ML", lb.ml}, {"L_B", lb.b_loss}, {"L_RL", lb.rl},  {"total", lb.total},
               {"B_c", lb.b_c}, {"B_d", lb.b_d},    {"R", lb.reward}, {"R_b", lb.reward_baseline}};
  j["example_ids"] = batch.example_ids;
  auto& rows = j["rows"] = nlohmann::ordered_json::array();
  for (Index b = 0; b < batch.rows(); ++b) {
    rows.push_back({{"source", row_tokens(batch.source, nullptr, b, batch.source_lengths[static_cast<std::size_t>(b)])},
                    {"target", row_tokens(batch.target, &batch.target_mask, b, batch.target.cols())}});
  }
  std::ofstream out(path);
  // nan/inf serialize as null in JSON; the message below carries the raw values
  out << j.dump(2) << "\n";
}

}  // namespace

std::string format_log_row(const StepRecord& r) {
  const auto& l = r.loss;
  return std::to_string(r.step) + "," + fmt(l.ml) + "," + fmt(l.b_loss) + "," + fmt(l.rl) + "," + fmt(l.total) + "," +
         fmt(l.b_c) + "," + fmt(l.b_d) + "," + fmt(l.reward_baseline);
}

Trainer::Trainer(TrainConfig config, Vocabulary vocab) : config_(std::move(config)), vocab_(std::move(vocab)) {
  config_.validate();
  model_ = config_.model_config(vocab_.size());
  state_.params = Seq2SeqParams<double>::random_uniform(model_, config_.init_range, config_.seed);
  state_.optimizer = AdamState<double>::zeros_like(state_.params);
  state_.tracker = AvgOutTracker<double>(content_support<double>(vocab_.size()), config_.gamma);
  state_.baseline = RewardBaseline<double>(config_.baseline_decay);
}

Trainer::Trainer(Checkpoint ckpt)
    : config_(std::move(ckpt.train)), model_(ckpt.model), vocab_(std::move(ckpt.vocab)), state_(std::move(ckpt.state)) {
  config_.validate();
  if (!(model_ == config_.model_config(vocab_.size())))
    throw TrainingError("checkpoint model does not match its training configuration");
}

Index Trainer::batches_per_epoch(Index n) const { return (n + config_.batch_size - 1) / config_.batch_size; }

StepRecord Trainer::step(const PaddedBatch& batch) {
  ObjectiveOptions opts;
  opts.objective = config_.objective;
  opts.weights = config_.weights;
  opts.sample_max_len = config_.max_target_len;
  opts.sample_temperature = config_.sample_temperature;

  std::mt19937_64 rng(derived_seed(config_.seed, 0x5a3d, static_cast<std::uint64_t>(state_.step)));
  StepResult<double> result;
  PaddedBatch labelled;
  const PaddedBatch* forward_batch = &batch;
  std::string cause;
  try {
    switch (config_.objective) {
      case Objective::lft:
        result = lft_step_loss(state_.params, model_, batch, state_.tracker, opts);
        labelled = prepend_diversity_label(batch, result.label_scores, model_);
        forward_batch = &labelled;
        break;
      case Objective::hybrid:
        result = hybrid_step_loss(state_.params, batch, state_.tracker, state_.baseline, opts, &rng);
        break;
      default:
        result = objective_step(state_.params, batch, state_.tracker, state_.baseline.value(), opts, &rng);
    }
  } catch (const AvgOutError& e) {
    if (state_.params.flatten().allFinite()) throw;
    cause = std::string("; ") + e.what();
    result.breakdown.ml = result.breakdown.total = std::numeric_limits<double>::quiet_NaN();
  }
  auto& lb = result.breakdown;
  if (config_.objective == Objective::lft && !result.label_scores.empty()) {
    double sum = 0.0;
    for (double s : result.label_scores) sum += s;
    lb.b_d = sum / static_cast<double>(result.label_scores.size());
  }

  if (!std::isfinite(lb.total)) {
    std::string where;
    if (dump_dir_) {
      std::filesystem::create_directories(*dump_dir_);
      auto path = *dump_dir_ / ("nonfinite_step_" + std::to_string(state_.step) + ".json");
      write_dump(path, state_.step, batch, lb);
      where = "; batch dumped to " + path.string();
    }
    throw TrainingError("non-finite loss at step " + std::to_string(state_.step) + " (L_ML=" + fmt(lb.ml) +
                        " L_B=" + fmt(lb.b_loss) + " L_RL=" + fmt(lb.rl) + " total=" + fmt(lb.total) + ")" + cause + where);
  }

  if (config_.avgout_source == AvgOutSource::free_running) {
    auto enc = encode(state_.params, *forward_batch);
    std::vector<Matrix<double>> dists;
    MaskMatrix mask;
    decode_greedy(state_.params, enc, config_.max_target_len, &dists, &mask);
    state_.tracker.update(summarize_batch(dists, mask, state_.tracker.support()));
  } else {
    state_.tracker.update(result.summary);
  }
  if (needs_samples(config_.objective) && static_cast<Index>(result.samples.size()) > result.skipped_samples)
    state_.baseline.update(lb.reward);
  state_.skipped_samples += result.skipped_samples;

  auto& grad = *result.gradient;
  clip_gradient_norm(grad, config_.gradient_clip_norm);
  adam_update(state_.params, grad, state_.optimizer, config_.learning_rate);
  ++state_.step;
  return {state_.step, lb};
}

std::vector<StepRecord> Trainer::run(const std::vector<DialogueExample>& examples,
                                     const std::vector<DialogueExample>& holdout,
                                     const std::optional<std::filesystem::path>& out_dir) {
  if (examples.empty()) throw TrainingError("no training examples");
  const Index per_epoch = batches_per_epoch(static_cast<Index>(examples.size()));
  const Index total = per_epoch * config_.epochs;

  std::ofstream log, eval_log;
  if (out_dir) {
    std::filesystem::create_directories(*out_dir);
    dump_dir_ = *out_dir;
    const auto log_path = *out_dir / "train_log.csv";
    const bool resume = state_.step > 0 && std::filesystem::exists(log_path);
    log.open(log_path, resume ? std::ios::app : std::ios::trunc);
    if (!log) throw TrainingError("cannot write " + log_path.string());
    if (!resume) log << kTrainLogHeader << "\n";
    if (config_.eval_interval > 0 && !holdout.empty()) {
      const auto eval_path = *out_dir / "eval_log.csv";
      const bool eval_resume = resume && std::filesystem::exists(eval_path);
      eval_log.open(eval_path, eval_resume ? std::ios::app : std::ios::trunc);
      if (!eval_resume) eval_log << "step,dev_ml,distinct_1,iauc_1\n";
    }
  }

  std::vector<StepRecord> records;
  while (state_.step < total) {
    const Index epoch = state_.step / per_epoch;
    auto batches = make_batches(examples, config_.batch_size,
                                derived_seed(config_.seed, 0xe90c, static_cast<std::uint64_t>(epoch)));
    for (Index i = state_.step - epoch * per_epoch; i < per_epoch; ++i) {
      auto record = step(batches[static_cast<std::size_t>(i)]);
      if (log.is_open()) log << format_log_row(record) << "\n";
      records.push_back(record);

      if (out_dir && config_.checkpoint_interval > 0 && state_.step % config_.checkpoint_interval == 0)
        save_checkpoint(checkpoint(), *out_dir / ("step-" + std::to_string(state_.step)));
      if (config_.eval_interval > 0 && !holdout.empty() && state_.step % config_.eval_interval == 0) {
        auto eval = evaluate(holdout);
        if (eval_log.is_open())
          eval_log << eval.step << "," << fmt(eval.dev_ml) << "," << fmt(eval.distinct_1) << "," << fmt(eval.iauc_1)
                   << "\n";
        if (!state_.best_eval || eval.dev_ml < state_.best_eval->dev_ml) {
          state_.best_eval = BestEval{eval.step, eval.dev_ml};
          if (out_dir) save_checkpoint(checkpoint(), *out_dir / "best");
        }
      }
    }
  }
  if (out_dir) {
    log.flush();
    save_checkpoint(checkpoint(), *out_dir);
  }
  return records;
}

std::vector<double> Trainer::example_ml_losses(const std::vector<DialogueExample>& examples) const {
  std::vector<double> out;
  out.reserve(examples.size());
  for (auto batch : make_batches(examples, kInferenceBatch, 0, false)) {
    if (model_.diversity_label)
      batch = prepend_diversity_label(batch, ground_truth_scores(state_.tracker, batch), model_);
    auto enc = encode(state_.params, batch);
    auto tf = decode_teacher_forced(state_.params, enc, batch.target);
    for (Index b = 0; b < batch.rows(); ++b) {
      double loss = 0.0;
      for (Index t = 0; t < tf.length(); ++t) {
        if (!batch.target_mask(b, t)) continue;
        loss -= std::log(std::max(tf.distribution(t)(batch.target(b, t), b), 1e-12));
      }
      out.push_back(loss);
    }
  }
  return out;
}

EvalRecord Trainer::evaluate(const std::vector<DialogueExample>& holdout) const {
  if (holdout.empty()) throw TrainingError("empty evaluation set");
  EvalRecord r;
  r.step = state_.step;
  const auto losses = example_ml_losses(holdout);
  for (double l : losses) r.dev_ml += l;
  r.dev_ml /= static_cast<double>(losses.size());

  std::vector<TokenSeq> sources;
  for (const auto& ex : holdout) sources.push_back(ex.source);
  const auto responses = to_responses(vocab_, respond(sources));
  r.distinct_1 = metric_or_zero([&] { return distinct_n(responses, 1); });
  r.iauc_1 = metric_or_zero([&] { return inverted_auc(frequency_spectrum(responses, Granularity::unigram)); });
  return r;
}

std::vector<TokenSeq> Trainer::respond(const std::vector<TokenSeq>& sources, bool sample, std::uint64_t seed,
                                       std::optional<double> lft_score) const {
  if (lft_score && !model_.diversity_label) throw TrainingError("lft-score given for a model without the diversity label");
  const double score = lft_score.value_or(config_.lft_inference_score);
  std::vector<TokenSeq> out(sources.size());
  std::vector<std::size_t> pending;
  for (std::size_t i = 0; i < sources.size(); ++i)
    if (!sources[i].empty()) pending.push_back(i);

  std::mt19937_64 rng(seed);
  for (std::size_t begin = 0; begin < pending.size(); begin += kInferenceBatch) {
    const std::size_t end = std::min(pending.size(), begin + static_cast<std::size_t>(kInferenceBatch));
    std::vector<TokenSeq> chunk;
    for (std::size_t k = begin; k < end; ++k) {
      const auto& src = sources[pending[k]];
      const auto keep = std::min<std::size_t>(src.size(), static_cast<std::size_t>(config_.max_source_len));
      chunk.emplace_back(src.end() - static_cast<std::ptrdiff_t>(keep), src.end());
    }
    auto batch = source_batch(chunk);
    if (model_.diversity_label)
      batch = prepend_diversity_label(batch, std::vector<double>(chunk.size(), score), model_);
    auto enc = encode(state_.params, batch);
    if (sample) {
      auto drawn = decode_sampled(state_.params, enc, config_.max_target_len, rng, config_.sample_temperature);
      for (std::size_t k = begin; k < end; ++k) out[pending[k]] = drawn[k - begin].content();
    } else {
      auto greedy = decode_greedy(state_.params, enc, config_.max_target_len);
      for (std::size_t k = begin; k < end; ++k) out[pending[k]] = std::move(greedy[k - begin]);
    }
  }
  return out;
}

Checkpoint Trainer::checkpoint() const { return Checkpoint{model_, config_, vocab_, state_}; }

std::vector<TokenSeq> generate_responses(const Checkpoint& ckpt, const std::vector<TokenSeq>& sources, bool sample,
                                         std::uint64_t seed, std::optional<double> lft_score) {
  return Trainer(ckpt).respond(sources, sample, seed, lft_score);
}

Checkpoint train(const TrainConfig& config, const TrainPaths& paths) {
  auto vocab = Vocabulary::load(paths.vocab);
  auto examples = load_examples(paths.corpus, vocab, config.caps());
  if (config.holdout_size >= static_cast<Index>(examples.size()))
    throw TrainingError("holdout-size leaves no training examples");
  std::vector<DialogueExample> holdout(examples.end() - config.holdout_size, examples.end());
  examples.resize(examples.size() - static_cast<std::size_t>(config.holdout_size));
  Trainer trainer(config, std::move(vocab));
  trainer.run(examples, holdout, paths.out_dir);
  return trainer.checkpoint();
}

void generate(const std::filesystem::path& checkpoint_dir, const std::filesystem::path& source_path, DecodeMode mode,
              std::optional<double> lft_score, std::uint64_t seed, const std::filesystem::path& out_path) {
  auto ckpt = load_checkpoint(checkpoint_dir);
  if (lft_score && !ckpt.model.diversity_label)
    throw TrainingError("--lft-score given but the checkpoint was not trained with the diversity label");
  std::ifstream in(source_path);
  if (!in) throw TrainingError("cannot read " + source_path.string());
  std::vector<TokenSeq> sources;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const auto tab = line.find('\t');
    if (tab != std::string::npos) line.resize(tab);
    sources.push_back(ckpt.vocab.encode(split_tokens(line)));
  }
  Trainer trainer(std::move(ckpt));
  const auto responses = trainer.respond(sources, mode == DecodeMode::sample, seed, lft_score);

  std::ofstream out(out_path, std::ios::binary);
  if (!out) throw TrainingError("cannot write " + out_path.string());
  for (const auto& r : responses) {
    const auto words = trainer.vocab().decode(r);
    for (std::size_t i = 0; i < words.size(); ++i) out << (i ? " " : "") << words[i];
    out << "\n";
  }
}

}  // namespace divseq
