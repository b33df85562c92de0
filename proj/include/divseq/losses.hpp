// Copyright 2026 The divseq Authors. All Rights Reserved.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "divseq/avgout.hpp"
#include "divseq/model.hpp"

namespace divseq {

class LossError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Objective { ml, minavgout, lft, rl, hybrid };

inline std::string_view to_string(Objective o) {
  switch (o) {
    case Objective::ml: return "ml";
    case Objective::minavgout: return "minavgout";
    case Objective::lft: return "lft";
    case Objective::rl: return "rl";
    case Objective::hybrid: return "hybrid";
  }
  return "?";
}

inline Objective parse_objective(std::string_view name) {
  for (auto o : {Objective::ml, Objective::minavgout, Objective::lft, Objective::rl, Objective::hybrid})
    if (to_string(o) == name) return o;
  throw LossError("unknown objective '" + std::string(name) + "'");
}

inline bool needs_samples(Objective o) { return o == Objective::rl || o == Objective::hybrid; }

struct LossWeights {
  double alpha = 100.0;
  double beta = 100.0;
  double hybrid_shared = 50.0;

  void validate() const {
    if (!(alpha >= 0.0 && beta >= 0.0 && hybrid_shared >= 0.0)) throw LossError("loss weights must be non-negative");
  }
  /// Coefficient on -B_c for `o`.
  double continuous_weight(Objective o) const {
    if (o == Objective::minavgout) return alpha;
    if (o == Objective::hybrid) return hybrid_shared;
    return 0.0;
  }
  /// Coefficient on L_RL for `o`.
  double reinforce_weight(Objective o) const {
    if (o == Objective::rl) return beta;
    if (o == Objective::hybrid) return hybrid_shared;
    return 0.0;
  }
};

/// One training step's loss terms. `b_loss` and `rl` are the weighted terms
/// that enter `total`.
struct LossBreakdown {
  double ml = 0.0;
  double b_loss = 0.0;
  double rl = 0.0;
  double total = 0.0;
  double b_c = 0.0;
  double b_d = 0.0;
  double reward = 0.0;
  double reward_baseline = 0.0;
};

/// Exponential average of past rewards. The first observation initializes it.
template <typename Scalar>
class RewardBaseline {
 public:
  explicit RewardBaseline(Scalar decay = Scalar(0.01)) : decay_(decay) {
    if (!(decay > Scalar(0) && decay <= Scalar(1))) throw LossError("baseline decay must lie in (0, 1]");
  }
  static RewardBaseline from_state(Scalar value, Scalar decay, Index update_count) {
    RewardBaseline b(decay);
    if (!std::isfinite(static_cast<double>(value))) throw LossError("baseline value must be finite");
    b.value_ = value;
    b.update_count_ = update_count;
    return b;
  }

  Scalar value() const { return value_; }
  Scalar decay() const { return decay_; }
  Index update_count() const { return update_count_; }

  /// R_b <- decay R + (1 - decay) R_b
  void update(Scalar reward) {
    value_ = update_count_ == 0 ? reward : decay_ * reward + (Scalar(1) - decay_) * value_;
    ++update_count_;
  }

 private:
  Scalar value_ = Scalar(0);
  Scalar decay_;
  Index update_count_ = 0;
};

/// -sum_t log p(y_t | y_<t, x) over unmasked positions, averaged over rows.
template <typename Scalar>
Scalar ml_loss(const std::vector<Matrix<Scalar>>& steps, const TokenMatrix& targets, const MaskMatrix& mask,
               double log_floor = 1e-12) {
  const Index rows = targets.rows();
  if (rows == 0) throw LossError("empty batch");
  Scalar total(0);
  for (Index b = 0; b < rows; ++b) {
    Scalar row(0);
    for (std::size_t t = 0; t < steps.size(); ++t) {
      if (!mask(b, static_cast<Index>(t))) continue;
      const Scalar p = steps[t](targets(b, static_cast<Index>(t)), b);
      row -= std::log(std::max(p, static_cast<Scalar>(log_floor)));
    }
    total += row;
  }
  return total / static_cast<Scalar>(rows);
}

/// Adds weight * d ml_loss / d logits into `dlogits`.
template <typename Scalar>
void accumulate_ml_gradient(const std::vector<Matrix<Scalar>>& steps, const TokenMatrix& targets,
                            const MaskMatrix& mask, Scalar weight, std::vector<Matrix<Scalar>>& dlogits) {
  const Index rows = targets.rows();
  const Scalar w = weight / static_cast<Scalar>(rows);
  for (std::size_t t = 0; t < steps.size(); ++t) {
    for (Index b = 0; b < rows; ++b) {
      if (!mask(b, static_cast<Index>(t))) continue;
      dlogits[t].col(b) += w * steps[t].col(b);
      dlogits[t](targets(b, static_cast<Index>(t)), b) -= w;
    }
  }
}

/// L_B = -alpha B_c
template <typename Scalar>
Scalar minavgout_loss(Scalar b_c, Scalar alpha) {
  return -alpha * b_c;
}

/// Adds d(-alpha B_c)/d logits into `dlogits`; only D' carries gradient.
template <typename Scalar>
void accumulate_minavgout_gradient(const std::vector<Matrix<Scalar>>& steps, const MaskMatrix& mask,
                                   const AvgOutTracker<Scalar>& tracker,
                                   const BatchDistributionSummary<Scalar>& summary, Scalar alpha,
                                   std::vector<Matrix<Scalar>>& dlogits) {
  const Vector<Scalar> dprob = -alpha * continuous_diversity_gradient(tracker, summary);
  for (std::size_t t = 0; t < steps.size(); ++t) {
    for (Index b = 0; b < steps[t].cols(); ++b) {
      if (!mask(b, static_cast<Index>(t))) continue;
      const auto p = steps[t].col(b);
      dlogits[t].col(b) += p.cwiseProduct(dprob - Vector<Scalar>::Constant(p.size(), p.dot(dprob)));
    }
  }
}

/// L_RL = -(R - R_b) sum_t log p(y^s_t | y^s_<t, x) for one sampled response.
/// The advantage is a constant; zero steps give zero.
template <typename Scalar>
Scalar rl_loss(const std::vector<Scalar>& sampled_logprobs, Scalar reward, Scalar baseline) {
  Scalar sum(0);
  for (auto lp : sampled_logprobs) sum += lp;
  return -(reward - baseline) * sum;
}

struct ObjectiveOptions {
  Objective objective = Objective::ml;
  LossWeights weights;
  Index sample_max_len = 32;
  double sample_temperature = 1.0;
  double log_floor = 1e-12;
  bool compute_gradient = true;
};

template <typename Scalar>
struct StepResult {
  LossBreakdown breakdown;
  BatchDistributionSummary<Scalar> summary;  // D' of the teacher-forced pass
  std::optional<Seq2SeqParams<Scalar>> gradient;
  std::vector<SampledSequence> samples;
  std::vector<std::optional<Scalar>> rewards;  // empty optional: nothing but EOS/PAD was drawn
  Index skipped_samples = 0;
  std::vector<double> label_scores;
};

/// Loss (and gradient) of one objective on one batch. D and R_b are read as
/// constants; neither the tracker nor the baseline is updated here. Samples
/// for rl/hybrid are drawn from `rng` unless `fixed_samples` is given.
template <typename Scalar>
StepResult<Scalar> objective_step(const Seq2SeqParams<Scalar>& params, const PaddedBatch& batch,
                                  const AvgOutTracker<Scalar>& tracker, Scalar reward_baseline,
                                  const ObjectiveOptions& opts, std::mt19937_64* rng = nullptr,
                                  const std::vector<SampledSequence>* fixed_samples = nullptr) {
  opts.weights.validate();
  const Index rows = batch.rows();
  const auto alpha = static_cast<Scalar>(opts.weights.continuous_weight(opts.objective));
  const auto beta = static_cast<Scalar>(opts.weights.reinforce_weight(opts.objective));

  StepResult<Scalar> result;
  auto enc = encode(params, batch);
  auto tf = decode_teacher_forced(params, enc, batch.target);
  const auto dists = tf.distributions();

  auto& lb = result.breakdown;
  const Scalar ml = ml_loss(dists, batch.target, batch.target_mask, opts.log_floor);
  result.summary = summarize_batch(dists, batch.target_mask, tracker.support());
  const Scalar b_c = continuous_diversity(tracker, result.summary);
  lb.ml = static_cast<double>(ml);
  lb.b_c = static_cast<double>(b_c);
  lb.b_loss = opts.objective == Objective::minavgout || opts.objective == Objective::hybrid
                  ? static_cast<double>(minavgout_loss(b_c, alpha))
                  : 0.0;

  TeacherForcedOutput<Scalar> replay;
  TokenMatrix sample_tokens;
  Scalar rl_unit(0);
  std::vector<Scalar> coefficients;
  if (needs_samples(opts.objective)) {
    if (fixed_samples) {
      if (static_cast<Index>(fixed_samples->size()) != rows) throw LossError("one sample per batch row is required");
      result.samples = *fixed_samples;
    } else {
      if (!rng) throw LossError("sampling objective needs a random generator");
      result.samples = decode_sampled(params, enc, opts.sample_max_len, *rng, opts.sample_temperature);
    }
    Index longest = 1;
    for (const auto& s : result.samples) longest = std::max(longest, static_cast<Index>(s.tokens.size()));
    sample_tokens = TokenMatrix::Constant(rows, longest, kEos);
    for (Index b = 0; b < rows; ++b) {
      const auto& toks = result.samples[static_cast<std::size_t>(b)].tokens;
      for (std::size_t t = 0; t < toks.size(); ++t) sample_tokens(b, static_cast<Index>(t)) = toks[t];
    }
    replay = decode_teacher_forced(params, enc, sample_tokens);

    Scalar reward_sum(0);
    Index valid = 0;
    coefficients.assign(static_cast<std::size_t>(rows), Scalar(0));
    for (Index b = 0; b < rows; ++b) {
      const auto& s = result.samples[static_cast<std::size_t>(b)];
      const bool scoreable =
          std::any_of(s.tokens.begin(), s.tokens.end(), [](TokenId t) { return t != kEos && t != kPad; });
      if (!scoreable) {
        result.rewards.emplace_back();
        ++result.skipped_samples;
        continue;
      }
      const Scalar reward = discrete_diversity(tracker, s.tokens).b_d;
      std::vector<Scalar> logprobs;
      for (std::size_t t = 0; t < s.tokens.size(); ++t) {
        const Scalar p = replay.distribution(static_cast<Index>(t))(s.tokens[t], b);
        logprobs.push_back(std::log(std::max(p, static_cast<Scalar>(opts.log_floor))));
      }
      rl_unit += rl_loss(logprobs, reward, reward_baseline);
      coefficients[static_cast<std::size_t>(b)] = -(reward - reward_baseline);
      result.rewards.emplace_back(reward);
      reward_sum += reward;
      ++valid;
    }
    rl_unit /= static_cast<Scalar>(rows);
    if (valid > 0) {
      lb.b_d = static_cast<double>(reward_sum / static_cast<Scalar>(valid));
      lb.reward = lb.b_d;
    }
    lb.reward_baseline = static_cast<double>(reward_baseline);
    lb.rl = static_cast<double>(beta * rl_unit);
  }
  lb.total = lb.ml + lb.b_loss + lb.rl;

  if (!opts.compute_gradient) return result;

  auto grad = Seq2SeqParams<Scalar>::zeros_like(params);
  auto enc_grad = EncoderGradient<Scalar>::zeros_like(enc);
  std::vector<Matrix<Scalar>> dlogits;
  for (const auto& d : dists) dlogits.push_back(Matrix<Scalar>::Zero(d.rows(), d.cols()));
  accumulate_ml_gradient(dists, batch.target, batch.target_mask, Scalar(1), dlogits);
  if (alpha != Scalar(0))
    accumulate_minavgout_gradient(dists, batch.target_mask, tracker, result.summary, alpha, dlogits);
  backward_decoder(params, enc, tf, dlogits, grad, enc_grad);

  if (needs_samples(opts.objective) && beta != Scalar(0)) {
    std::vector<Matrix<Scalar>> dreplay;
    for (Index t = 0; t < replay.length(); ++t) {
      const auto& p = replay.distribution(t);
      dreplay.push_back(Matrix<Scalar>::Zero(p.rows(), p.cols()));
    }
    for (Index b = 0; b < rows; ++b) {
      const Scalar coef = beta * coefficients[static_cast<std::size_t>(b)] / static_cast<Scalar>(rows);
      if (coef == Scalar(0)) continue;
      const auto& toks = result.samples[static_cast<std::size_t>(b)].tokens;
      for (std::size_t t = 0; t < toks.size(); ++t) {
        // d(coef * log p_y)/d logits = coef * (e_y - p)
        dreplay[t].col(b) -= coef * replay.distribution(static_cast<Index>(t)).col(b);
        dreplay[t](toks[t], b) += coef;
      }
    }
    backward_decoder(params, enc, replay, dreplay, grad, enc_grad);
  }
  backward_encoder(params, enc, std::move(enc_grad), grad);
  result.gradient = std::move(grad);
  return result;
}

/// Per-row LFT label scores: diversity of each ground-truth target under D.
template <typename Scalar>
std::vector<double> ground_truth_scores(const AvgOutTracker<Scalar>& tracker, const PaddedBatch& batch) {
  std::vector<double> scores;
  for (Index b = 0; b < batch.rows(); ++b) {
    TokenSeq target;
    for (Index t = 0; t < batch.target.cols(); ++t)
      if (batch.target_mask(b, t)) target.push_back(batch.target(b, t));
    scores.push_back(static_cast<double>(score_ground_truth(tracker, target)));
  }
  return scores;
}

/// LFT: plain ML on inputs carrying the diversity label scaled by each
/// target's ground-truth score.
template <typename Scalar>
StepResult<Scalar> lft_step_loss(const Seq2SeqParams<Scalar>& params, const ModelConfig& cfg,
                                 const PaddedBatch& batch, const AvgOutTracker<Scalar>& tracker,
                                 ObjectiveOptions opts) {
  if (!cfg.diversity_label) throw LossError("LFT needs a model with the diversity label enabled");
  auto scores = ground_truth_scores(tracker, batch);
  auto labelled = prepend_diversity_label(batch, scores, cfg);
  opts.objective = Objective::lft;
  auto result = objective_step(params, labelled, tracker, Scalar(0), opts);
  result.label_scores = std::move(scores);
  return result;
}

/// MinAvgOut + RL with one shared coefficient.
template <typename Scalar>
StepResult<Scalar> hybrid_step_loss(const Seq2SeqParams<Scalar>& params, const PaddedBatch& batch,
                                    const AvgOutTracker<Scalar>& tracker, const RewardBaseline<Scalar>& baseline,
                                    ObjectiveOptions opts, std::mt19937_64* rng = nullptr,
                                    const std::vector<SampledSequence>* fixed_samples = nullptr) {
  opts.objective = Objective::hybrid;
  return objective_step(params, batch, tracker, baseline.value(), opts, rng, fixed_samples);
}

}  // namespace divseq
