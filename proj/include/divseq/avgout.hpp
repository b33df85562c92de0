// Copyright 2026 The divseq Authors. All Rights Reserved.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <set>
#include <stdexcept>
#include <vector>

#include "divseq/types.hpp"

namespace divseq {

class AvgOutError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Support over which D and D' live: every id except PAD, UNK, BOS and
/// DIVLABEL. EOS stays in.
template <typename Scalar>
Vector<Scalar> content_support(Index vocab_size) {
  Vector<Scalar> s = Vector<Scalar>::Ones(vocab_size);
  for (TokenId id : {kPad, kUnk, kBos, kDivLabel})
    if (id < vocab_size) s(id) = Scalar(0);
  return s;
}

/// Mean decoder output distribution of one mini-batch (D').
template <typename Scalar>
struct BatchDistributionSummary {
  Vector<Scalar> d_prime;
  Index positions_counted = 0;
  /// Mass of the raw positional mean inside the support, before
  /// renormalization.
  Scalar support_mass = Scalar(1);
};

/// Exponential moving average of D' across mini-batches (D).
template <typename Scalar>
class AvgOutTracker {
 public:
  AvgOutTracker() = default;

  /// Uniform over the whole vocabulary.
  explicit AvgOutTracker(Index vocab_size, Scalar gamma = Scalar(0.01))
      : AvgOutTracker(Vector<Scalar>::Ones(vocab_size), gamma) {}

  /// Uniform over the ids where `support` is nonzero.
  AvgOutTracker(const Vector<Scalar>& support, Scalar gamma) : support_(support), gamma_(gamma) {
    check_gamma(gamma);
    if (support.size() == 0 || (support.array() < Scalar(0)).any() || support.sum() <= Scalar(0))
      throw AvgOutError("support must be a non-empty 0/1 mask");
    support_ = (support.array() != Scalar(0)).template cast<Scalar>();
    distribution_ = support_ / support_.sum();
  }

  static AvgOutTracker from_state(const Vector<Scalar>& distribution, const Vector<Scalar>& support, Scalar gamma,
                                  Index update_count) {
    AvgOutTracker t(support, gamma);
    if (distribution.size() != support.size()) throw AvgOutError("distribution and support sizes differ");
    if ((distribution.array() < Scalar(0)).any()) throw AvgOutError("distribution has negative entries");
    t.distribution_ = distribution;
    t.update_count_ = update_count;
    return t;
  }

  const Vector<Scalar>& distribution() const { return distribution_; }
  const Vector<Scalar>& support() const { return support_; }
  Scalar gamma() const { return gamma_; }
  Index update_count() const { return update_count_; }
  Index size() const { return distribution_.size(); }
  Scalar probability(TokenId id) const {
    if (id < 0 || id >= size()) throw AvgOutError("token id outside the tracked vocabulary");
    return distribution_(id);
  }

  /// D <- gamma D' + (1 - gamma) D
  void update(const BatchDistributionSummary<Scalar>& summary) {
    if (summary.d_prime.size() != size()) throw AvgOutError("summary size does not match the tracker");
    distribution_ = gamma_ * summary.d_prime + (Scalar(1) - gamma_) * distribution_;
    ++update_count_;
  }

 private:
  static void check_gamma(Scalar g) {
    if (!(g > Scalar(0) && g <= Scalar(1))) throw AvgOutError("gamma must lie in (0, 1]");
  }

  Vector<Scalar> support_;
  Vector<Scalar> distribution_;
  Scalar gamma_ = Scalar(0.01);
  Index update_count_ = 0;
};

template <typename Scalar>
AvgOutTracker<Scalar> ema_update(AvgOutTracker<Scalar> tracker, const BatchDistributionSummary<Scalar>& summary) {
  tracker.update(summary);
  return tracker;
}

/// D' = mean of the step distributions over unmasked (row, step) positions,
/// restricted to `support` and renormalized. `mask` is batch x steps.
template <typename Scalar>
BatchDistributionSummary<Scalar> summarize_batch(const std::vector<Matrix<Scalar>>& steps, const MaskMatrix& mask,
                                                 const Vector<Scalar>& support) {
  if (steps.empty()) throw AvgOutError("no decoder steps to summarize");
  const Index vocab = steps.front().rows();
  if (mask.cols() < static_cast<Index>(steps.size())) throw AvgOutError("mask has fewer steps than the decoder");
  if (support.size() != vocab) throw AvgOutError("support size does not match the distributions");
  Vector<Scalar> sum = Vector<Scalar>::Zero(vocab);
  Index counted = 0;
  for (std::size_t t = 0; t < steps.size(); ++t) {
    const auto& p = steps[t];
    for (Index b = 0; b < p.cols(); ++b) {
      if (!mask(b, static_cast<Index>(t))) continue;
      sum += p.col(b);
      ++counted;
    }
  }
  if (counted == 0) throw AvgOutError("every position is masked");
  BatchDistributionSummary<Scalar> out;
  out.positions_counted = counted;
  Vector<Scalar> mean = (sum / static_cast<Scalar>(counted)).cwiseProduct(support);
  out.support_mass = mean.sum();
  if (!(out.support_mass > Scalar(0))) throw AvgOutError("no probability mass inside the support");
  out.d_prime = mean / out.support_mass;
  return out;
}

template <typename Scalar>
BatchDistributionSummary<Scalar> summarize_batch(const std::vector<Matrix<Scalar>>& steps, const MaskMatrix& mask) {
  if (steps.empty()) throw AvgOutError("no decoder steps to summarize");
  return summarize_batch(steps, mask, Vector<Scalar>(Vector<Scalar>::Ones(steps.front().rows())));
}

/// B_c = 1 - D . D'. D is a constant of the step.
template <typename Scalar>
Scalar continuous_diversity(const AvgOutTracker<Scalar>& tracker, const BatchDistributionSummary<Scalar>& summary) {
  if (summary.d_prime.size() != tracker.size()) throw AvgOutError("summary size does not match the tracker");
  return Scalar(1) - tracker.distribution().dot(summary.d_prime);
}

/// dB_c / dp for a single unmasked position's distribution p. D is held
/// constant; the support renormalization of D' is differentiated through.
template <typename Scalar>
Vector<Scalar> continuous_diversity_gradient(const AvgOutTracker<Scalar>& tracker,
                                             const BatchDistributionSummary<Scalar>& summary) {
  const auto& d = tracker.distribution();
  const Scalar weighted = d.dot(summary.d_prime);
  Vector<Scalar> g = -((d.array() - weighted) * tracker.support().array()).matrix();
  return g / (summary.support_mass * static_cast<Scalar>(summary.positions_counted));
}

template <typename Scalar>
struct DiscreteDiversityResult {
  Scalar b_d = Scalar(0);
  std::vector<Scalar> probabilities;  // D at each scored token, in order
  Index n_g = 0;
  Index n_unique = 0;
};

/// B_d = 1 - sum_i D[token_i] / N_unique over the tokens with EOS and PAD
/// dropped. Not clamped.
template <typename Scalar>
DiscreteDiversityResult<Scalar> discrete_diversity(const AvgOutTracker<Scalar>& tracker, const TokenSeq& tokens) {
  DiscreteDiversityResult<Scalar> r;
  std::set<TokenId> unique;
  Scalar total(0);
  for (auto tok : tokens) {
    if (tok == kEos || tok == kPad) continue;
    const Scalar p = tracker.probability(tok);
    r.probabilities.push_back(p);
    total += p;
    unique.insert(tok);
  }
  if (r.probabilities.empty()) throw AvgOutError("cannot score an empty token sequence");
  r.n_g = static_cast<Index>(r.probabilities.size());
  r.n_unique = static_cast<Index>(unique.size());
  r.b_d = Scalar(1) - total / static_cast<Scalar>(r.n_unique);
  return r;
}

/// Diversity of a ground-truth target, used to scale the diversity label.
template <typename Scalar>
Scalar score_ground_truth(const AvgOutTracker<Scalar>& tracker, const TokenSeq& target) {
  return discrete_diversity(tracker, target).b_d;
}

}  // namespace divseq
