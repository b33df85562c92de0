// Copyright 2026 The divseq Authors. All Rights Reserved.
// SPDX-License-Identifier: Apache-2.0

#include "divseq/losses.hpp"
#include "doctest.h"
#include "support.hpp"

using namespace divseq;
using divseq::testing::check_gradient;
using divseq::testing::peaked_tracker;
using divseq::testing::tiny_batch;
using divseq::testing::tiny_config;

namespace {

Seq2SeqParams<double> params_for(bool label = false) {
  return Seq2SeqParams<double>::random_uniform(tiny_config(label), 0.5, 7);
}

ObjectiveOptions options(Objective o, double alpha = 100.0, double beta = 100.0, double shared = 50.0) {
  ObjectiveOptions opts;
  opts.objective = o;
  opts.weights = {alpha, beta, shared};
  return opts;
}

std::vector<SampledSequence> draw_samples(const Seq2SeqParams<double>& p, const PaddedBatch& batch,
                                          std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return decode_sampled(p, encode(p, batch), 8, rng);
}

}  // namespace

TEST_CASE("ML loss examples") {
  Matrix<double> certain = Matrix<double>::Zero(4, 1);
  certain(2, 0) = 1.0;
  TokenMatrix target(1, 1);
  target << 2;
  MaskMatrix mask = MaskMatrix::Ones(1, 1);
  CHECK(ml_loss<double>({certain}, target, mask) == 0.0);

  Matrix<double> half = Matrix<double>::Constant(2, 1, 0.5);
  TokenMatrix t1(1, 1);
  t1 << 1;
  CHECK(ml_loss<double>({half}, t1, mask) == doctest::Approx(std::log(2.0)).epsilon(1e-15));

  Matrix<double> zero = Matrix<double>::Zero(2, 1);
  zero(0, 0) = 1.0;
  CHECK(ml_loss<double>({zero}, t1, mask) == doctest::Approx(-std::log(1e-12)));
}

TEST_CASE("ML loss is a batch mean of per-row sums") {
  auto p = params_for();
  std::vector<DialogueExample> ex = {{{5, 6, 7}, {8, 9, kEos}}, {{5, 6, 7, 8, 9}, {10, kEos}}};
  auto once = pad_batch(ex, {0, 1});
  auto twice = pad_batch({ex[0], ex[1], ex[0], ex[1]}, {0, 1, 2, 3});
  auto loss = [&](const PaddedBatch& b) {
    return ml_loss(decode_teacher_forced(p, encode(p, b), b.target).distributions(), b.target, b.target_mask);
  };
  CHECK(std::abs(loss(once) - loss(twice)) <= 1e-12);

  auto first = pad_batch({ex[0]}, {0}), second = pad_batch({ex[1]}, {0});
  CHECK(std::abs(loss(once) - 0.5 * (loss(first) + loss(second))) <= 1e-12);
}

TEST_CASE("MinAvgOut loss examples") {
  CHECK(minavgout_loss(0.5, 0.0) == 0.0);
  CHECK(minavgout_loss(0.5, 100.0) == -50.0);
}

TEST_CASE("a gradient step on L_B alone moves D' mass off D's heavy token") {
  // One position, three tokens, the logits are the parameters.
  Vector<double> d(3);
  d << 0.8, 0.1, 0.1;
  auto tracker = AvgOutTracker<double>::from_state(d, Vector<double>::Ones(3), 0.01, 1);
  Matrix<double> logits(3, 1);
  logits << 0.3, 0.1, -0.2;
  MaskMatrix mask = MaskMatrix::Ones(1, 1);
  auto probs = [&](const Matrix<double>& z) { return detail::softmax_columns<double>(z); };

  auto p0 = probs(logits);
  auto s0 = summarize_batch<double>({p0}, mask, tracker.support());
  std::vector<Matrix<double>> g = {Matrix<double>::Zero(3, 1)};
  accumulate_minavgout_gradient<double>({p0}, mask, tracker, s0, 100.0, g);

  const double h = 1e-6;
  for (Index k = 0; k < 3; ++k) {
    Matrix<double> up = logits, down = logits;
    up(k, 0) += h;
    down(k, 0) -= h;
    auto lb = [&](const Matrix<double>& z) {
      return minavgout_loss(continuous_diversity(tracker, summarize_batch<double>({probs(z)}, mask, tracker.support())),
                            100.0);
    };
    CHECK(std::abs((lb(up) - lb(down)) / (2 * h) - g[0](k, 0)) <= 1e-6);
  }
  CHECK(g[0](0, 0) > 0.0);

  Matrix<double> stepped = logits - 0.01 * g[0];
  CHECK(summarize_batch<double>({probs(stepped)}, mask, tracker.support()).d_prime(0) < s0.d_prime(0));
}

TEST_CASE("RL loss examples") {
  CHECK(rl_loss<double>({-1.0, -2.5}, 0.4, 0.4) == 0.0);
  const double l = rl_loss<double>({-4.0, -6.0}, 0.9, 0.5);
  CHECK(l == doctest::Approx(4.0).epsilon(1e-15));
  CHECK(100.0 * l == doctest::Approx(400.0).epsilon(1e-15));
  CHECK(rl_loss<double>({}, 0.9, 0.5) == 0.0);

  // d L_RL / d logp = -(R - R_b) < 0 when R > R_b.
  const double h = 1e-6;
  const double slope = (rl_loss<double>({-1.0 + h}, 0.9, 0.5) - rl_loss<double>({-1.0 - h}, 0.9, 0.5)) / (2 * h);
  CHECK(slope < 0.0);
}

TEST_CASE("reward baseline warm start and geometric tracking") {
  RewardBaseline<double> b(0.01);
  b.update(0.7);
  CHECK(b.value() == 0.7);
  CHECK(b.update_count() == 1);

  auto restored = RewardBaseline<double>::from_state(0.2, 0.01, 1);
  const double r = 0.9;
  for (int n = 1; n <= 50; ++n) {
    restored.update(r);
    CHECK(std::abs(std::abs(restored.value() - r) - std::pow(0.99, n) * 0.7) <= 1e-12);
  }
  CHECK_THROWS_AS(RewardBaseline<double>(0.0), LossError);
}

TEST_CASE("objective parsing and weights") {
  CHECK(parse_objective("hybrid") == Objective::hybrid);
  CHECK_THROWS_AS(parse_objective("beam"), LossError);
  LossWeights w;
  CHECK(w.continuous_weight(Objective::minavgout) == 100.0);
  CHECK(w.continuous_weight(Objective::hybrid) == 50.0);
  CHECK(w.reinforce_weight(Objective::rl) == 100.0);
  CHECK(w.reinforce_weight(Objective::hybrid) == 50.0);
  CHECK(w.continuous_weight(Objective::lft) == 0.0);
  CHECK_THROWS_AS((LossWeights{-1.0, 0.0, 0.0}.validate()), LossError);
}

TEST_CASE("with zero weights every objective reduces to plain ML bit for bit") {
  auto p = params_for();
  auto batch = tiny_batch();
  auto tracker = peaked_tracker(20, 8);
  auto ref = objective_step(p, batch, tracker, 0.3, options(Objective::ml, 0, 0, 0));
  for (auto o : {Objective::minavgout, Objective::rl, Objective::hybrid}) {
    std::mt19937_64 rng(1);
    auto r = objective_step(p, batch, tracker, 0.3, options(o, 0, 0, 0), &rng);
    CHECK(r.breakdown.total == ref.breakdown.ml);
    CHECK(r.breakdown.b_loss == 0.0);
    CHECK(r.breakdown.rl == 0.0);
    CHECK(r.gradient->flatten() == ref.gradient->flatten());
  }
}

TEST_CASE("ML objective leaves the L_B and L_RL terms at zero") {
  auto r = objective_step(params_for(), tiny_batch(), peaked_tracker(20, 8), 0.0, options(Objective::ml));
  CHECK(r.breakdown.b_loss == 0.0);
  CHECK(r.breakdown.rl == 0.0);
  CHECK(r.breakdown.total == r.breakdown.ml);
  CHECK(r.breakdown.b_c > 0.0);
}

TEST_CASE("loss conservation: total equals the sum of the active terms") {
  auto p = params_for();
  auto batch = tiny_batch();
  auto tracker = peaked_tracker(20, 8);
  for (auto o : {Objective::ml, Objective::minavgout, Objective::rl, Objective::hybrid}) {
    std::mt19937_64 rng(2);
    const auto lb = objective_step(p, batch, tracker, 0.4, options(o), &rng).breakdown;
    CHECK(std::abs(lb.total - (lb.ml + lb.b_loss + lb.rl)) <= 1e-6);
  }
}

TEST_CASE("hybrid equals MinAvgOut plus RL minus one ML term") {
  auto p = params_for();
  auto batch = tiny_batch();
  auto tracker = peaked_tracker(20, 8);
  auto samples = draw_samples(p, batch, 5);
  const double c = 50.0;
  auto hyb = objective_step(p, batch, tracker, 0.4, options(Objective::hybrid, c, c, c), nullptr, &samples);
  auto ma = objective_step(p, batch, tracker, 0.4, options(Objective::minavgout, c, c, c), nullptr, &samples);
  auto rl = objective_step(p, batch, tracker, 0.4, options(Objective::rl, c, c, c), nullptr, &samples);
  CHECK(std::abs(hyb.breakdown.total - (ma.breakdown.total + rl.breakdown.total - ma.breakdown.ml)) <= 1e-6);
  CHECK(hyb.breakdown.b_c != 0.0);
  CHECK(hyb.breakdown.b_d != 0.0);

  RewardBaseline<double> baseline = RewardBaseline<double>::from_state(0.4, 0.01, 1);
  auto via_helper = hybrid_step_loss(p, batch, tracker, baseline, options(Objective::ml, 0, 0, c), nullptr, &samples);
  CHECK(via_helper.breakdown.total == hyb.breakdown.total);

  auto off = hybrid_step_loss(p, batch, tracker, baseline, options(Objective::hybrid, 1, 1, 0), nullptr, &samples);
  CHECK(off.breakdown.total == off.breakdown.ml);
}

TEST_CASE("samples with nothing to score are skipped") {
  auto p = params_for();
  auto batch = tiny_batch();
  std::vector<SampledSequence> samples(2);
  samples[0].tokens = {kEos};
  samples[0].terminated = true;
  samples[1].tokens = {kPad, kEos};
  samples[1].terminated = true;
  auto r = objective_step(p, batch, peaked_tracker(20, 8), 0.4, options(Objective::rl), nullptr, &samples);
  CHECK(r.skipped_samples == 2);
  CHECK(r.breakdown.rl == 0.0);
  CHECK(!r.rewards[0].has_value());
  CHECK(std::isfinite(r.breakdown.total));
}

TEST_CASE("LFT scores: dull targets score low and a novel target scores higher") {
  // D learned on a dull-heavy corpus: the dull tokens 5..8 carry most mass.
  AvgOutTracker<double> base(content_support<double>(20), 0.01);
  Vector<double> d = base.distribution();
  for (TokenId t : {5, 6, 7, 8}) d(t) += 0.2;
  d /= d.sum();
  auto tracker = AvgOutTracker<double>::from_state(d, base.support(), 0.01, 10);

  const DialogueExample dull{{10, 11}, {5, 6, 7, 8, kEos}};
  std::vector<DialogueExample> ex = {dull, dull, dull, {{12}, {15, 16, 17, kEos}}};
  auto batch = pad_batch(ex, {0, 1, 2, 3});
  auto scores = ground_truth_scores(tracker, batch);
  double mean = 0.0;
  for (double s : scores) mean += s / 4.0;
  for (int i = 0; i < 3; ++i) CHECK(scores[i] <= mean);
  CHECK(scores[3] > scores[0]);

  auto cfg = tiny_config(true);
  auto p = params_for(true);
  auto r = lft_step_loss(p, cfg, batch, tracker, options(Objective::ml));
  CHECK(r.label_scores == scores);
  CHECK(r.breakdown.total == r.breakdown.ml);
  CHECK(r.breakdown.b_loss == 0.0);
  CHECK(r.breakdown.rl == 0.0);
  CHECK_THROWS_AS(lft_step_loss(params_for(false), tiny_config(false), batch, tracker, options(Objective::lft)),
                  LossError);

  auto labelled_zero = prepend_diversity_label(batch, std::vector<double>(4, 0.0), cfg);
  CHECK(std::isfinite(objective_step(p, labelled_zero, tracker, 0.0, options(Objective::lft)).breakdown.total));
}

TEST_CASE("analytic gradients match finite differences for every objective") {
  auto batch = tiny_batch();
  auto tracker = peaked_tracker(20, 8);
  const double baseline = 0.5;
  for (auto o : {Objective::ml, Objective::minavgout, Objective::rl, Objective::hybrid}) {
    CAPTURE(to_string(o));
    auto p = params_for();
    auto samples = draw_samples(p, batch, 3);
    auto opts = options(o);
    auto r = objective_step(p, batch, tracker, baseline, opts, nullptr, &samples);
    opts.compute_gradient = false;
    auto check = check_gradient(p, *r.gradient, [&](const Seq2SeqParams<double>& q) {
      return objective_step(q, batch, tracker, baseline, opts, nullptr, &samples).breakdown.total;
    });
    CHECK(check.fraction_tight() >= 0.95);
    CHECK(check.worst <= 1e-2);
  }

  SUBCASE("LFT, through the scaled label embedding") {
    auto cfg = tiny_config(true);
    auto p = params_for(true);
    auto opts = options(Objective::lft);
    auto r = lft_step_loss(p, cfg, batch, tracker, opts);
    opts.compute_gradient = false;
    auto check = check_gradient(p, *r.gradient, [&](const Seq2SeqParams<double>& q) {
      return lft_step_loss(q, cfg, batch, tracker, opts).breakdown.total;
    });
    CHECK(check.worst <= 1e-3);
    CHECK(r.gradient->source_embedding.col(kDivLabel).norm() > 0.0);
  }
}

TEST_CASE("D and R_b are constants of the step") {
  auto p = params_for();
  auto batch = tiny_batch();
  auto tracker = peaked_tracker(20, 8);
  auto samples = draw_samples(p, batch, 9);
  auto opts = options(Objective::hybrid);

  auto base = objective_step(p, batch, tracker, 0.5, opts, nullptr, &samples);
  Vector<double> d = tracker.distribution();
  d(8) += 1e-3;
  d(9) -= 1e-3;
  auto moved = AvgOutTracker<double>::from_state(d, tracker.support(), 0.01, 3);
  auto perturbed = objective_step(p, batch, moved, 0.5 + 1e-3, opts, nullptr, &samples);
  CHECK(perturbed.breakdown.total != base.breakdown.total);
  // D' is untouched by a change in D.
  CHECK(perturbed.summary.d_prime == base.summary.d_prime);

  // The perturbed gradient is exactly the derivative with D and R_b frozen.
  opts.compute_gradient = false;
  auto check = check_gradient(p, *perturbed.gradient, [&](const Seq2SeqParams<double>& q) {
    return objective_step(q, batch, moved, 0.5 + 1e-3, opts, nullptr, &samples).breakdown.total;
  });
  CHECK(check.fraction_tight() >= 0.95);
}
