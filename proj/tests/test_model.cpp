// Copyright 2026 The divseq Authors. All Rights Reserved.
// SPDX-License-Identifier: Apache-2.0

#include "divseq/model.hpp"
#include "doctest.h"
#include "support.hpp"

using namespace divseq;
using divseq::testing::tiny_batch;
using divseq::testing::tiny_config;

namespace {

Seq2SeqParams<double> tiny_params(bool label = false, std::uint64_t seed = 1) {
  return Seq2SeqParams<double>::random_uniform(tiny_config(label), 0.5, seed);
}

double max_abs_diff(const Matrix<double>& a, const Matrix<double>& b) { return (a - b).cwiseAbs().maxCoeff(); }

}  // namespace

TEST_CASE("encoder shapes and attention mask for sources of length 3 and 5") {
  auto p = tiny_params();
  auto enc = encode(p, tiny_batch());
  REQUIRE(enc.annotations.size() == 5);
  for (const auto& a : enc.annotations) {
    CHECK(a.rows() == 16);
    CHECK(a.cols() == 2);
  }
  CHECK(enc.attention_mask.rows() == 5);
  CHECK(enc.attention_mask.col(0).sum() == 3.0);
  CHECK(enc.attention_mask(3, 0) == 0.0);
  CHECK(enc.attention_mask(4, 0) == 0.0);
  CHECK(enc.attention_mask.col(1).sum() == 5.0);
  CHECK(enc.initial_hidden.rows() == 16);
}

TEST_CASE("duplicated rows give identical annotations and permuted rows permute outputs") {
  auto p = tiny_params();
  std::vector<DialogueExample> ex = {{{5, 6, 7}, {8, kEos}}, {{9, 10}, {11, 12, kEos}}, {{5, 6, 7}, {8, kEos}}};
  auto enc = encode(p, pad_batch(ex, {0, 1, 2}));
  for (const auto& a : enc.annotations) CHECK(a.col(0) == a.col(2));

  auto swapped = encode(p, pad_batch({ex[1], ex[0]}, {0, 1}));
  for (Index t = 0; t < 3; ++t) {
    CHECK(max_abs_diff(swapped.annotations[t].col(1), enc.annotations[t].col(0)) == 0.0);
    if (t < 2) CHECK(max_abs_diff(swapped.annotations[t].col(0), enc.annotations[t].col(1)) == 0.0);
  }
}

TEST_CASE("teacher-forced distributions are valid and one step per target position") {
  auto p = tiny_params();
  auto batch = tiny_batch();
  auto enc = encode(p, batch);
  auto out = decode_teacher_forced(p, enc, batch.target);
  CHECK(out.length() == batch.target.cols());
  for (Index t = 0; t < out.length(); ++t) {
    const auto& d = out.distribution(t);
    CHECK(d.rows() == 20);
    CHECK((d.array() >= 0.0).all());
    for (Index b = 0; b < d.cols(); ++b) CHECK(std::abs(d.col(b).sum() - 1.0) <= 1e-5);
  }

  auto one = pad_batch({{{5, 6}, {kEos}}}, {0});
  CHECK(decode_teacher_forced(p, encode(p, one), one.target).length() == 1);
}

TEST_CASE("attention is a distribution over real source positions with zero weight on PAD") {
  auto p = tiny_params();
  auto batch = tiny_batch();
  auto enc = encode(p, batch);
  auto out = decode_teacher_forced(p, enc, batch.target);
  for (const auto& step : out.steps) {
    CHECK((step.attention.array() >= 0.0).all());
    for (Index b = 0; b < 2; ++b) CHECK(std::abs(step.attention.col(b).sum() - 1.0) <= 1e-12);
    CHECK(step.attention(3, 0) == 0.0);
    CHECK(step.attention(4, 0) == 0.0);
  }
}

TEST_CASE("identical source and target prefix give identical step distributions") {
  auto p = tiny_params();
  std::vector<DialogueExample> ex = {{{5, 6, 7}, {8, 9, 10, kEos}}, {{5, 6, 7}, {8, 9, 11, 12, kEos}}};
  auto batch = pad_batch(ex, {0, 1});
  auto out = decode_teacher_forced(p, encode(p, batch), batch.target);
  for (Index t = 0; t < 3; ++t) CHECK(out.distribution(t).col(0) == out.distribution(t).col(1));
  CHECK(out.distribution(3).col(0) != out.distribution(3).col(1));
}

TEST_CASE("batch-size invariance of teacher-forced distributions") {
  auto p = tiny_params();
  std::vector<DialogueExample> ex = {{{5, 6, 7}, {8, 9, kEos}}, {{5, 6, 7, 8, 9, 10, 11}, {10, 11, 12, 13, kEos}}};
  auto both = pad_batch(ex, {0, 1});
  auto alone = pad_batch({ex[0]}, {0});
  auto a = decode_teacher_forced(p, encode(p, both), both.target);
  auto s = decode_teacher_forced(p, encode(p, alone), alone.target);
  for (Index t = 0; t < s.length(); ++t) CHECK(max_abs_diff(a.distribution(t).col(0), s.distribution(t).col(0)) <= 1e-5);
}

TEST_CASE("greedy decoding stops at EOS, respects max-len and is deterministic") {
  auto p = tiny_params();
  const TokenSeq src{5, 6, 7};
  auto eos_first = p;
  eos_first.output_bias(kEos) = 100.0;
  CHECK(decode_greedy(eos_first, src, 10).empty());

  CHECK(decode_greedy(p, src, 1).size() <= 1);
  CHECK(decode_greedy(p, src, 12) == decode_greedy(p, src, 12));
  CHECK_THROWS_AS(decode_greedy(p, src, 0), ModelError);
}

TEST_CASE("greedy ties break toward the lower token id") {
  auto p = tiny_params();
  p.output_weight.setZero();
  p.output_bias.setZero();
  p.output_bias(9) = 5.0;
  p.output_bias(7) = 5.0;
  CHECK(decode_greedy(p, TokenSeq{5, 6}, 3) == TokenSeq{7, 7, 7});
}

TEST_CASE("sampling is seeded and approaches greedy as temperature goes to zero") {
  auto p = tiny_params(false, 4);
  const TokenSeq src{5, 6, 7, 8};
  auto a = decode_sampled(p, src, 10, 42);
  auto b = decode_sampled(p, src, 10, 42);
  CHECK(a.tokens == b.tokens);
  CHECK(a.logprobs == b.logprobs);

  for (std::uint64_t seed = 0; seed < 5; ++seed)
    CHECK(decode_sampled(p, src, 10, seed, 1e-9).content() == decode_greedy(p, src, 10));
  CHECK_THROWS_AS(decode_sampled(p, src, 10, 1, 0.0), ModelError);
}

TEST_CASE("sampled log-probabilities match a teacher-forced replay of the sample") {
  auto p = tiny_params(false, 6);
  std::vector<TokenSeq> sources = {{5, 6, 7}, {8, 9}};
  auto enc = encode_sources(p, sources);
  std::mt19937_64 rng(3);
  auto samples = decode_sampled(p, enc, 8, rng);
  for (std::size_t b = 0; b < samples.size(); ++b) {
    const auto& s = samples[b];
    REQUIRE(!s.tokens.empty());
    TokenMatrix targets(1, static_cast<Index>(s.tokens.size()));
    for (std::size_t t = 0; t < s.tokens.size(); ++t) targets(0, static_cast<Index>(t)) = s.tokens[t];
    auto single = encode_sources(p, {sources[b]});
    auto replay = decode_teacher_forced(p, single, targets);
    for (std::size_t t = 0; t < s.tokens.size(); ++t)
      CHECK(std::abs(s.logprobs[t] - std::log(replay.distribution(static_cast<Index>(t))(s.tokens[t], 0))) <= 1e-9);
  }
}

TEST_CASE("diversity label scales the label embedding by the row score") {
  const auto cfg = tiny_config(true);
  auto p = tiny_params(true, 2);
  auto batch = tiny_batch();
  CHECK_THROWS_AS(prepend_diversity_label(batch, {0.5, 0.5}, tiny_config(false)), ModelError);
  CHECK_THROWS_AS(prepend_diversity_label(batch, {0.5}, cfg), ModelError);

  auto labelled = prepend_diversity_label(batch, {0.2, 0.4}, cfg);
  CHECK(labelled.source_lengths == std::vector<Index>{4, 6});
  CHECK(labelled.source.col(0).cwiseEqual(kDivLabel).all());
  CHECK(labelled.source(0, 1) == 5);
  CHECK(labelled.source_scale(1, 0) == 2.0 * labelled.source_scale(0, 0));
  CHECK((labelled.source_scale.rightCols(5) == 1.0).all());

  auto enc = encode(p, labelled);
  for (int row = 0; row < 2; ++row) {
    const double score = row == 0 ? 0.2 : 0.4;
    auto manual = p;
    manual.source_embedding.col(kDivLabel) *= score;
    auto unit = prepend_diversity_label(batch, {1.0, 1.0}, cfg);
    auto ref = encode(manual, unit);
    for (Index t = 0; t < enc.length(); ++t)
      CHECK(max_abs_diff(enc.annotations[t].col(row), ref.annotations[t].col(row)) <= 1e-14);
  }

  SUBCASE("score 0 gives a content-free label") {
    auto zeroed = p;
    zeroed.source_embedding.col(kDivLabel).setZero();
    auto at_zero = encode(p, prepend_diversity_label(batch, {0.0, 0.0}, cfg));
    auto ref = encode(zeroed, prepend_diversity_label(batch, {1.0, 1.0}, cfg));
    for (Index t = 0; t < at_zero.length(); ++t) CHECK(at_zero.annotations[t] == ref.annotations[t]);
  }
  SUBCASE("score 1 passes the label embedding through") {
    auto unit = prepend_diversity_label(batch, {1.0, 1.0}, cfg);
    auto plain = unit;
    plain.source_scale.resize(0, 0);
    auto a = encode(p, unit), b = encode(p, plain);
    for (Index t = 0; t < a.length(); ++t) CHECK(a.annotations[t] == b.annotations[t]);
  }
}

TEST_CASE("ML gradient matches central finite differences for every parameter group") {
  auto p = tiny_params(false, 9);
  auto batch = tiny_batch();
  auto loss = [&](const Seq2SeqParams<double>& q) {
    auto enc = encode(q, batch);
    return ml_loss(decode_teacher_forced(q, enc, batch.target).distributions(), batch.target, batch.target_mask);
  };
  auto enc = encode(p, batch);
  auto tf = decode_teacher_forced(p, enc, batch.target);
  auto dists = tf.distributions();
  std::vector<Matrix<double>> dlogits;
  for (const auto& d : dists) dlogits.push_back(Matrix<double>::Zero(d.rows(), d.cols()));
  accumulate_ml_gradient(dists, batch.target, batch.target_mask, 1.0, dlogits);
  auto grad = Seq2SeqParams<double>::zeros_like(p);
  auto enc_grad = EncoderGradient<double>::zeros_like(enc);
  backward_decoder(p, enc, tf, dlogits, grad, enc_grad);
  backward_encoder(p, enc, enc_grad, grad);

  auto check = divseq::testing::check_gradient(p, grad, loss);
  CHECK(check.checked == p.size());
  CHECK(check.worst <= 1e-3);
}

TEST_CASE("parameter flatten and unflatten round-trip") {
  auto p = tiny_params();
  auto q = Seq2SeqParams<double>::zeros(tiny_config());
  q.unflatten(p.flatten());
  CHECK(q.flatten() == p.flatten());
  CHECK(p.size() == p.flatten().size());
  CHECK_THROWS_AS(q.unflatten(Vector<double>::Zero(3)), ModelError);
}
