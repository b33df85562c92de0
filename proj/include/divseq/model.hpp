// Copyright 2026 The divseq Authors. All Rights Reserved.
// SPDX-License-Identifier: Apache-2.0
//
// Attention encoder-decoder: one bidirectional LSTM layer over the context,
// one LSTM decoder layer, additive attention queried by the decoder state.
// Everything is batched column-wise (one column per batch row) and carries
// its own reverse-mode gradient.

#pragma once

#include <cassert>
#include <cmath>
#include <limits>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "divseq/corpus.hpp"
#include "divseq/types.hpp"

namespace divseq {

class ModelError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ModelConfig {
  Index vocab_size = 0;
  Index embedding_dim = 256;
  Index encoder_hidden = 256;  // per direction
  Index decoder_hidden = 512;
  Index attention_dim = 256;
  bool diversity_label = false;

  Index annotation_dim() const { return 2 * encoder_hidden; }
  void validate() const {
    if (vocab_size <= kNumReserved) throw ModelError("vocabulary must contain content tokens");
    if (embedding_dim <= 0 || encoder_hidden <= 0 || decoder_hidden <= 0 || attention_dim <= 0)
      throw ModelError("model dimensions must be positive");
  }
  bool operator==(const ModelConfig&) const = default;
};

template <typename Scalar>
struct LstmParams {
  Matrix<Scalar> input_weight;   // 4H x In, gate order i f g o
  Matrix<Scalar> hidden_weight;  // 4H x H
  Vector<Scalar> bias;           // 4H

  static LstmParams zeros(Index input, Index hidden) {
    return {Matrix<Scalar>::Zero(4 * hidden, input), Matrix<Scalar>::Zero(4 * hidden, hidden),
            Vector<Scalar>::Zero(4 * hidden)};
  }
  Index hidden() const { return hidden_weight.cols(); }

  template <typename F>
  void for_each(const std::string& prefix, F&& f) {
    f(prefix + ".input_weight", input_weight);
    f(prefix + ".hidden_weight", hidden_weight);
    f(prefix + ".bias", bias);
  }
  template <typename F>
  void for_each(const std::string& prefix, F&& f) const {
    f(prefix + ".input_weight", input_weight);
    f(prefix + ".hidden_weight", hidden_weight);
    f(prefix + ".bias", bias);
  }
};

/// All trainable tensors. The same type holds gradients.
template <typename Scalar>
struct Seq2SeqParams {
  Matrix<Scalar> source_embedding;  // E x V
  Matrix<Scalar> target_embedding;  // E x V
  LstmParams<Scalar> encoder_forward;
  LstmParams<Scalar> encoder_backward;
  Matrix<Scalar> bridge_weight;  // Hd x 2H
  Vector<Scalar> bridge_bias;
  Matrix<Scalar> attention_query;  // A x Hd
  Matrix<Scalar> attention_key;    // A x 2H
  Vector<Scalar> attention_score;  // A
  LstmParams<Scalar> decoder;      // input E
  Matrix<Scalar> output_weight;    // V x (Hd + 2H)
  Vector<Scalar> output_bias;

  static Seq2SeqParams zeros(const ModelConfig& cfg) {
    cfg.validate();
    const Index v = cfg.vocab_size, e = cfg.embedding_dim, h = cfg.encoder_hidden, hd = cfg.decoder_hidden,
                a = cfg.attention_dim;
    Seq2SeqParams p;
    p.source_embedding = Matrix<Scalar>::Zero(e, v);
    p.target_embedding = Matrix<Scalar>::Zero(e, v);
    p.encoder_forward = LstmParams<Scalar>::zeros(e, h);
    p.encoder_backward = LstmParams<Scalar>::zeros(e, h);
    p.bridge_weight = Matrix<Scalar>::Zero(hd, 2 * h);
    p.bridge_bias = Vector<Scalar>::Zero(hd);
    p.attention_query = Matrix<Scalar>::Zero(a, hd);
    p.attention_key = Matrix<Scalar>::Zero(a, 2 * h);
    p.attention_score = Vector<Scalar>::Zero(a);
    p.decoder = LstmParams<Scalar>::zeros(e, hd);
    p.output_weight = Matrix<Scalar>::Zero(v, hd + 2 * h);
    p.output_bias = Vector<Scalar>::Zero(v);
    return p;
  }

  static Seq2SeqParams zeros_like(const Seq2SeqParams& other) {
    Seq2SeqParams p = other;
    p.for_each([](const std::string&, auto& t) { t.setZero(); });
    return p;
  }

  /// Uniform in [-range, range], drawn tensor by tensor in `for_each` order.
  static Seq2SeqParams random_uniform(const ModelConfig& cfg, Scalar range, std::uint64_t seed) {
    auto p = zeros(cfg);
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> dist(-static_cast<double>(range), static_cast<double>(range));
    p.for_each([&](const std::string&, auto& t) {
      for (Index j = 0; j < t.cols(); ++j)
        for (Index i = 0; i < t.rows(); ++i) t(i, j) = static_cast<Scalar>(dist(rng));
    });
    return p;
  }

  template <typename F>
  void for_each(F&& f) {
    f(std::string("source_embedding"), source_embedding);
    f(std::string("target_embedding"), target_embedding);
    encoder_forward.for_each("encoder_forward", f);
    encoder_backward.for_each("encoder_backward", f);
    f(std::string("bridge_weight"), bridge_weight);
    f(std::string("bridge_bias"), bridge_bias);
    f(std::string("attention_query"), attention_query);
    f(std::string("attention_key"), attention_key);
    f(std::string("attention_score"), attention_score);
    decoder.for_each("decoder", f);
    f(std::string("output_weight"), output_weight);
    f(std::string("output_bias"), output_bias);
  }
  template <typename F>
  void for_each(F&& f) const {
    const_cast<Seq2SeqParams*>(this)->for_each([&](const std::string& name, const auto& t) { f(name, t); });
  }

  Index size() const {
    Index n = 0;
    for_each([&](const std::string&, const auto& t) { n += t.size(); });
    return n;
  }

  Seq2SeqParams& operator+=(const Seq2SeqParams& other) {
    std::vector<const Scalar*> src;
    other.for_each([&](const std::string&, const auto& t) { src.push_back(t.data()); });
    std::size_t k = 0;
    for_each([&](const std::string&, auto& t) {
      t += std::remove_reference_t<decltype(t)>::Map(src[k++], t.rows(), t.cols());
    });
    return *this;
  }
  void scale(Scalar s) {
    for_each([&](const std::string&, auto& t) { t *= s; });
  }
  Scalar squared_norm() const {
    Scalar n(0);
    for_each([&](const std::string&, const auto& t) { n += t.squaredNorm(); });
    return n;
  }

  /// Flat copy in `for_each` order.
  Vector<Scalar> flatten() const {
    Vector<Scalar> out(size());
    Index at = 0;
    for_each([&](const std::string&, const auto& t) {
      out.segment(at, t.size()) = Eigen::Map<const Vector<Scalar>>(t.data(), t.size());
      at += t.size();
    });
    return out;
  }
  void unflatten(const Vector<Scalar>& flat) {
    if (flat.size() != size()) throw ModelError("flat parameter vector has the wrong length");
    Index at = 0;
    for_each([&](const std::string&, auto& t) {
      Eigen::Map<Vector<Scalar>>(t.data(), t.size()) = flat.segment(at, t.size());
      at += t.size();
    });
  }
};

namespace detail {

template <typename Scalar>
Matrix<Scalar> sigmoid(const Matrix<Scalar>& z) {
  return (Scalar(1) / (Scalar(1) + (-z.array()).exp())).matrix();
}

/// Column-wise softmax.
template <typename Scalar>
Matrix<Scalar> softmax_columns(const Matrix<Scalar>& logits) {
  Matrix<Scalar> out(logits.rows(), logits.cols());
  for (Index b = 0; b < logits.cols(); ++b) {
    const Scalar m = logits.col(b).maxCoeff();
    out.col(b) = (logits.col(b).array() - m).exp().matrix();
    out.col(b) /= out.col(b).sum();
  }
  return out;
}

template <typename Scalar>
Matrix<Scalar> gather_columns(const Matrix<Scalar>& table, const TokenMatrix& tokens, Index t) {
  Matrix<Scalar> out(table.rows(), tokens.rows());
  for (Index b = 0; b < tokens.rows(); ++b) out.col(b) = table.col(tokens(b, t));
  return out;
}

template <typename Scalar>
struct LstmStep {
  Matrix<Scalar> input, h_prev, c_prev;
  Matrix<Scalar> in_gate, forget_gate, cell_gate, out_gate, c_new, tanh_c;
  RowVector<Scalar> mask;  // empty when every column advances
  Matrix<Scalar> h, c;     // after masking
};

template <typename Scalar>
LstmStep<Scalar> lstm_forward(const LstmParams<Scalar>& p, const Matrix<Scalar>& x, const Matrix<Scalar>& h_prev,
                              const Matrix<Scalar>& c_prev, const RowVector<Scalar>& mask = {}) {
  const Index h = p.hidden();
  LstmStep<Scalar> s;
  Matrix<Scalar> z = p.input_weight * x + p.hidden_weight * h_prev;
  z.colwise() += p.bias;
  s.in_gate = sigmoid<Scalar>(z.topRows(h));
  s.forget_gate = sigmoid<Scalar>(z.middleRows(h, h));
  s.cell_gate = z.middleRows(2 * h, h).array().tanh().matrix();
  s.out_gate = sigmoid<Scalar>(z.bottomRows(h));
  s.c_new = (s.forget_gate.array() * c_prev.array() + s.in_gate.array() * s.cell_gate.array()).matrix();
  s.tanh_c = s.c_new.array().tanh().matrix();
  Matrix<Scalar> h_new = (s.out_gate.array() * s.tanh_c.array()).matrix();
  if (mask.size() > 0) {
    const auto keep = (Scalar(1) - mask.array()).matrix();
    s.h = (h_new.array().rowwise() * mask.array() + h_prev.array().rowwise() * keep.array()).matrix();
    s.c = (s.c_new.array().rowwise() * mask.array() + c_prev.array().rowwise() * keep.array()).matrix();
  } else {
    s.h = std::move(h_new);
    s.c = s.c_new;
  }
  s.input = x;
  s.h_prev = h_prev;
  s.c_prev = c_prev;
  s.mask = mask;
  return s;
}

/// Backprop through one step. `dh`/`dc` are gradients of the masked outputs;
/// on return they hold gradients of h_prev/c_prev. Returns d input.
template <typename Scalar>
Matrix<Scalar> lstm_backward(const LstmParams<Scalar>& p, const LstmStep<Scalar>& s, Matrix<Scalar>& dh,
                             Matrix<Scalar>& dc, LstmParams<Scalar>& grad) {
  const Index h = p.hidden();
  Matrix<Scalar> dh_new = dh, dc_new = dc, dh_carry, dc_carry;
  if (s.mask.size() > 0) {
    const auto keep = (Scalar(1) - s.mask.array()).matrix();
    dh_new = (dh.array().rowwise() * s.mask.array()).matrix();
    dc_new = (dc.array().rowwise() * s.mask.array()).matrix();
    dh_carry = (dh.array().rowwise() * keep.array()).matrix();
    dc_carry = (dc.array().rowwise() * keep.array()).matrix();
  }
  const auto d_out = (dh_new.array() * s.tanh_c.array()).eval();
  const auto dc_total =
      (dc_new.array() + dh_new.array() * s.out_gate.array() * (Scalar(1) - s.tanh_c.array().square())).eval();
  Matrix<Scalar> dz(4 * h, s.input.cols());
  dz.topRows(h) = (dc_total * s.cell_gate.array() * s.in_gate.array() * (Scalar(1) - s.in_gate.array())).matrix();
  dz.middleRows(h, h) =
      (dc_total * s.c_prev.array() * s.forget_gate.array() * (Scalar(1) - s.forget_gate.array())).matrix();
  dz.middleRows(2 * h, h) = (dc_total * s.in_gate.array() * (Scalar(1) - s.cell_gate.array().square())).matrix();
  dz.bottomRows(h) = (d_out * s.out_gate.array() * (Scalar(1) - s.out_gate.array())).matrix();

  grad.input_weight.noalias() += dz * s.input.transpose();
  grad.hidden_weight.noalias() += dz * s.h_prev.transpose();
  grad.bias += dz.rowwise().sum();

  dc = (dc_total * s.forget_gate.array()).matrix();
  dh.noalias() = p.hidden_weight.transpose() * dz;
  if (s.mask.size() > 0) {
    dh += dh_carry;
    dc += dc_carry;
  }
  return p.input_weight.transpose() * dz;
}

}  // namespace detail

/// Encoder annotations plus everything needed to backprop through them.
template <typename Scalar>
struct EncoderOutput {
  TokenMatrix source;
  Eigen::ArrayXXd source_scale;         // empty when unscaled
  Matrix<Scalar> attention_mask;        // L x B, 1 on real positions
  std::vector<Matrix<Scalar>> annotations;  // L entries of 2H x B
  std::vector<Matrix<Scalar>> keys;         // L entries of A x B
  Matrix<Scalar> bridge_input;          // 2H x B
  Matrix<Scalar> initial_hidden;        // Hd x B
  std::vector<detail::LstmStep<Scalar>> forward_steps, backward_steps;

  Index rows() const { return source.rows(); }
  Index length() const { return source.cols(); }
};

/// Gradients flowing back into an EncoderOutput.
template <typename Scalar>
struct EncoderGradient {
  std::vector<Matrix<Scalar>> annotations;
  std::vector<Matrix<Scalar>> keys;
  Matrix<Scalar> initial_hidden;

  static EncoderGradient zeros_like(const EncoderOutput<Scalar>& enc) {
    EncoderGradient g;
    for (const auto& a : enc.annotations) g.annotations.push_back(Matrix<Scalar>::Zero(a.rows(), a.cols()));
    for (const auto& k : enc.keys) g.keys.push_back(Matrix<Scalar>::Zero(k.rows(), k.cols()));
    g.initial_hidden = Matrix<Scalar>::Zero(enc.initial_hidden.rows(), enc.initial_hidden.cols());
    return g;
  }
};

template <typename Scalar>
EncoderOutput<Scalar> encode(const Seq2SeqParams<Scalar>& params, const PaddedBatch& batch) {
  const Index rows = batch.rows(), len = batch.source.cols();
  const Index h = params.encoder_forward.hidden();
  for (auto n : batch.source_lengths)
    if (n < 1 || n > len) throw ModelError("source lengths must lie in [1, max length]");
  if (batch.source_scale.size() > 0 && (batch.source_scale.rows() != rows || batch.source_scale.cols() != len))
    throw ModelError("source scale does not match the source shape");

  EncoderOutput<Scalar> enc;
  enc.source = batch.source;
  enc.source_scale = batch.source_scale;
  enc.attention_mask = Matrix<Scalar>::Zero(len, rows);
  for (Index b = 0; b < rows; ++b) enc.attention_mask.col(b).head(batch.source_lengths[static_cast<std::size_t>(b)]).setOnes();

  std::vector<Matrix<Scalar>> inputs(static_cast<std::size_t>(len));
  for (Index t = 0; t < len; ++t) {
    auto x = detail::gather_columns(params.source_embedding, batch.source, t);
    if (batch.source_scale.size() > 0)
      for (Index b = 0; b < rows; ++b) x.col(b) *= static_cast<Scalar>(batch.source_scale(b, t));
    inputs[static_cast<std::size_t>(t)] = std::move(x);
  }

  Matrix<Scalar> hf = Matrix<Scalar>::Zero(h, rows), cf = Matrix<Scalar>::Zero(h, rows);
  for (Index t = 0; t < len; ++t) {
    RowVector<Scalar> mask = enc.attention_mask.row(t);
    enc.forward_steps.push_back(detail::lstm_forward(params.encoder_forward, inputs[static_cast<std::size_t>(t)], hf, cf, mask));
    hf = enc.forward_steps.back().h;
    cf = enc.forward_steps.back().c;
  }
  Matrix<Scalar> hb = Matrix<Scalar>::Zero(h, rows), cb = Matrix<Scalar>::Zero(h, rows);
  enc.backward_steps.resize(static_cast<std::size_t>(len));
  for (Index t = len - 1; t >= 0; --t) {
    RowVector<Scalar> mask = enc.attention_mask.row(t);
    auto& step = enc.backward_steps[static_cast<std::size_t>(t)];
    step = detail::lstm_forward(params.encoder_backward, inputs[static_cast<std::size_t>(t)], hb, cb, mask);
    hb = step.h;
    cb = step.c;
  }
  for (Index t = 0; t < len; ++t) {
    Matrix<Scalar> ann(2 * h, rows);
    ann.topRows(h) = enc.forward_steps[static_cast<std::size_t>(t)].h;
    ann.bottomRows(h) = enc.backward_steps[static_cast<std::size_t>(t)].h;
    enc.keys.push_back(params.attention_key * ann);
    enc.annotations.push_back(std::move(ann));
  }
  enc.bridge_input.resize(2 * h, rows);
  enc.bridge_input.topRows(h) = hf;
  enc.bridge_input.bottomRows(h) = enc.backward_steps.front().h;
  Matrix<Scalar> pre = params.bridge_weight * enc.bridge_input;
  pre.colwise() += params.bridge_bias;
  enc.initial_hidden = pre.array().tanh().matrix();
  return enc;
}

template <typename Scalar>
void backward_encoder(const Seq2SeqParams<Scalar>& params, const EncoderOutput<Scalar>& enc,
                      EncoderGradient<Scalar> upstream, Seq2SeqParams<Scalar>& grad) {
  const Index rows = enc.rows(), len = enc.length();
  const Index h = params.encoder_forward.hidden();

  for (Index t = 0; t < len; ++t) {
    const auto& dk = upstream.keys[static_cast<std::size_t>(t)];
    grad.attention_key.noalias() += dk * enc.annotations[static_cast<std::size_t>(t)].transpose();
    upstream.annotations[static_cast<std::size_t>(t)].noalias() += params.attention_key.transpose() * dk;
  }

  Matrix<Scalar> dpre =
      (upstream.initial_hidden.array() * (Scalar(1) - enc.initial_hidden.array().square())).matrix();
  grad.bridge_weight.noalias() += dpre * enc.bridge_input.transpose();
  grad.bridge_bias += dpre.rowwise().sum();
  Matrix<Scalar> dbridge = params.bridge_weight.transpose() * dpre;

  std::vector<Matrix<Scalar>> dinputs(static_cast<std::size_t>(len));

  Matrix<Scalar> dh = dbridge.topRows(h), dc = Matrix<Scalar>::Zero(h, rows);
  for (Index t = len - 1; t >= 0; --t) {
    dh += upstream.annotations[static_cast<std::size_t>(t)].topRows(h);
    dinputs[static_cast<std::size_t>(t)] =
        detail::lstm_backward(params.encoder_forward, enc.forward_steps[static_cast<std::size_t>(t)], dh, dc, grad.encoder_forward);
  }
  dh = dbridge.bottomRows(h);
  dc.setZero();
  for (Index t = 0; t < len; ++t) {
    dh += upstream.annotations[static_cast<std::size_t>(t)].bottomRows(h);
    dinputs[static_cast<std::size_t>(t)] +=
        detail::lstm_backward(params.encoder_backward, enc.backward_steps[static_cast<std::size_t>(t)], dh, dc, grad.encoder_backward);
  }
  for (Index t = 0; t < len; ++t) {
    for (Index b = 0; b < rows; ++b) {
      if (enc.attention_mask(t, b) == Scalar(0)) continue;
      Scalar scale = enc.source_scale.size() > 0 ? static_cast<Scalar>(enc.source_scale(b, t)) : Scalar(1);
      grad.source_embedding.col(enc.source(b, t)) += scale * dinputs[static_cast<std::size_t>(t)].col(b);
    }
  }
}

/// Decoder recurrent state between steps.
template <typename Scalar>
struct DecoderState {
  Matrix<Scalar> hidden, cell;
};

template <typename Scalar>
DecoderState<Scalar> initial_decoder_state(const EncoderOutput<Scalar>& enc) {
  return {enc.initial_hidden, Matrix<Scalar>::Zero(enc.initial_hidden.rows(), enc.initial_hidden.cols())};
}

/// Activations of one decoder step kept for backprop.
template <typename Scalar>
struct DecoderStepCache {
  detail::LstmStep<Scalar> lstm;
  std::vector<Matrix<Scalar>> attention_hidden;  // per source position, A x B (tanh)
  Matrix<Scalar> attention;                      // L x B
  Matrix<Scalar> readout;                        // (Hd + 2H) x B
  Matrix<Scalar> logits;                         // V x B
  Matrix<Scalar> probabilities;                  // V x B
  std::vector<TokenId> inputs;
};

/// One decoder step: consume `inputs` (one token per batch row), attend, and
/// emit the next-token distribution. Updates `state` in place.
template <typename Scalar>
DecoderStepCache<Scalar> decoder_step(const Seq2SeqParams<Scalar>& params, const EncoderOutput<Scalar>& enc,
                                      DecoderState<Scalar>& state, const std::vector<TokenId>& inputs) {
  const Index rows = enc.rows(), len = enc.length();
  DecoderStepCache<Scalar> cache;
  cache.inputs = inputs;
  Matrix<Scalar> x(params.target_embedding.rows(), rows);
  for (Index b = 0; b < rows; ++b) x.col(b) = params.target_embedding.col(inputs[static_cast<std::size_t>(b)]);
  cache.lstm = detail::lstm_forward(params.decoder, x, state.hidden, state.cell);
  state.hidden = cache.lstm.h;
  state.cell = cache.lstm.c;

  const Matrix<Scalar> query = params.attention_query * state.hidden;
  Matrix<Scalar> scores(len, rows);
  cache.attention_hidden.resize(static_cast<std::size_t>(len));
  for (Index j = 0; j < len; ++j) {
    auto& hidden = cache.attention_hidden[static_cast<std::size_t>(j)];
    hidden = (query + enc.keys[static_cast<std::size_t>(j)]).array().tanh().matrix();
    scores.row(j).noalias() = params.attention_score.transpose() * hidden;
  }
  cache.attention = Matrix<Scalar>::Zero(len, rows);
  for (Index b = 0; b < rows; ++b) {
    Scalar m = -std::numeric_limits<Scalar>::infinity();
    for (Index j = 0; j < len; ++j)
      if (enc.attention_mask(j, b) != Scalar(0)) m = std::max(m, scores(j, b));
    Scalar z(0);
    for (Index j = 0; j < len; ++j) {
      if (enc.attention_mask(j, b) == Scalar(0)) continue;
      cache.attention(j, b) = std::exp(scores(j, b) - m);
      z += cache.attention(j, b);
    }
    cache.attention.col(b) /= z;
  }

  const Index hd = state.hidden.rows();
  cache.readout.resize(hd + enc.annotations.front().rows(), rows);
  cache.readout.topRows(hd) = state.hidden;
  auto context = cache.readout.bottomRows(enc.annotations.front().rows());
  context.setZero();
  for (Index j = 0; j < len; ++j)
    context += (enc.annotations[static_cast<std::size_t>(j)].array().rowwise() * cache.attention.row(j).array()).matrix();

  cache.logits = params.output_weight * cache.readout;
  cache.logits.colwise() += params.output_bias;
  cache.probabilities = detail::softmax_columns<Scalar>(cache.logits);
  return cache;
}

/// Per-step decoder output under teacher forcing.
template <typename Scalar>
struct TeacherForcedOutput {
  std::vector<DecoderStepCache<Scalar>> steps;

  Index length() const { return static_cast<Index>(steps.size()); }
  /// V x B distribution of step t.
  const Matrix<Scalar>& distribution(Index t) const { return steps[static_cast<std::size_t>(t)].probabilities; }
  std::vector<Matrix<Scalar>> distributions() const {
    std::vector<Matrix<Scalar>> out;
    for (const auto& s : steps) out.push_back(s.probabilities);
    return out;
  }
};

/// Step t conditions on BOS followed by targets(:, 0..t-1). Emits exactly
/// targets.cols() steps; positions past a row's length are computed but are
/// meaningless and must be masked by the caller.
template <typename Scalar>
TeacherForcedOutput<Scalar> decode_teacher_forced(const Seq2SeqParams<Scalar>& params,
                                                  const EncoderOutput<Scalar>& enc, const TokenMatrix& targets) {
  if (targets.rows() != enc.rows()) throw ModelError("target rows do not match the encoded batch");
  TeacherForcedOutput<Scalar> out;
  auto state = initial_decoder_state(enc);
  std::vector<TokenId> inputs(static_cast<std::size_t>(enc.rows()), kBos);
  for (Index t = 0; t < targets.cols(); ++t) {
    out.steps.push_back(decoder_step(params, enc, state, inputs));
    for (Index b = 0; b < enc.rows(); ++b) inputs[static_cast<std::size_t>(b)] = targets(b, t);
  }
  return out;
}

/// Backprop from per-step logit gradients (V x B each) through the decoder.
/// Parameter gradients accumulate into `grad`; encoder-side gradients into
/// `enc_grad`.
template <typename Scalar>
void backward_decoder(const Seq2SeqParams<Scalar>& params, const EncoderOutput<Scalar>& enc,
                      const TeacherForcedOutput<Scalar>& out, const std::vector<Matrix<Scalar>>& dlogits,
                      Seq2SeqParams<Scalar>& grad, EncoderGradient<Scalar>& enc_grad) {
  const Index rows = enc.rows(), len = enc.length();
  const Index hd = params.decoder.hidden();
  const Index ann_dim = enc.annotations.front().rows();
  Matrix<Scalar> dh = Matrix<Scalar>::Zero(hd, rows), dc = Matrix<Scalar>::Zero(hd, rows);

  for (Index t = out.length() - 1; t >= 0; --t) {
    const auto& s = out.steps[static_cast<std::size_t>(t)];
    const auto& dl = dlogits[static_cast<std::size_t>(t)];
    grad.output_weight.noalias() += dl * s.readout.transpose();
    grad.output_bias += dl.rowwise().sum();
    const Matrix<Scalar> dreadout = params.output_weight.transpose() * dl;
    dh += dreadout.topRows(hd);
    const auto dcontext = dreadout.bottomRows(ann_dim);

    Matrix<Scalar> dattn(len, rows);
    for (Index j = 0; j < len; ++j) {
      const auto& ann = enc.annotations[static_cast<std::size_t>(j)];
      dattn.row(j) = ann.cwiseProduct(dcontext).colwise().sum();
      enc_grad.annotations[static_cast<std::size_t>(j)] +=
          (dcontext.array().rowwise() * s.attention.row(j).array()).matrix();
    }
    const RowVector<Scalar> weighted = s.attention.cwiseProduct(dattn).colwise().sum();
    const Matrix<Scalar> dscores =
        (s.attention.array() * (dattn.rowwise() - weighted).array()).matrix();

    Matrix<Scalar> dquery = Matrix<Scalar>::Zero(params.attention_query.rows(), rows);
    for (Index j = 0; j < len; ++j) {
      const auto& hidden = s.attention_hidden[static_cast<std::size_t>(j)];
      grad.attention_score.noalias() += hidden * dscores.row(j).transpose();
      Matrix<Scalar> dpre = ((params.attention_score * dscores.row(j)).array() *
                             (Scalar(1) - hidden.array().square()))
                                .matrix();
      enc_grad.keys[static_cast<std::size_t>(j)] += dpre;
      dquery += dpre;
    }
    grad.attention_query.noalias() += dquery * s.lstm.h.transpose();
    dh.noalias() += params.attention_query.transpose() * dquery;

    Matrix<Scalar> dx = detail::lstm_backward(params.decoder, s.lstm, dh, dc, grad.decoder);
    for (Index b = 0; b < rows; ++b) grad.target_embedding.col(s.inputs[static_cast<std::size_t>(b)]) += dx.col(b);
  }
  enc_grad.initial_hidden += dh;
}

/// Batch of one row per source; targets are a placeholder EOS.
template <typename Scalar>
EncoderOutput<Scalar> encode_sources(const Seq2SeqParams<Scalar>& params, const std::vector<TokenSeq>& sources) {
  return encode(params, source_batch(sources));
}

/// Argmax decoding, ties to the lower id. EOS terminates and is not returned.
/// When `step_distributions` is given it receives each step's V x B
/// distribution and `step_mask` marks (row, step) pairs still decoding.
template <typename Scalar>
std::vector<TokenSeq> decode_greedy(const Seq2SeqParams<Scalar>& params, const EncoderOutput<Scalar>& enc,
                                    Index max_len, std::vector<Matrix<Scalar>>* step_distributions = nullptr,
                                    MaskMatrix* step_mask = nullptr) {
  if (max_len < 1) throw ModelError("max length must be at least 1");
  const Index rows = enc.rows();
  std::vector<TokenSeq> out(static_cast<std::size_t>(rows));
  std::vector<char> done(static_cast<std::size_t>(rows), 0);
  std::vector<TokenId> inputs(static_cast<std::size_t>(rows), kBos);
  MaskMatrix mask = MaskMatrix::Zero(rows, max_len);
  auto state = initial_decoder_state(enc);
  Index remaining = rows;
  for (Index t = 0; t < max_len && remaining > 0; ++t) {
    auto step = decoder_step(params, enc, state, inputs);
    for (Index b = 0; b < rows; ++b) {
      auto& fin = done[static_cast<std::size_t>(b)];
      if (fin) continue;
      mask(b, t) = 1;
      Index best = 0;
      step.probabilities.col(b).maxCoeff(&best);  // first maximum wins
      auto tok = static_cast<TokenId>(best);
      inputs[static_cast<std::size_t>(b)] = tok;
      if (tok == kEos) {
        fin = 1;
        --remaining;
      } else {
        out[static_cast<std::size_t>(b)].push_back(tok);
      }
    }
    if (step_distributions) step_distributions->push_back(std::move(step.probabilities));
  }
  if (step_mask) *step_mask = mask.leftCols(step_distributions ? static_cast<Index>(step_distributions->size()) : max_len);
  return out;
}

template <typename Scalar>
TokenSeq decode_greedy(const Seq2SeqParams<Scalar>& params, const TokenSeq& source, Index max_len) {
  return decode_greedy(params, encode_sources(params, {source}), max_len).front();
}

struct SampledSequence {
  TokenSeq tokens;               // includes the terminating EOS when one was drawn
  std::vector<double> logprobs;  // log q(token_t | prefix) per drawn token
  bool terminated = false;

  /// Tokens with any EOS removed.
  TokenSeq content() const {
    TokenSeq c;
    for (auto t : tokens)
      if (t != kEos) c.push_back(t);
    return c;
  }
};

/// Ancestral sampling from softmax(logits / temperature), one draw per row
/// per step, until EOS or `max_len` draws.
template <typename Scalar>
std::vector<SampledSequence> decode_sampled(const Seq2SeqParams<Scalar>& params, const EncoderOutput<Scalar>& enc,
                                            Index max_len, std::mt19937_64& rng, double temperature = 1.0) {
  if (max_len < 1) throw ModelError("max length must be at least 1");
  if (!(temperature > 0.0)) throw ModelError("temperature must be positive");
  const Index rows = enc.rows();
  std::vector<SampledSequence> out(static_cast<std::size_t>(rows));
  std::vector<TokenId> inputs(static_cast<std::size_t>(rows), kBos);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto state = initial_decoder_state(enc);
  Index remaining = rows;
  Eigen::ArrayXd scaled;
  for (Index t = 0; t < max_len && remaining > 0; ++t) {
    auto step = decoder_step(params, enc, state, inputs);
    for (Index b = 0; b < rows; ++b) {
      auto& seq = out[static_cast<std::size_t>(b)];
      if (seq.terminated) continue;
      scaled = step.logits.col(b).template cast<double>().array() / temperature;
      scaled -= scaled.maxCoeff();
      const double log_z = std::log(scaled.exp().sum());
      const double u = unit(rng);
      double cumulative = 0.0;
      Index pick = -1, last_positive = 0;
      for (Index k = 0; k < scaled.size(); ++k) {
        const double q = std::exp(scaled(k) - log_z);
        if (q > 0.0) last_positive = k;
        cumulative += q;
        if (u < cumulative) {
          pick = k;
          break;
        }
      }
      if (pick < 0) pick = last_positive;
      auto tok = static_cast<TokenId>(pick);
      seq.tokens.push_back(tok);
      seq.logprobs.push_back(scaled(pick) - log_z);
      inputs[static_cast<std::size_t>(b)] = tok;
      if (tok == kEos) {
        seq.terminated = true;
        --remaining;
      }
    }
  }
  return out;
}

template <typename Scalar>
SampledSequence decode_sampled(const Seq2SeqParams<Scalar>& params, const TokenSeq& source, Index max_len,
                               std::uint64_t seed, double temperature = 1.0) {
  std::mt19937_64 rng(seed);
  return decode_sampled(params, encode_sources(params, {source}), max_len, rng, temperature).front();
}

/// Puts DIVLABEL at source position 0 of every row; its embedding is scaled by
/// the row's score at lookup.
inline PaddedBatch prepend_diversity_label(const PaddedBatch& batch, const std::vector<double>& scores,
                                           const ModelConfig& cfg) {
  if (!cfg.diversity_label) throw ModelError("diversity label used on a model configured without it");
  const Index rows = batch.rows(), len = batch.source.cols();
  if (static_cast<Index>(scores.size()) != rows) throw ModelError("one diversity score per batch row is required");
  PaddedBatch out = batch;
  out.source.resize(rows, len + 1);
  out.source.col(0).setConstant(kDivLabel);
  out.source.rightCols(len) = batch.source;
  out.source_scale = Eigen::ArrayXXd::Ones(rows, len + 1);
  if (batch.source_scale.size() > 0) out.source_scale.rightCols(len) = batch.source_scale;
  for (Index b = 0; b < rows; ++b) {
    const double s = scores[static_cast<std::size_t>(b)];
    if (!std::isfinite(s)) throw ModelError("diversity score must be finite");
    out.source_scale(b, 0) = s;
    ++out.source_lengths[static_cast<std::size_t>(b)];
  }
  return out;
}

}  // namespace divseq
