// Copyright 2026 The divseq Authors. All Rights Reserved.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>

#include "divseq/model.hpp"

namespace divseq {

template <typename Scalar>
struct AdamState {
  Seq2SeqParams<Scalar> first_moment;
  Seq2SeqParams<Scalar> second_moment;
  Index steps = 0;

  static AdamState zeros_like(const Seq2SeqParams<Scalar>& params) {
    return {Seq2SeqParams<Scalar>::zeros_like(params), Seq2SeqParams<Scalar>::zeros_like(params), 0};
  }
};

/// Rescales `grad` in place so its global L2 norm is at most `max_norm`
/// (no-op when max_norm is 0). Returns the norm before clipping.
template <typename Scalar>
Scalar clip_gradient_norm(Seq2SeqParams<Scalar>& grad, Scalar max_norm) {
  const Scalar norm = std::sqrt(grad.squared_norm());
  if (max_norm > Scalar(0) && norm > max_norm) grad.scale(max_norm / norm);
  return norm;
}

/// Bias-corrected adaptive-moment update.
template <typename Scalar>
void adam_update(Seq2SeqParams<Scalar>& params, const Seq2SeqParams<Scalar>& grad, AdamState<Scalar>& state,
                 Scalar learning_rate, Scalar beta1 = Scalar(0.9), Scalar beta2 = Scalar(0.999),
                 Scalar epsilon = Scalar(1e-8)) {
  ++state.steps;
  const Scalar c1 = Scalar(1) - std::pow(beta1, static_cast<Scalar>(state.steps));
  const Scalar c2 = Scalar(1) - std::pow(beta2, static_cast<Scalar>(state.steps));
  std::vector<Scalar*> g_ptr, m_ptr, v_ptr;
  const_cast<Seq2SeqParams<Scalar>&>(grad).for_each([&](const std::string&, auto& t) { g_ptr.push_back(t.data()); });
  state.first_moment.for_each([&](const std::string&, auto& t) { m_ptr.push_back(t.data()); });
  state.second_moment.for_each([&](const std::string&, auto& t) { v_ptr.push_back(t.data()); });
  std::size_t k = 0;
  params.for_each([&](const std::string&, auto& t) {
    const Index n = t.size();
    Eigen::Map<Eigen::Array<Scalar, Eigen::Dynamic, 1>> w(t.data(), n), m(m_ptr[k], n), v(v_ptr[k], n);
    Eigen::Map<const Eigen::Array<Scalar, Eigen::Dynamic, 1>> g(g_ptr[k], n);
    m = beta1 * m + (Scalar(1) - beta1) * g;
    v = beta2 * v + (Scalar(1) - beta2) * g.square();
    w -= learning_rate * (m / c1) / ((v / c2).sqrt() + epsilon);
    ++k;
  });
}

}  // namespace divseq
