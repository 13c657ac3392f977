// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>

#include "astro/autodiff.hpp"

namespace astro {

/// Mean over the batch of -sum_c t_c * log softmax(logits)_c, with
/// log-sum-exp stabilisation. Targets are constants.
template <class T>
Var<T> cross_entropy_soft(const Var<T>& logits, const Tensor<T>& targets) {
  const auto& z = logits.value();
  if (z.rank() != 2 || targets.shape() != z.shape())
    throw ShapeError("cross_entropy_soft: logits " + to_string(z.shape()) + " vs targets " + to_string(targets.shape()));
  const std::size_t B = z.dim(0), K = z.dim(1);
  if (B == 0 || K == 0) throw ShapeError("cross_entropy_soft: empty batch");
  Tensor<T> probs(z.shape());
  T total = 0;
  for (std::size_t b = 0; b < B; ++b) {
    const T* row = z.data().data() + b * K;
    T mx = row[0];
    for (std::size_t k = 1; k < K; ++k) mx = std::max(mx, row[k]);
    T se = 0;
    for (std::size_t k = 0; k < K; ++k) se += std::exp(row[k] - mx);
    const T lse = mx + std::log(se);
    for (std::size_t k = 0; k < K; ++k) {
      probs[b * K + k] = std::exp(row[k] - lse);
      const T t = targets[b * K + k];
      if (t != T(0)) total -= t * (row[k] - lse);
    }
  }
  if (!std::isfinite(total)) throw NonFiniteError("cross_entropy_soft: non-finite loss");
  const std::size_t li = logits.id();
  return logits.tape().record(
      Tensor<T>::scalar(total / static_cast<T>(B)), {li},
      [=, probs = std::move(probs)](Tape<T>& t, const Tensor<T>& g) {
        auto& gl = t.grad_ref(li);
        const T s = g.item() / static_cast<T>(B);
        for (std::size_t b = 0; b < B; ++b) {
          T mass = 0;
          for (std::size_t k = 0; k < K; ++k) mass += targets[b * K + k];
          for (std::size_t k = 0; k < K; ++k) gl[b * K + k] += s * (probs[b * K + k] * mass - targets[b * K + k]);
        }
      });
}

}  // namespace astro
