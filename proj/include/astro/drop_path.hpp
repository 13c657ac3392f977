// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <optional>
#include <string>

#include "astro/autodiff.hpp"

namespace astro {

/// Stochastic-depth state handed to every residual block.
struct DropPathState {
  double rate = 0.0;
  Mode mode = Mode::Eval;
  Rng* rng = nullptr;
  /// Test hook: when set, every sample is dropped (true) or kept (false)
  /// instead of sampling.
  std::optional<bool> forced;

  void validate() const {
    if (!(rate >= 0.0 && rate < 1.0)) throw ConfigError("drop-path rate must be in [0, 1), got " + std::to_string(rate));
  }
};

/// Per-sample mask for a batch of `batch` samples: 0 with probability
/// `rate`, otherwise 1/(1-rate) so the expectation is preserved.
template <class T>
Tensor<T> drop_path_mask(std::size_t batch, std::size_t rank, const DropPathState& dp) {
  Shape shape(rank, 1);
  shape[0] = batch;
  Tensor<T> mask(shape);
  const T keep = static_cast<T>(1.0 / (1.0 - dp.rate));
  for (std::size_t b = 0; b < batch; ++b) {
    bool dropped;
    if (dp.forced) {
      dropped = *dp.forced;
    } else {
      if (!dp.rng) throw ContractError("drop_path: training with a positive rate needs an rng");
      dropped = dp.rng->bernoulli(dp.rate);
    }
    mask[b] = dropped ? T(0) : keep;
  }
  return mask;
}

/// Residual-branch dropout. Eval mode and rate 0 pass the branch through.
template <class T>
Var<T> drop_path(const Var<T>& branch, const DropPathState& dp) {
  dp.validate();
  if (dp.mode == Mode::Eval) return branch;
  if (dp.rate == 0.0 && !dp.forced) return branch;
  const auto& s = branch.shape();
  if (s.empty()) throw ShapeError("drop_path needs a batch axis");
  auto mask = branch.tape().constant(drop_path_mask<T>(s[0], s.size(), dp));
  return mul(branch, mask);
}

}  // namespace astro
