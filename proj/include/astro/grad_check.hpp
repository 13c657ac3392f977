// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "astro/autodiff.hpp"

namespace astro {

struct GradCheckOptions {
  double step = 1e-5;
  double rel_tol = 1e-4;
  /// Entries whose analytic and numeric gradients are both below this
  /// magnitude are judged by absolute difference instead.
  double abs_tol = 1e-7;
  /// 0 checks every entry; otherwise a seeded random subset per parameter.
  std::size_t max_entries = 0;
  /// 0 disables; otherwise a seeded random subset of this many entries
  /// drawn across all parameters together.
  std::size_t max_total_entries = 0;
  std::uint64_t sample_seed = 0;
};

struct ParamGradReport {
  std::string name;
  std::size_t checked = 0;
  std::size_t non_finite = 0;
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;  // over entries handled by the absolute branch
  bool passed = true;
};

struct GradCheckReport {
  std::vector<ParamGradReport> params;

  bool passed() const {
    return std::all_of(params.begin(), params.end(), [](const auto& p) { return p.passed; });
  }
  double max_rel_error() const {
    double m = 0;
    for (const auto& p : params) m = std::max(m, p.max_rel_error);
    return m;
  }
};

/// Compares tape gradients of the scalar built by `f` against central
/// differences (f(p + h e_i) - f(p - h e_i)) / 2h. `f` must read the
/// parameters through Tape::param so they can be perturbed in place.
/// 64-bit only: 32-bit rounding swamps the finite-difference signal.
inline GradCheckReport grad_check(const std::function<Var<double>(Tape<double>&)>& f,
                                  const std::vector<NamedTensor<double>>& params, const GradCheckOptions& opt = {}) {
  std::vector<Tensor<double>> analytic;
  {
    Tape<double> tape;
    auto loss = f(tape);
    tape.backward(loss);
    for (const auto& p : params) analytic.push_back(tape.grad_of(*p.tensor));
  }

  auto eval = [&f]() {
    try {
      Tape<double> tape(false);
      return f(tape).value().item();
    } catch (const NonFiniteError&) {
      return std::numeric_limits<double>::quiet_NaN();
    } catch (const DomainError&) {
      return std::numeric_limits<double>::quiet_NaN();
    }
  };

  Rng rng(opt.sample_seed);
  std::vector<std::vector<std::size_t>> picked(params.size());
  if (opt.max_total_entries > 0) {
    std::vector<std::pair<std::size_t, std::size_t>> all;
    for (std::size_t pi = 0; pi < params.size(); ++pi)
      for (std::size_t i = 0; i < params[pi].tensor->size(); ++i) all.emplace_back(pi, i);
    rng.shuffle(all);
    if (all.size() > opt.max_total_entries) all.resize(opt.max_total_entries);
    for (const auto& [pi, i] : all) picked[pi].push_back(i);
  } else {
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
      auto& entries = picked[pi];
      entries.resize(params[pi].tensor->size());
      for (std::size_t i = 0; i < entries.size(); ++i) entries[i] = i;
      if (opt.max_entries > 0 && entries.size() > opt.max_entries) {
        rng.shuffle(entries);
        entries.resize(opt.max_entries);
      }
    }
  }

  GradCheckReport report;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto& tensor = *params[pi].tensor;
    ParamGradReport r;
    r.name = params[pi].name;
    auto& entries = picked[pi];
    std::sort(entries.begin(), entries.end());
    for (auto i : entries) {
      const double orig = tensor[i];
      tensor[i] = orig + opt.step;
      const double fp = eval();
      tensor[i] = orig - opt.step;
      const double fm = eval();
      tensor[i] = orig;
      ++r.checked;
      const double numeric = (fp - fm) / (2.0 * opt.step);
      const double a = analytic[pi][i];
      if (!std::isfinite(numeric) || !std::isfinite(a)) {
        ++r.non_finite;
        r.passed = false;
        continue;
      }
      const double diff = std::abs(a - numeric);
      const double scale = std::max(std::abs(a), std::abs(numeric));
      if (scale < opt.abs_tol) {
        r.max_abs_error = std::max(r.max_abs_error, diff);
        if (diff >= opt.abs_tol) r.passed = false;
      } else {
        const double rel = diff / scale;
        r.max_rel_error = std::max(r.max_rel_error, rel);
        if (rel >= opt.rel_tol) r.passed = false;
      }
    }
    report.params.push_back(std::move(r));
  }
  return report;
}

}  // namespace astro
