// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdio>
#include <functional>
#include <string>
#include <vector>

#include "astro/attention.hpp"
#include "astro/blocks.hpp"
#include "astro/data.hpp"
#include "astro/drop_path.hpp"
#include "astro/grad_check.hpp"
#include "astro/loss.hpp"

// Self-contained verification suites shared by the command-line tool and the
// acceptance binary. All run in 64-bit.

namespace astro {

struct CheckResult {
  explicit CheckResult(std::string n = "") : name(std::move(n)) {}

  std::string name;
  bool passed = true;
  std::string summary;                // one line describing the headline measurement
  std::string first_failure;          // empty when passed
  std::vector<std::string> details;   // one line per case

  void fail(const std::string& what) {
    if (passed) first_failure = what;
    passed = false;
  }
};

namespace detail {

inline std::string sci(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3e", v);
  return buf;
}

inline std::string grid_name(const GridSpec& g) {
  return std::to_string(g.height) + "x" + std::to_string(g.width) + (g.topology == Topology::Torus ? " torus" : " plane");
}

using TD = Tensor<double>;

// Bias for query i and key j computed from coordinates, independent of
// RelativeBiasTable::index.
inline double oracle_bias(const RelativeBiasTable<double>& b, const GridSpec& g, std::size_t i, std::size_t j) {
  const long H = static_cast<long>(g.height), W = static_cast<long>(g.width);
  long dh = static_cast<long>(i / g.width) - static_cast<long>(j / g.width);
  long dw = static_cast<long>(i % g.width) - static_cast<long>(j % g.width);
  switch (b.mode) {
    case BiasIndexing::Clamped2d:
      dh = std::max(-(H - 1), std::min(H - 1, dh));
      dw = std::max(-(W - 1), std::min(W - 1, dw));
      return b.table[static_cast<std::size_t>((dh + H - 1) * (2 * W - 1) + dw + W - 1)];
    case BiasIndexing::Circular1d: {
      const long n = H * W;
      return b.table[static_cast<std::size_t>(((static_cast<long>(i) - static_cast<long>(j)) % n + n) % n)];
    }
    case BiasIndexing::Circular2d:
      return b.table[static_cast<std::size_t>(((dh % H + H) % H) * W + (dw % W + W) % W)];
  }
  return 0;
}

// Attention rows a_ij = softmax_j(x_i . x_j + w_ij) by explicit loops.
inline TD loop_weights(const TD& x, const RelativeBiasTable<double>* b, const GridSpec& g) {
  const std::size_t n = x.dim(0), d = x.dim(1);
  TD a({n, n});
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> logit(n);
    double mx = -INFINITY;
    for (std::size_t j = 0; j < n; ++j) {
      double dot = 0;
      for (std::size_t c = 0; c < d; ++c) dot += x[i * d + c] * x[j * d + c];
      logit[j] = dot + (b ? oracle_bias(*b, g, i, j) : 0.0);
      mx = std::max(mx, logit[j]);
    }
    double z = 0;
    for (std::size_t j = 0; j < n; ++j) z += std::exp(logit[j] - mx);
    for (std::size_t j = 0; j < n; ++j) a[i * n + j] = std::exp(logit[j] - mx) / z;
  }
  return a;
}

// y_i = sum_j a_ij x_j with a from loop_weights: a triple loop over i, j, c.
inline TD loop_attention(const TD& x, const RelativeBiasTable<double>& b, const GridSpec& g) {
  const std::size_t n = x.dim(0), d = x.dim(1);
  const auto a = loop_weights(x, &b, g);
  TD y({n, d});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t c = 0; c < d; ++c) y[i * d + c] += a[i * n + j] * x[j * d + c];
  return y;
}

inline BiasIndexing circular_mode(const GridSpec& g) {
  return g.height == 1 ? BiasIndexing::Circular1d : BiasIndexing::Circular2d;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Finite-difference gradient suite.

struct GradCase {
  std::string name;
  std::function<GradCheckReport(Rng&)> run;
};

/// Every differentiable op and block, each checked entry by entry against
/// central differences (h = 1e-5, relative error < 1e-4).
inline std::vector<GradCase> grad_check_cases() {
  using detail::TD;
  using Bias = RelativeBiasTable<double>;
  std::vector<GradCase> cases;
  auto weighted = [](const Var<double>& y, const TD& w) { return sum(mul(y, y.tape().constant(w))); };

  cases.push_back({"elementwise and shape ops", [=](Rng& rng) {
                     auto a = TD::randn({2, 3}, rng), b = TD::uniform({2, 3}, rng, 0.5, 2.0);
                     auto c = TD::randn({3, 4}, rng), w = TD::randn({2, 2}, rng);
                     return grad_check(
                         [&](Tape<double>& t) {
                           auto A = t.param(a), B = t.param(b);
                           auto e = add(mul(gelu(A), log(B)), div(sigmoid(A), B));
                           e = sub(e, scale(exp(scale(A, 0.3)), 0.5));
                           auto m = matmul(e, t.param(c));
                           auto s = softmax(permute(reshape(m, {2, 2, 2}), {2, 0, 1}), 2);
                           return weighted(transpose(reshape(sum_to(s, {2, 2, 1}), {2, 2})), w);
                         },
                         {{"a", &a}, {"b", &b}, {"c", &c}});
                   }});
  cases.push_back({"batched matmul", [=](Rng& rng) {
                     auto a = TD::randn({2, 3, 4}, rng), b = TD::randn({2, 5, 4}, rng), w = TD::randn({2, 3, 5}, rng);
                     return grad_check([&](Tape<double>& t) { return weighted(bmm(t.param(a), t.param(b), true), w); },
                                       {{"a", &a}, {"b", &b}});
                   }});
  for (auto mode : {PadMode::Zero, PadMode::Circular})
    for (std::size_t stride : {1u, 2u})
      cases.push_back({std::string("conv2d ") + (mode == PadMode::Zero ? "zero" : "circular") + " pad, stride " +
                           std::to_string(stride),
                       [=](Rng& rng) {
                         auto x = TD::randn({2, 2, 5, 5}, rng);
                         auto p = Conv2dParams<double>::init(3, 2, 3, stride, true, rng);
                         p.bias = TD::randn({3}, rng);
                         p.pad_mode = mode;
                         const std::size_t o = stride == 1 ? 5 : 3;
                         auto w = TD::randn({2, 3, o, o}, rng);
                         return grad_check([&](Tape<double>& t) { return weighted(conv2d(t.param(x), p), w); },
                                           {{"x", &x}, {"weight", &p.weight}, {"bias", &*p.bias}});
                       }});
  for (std::size_t stride : {1u, 2u})
    cases.push_back({"depthwise conv stride " + std::to_string(stride), [=](Rng& rng) {
                       auto x = TD::randn({2, 3, 6, 6}, rng);
                       auto p = DepthwiseParams<double>::init(3, 3, stride, rng);
                       const std::size_t o = 6 / stride;
                       auto w = TD::randn({2, 3, o, o}, rng);
                       return grad_check([&](Tape<double>& t) { return weighted(depthwise_conv2d(t.param(x), p), w); },
                                         {{"x", &x}, {"weight", &p.weight}});
                     }});
  for (auto kind : {PoolKind::Max, PoolKind::Avg})
    cases.push_back({kind == PoolKind::Max ? "max pool" : "avg pool", [=](Rng& rng) {
                       auto x = TD::randn({2, 2, 4, 6}, rng);
                       auto w = TD::randn({2, 2, 2, 3}, rng);
                       return grad_check([&](Tape<double>& t) { return weighted(pool2d(t.param(x), kind), w); },
                                         {{"x", &x}});
                     }});
  cases.push_back({"global average pool", [=](Rng& rng) {
                     auto x = TD::randn({2, 3, 3, 4}, rng);
                     auto w = TD::randn({2, 3}, rng);
                     return grad_check([&](Tape<double>& t) { return weighted(global_avg_pool(t.param(x)), w); },
                                       {{"x", &x}});
                   }});
  cases.push_back({"layer norm", [=](Rng& rng) {
                     auto x = TD::randn({2, 3, 4}, rng), w = TD::randn({2, 3, 4}, rng);
                     auto p = NormParams<double>::layer(4);
                     p.gamma = TD::randn({4}, rng);
                     p.beta = TD::randn({4}, rng);
                     return grad_check([&](Tape<double>& t) { return weighted(layer_norm(t.param(x), p), w); },
                                       {{"x", &x}, {"gamma", &p.gamma}, {"beta", &p.beta}});
                   }});
  for (auto mode : {Mode::Train, Mode::Eval})
    cases.push_back({std::string("batch norm ") + (mode == Mode::Train ? "train" : "eval"), [=](Rng& rng) {
                       auto x = TD::randn({2, 3, 3, 4}, rng), w = TD::randn({2, 3, 3, 4}, rng);
                       auto p = NormParams<double>::batch(3);
                       p.gamma = TD::randn({3}, rng);
                       p.beta = TD::randn({3}, rng);
                       p.running_mean = TD::randn({3}, rng);
                       p.running_var = TD::uniform({3}, rng, 0.5, 2.0);
                       const auto saved = p;
                       return grad_check(
                           [&](Tape<double>& t) {
                             p.running_mean = saved.running_mean;
                             p.running_var = saved.running_var;
                             return weighted(batch_norm(t.param(x), p, mode), w);
                           },
                           {{"x", &x}, {"gamma", &p.gamma}, {"beta", &p.beta}});
                     }});
  cases.push_back({"squeeze-excite", [=](Rng& rng) {
                     auto x = TD::randn({2, 4, 3, 3}, rng), w = TD::randn({2, 4, 3, 3}, rng);
                     auto p = SqueezeExciteParams<double>::init(4, 0.5, rng);
                     p.reduce.bias = TD::uniform({2}, rng, 0.2, 0.5);  // keep relu off its kink
                     NamedTensors<double> params{{"x", &x}};
                     p.collect("se", params);
                     return grad_check([&](Tape<double>& t) { return weighted(squeeze_excite(t.param(x), p), w); },
                                       params);
                   }});
  cases.push_back({"linear", [=](Rng& rng) {
                     auto x = TD::randn({2, 3, 4}, rng), w = TD::randn({2, 3, 5}, rng);
                     auto p = LinearParams<double>::init(4, 5, true, rng);
                     p.bias = TD::randn({5}, rng);
                     return grad_check([&](Tape<double>& t) { return weighted(linear(t.param(x), p), w); },
                                       {{"x", &x}, {"weight", &p.weight}, {"bias", &*p.bias}});
                   }});
  for (auto c : {std::pair{GridSpec::line(5), BiasIndexing::Circular1d},
                 std::pair{GridSpec{3, 3, Topology::Torus}, BiasIndexing::Circular2d},
                 std::pair{GridSpec{2, 3, Topology::Plane}, BiasIndexing::Clamped2d}})
    cases.push_back({"literal relative attention, " + detail::grid_name(c.first), [=](Rng& rng) {
                       auto b = Bias::random(c.second, c.first, rng);
                       auto x = TD::randn({c.first.tokens(), 3}, rng, 0.8);
                       auto w = TD::randn({c.first.tokens(), 3}, rng);
                       return grad_check(
                           [&](Tape<double>& t) { return weighted(relative_attention_literal(t.param(x), b, c.first), w); },
                           {{"x", &x}, {"bias", &b.table}});
                     }});
  cases.push_back({"multi-head relative attention", [=](Rng& rng) {
                     const GridSpec g{2, 3, Topology::Plane};
                     auto p = AttentionParams<double>::init(4, 2, 6, g, rng);
                     p.bias = Bias::random(BiasIndexing::Clamped2d, g, rng, 1.0, 2);
                     auto x = TD::randn({2, 6, 4}, rng), w = TD::randn({2, 6, 6}, rng);
                     NamedTensors<double> params{{"x", &x}};
                     p.collect("attn", params);
                     return grad_check(
                         [&](Tape<double>& t) { return weighted(relative_attention_multihead(t.param(x), p, g), w); },
                         params);
                   }});
  cases.push_back({"transformer block", [=](Rng& rng) {
                     const GridSpec g{3, 3, Topology::Plane};
                     auto p = TransformerBlockParams<double>::init(8, 2, g, rng);
                     p.attn.bias = Bias::random(BiasIndexing::Clamped2d, g, rng, 1.0, 2);
                     auto x = TD::randn({1, 9, 8}, rng), w = TD::randn({1, 9, 8}, rng);
                     NamedTensors<double> params{{"x", &x}};
                     p.collect("block", params);
                     return grad_check(
                         [&](Tape<double>& t) { return weighted(transformer_block(t.param(x), p, g, DropPathState{}), w); },
                         params);
                   }});
  for (auto mode : {Mode::Train, Mode::Eval})
    cases.push_back({std::string("MBConv stride 1, ") + (mode == Mode::Train ? "train" : "eval"), [=](Rng& rng) {
                       auto p = MBConvParams<double>::init(4, 4, 4, 1, 0.25, rng);
                       p.se.reduce.bias = TD::uniform(p.se.reduce.bias->shape(), rng, 0.3, 0.6);
                       auto x = TD::randn({2, 4, 6, 6}, rng), w = TD::randn({2, 4, 6, 6}, rng);
                       NamedTensors<double> params{{"x", &x}}, buffers;
                       p.collect("mb", params);
                       p.collect_buffers("mb", buffers);
                       std::vector<TD> saved;
                       for (auto& b : buffers) saved.push_back(*b.tensor);
                       return grad_check(
                           [&](Tape<double>& t) {
                             for (std::size_t i = 0; i < buffers.size(); ++i) *buffers[i].tensor = saved[i];
                             return weighted(mbconv_block(t.param(x), p, DropPathState{0.0, mode, nullptr, {}}), w);
                           },
                           params);
                     }});
  cases.push_back({"MBConv down-sampler", [=](Rng& rng) {
                     auto p = MBConvParams<double>::init(4, 6, 4, 2, 0.25, rng);
                     p.se.reduce.bias = TD::uniform(p.se.reduce.bias->shape(), rng, 0.3, 0.6);
                     auto x = TD::randn({2, 4, 6, 6}, rng), w = TD::randn({2, 6, 3, 3}, rng);
                     NamedTensors<double> params{{"x", &x}};
                     p.collect("down", params);
                     return grad_check(
                         [&](Tape<double>& t) {
                           return weighted(mbconv_downsample(t.param(x), p, DropPathState{0.0, Mode::Eval, nullptr, {}}), w);
                         },
                         params);
                   }});
  cases.push_back({"attention down-sampler", [=](Rng& rng) {
                     const GridSpec g{4, 4, Topology::Plane};
                     auto p = DownsampleAttentionParams<double>::init(4, 6, 2, g, rng);
                     p.attn.bias = Bias::random(BiasIndexing::Clamped2d, g.pooled(), rng, 1.0, 2);
                     auto x = TD::randn({2, 16, 4}, rng), w = TD::randn({2, 4, 6}, rng);
                     NamedTensors<double> params{{"x", &x}};
                     p.collect("down", params);
                     return grad_check(
                         [&](Tape<double>& t) {
                           return weighted(downsample_attention_block(t.param(x), p, g, DropPathState{}), w);
                         },
                         params);
                   }});
  cases.push_back({"transformer down block", [=](Rng& rng) {
                     const GridSpec g{4, 4, Topology::Plane};
                     auto p = TransformerDownParams<double>::init(4, 8, 2, g, rng);
                     p.down.attn.bias = Bias::random(BiasIndexing::Clamped2d, g.pooled(), rng, 1.0, 2);
                     auto x = TD::randn({2, 16, 4}, rng), w = TD::randn({2, 4, 8}, rng);
                     NamedTensors<double> params{{"x", &x}};
                     p.collect("down", params);
                     return grad_check(
                         [&](Tape<double>& t) { return weighted(transformer_down_block(t.param(x), p, g, DropPathState{}), w); },
                         params);
                   }});
  cases.push_back({"soft-target cross entropy", [=](Rng& rng) {
                     auto z = TD::randn({4, 5}, rng, 3.0);
                     auto targets = TD::uniform({4, 5}, rng, 0.0, 1.0);
                     for (std::size_t b = 0; b < 4; ++b) {
                       double s = 0;
                       for (std::size_t k = 0; k < 5; ++k) s += targets[b * 5 + k];
                       for (std::size_t k = 0; k < 5; ++k) targets[b * 5 + k] /= s;
                     }
                     return grad_check([&](Tape<double>& t) { return cross_entropy_soft(t.param(z), targets); },
                                       {{"logits", &z}});
                   }});
  return cases;
}

inline CheckResult run_grad_check_suite(std::uint64_t seed = 0) {
  CheckResult r{"grad-check"};
  double worst = 0;
  std::size_t i = 0;
  for (const auto& c : grad_check_cases()) {
    Rng rng(seed * 1000003ULL + ++i);
    const auto rep = c.run(rng);
    std::size_t entries = 0;
    std::string worst_param;
    double case_worst = 0;
    for (const auto& p : rep.params) {
      entries += p.checked;
      if (p.max_rel_error >= case_worst) case_worst = p.max_rel_error, worst_param = p.name;
    }
    worst = std::max(worst, case_worst);
    const std::string line = c.name + ": " + std::to_string(entries) + " entries, max rel err " +
                             detail::sci(case_worst) + " (" + worst_param + ")";
    r.details.push_back((rep.passed() ? "ok   " : "FAIL ") + line);
    if (!rep.passed()) {
      std::string why = line;
      for (const auto& p : rep.params)
        if (!p.passed)
          why += "; " + p.name + " rel " + detail::sci(p.max_rel_error) + " abs " + detail::sci(p.max_abs_error) +
                 (p.non_finite ? " non-finite" : "");
      r.fail(why);
    }
  }
  r.summary = std::to_string(r.details.size()) + " cases, max rel err " + detail::sci(worst) + " (tol 1e-4)";
  return r;
}

// ---------------------------------------------------------------------------
// Shift equivariance on tori.

/// For every grid, `instances` random (x, bias) pairs; every cyclic shift of
/// the input must shift the output identically.
inline CheckResult run_equivariance_suite(const std::vector<GridSpec>& grids, std::size_t d, std::size_t instances,
                                          std::uint64_t seed = 0, double tol = 1e-10) {
  CheckResult r{"equivariance-check"};
  if (d == 0) throw ConfigError("feature dimension must be positive");
  Rng rng(seed);
  double worst = 0;
  for (const auto& g : grids) {
    if (g.topology != Topology::Torus) throw ConfigError("equivariance needs torus grids");
    double gw = 0;
    for (std::size_t k = 0; k < instances; ++k) {
      auto b = RelativeBiasTable<double>::random(detail::circular_mode(g), g, rng);
      auto x = Tensor<double>::randn({g.tokens(), d}, rng);
      const auto y = relative_attention_literal(x, b, g);
      for (long sh = 0; sh < static_cast<long>(g.height); ++sh)
        for (long sw = 0; sw < static_cast<long>(g.width); ++sw) {
          const auto lhs = relative_attention_literal(shift_tokens(x, sh, sw, g), b, g);
          const double dev = max_abs_diff(lhs, shift_tokens(y, sh, sw, g));
          gw = std::max(gw, dev);
          if (!(dev < tol))
            r.fail(detail::grid_name(g) + " instance " + std::to_string(k) + " shift (" + std::to_string(sh) + "," +
                   std::to_string(sw) + "): deviation " + detail::sci(dev));
        }
    }
    worst = std::max(worst, gw);
    r.details.push_back(detail::grid_name(g) + ", d=" + std::to_string(d) + ": max deviation " + detail::sci(gw));
  }
  r.summary = std::to_string(grids.size()) + " grids x " + std::to_string(instances) +
              " instances, all shifts: max deviation " + detail::sci(worst) + " (tol " + detail::sci(tol) + ")";
  return r;
}

/// 1-D tori of 4..9 tokens and 2-D tori with sides 2..4.
inline std::vector<GridSpec> standard_tori() {
  std::vector<GridSpec> g;
  for (std::size_t n = 4; n <= 9; ++n) g.push_back(GridSpec::line(n));
  for (std::size_t h = 2; h <= 4; ++h)
    for (std::size_t w = 2; w <= 4; ++w) g.push_back({h, w, Topology::Torus});
  return g;
}

// ---------------------------------------------------------------------------
// Limits of the attention formula.

/// Zero bias gives plain dot-product attention; a constant input gives rows
/// equal to the softmax of the bias kernel.
inline CheckResult run_limits_suite(std::uint64_t seed = 0, std::size_t instances = 25, double tol = 1e-12) {
  CheckResult r{"limits"};
  Rng rng(seed);
  const std::vector<GridSpec> grids{GridSpec::line(6), {3, 3, Topology::Torus}, {3, 4, Topology::Plane},
                                    {1, 7, Topology::Plane}};
  double worst_zero = 0, worst_const = 0;
  for (const auto& g : grids) {
    const auto mode = g.topology == Topology::Torus ? detail::circular_mode(g) : BiasIndexing::Clamped2d;
    for (std::size_t k = 0; k < instances; ++k) {
      auto zero = RelativeBiasTable<double>::zeros(mode, g);
      auto x = Tensor<double>::randn({g.tokens(), 3}, rng);
      const double dz = max_abs_diff(attention_weights(x, zero, g), detail::loop_weights(x, nullptr, g));
      worst_zero = std::max(worst_zero, dz);
      if (!(dz < tol)) r.fail("zero bias on " + detail::grid_name(g) + ": deviation " + detail::sci(dz));

      auto b = RelativeBiasTable<double>::random(mode, g, rng);
      const double c = rng.uniform(-2.0, 2.0);
      Tensor<double> xc({g.tokens(), 3}, c);
      // Constant rows make x_i . x_j identical for all pairs, so only the bias varies.
      const auto kernel = detail::loop_weights(Tensor<double>({g.tokens(), 1}, 0.0), &b, g);
      const double dc = max_abs_diff(attention_weights(xc, b, g), kernel);
      worst_const = std::max(worst_const, dc);
      if (!(dc < tol)) r.fail("constant input on " + detail::grid_name(g) + ": deviation " + detail::sci(dc));
    }
  }
  r.details.push_back("zero bias vs plain attention: max deviation " + detail::sci(worst_zero));
  r.details.push_back("constant input vs softmax(bias kernel): max deviation " + detail::sci(worst_const));
  r.summary = "zero-bias " + detail::sci(worst_zero) + ", constant-input " + detail::sci(worst_const) + " (tol " +
              detail::sci(tol) + ")";
  return r;
}

// ---------------------------------------------------------------------------
// Input adaptivity.

/// With the bias held fixed, independent random inputs must produce attention
/// matrices that differ by more than `min_gap` in max-abs.
inline CheckResult run_adaptivity_suite(std::uint64_t seed = 0, std::size_t trials = 100, double min_gap = 1e-3) {
  CheckResult r{"adaptivity-check"};
  Rng rng(seed);
  const GridSpec g{4, 4, Topology::Plane};
  const auto b = RelativeBiasTable<double>::random(BiasIndexing::Clamped2d, g, rng);
  std::size_t distinct = 0;
  double smallest = INFINITY;
  for (std::size_t k = 0; k < trials; ++k) {
    const auto a1 = attention_weights(Tensor<double>::randn({g.tokens(), 4}, rng), b, g);
    const auto a2 = attention_weights(Tensor<double>::randn({g.tokens(), 4}, rng), b, g);
    const double gap = max_abs_diff(a1, a2);
    smallest = std::min(smallest, gap);
    if (gap > min_gap) ++distinct;
    else r.fail("trial " + std::to_string(k) + ": attention matrices differ by only " + detail::sci(gap));
  }
  r.summary = std::to_string(distinct) + "/" + std::to_string(trials) + " pairs differ by > " + detail::sci(min_gap) +
              " (smallest gap " + detail::sci(smallest) + ")";
  return r;
}

// ---------------------------------------------------------------------------
// Vectorised attention against the loop oracle.

inline CheckResult run_oracle_suite(std::uint64_t seed = 0, double tol = 1e-10) {
  CheckResult r{"oracle"};
  Rng rng(seed);
  std::vector<std::pair<GridSpec, BiasIndexing>> cases;
  for (std::size_t n = 1; n <= 16; ++n) cases.push_back({GridSpec::line(n), BiasIndexing::Circular1d});
  for (std::size_t h = 1; h <= 4; ++h)
    for (std::size_t w = 1; w <= 4; ++w) {
      cases.push_back({{h, w, Topology::Torus}, BiasIndexing::Circular2d});
      cases.push_back({{h, w, Topology::Plane}, BiasIndexing::Clamped2d});
    }
  double worst = 0;
  for (const auto& [g, mode] : cases)
    for (std::size_t d : {1u, 2u, 4u, 8u}) {
      auto b = RelativeBiasTable<double>::random(mode, g, rng);
      auto x = Tensor<double>::randn({g.tokens(), d}, rng, 0.7);
      const double dev = max_abs_diff(relative_attention_literal(x, b, g), detail::loop_attention(x, b, g));
      worst = std::max(worst, dev);
      if (!(dev < tol))
        r.fail(detail::grid_name(g) + " d=" + std::to_string(d) + ": deviation " + detail::sci(dev));
    }
  r.summary = std::to_string(cases.size() * 4) + " cases (N <= 16, d <= 8): max deviation " + detail::sci(worst) +
              " (tol " + detail::sci(tol) + ")";
  return r;
}

// ---------------------------------------------------------------------------
// Stratified sampler.

/// `batches` batches from a balanced set and from a set whose class 0 holds
/// 3% of the examples; every per-class count must lie in the 10 +- 4% bounds.
inline CheckResult run_sampler_suite(std::size_t batches, std::size_t batch_size, std::size_t classes,
                                     std::uint64_t seed = 0) {
  CheckResult r{"sampler-check"};
  if (classes == 0) throw ConfigError("classes must be positive");
  const auto [lo, hi] = class_count_bounds(batch_size, classes, 0.04);
  const std::size_t per = std::max<std::size_t>(batch_size, 100);
  auto make_index = [&](bool imbalanced) {
    std::vector<std::vector<std::size_t>> idx(classes);
    std::size_t next = 0;
    const std::size_t total = per * classes;
    for (std::size_t c = 0; c < classes; ++c) {
      std::size_t n = per;
      if (imbalanced && classes > 1)
        n = c == 0 ? std::max<std::size_t>(1, total * 3 / 100) : (total - total * 3 / 100) / (classes - 1);
      for (std::size_t i = 0; i < n; ++i) idx[c].push_back(next++);
    }
    return idx;
  };
  for (bool imbalanced : {false, true}) {
    const auto index = make_index(imbalanced);
    std::vector<std::size_t> label_of;
    for (std::size_t c = 0; c < classes; ++c)
      for (auto i : index[c]) {
        if (label_of.size() <= i) label_of.resize(i + 1);
        label_of[i] = c;
      }
    StratifiedSampler s(index, batch_size, Rng(seed + (imbalanced ? 1 : 0)));
    std::size_t mn = batch_size, mx = 0, bad = 0;
    for (std::size_t b = 0; b < batches; ++b) {
      std::vector<std::size_t> counts(classes, 0);
      for (auto i : s.next()) ++counts[label_of[i]];
      bool ok = true;
      for (std::size_t c = 0; c < classes; ++c) {
        mn = std::min(mn, counts[c]);
        mx = std::max(mx, counts[c]);
        if (counts[c] < lo || counts[c] > hi) {
          ok = false;
          r.fail(std::string(imbalanced ? "imbalanced" : "balanced") + " batch " + std::to_string(b) + ": class " +
                 std::to_string(c) + " count " + std::to_string(counts[c]));
        }
      }
      bad += !ok;
    }
    r.details.push_back(std::string(imbalanced ? "imbalanced (class 0 = " + std::to_string(index[0].size()) + " of " +
                                                     std::to_string(label_of.size()) + ")"
                                               : "balanced") +
                        ": counts in [" + std::to_string(mn) + ", " + std::to_string(mx) + "], " +
                        std::to_string(batches - bad) + "/" + std::to_string(batches) + " batches in bounds");
  }
  r.summary = std::to_string(batches) + " batches x 2 sets, B=" + std::to_string(batch_size) + ", K=" +
              std::to_string(classes) + ", bounds [" + std::to_string(lo) + ", " + std::to_string(hi) + "]";
  return r;
}

// ---------------------------------------------------------------------------
// Mixup and stochastic-depth statistics.

inline CheckResult run_mixup_suite(std::uint64_t seed = 0, std::size_t draws = 100000, std::size_t pairs = 1000) {
  CheckResult r{"mixup"};
  Rng rng(seed);
  const double alpha = 0.8;
  const std::vector<std::size_t> la{2}, lb{7};
  LabeledBatch<double> a{Tensor<double>({1, 1, 1, 1}, 0.0), smooth_labels<double>(la, 10, 0.0)};
  LabeledBatch<double> b{Tensor<double>({1, 1, 1, 1}, 1.0), smooth_labels<double>(lb, 10, 0.0)};
  double mean = 0, sq = 0;
  for (std::size_t i = 0; i < draws; ++i) {
    double lambda = 0;
    mixup(a, b, alpha, rng, &lambda);
    mean += lambda;
    sq += lambda * lambda;
  }
  mean /= static_cast<double>(draws);
  const double var = sq / static_cast<double>(draws) - mean * mean;
  const double want_var = 1.0 / (4.0 * (2.0 * alpha + 1.0));
  if (!(std::abs(mean - 0.5) <= 0.01)) r.fail("mean(lambda) = " + std::to_string(mean));
  if (!(std::abs(var / want_var - 1.0) <= 0.05)) r.fail("var(lambda) = " + std::to_string(var));

  std::size_t hull_violations = 0;
  const std::vector<std::size_t> pl{1, 4}, ql{6, 4};
  for (std::size_t i = 0; i < pairs; ++i) {
    LabeledBatch<double> p{Tensor<double>::uniform({2, 3, 4, 4}, rng, 0, 1), smooth_labels<double>(pl, 10, 0.1)};
    LabeledBatch<double> q{Tensor<double>::uniform({2, 3, 4, 4}, rng, 0, 1), smooth_labels<double>(ql, 10, 0.1)};
    const auto m = mixup(p, q, alpha, rng);
    for (std::size_t k = 0; k < m.images.size(); ++k)
      if (m.images[k] < std::min(p.images[k], q.images[k]) || m.images[k] > std::max(p.images[k], q.images[k]))
        ++hull_violations;
  }
  if (hull_violations) r.fail(std::to_string(hull_violations) + " pixels outside the convex hull");
  char buf[200];
  std::snprintf(buf, sizeof buf, "%zu draws: mean %.5f (want 0.5 +- 0.01), var %.5f (want %.5f +- 5%%); %zu pairs, %zu hull violations",
                draws, mean, var, want_var, pairs, hull_violations);
  r.summary = buf;
  return r;
}

inline CheckResult run_drop_path_suite(std::uint64_t seed = 0, std::size_t trials = 100000, double rate = 0.2) {
  CheckResult r{"drop-path"};
  Rng rng(seed);
  Tape<double> tape(false);
  const auto y =
      drop_path(tape.constant(Tensor<double>({trials, 1}, 1.0)), DropPathState{rate, Mode::Train, &rng, {}}).value();
  std::size_t dropped = 0;
  double mean = 0;
  for (std::size_t i = 0; i < trials; ++i) {
    dropped += y[i] == 0.0;
    mean += y[i];
  }
  mean /= static_cast<double>(trials);
  const double observed = static_cast<double>(dropped) / static_cast<double>(trials);
  if (!(std::abs(observed - rate) <= 0.01)) r.fail("drop rate " + std::to_string(observed));
  if (!(std::abs(mean - 1.0) <= 0.01)) r.fail("mean output " + std::to_string(mean));
  char buf[160];
  std::snprintf(buf, sizeof buf, "%zu trials: drop rate %.5f (want %.2f +- 0.01), mean output %.5f (want 1 +- 1%%)", trials,
                observed, rate, mean);
  r.summary = buf;
  return r;
}

}  // namespace astro
