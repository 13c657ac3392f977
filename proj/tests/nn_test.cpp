// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>

#include "astro/grad_check.hpp"
#include "astro/nn.hpp"

using namespace astro;
using TD = Tensor<double>;

namespace {

TD eval(const std::function<Var<double>(Tape<double>&)>& f) {
  Tape<double> t(false);
  return f(t).value();
}

void expect_near(const TD& a, const TD& b, double tol) {
  ASSERT_EQ(a.shape(), b.shape());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], tol) << "entry " << i;
}

// Naive per-channel loop, zero padding.
TD depthwise_oracle(const TD& x, const TD& w, std::size_t stride, std::size_t pad) {
  const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3), k = w.dim(1);
  const std::size_t OH = (H + 2 * pad - k) / stride + 1, OW = (W + 2 * pad - k) / stride + 1;
  TD out({B, C, OH, OW});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t oy = 0; oy < OH; ++oy)
        for (std::size_t ox = 0; ox < OW; ++ox) {
          double s = 0;
          for (std::size_t i = 0; i < k; ++i)
            for (std::size_t j = 0; j < k; ++j) {
              const long y = static_cast<long>(oy * stride + i) - static_cast<long>(pad);
              const long xx = static_cast<long>(ox * stride + j) - static_cast<long>(pad);
              if (y < 0 || xx < 0 || y >= static_cast<long>(H) || xx >= static_cast<long>(W)) continue;
              s += w.at({c, i, j}) * x.at({b, c, static_cast<std::size_t>(y), static_cast<std::size_t>(xx)});
            }
          out.at({b, c, oy, ox}) = s;
        }
  return out;
}

// Circular spatial shift of a [B,C,H,W] map.
TD roll(const TD& x, long sh, long sw) {
  const long H = static_cast<long>(x.dim(2)), W = static_cast<long>(x.dim(3));
  TD y(x.shape());
  for (std::size_t bc = 0; bc < x.dim(0) * x.dim(1); ++bc)
    for (long h = 0; h < H; ++h)
      for (long w = 0; w < W; ++w)
        y[bc * H * W + h * W + w] = x[bc * H * W + ((h - sh) % H + H) % H * W + ((w - sw) % W + W) % W];
  return y;
}

double sigmoid_ref(double v) { return 1.0 / (1.0 + std::exp(-v)); }

}  // namespace

TEST(Conv2d, UnitPointwiseKernelIsIdentity) {
  Rng rng(1);
  auto x = TD::randn({2, 1, 4, 5}, rng);
  auto y = eval([&](Tape<double>& t) { return conv2d(t.constant(x), t.constant(TD::ones({1, 1, 1, 1})), std::nullopt, 1, 0); });
  expect_near(y, x, 0.0);
}

TEST(Conv2d, AllOnesKernelCountsOverlap) {
  auto y = eval([&](Tape<double>& t) {
    return conv2d(t.constant(TD::ones({1, 1, 3, 3})), t.constant(TD::ones({1, 1, 3, 3})), std::nullopt, 1, 1);
  });
  expect_near(y, TD::from({1, 1, 3, 3}, {4, 6, 4, 6, 9, 6, 4, 6, 4}), 0.0);
}

TEST(Conv2d, StrideTwoOutputSize) {
  auto y = eval([&](Tape<double>& t) {
    return conv2d(t.constant(TD::ones({1, 1, 4, 4})), t.constant(TD::ones({1, 1, 3, 3})), std::nullopt, 2, 1);
  });
  EXPECT_EQ(y.shape(), (Shape{1, 1, 2, 2}));
}

TEST(Conv2d, OddKernelSamePaddingPreservesShape) {
  Rng rng(2);
  for (std::size_t k : {1u, 3u, 5u}) {
    auto p = Conv2dParams<double>::init(3, 2, k, 1, true, rng);
    auto y = eval([&](Tape<double>& t) { return conv2d(t.constant(TD::randn({1, 2, 6, 7}, rng)), p); });
    EXPECT_EQ(y.shape(), (Shape{1, 3, 6, 7}));
  }
}

TEST(Conv2d, KernelLargerThanPaddedInputIsShapeError) {
  Tape<double> t;
  EXPECT_THROW(conv2d(t.constant(TD::ones({1, 1, 2, 2})), t.constant(TD::ones({1, 1, 5, 5})), std::nullopt, 1, 1),
               ShapeError);
  EXPECT_THROW(conv2d(t.constant(TD::ones({1, 2, 4, 4})), t.constant(TD::ones({1, 3, 3, 3})), std::nullopt, 1, 1),
               ShapeError);
}

TEST(Depthwise, DeltaKernelIsIdentity) {
  Rng rng(3);
  auto x = TD::randn({2, 3, 5, 5}, rng);
  TD w({3, 3, 3});
  for (std::size_t c = 0; c < 3; ++c) w.at({c, 1, 1}) = 1;
  auto y = eval([&](Tape<double>& t) { return depthwise_conv2d(t.constant(x), t.constant(w), 1, 1); });
  expect_near(y, x, 0.0);
}

TEST(Depthwise, ChannelsScaleIndependently) {
  Rng rng(4);
  auto x = TD::randn({1, 2, 4, 4}, rng);
  auto w = TD::randn({2, 3, 3}, rng);
  auto w2 = w;
  for (std::size_t i = 0; i < 9; ++i) w2[i] *= 2;
  auto y = eval([&](Tape<double>& t) { return depthwise_conv2d(t.constant(x), t.constant(w), 1, 1); });
  auto y2 = eval([&](Tape<double>& t) { return depthwise_conv2d(t.constant(x), t.constant(w2), 1, 1); });
  for (std::size_t i = 0; i < 16; ++i) EXPECT_NEAR(y2[i], 2 * y[i], 1e-14);
  for (std::size_t i = 16; i < 32; ++i) EXPECT_EQ(y2[i], y[i]);
}

TEST(Depthwise, MatchesLoopOracle) {
  Rng rng(5);
  for (std::size_t stride : {1u, 2u}) {
    auto x = TD::randn({2, 2, 6, 6}, rng);
    auto w = TD::randn({2, 3, 3}, rng);
    auto y = eval([&](Tape<double>& t) { return depthwise_conv2d(t.constant(x), t.constant(w), stride, 1); });
    expect_near(y, depthwise_oracle(x, w, stride, 1), 1e-12);
  }
}

TEST(Depthwise, EqualsBlockDiagonalConv) {
  Rng rng(6);
  for (std::size_t C = 1; C <= 3; ++C) {
    auto x = TD::randn({2, C, 5, 5}, rng);
    auto w = TD::randn({C, 3, 3}, rng);
    TD full({C, C, 3, 3});
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < 3; ++j) full.at({c, c, i, j}) = w.at({c, i, j});
    auto a = eval([&](Tape<double>& t) { return depthwise_conv2d(t.constant(x), t.constant(w), 1, 1); });
    auto b = eval([&](Tape<double>& t) { return conv2d(t.constant(x), t.constant(full), std::nullopt, 1, 1); });
    expect_near(a, b, 1e-12);
  }
}

TEST(Convolution, CircularPaddingCommutesWithShift) {
  Rng rng(7);
  auto x = TD::randn({1, 2, 5, 6}, rng);
  auto wc = TD::randn({3, 2, 3, 3}, rng);
  auto wd = TD::randn({2, 3, 3}, rng);
  for (long sh = 0; sh < 5; ++sh)
    for (long sw = 0; sw < 6; ++sw) {
      auto conv = [&](const TD& in) {
        return eval([&](Tape<double>& t) {
          return conv2d(t.constant(in), t.constant(wc), std::nullopt, 1, 1, PadMode::Circular);
        });
      };
      auto dw = [&](const TD& in) {
        return eval([&](Tape<double>& t) { return depthwise_conv2d(t.constant(in), t.constant(wd), 1, 1, PadMode::Circular); });
      };
      expect_near(conv(roll(x, sh, sw)), roll(conv(x), sh, sw), 1e-12);
      expect_near(dw(roll(x, sh, sw)), roll(dw(x), sh, sw), 1e-12);
    }
}

TEST(Pool, ConstantInputStaysConstant) {
  auto x = TD::full({1, 2, 4, 4}, 3.5);
  for (auto kind : {PoolKind::Max, PoolKind::Avg}) {
    auto y = eval([&](Tape<double>& t) { return pool2d(t.constant(x), kind); });
    expect_near(y, TD::full({1, 2, 2, 2}, 3.5), 0.0);
  }
}

TEST(Pool, DirectWindowValues) {
  auto x = TD::from({1, 1, 2, 2}, {1, 2, 3, 4});
  EXPECT_EQ(eval([&](Tape<double>& t) { return pool2d(t.constant(x), PoolKind::Max); }).item(), 4.0);
  EXPECT_EQ(eval([&](Tape<double>& t) { return pool2d(t.constant(x), PoolKind::Avg); }).item(), 2.5);
}

TEST(Pool, MaxTieRoutesGradientToFirstIndex) {
  Tape<double> t;
  auto x = t.leaf(TD::full({1, 1, 2, 2}, 5.0));
  t.backward(sum(pool2d(x, PoolKind::Max)));
  expect_near(t.grad(x), TD::from({1, 1, 2, 2}, {1, 0, 0, 0}), 0.0);
}

TEST(Pool, WindowLargerThanInputIsShapeError) {
  Tape<double> t;
  EXPECT_THROW(pool2d(t.constant(TD::ones({1, 1, 1, 4})), PoolKind::Max), ShapeError);
}

TEST(LayerNorm, Examples) {
  auto p = NormParams<double>::layer(3);
  auto y = eval([&](Tape<double>& t) { return layer_norm(t.constant(TD::from({3}, {1, 2, 3})), p); });
  const double r = 1.0 / std::sqrt(2.0 / 3.0 + 1e-5);
  expect_near(y, TD::from({3}, {-r, 0.0, r}), 1e-12);

  auto pb = NormParams<double>::layer(4);
  pb.beta = TD::from({4}, {0.5, -1, 2, 0});
  auto yc = eval([&](Tape<double>& t) { return layer_norm(t.constant(TD::full({2, 4}, 7.0)), pb); });
  expect_near(yc, TD::from({2, 4}, {0.5, -1, 2, 0, 0.5, -1, 2, 0}), 0.0);

  Rng rng(8);
  pb.gamma = TD::zeros({4});
  auto yz = eval([&](Tape<double>& t) { return layer_norm(t.constant(TD::randn({2, 4}, rng)), pb); });
  expect_near(yz, TD::from({2, 4}, {0.5, -1, 2, 0, 0.5, -1, 2, 0}), 0.0);
}

TEST(LayerNorm, PerPositionMoments) {
  Rng rng(9);
  auto p = NormParams<double>::layer(16);
  auto y = eval([&](Tape<double>& t) { return layer_norm(t.constant(TD::randn({5, 7, 16}, rng, 3.0)), p); });
  for (std::size_t r = 0; r < 35; ++r) {
    double m = 0, v = 0;
    for (std::size_t k = 0; k < 16; ++k) m += y[r * 16 + k];
    m /= 16;
    for (std::size_t k = 0; k < 16; ++k) v += (y[r * 16 + k] - m) * (y[r * 16 + k] - m);
    v /= 16;
    EXPECT_LT(std::abs(m), 1e-10);
    EXPECT_NEAR(v, 1.0, 1e-5);  // eps = 1e-5 shrinks the variance by ~eps/var
  }
}

TEST(BatchNorm, EvalWithUnitStatsIsIdentity) {
  Rng rng(10);
  auto p = NormParams<double>::batch(3);
  auto x = TD::randn({2, 3, 2, 2}, rng);
  Tape<double> t(false);
  auto y = batch_norm(t.constant(x), p, Mode::Eval);
  const double s = 1.0 / std::sqrt(1.0 + 1e-5);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(y.value()[i], x[i] * s, 1e-15);
  EXPECT_EQ(p.running_mean, TD::zeros({3}));
}

TEST(BatchNorm, TrainOnConstantBatchGivesBeta) {
  auto p = NormParams<double>::batch(2);
  p.beta = TD::from({2}, {0.25, -3});
  Tape<double> t(false);
  auto y = batch_norm(t.constant(TD::full({3, 2, 2, 2}, 4.0)), p, Mode::Train);
  for (std::size_t i = 0; i < y.value().size(); ++i) EXPECT_EQ(y.value()[i], (i / 4) % 2 ? -3 : 0.25);
}

TEST(BatchNorm, TwoElementBatch) {
  auto p = NormParams<double>::batch(2);
  Tape<double> t(false);
  // Per channel the batch holds {0, 2}.
  auto y = batch_norm(t.constant(TD::from({2, 2, 1, 1}, {0, 0, 2, 2})), p, Mode::Train);
  const double r = 1.0 / std::sqrt(1.0 + 1e-5);
  expect_near(y.value(), TD::from({2, 2, 1, 1}, {-r, -r, r, r}), 1e-15);
  // Running stats: momentum 0.1 toward mean 1 and unbiased variance 2.
  EXPECT_NEAR(p.running_mean[0], 0.1, 1e-15);
  EXPECT_NEAR(p.running_var[0], 0.9 + 0.2, 1e-15);
}

TEST(BatchNorm, SingleValueTrainIsContractError) {
  auto p = NormParams<double>::batch(1);
  Tape<double> t;
  EXPECT_THROW(batch_norm(t.constant(TD::ones({1, 1, 1, 1})), p, Mode::Train), ContractError);
}

TEST(SqueezeExcite, ZeroExpandHalvesInput) {
  Rng rng(11);
  auto p = SqueezeExciteParams<double>::init(4, 0.25, rng);
  p.expand.weight = TD::zeros(p.expand.weight.shape());
  auto x = TD::randn({2, 4, 3, 3}, rng);
  auto y = eval([&](Tape<double>& t) { return squeeze_excite(t.constant(x), p); });
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_DOUBLE_EQ(y[i], x[i] / 2);
}

TEST(SqueezeExcite, ZeroInputGivesZero) {
  Rng rng(12);
  auto p = SqueezeExciteParams<double>::init(4, 0.25, rng);
  auto y = eval([&](Tape<double>& t) { return squeeze_excite(t.constant(TD::zeros({1, 4, 2, 2})), p); });
  expect_near(y, TD::zeros({1, 4, 2, 2}), 0.0);
}

TEST(SqueezeExcite, MatchesScalarLoopOracle) {
  Rng rng(13);
  auto p = SqueezeExciteParams<double>::init(2, 0.5, rng);
  p.reduce.bias = TD::randn({1}, rng);
  p.expand.bias = TD::randn({2}, rng);
  auto x = TD::randn({3, 2, 4, 4}, rng);
  auto y = eval([&](Tape<double>& t) { return squeeze_excite(t.constant(x), p); });
  for (std::size_t b = 0; b < 3; ++b) {
    double pooled[2] = {0, 0};
    for (std::size_t c = 0; c < 2; ++c) {
      for (std::size_t k = 0; k < 16; ++k) pooled[c] += x[(b * 2 + c) * 16 + k];
      pooled[c] /= 16;
    }
    double hidden = (*p.reduce.bias)[0];
    for (std::size_t c = 0; c < 2; ++c) hidden += pooled[c] * p.reduce.weight[c];
    hidden = std::max(hidden, 0.0);
    for (std::size_t c = 0; c < 2; ++c) {
      const double gate = sigmoid_ref(hidden * p.expand.weight[c] + (*p.expand.bias)[c]);
      for (std::size_t k = 0; k < 16; ++k) EXPECT_NEAR(y[(b * 2 + c) * 16 + k], x[(b * 2 + c) * 16 + k] * gate, 1e-12);
    }
  }
}

TEST(SqueezeExcite, ReducedWidthRoundsUp) {
  EXPECT_EQ(SqueezeExciteParams<double>::reduced_channels(16, 0.25), 4u);
  EXPECT_EQ(SqueezeExciteParams<double>::reduced_channels(6, 0.25), 2u);
  EXPECT_THROW(SqueezeExciteParams<double>::reduced_channels(6, 0.0), ConfigError);
}

TEST(Linear, Examples) {
  Rng rng(14);
  auto x = TD::randn({2, 3, 4}, rng);
  LinearParams<double> id{TD::eye(4), std::nullopt};
  expect_near(eval([&](Tape<double>& t) { return linear(t.constant(x), id); }), x, 0.0);

  LinearParams<double> zero{TD::zeros({4, 2}), TD::from({2}, {1.5, -2})};
  auto yz = eval([&](Tape<double>& t) { return linear(t.constant(x), zero); });
  for (std::size_t i = 0; i < yz.size(); ++i) EXPECT_EQ(yz[i], i % 2 ? -2.0 : 1.5);

  auto p = LinearParams<double>::init(4, 3, true, rng);
  p.bias = TD::randn({3}, rng);
  auto y = eval([&](Tape<double>& t) { return linear(t.constant(x), p); });
  auto ref = eval([&](Tape<double>& t) {
    return add(matmul(t.constant(x.reshaped({6, 4})), t.constant(p.weight)), t.constant(*p.bias));
  });
  expect_near(y, ref.reshaped({2, 3, 3}), 1e-14);
  Tape<double> t;
  EXPECT_THROW(linear(t.constant(TD::ones({2, 5})), p), ShapeError);
}

// ---------------------------------------------------------------------------
// Finite-difference checks (64-bit, h = 1e-5, rel < 1e-4).

TEST(NnGradCheck, Conv2dBothPaddings) {
  Rng rng(20);
  for (auto mode : {PadMode::Zero, PadMode::Circular})
    for (std::size_t stride : {1u, 2u}) {
      auto x = TD::randn({2, 2, 5, 5}, rng);
      auto p = Conv2dParams<double>::init(3, 2, 3, stride, true, rng);
      p.bias = TD::randn({3}, rng);
      p.pad_mode = mode;
      auto r = grad_check([&](Tape<double>& t) { return sum(mul(conv2d(t.param(x), p), conv2d(t.param(x), p))); },
                          {{"x", &x}, {"w", &p.weight}, {"b", &*p.bias}});
      EXPECT_TRUE(r.passed()) << r.max_rel_error();
    }
}

TEST(NnGradCheck, Depthwise) {
  Rng rng(21);
  for (std::size_t stride : {1u, 2u}) {
    auto x = TD::randn({2, 3, 6, 6}, rng);
    auto p = DepthwiseParams<double>::init(3, 3, stride, rng);
    auto r = grad_check([&](Tape<double>& t) { return sum(gelu(depthwise_conv2d(t.param(x), p))); },
                        {{"x", &x}, {"w", &p.weight}});
    EXPECT_TRUE(r.passed()) << r.max_rel_error();
  }
}

TEST(NnGradCheck, Pools) {
  Rng rng(22);
  auto x = TD::randn({2, 2, 4, 6}, rng);
  for (auto kind : {PoolKind::Max, PoolKind::Avg}) {
    auto r = grad_check([&](Tape<double>& t) { return sum(exp(pool2d(t.param(x), kind))); }, {{"x", &x}});
    EXPECT_TRUE(r.passed()) << r.max_rel_error();
  }
}

TEST(NnGradCheck, Norms) {
  Rng rng(23);
  auto x = TD::randn({2, 3, 3, 4}, rng);
  auto w = TD::randn({2, 3, 3, 4}, rng);
  auto ln = NormParams<double>::layer(4);
  ln.gamma = TD::randn({4}, rng);
  ln.beta = TD::randn({4}, rng);
  auto r1 = grad_check([&](Tape<double>& t) { return sum(mul(layer_norm(t.param(x), ln), t.constant(w))); },
                       {{"x", &x}, {"gamma", &ln.gamma}, {"beta", &ln.beta}});
  EXPECT_TRUE(r1.passed()) << r1.max_rel_error();

  for (auto mode : {Mode::Train, Mode::Eval}) {
    auto bn = NormParams<double>::batch(3);
    bn.gamma = TD::randn({3}, rng);
    bn.beta = TD::randn({3}, rng);
    bn.running_mean = TD::randn({3}, rng);
    bn.running_var = TD::uniform({3}, rng, 0.5, 2.0);
    const auto saved = bn;
    auto r2 = grad_check(
        [&](Tape<double>& t) {
          auto stats = saved;  // keep running statistics out of the check
          bn.running_mean = stats.running_mean;
          bn.running_var = stats.running_var;
          return sum(mul(batch_norm(t.param(x), bn, mode), t.constant(w)));
        },
        {{"x", &x}, {"gamma", &bn.gamma}, {"beta", &bn.beta}});
    EXPECT_TRUE(r2.passed()) << r2.max_rel_error();
  }
}

TEST(NnGradCheck, SqueezeExciteAndLinear) {
  Rng rng(24);
  auto x = TD::randn({2, 4, 3, 3}, rng);
  auto p = SqueezeExciteParams<double>::init(4, 0.5, rng);
  p.reduce.bias = TD::uniform({2}, rng, 0.2, 0.5);  // keep relu away from its kink
  auto r = grad_check([&](Tape<double>& t) { return sum(mul(squeeze_excite(t.param(x), p), t.param(x))); },
                      {{"x", &x},
                       {"reduce.w", &p.reduce.weight},
                       {"reduce.b", &*p.reduce.bias},
                       {"expand.w", &p.expand.weight},
                       {"expand.b", &*p.expand.bias}});
  EXPECT_TRUE(r.passed()) << r.max_rel_error();
}
