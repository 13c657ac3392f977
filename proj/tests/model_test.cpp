// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include "astro/grad_check.hpp"
#include "astro/model.hpp"

using namespace astro;
using TD = Tensor<double>;

namespace {

ModelConfig tiny(const std::string& layout) {
  ModelConfig c;
  c.layout = layout;
  c.stem_channels = 8;
  c.channels = {8, 16, 16, 16};
  c.depths = {1, 2, 1, 2};
  c.head_dim = 8;
  c.expansion = 2;
  c.num_classes = 5;
  c.image_size = 32;
  c.drop_path_rate = 0.0;
  return c;
}

std::size_t enumerate(Model<double>& m) {
  std::size_t n = 0;
  for (const auto& p : m.parameters()) n += p.tensor->size();
  return n;
}

}  // namespace

TEST(ModelConfig, Validation) {
  auto c = tiny("CCCT");
  EXPECT_NO_THROW(c.validate());
  c.image_size = 48;
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny("CCXT");
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny("CCT");
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny("CCCT");
  c.channels[3] = 12;
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny("CCCT");
  c.depths[1] = 0;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(ModelConfig, LayoutWarnings) {
  EXPECT_TRUE(layout_warnings(tiny("CCCC")).empty());
  EXPECT_TRUE(layout_warnings(tiny("CCCT")).empty());
  EXPECT_EQ(layout_warnings(tiny("CCTT")).size(), 1u);
  EXPECT_EQ(layout_warnings(tiny("TCCC")).size(), 1u);
  EXPECT_EQ(layout_warnings(tiny("TTCC")).size(), 2u);
}

TEST(ModelConfig, DropRatesRiseLinearly) {
  ModelConfig c;  // 8 blocks, max 0.2
  EXPECT_EQ(c.block_drop_rate(0), 0.0);
  EXPECT_DOUBLE_EQ(c.block_drop_rate(7), 0.2);
  for (std::size_t i = 1; i < 8; ++i) EXPECT_GT(c.block_drop_rate(i), c.block_drop_rate(i - 1));
}

TEST(Model, AllConvLayoutHasNoAttentionParameters) {
  Rng rng(1);
  auto m = build_model<double>(tiny("CCCC"), rng);
  for (const auto& p : m.parameters()) EXPECT_EQ(p.name.find("attn"), std::string::npos) << p.name;
  Rng rng2(1);
  auto t = build_model<double>(tiny("CCCT"), rng2);
  std::size_t attn = 0;
  for (const auto& p : t.parameters()) attn += p.name.find("attn") != std::string::npos;
  EXPECT_GT(attn, 0u);
}

TEST(Model, ToyForwardShape) {
  Rng rng(2);
  ModelConfig c;
  c.channels = {16, 32, 64, 128};
  c.depths = {1, 1, 1, 1};
  c.stem_channels = 16;
  c.image_size = 64;
  auto m = build_model<float>(c, rng);
  Tape<float> t(false);
  auto y = m.forward(t, Tensor<float>::uniform({2, 3, 64, 64}, rng, 0, 1), Mode::Eval);
  EXPECT_EQ(y.shape(), (Shape{2, 10}));
  EXPECT_TRUE(y.value().all_finite());
  EXPECT_THROW(m.forward(t, Tensor<float>::zeros({2, 3, 32, 32}), Mode::Eval), ShapeError);
}

TEST(Model, SameSeedSameParameters) {
  Rng a(3), b(3);
  auto m1 = build_model<double>(tiny("CCTT"), a);
  auto m2 = build_model<double>(tiny("CCTT"), b);
  auto p1 = m1.parameters(), p2 = m2.parameters();
  ASSERT_EQ(p1.size(), p2.size());
  for (std::size_t i = 0; i < p1.size(); ++i) {
    EXPECT_EQ(p1[i].name, p2[i].name);
    EXPECT_EQ(*p1[i].tensor, *p2[i].tensor);
  }
}

TEST(Model, ZeroInputAndIdenticalRows) {
  Rng rng(4);
  for (const char* layout : {"CCCC", "CCCT", "CCTT", "CTTT"}) {
    auto m = build_model<double>(tiny(layout), rng);
    auto y0 = m.predict(TD::zeros({2, 3, 32, 32}));
    EXPECT_TRUE(y0.all_finite());
    auto img = TD::uniform({1, 3, 32, 32}, rng, 0, 1);
    TD batch({3, 3, 32, 32});
    for (std::size_t b = 0; b < 3; ++b) std::copy(img.data().begin(), img.data().end(), batch.data().begin() + b * img.size());
    auto y = m.predict(batch);
    for (std::size_t k = 0; k < 5; ++k) {
      EXPECT_EQ(y.at({0, k}), y.at({1, k}));
      EXPECT_EQ(y.at({0, k}), y.at({2, k}));
    }
  }
}

TEST(Model, LogitsMatchLayerByLayerReplay) {
  Rng rng(5);
  auto m = build_model<double>(tiny("CTCT"), rng);
  // Give batch-norm non-trivial running statistics.
  for (auto& b : m.buffers()) *b.tensor = TD::uniform(b.tensor->shape(), rng, 0.5, 1.5);
  auto x = TD::uniform({2, 3, 32, 32}, rng, 0, 1);
  auto logits = m.predict(x);

  Tape<double> t(false);
  const DropPathState dp{};
  auto h = conv2d(t.constant(x), m.stem1);
  h = conv2d(gelu(batch_norm(h, m.stem_norm, Mode::Eval)), m.stem2);
  auto& s1 = std::get<ConvStage<double>>(m.stages[0]);
  h = mbconv_downsample(h, s1.down, dp);  // 8x8
  auto& s2 = std::get<AttnStage<double>>(m.stages[1]);
  auto tok = transformer_down_block(map_to_tokens(h), s2.down, GridSpec{8, 8, Topology::Plane}, dp);
  for (auto& b : s2.blocks) tok = transformer_block(tok, b, GridSpec{4, 4, Topology::Plane}, dp);
  h = tokens_to_map(tok, GridSpec{4, 4, Topology::Plane});
  auto& s3 = std::get<ConvStage<double>>(m.stages[2]);
  h = mbconv_downsample(h, s3.down, dp);  // 2x2
  auto& s4 = std::get<AttnStage<double>>(m.stages[3]);
  tok = transformer_down_block(map_to_tokens(h), s4.down, GridSpec{2, 2, Topology::Plane}, dp);
  for (auto& b : s4.blocks) tok = transformer_block(tok, b, GridSpec{1, 1, Topology::Plane}, dp);
  auto pooled = reshape(tok, {2, 16});  // a single token remains
  auto ref = linear(layer_norm(pooled, m.head_norm), m.head).value();
  EXPECT_LT(max_abs_diff(logits, ref), 1e-10);
}

TEST(Model, NonFiniteActivationNamesStage) {
  Rng rng(6);
  auto m = build_model<double>(tiny("CCCT"), rng);
  auto x = TD::zeros({2, 3, 32, 32});
  x[5] = std::numeric_limits<double>::infinity();
  try {
    m.predict(x);
    FAIL() << "expected NonFiniteError";
  } catch (const NonFiniteError& e) {
    EXPECT_NE(std::string(e.what()).find("S0"), std::string::npos) << e.what();
  }
}

TEST(Summary, LinearLayerCount) {
  detail::Counter c;
  c.linear(7, 3, true, 1);
  EXPECT_EQ(c.params, 7u * 3u + 3u);
}

TEST(Summary, ParameterCountMatchesEnumeration) {
  for (const char* layout : {"CCCC", "CCCT", "CCTT", "CTTT", "TCTC"}) {
    Rng rng(7);
    auto cfg = tiny(layout);
    auto m = build_model<double>(cfg, rng);
    auto s = summarize(cfg);
    EXPECT_EQ(s.params, enumerate(m)) << layout;
    std::uint64_t p = 0, macs = 0;
    for (const auto& st : s.stages) p += st.params, macs += st.macs;
    EXPECT_EQ(p, s.params);
    EXPECT_EQ(macs, s.macs);
  }
  ModelConfig def;
  Rng rng(8);
  auto m = build_model<float>(def, rng);
  EXPECT_EQ(summarize(def).params, m.parameter_count());
}

TEST(Summary, DoubleWidthQuadruplesConvParameters) {
  auto conv_params = [](const ModelConfig& cfg) {
    Rng rng(10);
    auto m = build_model<double>(cfg, rng);
    std::size_t n = 0;
    for (const auto& p : m.parameters())
      if (p.tensor->rank() == 4) n += p.tensor->size();
    return static_cast<double>(n);
  };
  auto cfg = tiny("CCCC");
  auto wide = cfg;
  wide.stem_channels *= 2;
  for (auto& c : wide.channels) c *= 2;
  const double ratio = conv_params(wide) / conv_params(cfg);
  EXPECT_GT(ratio, 3.5);
  EXPECT_LE(ratio, 4.0);
}

TEST(Summary, AttentionMacsGrowWithTokens) {
  auto cfg = tiny("CCCT");
  auto big = cfg;
  big.image_size = 64;
  const auto a = summarize(cfg).stages[4];
  const auto b = summarize(big).stages[4];
  EXPECT_EQ(a.name, "S4 T");
  EXPECT_GT(b.macs, 4 * a.macs);  // 4x the tokens, quadratic attention maps on top
}

TEST(ModelGradCheck, EveryLayout) {
  for (const char* layout : {"CCCC", "CCCT", "CCTT", "CTTT"}) {
    Rng rng(9);
    auto cfg = tiny(layout);
    cfg.depths = {1, 1, 1, 1};
    auto m = build_model<double>(cfg, rng);
    auto x = TD::uniform({2, 3, 32, 32}, rng, 0, 1);
    auto w = TD::randn({2, 5}, rng);
    GradCheckOptions opts;
    opts.rel_tol = 1e-3;
    opts.max_total_entries = 32;
    auto r = grad_check(
        [&](Tape<double>& t) { return sum(mul(m.forward(t, x, Mode::Eval), t.constant(w))); }, m.parameters(), opts);
    EXPECT_TRUE(r.passed()) << layout << " " << r.max_rel_error();
    Tape<double> t;
    auto loss = sum(m.forward(t, x, Mode::Train, &rng));
    t.backward(loss);
    for (const auto& p : m.parameters()) EXPECT_TRUE(t.grad_of(*p.tensor).all_finite()) << p.name;
  }
}
