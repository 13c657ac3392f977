// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>

#include "astro/data.hpp"

using namespace astro;
using TD = Tensor<double>;
using Bytes = std::vector<std::uint8_t>;

namespace {

// Two 1x2 RGB images, 3 classes, written byte by byte.
const Bytes kTwoImages = {
    'G', 'I', 'M', 'G', 0x01,  // magic, version
    0x02, 0x00, 0x00, 0x00,    // count = 2
    0x01, 0x00,                // height = 1
    0x02, 0x00,                // width = 2
    0x03,                      // channels
    0x03,                      // classes
    0x02,                      // image 0: label 2
    0, 51, 102, 153, 204, 255, // (r,g,b) at x=0, then x=1
    0x00,                      // image 1: label 0
    255, 0, 0, 1, 2, 3,
};

Dataset<double> imbalanced(std::size_t total, Rng& rng) {
  // Class 0 holds 3% of the data; the rest split evenly over 9 classes.
  Dataset<double> d = Dataset<double>::empty(1, 1, 1, 10);
  const std::size_t minority = total * 3 / 100;
  for (std::size_t i = 0; i < total; ++i) d.labels.push_back(i < minority ? 0 : 1 + (i % 9));
  rng.shuffle(d.labels);
  d.images = TD({total, 1, 1, 1});
  d.rebuild_index();
  return d;
}

}  // namespace

TEST(Gimg, HandWrittenFixtureRoundTrip) {
  auto d = parse_gimg<double>(kTwoImages);
  ASSERT_EQ(d.size(), 2u);
  EXPECT_EQ(d.images.shape(), (Shape{2, 3, 1, 2}));
  EXPECT_EQ(d.labels, (std::vector<std::size_t>{2, 0}));
  EXPECT_EQ(d.num_classes, 3u);
  // Planar storage: image 0 red channel = {0, 153}, green = {51, 204}, blue = {102, 255}.
  const double expect0[] = {0, 153, 51, 204, 102, 255};
  for (int i = 0; i < 6; ++i) EXPECT_EQ(d.images[i], expect0[i] / 255.0);
  const double expect1[] = {255, 1, 0, 2, 0, 3};
  for (int i = 0; i < 6; ++i) EXPECT_EQ(d.images[6 + i], expect1[i] / 255.0);
  EXPECT_EQ(d.class_index[0], (std::vector<std::size_t>{1}));
  EXPECT_TRUE(d.class_index[1].empty());
  EXPECT_EQ(encode_gimg(d), kTwoImages);
}

TEST(Gimg, EmptyFile) {
  Bytes b(kTwoImages.begin(), kTwoImages.begin() + 15);
  b[5] = 0;
  auto d = parse_gimg<float>(b);
  EXPECT_EQ(d.size(), 0u);
  EXPECT_EQ(d.class_index.size(), 3u);
}

TEST(Gimg, ParseErrorsCarryOffsets) {
  Bytes bad = kTwoImages;
  bad[0] = 'X';
  EXPECT_THROW(parse_gimg<double>(bad), ParseError);
  Bytes truncated(kTwoImages.begin(), kTwoImages.end() - 1);
  try {
    parse_gimg<double>(truncated);
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.offset(), 22u);  // start of the incomplete second record
    EXPECT_NE(std::string(e.what()).find("byte offset 22"), std::string::npos);
  }
  Bytes header_only(kTwoImages.begin(), kTwoImages.begin() + 7);
  EXPECT_THROW(parse_gimg<double>(header_only), ParseError);
  Bytes bad_label = kTwoImages;
  bad_label[15] = 3;
  EXPECT_THROW(parse_gimg<double>(bad_label), DataError);
}

TEST(Gimg, FileRoundTrip) {
  Rng rng(1);
  auto d = make_synthetic<double>(SyntheticSpec{4, 3, 8, 0.1, 3}, 10, rng);
  const auto path = (std::filesystem::temp_directory_path() / "astro_gimg_test.gimg").string();
  write_gimg(path, d);
  auto back = load_dataset<double>(path, DataFormat::Gimg);
  std::remove(path.c_str());
  EXPECT_EQ(back.labels, d.labels);
  EXPECT_LE(max_abs_diff(back.images, d.images), 0.5 / 255.0 + 1e-12);
  EXPECT_THROW(load_dataset<double>(path, DataFormat::Gimg), DataError);
}

TEST(Cifar10, RecordsAndErrors) {
  Bytes b(2 * 3073, 0);
  b[0] = 7;
  b[1] = 255;           // red (0,0) of record 0
  b[1 + 1024] = 51;     // green (0,0)
  b[3073] = 1;
  b[3073 + 3072] = 102; // blue (31,31) of record 1
  auto d = parse_cifar10<double>(b);
  EXPECT_EQ(d.labels, (std::vector<std::size_t>{7, 1}));
  EXPECT_EQ(d.images.at({0, 0, 0, 0}), 1.0);
  EXPECT_EQ(d.images.at({0, 1, 0, 0}), 0.2);
  EXPECT_EQ(d.images.at({1, 2, 31, 31}), 0.4);
  b.pop_back();
  EXPECT_THROW(parse_cifar10<double>(b), ParseError);
  Bytes bad(3073, 0);
  bad[0] = 10;
  EXPECT_THROW(parse_cifar10<double>(bad), DataError);
}

TEST(Split, FractionsPartitionTheSet) {
  Rng rng(2);
  auto d = make_synthetic<double>(SyntheticSpec{5, 1, 4, 0.1, 1}, 100, rng);
  auto parts = split_dataset(d, {0.8, 0.1, 0.1}, rng);
  ASSERT_EQ(parts.size(), 3u);
  EXPECT_EQ(parts[0].size(), 80u);
  EXPECT_EQ(parts[1].size(), 10u);
  EXPECT_EQ(parts[2].size(), 10u);
  EXPECT_THROW(split_dataset(d, {0.5, 0.2}, rng), ConfigError);
}

TEST(Sampler, BoundsArithmetic) {
  EXPECT_EQ(class_count_bounds(256, 10, 0.04), (std::pair<std::size_t, std::size_t>{16, 35}));
  EXPECT_EQ(class_count_bounds(100, 10, 0.04), (std::pair<std::size_t, std::size_t>{6, 14}));
  EXPECT_EQ(class_count_bounds(32, 1, 0.04), (std::pair<std::size_t, std::size_t>{31, 32}));
}

TEST(Sampler, BalancedBatchesStayInBounds) {
  Rng rng(3);
  auto d = imbalanced(5000, rng);
  StratifiedSampler s(d.class_index, 256, Rng(4));
  for (int b = 0; b < 500; ++b) {
    auto idx = s.next();
    ASSERT_EQ(idx.size(), 256u);
    std::vector<std::size_t> counts(10, 0);
    for (auto i : idx) ++counts[d.labels[i]];
    for (auto c : counts) {
      EXPECT_GE(c, 16u);
      EXPECT_LE(c, 35u);
    }
  }
}

TEST(Sampler, SingleClassFillsBatch) {
  std::vector<std::vector<std::size_t>> idx{{0, 1, 2}};
  StratifiedSampler s(idx, 8, Rng(5));
  auto b = s.next();
  EXPECT_EQ(b.size(), 8u);
  for (auto i : b) EXPECT_LT(i, 3u);
}

TEST(Sampler, SameSeedSameSequence) {
  Rng rng(6);
  auto d = imbalanced(1000, rng);
  StratifiedSampler a(d.class_index, 64, Rng(9)), b(d.class_index, 64, Rng(9));
  for (int i = 0; i < 20; ++i) EXPECT_EQ(a.next(), b.next());
}

TEST(Sampler, MajorityClassVisitedOncePerEpoch) {
  std::vector<std::vector<std::size_t>> idx(2);
  for (std::size_t i = 0; i < 40; ++i) idx[i % 2].push_back(i);
  StratifiedSampler s(idx, 10, Rng(10), 0.0);  // exactly 5 per class per batch
  std::vector<int> seen(40, 0);
  for (int b = 0; b < 4; ++b)
    for (auto i : s.next()) ++seen[i];
  for (auto v : seen) EXPECT_EQ(v, 1);
}

TEST(Sampler, InfeasibleOrInvalidIsConfigError) {
  std::vector<std::vector<std::size_t>> ten(10, std::vector<std::size_t>{0});
  EXPECT_THROW(StratifiedSampler(ten, 8, Rng(1)), ConfigError);
  std::vector<std::vector<std::size_t>> hole{{0}, {}};
  EXPECT_THROW(StratifiedSampler(hole, 8, Rng(1)), ConfigError);
  // Tolerance 0 with 3 classes and batch 10 cannot balance.
  std::vector<std::vector<std::size_t>> three{{0}, {1}, {2}};
  EXPECT_THROW(StratifiedSampler(three, 10, Rng(1), 0.0), ConfigError);
}

TEST(LabelSmoothing, Examples) {
  std::vector<std::size_t> labels{3, 0};
  auto t = smooth_labels<double>(labels, 10, 0.1);
  EXPECT_DOUBLE_EQ(t.at({0, 3}), 0.91);
  EXPECT_DOUBLE_EQ(t.at({0, 4}), 0.01);
  auto one = smooth_labels<double>(labels, 10, 0.0);
  EXPECT_EQ(one.at({1, 0}), 1.0);
  EXPECT_EQ(one.at({1, 1}), 0.0);
  for (std::size_t b = 0; b < 2; ++b) {
    double s = 0;
    for (std::size_t k = 0; k < 10; ++k) s += t.at({b, k});
    EXPECT_NEAR(s, 1.0, 1e-15);
  }
  std::vector<std::size_t> bad{10};
  EXPECT_THROW(smooth_labels<double>(bad, 10, 0.1), DataError);
  EXPECT_THROW(smooth_labels<double>(labels, 10, 1.0), ConfigError);
}

TEST(Mixup, ForcedLambda) {
  Rng rng(11);
  std::vector<std::size_t> la{2}, lb{7};
  LabeledBatch<double> a{TD::uniform({1, 1, 2, 2}, rng, 0, 1), smooth_labels<double>(la, 10, 0.0)};
  LabeledBatch<double> b{TD::uniform({1, 1, 2, 2}, rng, 0, 1), smooth_labels<double>(lb, 10, 0.0)};
  auto same = mixup_with_lambda(a, b, 1.0);
  EXPECT_EQ(same.images, a.images);
  EXPECT_EQ(same.targets, a.targets);
  auto half = mixup_with_lambda(a, b, 0.5);
  EXPECT_EQ(half.targets.at({0, 2}), 0.5);
  EXPECT_EQ(half.targets.at({0, 7}), 0.5);
  LabeledBatch<double> c{TD::zeros({2, 1, 2, 2}), TD::zeros({2, 10})};
  EXPECT_THROW(mixup_with_lambda(a, c, 0.5), ShapeError);
}

TEST(Mixup, SmoothingCommutesWithMixing) {
  Rng rng(12);
  std::vector<std::size_t> la{1, 4, 9}, lb{3, 4, 0};
  auto hard_a = smooth_labels<double>(la, 10, 0.0), hard_b = smooth_labels<double>(lb, 10, 0.0);
  const double lambda = 0.37, eps = 0.1;
  auto mixed = mixup_with_lambda<double>({TD::zeros({3, 1, 1, 1}), hard_a}, {TD::zeros({3, 1, 1, 1}), hard_b}, lambda);
  TD smoothed_after(mixed.targets.shape());
  for (std::size_t i = 0; i < smoothed_after.size(); ++i) smoothed_after[i] = (1 - eps) * mixed.targets[i] + eps / 10;
  auto smoothed_first = mixup_with_lambda<double>({TD::zeros({3, 1, 1, 1}), smooth_labels<double>(la, 10, eps)},
                                                  {TD::zeros({3, 1, 1, 1}), smooth_labels<double>(lb, 10, eps)}, lambda);
  EXPECT_LT(max_abs_diff(smoothed_first.targets, smoothed_after), 1e-12);
}

TEST(Mixup, BetaMomentsAndConvexHull) {
  Rng rng(13);
  double mean = 0, sq = 0;
  const int n = 100000;
  for (int i = 0; i < n; ++i) {
    const double l = rng.beta(0.8, 0.8);
    mean += l;
    sq += l * l;
  }
  mean /= n;
  const double var = sq / n - mean * mean;
  EXPECT_NEAR(mean, 0.5, 0.01);
  EXPECT_NEAR(var / (1.0 / (4.0 * 2.6)), 1.0, 0.05);

  std::vector<std::size_t> la{1}, lb{5};
  for (int i = 0; i < 200; ++i) {
    LabeledBatch<double> a{TD::uniform({1, 3, 2, 2}, rng, 0, 1), smooth_labels<double>(la, 10, 0.1)};
    LabeledBatch<double> b{TD::uniform({1, 3, 2, 2}, rng, 0, 1), smooth_labels<double>(lb, 10, 0.1)};
    auto m = mixup(a, b, 0.8, rng);
    for (std::size_t k = 0; k < m.images.size(); ++k) {
      EXPECT_GE(m.images[k], std::min(a.images[k], b.images[k]));
      EXPECT_LE(m.images[k], std::max(a.images[k], b.images[k]));
    }
  }
}

TEST(Augment, Involutions) {
  Rng rng(14);
  auto img = TD::uniform({1, 2, 5, 5}, rng, 0, 1);
  AugPolicy pol;
  auto apply = [&](TD t, AugOp op, int times) {
    for (int i = 0; i < times; ++i) apply_aug<double>(t.data(), 2, 5, 5, op, pol, rng);
    return t;
  };
  EXPECT_EQ(apply(img, AugOp::HFlip, 2), img);
  EXPECT_EQ(apply(img, AugOp::VFlip, 2), img);
  EXPECT_EQ(apply(img, AugOp::Rot90, 4), img);
  EXPECT_EQ(apply(img, AugOp::Rot180, 2), img);
  EXPECT_EQ(apply(apply(img, AugOp::Rot90, 1), AugOp::Rot270, 1), img);
  EXPECT_EQ(apply(img, AugOp::Rot90, 2), apply(img, AugOp::Rot180, 1));
  EXPECT_NE(apply(img, AugOp::HFlip, 1), img);
  // Quarter turn maps (y, x) = (0, 4) to (0, 0) counter-clockwise.
  EXPECT_EQ(apply(img, AugOp::Rot90, 1).at({0, 0, 0, 0}), img.at({0, 0, 0, 4}));
}

TEST(Augment, IdentityPoliciesAndRange) {
  Rng rng(15);
  auto imgs = TD::uniform({4, 3, 8, 6}, rng, 0, 1);
  AugPolicy none;
  none.num_layers = 0;
  EXPECT_EQ(augment(imgs, none, rng), imgs);
  AugPolicy empty;
  empty.ops.clear();
  EXPECT_EQ(augment(imgs, empty, rng), imgs);
  AugPolicy full;
  full.num_layers = 4;
  for (int r = 0; r < 20; ++r) {
    auto out = augment(imgs, full, rng);  // non-square: quarter turns excluded
    ASSERT_EQ(out.shape(), imgs.shape());
    for (auto v : out.data()) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
  }
  for (auto op : full.ops) EXPECT_EQ(to_string(op).find("cut"), std::string::npos);
}

TEST(Synthetic, BalancedAndDeterministic) {
  Rng a(16), b(16);
  SyntheticSpec spec;
  auto d1 = make_synthetic<double>(spec, 200, a);
  auto d2 = make_synthetic<double>(spec, 200, b);
  EXPECT_EQ(d1.images, d2.images);
  for (const auto& c : d1.class_index) EXPECT_EQ(c.size(), 20u);
  for (auto v : d1.images.data()) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
}
