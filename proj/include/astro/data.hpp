// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "astro/error.hpp"
#include "astro/rng.hpp"
#include "astro/tensor.hpp"

namespace astro {

/// Labeled images with pixels in [0, 1], stored [M, C, H, W].
template <class T>
struct Dataset {
  Tensor<T> images;
  std::vector<std::size_t> labels;
  std::size_t num_classes = 0;
  std::vector<std::vector<std::size_t>> class_index;  // class -> example indices, ascending

  std::size_t size() const noexcept { return labels.size(); }
  std::size_t channels() const { return images.dim(1); }
  std::size_t height() const { return images.dim(2); }
  std::size_t width() const { return images.dim(3); }

  void rebuild_index() {
    class_index.assign(num_classes, {});
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] >= num_classes)
        throw DataError("example " + std::to_string(i) + " has label " + std::to_string(labels[i]) + " >= " +
                        std::to_string(num_classes) + " classes");
      class_index[labels[i]].push_back(i);
    }
  }

  static Dataset empty(std::size_t c, std::size_t h, std::size_t w, std::size_t k) {
    Dataset d;
    d.images = Tensor<T>({0, c, h, w});
    d.num_classes = k;
    d.class_index.assign(k, {});
    return d;
  }

  /// Images [n, C, H, W] for the given examples, plus their labels.
  Tensor<T> gather_images(std::span<const std::size_t> idx) const {
    const std::size_t per = channels() * height() * width();
    Tensor<T> out({idx.size(), channels(), height(), width()});
    for (std::size_t b = 0; b < idx.size(); ++b) {
      if (idx[b] >= size()) throw ContractError("example index " + std::to_string(idx[b]) + " out of range");
      std::copy_n(images.data().begin() + idx[b] * per, per, out.data().begin() + b * per);
    }
    return out;
  }
  std::vector<std::size_t> gather_labels(std::span<const std::size_t> idx) const {
    std::vector<std::size_t> out;
    out.reserve(idx.size());
    for (auto i : idx) out.push_back(labels.at(i));
    return out;
  }

  Dataset subset(std::span<const std::size_t> idx) const {
    Dataset d;
    d.images = gather_images(idx);
    d.labels = gather_labels(idx);
    d.num_classes = num_classes;
    d.rebuild_index();
    return d;
  }
};

// ---------------------------------------------------------------------------
// Binary formats.

namespace detail {

inline std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw DataError("read error on " + path);
  return bytes;
}

inline void write_file(const std::string& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot create " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("write error on " + path);
}

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> b) : b_(b) {}
  std::size_t offset() const noexcept { return pos_; }
  std::size_t remaining() const noexcept { return b_.size() - pos_; }

  void need(std::size_t n, const char* what) const {
    if (remaining() < n) throw ParseError(std::string("truncated ") + what, pos_);
  }
  std::uint8_t u8(const char* what) {
    need(1, what);
    return b_[pos_++];
  }
  std::uint16_t u16(const char* what) {
    need(2, what);
    const auto v = static_cast<std::uint16_t>(b_[pos_] | (b_[pos_ + 1] << 8));
    pos_ += 2;
    return v;
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i) v = (v << 8) | b_[pos_ + static_cast<std::size_t>(i)];
    pos_ += 4;
    return v;
  }
  std::span<const std::uint8_t> bytes(std::size_t n, const char* what) {
    need(n, what);
    auto s = b_.subspan(pos_, n);
    pos_ += n;
    return s;
  }

 private:
  std::span<const std::uint8_t> b_;
  std::size_t pos_ = 0;
};

inline void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
  out.push_back(static_cast<std::uint8_t>(v & 0xFF));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
}
inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xFF));
}

}  // namespace detail

/// gimg: "GIMG", version 0x01, u32 count, u16 height, u16 width, u8 channels,
/// u8 classes, then per image a u8 label and H*W*C channel-interleaved bytes.
template <class T>
Dataset<T> parse_gimg(std::span<const std::uint8_t> bytes) {
  detail::ByteReader r(bytes);
  auto magic = r.bytes(4, "magic");
  if (!std::equal(magic.begin(), magic.end(), "GIMG")) throw ParseError("bad gimg magic", 0);
  const auto version = r.u8("version");
  if (version != 0x01) throw ParseError("unsupported gimg version " + std::to_string(version), 4);
  const std::size_t count = r.u32("image count");
  const std::size_t h = r.u16("height");
  const std::size_t w = r.u16("width");
  const std::size_t c = r.u8("channels");
  const std::size_t k = r.u8("class count");
  if (h == 0 || w == 0 || c == 0) throw ParseError("zero image dimension", 9);
  if (k == 0) throw ParseError("zero classes", 14);
  const std::size_t per = h * w * c;
  if (r.remaining() / (per + 1) < count)
    throw ParseError("truncated record " + std::to_string(r.remaining() / (per + 1)) + " of " + std::to_string(count),
                     r.offset() + (r.remaining() / (per + 1)) * (per + 1));
  Dataset<T> d;
  d.images = Tensor<T>({count, c, h, w});
  d.labels.resize(count);
  d.num_classes = k;
  auto px = d.images.data();
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t at = r.offset();
    d.labels[i] = r.u8("label");
    if (d.labels[i] >= k)
      throw DataError("image " + std::to_string(i) + " at byte offset " + std::to_string(at) + " has label " +
                      std::to_string(d.labels[i]) + " >= " + std::to_string(k) + " classes");
    auto raw = r.bytes(per, "pixels");
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x)
        for (std::size_t ch = 0; ch < c; ++ch)
          px[((i * c + ch) * h + y) * w + x] = static_cast<T>(raw[(y * w + x) * c + ch]) / T(255);
  }
  if (r.remaining() != 0) throw ParseError("trailing bytes after last record", r.offset());
  d.rebuild_index();
  return d;
}

/// Pixels are written as round(clamp(p, 0, 1) * 255).
template <class T>
std::vector<std::uint8_t> encode_gimg(const Dataset<T>& d) {
  const std::size_t n = d.size(), c = d.images.dim(1), h = d.images.dim(2), w = d.images.dim(3);
  if (h > 0xFFFF || w > 0xFFFF || c > 0xFF || d.num_classes > 0xFF || n > 0xFFFFFFFFu)
    throw DataError("dataset does not fit the gimg header fields");
  std::vector<std::uint8_t> out{'G', 'I', 'M', 'G', 0x01};
  detail::put_u32(out, static_cast<std::uint32_t>(n));
  detail::put_u16(out, static_cast<std::uint16_t>(h));
  detail::put_u16(out, static_cast<std::uint16_t>(w));
  out.push_back(static_cast<std::uint8_t>(c));
  out.push_back(static_cast<std::uint8_t>(d.num_classes));
  const auto px = d.images.data();
  for (std::size_t i = 0; i < n; ++i) {
    out.push_back(static_cast<std::uint8_t>(d.labels[i]));
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x)
        for (std::size_t ch = 0; ch < c; ++ch) {
          const double v = std::clamp(static_cast<double>(px[((i * c + ch) * h + y) * w + x]), 0.0, 1.0);
          out.push_back(static_cast<std::uint8_t>(std::lround(v * 255.0)));
        }
  }
  return out;
}

template <class T>
void write_gimg(const std::string& path, const Dataset<T>& d) {
  detail::write_file(path, encode_gimg(d));
}

/// CIFAR-10 binary batches: 3073-byte records, label then planar 32x32 RGB.
template <class T>
Dataset<T> parse_cifar10(std::span<const std::uint8_t> bytes) {
  constexpr std::size_t rec = 3073, per = 3072, k = 10;
  if (bytes.size() % rec != 0)
    throw ParseError("cifar10-bin size " + std::to_string(bytes.size()) + " is not a multiple of 3073",
                     bytes.size() - bytes.size() % rec);
  const std::size_t n = bytes.size() / rec;
  Dataset<T> d;
  d.images = Tensor<T>({n, 3, 32, 32});
  d.labels.resize(n);
  d.num_classes = k;
  auto px = d.images.data();
  for (std::size_t i = 0; i < n; ++i) {
    d.labels[i] = bytes[i * rec];
    if (d.labels[i] >= k)
      throw DataError("record " + std::to_string(i) + " at byte offset " + std::to_string(i * rec) + " has label " +
                      std::to_string(d.labels[i]));
    for (std::size_t j = 0; j < per; ++j) px[i * per + j] = static_cast<T>(bytes[i * rec + 1 + j]) / T(255);
  }
  d.rebuild_index();
  return d;
}

enum class DataFormat { Gimg, Cifar10Bin };

inline DataFormat parse_data_format(const std::string& s) {
  if (s == "gimg") return DataFormat::Gimg;
  if (s == "cifar10-bin") return DataFormat::Cifar10Bin;
  throw ConfigError("unknown data format \"" + s + "\" (expected gimg or cifar10-bin)");
}

template <class T>
Dataset<T> load_dataset(const std::string& path, DataFormat format) {
  const auto bytes = detail::read_file(path);
  try {
    return format == DataFormat::Gimg ? parse_gimg<T>(bytes) : parse_cifar10<T>(bytes);
  } catch (const ParseError& e) {
    throw ParseError(path + ": " + std::string(e.what()).substr(0, std::string(e.what()).rfind(" (at byte")),
                     e.offset());
  }
}

/// Seeded split into consecutive fractions of a shuffled order.
template <class T>
std::vector<Dataset<T>> split_dataset(const Dataset<T>& d, const std::vector<double>& fractions, Rng& rng) {
  double total = 0;
  for (double f : fractions) {
    if (!(f >= 0)) throw ConfigError("split fractions must be non-negative");
    total += f;
  }
  if (std::abs(total - 1.0) > 1e-9) throw ConfigError("split fractions must sum to 1");
  std::vector<std::size_t> order(d.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  rng.shuffle(order);
  std::vector<Dataset<T>> out;
  std::size_t start = 0;
  double acc = 0;
  for (std::size_t s = 0; s < fractions.size(); ++s) {
    acc += fractions[s];
    const std::size_t end =
        s + 1 == fractions.size() ? order.size() : static_cast<std::size_t>(std::llround(acc * static_cast<double>(order.size())));
    std::vector<std::size_t> idx(order.begin() + static_cast<long>(start), order.begin() + static_cast<long>(end));
    std::sort(idx.begin(), idx.end());
    out.push_back(d.subset(idx));
    start = end;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Stratified sampling.

/// Per-class count bounds [lo, hi] for a batch of `batch` over `classes`
/// classes: each class gets (1/K +- tolerance) of the batch.
inline std::pair<std::size_t, std::size_t> class_count_bounds(std::size_t batch, std::size_t classes, double tolerance) {
  if (classes == 0) throw ConfigError("stratified sampling needs at least one class");
  const double share = 1.0 / static_cast<double>(classes), b = static_cast<double>(batch);
  const double lo = std::max(0.0, std::ceil((share - tolerance) * b - 1e-9));
  const double hi = std::min(b, std::floor((share + tolerance) * b + 1e-9));
  return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
}

/// Batches whose per-class counts stay within class_count_bounds. Classes
/// are drawn without replacement and reshuffled when exhausted, which
/// oversamples small classes.
class StratifiedSampler {
 public:
  StratifiedSampler(std::vector<std::vector<std::size_t>> class_index, std::size_t batch, Rng rng,
                    double tolerance = 0.04)
      : classes_(std::move(class_index)), batch_(batch), rng_(rng) {
    const std::size_t k = classes_.size();
    if (k == 0) throw ConfigError("stratified sampling needs at least one class");
    if (batch_ < k) throw ConfigError("batch size " + std::to_string(batch_) + " is smaller than " + std::to_string(k) + " classes");
    for (std::size_t c = 0; c < k; ++c)
      if (classes_[c].empty()) throw ConfigError("class " + std::to_string(c) + " has no examples");
    std::tie(lo_, hi_) = class_count_bounds(batch_, k, tolerance);
    if (lo_ * k > batch_ || hi_ * k < batch_)
      throw ConfigError("per-class bounds [" + std::to_string(lo_) + ", " + std::to_string(hi_) +
                        "] are infeasible for batch " + std::to_string(batch_) + " over " + std::to_string(k) +
                        " classes");
    cursor_.assign(k, 0);
    for (auto& c : classes_) rng_.shuffle(c);
  }

  std::size_t lower() const noexcept { return lo_; }
  std::size_t upper() const noexcept { return hi_; }

  /// Per-class counts for the next batch.
  std::vector<std::size_t> draw_counts() {
    const std::size_t k = classes_.size();
    std::vector<std::size_t> order(k), counts(k, 0);
    for (std::size_t c = 0; c < k; ++c) order[c] = c;
    rng_.shuffle(order);
    std::size_t remaining = batch_;
    for (std::size_t j = 0; j + 1 < k; ++j) {
      const std::size_t rest = k - j - 1;
      const std::size_t a = remaining > rest * hi_ ? std::max(lo_, remaining - rest * hi_) : lo_;
      const std::size_t b = std::min(hi_, remaining - rest * lo_);
      const std::size_t n = rng_.uniform_range(static_cast<std::int64_t>(a), static_cast<std::int64_t>(b));
      counts[order[j]] = n;
      remaining -= n;
    }
    counts[order[k - 1]] = remaining;
    return counts;
  }

  /// Example indices of the next batch, classes interleaved in random order.
  std::vector<std::size_t> next() {
    const auto counts = draw_counts();
    std::vector<std::size_t> out;
    out.reserve(batch_);
    for (std::size_t c = 0; c < classes_.size(); ++c)
      for (std::size_t i = 0; i < counts[c]; ++i) {
        if (cursor_[c] == classes_[c].size()) {
          rng_.shuffle(classes_[c]);
          cursor_[c] = 0;
        }
        out.push_back(classes_[c][cursor_[c]++]);
      }
    rng_.shuffle(out);
    return out;
  }

 private:
  std::vector<std::vector<std::size_t>> classes_;
  std::size_t batch_;
  Rng rng_;
  std::size_t lo_ = 0, hi_ = 0;
  std::vector<std::size_t> cursor_;
};

// ---------------------------------------------------------------------------
// Targets: label smoothing and mixup.

template <class T>
struct LabeledBatch {
  Tensor<T> images;   // [B, C, H, W]
  Tensor<T> targets;  // [B, K], rows sum to 1
};

template <class T>
Tensor<T> smooth_labels(std::span<const std::size_t> labels, std::size_t k, double eps) {
  if (!(eps >= 0.0 && eps < 1.0)) throw ConfigError("label smoothing must be in [0, 1)");
  Tensor<T> out({labels.size(), k}, static_cast<T>(eps / static_cast<double>(k)));
  for (std::size_t b = 0; b < labels.size(); ++b) {
    if (labels[b] >= k) throw DataError("label " + std::to_string(labels[b]) + " out of range for " + std::to_string(k) + " classes");
    out[b * k + labels[b]] = static_cast<T>(1.0 - eps + eps / static_cast<double>(k));
  }
  return out;
}

/// lambda * a + (1 - lambda) * b for images and targets alike.
template <class T>
LabeledBatch<T> mixup_with_lambda(const LabeledBatch<T>& a, const LabeledBatch<T>& b, double lambda) {
  if (a.images.shape() != b.images.shape() || a.targets.shape() != b.targets.shape())
    throw ShapeError("mixup: batch shapes differ: " + to_string(a.images.shape()) + " vs " + to_string(b.images.shape()));
  const T l = static_cast<T>(lambda), r = static_cast<T>(1.0 - lambda);
  LabeledBatch<T> out{Tensor<T>(a.images.shape()), Tensor<T>(a.targets.shape())};
  for (std::size_t i = 0; i < out.images.size(); ++i) out.images[i] = l * a.images[i] + r * b.images[i];
  for (std::size_t i = 0; i < out.targets.size(); ++i) out.targets[i] = l * a.targets[i] + r * b.targets[i];
  return out;
}

/// One lambda ~ Beta(alpha, alpha) for the whole batch.
template <class T>
LabeledBatch<T> mixup(const LabeledBatch<T>& a, const LabeledBatch<T>& b, double alpha, Rng& rng,
                      double* lambda_out = nullptr) {
  if (!(alpha > 0.0)) throw ConfigError("mixup alpha must be positive");
  const double lambda = rng.beta(alpha, alpha);
  if (lambda_out) *lambda_out = lambda;
  return mixup_with_lambda(a, b, lambda);
}

/// Pairs every example with its mirror in the batch (i <-> B-1-i).
template <class T>
LabeledBatch<T> reversed(const LabeledBatch<T>& a) {
  const std::size_t B = a.images.dim(0), per = a.images.size() / std::max<std::size_t>(B, 1);
  const std::size_t k = a.targets.dim(1);
  LabeledBatch<T> out{Tensor<T>(a.images.shape()), Tensor<T>(a.targets.shape())};
  for (std::size_t i = 0; i < B; ++i) {
    std::copy_n(a.images.data().begin() + (B - 1 - i) * per, per, out.images.data().begin() + i * per);
    std::copy_n(a.targets.data().begin() + (B - 1 - i) * k, k, out.targets.data().begin() + i * k);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Augmentation.

enum class AugOp { HFlip, VFlip, Rot90, Rot180, Rot270, Translate, Brightness, Contrast };

inline const std::vector<AugOp>& all_aug_ops() {
  static const std::vector<AugOp> ops{AugOp::HFlip,     AugOp::VFlip,      AugOp::Rot90,   AugOp::Rot180,
                                      AugOp::Rot270,    AugOp::Translate, AugOp::Brightness, AugOp::Contrast};
  return ops;
}

inline std::string to_string(AugOp op) {
  switch (op) {
    case AugOp::HFlip: return "hflip";
    case AugOp::VFlip: return "vflip";
    case AugOp::Rot90: return "rot90";
    case AugOp::Rot180: return "rot180";
    case AugOp::Rot270: return "rot270";
    case AugOp::Translate: return "translate";
    case AugOp::Brightness: return "brightness";
    case AugOp::Contrast: return "contrast";
  }
  return "?";
}

struct AugPolicy {
  std::size_t num_layers = 2;
  std::vector<AugOp> ops = all_aug_ops();
  double max_translate = 0.1;  // fraction of the side
  double max_brightness = 0.2;
  double max_contrast = 1.25;  // factor drawn log-uniformly from [1/max, max]
};

/// Applies `op` to one image [C, H, W] in place; magnitudes come from `rng`.
/// Quarter turns need a square image.
template <class T>
void apply_aug(std::span<T> img, std::size_t c, std::size_t h, std::size_t w, AugOp op, const AugPolicy& pol,
               Rng& rng) {
  std::vector<T> src(img.begin(), img.end());
  auto at = [&](std::size_t ch, std::size_t y, std::size_t x) -> T { return src[(ch * h + y) * w + x]; };
  auto set = [&](std::size_t ch, std::size_t y, std::size_t x, T v) { img[(ch * h + y) * w + x] = v; };
  switch (op) {
    case AugOp::HFlip:
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t y = 0; y < h; ++y)
          for (std::size_t x = 0; x < w; ++x) set(ch, y, x, at(ch, y, w - 1 - x));
      break;
    case AugOp::VFlip:
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t y = 0; y < h; ++y)
          for (std::size_t x = 0; x < w; ++x) set(ch, y, x, at(ch, h - 1 - y, x));
      break;
    case AugOp::Rot90:  // counter-clockwise
      if (h != w) throw ShapeError("quarter-turn rotation needs a square image");
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t y = 0; y < h; ++y)
          for (std::size_t x = 0; x < w; ++x) set(ch, y, x, at(ch, x, w - 1 - y));
      break;
    case AugOp::Rot180:
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t y = 0; y < h; ++y)
          for (std::size_t x = 0; x < w; ++x) set(ch, y, x, at(ch, h - 1 - y, w - 1 - x));
      break;
    case AugOp::Rot270:
      if (h != w) throw ShapeError("quarter-turn rotation needs a square image");
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t y = 0; y < h; ++y)
          for (std::size_t x = 0; x < w; ++x) set(ch, y, x, at(ch, h - 1 - x, y));
      break;
    case AugOp::Translate: {
      const auto my = static_cast<std::int64_t>(std::floor(pol.max_translate * static_cast<double>(h)));
      const auto mx = static_cast<std::int64_t>(std::floor(pol.max_translate * static_cast<double>(w)));
      const std::int64_t dy = rng.uniform_range(-my, my), dx = rng.uniform_range(-mx, mx);
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t y = 0; y < h; ++y)
          for (std::size_t x = 0; x < w; ++x) {
            const std::int64_t sy = static_cast<std::int64_t>(y) - dy, sx = static_cast<std::int64_t>(x) - dx;
            const bool inside = sy >= 0 && sx >= 0 && sy < static_cast<std::int64_t>(h) && sx < static_cast<std::int64_t>(w);
            set(ch, y, x, inside ? at(ch, static_cast<std::size_t>(sy), static_cast<std::size_t>(sx)) : T(0));
          }
      break;
    }
    case AugOp::Brightness: {
      const T delta = static_cast<T>(rng.uniform(-pol.max_brightness, pol.max_brightness));
      for (auto& v : img) v = std::clamp(v + delta, T(0), T(1));
      break;
    }
    case AugOp::Contrast: {
      const double lm = std::log(pol.max_contrast);
      const T f = static_cast<T>(std::exp(rng.uniform(-lm, lm)));
      for (std::size_t ch = 0; ch < c; ++ch) {
        T mean = 0;
        for (std::size_t k = 0; k < h * w; ++k) mean += src[ch * h * w + k];
        mean /= static_cast<T>(h * w);
        for (std::size_t k = 0; k < h * w; ++k)
          img[ch * h * w + k] = std::clamp(mean + f * (src[ch * h * w + k] - mean), T(0), T(1));
      }
      break;
    }
  }
}

/// Per image: num_layers ops drawn uniformly from the pool, composed.
/// Quarter turns are skipped from the pool for non-square images.
template <class T>
Tensor<T> augment(const Tensor<T>& images, const AugPolicy& pol, Rng& rng) {
  if (images.rank() != 4) throw ShapeError("augment expects [B,C,H,W], got " + to_string(images.shape()));
  Tensor<T> out = images;
  const std::size_t B = images.dim(0), c = images.dim(1), h = images.dim(2), w = images.dim(3);
  std::vector<AugOp> pool;
  for (auto op : pol.ops)
    if (h == w || (op != AugOp::Rot90 && op != AugOp::Rot270)) pool.push_back(op);
  if (pool.empty() || pol.num_layers == 0) return out;
  const std::size_t per = c * h * w;
  for (std::size_t b = 0; b < B; ++b) {
    std::span<T> img(out.data().data() + b * per, per);
    for (std::size_t l = 0; l < pol.num_layers; ++l)
      apply_aug(img, c, h, w, pool[static_cast<std::size_t>(rng.uniform_int(pool.size()))], pol, rng);
    for (auto& v : img) v = std::clamp(v, T(0), T(1));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic data.

/// Class-prototype images plus Gaussian pixel noise. Prototypes depend only
/// on `prototype_seed`, so train and test sets drawn with different sample
/// seeds share them.
struct SyntheticSpec {
  std::size_t classes = 10;
  std::size_t channels = 3;
  std::size_t size = 32;
  double noise = 0.1;
  std::uint64_t prototype_seed = 7;
};

template <class T>
Tensor<T> synthetic_prototypes(const SyntheticSpec& s) {
  Rng rng(s.prototype_seed);
  const std::size_t n = s.size;
  Tensor<T> p({s.classes, s.channels, n, n});
  for (std::size_t k = 0; k < s.classes; ++k)
    for (std::size_t c = 0; c < s.channels; ++c) {
      // Sum of three low-frequency plane waves, rescaled to [0.2, 0.8].
      double fy[3], fx[3], ph[3];
      for (int j = 0; j < 3; ++j) {
        fy[j] = rng.uniform(-2.0, 2.0);
        fx[j] = rng.uniform(-2.0, 2.0);
        ph[j] = rng.uniform(0.0, 2.0 * std::numbers::pi);
      }
      std::vector<double> v(n * n);
      for (std::size_t y = 0; y < n; ++y)
        for (std::size_t x = 0; x < n; ++x) {
          double acc = 0;
          for (int j = 0; j < 3; ++j)
            acc += std::sin(2.0 * std::numbers::pi * (fy[j] * static_cast<double>(y) + fx[j] * static_cast<double>(x)) /
                                static_cast<double>(n) +
                            ph[j]);
          v[y * n + x] = acc;
        }
      const auto [mn, mx] = std::minmax_element(v.begin(), v.end());
      const double lo = *mn, span = std::max(*mx - *mn, 1e-12);
      for (std::size_t i = 0; i < n * n; ++i) p[((k * s.channels + c) * n * n) + i] = static_cast<T>(0.2 + 0.6 * (v[i] - lo) / span);
    }
  return p;
}

/// `count` examples with balanced labels (i mod K) in shuffled order.
template <class T>
Dataset<T> make_synthetic(const SyntheticSpec& s, std::size_t count, Rng& rng) {
  const auto protos = synthetic_prototypes<T>(s);
  const std::size_t per = s.channels * s.size * s.size;
  std::vector<std::size_t> labels(count);
  for (std::size_t i = 0; i < count; ++i) labels[i] = i % s.classes;
  rng.shuffle(labels);
  Dataset<T> d;
  d.images = Tensor<T>({count, s.channels, s.size, s.size});
  d.labels = labels;
  d.num_classes = s.classes;
  for (std::size_t i = 0; i < count; ++i)
    for (std::size_t j = 0; j < per; ++j)
      d.images[i * per + j] =
          std::clamp(static_cast<T>(static_cast<double>(protos[labels[i] * per + j]) + rng.normal(0.0, s.noise)), T(0), T(1));
  d.rebuild_index();
  return d;
}

}  // namespace astro
