// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <string>
#include <variant>
#include <vector>

#include "astro/attention.hpp"
#include "astro/blocks.hpp"

namespace astro {

/// Architecture hyperparameters. Stages S1..S4 follow `layout`, one letter
/// per stage: C = MBConv stage, T = relative-attention transformer stage.
struct ModelConfig {
  std::string layout = "CCCT";
  std::size_t in_channels = 3;
  std::size_t stem_channels = 32;
  std::array<std::size_t, 4> channels{32, 64, 128, 256};
  std::array<std::size_t, 4> depths{2, 2, 2, 2};
  std::size_t head_dim = 32;  // heads per T stage = channels / head_dim
  std::size_t expansion = 4;
  double se_ratio = 0.25;
  std::size_t num_classes = 10;
  std::size_t image_size = 64;
  double drop_path_rate = 0.2;
  double head_dropout = 0.0;

  void validate() const {
    if (layout.size() != 4) throw ConfigError("layout must have 4 stages, got \"" + layout + "\"");
    for (char c : layout)
      if (c != 'C' && c != 'T') throw ConfigError("layout letters must be C or T, got \"" + layout + "\"");
    if (in_channels == 0 || stem_channels == 0 || num_classes == 0) throw ConfigError("channel counts must be positive");
    for (std::size_t i = 0; i < 4; ++i) {
      if (channels[i] == 0) throw ConfigError("stage " + std::to_string(i + 1) + " has zero channels");
      if (depths[i] == 0) throw ConfigError("stage " + std::to_string(i + 1) + " has zero depth");
      if (layout[i] == 'T' && (head_dim == 0 || channels[i] % head_dim != 0))
        throw ConfigError("stage " + std::to_string(i + 1) + ": " + std::to_string(channels[i]) +
                          " channels not divisible by head_dim " + std::to_string(head_dim));
    }
    if (image_size == 0 || image_size % 32 != 0)
      throw ConfigError("image size must be a positive multiple of 32, got " + std::to_string(image_size));
    if (expansion == 0) throw ConfigError("expansion must be positive");
    if (!(se_ratio > 0.0 && se_ratio <= 1.0)) throw ConfigError("se_ratio must be in (0, 1]");
    if (!(drop_path_rate >= 0.0 && drop_path_rate < 1.0)) throw ConfigError("drop_path_rate must be in [0, 1)");
    if (!(head_dropout >= 0.0 && head_dropout < 1.0)) throw ConfigError("head_dropout must be in [0, 1)");
  }

  std::size_t total_blocks() const { return depths[0] + depths[1] + depths[2] + depths[3]; }

  /// Stochastic-depth rate of block `i` (0-based over all stage blocks):
  /// linear from 0 at the first block to drop_path_rate at the last.
  double block_drop_rate(std::size_t i) const {
    const std::size_t n = total_blocks();
    if (n <= 1) return drop_path_rate;
    return drop_path_rate * static_cast<double>(i) / static_cast<double>(n - 1);
  }

  /// Side length of the feature map entering stage `s` (0-based).
  std::size_t stage_input_size(std::size_t s) const { return image_size >> (s + 1); }
};

/// Warnings for layouts known to train unstably: two or more transformer
/// stages, or a convolutional stage after a transformer stage.
inline std::vector<std::string> layout_warnings(const ModelConfig& cfg) {
  std::vector<std::string> out;
  const auto t_count = std::count(cfg.layout.begin(), cfg.layout.end(), 'T');
  const auto first_t = cfg.layout.find('T');
  if (first_t != std::string::npos && cfg.layout.find('C', first_t) != std::string::npos)
    out.push_back("layout " + cfg.layout + " places a convolutional stage after a transformer stage");
  if (t_count >= 2)
    out.push_back("layout " + cfg.layout + " has " + std::to_string(t_count) +
                  " transformer stages; such stacks are known to train unstably, C-C-C-T is the stable choice");
  return out;
}

template <class T>
struct ConvStage {
  MBConvParams<T> down;
  std::vector<MBConvParams<T>> blocks;
};

template <class T>
struct AttnStage {
  GridSpec in_grid;
  GridSpec grid;  // after down-sampling
  TransformerDownParams<T> down;
  std::vector<TransformerBlockParams<T>> blocks;
};

template <class T>
using Stage = std::variant<ConvStage<T>, AttnStage<T>>;

template <class T>
class Model {
 public:
  ModelConfig cfg;
  Conv2dParams<T> stem1;  // stride 2, no bias
  NormParams<T> stem_norm;
  Conv2dParams<T> stem2;  // stride 1, bias
  std::vector<Stage<T>> stages;
  NormParams<T> head_norm;
  LinearParams<T> head;

  Model() = default;
  Model(const Model&) = default;
  Model& operator=(const Model&) = default;

  NamedTensors<T> parameters() {
    NamedTensors<T> out;
    stem1.collect("stem.conv1", out);
    stem_norm.collect("stem.norm", out);
    stem2.collect("stem.conv2", out);
    for (std::size_t s = 0; s < stages.size(); ++s) {
      const std::string pre = "s" + std::to_string(s + 1);
      std::visit(
          [&](auto& st) {
            st.down.collect(pre + ".down", out);
            for (std::size_t b = 0; b < st.blocks.size(); ++b) st.blocks[b].collect(pre + ".b" + std::to_string(b + 1), out);
          },
          stages[s]);
    }
    head_norm.collect("head.norm", out);
    head.collect("head.fc", out);
    return out;
  }

  /// Batch-norm running statistics.
  NamedTensors<T> buffers() {
    NamedTensors<T> out;
    stem_norm.collect_buffers("stem.norm", out);
    for (std::size_t s = 0; s < stages.size(); ++s) {
      const std::string pre = "s" + std::to_string(s + 1);
      if (auto* c = std::get_if<ConvStage<T>>(&stages[s])) {
        c->down.collect_buffers(pre + ".down", out);
        for (std::size_t b = 0; b < c->blocks.size(); ++b) c->blocks[b].collect_buffers(pre + ".b" + std::to_string(b + 1), out);
      }
    }
    return out;
  }

  std::size_t parameter_count() {
    std::size_t n = 0;
    for (const auto& p : parameters()) n += p.tensor->size();
    return n;
  }

  /// Logits [B, num_classes] for images [B, in_channels, S, S]. Train mode
  /// uses batch statistics, drop path and head dropout drawn from `rng`.
  Var<T> forward(Tape<T>& tape, const Tensor<T>& images, Mode mode, Rng* rng = nullptr) {
    const auto& s = images.shape();
    if (s.size() != 4 || s[1] != cfg.in_channels || s[2] != cfg.image_size || s[3] != cfg.image_size)
      throw ShapeError("model expects [B," + std::to_string(cfg.in_channels) + "," + std::to_string(cfg.image_size) +
                       "," + std::to_string(cfg.image_size) + "], got " + to_string(s));
    auto check = [](const Var<T>& v, const std::string& where) {
      if (!v.value().all_finite()) throw NonFiniteError("non-finite activation after " + where);
      return v;
    };
    auto x = conv2d(tape.constant(images), stem1);
    x = conv2d(gelu(batch_norm(x, stem_norm, mode)), stem2);
    check(x, "stage S0 (stem)");

    bool tokens = false;  // x holds [B, N, C] tokens rather than a [B, C, H, W] map
    GridSpec grid;
    std::size_t block = 0;
    auto dp = [&]() { return DropPathState{cfg.block_drop_rate(block++), mode, rng, std::nullopt}; };
    for (std::size_t i = 0; i < stages.size(); ++i) {
      if (auto* c = std::get_if<ConvStage<T>>(&stages[i])) {
        if (tokens) x = tokens_to_map(x, grid), tokens = false;
        x = mbconv_downsample(x, c->down, dp());
        for (auto& b : c->blocks) x = mbconv_block(x, b, dp());
      } else {
        auto& a = std::get<AttnStage<T>>(stages[i]);
        if (!tokens) x = map_to_tokens(x), tokens = true;
        x = transformer_down_block(x, a.down, a.in_grid, dp());
        grid = a.grid;
        for (auto& b : a.blocks) x = transformer_block(x, b, grid, dp());
      }
      check(x, "stage S" + std::to_string(i + 1) + " (" + cfg.layout[i] + ")");
    }

    Var<T> pooled = [&] {
      if (!tokens) return global_avg_pool(x);
      const auto& ts = x.shape();
      return reshape(scale(sum_to(x, {ts[0], 1, ts[2]}), T(1) / static_cast<T>(ts[1])), {ts[0], ts[2]});
    }();
    auto h = layer_norm(pooled, head_norm);
    if (mode == Mode::Train && cfg.head_dropout > 0.0) {
      if (!rng) throw ContractError("head dropout needs an rng in train mode");
      Tensor<T> mask(h.shape());
      const T keep = static_cast<T>(1.0 / (1.0 - cfg.head_dropout));
      for (std::size_t k = 0; k < mask.size(); ++k) mask[k] = rng->bernoulli(cfg.head_dropout) ? T(0) : keep;
      h = mul(h, tape.constant(std::move(mask)));
    }
    auto logits = linear(h, head);
    check(logits, "classifier head");
    return logits;
  }

  /// Eval-mode logits without recording gradients.
  Tensor<T> predict(const Tensor<T>& images) {
    Tape<T> tape(false);
    return forward(tape, images, Mode::Eval).value();
  }
};

template <class T>
Model<T> build_model(const ModelConfig& cfg, Rng& rng) {
  cfg.validate();
  Model<T> m;
  m.cfg = cfg;
  m.stem1 = Conv2dParams<T>::init(cfg.stem_channels, cfg.in_channels, 3, 2, false, rng);
  m.stem_norm = NormParams<T>::batch(cfg.stem_channels);
  m.stem2 = Conv2dParams<T>::init(cfg.stem_channels, cfg.stem_channels, 3, 1, true, rng);
  std::size_t in = cfg.stem_channels;
  for (std::size_t i = 0; i < 4; ++i) {
    const std::size_t out = cfg.channels[i];
    const std::size_t side = cfg.stage_input_size(i);
    if (cfg.layout[i] == 'C') {
      ConvStage<T> st;
      st.down = MBConvParams<T>::init(in, out, cfg.expansion, 2, cfg.se_ratio, rng);
      for (std::size_t b = 1; b < cfg.depths[i]; ++b)
        st.blocks.push_back(MBConvParams<T>::init(out, out, cfg.expansion, 1, cfg.se_ratio, rng));
      m.stages.emplace_back(std::move(st));
    } else {
      AttnStage<T> st;
      st.in_grid = GridSpec{side, side, Topology::Plane};
      st.grid = st.in_grid.pooled();
      const std::size_t heads = out / cfg.head_dim;
      st.down = TransformerDownParams<T>::init(in, out, heads, st.in_grid, rng);
      for (std::size_t b = 1; b < cfg.depths[i]; ++b)
        st.blocks.push_back(TransformerBlockParams<T>::init(out, heads, st.grid, rng));
      m.stages.emplace_back(std::move(st));
    }
    in = out;
  }
  m.head_norm = NormParams<T>::layer(in);
  m.head = LinearParams<T>::init(in, cfg.num_classes, true, rng);
  m.head.weight = Tensor<T>::randn({in, cfg.num_classes}, rng, 0.02);  // near-uniform initial predictions
  return m;
}

// ---------------------------------------------------------------------------
// Analytic size accounting.

struct StageSummary {
  std::string name;
  std::uint64_t params = 0;
  std::uint64_t macs = 0;  // per image
};

struct ModelSummary {
  std::uint64_t params = 0;
  std::uint64_t macs = 0;
  std::vector<StageSummary> stages;
};

namespace detail {

struct Counter {
  std::uint64_t params = 0, macs = 0;

  void conv(std::uint64_t out, std::uint64_t in, std::uint64_t k, bool bias, std::uint64_t out_side) {
    params += out * in * k * k + (bias ? out : 0);
    macs += out * in * k * k * out_side * out_side;
  }
  void depthwise(std::uint64_t c, std::uint64_t k, std::uint64_t out_side) {
    params += c * k * k;
    macs += c * k * k * out_side * out_side;
  }
  void norm(std::uint64_t c) { params += 2 * c; }
  void linear(std::uint64_t in, std::uint64_t out, bool bias, std::uint64_t rows) {
    params += in * out + (bias ? out : 0);
    macs += in * out * rows;
  }
  void se(std::uint64_t c, double ratio) {
    const std::uint64_t m = SqueezeExciteParams<double>::reduced_channels(c, ratio);
    linear(c, m, true, 1);
    linear(m, c, true, 1);
  }
  void mbconv(std::uint64_t in, std::uint64_t out, std::uint64_t e, std::uint64_t stride, double ratio,
              std::uint64_t side) {
    const std::uint64_t mid = in * e, os = side / stride;
    norm(in);
    conv(mid, in, 1, false, side);
    norm(mid);
    depthwise(mid, 3, os);
    norm(mid);
    se(mid, ratio);
    conv(out, mid, 1, true, os);
    if (stride == 2) conv(out, in, 1, true, os);
  }
  // Projections plus QK^T and AV products (N^2 * width each).
  void attention(std::uint64_t dim, std::uint64_t width, std::uint64_t heads, std::uint64_t bias_entries,
                 std::uint64_t n) {
    linear(dim, width, false, n);
    linear(dim, width, false, n);
    linear(dim, width, false, n);
    linear(width, width, false, n);
    params += heads * bias_entries;
    macs += 2 * n * n * width;
  }
  void ffn(std::uint64_t dim, std::uint64_t n) {
    linear(dim, 4 * dim, true, n);
    linear(4 * dim, dim, true, n);
  }
};

}  // namespace detail

/// Exact parameter count and multiply-accumulate estimate per image.
inline ModelSummary summarize(const ModelConfig& cfg) {
  cfg.validate();
  ModelSummary sum;
  auto push = [&](std::string name, const detail::Counter& c) {
    sum.stages.push_back({std::move(name), c.params, c.macs});
    sum.params += c.params;
    sum.macs += c.macs;
  };
  detail::Counter stem;
  const std::uint64_t half = cfg.image_size / 2;
  stem.conv(cfg.stem_channels, cfg.in_channels, 3, false, half);
  stem.norm(cfg.stem_channels);
  stem.conv(cfg.stem_channels, cfg.stem_channels, 3, true, half);
  push("S0 stem", stem);

  std::uint64_t in = cfg.stem_channels;
  for (std::size_t i = 0; i < 4; ++i) {
    detail::Counter c;
    const std::uint64_t out = cfg.channels[i], side = cfg.stage_input_size(i), os = side / 2;
    if (cfg.layout[i] == 'C') {
      c.mbconv(in, out, cfg.expansion, 2, cfg.se_ratio, side);
      for (std::size_t b = 1; b < cfg.depths[i]; ++b) c.mbconv(out, out, cfg.expansion, 1, cfg.se_ratio, os);
    } else {
      const std::uint64_t heads = out / cfg.head_dim, n = os * os, entries = (2 * os - 1) * (2 * os - 1);
      c.norm(in);
      c.attention(in, out, heads, entries, n);
      c.linear(in, out, true, n);
      c.norm(out);
      c.ffn(out, n);
      for (std::size_t b = 1; b < cfg.depths[i]; ++b) {
        c.norm(out);
        c.attention(out, out, heads, entries, n);
        c.norm(out);
        c.ffn(out, n);
      }
    }
    push("S" + std::to_string(i + 1) + " " + cfg.layout[i], c);
    in = out;
  }
  detail::Counter head;
  head.norm(in);
  head.linear(in, cfg.num_classes, true, 1);
  push("head", head);
  return sum;
}

}  // namespace astro
