// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "astro/autodiff.hpp"
#include "astro/drop_path.hpp"
#include "astro/nn.hpp"

namespace astro {

enum class Topology { Plane, Torus };

/// Spatial layout of a token sequence. Tokens are the row-major flattening
/// of an height x width grid; a 1-D sequence of n tokens is a 1 x n grid.
struct GridSpec {
  std::size_t height = 1;
  std::size_t width = 1;
  Topology topology = Topology::Plane;

  static GridSpec line(std::size_t n, Topology t = Topology::Torus) { return {1, n, t}; }
  std::size_t tokens() const noexcept { return height * width; }
  GridSpec pooled() const { return {height / 2, width / 2, topology}; }
  friend bool operator==(const GridSpec&, const GridSpec&) = default;
};

enum class BiasIndexing {
  Clamped2d,   // (2H-1)(2W-1) entries per head, displacement pairs clamped to range
  Circular1d,  // N entries, displacement taken mod N over the flattened sequence
  Circular2d,  // H*W entries, row and column displacement each taken mod H, W
};

/// Learnable bias w[i - j] added to attention logits. The entry used for a
/// query/key pair depends only on their displacement.
template <class T>
struct RelativeBiasTable {
  BiasIndexing mode = BiasIndexing::Clamped2d;
  std::size_t heads = 1;
  GridSpec grid;
  Tensor<T> table;  // [heads, entries]

  static std::size_t entries_for(BiasIndexing mode, const GridSpec& g) {
    switch (mode) {
      case BiasIndexing::Clamped2d: return (2 * g.height - 1) * (2 * g.width - 1);
      case BiasIndexing::Circular1d:
      case BiasIndexing::Circular2d: return g.tokens();
    }
    return 0;
  }

  static RelativeBiasTable zeros(BiasIndexing mode, const GridSpec& g, std::size_t heads = 1) {
    return {mode, heads, g, Tensor<T>::zeros({heads, entries_for(mode, g)})};
  }

  static RelativeBiasTable random(BiasIndexing mode, const GridSpec& g, Rng& rng, double stddev = 1.0,
                                  std::size_t heads = 1) {
    return {mode, heads, g, Tensor<T>::randn({heads, entries_for(mode, g)}, rng, stddev)};
  }

  std::size_t entries() const { return table.dim(1); }

  void check_grid(const GridSpec& g) const {
    const bool circular = mode != BiasIndexing::Clamped2d;
    if (circular && g.topology != Topology::Torus)
      throw ContractError("circular bias indexing needs a torus grid");
    if (!circular && g.topology != Topology::Plane)
      throw ContractError("clamped bias indexing needs a plane grid");
    if (circular && !(g == grid)) throw ContractError("circular bias table was built for a different grid");
  }

  /// Table column for query token i and key token j on grid g.
  std::size_t index(const GridSpec& g, std::size_t i, std::size_t j) const {
    const long hi = static_cast<long>(i / g.width), wi = static_cast<long>(i % g.width);
    const long hj = static_cast<long>(j / g.width), wj = static_cast<long>(j % g.width);
    switch (mode) {
      case BiasIndexing::Clamped2d: {
        const long sh = static_cast<long>(grid.height) - 1, sw = static_cast<long>(grid.width) - 1;
        const long dh = std::clamp(hi - hj, -sh, sh);
        const long dw = std::clamp(wi - wj, -sw, sw);
        return static_cast<std::size_t>((dh + sh) * (2 * sw + 1) + (dw + sw));
      }
      case BiasIndexing::Circular1d: {
        const long n = static_cast<long>(g.tokens());
        return static_cast<std::size_t>(((static_cast<long>(i) - static_cast<long>(j)) % n + n) % n);
      }
      case BiasIndexing::Circular2d: {
        const long H = static_cast<long>(g.height), W = static_cast<long>(g.width);
        const long dh = ((hi - hj) % H + H) % H;
        const long dw = ((wi - wj) % W + W) % W;
        return static_cast<std::size_t>(dh * W + dw);
      }
    }
    return 0;
  }

  /// Flat table offsets for the [heads, N, N] bias matrix.
  std::vector<std::size_t> gather_indices(const GridSpec& g) const {
    check_grid(g);
    const std::size_t n = g.tokens(), e = entries();
    std::vector<std::size_t> idx(heads * n * n);
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) idx[(h * n + i) * n + j] = h * e + index(g, i, j);
    return idx;
  }

  void collect(const std::string& prefix, NamedTensors<T>& out) { out.push_back({prefix + ".table", &table}); }
};

/// [heads, N, N] bias matrix gathered from the table (differentiable in the table).
template <class T>
Var<T> bias_matrix(Tape<T>& tape, const RelativeBiasTable<T>& bias, const GridSpec& grid) {
  const std::size_t n = grid.tokens();
  return gather(tape.param(bias.table), bias.gather_indices(grid), {bias.heads, n, n});
}

namespace detail {

template <class T>
void require_finite_logits(const Tensor<T>& logits) {
  const std::size_t n = logits.shape().back();
  for (std::size_t k = 0; k < logits.size(); ++k)
    if (!std::isfinite(logits[k]))
      throw NonFiniteError("non-finite attention logit at query " + std::to_string((k / n) % n) + ", key " +
                           std::to_string(k % n));
}

template <class T>
Var<T> literal_logits(const Var<T>& x, const RelativeBiasTable<T>& bias, const GridSpec& grid) {
  const auto& s = x.shape();
  if (s.size() != 2 || s[0] != grid.tokens())
    throw ShapeError("relative attention: input " + to_string(s) + " does not hold " + std::to_string(grid.tokens()) +
                     " tokens");
  if (bias.heads != 1) throw ContractError("literal relative attention uses a single-head bias table");
  const std::size_t n = s[0];
  auto logits = add(matmul(x, transpose(x)), reshape(bias_matrix(x.tape(), bias, grid), {n, n}));
  require_finite_logits(logits.value());
  return logits;
}

}  // namespace detail

/// A[i, j] = softmax_j(x_i . x_j + w[i - j]) for x [N, d], without
/// projections or scaling. Row-stochastic.
template <class T>
Var<T> attention_weights(const Var<T>& x, const RelativeBiasTable<T>& bias, const GridSpec& grid) {
  return softmax(detail::literal_logits(x, bias, grid), 1);
}

/// y_i = sum_j A[i, j] x_j over the whole grid.
template <class T>
Var<T> relative_attention_literal(const Var<T>& x, const RelativeBiasTable<T>& bias, const GridSpec& grid) {
  return matmul(attention_weights(x, bias, grid), x);
}

template <class T>
Tensor<T> attention_weights(const Tensor<T>& x, const RelativeBiasTable<T>& bias, const GridSpec& grid) {
  Tape<T> tape(false);
  return attention_weights(tape.constant(x), bias, grid).value();
}

template <class T>
Tensor<T> relative_attention_literal(const Tensor<T>& x, const RelativeBiasTable<T>& bias, const GridSpec& grid) {
  Tape<T> tape(false);
  return relative_attention_literal(tape.constant(x), bias, grid).value();
}

// ---------------------------------------------------------------------------
// Practical multi-head form.

template <class T>
struct AttentionParams {
  std::size_t heads = 1;
  std::size_t head_dim = 1;
  LinearParams<T> q, k, v;  // [dim, heads * head_dim]
  LinearParams<T> o;        // [heads * head_dim, heads * head_dim]
  RelativeBiasTable<T> bias;
  T scale = T(1);

  /// Queries, keys and values project dim -> out_dim, split over `heads`.
  static AttentionParams init(std::size_t dim, std::size_t heads, std::size_t out_dim, const GridSpec& grid, Rng& rng) {
    if (heads == 0 || out_dim % heads != 0)
      throw ConfigError("attention: width " + std::to_string(out_dim) + " not divisible by " + std::to_string(heads) +
                        " heads");
    AttentionParams p;
    p.heads = heads;
    p.head_dim = out_dim / heads;
    p.q = LinearParams<T>::init(dim, out_dim, false, rng);
    p.k = LinearParams<T>::init(dim, out_dim, false, rng);
    p.v = LinearParams<T>::init(dim, out_dim, false, rng);
    p.o = LinearParams<T>::init(out_dim, out_dim, false, rng);
    p.bias = RelativeBiasTable<T>::zeros(BiasIndexing::Clamped2d, grid, heads);
    p.scale = T(1) / std::sqrt(static_cast<T>(p.head_dim));
    return p;
  }

  void collect(const std::string& prefix, NamedTensors<T>& out) {
    q.collect(prefix + ".q", out);
    k.collect(prefix + ".k", out);
    v.collect(prefix + ".v", out);
    o.collect(prefix + ".o", out);
    bias.collect(prefix + ".bias", out);
  }
};

/// Per head h: softmax(scale * Q_h K_h^T + bias_h) V_h; heads are concatenated
/// and projected by Wo. x is [B, N, dim].
template <class T>
Var<T> relative_attention_multihead(const Var<T>& x, const AttentionParams<T>& p, const GridSpec& grid) {
  const auto& s = x.shape();
  const std::size_t inner = p.heads * p.head_dim;
  if (s.size() != 3 || s[1] != grid.tokens() || p.q.in_features() != s[2] || p.q.out_features() != inner)
    throw ShapeError("multi-head attention: input " + to_string(s) + " does not match " + std::to_string(p.heads) +
                     " heads of " + std::to_string(p.head_dim) + " on " + std::to_string(grid.tokens()) + " tokens");
  const std::size_t B = s[0], N = s[1], H = p.heads, D = p.head_dim;
  auto split = [&](const Var<T>& t) { return reshape(permute(reshape(t, {B, N, H, D}), {0, 2, 1, 3}), {B * H, N, D}); };
  auto q = split(linear(x, p.q));
  auto k = split(linear(x, p.k));
  auto v = split(linear(x, p.v));
  auto logits = add(reshape(scale(bmm(q, k, true), p.scale), {B, H, N, N}), bias_matrix(x.tape(), p.bias, grid));
  detail::require_finite_logits(logits.value());
  auto attn = reshape(softmax(logits, 3), {B * H, N, N});
  auto ctx = reshape(permute(reshape(bmm(attn, v), {B, H, N, D}), {0, 2, 1, 3}), {B, N, inner});
  return linear(ctx, p.o);
}

// ---------------------------------------------------------------------------
// Transformer blocks.

template <class T>
struct FfnParams {
  LinearParams<T> up;    // dim -> ratio * dim
  LinearParams<T> down;  // ratio * dim -> dim

  static FfnParams init(std::size_t dim, std::size_t ratio, Rng& rng) {
    return {LinearParams<T>::init(dim, dim * ratio, true, rng), LinearParams<T>::init(dim * ratio, dim, true, rng)};
  }
  void collect(const std::string& prefix, NamedTensors<T>& out) {
    up.collect(prefix + ".up", out);
    down.collect(prefix + ".down", out);
  }
};

template <class T>
Var<T> ffn(const Var<T>& x, const FfnParams<T>& p) {
  return linear(gelu(linear(x, p.up)), p.down);
}

template <class T>
struct TransformerBlockParams {
  NormParams<T> norm1;
  AttentionParams<T> attn;
  NormParams<T> norm2;
  FfnParams<T> mlp;

  static TransformerBlockParams init(std::size_t dim, std::size_t heads, const GridSpec& grid, Rng& rng) {
    TransformerBlockParams p;
    p.norm1 = NormParams<T>::layer(dim);
    p.attn = AttentionParams<T>::init(dim, heads, dim, grid, rng);
    p.norm2 = NormParams<T>::layer(dim);
    p.mlp = FfnParams<T>::init(dim, 4, rng);
    return p;
  }

  void collect(const std::string& prefix, NamedTensors<T>& out) {
    norm1.collect(prefix + ".norm1", out);
    attn.collect(prefix + ".attn", out);
    norm2.collect(prefix + ".norm2", out);
    mlp.collect(prefix + ".mlp", out);
  }
};

/// Pre-activation block on tokens [B, N, dim]:
///   x <- x + DropPath(Attn(LN(x)));  x <- x + DropPath(FFN(LN(x)))
template <class T>
Var<T> transformer_block(const Var<T>& x, const TransformerBlockParams<T>& p, const GridSpec& grid,
                         const DropPathState& dp) {
  auto h = add(x, drop_path(relative_attention_multihead(layer_norm(x, p.norm1), p.attn, grid), dp));
  return add(h, drop_path(ffn(layer_norm(h, p.norm2), p.mlp), dp));
}

/// [B, N, C] tokens on `grid` -> [B, C, H, W] feature map.
template <class T>
Var<T> tokens_to_map(const Var<T>& x, const GridSpec& grid) {
  const auto& s = x.shape();
  if (s.size() != 3 || s[1] != grid.tokens()) throw ShapeError("tokens_to_map: " + to_string(s) + " vs grid");
  return permute(reshape(x, {s[0], grid.height, grid.width, s[2]}), {0, 3, 1, 2});
}

/// [B, C, H, W] feature map -> [B, H*W, C] tokens.
template <class T>
Var<T> map_to_tokens(const Var<T>& x) {
  const auto& s = x.shape();
  if (s.size() != 4) throw ShapeError("map_to_tokens expects [B,C,H,W], got " + to_string(s));
  return reshape(permute(x, {0, 2, 3, 1}), {s[0], s[2] * s[3], s[1]});
}

template <class T>
Var<T> pool_tokens(const Var<T>& x, const GridSpec& grid) {
  return map_to_tokens(pool2d(tokens_to_map(x, grid), PoolKind::Max, 2, 2));
}

template <class T>
struct DownsampleAttentionParams {
  NormParams<T> norm;
  AttentionParams<T> attn;  // dim -> out_dim, bias table on the pooled grid
  LinearParams<T> proj;     // dim -> out_dim

  static DownsampleAttentionParams init(std::size_t dim, std::size_t out_dim, std::size_t heads,
                                        const GridSpec& in_grid, Rng& rng) {
    DownsampleAttentionParams p;
    p.norm = NormParams<T>::layer(dim);
    p.attn = AttentionParams<T>::init(dim, heads, out_dim, in_grid.pooled(), rng);
    p.proj = LinearParams<T>::init(dim, out_dim, true, rng);
    return p;
  }

  void collect(const std::string& prefix, NamedTensors<T>& out) {
    norm.collect(prefix + ".norm", out);
    attn.collect(prefix + ".attn", out);
    proj.collect(prefix + ".proj", out);
  }
};

/// x <- Proj(Pool(x)) + DropPath(Attention(Pool(LN(x)))), 2x2 max pool in the
/// grid view. Returns [B, N/4, out_dim] tokens on grid.pooled().
template <class T>
Var<T> downsample_attention_block(const Var<T>& x, const DownsampleAttentionParams<T>& p, const GridSpec& grid,
                                  const DropPathState& dp) {
  if (grid.height % 2 || grid.width % 2)
    throw ShapeError("downsample attention needs even grid sides, got " + std::to_string(grid.height) + "x" +
                     std::to_string(grid.width));
  const GridSpec out_grid = grid.pooled();
  auto identity = linear(pool_tokens(x, grid), p.proj);
  auto residual = relative_attention_multihead(pool_tokens(layer_norm(x, p.norm), grid), p.attn, out_grid);
  return add(identity, drop_path(residual, dp));
}

/// First block of a transformer stage: down-sampling attention followed by
/// the FFN residual.
template <class T>
struct TransformerDownParams {
  DownsampleAttentionParams<T> down;
  NormParams<T> norm2;
  FfnParams<T> mlp;

  static TransformerDownParams init(std::size_t dim, std::size_t out_dim, std::size_t heads, const GridSpec& in_grid,
                                    Rng& rng) {
    return {DownsampleAttentionParams<T>::init(dim, out_dim, heads, in_grid, rng), NormParams<T>::layer(out_dim),
            FfnParams<T>::init(out_dim, 4, rng)};
  }

  void collect(const std::string& prefix, NamedTensors<T>& out) {
    down.collect(prefix + ".down", out);
    norm2.collect(prefix + ".norm2", out);
    mlp.collect(prefix + ".mlp", out);
  }
};

template <class T>
Var<T> transformer_down_block(const Var<T>& x, const TransformerDownParams<T>& p, const GridSpec& grid,
                              const DropPathState& dp) {
  auto h = downsample_attention_block(x, p.down, grid, dp);
  return add(h, drop_path(ffn(layer_norm(h, p.norm2), p.mlp), dp));
}

// ---------------------------------------------------------------------------
// Token shifts on a torus.

/// y[i] = x[(i - s) mod N] over the flattened token order.
template <class T>
Tensor<T> shift_tokens(const Tensor<T>& x, long s, const GridSpec& grid) {
  if (grid.topology != Topology::Torus) throw ContractError("shift_tokens: shifts are undefined on a plane grid");
  if (x.rank() != 2 || x.dim(0) != grid.tokens()) throw ShapeError("shift_tokens: " + to_string(x.shape()) + " vs grid");
  const long n = static_cast<long>(x.dim(0));
  const std::size_t d = x.dim(1);
  Tensor<T> y(x.shape());
  for (long i = 0; i < n; ++i) {
    const long src = ((i - s) % n + n) % n;
    std::copy_n(x.data().begin() + src * static_cast<long>(d), d, y.data().begin() + i * static_cast<long>(d));
  }
  return y;
}

/// 2-D torus shift: y[h, w] = x[(h - sh) mod H, (w - sw) mod W].
template <class T>
Tensor<T> shift_tokens(const Tensor<T>& x, long sh, long sw, const GridSpec& grid) {
  if (grid.topology != Topology::Torus) throw ContractError("shift_tokens: shifts are undefined on a plane grid");
  if (x.rank() != 2 || x.dim(0) != grid.tokens()) throw ShapeError("shift_tokens: " + to_string(x.shape()) + " vs grid");
  const long H = static_cast<long>(grid.height), W = static_cast<long>(grid.width);
  const std::size_t d = x.dim(1);
  Tensor<T> y(x.shape());
  for (long h = 0; h < H; ++h)
    for (long w = 0; w < W; ++w) {
      const long src = (((h - sh) % H + H) % H) * W + ((w - sw) % W + W) % W;
      std::copy_n(x.data().begin() + src * static_cast<long>(d), d, y.data().begin() + (h * W + w) * static_cast<long>(d));
    }
  return y;
}

}  // namespace astro
