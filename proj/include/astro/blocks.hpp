// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <optional>
#include <string>

#include "astro/drop_path.hpp"
#include "astro/nn.hpp"

namespace astro {

/// Pre-activation inverted residual (MBConv) with squeeze-excitation.
///
/// Residual branch: BN -> 1x1 expand -> BN -> GELU -> 3x3 depthwise (stride)
/// -> BN -> GELU -> SE -> 1x1 project. With stride 2 the identity branch is a
/// 1x1 projection of the 2x2 max-pooled input.
template <class T>
struct MBConvParams {
  std::size_t stride = 1;
  NormParams<T> pre_norm;
  Conv2dParams<T> expand;
  NormParams<T> expand_norm;
  DepthwiseParams<T> depthwise;
  NormParams<T> depthwise_norm;
  SqueezeExciteParams<T> se;
  Conv2dParams<T> project;
  std::optional<Conv2dParams<T>> shortcut;

  static MBConvParams init(std::size_t in, std::size_t out, std::size_t expansion, std::size_t stride, double se_ratio,
                           Rng& rng) {
    if (stride != 1 && stride != 2) throw ConfigError("MBConv stride must be 1 or 2");
    if (stride == 1 && in != out) throw ConfigError("stride-1 MBConv needs equal in/out channels");
    const std::size_t mid = in * expansion;
    MBConvParams p;
    p.stride = stride;
    p.pre_norm = NormParams<T>::batch(in);
    p.expand = Conv2dParams<T>::init(mid, in, 1, 1, false, rng);
    p.expand_norm = NormParams<T>::batch(mid);
    p.depthwise = DepthwiseParams<T>::init(mid, 3, stride, rng);
    p.depthwise_norm = NormParams<T>::batch(mid);
    p.se = SqueezeExciteParams<T>::init(mid, se_ratio, rng);
    p.project = Conv2dParams<T>::init(out, mid, 1, 1, true, rng);
    if (stride == 2) p.shortcut = Conv2dParams<T>::init(out, in, 1, 1, true, rng);
    return p;
  }

  void collect(const std::string& prefix, NamedTensors<T>& out) {
    pre_norm.collect(prefix + ".pre_norm", out);
    expand.collect(prefix + ".expand", out);
    expand_norm.collect(prefix + ".expand_norm", out);
    depthwise.collect(prefix + ".depthwise", out);
    depthwise_norm.collect(prefix + ".depthwise_norm", out);
    se.collect(prefix + ".se", out);
    project.collect(prefix + ".project", out);
    if (shortcut) shortcut->collect(prefix + ".shortcut", out);
  }

  void collect_buffers(const std::string& prefix, NamedTensors<T>& out) {
    pre_norm.collect_buffers(prefix + ".pre_norm", out);
    expand_norm.collect_buffers(prefix + ".expand_norm", out);
    depthwise_norm.collect_buffers(prefix + ".depthwise_norm", out);
  }
};

namespace detail {

template <class T>
Var<T> mbconv_residual(const Var<T>& x, MBConvParams<T>& p, Mode mode) {
  auto h = batch_norm(x, p.pre_norm, mode);
  h = gelu(batch_norm(conv2d(h, p.expand), p.expand_norm, mode));
  h = gelu(batch_norm(depthwise_conv2d(h, p.depthwise), p.depthwise_norm, mode));
  h = squeeze_excite(h, p.se);
  return conv2d(h, p.project);
}

}  // namespace detail

/// x + DropPath(residual(x)). The block runs in dp.mode (batch-norm
/// statistics and drop path both follow it).
template <class T>
Var<T> mbconv_block(const Var<T>& x, MBConvParams<T>& p, const DropPathState& dp) {
  if (p.stride != 1) throw ContractError("mbconv_block is the stride-1 block; use mbconv_downsample");
  const auto& s = x.shape();
  if (s.size() != 4 || s[1] != p.pre_norm.gamma.size() || p.project.weight.dim(0) != s[1])
    throw ShapeError("mbconv_block: channel mismatch for input " + to_string(s));
  return add(x, drop_path(detail::mbconv_residual(x, p, dp.mode), dp));
}

/// Proj(Pool(x)) + DropPath(residual with stride-2 depthwise conv). Halves H and W.
template <class T>
Var<T> mbconv_downsample(const Var<T>& x, MBConvParams<T>& p, const DropPathState& dp) {
  if (p.stride != 2 || !p.shortcut) throw ContractError("mbconv_downsample needs stride-2 parameters");
  const auto& s = x.shape();
  if (s.size() != 4 || s[1] != p.pre_norm.gamma.size())
    throw ShapeError("mbconv_downsample: channel mismatch for input " + to_string(s));
  if (s[2] % 2 || s[3] % 2)
    throw ShapeError("mbconv_downsample needs even spatial dims, got " + std::to_string(s[2]) + "x" +
                     std::to_string(s[3]));
  auto identity = conv2d(pool2d(x, PoolKind::Max, 2, 2), *p.shortcut);
  return add(identity, drop_path(detail::mbconv_residual(x, p, dp.mode), dp));
}

}  // namespace astro
