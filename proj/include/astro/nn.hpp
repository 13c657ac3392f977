// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <type_traits>
#include <vector>

#include "astro/autodiff.hpp"

namespace astro {

/// Zero padding for ordinary layers; circular padding wraps around the
/// spatial borders and exists for translation-equivariance checks.
enum class PadMode { Zero, Circular };

// ---------------------------------------------------------------------------
// Convolution

template <class T>
struct Conv2dParams {
  Tensor<T> weight;  // [out, in, kh, kw]
  std::optional<Tensor<T>> bias;  // [out]
  std::size_t stride = 1;
  std::size_t padding = 0;
  PadMode pad_mode = PadMode::Zero;

  static Conv2dParams init(std::size_t out, std::size_t in, std::size_t k, std::size_t stride, bool with_bias, Rng& rng) {
    Conv2dParams p;
    p.weight = Tensor<T>::randn({out, in, k, k}, rng, std::sqrt(2.0 / static_cast<double>(in * k * k)));
    if (with_bias) p.bias = Tensor<T>::zeros({out});
    p.stride = stride;
    p.padding = (k - 1) / 2;
    return p;
  }

  void collect(const std::string& prefix, NamedTensors<T>& out) {
    out.push_back({prefix + ".weight", &weight});
    if (bias) out.push_back({prefix + ".bias", &*bias});
  }
};

namespace detail {

inline std::size_t conv_out_size(std::size_t in, std::size_t k, std::size_t stride, std::size_t pad, const char* op) {
  if (in + 2 * pad < k)
    throw ShapeError(std::string(op) + ": kernel " + std::to_string(k) + " larger than padded input " +
                     std::to_string(in + 2 * pad));
  if (stride == 0) throw ShapeError(std::string(op) + ": stride must be positive");
  return (in + 2 * pad - k) / stride + 1;
}

/// Source offset inside one [H x W] plane for every (ki, kj, oh, ow), or -1
/// where the tap falls on zero padding.
inline std::vector<long> conv_taps(std::size_t h, std::size_t w, std::size_t kh, std::size_t kw, std::size_t oh,
                                   std::size_t ow, std::size_t stride, std::size_t pad, PadMode mode) {
  std::vector<long> taps(kh * kw * oh * ow);
  std::size_t n = 0;
  for (std::size_t i = 0; i < kh; ++i)
    for (std::size_t j = 0; j < kw; ++j)
      for (std::size_t y = 0; y < oh; ++y)
        for (std::size_t x = 0; x < ow; ++x) {
          long sy = static_cast<long>(y * stride + i) - static_cast<long>(pad);
          long sx = static_cast<long>(x * stride + j) - static_cast<long>(pad);
          if (mode == PadMode::Circular) {
            sy = ((sy % static_cast<long>(h)) + static_cast<long>(h)) % static_cast<long>(h);
            sx = ((sx % static_cast<long>(w)) + static_cast<long>(w)) % static_cast<long>(w);
            taps[n++] = sy * static_cast<long>(w) + sx;
          } else if (sy < 0 || sx < 0 || sy >= static_cast<long>(h) || sx >= static_cast<long>(w)) {
            taps[n++] = -1;
          } else {
            taps[n++] = sy * static_cast<long>(w) + sx;
          }
        }
  return taps;
}

}  // namespace detail

/// Cross-correlation (no kernel flip) of x [B,C,H,W] with w [O,C,kh,kw].
template <class T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, std::optional<std::type_identity_t<Var<T>>> bias, std::size_t stride, std::size_t pad,
              PadMode mode = PadMode::Zero) {
  const auto& xv = x.value();
  const auto& wv = w.value();
  if (xv.rank() != 4 || wv.rank() != 4 || xv.dim(1) != wv.dim(1))
    throw ShapeError("conv2d: input " + to_string(xv.shape()) + " incompatible with weight " + to_string(wv.shape()));
  if (bias && (bias->value().rank() != 1 || bias->value().dim(0) != wv.dim(0)))
    throw ShapeError("conv2d: bias shape " + to_string(bias->shape()) + " for " + std::to_string(wv.dim(0)) + " outputs");
  const std::size_t B = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  const std::size_t O = wv.dim(0), kh = wv.dim(2), kw = wv.dim(3);
  const std::size_t OH = detail::conv_out_size(H, kh, stride, pad, "conv2d");
  const std::size_t OW = detail::conv_out_size(W, kw, stride, pad, "conv2d");
  const std::size_t ckk = C * kh * kw, plane = OH * OW, taps_per_c = kh * kw * plane;
  auto taps = detail::conv_taps(H, W, kh, kw, OH, OW, stride, pad, mode);

  auto im2col = [=, &taps](const T* img, T* col) {
    for (std::size_t c = 0; c < C; ++c) {
      const T* src = img + c * H * W;
      T* dst = col + c * taps_per_c;
      for (std::size_t t = 0; t < taps_per_c; ++t) dst[t] = taps[t] < 0 ? T(0) : src[taps[t]];
    }
  };

  Tensor<T> out({B, O, OH, OW});
  std::vector<T> col(ckk * plane);
  for (std::size_t b = 0; b < B; ++b) {
    im2col(xv.data().data() + b * C * H * W, col.data());
    T* ob = out.data().data() + b * O * plane;
    detail::gemm(false, false, O, plane, ckk, wv.data().data(), col.data(), ob, false);
    if (bias)
      for (std::size_t o = 0; o < O; ++o)
        for (std::size_t p = 0; p < plane; ++p) ob[o * plane + p] += bias->value()[o];
  }

  const std::size_t xi = x.id(), wi = w.id();
  std::vector<std::size_t> inputs{xi, wi};
  const std::size_t bi = bias ? bias->id() : 0;
  if (bias) inputs.push_back(bi);
  const bool has_bias = bias.has_value();
  return x.tape().record(std::move(out), std::move(inputs),
                         [=, taps = std::move(taps)](Tape<T>& t, const Tensor<T>& g) {
                           const auto& xv = t.value(xi);
                           const auto& wv = t.value(wi);
                           std::vector<T> col(ckk * plane), dcol(ckk * plane);
                           const bool need_x = t.requires_grad(xi), need_w = t.requires_grad(wi);
                           for (std::size_t b = 0; b < B; ++b) {
                             const T* gb = g.data().data() + b * O * plane;
                             if (need_w) {
                               const T* img = xv.data().data() + b * C * H * W;
                               for (std::size_t c = 0; c < C; ++c)
                                 for (std::size_t q = 0; q < taps_per_c; ++q)
                                   col[c * taps_per_c + q] = taps[q] < 0 ? T(0) : img[c * H * W + taps[q]];
                               detail::gemm(false, true, O, ckk, plane, gb, col.data(), t.grad_ref(wi).data().data(), true);
                             }
                             if (need_x) {
                               detail::gemm(true, false, ckk, plane, O, wv.data().data(), gb, dcol.data(), false);
                               T* gx = t.grad_ref(xi).data().data() + b * C * H * W;
                               for (std::size_t c = 0; c < C; ++c)
                                 for (std::size_t q = 0; q < taps_per_c; ++q)
                                   if (taps[q] >= 0) gx[c * H * W + taps[q]] += dcol[c * taps_per_c + q];
                             }
                           }
                           if (has_bias && t.requires_grad(bi)) {
                             auto& gbias = t.grad_ref(bi);
                             for (std::size_t b = 0; b < B; ++b)
                               for (std::size_t o = 0; o < O; ++o) {
                                 T s = 0;
                                 const T* gp = g.data().data() + (b * O + o) * plane;
                                 for (std::size_t p = 0; p < plane; ++p) s += gp[p];
                                 gbias[o] += s;
                               }
                           }
                         });
}

template <class T>
Var<T> conv2d(const Var<T>& x, const Conv2dParams<T>& p) {
  auto& tape = x.tape();
  std::optional<Var<T>> b;
  if (p.bias) b = tape.param(*p.bias);
  return conv2d(x, tape.param(p.weight), b, p.stride, p.padding, p.pad_mode);
}

template <class T>
struct DepthwiseParams {
  Tensor<T> weight;  // [C, kh, kw]
  std::size_t stride = 1;
  std::size_t padding = 0;
  PadMode pad_mode = PadMode::Zero;

  static DepthwiseParams init(std::size_t channels, std::size_t k, std::size_t stride, Rng& rng) {
    DepthwiseParams p;
    p.weight = Tensor<T>::randn({channels, k, k}, rng, std::sqrt(2.0 / static_cast<double>(k * k)));
    p.stride = stride;
    p.padding = (k - 1) / 2;
    return p;
  }

  void collect(const std::string& prefix, NamedTensors<T>& out) { out.push_back({prefix + ".weight", &weight}); }
};

/// One kernel per channel, no cross-channel mixing.
template <class T>
Var<T> depthwise_conv2d(const Var<T>& x, const Var<T>& w, std::size_t stride, std::size_t pad,
                        PadMode mode = PadMode::Zero) {
  const auto& xv = x.value();
  const auto& wv = w.value();
  if (xv.rank() != 4 || wv.rank() != 3 || xv.dim(1) != wv.dim(0))
    throw ShapeError("depthwise_conv2d: input " + to_string(xv.shape()) + " incompatible with weight " +
                     to_string(wv.shape()));
  const std::size_t B = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  const std::size_t kh = wv.dim(1), kw = wv.dim(2);
  const std::size_t OH = detail::conv_out_size(H, kh, stride, pad, "depthwise_conv2d");
  const std::size_t OW = detail::conv_out_size(W, kw, stride, pad, "depthwise_conv2d");
  const std::size_t plane = OH * OW, kk = kh * kw;
  auto taps = detail::conv_taps(H, W, kh, kw, OH, OW, stride, pad, mode);

  Tensor<T> out({B, C, OH, OW});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c) {
      const T* src = xv.data().data() + (b * C + c) * H * W;
      const T* ker = wv.data().data() + c * kk;
      T* dst = out.data().data() + (b * C + c) * plane;
      for (std::size_t q = 0; q < kk; ++q) {
        const T kv = ker[q];
        const long* tp = taps.data() + q * plane;
        for (std::size_t p = 0; p < plane; ++p)
          if (tp[p] >= 0) dst[p] += kv * src[tp[p]];
      }
    }

  const std::size_t xi = x.id(), wi = w.id();
  return x.tape().record(std::move(out), {xi, wi}, [=, taps = std::move(taps)](Tape<T>& t, const Tensor<T>& g) {
    const auto& xv = t.value(xi);
    const auto& wv = t.value(wi);
    const bool need_x = t.requires_grad(xi), need_w = t.requires_grad(wi);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t c = 0; c < C; ++c) {
        const T* src = xv.data().data() + (b * C + c) * H * W;
        const T* gp = g.data().data() + (b * C + c) * plane;
        for (std::size_t q = 0; q < kk; ++q) {
          const long* tp = taps.data() + q * plane;
          if (need_w) {
            T s = 0;
            for (std::size_t p = 0; p < plane; ++p)
              if (tp[p] >= 0) s += gp[p] * src[tp[p]];
            t.grad_ref(wi)[c * kk + q] += s;
          }
          if (need_x) {
            const T kv = wv[c * kk + q];
            T* gx = t.grad_ref(xi).data().data() + (b * C + c) * H * W;
            for (std::size_t p = 0; p < plane; ++p)
              if (tp[p] >= 0) gx[tp[p]] += kv * gp[p];
          }
        }
      }
  });
}

template <class T>
Var<T> depthwise_conv2d(const Var<T>& x, const DepthwiseParams<T>& p) {
  return depthwise_conv2d(x, x.tape().param(p.weight), p.stride, p.padding, p.pad_mode);
}

// ---------------------------------------------------------------------------
// Pooling

enum class PoolKind { Max, Avg };

/// Window reduction over [B,C,H,W]. Max-pool ties resolve to the first index
/// in row-major window order, which is also where the gradient goes.
template <class T>
Var<T> pool2d(const Var<T>& x, PoolKind kind, std::size_t k = 2, std::size_t stride = 2) {
  const auto& xv = x.value();
  if (xv.rank() != 4) throw ShapeError("pool2d expects [B,C,H,W], got " + to_string(xv.shape()));
  const std::size_t B = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  if (H < k || W < k)
    throw ShapeError("pool2d: window " + std::to_string(k) + " larger than input " + to_string(xv.shape()));
  const std::size_t OH = (H - k) / stride + 1, OW = (W - k) / stride + 1;
  Tensor<T> out({B, C, OH, OW});
  std::vector<std::size_t> argmax;
  if (kind == PoolKind::Max) argmax.resize(out.size());
  const T inv = T(1) / static_cast<T>(k * k);
  std::size_t o = 0;
  for (std::size_t bc = 0; bc < B * C; ++bc)
    for (std::size_t y = 0; y < OH; ++y)
      for (std::size_t xx = 0; xx < OW; ++xx, ++o) {
        const std::size_t base = bc * H * W;
        if (kind == PoolKind::Max) {
          std::size_t best = base + y * stride * W + xx * stride;
          for (std::size_t i = 0; i < k; ++i)
            for (std::size_t j = 0; j < k; ++j) {
              const std::size_t idx = base + (y * stride + i) * W + xx * stride + j;
              if (xv[idx] > xv[best]) best = idx;
            }
          argmax[o] = best;
          out[o] = xv[best];
        } else {
          T s = 0;
          for (std::size_t i = 0; i < k; ++i)
            for (std::size_t j = 0; j < k; ++j) s += xv[base + (y * stride + i) * W + xx * stride + j];
          out[o] = s * inv;
        }
      }
  const std::size_t xi = x.id();
  return x.tape().record(std::move(out), {xi},
                         [=, argmax = std::move(argmax)](Tape<T>& t, const Tensor<T>& g) {
                           auto& gx = t.grad_ref(xi);
                           if (kind == PoolKind::Max) {
                             for (std::size_t i = 0; i < g.size(); ++i) gx[argmax[i]] += g[i];
                             return;
                           }
                           std::size_t o = 0;
                           for (std::size_t bc = 0; bc < B * C; ++bc)
                             for (std::size_t y = 0; y < OH; ++y)
                               for (std::size_t xx = 0; xx < OW; ++xx, ++o)
                                 for (std::size_t i = 0; i < k; ++i)
                                   for (std::size_t j = 0; j < k; ++j)
                                     gx[bc * H * W + (y * stride + i) * W + xx * stride + j] += g[o] * inv;
                         });
}

/// Mean over H and W: [B,C,H,W] -> [B,C].
template <class T>
Var<T> global_avg_pool(const Var<T>& x) {
  const auto& s = x.shape();
  if (s.size() != 4) throw ShapeError("global_avg_pool expects [B,C,H,W], got " + to_string(s));
  auto pooled = sum_to(x, {s[0], s[1], 1, 1});
  return reshape(scale(pooled, T(1) / static_cast<T>(s[2] * s[3])), {s[0], s[1]});
}

// ---------------------------------------------------------------------------
// Normalization

template <class T>
struct NormParams {
  Tensor<T> gamma;
  Tensor<T> beta;
  T eps = T(1e-5);
  // Batch-norm only.
  Tensor<T> running_mean;
  Tensor<T> running_var;
  T momentum = T(0.1);

  static NormParams layer(std::size_t c) {
    NormParams p;
    p.gamma = Tensor<T>::ones({c});
    p.beta = Tensor<T>::zeros({c});
    return p;
  }
  static NormParams batch(std::size_t c) {
    NormParams p = layer(c);
    p.running_mean = Tensor<T>::zeros({c});
    p.running_var = Tensor<T>::ones({c});
    return p;
  }

  void collect(const std::string& prefix, NamedTensors<T>& out) {
    out.push_back({prefix + ".gamma", &gamma});
    out.push_back({prefix + ".beta", &beta});
  }
  void collect_buffers(const std::string& prefix, NamedTensors<T>& out) {
    if (running_mean.empty()) return;
    out.push_back({prefix + ".running_mean", &running_mean});
    out.push_back({prefix + ".running_var", &running_var});
  }
};

namespace detail {

/// Shared backward of (x - mean) * rstd * gamma + beta over groups of
/// `count` elements. `index(group, k)` maps to a flat offset.
template <class T, class Index>
void normalize_backward(const Tensor<T>& x, const Tensor<T>& g, const Tensor<T>& gamma, const std::vector<T>& mean,
                        const std::vector<T>& rstd, std::size_t groups, std::size_t count, Index index,
                        auto gamma_of, Tensor<T>* gx, Tensor<T>* ggamma, Tensor<T>* gbeta) {
  for (std::size_t grp = 0; grp < groups; ++grp) {
    T sum_dy = 0, sum_dy_xhat = 0;
    for (std::size_t k = 0; k < count; ++k) {
      const std::size_t i = index(grp, k);
      const T xhat = (x[i] - mean[grp]) * rstd[grp];
      const T dy = g[i] * gamma[gamma_of(grp, k)];
      sum_dy += dy;
      sum_dy_xhat += dy * xhat;
      if (ggamma) (*ggamma)[gamma_of(grp, k)] += g[i] * xhat;
      if (gbeta) (*gbeta)[gamma_of(grp, k)] += g[i];
    }
    if (!gx) continue;
    const T n = static_cast<T>(count);
    for (std::size_t k = 0; k < count; ++k) {
      const std::size_t i = index(grp, k);
      const T xhat = (x[i] - mean[grp]) * rstd[grp];
      const T dy = g[i] * gamma[gamma_of(grp, k)];
      (*gx)[i] += rstd[grp] * (dy - sum_dy / n - xhat * sum_dy_xhat / n);
    }
  }
}

}  // namespace detail

/// Normalizes over the last axis, then applies gamma/beta.
template <class T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps) {
  const auto& xv = x.value();
  const std::size_t d = xv.shape().empty() ? 1 : xv.shape().back();
  if (xv.rank() == 0 || gamma.value().size() != d || beta.value().size() != d)
    throw ShapeError("layer_norm: last axis of " + to_string(xv.shape()) + " vs gamma " + to_string(gamma.shape()));
  const std::size_t rows = xv.size() / d;
  std::vector<T> mean(rows), rstd(rows);
  Tensor<T> out(xv.shape());
  const auto& gv = gamma.value();
  const auto& bv = beta.value();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = xv.data().data() + r * d;
    T m = 0;
    for (std::size_t k = 0; k < d; ++k) m += row[k];
    m /= static_cast<T>(d);
    T var = 0;
    for (std::size_t k = 0; k < d; ++k) var += (row[k] - m) * (row[k] - m);
    var /= static_cast<T>(d);
    mean[r] = m;
    rstd[r] = T(1) / std::sqrt(var + eps);
    for (std::size_t k = 0; k < d; ++k) out[r * d + k] = (row[k] - m) * rstd[r] * gv[k] + bv[k];
  }
  const std::size_t xi = x.id(), gi = gamma.id(), bi = beta.id();
  return x.tape().record(std::move(out), {xi, gi, bi},
                         [=, mean = std::move(mean), rstd = std::move(rstd)](Tape<T>& t, const Tensor<T>& g) {
                           detail::normalize_backward(
                               t.value(xi), g, t.value(gi), mean, rstd, rows, d,
                               [d](std::size_t r, std::size_t k) { return r * d + k; },
                               [](std::size_t, std::size_t k) { return k; },
                               t.requires_grad(xi) ? &t.grad_ref(xi) : nullptr,
                               t.requires_grad(gi) ? &t.grad_ref(gi) : nullptr,
                               t.requires_grad(bi) ? &t.grad_ref(bi) : nullptr);
                         });
}

template <class T>
Var<T> layer_norm(const Var<T>& x, const NormParams<T>& p) {
  auto& tape = x.tape();
  return layer_norm(x, tape.param(p.gamma), tape.param(p.beta), p.eps);
}

/// Per-channel normalization of [B,C,H,W]. Train mode uses batch statistics
/// and updates the running estimates (unbiased variance); eval mode uses the
/// running estimates and leaves them untouched.
template <class T>
Var<T> batch_norm(const Var<T>& x, NormParams<T>& p, Mode mode) {
  auto& tape = x.tape();
  const auto& xv = x.value();
  if (xv.rank() != 4 || p.gamma.size() != xv.dim(1))
    throw ShapeError("batch_norm: input " + to_string(xv.shape()) + " vs " + std::to_string(p.gamma.size()) +
                     " channels");
  if (p.running_mean.empty()) throw ContractError("batch_norm: parameters have no running statistics");
  const std::size_t B = xv.dim(0), C = xv.dim(1), HW = xv.dim(2) * xv.dim(3);
  const std::size_t count = B * HW;
  auto gamma = tape.param(p.gamma);
  auto beta = tape.param(p.beta);
  const auto& gv = p.gamma;
  const auto& bv = p.beta;
  auto index = [C, HW](std::size_t c, std::size_t k) { return ((k / HW) * C + c) * HW + k % HW; };
  Tensor<T> out(xv.shape());
  std::vector<T> mean(C), rstd(C);

  if (mode == Mode::Train) {
    if (count < 2) throw ContractError("batch_norm: training needs at least 2 values per channel, got " +
                                       std::to_string(count));
    for (std::size_t c = 0; c < C; ++c) {
      T m = 0;
      for (std::size_t k = 0; k < count; ++k) m += xv[index(c, k)];
      m /= static_cast<T>(count);
      T var = 0;
      for (std::size_t k = 0; k < count; ++k) var += (xv[index(c, k)] - m) * (xv[index(c, k)] - m);
      var /= static_cast<T>(count);
      mean[c] = m;
      rstd[c] = T(1) / std::sqrt(var + p.eps);
      p.running_mean[c] = (T(1) - p.momentum) * p.running_mean[c] + p.momentum * m;
      p.running_var[c] = (T(1) - p.momentum) * p.running_var[c] +
                         p.momentum * var * static_cast<T>(count) / static_cast<T>(count - 1);
    }
  } else {
    for (std::size_t c = 0; c < C; ++c) {
      mean[c] = p.running_mean[c];
      rstd[c] = T(1) / std::sqrt(p.running_var[c] + p.eps);
    }
  }
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t k = 0; k < count; ++k) {
      const std::size_t i = index(c, k);
      out[i] = (xv[i] - mean[c]) * rstd[c] * gv[c] + bv[c];
    }

  const std::size_t xi = x.id(), gi = gamma.id(), bi = beta.id();
  const bool train = mode == Mode::Train;
  return tape.record(std::move(out), {xi, gi, bi},
                     [=, mean = std::move(mean), rstd = std::move(rstd)](Tape<T>& t, const Tensor<T>& g) {
                       const auto& xv = t.value(xi);
                       const auto& gm = t.value(gi);
                       Tensor<T>* gx = t.requires_grad(xi) ? &t.grad_ref(xi) : nullptr;
                       Tensor<T>* gg = t.requires_grad(gi) ? &t.grad_ref(gi) : nullptr;
                       Tensor<T>* gb = t.requires_grad(bi) ? &t.grad_ref(bi) : nullptr;
                       if (train) {
                         detail::normalize_backward(
                             xv, g, gm, mean, rstd, C, count, index, [](std::size_t c, std::size_t) { return c; }, gx,
                             gg, gb);
                         return;
                       }
                       for (std::size_t c = 0; c < C; ++c)
                         for (std::size_t k = 0; k < count; ++k) {
                           const std::size_t i = index(c, k);
                           const T xhat = (xv[i] - mean[c]) * rstd[c];
                           if (gx) (*gx)[i] += g[i] * gm[c] * rstd[c];
                           if (gg) (*gg)[c] += g[i] * xhat;
                           if (gb) (*gb)[c] += g[i];
                         }
                     });
}

// ---------------------------------------------------------------------------
// Linear and squeeze-excitation

template <class T>
struct LinearParams {
  Tensor<T> weight;  // [in, out]
  std::optional<Tensor<T>> bias;  // [out]

  static LinearParams init(std::size_t in, std::size_t out, bool with_bias, Rng& rng) {
    LinearParams p;
    p.weight = Tensor<T>::randn({in, out}, rng, 1.0 / std::sqrt(static_cast<double>(in)));
    if (with_bias) p.bias = Tensor<T>::zeros({out});
    return p;
  }

  std::size_t in_features() const { return weight.dim(0); }
  std::size_t out_features() const { return weight.dim(1); }

  void collect(const std::string& prefix, NamedTensors<T>& out) {
    out.push_back({prefix + ".weight", &weight});
    if (bias) out.push_back({prefix + ".bias", &*bias});
  }
};

/// Affine map on the last axis: x[..., in] * W[in, out] + b.
template <class T>
Var<T> linear(const Var<T>& x, const Var<T>& w, std::optional<std::type_identity_t<Var<T>>> b) {
  const auto& s = x.shape();
  if (s.empty() || w.value().rank() != 2 || s.back() != w.value().dim(0))
    throw ShapeError("linear: input " + to_string(s) + " incompatible with weight " + to_string(w.shape()));
  const std::size_t in = s.back(), out = w.value().dim(1);
  const std::size_t rows = x.value().size() / in;
  Shape out_shape = s;
  out_shape.back() = out;
  auto y = reshape(matmul(reshape(x, {rows, in}), w), out_shape);
  if (b) y = add(y, *b);
  return y;
}

template <class T>
Var<T> linear(const Var<T>& x, const LinearParams<T>& p) {
  auto& tape = x.tape();
  std::optional<Var<T>> b;
  if (p.bias) b = tape.param(*p.bias);
  return linear(x, tape.param(p.weight), b);
}

template <class T>
struct SqueezeExciteParams {
  LinearParams<T> reduce;
  LinearParams<T> expand;

  static std::size_t reduced_channels(std::size_t c, double ratio) {
    if (!(ratio > 0.0 && ratio <= 1.0)) throw ConfigError("squeeze-excite ratio must be in (0, 1]");
    return static_cast<std::size_t>(std::ceil(static_cast<double>(c) * ratio - 1e-9));
  }

  static SqueezeExciteParams init(std::size_t c, double ratio, Rng& rng) {
    const std::size_t r = reduced_channels(c, ratio);
    return {LinearParams<T>::init(c, r, true, rng), LinearParams<T>::init(r, c, true, rng)};
  }

  void collect(const std::string& prefix, NamedTensors<T>& out) {
    reduce.collect(prefix + ".reduce", out);
    expand.collect(prefix + ".expand", out);
  }
};

/// x * sigmoid(expand(relu(reduce(mean_hw(x))))), gated per channel.
template <class T>
Var<T> squeeze_excite(const Var<T>& x, const SqueezeExciteParams<T>& p) {
  const auto& s = x.shape();
  auto squeezed = global_avg_pool(x);
  auto gate = sigmoid(linear(relu(linear(squeezed, p.reduce)), p.expand));
  return mul(x, reshape(gate, {s[0], s[1], 1, 1}));
}

}  // namespace astro
