#pragma once

// Forward and backward numeric kernels for the separable-convolution layers.
// All kernels are pure functions of their arguments except batch_norm in
// training mode, which updates the caller-owned running statistics.

#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "xxnet/error.hpp"
#include "xxnet/tensor.hpp"

namespace xxnet {

inline constexpr std::size_t kKernelSize = 3;

/// Output extent of a "same"-padded 3x3 convolution: ceil(n / stride).
constexpr std::size_t same_out(std::size_t n, int stride) noexcept {
    return (n + static_cast<std::size_t>(stride) - 1) / static_cast<std::size_t>(stride);
}

namespace detail {

inline void check_stride(int stride) {
    if (stride != 1 && stride != 2) throw ShapeError("stride must be 1 or 2, got " + std::to_string(stride));
}

// Valid output-column range [lo, hi) for kernel column kx with pad 1.
struct ColumnRange {
    std::size_t lo;
    std::size_t hi;
};

inline ColumnRange valid_columns(std::size_t kx, std::size_t in_w, std::size_t out_w, int stride) {
    const std::size_t s = static_cast<std::size_t>(stride);
    const std::size_t lo = kx == 0 ? 1 : 0;
    if (in_w < kx) return {lo, lo};
    // ix = ox*s + kx - 1 <= in_w - 1  <=>  ox <= (in_w - kx) / s
    const std::size_t last = (in_w - kx) / s;
    const std::size_t hi = std::min(out_w, last + 1);
    return {lo, std::max(lo, hi)};
}

// out += conv3x3(in, kernel) for one plane, zero padding 1.
template <class T>
void conv_plane(const T* in, std::size_t in_h, std::size_t in_w, const T* kernel, T* out, std::size_t out_h,
                std::size_t out_w, int stride) {
    const std::size_t s = static_cast<std::size_t>(stride);
    for (std::size_t oy = 0; oy < out_h; ++oy) {
        T* orow = out + oy * out_w;
        for (std::size_t ky = 0; ky < kKernelSize; ++ky) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * s + ky) - 1;
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(in_h)) continue;
            const T* irow = in + static_cast<std::size_t>(iy) * in_w;
            for (std::size_t kx = 0; kx < kKernelSize; ++kx) {
                const T k = kernel[ky * kKernelSize + kx];
                const auto [lo, hi] = valid_columns(kx, in_w, out_w, stride);
                for (std::size_t ox = lo; ox < hi; ++ox) orow[ox] += k * irow[ox * s + kx - 1];
            }
        }
    }
}

// Accumulates input and kernel gradients of conv_plane.
template <class T>
void conv_plane_backward(const T* in, std::size_t in_h, std::size_t in_w, const T* kernel, const T* dout,
                         std::size_t out_h, std::size_t out_w, int stride, T* din, T* dkernel) {
    const std::size_t s = static_cast<std::size_t>(stride);
    for (std::size_t oy = 0; oy < out_h; ++oy) {
        const T* grow = dout + oy * out_w;
        for (std::size_t ky = 0; ky < kKernelSize; ++ky) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * s + ky) - 1;
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(in_h)) continue;
            const std::size_t row = static_cast<std::size_t>(iy) * in_w;
            for (std::size_t kx = 0; kx < kKernelSize; ++kx) {
                const T k = kernel[ky * kKernelSize + kx];
                const auto [lo, hi] = valid_columns(kx, in_w, out_w, stride);
                T acc = 0;
                for (std::size_t ox = lo; ox < hi; ++ox) {
                    const std::size_t ix = row + ox * s + kx - 1;
                    din[ix] += k * grow[ox];
                    acc += in[ix] * grow[ox];
                }
                dkernel[ky * kKernelSize + kx] += acc;
            }
        }
    }
}

template <class T>
void axpy(T a, std::span<const T> x, std::span<T> y) noexcept {
    const std::size_t n = x.size();
    const T* xp = x.data();
    T* yp = y.data();
    for (std::size_t i = 0; i < n; ++i) yp[i] += a * xp[i];
}

// Eight fixed partial sums so the compiler can vectorize while the
// summation order stays deterministic.
template <class T>
T dot(std::span<const T> x, std::span<const T> y) noexcept {
    constexpr std::size_t kLanes = 8;
    T lane[kLanes] = {};
    const std::size_t n = x.size();
    const std::size_t body = n - n % kLanes;
    const T* xp = x.data();
    const T* yp = y.data();
    for (std::size_t i = 0; i < body; i += kLanes)
        for (std::size_t l = 0; l < kLanes; ++l) lane[l] += xp[i + l] * yp[i + l];
    T acc = 0;
    for (std::size_t i = body; i < n; ++i) acc += xp[i] * yp[i];
    for (std::size_t l = 0; l < kLanes; ++l) acc += lane[l];
    return acc;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Depthwise 3x3 convolution. Kernels have shape (c, 1, 3, 3).

template <class T>
Tensor<T> depthwise_conv3x3(const Tensor<T>& x, const Tensor<T>& kernels, int stride) {
    detail::check_stride(stride);
    require_shape(kernels.shape(), Shape{x.c(), 1, kKernelSize, kKernelSize}, "depthwise kernels");
    Tensor<T> y(x.n(), x.c(), same_out(x.h(), stride), same_out(x.w(), stride));
    for (std::size_t n = 0; n < x.n(); ++n)
        for (std::size_t c = 0; c < x.c(); ++c)
            detail::conv_plane(x.plane(n, c).data(), x.h(), x.w(), &kernels(c, 0, 0, 0), y.plane(n, c).data(),
                               y.h(), y.w(), stride);
    return y;
}

template <class T>
void depthwise_conv3x3_backward(const Tensor<T>& x, const Tensor<T>& kernels, int stride, const Tensor<T>& dy,
                                Tensor<T>* dx, Tensor<T>* dkernels) {
    Tensor<T> gx(x.shape());
    Tensor<T> gk(kernels.shape());
    for (std::size_t n = 0; n < x.n(); ++n)
        for (std::size_t c = 0; c < x.c(); ++c)
            detail::conv_plane_backward(x.plane(n, c).data(), x.h(), x.w(), &kernels(c, 0, 0, 0),
                                        dy.plane(n, c).data(), dy.h(), dy.w(), stride, gx.plane(n, c).data(),
                                        &gk(c, 0, 0, 0));
    if (dx) *dx = std::move(gx);
    if (dkernels) *dkernels = std::move(gk);
}

// ---------------------------------------------------------------------------
// Dense 3x3 convolution (network stem). Weights have shape (out, in, 3, 3).

template <class T>
Tensor<T> conv3x3(const Tensor<T>& x, const Tensor<T>& weights, int stride) {
    detail::check_stride(stride);
    if (weights.c() != x.c() || weights.h() != kKernelSize || weights.w() != kKernelSize)
        throw ShapeError("conv3x3 weights " + weights.shape().str() + " do not match input " + x.shape().str());
    Tensor<T> y(x.n(), weights.n(), same_out(x.h(), stride), same_out(x.w(), stride));
    for (std::size_t n = 0; n < x.n(); ++n)
        for (std::size_t o = 0; o < weights.n(); ++o)
            for (std::size_t i = 0; i < x.c(); ++i)
                detail::conv_plane(x.plane(n, i).data(), x.h(), x.w(), &weights(o, i, 0, 0), y.plane(n, o).data(),
                                   y.h(), y.w(), stride);
    return y;
}

template <class T>
void conv3x3_backward(const Tensor<T>& x, const Tensor<T>& weights, int stride, const Tensor<T>& dy, Tensor<T>* dx,
                      Tensor<T>* dweights) {
    Tensor<T> gx(x.shape());
    Tensor<T> gw(weights.shape());
    for (std::size_t n = 0; n < x.n(); ++n)
        for (std::size_t o = 0; o < weights.n(); ++o)
            for (std::size_t i = 0; i < x.c(); ++i)
                detail::conv_plane_backward(x.plane(n, i).data(), x.h(), x.w(), &weights(o, i, 0, 0),
                                            dy.plane(n, o).data(), dy.h(), dy.w(), stride, gx.plane(n, i).data(),
                                            &gw(o, i, 0, 0));
    if (dx) *dx = std::move(gx);
    if (dweights) *dweights = std::move(gw);
}

// ---------------------------------------------------------------------------
// Grouped pointwise (1x1) convolution.
//
// Weights have shape (group_count, group_out, group_in, 1). Output channel
// g*group_out + o mixes input channels g*group_in .. g*group_in + group_in - 1.

namespace detail {

// Rows handled together by the pointwise kernels. Each output element still
// accumulates its terms in ascending order, so results do not depend on it.
inline constexpr std::size_t kPointwiseBlock = 4;

// out[r] += sum_j coef(r, j) * in[j] over whole planes, for r in [0, rows).
template <class T, class Coef>
void mix_planes(std::size_t rows, std::size_t inputs, std::size_t len, Coef coef, const T* const* in, T* const* out) {
    std::size_t r = 0;
    for (; r + kPointwiseBlock <= rows; r += kPointwiseBlock) {
        T* o0 = out[r];
        T* o1 = out[r + 1];
        T* o2 = out[r + 2];
        T* o3 = out[r + 3];
        for (std::size_t j = 0; j < inputs; ++j) {
            const T* x = in[j];
            const T w0 = coef(r, j), w1 = coef(r + 1, j), w2 = coef(r + 2, j), w3 = coef(r + 3, j);
            for (std::size_t p = 0; p < len; ++p) {
                const T v = x[p];
                o0[p] += w0 * v;
                o1[p] += w1 * v;
                o2[p] += w2 * v;
                o3[p] += w3 * v;
            }
        }
    }
    for (; r < rows; ++r)
        for (std::size_t j = 0; j < inputs; ++j) {
            const T w = coef(r, j);
            const T* x = in[j];
            T* o = out[r];
            for (std::size_t p = 0; p < len; ++p) o[p] += w * x[p];
        }
}

}  // namespace detail

template <class T>
Tensor<T> grouped_pointwise_conv(const Tensor<T>& x, const Tensor<T>& weights) {
    const std::size_t groups = weights.n();
    const std::size_t gout = weights.c();
    const std::size_t gin = weights.h();
    if (weights.w() != 1 || groups * gin != x.c())
        throw ShapeError("pointwise weights " + weights.shape().str() + " cannot group " + std::to_string(x.c()) +
                         " input channels");
    Tensor<T> y(x.n(), groups * gout, x.h(), x.w());
    std::vector<const T*> in(gin);
    std::vector<T*> out(gout);
    for (std::size_t n = 0; n < x.n(); ++n)
        for (std::size_t g = 0; g < groups; ++g) {
            for (std::size_t i = 0; i < gin; ++i) in[i] = x.plane(n, g * gin + i).data();
            for (std::size_t o = 0; o < gout; ++o) out[o] = y.plane(n, g * gout + o).data();
            detail::mix_planes<T>(gout, gin, x.plane(), [&](std::size_t o, std::size_t i) { return weights(g, o, i, 0); },
                                  in.data(), out.data());
        }
    return y;
}

template <class T>
void grouped_pointwise_conv_backward(const Tensor<T>& x, const Tensor<T>& weights, const Tensor<T>& dy,
                                     Tensor<T>* dx, Tensor<T>* dweights) {
    const std::size_t groups = weights.n();
    const std::size_t gout = weights.c();
    const std::size_t gin = weights.h();
    Tensor<T> gx(x.shape());
    Tensor<T> gw(weights.shape());
    std::vector<const T*> upstream(gout);
    std::vector<T*> down(gin);
    for (std::size_t n = 0; n < x.n(); ++n)
        for (std::size_t g = 0; g < groups; ++g) {
            for (std::size_t o = 0; o < gout; ++o) upstream[o] = dy.plane(n, g * gout + o).data();
            for (std::size_t i = 0; i < gin; ++i) down[i] = gx.plane(n, g * gin + i).data();
            detail::mix_planes<T>(gin, gout, x.plane(), [&](std::size_t i, std::size_t o) { return weights(g, o, i, 0); },
                                  upstream.data(), down.data());
            for (std::size_t o = 0; o < gout; ++o)
                for (std::size_t i = 0; i < gin; ++i)
                    gw(g, o, i, 0) += detail::dot<T>(x.plane(n, g * gin + i), dy.plane(n, g * gout + o));
        }
    if (dx) *dx = std::move(gx);
    if (dweights) *dweights = std::move(gw);
}

// ---------------------------------------------------------------------------
// Channel shuffle: reshape channels to (groups, c/groups), transpose, flatten.

/// Position that input channel `i` occupies after shuffling `c` channels in `groups` groups.
constexpr std::size_t shuffle_destination(std::size_t i, std::size_t c, std::size_t groups) noexcept {
    const std::size_t per_group = c / groups;
    return (i % per_group) * groups + i / per_group;
}

inline void check_divisible(std::size_t c, std::size_t groups, const char* what) {
    if (groups == 0 || c % groups != 0)
        throw ShapeError(std::string(what) + ": " + std::to_string(c) + " channels not divisible into " +
                         std::to_string(groups) + " groups");
}

template <class T>
Tensor<T> channel_shuffle(const Tensor<T>& x, std::size_t groups) {
    check_divisible(x.c(), groups, "channel_shuffle");
    Tensor<T> y(x.shape());
    for (std::size_t n = 0; n < x.n(); ++n)
        for (std::size_t i = 0; i < x.c(); ++i) {
            const auto src = x.plane(n, i);
            std::copy(src.begin(), src.end(), y.plane(n, shuffle_destination(i, x.c(), groups)).begin());
        }
    return y;
}

/// Inverse of channel_shuffle(x, groups); equal to shuffling with c/groups groups.
template <class T>
Tensor<T> channel_unshuffle(const Tensor<T>& y, std::size_t groups) {
    check_divisible(y.c(), groups, "channel_unshuffle");
    return channel_shuffle(y, y.c() / groups);
}

// ---------------------------------------------------------------------------
// Growth tiling: output channel j is input channel j mod c.

template <class T>
Tensor<T> tile_channels(const Tensor<T>& x, std::size_t factor) {
    if (factor == 0) throw ShapeError("tile factor must be >= 1");
    Tensor<T> y(x.n(), x.c() * factor, x.h(), x.w());
    for (std::size_t n = 0; n < x.n(); ++n)
        for (std::size_t j = 0; j < y.c(); ++j) {
            const auto src = x.plane(n, j % x.c());
            std::copy(src.begin(), src.end(), y.plane(n, j).begin());
        }
    return y;
}

template <class T>
Tensor<T> tile_channels_backward(const Tensor<T>& dy, std::size_t in_channels) {
    Tensor<T> dx(dy.n(), in_channels, dy.h(), dy.w());
    for (std::size_t n = 0; n < dy.n(); ++n)
        for (std::size_t j = 0; j < dy.c(); ++j) detail::axpy<T>(T(1), dy.plane(n, j), dx.plane(n, j % in_channels));
    return dx;
}

// ---------------------------------------------------------------------------

template <class T>
Tensor<T> relu(const Tensor<T>& x) {
    Tensor<T> y = x;
    for (auto& v : y.data()) v = v > T(0) ? v : T(0);
    return y;
}

template <class T>
Tensor<T> relu_backward(const Tensor<T>& x, const Tensor<T>& dy) {
    Tensor<T> dx = dy;
    auto xs = x.data();
    auto gs = dx.data();
    for (std::size_t i = 0; i < gs.size(); ++i) gs[i] = xs[i] > T(0) ? gs[i] : T(0);
    return dx;
}

// ---------------------------------------------------------------------------
// Batch normalization over (n, h, w) per channel.

enum class Mode { Train, Eval };

template <class T>
struct BatchNormStats {
    std::vector<T> running_mean;
    std::vector<T> running_var;

    BatchNormStats() = default;
    explicit BatchNormStats(std::size_t channels) : running_mean(channels, T(0)), running_var(channels, T(1)) {}
};

inline constexpr double kBatchNormEpsilon = 1e-5;
inline constexpr double kBatchNormMomentum = 0.9;

/// Per-channel mean and 1/sqrt(var + eps) used by a forward pass.
template <class T>
struct BatchNormCache {
    std::vector<T> mean;
    std::vector<T> inv_std;
};

/// Train mode normalizes with batch statistics and folds them into `stats`
/// (running = momentum*running + (1-momentum)*batch, unbiased variance).
/// Eval mode normalizes with the running statistics.
template <class T>
Tensor<T> batch_norm(const Tensor<T>& x, std::span<const T> scale, std::span<const T> shift,
                     BatchNormStats<T>& stats, Mode mode, BatchNormCache<T>* cache = nullptr) {
    const std::size_t channels = x.c();
    if (scale.size() != channels || shift.size() != channels || stats.running_mean.size() != channels ||
        stats.running_var.size() != channels)
        throw ShapeError("batch_norm parameters sized for " + std::to_string(scale.size()) + " channels, input has " +
                         std::to_string(channels));
    const std::size_t count = x.n() * x.plane();
    BatchNormCache<T> local;
    local.mean.resize(channels);
    local.inv_std.resize(channels);
    for (std::size_t c = 0; c < channels; ++c) {
        if (mode == Mode::Train) {
            double sum = 0;
            for (std::size_t n = 0; n < x.n(); ++n)
                for (T v : x.plane(n, c)) sum += v;
            const double mean = sum / static_cast<double>(count);
            double sq = 0;
            for (std::size_t n = 0; n < x.n(); ++n)
                for (T v : x.plane(n, c)) sq += (v - mean) * (v - mean);
            const double var = sq / static_cast<double>(count);
            const double unbiased = count > 1 ? sq / static_cast<double>(count - 1) : var;
            local.mean[c] = static_cast<T>(mean);
            local.inv_std[c] = static_cast<T>(1.0 / std::sqrt(var + kBatchNormEpsilon));
            stats.running_mean[c] = static_cast<T>(kBatchNormMomentum * stats.running_mean[c] +
                                                   (1.0 - kBatchNormMomentum) * mean);
            stats.running_var[c] = static_cast<T>(kBatchNormMomentum * stats.running_var[c] +
                                                  (1.0 - kBatchNormMomentum) * unbiased);
        } else {
            local.mean[c] = stats.running_mean[c];
            local.inv_std[c] = static_cast<T>(1.0 / std::sqrt(static_cast<double>(stats.running_var[c]) +
                                                              kBatchNormEpsilon));
        }
    }
    Tensor<T> y(x.shape());
    for (std::size_t n = 0; n < x.n(); ++n)
        for (std::size_t c = 0; c < channels; ++c) {
            const T a = scale[c] * local.inv_std[c];
            const T b = shift[c] - a * local.mean[c];
            const auto src = x.plane(n, c);
            auto dst = y.plane(n, c);
            for (std::size_t i = 0; i < src.size(); ++i) dst[i] = a * src[i] + b;
        }
    if (cache) *cache = std::move(local);
    return y;
}

template <class T>
void batch_norm_backward(const Tensor<T>& x, std::span<const T> scale, const BatchNormCache<T>& cache, Mode mode,
                         const Tensor<T>& dy, Tensor<T>* dx, std::vector<T>* dscale, std::vector<T>* dshift) {
    const std::size_t channels = x.c();
    const double count = static_cast<double>(x.n() * x.plane());
    Tensor<T> gx(x.shape());
    std::vector<T> gscale(channels), gshift(channels);
    for (std::size_t c = 0; c < channels; ++c) {
        const double mean = cache.mean[c];
        const double inv_std = cache.inv_std[c];
        double sum_dy = 0, sum_dy_xhat = 0;
        for (std::size_t n = 0; n < x.n(); ++n) {
            const auto xs = x.plane(n, c);
            const auto gs = dy.plane(n, c);
            for (std::size_t i = 0; i < xs.size(); ++i) {
                sum_dy += gs[i];
                sum_dy_xhat += gs[i] * (xs[i] - mean) * inv_std;
            }
        }
        gscale[c] = static_cast<T>(sum_dy_xhat);
        gshift[c] = static_cast<T>(sum_dy);
        const double k = scale[c] * inv_std;
        for (std::size_t n = 0; n < x.n(); ++n) {
            const auto xs = x.plane(n, c);
            const auto gs = dy.plane(n, c);
            auto out = gx.plane(n, c);
            for (std::size_t i = 0; i < xs.size(); ++i) {
                if (mode == Mode::Train) {
                    const double xhat = (xs[i] - mean) * inv_std;
                    out[i] = static_cast<T>(k * (gs[i] - sum_dy / count - xhat * sum_dy_xhat / count));
                } else {
                    out[i] = static_cast<T>(k * gs[i]);
                }
            }
        }
    }
    if (dx) *dx = std::move(gx);
    if (dscale) *dscale = std::move(gscale);
    if (dshift) *dshift = std::move(gshift);
}

// ---------------------------------------------------------------------------

template <class T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
    Tensor<T> y(x.n(), x.c(), 1, 1);
    for (std::size_t n = 0; n < x.n(); ++n)
        for (std::size_t c = 0; c < x.c(); ++c) {
            double sum = 0;
            for (T v : x.plane(n, c)) sum += v;
            y(n, c, 0, 0) = static_cast<T>(sum / static_cast<double>(x.plane()));
        }
    return y;
}

template <class T>
Tensor<T> global_avg_pool_backward(const Shape& in_shape, const Tensor<T>& dy) {
    Tensor<T> dx(in_shape);
    const T inv = T(1) / static_cast<T>(in_shape.plane());
    for (std::size_t n = 0; n < in_shape.n; ++n)
        for (std::size_t c = 0; c < in_shape.c; ++c) {
            const T g = dy(n, c, 0, 0) * inv;
            for (auto& v : dx.plane(n, c)) v = g;
        }
    return dx;
}

// ---------------------------------------------------------------------------
// Fully connected layer on the flattened (c, h, w) features of each sample.
// Weights have shape (outputs, features, 1, 1); bias has shape (1, outputs, 1, 1).

template <class T>
Tensor<T> fully_connected(const Tensor<T>& x, const Tensor<T>& weights, const Tensor<T>& bias) {
    const std::size_t features = x.c() * x.plane();
    const std::size_t outputs = weights.n();
    if (weights.c() != features || weights.plane() != 1)
        throw ShapeError("fully_connected weights " + weights.shape().str() + " do not match " +
                         std::to_string(features) + " input features");
    require_shape(bias.shape(), Shape{1, outputs, 1, 1}, "fully_connected bias");
    Tensor<T> y(x.n(), outputs, 1, 1);
    const auto xs = x.data();
    const auto ws = weights.data();
    for (std::size_t n = 0; n < x.n(); ++n)
        for (std::size_t o = 0; o < outputs; ++o)
            y(n, o, 0, 0) = bias[o] + detail::dot<T>(ws.subspan(o * features, features),
                                                     xs.subspan(n * features, features));
    return y;
}

template <class T>
void fully_connected_backward(const Tensor<T>& x, const Tensor<T>& weights, const Tensor<T>& dy, Tensor<T>* dx,
                              Tensor<T>* dweights, Tensor<T>* dbias) {
    const std::size_t features = x.c() * x.plane();
    const std::size_t outputs = weights.n();
    Tensor<T> gx(x.shape());
    Tensor<T> gw(weights.shape());
    Tensor<T> gb(1, outputs, 1, 1);
    const auto xs = x.data();
    const auto ws = weights.data();
    for (std::size_t n = 0; n < x.n(); ++n)
        for (std::size_t o = 0; o < outputs; ++o) {
            const T g = dy(n, o, 0, 0);
            gb[o] += g;
            detail::axpy<T>(g, ws.subspan(o * features, features), gx.data().subspan(n * features, features));
            detail::axpy<T>(g, xs.subspan(n * features, features), gw.data().subspan(o * features, features));
        }
    if (dx) *dx = std::move(gx);
    if (dweights) *dweights = std::move(gw);
    if (dbias) *dbias = std::move(gb);
}

// ---------------------------------------------------------------------------

template <class T>
struct SoftmaxCrossEntropy {
    T loss;                 // mean over the batch
    Tensor<T> probabilities;  // (n, classes, 1, 1)
};

template <class T>
SoftmaxCrossEntropy<T> softmax_cross_entropy(const Tensor<T>& logits, std::span<const int> labels) {
    const std::size_t classes = logits.c() * logits.plane();
    if (labels.size() != logits.n())
        throw ShapeError("softmax_cross_entropy: " + std::to_string(labels.size()) + " labels for batch of " +
                         std::to_string(logits.n()));
    Tensor<T> probs(logits.n(), classes, 1, 1);
    double total = 0;
    const auto ls = logits.data();
    for (std::size_t n = 0; n < logits.n(); ++n) {
        const int label = labels[n];
        if (label < 0 || static_cast<std::size_t>(label) >= classes)
            throw ShapeError("label " + std::to_string(label) + " outside [0, " + std::to_string(classes) + ")");
        const auto row = ls.subspan(n * classes, classes);
        double peak = -std::numeric_limits<double>::infinity();
        for (T v : row) peak = std::max(peak, static_cast<double>(v));
        double denom = 0;
        for (T v : row) denom += std::exp(static_cast<double>(v) - peak);
        const double log_denom = std::log(denom);
        for (std::size_t k = 0; k < classes; ++k)
            probs(n, k, 0, 0) = static_cast<T>(std::exp(static_cast<double>(row[k]) - peak - log_denom));
        total += log_denom - (static_cast<double>(row[static_cast<std::size_t>(label)]) - peak);
    }
    return {static_cast<T>(total / static_cast<double>(logits.n())), std::move(probs)};
}

/// Gradient of the mean loss w.r.t. the logits, scaled by the upstream gradient.
template <class T>
Tensor<T> softmax_cross_entropy_backward(const Tensor<T>& probabilities, std::span<const int> labels, T upstream,
                                         const Shape& logits_shape) {
    Tensor<T> dx = probabilities.reshaped(logits_shape);
    const std::size_t classes = probabilities.c();
    const T scale = upstream / static_cast<T>(probabilities.n());
    auto gs = dx.data();
    for (std::size_t n = 0; n < probabilities.n(); ++n) {
        gs[n * classes + static_cast<std::size_t>(labels[n])] -= T(1);
        for (std::size_t k = 0; k < classes; ++k) gs[n * classes + k] *= scale;
    }
    return dx;
}

}  // namespace xxnet
