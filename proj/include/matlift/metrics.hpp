#pragma once

// Image metrics. SSIM is the single-scale form with an 11×11 Gaussian window
// (σ = 1.5), K1 = 0.01, K2 = 0.03 and unit dynamic range. Near borders the
// truncated window is renormalized, so flat images have zero local variance
// everywhere.

#include "matlift/image.hpp"

#include <array>
#include <limits>
#include <span>
#include <vector>

namespace matlift {

inline constexpr int kSsimRadius = 5;
inline constexpr double kSsimSigma = 1.5;
inline constexpr double kSsimC1 = 0.01 * 0.01;
inline constexpr double kSsimC2 = 0.03 * 0.03;

namespace detail {

inline const std::array<double, 2 * kSsimRadius + 1> &ssim_kernel() {
    static const auto kernel = [] {
        std::array<double, 2 * kSsimRadius + 1> k{};
        double sum = 0;
        for (int i = -kSsimRadius; i <= kSsimRadius; ++i) sum += k[i + kSsimRadius] = std::exp(-0.5 * i * i / (kSsimSigma * kSsimSigma));
        for (auto &v : k) v /= sum;
        return k;
    }();
    return kernel;
}

/// In-bounds kernel mass for each coordinate along an axis of length n.
inline std::vector<double> kernel_mass(int n) {
    const auto &k = ssim_kernel();
    std::vector<double> z(static_cast<std::size_t>(n), 0.0);
    for (int i = 0; i < n; ++i)
        for (int d = -kSsimRadius; d <= kSsimRadius; ++d)
            if (i + d >= 0 && i + d < n) z[i] += k[d + kSsimRadius];
    return z;
}

/// Separable truncated Gaussian filter of a single plane (no renormalization).
inline std::vector<double> blur(const std::vector<double> &in, int w, int h) {
    const auto &k = ssim_kernel();
    std::vector<double> tmp(in.size(), 0.0), out(in.size(), 0.0);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double s = 0;
            for (int d = -kSsimRadius; d <= kSsimRadius; ++d) {
                const int xx = x + d;
                if (xx >= 0 && xx < w) s += k[d + kSsimRadius] * in[static_cast<std::size_t>(y) * w + xx];
            }
            tmp[static_cast<std::size_t>(y) * w + x] = s;
        }
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double s = 0;
            for (int d = -kSsimRadius; d <= kSsimRadius; ++d) {
                const int yy = y + d;
                if (yy >= 0 && yy < h) s += k[d + kSsimRadius] * tmp[static_cast<std::size_t>(yy) * w + x];
            }
            out[static_cast<std::size_t>(y) * w + x] = s;
        }
    return out;
}

struct SsimPlane {
    std::vector<double> x, y;
    std::vector<double> zx, zy;
    int w, h;

    std::vector<double> local_mean(const std::vector<double> &v) const {
        auto out = blur(v, w, h);
        for (int yy = 0; yy < h; ++yy)
            for (int xx = 0; xx < w; ++xx) out[static_cast<std::size_t>(yy) * w + xx] /= zx[xx] * zy[yy];
        return out;
    }
    /// Adjoint of local_mean.
    std::vector<double> local_mean_adjoint(std::vector<double> v) const {
        for (int yy = 0; yy < h; ++yy)
            for (int xx = 0; xx < w; ++xx) v[static_cast<std::size_t>(yy) * w + xx] /= zx[xx] * zy[yy];
        return blur(v, w, h);
    }
};

} // namespace detail

struct SsimResult {
    double value = 0.0;
    std::vector<double> grad_a; // ∂value/∂a, same layout as a.data; empty unless requested
};

/// Mean SSIM over pixels and channels of interleaved w×h×ch planes; optionally
/// the gradient with respect to `a`. A non-empty `mask` (one 0/1 weight per
/// pixel) restricts the mean of the SSIM map to the selected pixels; the local
/// statistics still use every pixel.
inline SsimResult ssim_with_grad(std::span<const double> a, std::span<const double> b, int w, int h, int ch,
                                 bool want_grad, std::span<const double> mask = {}) {
    const std::size_t n = static_cast<std::size_t>(w) * h;
    if (a.size() != b.size() || a.size() != n * ch) throw ValidationError("ssim: image shapes differ");
    if (n == 0 || ch == 0) throw ValidationError("ssim: empty image");
    if (!mask.empty() && mask.size() != n) throw ValidationError("ssim: mask size differs from the image");
    SsimResult result;
    if (want_grad) result.grad_a.assign(a.size(), 0.0);
    double selected = static_cast<double>(n);
    if (!mask.empty()) {
        selected = 0.0;
        for (double m : mask) selected += m;
        if (!(selected > 0.0)) throw ValidationError("ssim: empty mask");
    }
    const double norm = 1.0 / (selected * ch);

    detail::SsimPlane plane{std::vector<double>(n), std::vector<double>(n), detail::kernel_mass(w), detail::kernel_mass(h), w, h};
    for (int c = 0; c < ch; ++c) {
        for (std::size_t i = 0; i < n; ++i) {
            plane.x[i] = a[i * ch + c];
            plane.y[i] = b[i * ch + c];
        }
        std::vector<double> xx(n), yy(n), xy(n);
        for (std::size_t i = 0; i < n; ++i) {
            xx[i] = plane.x[i] * plane.x[i];
            yy[i] = plane.y[i] * plane.y[i];
            xy[i] = plane.x[i] * plane.y[i];
        }
        const auto mx = plane.local_mean(plane.x), my = plane.local_mean(plane.y);
        const auto exx = plane.local_mean(xx), eyy = plane.local_mean(yy), exy = plane.local_mean(xy);
        std::vector<double> d_mx, d_exx, d_exy;
        if (want_grad) d_mx.assign(n, 0.0), d_exx.assign(n, 0.0), d_exy.assign(n, 0.0);
        for (std::size_t i = 0; i < n; ++i) {
            const double weight = mask.empty() ? norm : norm * mask[i];
            if (weight == 0.0) continue;
            const double a1 = 2.0 * mx[i] * my[i] + kSsimC1;
            const double a2 = 2.0 * (exy[i] - mx[i] * my[i]) + kSsimC2;
            const double b1 = mx[i] * mx[i] + my[i] * my[i] + kSsimC1;
            const double b2 = (exx[i] - mx[i] * mx[i]) + (eyy[i] - my[i] * my[i]) + kSsimC2;
            const double s = (a1 * a2) / (b1 * b2);
            result.value += s * weight;
            if (want_grad) {
                d_mx[i] = weight * s * (2.0 * my[i] / a1 - 2.0 * my[i] / a2 - 2.0 * mx[i] / b1 + 2.0 * mx[i] / b2);
                d_exx[i] = -weight * s / b2;
                d_exy[i] = weight * 2.0 * s / a2;
            }
        }
        if (want_grad) {
            const auto g_mx = plane.local_mean_adjoint(std::move(d_mx));
            const auto g_exx = plane.local_mean_adjoint(std::move(d_exx));
            const auto g_exy = plane.local_mean_adjoint(std::move(d_exy));
            for (std::size_t i = 0; i < n; ++i)
                result.grad_a[i * ch + c] = g_mx[i] + 2.0 * plane.x[i] * g_exx[i] + plane.y[i] * g_exy[i];
        }
    }
    return result;
}

inline SsimResult ssim_with_grad(const Image &a, const Image &b, bool want_grad) {
    if (!a.same_shape(b)) throw ValidationError("ssim: image shapes differ");
    const std::vector<double> da(a.data.begin(), a.data.end()), db(b.data.begin(), b.data.end());
    return ssim_with_grad(da, db, a.width, a.height, a.channels, want_grad);
}

inline double ssim(const Image &a, const Image &b) { return ssim_with_grad(a, b, false).value; }

inline constexpr double kInfinitePsnr = std::numeric_limits<double>::infinity();

/// 10·log10(peak²/MSE); +inf (kInfinitePsnr) when the images are identical.
inline double psnr(const Image &a, const Image &b, double peak = 1.0) {
    if (!a.same_shape(b)) throw ValidationError("psnr: image shapes differ");
    if (a.empty()) throw ValidationError("psnr: empty image");
    double mse = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i) {
        const double d = static_cast<double>(a.data[i]) - static_cast<double>(b.data[i]);
        mse += d * d;
    }
    mse /= static_cast<double>(a.data.size());
    if (mse == 0.0) return kInfinitePsnr;
    return 10.0 * std::log10(peak * peak / mse);
}

inline bool is_infinite_psnr(double v) { return std::isinf(v) && v > 0; }

} // namespace matlift
