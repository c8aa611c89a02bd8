#pragma once

// Training losses. The material loss compares coverage-normalized rendered
// material maps with the predictor maps over covered pixels; the photometric
// loss blends L1 and 1 - SSIM on the shaded image.

#include "matlift/log.hpp"
#include "matlift/metrics.hpp"
#include "matlift/scene.hpp"

#include <array>

namespace matlift {

inline constexpr int kMaterialComponents = 5; // basecolor rgb, roughness, metallic

struct ImageLoss {
    double value = 0.0;
    std::array<double, 3> per_channel{}; // basecolor, roughness, metallic; sums to value
    std::size_t mask_pixels = 0;
};

/// Mean |rendered - predicted| over the 5 material components of pixels with alpha > threshold.
inline ImageLoss loss_image(const MaterialMaps &rendered, const MaterialMaps &predicted, const Image &alpha,
                            double threshold = 0.01) {
    const int w = alpha.width, h = alpha.height;
    if (!rendered.matches(w, h) || !predicted.matches(w, h) || alpha.channels != 1)
        throw ValidationError("loss_image: map resolutions differ");
    ImageLoss loss;
    std::array<double, 3> sums{};
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            if (!(alpha.at(x, y) > threshold)) continue;
            ++loss.mask_pixels;
            for (int c = 0; c < 3; ++c) sums[0] += std::abs(double(rendered.basecolor.at(x, y, c)) - predicted.basecolor.at(x, y, c));
            sums[1] += std::abs(double(rendered.roughness.at(x, y)) - predicted.roughness.at(x, y));
            sums[2] += std::abs(double(rendered.metallic.at(x, y)) - predicted.metallic.at(x, y));
        }
    if (loss.mask_pixels == 0) {
        log(LogLevel::warn, "loss_image: empty coverage mask, loss is zero");
        return loss;
    }
    const double norm = 1.0 / (kMaterialComponents * static_cast<double>(loss.mask_pixels));
    for (int c = 0; c < 3; ++c) {
        loss.per_channel[c] = sums[c] * norm;
        loss.value += loss.per_channel[c];
    }
    return loss;
}

struct PhotoLoss {
    double value = 0.0;
    double l1 = 0.0;
    double ssim = 1.0;
    std::vector<double> grad; // ∂value/∂rendered, empty unless requested
};

inline double sign_of(double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); }

/// λ·mean|rendered - gt| + (1-λ)·(1 - SSIM(rendered, gt)) on interleaved w×h×ch planes.
/// A non-empty `mask` (one 0/1 weight per pixel) restricts both means to the selected pixels.
inline PhotoLoss loss_3dgs(std::span<const double> rendered, std::span<const double> gt, int w, int h, int ch,
                           double lambda, bool want_grad = false, std::span<const double> mask = {}) {
    if (!(lambda >= 0.0 && lambda <= 1.0)) throw InvalidParameter("loss_3dgs: lambda must lie in [0,1]");
    if (rendered.size() != gt.size() || rendered.size() != static_cast<std::size_t>(w) * h * ch)
        throw ValidationError("loss_3dgs: image shapes differ");
    if (!mask.empty() && mask.size() != static_cast<std::size_t>(w) * h)
        throw ValidationError("loss_3dgs: mask size differs from the image");
    PhotoLoss loss;
    auto weight = [&](std::size_t i) { return mask.empty() ? 1.0 : mask[i / ch]; };
    double n = 0.0;
    for (std::size_t i = 0; i < rendered.size(); ++i) {
        loss.l1 += weight(i) * std::abs(rendered[i] - gt[i]);
        n += weight(i);
    }
    if (!(n > 0.0)) throw ValidationError("loss_3dgs: empty mask");
    loss.l1 /= n;
    const bool need_ssim = lambda < 1.0;
    SsimResult s;
    if (need_ssim) s = ssim_with_grad(rendered, gt, w, h, ch, want_grad, mask);
    loss.ssim = need_ssim ? s.value : 1.0;
    loss.value = lambda * loss.l1 + (1.0 - lambda) * (1.0 - loss.ssim);
    if (want_grad) {
        loss.grad.assign(rendered.size(), 0.0);
        for (std::size_t i = 0; i < rendered.size(); ++i) {
            loss.grad[i] = lambda * weight(i) * sign_of(rendered[i] - gt[i]) / n;
            if (need_ssim) loss.grad[i] -= (1.0 - lambda) * s.grad_a[i];
        }
    }
    return loss;
}

inline PhotoLoss loss_3dgs(const Image &rendered, const Image &gt, double lambda, bool want_grad = false) {
    if (!rendered.same_shape(gt)) throw ValidationError("loss_3dgs: image shapes differ");
    const std::vector<double> r(rendered.data.begin(), rendered.data.end()), g(gt.data.begin(), gt.data.end());
    return loss_3dgs(r, g, rendered.width, rendered.height, rendered.channels, lambda, want_grad);
}

} // namespace matlift
