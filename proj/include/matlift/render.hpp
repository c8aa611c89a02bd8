#pragma once

// Deferred PBR rendering of a Gaussian scene: composite materials and normals
// through a compositing cache, divide out coverage, shade every covered pixel
// under the environment and premultiply by coverage (black background).

#include "matlift/parallel.hpp"
#include "matlift/raytracer.hpp"
#include "matlift/shading.hpp"

#include <span>
#include <vector>

namespace matlift {

inline constexpr double kCoverageThreshold = 0.01;

/// Covered pixels of one view with their fixed shading geometry.
struct PixelGeometry {
    std::vector<std::uint32_t> pixels; // raster index y*width + x, ascending
    std::vector<double> alpha;
    std::vector<Vec3> normal;          // composited, unit length
    std::vector<Vec3> view_dir;        // surface -> eye
};

inline Vec3 composite_normal(const CompositingCache &cache, std::size_t p, std::span<const Vec3> normals) {
    Vec3 n = Vec3::Zero();
    for (std::size_t k = cache.begin(p); k < cache.end(p); ++k) n += cache.weight[k] * normals[cache.gaussian[k]];
    return n;
}

inline PixelGeometry pixel_geometry(const Camera &camera, const CompositingCache &cache,
                                    std::span<const GaussianPrimitive> gaussians, double threshold = kCoverageThreshold) {
    std::vector<Vec3> normals;
    normals.reserve(gaussians.size());
    for (const auto &g : gaussians) normals.push_back(g.normal);
    PixelGeometry geo;
    for (std::size_t p = 0; p < cache.pixel_count(); ++p) {
        const double a = cache.alpha(p);
        if (a <= threshold) continue;
        Vec3 n = composite_normal(cache, p, normals);
        const int x = static_cast<int>(p % cache.width), y = static_cast<int>(p / cache.width);
        const Vec3 v = -camera.ray(x + 0.5, y + 0.5).direction;
        if (n.norm() < 1e-12) n = v;
        geo.pixels.push_back(static_cast<std::uint32_t>(p));
        geo.alpha.push_back(a);
        geo.normal.push_back(n.normalized());
        geo.view_dir.push_back(v);
    }
    return geo;
}

/// Coverage-normalized material at pixel p.
inline MaterialSample composite_material(const CompositingCache &cache, std::size_t p, double alpha,
                                         std::span<const MaterialSample> materials) {
    MaterialSample m{Vec3::Zero(), 0.0, 0.0};
    for (std::size_t k = cache.begin(p); k < cache.end(p); ++k) {
        const auto &g = materials[cache.gaussian[k]];
        const double w = cache.weight[k];
        m.basecolor += w * g.basecolor;
        m.roughness += w * g.roughness;
        m.metallic += w * g.metallic;
    }
    m.basecolor /= alpha;
    m.roughness /= alpha;
    m.metallic /= alpha;
    return m;
}

inline ShadingSample shading_sample(const MaterialSample &m, const Vec3 &normal, const Vec3 &view_dir, double alpha) {
    return {m.basecolor, m.roughness, m.metallic, normal, view_dir, alpha};
}

/// Linear RGB render; pixels with coverage <= threshold stay black.
inline Image render_pbr(const CompositingCache &cache, const PixelGeometry &geo,
                        std::span<const MaterialSample> materials, const EnvLighting &env, int workers = 0) {
    Image out(cache.width, cache.height, 3);
    parallel_chunks(geo.pixels.size(), 256, workers, [&](std::size_t, std::size_t b, std::size_t e) {
        for (std::size_t i = b; i < e; ++i) {
            const std::size_t p = geo.pixels[i];
            const auto m = composite_material(cache, p, geo.alpha[i], materials);
            const Vec3 rgb = shade_pixel(shading_sample(m, geo.normal[i], geo.view_dir[i], geo.alpha[i]), env);
            for (int c = 0; c < 3; ++c) out.data[p * 3 + c] = static_cast<float>(rgb[c]);
        }
    });
    return out;
}

inline Image render_pbr(const Camera &camera, std::span<const GaussianPrimitive> gaussians,
                        std::span<const MaterialSample> materials, const EnvironmentMap &env,
                        const CompositeConfig &config = {}) {
    const auto cache = build_compositing_cache(camera, gaussians, config);
    const auto geo = pixel_geometry(camera, cache, gaussians);
    return render_pbr(cache, geo, materials, EnvLighting::from(env), config.workers);
}

} // namespace matlift
