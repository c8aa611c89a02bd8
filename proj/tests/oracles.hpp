#pragma once

// Brute-force reference implementations used by the unit tests and the acceptance suite.

#include "fixtures.hpp"

#include <set>

namespace matlift::test {

inline double log_density(const Vec3 &x, const Vec3 &mean, const Mat3 &precision) {
    const Vec3 d = x - mean;
    return -0.5 * d.dot(precision * d);
}

inline double sorted_median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

/// Brute-force lifting: every subray against every Gaussian, per-pixel sets, sorted medians.
inline std::vector<std::vector<std::optional<MaterialSample>>> naive_lift(const SceneBundle &scene, const LiftConfig &config) {
    const std::size_t n_g = scene.gaussians.size(), n_v = scene.view_count();
    std::vector<std::vector<std::optional<MaterialSample>>> out(n_g, std::vector<std::optional<MaterialSample>>(n_v));
    for (std::size_t v = 0; v < n_v; ++v) {
        const auto &cam = scene.cameras[v];
        const auto &maps = (*scene.material_maps)[v];
        std::vector<std::vector<MaterialSample>> lists(n_g);
        const int n = config.supersample;
        for (int y = 0; y < cam.height; ++y)
            for (int x = 0; x < cam.width; ++x) {
                std::set<std::uint32_t> hit_set;
                for (int sy = 0; sy < n; ++sy)
                    for (int sx = 0; sx < n; ++sx) {
                        const auto hits = trace_pixel_hits(cam.ray(x + (sx + 0.5) / n, y + (sy + 0.5) / n), scene.gaussians,
                                                           config.hit_threshold, config.falloff);
                        double t = 1.0;
                        for (const auto &h : hits) {
                            if (config.min_transmittance > 0.0 && t < config.min_transmittance) break;
                            hit_set.insert(h.gaussian_index);
                            t *= 1.0 - h.alpha_max;
                        }
                    }
                for (auto g : hit_set) lists[g].push_back(maps.sample(x, y));
            }
        for (std::size_t g = 0; g < n_g; ++g) {
            if (lists[g].empty()) continue;
            std::array<double, 5> med{};
            for (int c = 0; c < 5; ++c) {
                std::vector<double> vals;
                for (const auto &m : lists[g]) vals.push_back(m.to_array()[c]);
                med[c] = sorted_median(vals);
            }
            out[g][v] = MaterialSample::from_array(med);
        }
    }
    return out;
}

inline SceneBundle random_lift_scene(std::uint64_t seed, int n) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(-0.6, 0.6), s(0.03, 0.2), o(0.3, 1.0), m(0.0, 1.0);
    SceneBundle scene;
    for (int i = 0; i < n; ++i) {
        GaussianPrimitive g;
        g.mean = Vec3(u(rng), u(rng), u(rng));
        g.scale = Vec3(s(rng), s(rng), s(rng));
        g.rotation = random_rotation(rng);
        g.opacity = o(rng);
        scene.gaussians.push_back(g);
    }
    // far outside every frustum: must be culled
    GaussianPrimitive lost;
    lost.mean = Vec3(40.0, 40.0, 40.0);
    lost.scale = Vec3::Constant(0.1);
    scene.gaussians.insert(scene.gaussians.begin() + 3, lost);
    scene.cameras = {Camera::look_at(Vec3(0, 0, 3), Vec3::Zero(), Vec3::UnitY(), 40.0, 10, 9),
                     Camera::look_at(Vec3(3, 0.5, 0), Vec3::Zero(), Vec3::UnitY(), 40.0, 10, 9),
                     Camera::look_at(Vec3(-1, 2.5, -1.5), Vec3::Zero(), Vec3::UnitY(), 40.0, 10, 9)};
    std::vector<MaterialMaps> maps;
    for (const auto &cam : scene.cameras) {
        auto mm = MaterialMaps::blank(cam.width, cam.height);
        for (int y = 0; y < cam.height; ++y)
            for (int x = 0; x < cam.width; ++x) mm.set(x, y, random_material(rng));
        maps.push_back(mm);
        scene.images.emplace_back(cam.width, cam.height, 3);
    }
    scene.material_maps = maps;
    scene.env = EnvironmentMap(4, 8, 1.0f);
    return scene;
}

} // namespace matlift::test
