#pragma once

// Small deterministic scenes and numeric helpers shared by the test binaries and the acceptance suite.

#include "matlift/pipeline.hpp"

#include <filesystem>
#include <random>

namespace matlift::test {

/// Unique scratch directory under the system temp dir, removed on destruction.
struct TempDir {
    std::filesystem::path path;
    explicit TempDir(const std::string &tag) {
        path = std::filesystem::temp_directory_path() /
               ("matlift_" + tag + "_" + std::to_string(std::random_device{}()));
        std::filesystem::remove_all(path);
        std::filesystem::create_directories(path);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path, ec);
    }
};

inline Quat random_rotation(std::mt19937_64 &rng) {
    std::normal_distribution<double> n(0.0, 1.0);
    Quat q(n(rng), n(rng), n(rng), n(rng));
    return q.normalized();
}

inline Vec3 random_unit(std::mt19937_64 &rng) {
    std::normal_distribution<double> n(0.0, 1.0);
    Vec3 v(n(rng), n(rng), n(rng));
    return v.normalized();
}

inline MaterialSample random_material(std::mt19937_64 &rng) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    return {Vec3(u(rng), u(rng), u(rng)), u(rng), u(rng)};
}

/// Relative difference with an absolute floor for near-zero values.
inline double rel_err(double a, double b, double floor = 1e-8) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

/// Five flat Gaussians near the origin seen by two 8×8 cameras, with reference
/// materials, rendered images, noisy predictor maps and lifted per-view slots.
inline SceneBundle tiny_scene(std::uint64_t seed = 7, bool lifted = true) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    SceneBundle scene;
    const std::array<Vec3, 5> means = {Vec3(0, 0, 0), Vec3(0.35, 0.1, 0.05), Vec3(-0.3, 0.2, -0.05),
                                       Vec3(0.1, -0.35, 0.0), Vec3(-0.2, -0.25, 0.1)};
    for (std::size_t i = 0; i < means.size(); ++i) {
        GaussianPrimitive g;
        g.mean = means[i];
        g.normal = Vec3(0.15 * u(rng), 0.15 * u(rng), 1.0).normalized();
        g.rotation = Quat::FromTwoVectors(Vec3::UnitZ(), g.normal);
        g.scale = Vec3(0.25 + 0.05 * u(rng), 0.2 + 0.05 * u(rng), 0.03);
        g.opacity = 0.8 + 0.1 * u(rng);
        g.reference = MaterialSample{Vec3(0.5 + 0.3 * u(rng), 0.5 + 0.3 * u(rng), 0.5 + 0.3 * u(rng)),
                                     0.5 + 0.3 * u(rng), 0.3 + 0.2 * u(rng)};
        scene.gaussians.push_back(g);
    }
    scene.cameras = {Camera::look_at(Vec3(0.3, 0.2, 2.0), Vec3::Zero(), Vec3::UnitY(), 35.0, 8, 8),
                     Camera::look_at(Vec3(-0.4, -0.1, 2.0), Vec3::Zero(), Vec3::UnitY(), 35.0, 8, 8)};
    EnvironmentMap env(4, 8);
    for (int r = 0; r < env.height; ++r)
        for (int c = 0; c < env.width; ++c)
            for (int k = 0; k < 3; ++k) env.at(r, c, k) = static_cast<float>(0.6 + 0.3 * std::sin(r + 2 * c + k));
    scene.env = env;
    const auto gt = render_ground_truth(scene.gaussians, scene.cameras, scene.env, 1);
    scene.images = gt.images;
    CorruptionConfig corruption = CorruptionConfig::none();
    corruption.pixel_noise_sigma = 0.05;
    corruption.per_batch_gain = 0.1;
    scene.material_maps = oracle_predict(gt.maps, gt.normals, gt.alpha, corruption, seed);
    if (lifted) {
        LiftConfig lc;
        lc.supersample = 4;
        lc.workers = 1;
        auto result = lift_scene(scene, lc);
        scene.gaussians = std::move(result.gaussians);
    }
    return scene;
}

/// Small training config used by refinement tests.
inline RefineConfig tiny_refine_config(Variant variant = Variant::full) {
    RefineConfig c;
    c.iterations = 20;
    c.variant = variant;
    c.seed = 3;
    c.pe_levels = 2;
    c.env_height = 4;
    c.env_width = 8;
    c.workers = 1;
    return c;
}

} // namespace matlift::test
