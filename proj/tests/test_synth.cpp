#include "support.hpp"

namespace matlift {
namespace {

SceneSpec small_spec() {
    auto spec = default_scene_spec();
    spec.gaussian_count = 400;
    spec.views = 4;
    spec.held_out_views = 2;
    spec.width = spec.height = 24;
    return spec;
}

TEST(Synth, GenerationIsDeterministic) {
    const auto a = generate_scene(small_spec(), 5, 1);
    const auto b = generate_scene(small_spec(), 5, 3);
    ASSERT_EQ(a.scene.gaussians.size(), 400u);
    for (std::size_t i = 0; i < a.scene.gaussians.size(); ++i) {
        EXPECT_EQ(a.scene.gaussians[i].mean, b.scene.gaussians[i].mean);
        EXPECT_EQ(*a.scene.gaussians[i].reference, *b.scene.gaussians[i].reference);
    }
    for (std::size_t v = 0; v < a.scene.images.size(); ++v) EXPECT_EQ(a.scene.images[v].data, b.scene.images[v].data);
    const auto c = generate_scene(small_spec(), 6, 1);
    EXPECT_NE(a.scene.gaussians[0].mean, c.scene.gaussians[0].mean);
    EXPECT_EQ(a.held_out_views.size(), 2u);
    EXPECT_EQ(a.held_out_envs.size(), a.held_out_env_names.size());
}

TEST(Synth, SurfelsLieOnTheirShapes) {
    const auto spec = small_spec();
    const auto bench = generate_scene(spec, 2, 1);
    const auto &sphere = spec.regions[0];
    std::size_t on_sphere = 0;
    for (const auto &g : bench.scene.gaussians) {
        const Vec3 d = g.mean - sphere.center;
        if (std::abs(d.norm() - sphere.size.x()) > 1e-9) continue;
        ++on_sphere;
        const double cos_angle = g.normal.dot(d.normalized());
        EXPECT_GT(cos_angle, std::cos(5.0 * kPi / 180.0));
        EXPECT_NEAR(g.normal.norm(), 1.0, 1e-12);
        EXPECT_LT((g.rotation.toRotationMatrix().col(2) - g.normal).norm(), 1e-9);
    }
    EXPECT_GT(on_sphere, 50u);
}

TEST(Synth, DielectricSceneHasNoMetal) {
    auto spec = dielectric_scene_spec();
    spec.gaussian_count = 300;
    spec.views = 2;
    spec.width = spec.height = 16;
    const auto bench = generate_scene(spec, 1, 1);
    for (const auto &g : bench.scene.gaussians) EXPECT_EQ(g.reference->metallic, 0.0);
    for (const auto &m : *bench.scene.material_maps)
        for (float v : m.metallic.data) EXPECT_EQ(v, 0.0f);
}

TEST(Oracle, IdentityCorruptionReturnsGroundTruth) {
    const auto bench = generate_scene(small_spec(), 3, 1);
    const auto gt = render_ground_truth(bench.scene.gaussians, bench.scene.cameras, bench.scene.env, 1);
    const auto pred = oracle_predict(gt.maps, gt.normals, gt.alpha, CorruptionConfig::none(), 11);
    ASSERT_EQ(pred.size(), gt.maps.size());
    for (std::size_t v = 0; v < pred.size(); ++v) {
        EXPECT_EQ(pred[v].basecolor.data, gt.maps[v].basecolor.data);
        EXPECT_EQ(pred[v].roughness.data, gt.maps[v].roughness.data);
        EXPECT_EQ(pred[v].metallic.data, gt.maps[v].metallic.data);
    }
}

TEST(Oracle, GainOnlyScalesEveryViewOfABatchAlike) {
    const auto bench = generate_scene(small_spec(), 3, 1);
    const auto gt = render_ground_truth(bench.scene.gaussians, bench.scene.cameras, bench.scene.env, 1);
    auto config = CorruptionConfig::none();
    config.per_batch_gain = 0.2;
    config.batch_size = static_cast<int>(gt.maps.size());
    const auto pred = oracle_predict(gt.maps, gt.normals, gt.alpha, config, 4);
    const auto batch = draw_batches(gt.maps.size(), config, 4).at(0);
    for (std::size_t v = 0; v < pred.size(); ++v) {
        const auto &g = gt.maps[v];
        for (int y = 0; y < g.basecolor.height; ++y)
            for (int x = 0; x < g.basecolor.width; ++x) {
                if (!(gt.alpha[v].at(x, y) > kCoverageThreshold)) continue;
                const auto a = g.sample(x, y), b = pred[v].sample(x, y);
                for (int c = 0; c < 3; ++c) EXPECT_NEAR(b.basecolor[c], clamp01(a.basecolor[c] * batch.gain[c]), 1e-6);
                EXPECT_NEAR(b.roughness, clamp01(a.roughness * batch.roughness_gain), 1e-6);
                EXPECT_NEAR(b.metallic, a.metallic, 1e-6);
            }
    }
}

TEST(Oracle, DeterministicAndInRange) {
    const auto bench = generate_scene(small_spec(), 3, 1);
    const auto gt = render_ground_truth(bench.scene.gaussians, bench.scene.cameras, bench.scene.env, 1);
    const CorruptionConfig config;
    const auto a = oracle_predict(gt.maps, gt.normals, gt.alpha, config, 9);
    const auto b = oracle_predict(gt.maps, gt.normals, gt.alpha, config, 9);
    const auto c = oracle_predict(gt.maps, gt.normals, gt.alpha, config, 10);
    bool differs = false;
    for (std::size_t v = 0; v < a.size(); ++v) {
        EXPECT_EQ(a[v].basecolor.data, b[v].basecolor.data);
        differs |= a[v].basecolor.data != c[v].basecolor.data;
        for (const auto *img : {&a[v].basecolor, &a[v].roughness, &a[v].metallic})
            for (float x : img->data) {
                EXPECT_GE(x, 0.0f);
                EXPECT_LE(x, 1.0f);
            }
    }
    EXPECT_TRUE(differs);
}

TEST(Oracle, SpuriousMetallicAppearsInWholeBatches) {
    auto config = CorruptionConfig::none();
    config.batch_size = 2;
    config.spurious_metallic_prob = 0.5;
    config.spurious_metallic_min = 0.2;
    config.spurious_metallic_max = 0.5;
    std::size_t hit = 0, total = 0;
    for (std::uint64_t seed = 0; seed < 50; ++seed)
        for (const auto &b : draw_batches(8, config, seed)) {
            ++total;
            if (b.metallic_offset > 0.0) {
                ++hit;
                EXPECT_GE(b.metallic_offset, 0.2);
                EXPECT_LE(b.metallic_offset, 0.5);
            }
        }
    EXPECT_NEAR(static_cast<double>(hit) / total, 0.5, 0.1);

    auto spec = dielectric_scene_spec();
    spec.gaussian_count = 300;
    spec.views = 8;
    spec.width = spec.height = 16;
    const auto bench = generate_scene(spec, 1, 1);
    const auto gt = render_ground_truth(bench.scene.gaussians, bench.scene.cameras, bench.scene.env, 1);
    const auto batches = draw_batches(8, config, 21);
    const auto pred = oracle_predict(gt.maps, gt.normals, gt.alpha, config, 21);
    for (std::size_t v = 0; v < 8; ++v) {
        double top = 0.0;
        for (float m : pred[v].metallic.data) top = std::max(top, static_cast<double>(m));
        EXPECT_NEAR(top, batches[v / 2].metallic_offset, 1e-6);
    }
}

TEST(Oracle, BakedShadingIsMeanPreserving) {
    // Over uniformly random light directions 1 + s·(n·l) averages to one.
    const auto bench = generate_scene(small_spec(), 3, 1);
    const auto gt = render_ground_truth(bench.scene.gaussians, bench.scene.cameras, bench.scene.env, 1);
    auto config = CorruptionConfig::none();
    config.baked_shading_strength = 0.5;
    double ratio = 0.0;
    std::size_t n = 0;
    for (std::uint64_t seed = 0; seed < 40; ++seed) {
        const auto pred = oracle_predict(gt.maps, gt.normals, gt.alpha, config, seed);
        for (std::size_t v = 0; v < pred.size(); ++v)
            for (std::size_t i = 0; i < pred[v].basecolor.data.size(); ++i) {
                const float g = gt.maps[v].basecolor.data[i];
                if (g < 0.2f || g > 0.6f) continue; // away from the clamp
                ratio += pred[v].basecolor.data[i] / g;
                ++n;
            }
    }
    ASSERT_GT(n, 1000u);
    EXPECT_NEAR(ratio / n, 1.0, 0.05);
}

TEST(Oracle, RejectsBadConfig) {
    const auto bench = generate_scene(small_spec(), 3, 1);
    const auto gt = render_ground_truth(bench.scene.gaussians, bench.scene.cameras, bench.scene.env, 1);
    auto config = CorruptionConfig::none();
    config.spurious_metallic_prob = 1.5;
    try {
        oracle_predict(gt.maps, gt.normals, gt.alpha, config, 1);
        FAIL();
    } catch (const ValidationError &e) {
        EXPECT_NE(std::string(e.what()).find("spurious_metallic_prob"), std::string::npos);
    }
    EXPECT_THROW(oracle_predict(gt.maps, std::span<const Image>(gt.normals).first(1), gt.alpha, CorruptionConfig::none(), 1),
                 ValidationError);
}

TEST(Synth, SpecJsonRoundTripAndErrors) {
    const auto spec = small_spec();
    const auto back = spec_from_json(spec_to_json(spec));
    EXPECT_EQ(back.gaussian_count, spec.gaussian_count);
    ASSERT_EQ(back.regions.size(), spec.regions.size());
    EXPECT_EQ(back.regions[2].material, spec.regions[2].material);
    EXPECT_EQ(back.regions[0].stripes, spec.regions[0].stripes);

    auto expect_field = [](const nlohmann::json &j, const std::string &field) {
        try {
            spec_from_json(j);
            FAIL() << "no error for " << field;
        } catch (const ValidationError &e) {
            EXPECT_NE(std::string(e.what()).find(field), std::string::npos) << e.what();
        }
    };
    using nlohmann::json;
    expect_field(json::parse(R"({"viewz": 3})"), "viewz");
    expect_field(json::parse(R"({"views": "many"})"), "views");
    expect_field(json::parse(R"({"views": 0})"), "views");
    expect_field(json::parse(R"({"regions": [{"shape": "cone"}]})"), "regions[0].shape");
    expect_field(json::parse(R"({"regions": [{"size": [1, -1, 1]}]})"), "regions[0].size");
    EXPECT_THROW(spec_from_json(json::parse(R"({"env": "mars"})")), InvalidParameter);
}

TEST(Metrics, RelightingOfGroundTruthIsExact) {
    const auto bench = generate_scene(small_spec(), 3, 1);
    auto predicted = bench.scene.gaussians;
    for (auto &g : predicted) g.merged = g.reference;
    const auto table = evaluate_relighting(bench.scene.gaussians, predicted, bench.held_out_views, bench.held_out_envs,
                                           bench.held_out_env_names, 1);
    for (const char *task : kTaskRows) {
        EXPECT_TRUE(is_infinite_psnr(table.row(task).psnr)) << task;
        EXPECT_EQ(table.row(task).count, 0u);
    }
    EXPECT_EQ(table.row("Relighting").excluded, bench.held_out_views.size() * bench.held_out_envs.size());
    EXPECT_NE(table.csv().find("Relighting,inf"), std::string::npos);

    for (auto &g : predicted) g.merged->metallic = 0.3;
    EXPECT_NEAR(max_metallic(predicted, bench.held_out_views, 1), 0.3, 1e-6);
    const auto worse = evaluate_relighting(bench.scene.gaussians, predicted, bench.held_out_views, bench.held_out_envs,
                                           bench.held_out_env_names, 1);
    EXPECT_FALSE(is_infinite_psnr(worse.row("Metallic").psnr));
    EXPECT_LT(worse.row("Relighting").psnr, 60.0);
    EXPECT_THROW(worse.row("Albedo"), InvalidParameter);
}

} // namespace
} // namespace matlift
