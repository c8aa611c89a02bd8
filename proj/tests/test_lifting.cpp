#include "oracles.hpp"
#include "support.hpp"

namespace matlift {
namespace {

using test::naive_lift;
using test::random_lift_scene;
using test::sorted_median;

TEST(Lifting, MatchesNaiveMedianOracle) {
    for (std::uint64_t seed : {1, 2, 3}) {
        const auto scene = random_lift_scene(seed, 45);
        for (double min_t : {1e-3, 0.0}) {
            LiftConfig config;
            config.supersample = 3;
            config.min_transmittance = min_t;
            config.workers = 1;
            const auto oracle = naive_lift(scene, config);
            const auto lifted = lift_scene(scene, config);
            std::size_t unseen = 0;
            for (const auto &slots : oracle) unseen += std::none_of(slots.begin(), slots.end(), [](const auto &s) { return s.has_value(); });
            EXPECT_EQ(lifted.culled, unseen);
            EXPECT_GE(unseen, 1u);
            ASSERT_EQ(lifted.gaussians.size() + lifted.culled, scene.gaussians.size());
            for (std::size_t k = 0; k < lifted.kept.size(); ++k) {
                const std::size_t g = lifted.kept[k];
                for (std::size_t v = 0; v < scene.view_count(); ++v) {
                    const auto &slot = lifted.gaussians[k].per_view[v];
                    ASSERT_EQ(slot.seen, oracle[g][v].has_value()) << "g=" << g << " v=" << v;
                    if (slot.seen) {
                        EXPECT_EQ(slot.value, *oracle[g][v]);
                    }
                }
            }
        }
    }
}

TEST(Lifting, UnseenGaussiansAreRemoved) {
    const auto scene = random_lift_scene(4, 20);
    LiftConfig config;
    config.supersample = 2;
    const auto lifted = lift_scene(scene, config);
    EXPECT_TRUE(std::find(lifted.kept.begin(), lifted.kept.end(), 3u) == lifted.kept.end());
    for (const auto &g : lifted.gaussians) EXPECT_GE(g.seen_count(), 1);
    EXPECT_TRUE(std::is_sorted(lifted.kept.begin(), lifted.kept.end()));
}

TEST(Lifting, SupersamplingOnlyAddsFootprintPixels) {
    // 3×3 subrays include the pixel center used by 1×1
    const auto scene = random_lift_scene(5, 40);
    for (double min_t : {1e-3, 0.0}) {
        LiftConfig coarse, fine;
        coarse.supersample = 1;
        fine.supersample = 3;
        coarse.min_transmittance = fine.min_transmittance = min_t;
        FootprintAccumulator a(scene.gaussians.size(), scene.view_count()), b(scene.gaussians.size(), scene.view_count());
        for (std::size_t v = 0; v < scene.view_count(); ++v) {
            collect_footprints(v, scene.cameras[v], (*scene.material_maps)[v], scene.gaussians, coarse, a);
            collect_footprints(v, scene.cameras[v], (*scene.material_maps)[v], scene.gaussians, fine, b);
        }
        std::size_t grew = 0;
        for (std::size_t g = 0; g < scene.gaussians.size(); ++g)
            for (std::size_t v = 0; v < scene.view_count(); ++v) {
                EXPECT_GE(b.at(g, v).size(), a.at(g, v).size());
                grew += b.at(g, v).size() > a.at(g, v).size();
            }
        EXPECT_GT(grew, 0u);
    }
}

TEST(Lifting, WorkerCountDoesNotChangeResult) {
    const auto scene = random_lift_scene(6, 40);
    LiftConfig one, many;
    one.supersample = many.supersample = 4;
    one.workers = 1;
    many.workers = 4;
    const auto a = lift_scene(scene, one), b = lift_scene(scene, many);
    EXPECT_EQ(a.kept, b.kept);
    EXPECT_EQ(a.gaussians, b.gaussians);
}

TEST(Lifting, RejectsMismatchedMaps) {
    auto scene = random_lift_scene(7, 5);
    (*scene.material_maps)[1] = MaterialMaps::blank(3, 3);
    EXPECT_THROW(lift_scene(scene, {}), ValidationError);
    scene.material_maps.reset();
    EXPECT_THROW(lift_scene(scene, {}), ValidationError);
}

TEST(Median, MidpointConventionAndRobustness) {
    EXPECT_EQ(median({3.0, 1.0, 2.0}), 2.0);
    EXPECT_EQ(median({4.0, 1.0, 3.0, 2.0}), 2.5);
    EXPECT_EQ(median({5.0}), 5.0);
    EXPECT_THROW(median({}), InvalidParameter);
    // a minority of arbitrary outliers cannot move the median outside the inlier range
    std::mt19937_64 rng(8);
    std::uniform_real_distribution<double> inlier(0.4, 0.6), outlier(-100.0, 100.0);
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<double> v;
        const int n = 5 + trial % 20, bad = (n - 1) / 2;
        for (int i = 0; i < n - bad; ++i) v.push_back(inlier(rng));
        for (int i = 0; i < bad; ++i) v.push_back(outlier(rng));
        std::shuffle(v.begin(), v.end(), rng);
        const double m = median(v);
        EXPECT_GE(m, 0.4);
        EXPECT_LE(m, 0.6);
    }
}

} // namespace
} // namespace matlift
