// Acceptance suite: one PASS/FAIL line per criterion.
//
//   matlift_acceptance [--only 1,4,9]
//
// Criteria 6 and 7 share one set of ablation runs (3 seeds, default benchmark).

#include "checks.hpp"
#include "oracles.hpp"

#include <chrono>
#include <cstdio>
#include <set>
#include <sstream>

#ifndef MATLIFT_CONFIG_DIR
#define MATLIFT_CONFIG_DIR "configs"
#endif

namespace {

using namespace matlift;
using clk = std::chrono::steady_clock;

double seconds_since(clk::time_point t) { return std::chrono::duration<double>(clk::now() - t).count(); }

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string fmt(const char *f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

PipelineConfig config_file(const std::string &name) { return load_config(std::string(MATLIFT_CONFIG_DIR) + "/" + name); }

// ---------------------------------------------------------------------------

Outcome criterion_1() {
    const auto start = clk::now();
    std::mt19937_64 rng(1001);
    std::uniform_real_distribution<double> u(-1.0, 1.0), s(0.05, 1.0);
    double worst_gap = 0.0; // most negative (best - sample) seen
    for (int trial = 0; trial < 1000; ++trial) {
        const Vec3 mean(u(rng), u(rng), u(rng));
        const Vec3 scale(s(rng), s(rng), s(rng));
        const Mat3 p = precision_from_scale_rotation(scale, test::random_rotation(rng));
        const Ray ray{Vec3(2 * u(rng), 2 * u(rng), 2 * u(rng)) - Vec3(0, 0, 3), test::random_unit(rng)};
        const auto best = max_response(ray, mean, p);
        const double at_best = test::log_density(best.point, mean, p);
        const double center = (mean - ray.origin).dot(ray.direction);
        const double reach = 4.0 * scale.maxCoeff();
        for (int k = 0; k < 200; ++k) {
            const double tau = center - reach + 2.0 * reach * k / 199.0;
            worst_gap = std::min(worst_gap, at_best - test::log_density(ray.origin + tau * ray.direction, mean, p));
        }
    }
    double iso_err = 0.0;
    for (int trial = 0; trial < 1000; ++trial) {
        const Vec3 mean(u(rng), u(rng), u(rng));
        const Mat3 p = precision_from_scale_rotation(Vec3::Constant(s(rng)), test::random_rotation(rng));
        const Ray ray{Vec3(u(rng), u(rng), u(rng)), test::random_unit(rng)};
        iso_err = std::max(iso_err, std::abs(max_response(ray, mean, p).tau - (mean - ray.origin).dot(ray.direction)));
    }
    const double secs = seconds_since(start);
    return {worst_gap >= -1e-9 && iso_err <= 1e-12 && secs < 5.0,
            fmt("worst dense-sample gap %.2e (>= -1e-9), isotropic error %.2e (<= 1e-12), %.2f s (< 5 s)", worst_gap,
                iso_err, secs)};
}

Outcome criterion_2() {
    std::size_t compared = 0, mismatches = 0, cull_errors = 0, scenes = 0;
    for (std::uint64_t seed : {1, 2, 3, 4}) {
        const auto scene = test::random_lift_scene(seed, 45); // 46 Gaussians, one far outside every view
        for (double min_t : {1e-3, 0.0}) {
            LiftConfig config;
            config.supersample = 3;
            config.min_transmittance = min_t;
            const auto oracle = test::naive_lift(scene, config);
            const auto lifted = lift_scene(scene, config);
            ++scenes;
            std::set<std::size_t> expected_kept;
            for (std::size_t g = 0; g < oracle.size(); ++g)
                if (std::any_of(oracle[g].begin(), oracle[g].end(), [](const auto &s) { return s.has_value(); })) expected_kept.insert(g);
            if (std::set<std::size_t>(lifted.kept.begin(), lifted.kept.end()) != expected_kept ||
                lifted.culled != oracle.size() - expected_kept.size() || expected_kept.count(3))
                ++cull_errors;
            for (std::size_t k = 0; k < lifted.kept.size(); ++k)
                for (std::size_t v = 0; v < scene.view_count(); ++v) {
                    const auto &slot = lifted.gaussians[k].per_view[v];
                    const auto &want = oracle[lifted.kept[k]][v];
                    ++compared;
                    if (slot.seen != want.has_value() || (slot.seen && !(slot.value == *want))) ++mismatches;
                }
        }
    }
    return {mismatches == 0 && cull_errors == 0 && compared > 0,
            fmt("%zu scenes, %zu (Gaussian, view) slots compared exactly, %zu mismatches, %zu culling errors", scenes,
                compared, mismatches, cull_errors)};
}

Outcome criterion_3() {
    const auto start = clk::now();
    std::ostringstream detail;
    bool pass = true;
    double worst = 0.0;
    std::size_t checked = 0, kinks = 0;
    auto take = [&](const test::GradCheck &gc, const std::string &what) {
        worst = std::max(worst, gc.worst);
        checked += gc.checked;
        kinks += gc.kinks;
        if (!gc.ok(1e-3)) {
            pass = false;
            detail << what << " failed (" << gc.worst << " at " << gc.worst_label << "); ";
        }
    };
    for (auto head : {MergeHead::softmax, MergeHead::direct})
        for (auto c : kMaterialChannels)
            take(test::merger_gradcheck(head, c, 301 + 10 * static_cast<int>(head) + static_cast<int>(c)), "merger");
    take(test::shading_gradcheck(302), "shading");
    const auto scene = test::tiny_scene();
    for (auto v : {Variant::full, Variant::no_softmax}) {
        const auto e2e = test::end_to_end_gradcheck(scene, test::tiny_refine_config(v));
        take(e2e.merger, std::string("end-to-end merger ") + variant_name(v));
        take(e2e.env, std::string("end-to-end env ") + variant_name(v));
    }
    const double secs = seconds_since(start);
    if (secs >= 60.0) pass = false;
    detail << fmt("%zu derivatives checked (eps 1e-4, double), worst relative error %.2e (<= 1e-3), %zu kink entries skipped, %.1f s (< 60 s)",
                  checked, worst, kinks, secs);
    return {pass, detail.str()};
}

Outcome criterion_4() {
    const auto config = config_file("smoke.json");
    const auto synth = make_synthetic(config, 4);
    auto scene = synth.scene;
    auto lifted = lift_scene(scene, config.lift);
    scene.gaussians = std::move(lifted.gaussians);
    auto refine = config.refine;
    refine.iterations = 500;
    refine.variant = Variant::full;
    Refiner<double> refiner(scene, refine);
    double worst = 0.0;
    std::size_t steps = 0;
    refiner.run([&](const LossReport &) {
        ++steps;
        for (auto c : kMaterialChannels) worst = std::max(worst, test::merge_invariant_violation(refiner.last_batch(c), channel_width(c)));
    });
    return {steps == 500 && worst <= 1e-6,
            fmt("%zu steps on %zu Gaussians, worst simplex/hull violation %.2e (<= 1e-6)", steps, scene.gaussians.size(), worst)};
}

Outcome criterion_5() {
    const double top = test::furnace_max(501);
    const double recip = test::reciprocity_worst(502);
    return {top <= 1.05 && recip <= 1e-9,
            fmt("max radiance %.4f over 1000 materials (<= 1.05), reciprocity error %.2e (<= 1e-9)", top, recip)};
}

struct SeedRun {
    std::uint64_t seed = 0;
    AblationReport report;
    double seconds = 0.0;
};

std::vector<SeedRun> run_benchmark_seeds() {
    const auto config = config_file("default.json");
    std::vector<SeedRun> runs;
    for (std::uint64_t seed : {1, 2, 3}) {
        const auto start = clk::now();
        const auto synth = make_synthetic(config, seed);
        SceneBundle scene = synth.scene;
        scene.gaussians = lift_scene(scene, config.lift).gaussians;
        auto refine = config.refine;
        refine.seed = seed;
        const std::array<Variant, 4> variants = {Variant::proj_average, Variant::supervised_only, Variant::full, Variant::no_softmax};
        SeedRun run{seed, run_ablation(scene, synth.held_out, refine, variants), 0.0};
        run.seconds = seconds_since(start);
        std::fprintf(stderr, "  seed %llu: %.0f s\n", static_cast<unsigned long long>(seed), run.seconds);
        runs.push_back(std::move(run));
    }
    return runs;
}

double relight_psnr(const SeedRun &r, Variant v) { return r.report.at(v).table.row("Relighting").psnr; }

double mean_psnr(const std::vector<SeedRun> &runs, Variant v) {
    double s = 0.0;
    for (const auto &r : runs) s += relight_psnr(r, v);
    return s / static_cast<double>(runs.size());
}

std::string per_seed(const std::vector<SeedRun> &runs, Variant v) {
    std::string out;
    for (const auto &r : runs) out += (out.empty() ? "" : "/") + fmt("%.2f", relight_psnr(r, v));
    return out;
}

Outcome criterion_6(const std::vector<SeedRun> &runs) {
    double total = 0.0;
    for (const auto &r : runs) total += r.seconds;
    const double full = mean_psnr(runs, Variant::full), avg = mean_psnr(runs, Variant::proj_average),
                 sup = mean_psnr(runs, Variant::supervised_only);
    return {full >= avg + 1.0 && full >= sup && total < 900.0,
            fmt("relighting PSNR over 3 seeds: Full %.2f (%s) vs Proj. Average %.2f (%s) +1 dB, Supervised %.2f (%s); %.0f s (< 900 s)",
                full, per_seed(runs, Variant::full).c_str(), avg, per_seed(runs, Variant::proj_average).c_str(), sup,
                per_seed(runs, Variant::supervised_only).c_str(), total)};
}

Outcome criterion_7(const std::vector<SeedRun> &runs) {
    const double full = mean_psnr(runs, Variant::full), direct = mean_psnr(runs, Variant::no_softmax);
    int wins = 0;
    for (const auto &r : runs) wins += relight_psnr(r, Variant::full) >= relight_psnr(r, Variant::no_softmax);
    return {full >= direct,
            fmt("mean relighting PSNR over 3 seeds: Full %.2f (%s) vs no_softmax %.2f (%s); Full ahead on %d of 3 seeds", full,
                per_seed(runs, Variant::full).c_str(), direct, per_seed(runs, Variant::no_softmax).c_str(), wins)};
}

Outcome criterion_8() {
    const auto config = config_file("dielectric.json");
    const auto synth = make_synthetic(config, 1);
    SceneBundle scene = synth.scene;
    scene.gaussians = lift_scene(scene, config.lift).gaussians;
    double lifted_max = 0.0;
    for (const auto &g : scene.gaussians)
        for (const auto &slot : g.per_view)
            if (slot.seen) lifted_max = std::max(lifted_max, slot.value.metallic);
    auto refine = config.refine;
    refine.seed = 1;
    const std::array<Variant, 2> variants = {Variant::proj_average, Variant::full};
    const auto report = run_ablation(scene, synth.held_out, refine, variants);
    const double full = report.at(Variant::full).max_metallic, avg = report.at(Variant::proj_average).max_metallic;
    return {full < 0.05, fmt("spurious_metallic_prob %.2f: max held-out metallic Full %.3f (< 0.05), Proj. Average %.3f, lifted per-view max %.3f",
                             config.corruption.spurious_metallic_prob, full, avg, lifted_max)};
}

Outcome criterion_9() {
    Image a(32, 24, 3), b(32, 24, 3);
    std::mt19937_64 rng(901);
    std::uniform_real_distribution<double> u(0.1, 0.9);
    for (auto &x : a.data) x = static_cast<float>(u(rng));
    for (std::size_t i = 0; i < a.data.size(); ++i) b.data[i] = a.data[i] - 0.1f;
    Image zero(16, 16, 1, 0.0f), offset(16, 16, 1, 0.1f);
    const double self = ssim(a, a);
    const double p_offset = psnr(zero, offset);
    const double p_same = psnr(a, a);
    const double p_shift = psnr(a, b);
    const bool pass = std::abs(self - 1.0) <= 1e-12 && std::abs(p_offset - 20.0) <= 1e-6 && is_infinite_psnr(p_same) &&
                      std::abs(p_shift - 20.0) <= 1e-4;
    return {pass, fmt("ssim(x,x) = %.15f, psnr(0 vs 0.1) = %.9f dB, psnr(x,x) %s, psnr(x, x-0.1) = %.6f dB", self, p_offset,
                      is_infinite_psnr(p_same) ? "is the infinite sentinel" : "is finite", p_shift)};
}

Outcome criterion_10() {
    test::TempDir dir("acceptance_determinism");
    auto config = config_file("smoke.json");
    config.refine.iterations = 30;
    std::vector<std::string> diffs;
    auto same = [&](bool ok, const std::string &what) {
        if (!ok) diffs.push_back(what);
    };

    const auto s1 = make_synthetic(config, 7, 1), s2 = make_synthetic(config, 7, 0);
    same(s1.scene.images == s2.scene.images && *s1.scene.material_maps == *s2.scene.material_maps &&
             encode_gaussians(s1.scene.gaussians) == encode_gaussians(s2.scene.gaussians),
         "synth");

    auto lift_a = config.lift, lift_b = config.lift;
    lift_a.workers = 1;
    lift_b.workers = 0;
    const auto l1 = lift_scene(s1.scene, lift_a), l2 = lift_scene(s1.scene, lift_b);
    same(encode_gaussians(l1.gaussians) == encode_gaussians(l2.gaussians), "lift");

    SceneBundle scene = s1.scene;
    scene.gaussians = l1.gaussians;
    auto ra = config.refine, rb = config.refine;
    ra.workers = 1;
    rb.workers = 0;
    Refiner<float> straight(scene, ra), again(scene, rb);
    straight.run();
    again.run();
    same(straight.checkpoint_bytes() == again.checkpoint_bytes(), "refine");

    Refiner<float> first(scene, ra);
    first.run_until(11);
    first.save_checkpoint(dir.path / "ckpt.bin");
    Refiner<float> resumed(scene, ra);
    resumed.load_checkpoint(dir.path / "ckpt.bin");
    resumed.run();
    same(straight.checkpoint_bytes() == resumed.checkpoint_bytes(), "refine resume");

    const auto merged = straight.merged_gaussians();
    same(encode_gaussians(merged) == encode_gaussians(resumed.merged_gaussians()), "merged materials");
    const auto &h = s1.held_out;
    const auto t1 = evaluate_relighting(h.ground_truth, merged, h.views, h.envs, h.env_names, 1);
    const auto t2 = evaluate_relighting(h.ground_truth, merged, h.views, h.envs, h.env_names, 0);
    same(t1.entries_csv() == t2.entries_csv(), "eval");
    const auto img1 = render_pbr(h.views[0], merged, merged_materials(merged), h.envs[0], config.refine.composite);
    const auto img2 = render_pbr(h.views[0], merged, merged_materials(merged), h.envs[0], config.refine.composite);
    same(img1 == img2, "relight");

    std::string bad;
    for (const auto &d : diffs) bad += (bad.empty() ? "" : ", ") + d;
    return {diffs.empty(), diffs.empty() ? "synth, lift, refine, checkpoint resume, eval and relight are bit-identical across runs and worker counts"
                                         : "differs: " + bad};
}

} // namespace

int main(int argc, char **argv) {
    std::set<int> only;
    for (int i = 1; i < argc; ++i) {
        const std::string arg = argv[i];
        if (arg == "--only" && i + 1 < argc) {
            std::stringstream ss(argv[++i]);
            std::string item;
            while (std::getline(ss, item, ',')) only.insert(std::stoi(item));
        } else {
            std::fprintf(stderr, "usage: %s [--only 1,2,...]\n", argv[0]);
            return 2;
        }
    }
    auto wanted = [&](int n) { return only.empty() || only.count(n) > 0; };

    set_log_sink([](LogLevel level, const std::string &msg) {
        if (level >= LogLevel::warn) std::fprintf(stderr, "  %s\n", msg.c_str());
    });

    int failures = 0;
    auto report = [&](int n, const Outcome &o) {
        std::printf("%s criterion %d: %s\n", o.pass ? "PASS" : "FAIL", n, o.detail.c_str());
        std::fflush(stdout);
        failures += !o.pass;
    };
    auto guarded = [&](int n, const std::function<Outcome()> &fn) {
        if (!wanted(n)) return;
        try {
            report(n, fn());
        } catch (const std::exception &e) {
            report(n, {false, std::string("threw: ") + e.what()});
        }
    };

    guarded(1, criterion_1);
    guarded(2, criterion_2);
    guarded(3, criterion_3);
    guarded(4, criterion_4);
    guarded(5, criterion_5);
    if (wanted(6) || wanted(7)) {
        std::vector<SeedRun> runs;
        std::string error;
        try {
            runs = run_benchmark_seeds();
        } catch (const std::exception &e) {
            error = e.what();
        }
        guarded(6, [&] { return error.empty() ? criterion_6(runs) : Outcome{false, "threw: " + error}; });
        guarded(7, [&] { return error.empty() ? criterion_7(runs) : Outcome{false, "threw: " + error}; });
    }
    guarded(8, criterion_8);
    guarded(9, criterion_9);
    guarded(10, criterion_10);
    return failures == 0 ? 0 : 1;
}
