#pragma once

// Pipeline configuration files, benchmark persistence and the variant
// ablation, shared by the command-line tool and the acceptance suite.

#include "matlift/refinement.hpp"
#include "matlift/scene_io.hpp"
#include "matlift/synth.hpp"

#include <chrono>
#include <functional>

namespace matlift {

struct PipelineConfig {
    SceneSpec scene = default_scene_spec();
    CorruptionConfig corruption;
    LiftConfig lift;
    RefineConfig refine;

    PipelineConfig() { refine.iterations = 2000; } // desk-scale default

    void validate() const {
        scene.validate();
        corruption.validate();
        if (lift.supersample < 1) throw InvalidParameter("lift: supersample must be >= 1");
        if (!(lift.hit_threshold > 0.0 && lift.hit_threshold < 1.0)) throw InvalidParameter("lift: hit_threshold must lie in (0,1)");
        if (!(lift.falloff > 0.0)) throw InvalidParameter("lift: falloff must be positive");
        if (!(lift.min_transmittance >= 0.0 && lift.min_transmittance < 1.0))
            throw InvalidParameter("lift: min_transmittance must lie in [0,1)");
        refine.validate();
    }
};

inline nlohmann::json lift_to_json(const LiftConfig &c) {
    return {{"supersample", c.supersample},
            {"hit_threshold", c.hit_threshold},
            {"falloff", c.falloff},
            {"min_transmittance", c.min_transmittance}};
}

inline LiftConfig lift_from_json(const nlohmann::json &j, LiftConfig c = {}) {
    static const std::vector<std::string> known = {"supersample", "hit_threshold", "falloff", "min_transmittance"};
    detail::reject_unknown(j, known, "lift.", "config");
    detail::read_field(j, "supersample", c.supersample, "lift.", "config");
    detail::read_field(j, "hit_threshold", c.hit_threshold, "lift.", "config");
    detail::read_field(j, "falloff", c.falloff, "lift.", "config");
    detail::read_field(j, "min_transmittance", c.min_transmittance, "lift.", "config");
    return c;
}

inline nlohmann::json refine_to_json(const RefineConfig &c) {
    return {{"iterations", c.iterations},
            {"lr_merger", c.lr_merger},
            {"lr_env", c.lr_env},
            {"lr_normal", c.lr_normal},
            {"lambda_photo", c.lambda_photo},
            {"weight_material_loss", c.weight_material_loss},
            {"seed", c.seed},
            {"variant", variant_name(c.variant)},
            {"pe_levels", c.pe_levels},
            {"env_height", c.env_height},
            {"env_width", c.env_width},
            {"env_init", c.env_init},
            {"refine_normals", c.refine_normals},
            {"coverage_threshold", c.coverage_threshold},
            {"composite",
             {{"hit_threshold", c.composite.hit_threshold},
              {"falloff", c.composite.falloff},
              {"min_transmittance", c.composite.min_transmittance}}}};
}

inline RefineConfig refine_from_json(const nlohmann::json &j, RefineConfig c = {}) {
    static const std::vector<std::string> known = {"iterations", "lr_merger",  "lr_env",     "lr_normal",
                                                   "lambda_photo", "weight_material_loss", "seed", "variant",
                                                   "pe_levels",  "env_height", "env_width",  "env_init",
                                                   "refine_normals", "coverage_threshold", "composite"};
    detail::reject_unknown(j, known, "refine.", "config");
    detail::read_field(j, "iterations", c.iterations, "refine.", "config");
    detail::read_field(j, "lr_merger", c.lr_merger, "refine.", "config");
    detail::read_field(j, "lr_env", c.lr_env, "refine.", "config");
    detail::read_field(j, "lr_normal", c.lr_normal, "refine.", "config");
    detail::read_field(j, "lambda_photo", c.lambda_photo, "refine.", "config");
    detail::read_field(j, "weight_material_loss", c.weight_material_loss, "refine.", "config");
    detail::read_field(j, "seed", c.seed, "refine.", "config");
    std::string variant = variant_name(c.variant);
    detail::read_field(j, "variant", variant, "refine.", "config");
    c.variant = parse_variant(variant);
    detail::read_field(j, "pe_levels", c.pe_levels, "refine.", "config");
    detail::read_field(j, "env_height", c.env_height, "refine.", "config");
    detail::read_field(j, "env_width", c.env_width, "refine.", "config");
    detail::read_field(j, "env_init", c.env_init, "refine.", "config");
    detail::read_field(j, "refine_normals", c.refine_normals, "refine.", "config");
    detail::read_field(j, "coverage_threshold", c.coverage_threshold, "refine.", "config");
    if (j.contains("composite")) {
        static const std::vector<std::string> comp = {"hit_threshold", "falloff", "min_transmittance"};
        const auto &cj = j["composite"];
        detail::reject_unknown(cj, comp, "refine.composite.", "config");
        detail::read_field(cj, "hit_threshold", c.composite.hit_threshold, "refine.composite.", "config");
        detail::read_field(cj, "falloff", c.composite.falloff, "refine.composite.", "config");
        detail::read_field(cj, "min_transmittance", c.composite.min_transmittance, "refine.composite.", "config");
    }
    return c;
}

inline nlohmann::json config_to_json(const PipelineConfig &c) {
    return {{"scene", spec_to_json(c.scene)},
            {"corruption", corruption_to_json(c.corruption)},
            {"lift", lift_to_json(c.lift)},
            {"refine", refine_to_json(c.refine)}};
}

/// Sections missing from `j` keep their defaults; unknown sections and fields are rejected.
inline PipelineConfig config_from_json(const nlohmann::json &j) {
    static const std::vector<std::string> known = {"scene", "corruption", "lift", "refine"};
    detail::reject_unknown(j, known, "", "config");
    PipelineConfig c;
    if (j.contains("scene")) c.scene = spec_from_json(j["scene"]);
    if (j.contains("corruption")) c.corruption = corruption_from_json(j["corruption"]);
    if (j.contains("lift")) c.lift = lift_from_json(j["lift"], c.lift);
    if (j.contains("refine")) c.refine = refine_from_json(j["refine"], c.refine);
    c.validate();
    return c;
}

inline PipelineConfig load_config(const std::filesystem::path &path) {
    const auto bytes = detail::read_bytes(path);
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(bytes.begin(), bytes.end());
    } catch (const nlohmann::json::parse_error &e) {
        throw ParseError("config " + path.string() + ": " + e.what(), e.byte);
    }
    return config_from_json(j);
}

// ---------------------------------------------------------------------------
// Synthetic scenes

/// Ground truth kept aside for evaluation.
struct HeldOut {
    std::vector<GaussianPrimitive> ground_truth; // reference materials set
    std::vector<Camera> views;
    std::vector<EnvironmentMap> envs;
    std::vector<std::string> env_names;
};

struct SyntheticScene {
    SceneBundle scene; // training views with corrupted predictor maps, no reference materials
    HeldOut held_out;
    std::vector<MaterialMaps> gt_maps;
};

inline SyntheticScene make_synthetic(const PipelineConfig &config, std::uint64_t seed, int workers = 0) {
    config.validate();
    Benchmark bench = generate_scene(config.scene, seed, workers);
    const auto gt = render_ground_truth(bench.scene.gaussians, bench.scene.cameras, bench.scene.env, workers);
    SyntheticScene out;
    out.gt_maps = *bench.scene.material_maps;
    out.held_out = {bench.scene.gaussians, bench.held_out_views, bench.held_out_envs, bench.held_out_env_names};
    out.scene = std::move(bench.scene);
    out.scene.material_maps = oracle_predict(out.gt_maps, gt.normals, gt.alpha, config.corruption, seed);
    for (auto &g : out.scene.gaussians) g.reference.reset();
    return out;
}

inline void save_held_out(const HeldOut &h, const std::filesystem::path &dir) {
    std::filesystem::create_directories(dir);
    write_gaussians(dir / "gaussians_gt.bin", h.ground_truth);
    nlohmann::json cams = nlohmann::json::array();
    for (const auto &c : h.views) cams.push_back(detail::camera_to_json(c));
    nlohmann::json envs = nlohmann::json::array();
    for (std::size_t e = 0; e < h.envs.size(); ++e) {
        const std::string name = e < h.env_names.size() ? h.env_names[e] : "env" + std::to_string(e);
        write_pfm(dir / ("env_" + name + ".pfm"), h.envs[e].to_image());
        envs.push_back({{"name", name}, {"file", "env_" + name + ".pfm"}});
    }
    const nlohmann::json manifest{{"format", "matlift-heldout"}, {"version", kSceneFormatVersion},
                                  {"gaussians", "gaussians_gt.bin"}, {"views", cams}, {"envs", envs}};
    detail::write_text_atomic(dir / "heldout.json", manifest.dump(2) + "\n");
}

inline HeldOut load_held_out(const std::filesystem::path &dir) {
    const auto m = read_manifest(dir / "heldout.json");
    HeldOut h;
    try {
        if (m.at("format").get<std::string>() != "matlift-heldout") throw ValidationError("held-out: unknown format tag");
        if (m.at("version").get<int>() != kSceneFormatVersion) throw VersionMismatch("held-out: unsupported version");
        h.ground_truth = read_gaussians(dir / m.at("gaussians").get<std::string>());
        for (const auto &c : m.at("views")) h.views.push_back(detail::camera_from_json(c));
        for (const auto &e : m.at("envs")) {
            h.env_names.push_back(e.at("name").get<std::string>());
            h.envs.push_back(EnvironmentMap::from_image(read_pfm(dir / e.at("file").get<std::string>())));
        }
    } catch (const nlohmann::json::exception &e) {
        throw ValidationError(std::string("held-out manifest: ") + e.what());
    }
    for (const auto &g : h.ground_truth)
        if (!g.reference) throw ValidationError("held-out: ground-truth Gaussians lack reference materials");
    return h;
}

// ---------------------------------------------------------------------------
// Ablation

inline std::string loss_csv(std::span<const LossReport> history) {
    std::string out = "step,view,l_image,l_3dgs,total,image_basecolor,image_roughness,image_metallic,photo_l1,photo_ssim\n";
    char buf[512];
    for (const auto &r : history) {
        std::snprintf(buf, sizeof buf, "%llu,%zu,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g\n",
                      static_cast<unsigned long long>(r.step), r.view, r.l_image, r.l_3dgs, r.total, r.image_channels[0],
                      r.image_channels[1], r.image_channels[2], r.photo_l1, r.photo_ssim);
        out += buf;
    }
    return out;
}

struct VariantOutcome {
    Variant variant = Variant::full;
    MetricTable table;
    double max_metallic = 0.0; // over the held-out views
    double seconds = 0.0;
    RefineResult result;
};

struct AblationReport {
    std::vector<VariantOutcome> outcomes;

    const VariantOutcome &at(Variant v) const {
        for (const auto &o : outcomes)
            if (o.variant == v) return o;
        throw InvalidParameter(std::string("ablation: variant '") + variant_name(v) + "' was not run");
    }

    std::string csv() const {
        std::string out = "variant,task,psnr,ssim\n";
        char buf[256];
        for (const auto &o : outcomes)
            for (const auto &r : o.table.rows) {
                std::snprintf(buf, sizeof buf, "%s,%s,%s,%.6f\n", variant_name(o.variant), r.task.c_str(),
                              is_infinite_psnr(r.psnr) ? "inf" : std::to_string(r.psnr).c_str(), r.ssim);
                out += buf;
            }
        return out;
    }

    std::string summary() const {
        std::string out = "variant           Relighting PSNR/SSIM   BaseColor PSNR/SSIM   seconds\n";
        char buf[256];
        for (const auto &o : outcomes) {
            const auto &rl = o.table.row("Relighting");
            const auto &bc = o.table.row("BaseColor");
            std::snprintf(buf, sizeof buf, "%-16s  %8.3f / %.4f      %8.3f / %.4f   %7.1f\n", variant_name(o.variant), rl.psnr,
                          rl.ssim, bc.psnr, bc.ssim, o.seconds);
            out += buf;
        }
        return out;
    }
};

using AblationProgress = std::function<void(Variant, const LossReport &)>;

/// Refines the lifted scene once per variant (same seed) and evaluates each on the held-out data.
inline AblationReport run_ablation(const SceneBundle &lifted, const HeldOut &held_out, const RefineConfig &base,
                                   std::span<const Variant> variants, int workers = 0,
                                   const AblationProgress &progress = {}) {
    AblationReport report;
    for (Variant v : variants) {
        const auto start = std::chrono::steady_clock::now();
        RefineConfig config = base;
        config.variant = v;
        config.workers = workers;
        Refiner<float> refiner(lifted, config);
        if (v != Variant::proj_average)
            refiner.run([&](const LossReport &r) {
                if (progress) progress(v, r);
            });
        VariantOutcome o;
        o.variant = v;
        o.result = {refiner.merged_gaussians(), refiner.environment(), refiner.history()};
        o.table = evaluate_relighting(held_out.ground_truth, o.result.gaussians, held_out.views, held_out.envs,
                                      held_out.env_names, workers);
        o.max_metallic = max_metallic(o.result.gaussians, held_out.views, workers);
        o.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        report.outcomes.push_back(std::move(o));
    }
    return report;
}

} // namespace matlift
