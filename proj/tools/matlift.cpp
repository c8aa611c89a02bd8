// matlift: command-line driver for the material lifting pipeline.
//
//   matlift synth   --out DIR [--config F] [--seed N]
//   matlift lift    DIR [--supersample N]
//   matlift refine  DIR [--variant V] [--iterations N] [--seed N] [--checkpoint-every K] [--resume] [--stop-after N]
//   matlift relight DIR --env F [--views LIST] [--variant V | --materials reference] [--out DIR]
//   matlift eval    DIR [--variant V]
//   matlift ablate  DIR [--iterations N] [--seed N]

#include "matlift/pipeline.hpp"
#include "run_manifest.hpp"

#include <CLI11.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include <cstdlib>
#include <iostream>
#include <optional>

#ifndef MATLIFT_VERSION
#define MATLIFT_VERSION "0.0.0"
#endif

namespace {

using namespace matlift;
using matlift::cli::RunRecorder;
namespace fs = std::filesystem;
using json = nlohmann::json;

struct Options {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string variant;
    std::optional<int> supersample;
    std::optional<int> iterations;
    int workers = 0;
    std::string out;
    std::string scene;
    // refine
    int checkpoint_every = 0;
    bool resume = false;
    std::optional<std::uint64_t> stop_after;
    // relight
    std::string env;
    std::string views = "heldout";
    std::string materials = "merged";
};

std::vector<std::string> g_argv;

void setup_logging() {
    auto logger = spdlog::stderr_color_mt("matlift");
    spdlog::set_default_logger(logger);
    spdlog::set_pattern("[%H:%M:%S] [%^%l%$] %v");
    spdlog::set_level(spdlog::level::info);
    if (const char *env = std::getenv("MATLIFT_LOG")) {
        const auto level = spdlog::level::from_str(env);
        if (level == spdlog::level::off && std::string(env) != "off")
            spdlog::warn("MATLIFT_LOG='{}' is not a log level, keeping 'info'", env);
        else
            spdlog::set_level(level);
    }
    set_log_sink([](LogLevel level, const std::string &msg) {
        switch (level) {
        case LogLevel::debug: spdlog::debug("{}", msg); break;
        case LogLevel::info: spdlog::info("{}", msg); break;
        case LogLevel::warn: spdlog::warn("{}", msg); break;
        case LogLevel::error: spdlog::error("{}", msg); break;
        }
    });
}

/// --config (a config file or a run manifest), else the scene's config.json, else defaults;
/// then flag overrides.
PipelineConfig resolve_config(const Options &o, const fs::path &scene_dir, std::uint64_t *seed_out = nullptr) {
    PipelineConfig config;
    std::uint64_t seed = 0;
    fs::path source;
    if (!o.config.empty()) source = o.config;
    else if (!scene_dir.empty() && fs::exists(scene_dir / "config.json")) source = scene_dir / "config.json";
    if (!source.empty()) {
        if (!fs::exists(source)) throw ValidationError("config file not found: " + source.string());
        const auto bytes = detail::read_bytes(source);
        json j;
        try {
            j = json::parse(bytes.begin(), bytes.end());
        } catch (const json::parse_error &e) {
            throw ParseError("config " + source.string() + ": " + e.what(), e.byte);
        }
        if (j.is_object() && j.value("format", "") == "matlift-run") {
            seed = j.at("seed").get<std::uint64_t>();
            j = j.at("config");
        }
        config = config_from_json(j);
    }
    if (o.seed) seed = *o.seed;
    if (o.supersample) config.lift.supersample = *o.supersample;
    if (o.iterations) config.refine.iterations = static_cast<std::uint64_t>(*o.iterations);
    if (!o.variant.empty()) config.refine.variant = parse_variant(o.variant);
    if (o.seed) config.refine.seed = *o.seed;
    config.lift.workers = o.workers;
    config.refine.workers = o.workers;
    config.refine.composite.workers = o.workers;
    config.validate();
    if (seed_out) *seed_out = seed;
    return config;
}

void require_dir(const fs::path &dir) {
    if (!fs::is_directory(dir)) throw ValidationError("scene directory not found: " + dir.string());
}

SceneBundle load_lifted(const fs::path &dir, RunRecorder &rec) {
    for (const char *f : {"scene.json", "gaussians.bin", "environment.pfm", "lifted.bin"})
        if (!fs::exists(dir / f)) throw ValidationError(std::string("missing ") + (dir / f).string() + (std::string(f) == "lifted.bin" ? " (run 'matlift lift' first)" : ""));
    rec.input(dir / "scene.json");
    rec.input(dir / "lifted.bin");
    SceneBundle scene = load_scene(dir);
    for (const auto &p : fs::recursive_directory_iterator(dir / "images")) if (p.is_regular_file()) rec.input(p.path());
    if (fs::exists(dir / "maps"))
        for (const auto &p : fs::recursive_directory_iterator(dir / "maps")) if (p.is_regular_file()) rec.input(p.path());
    scene.gaussians = read_gaussians(dir / "lifted.bin");
    return scene;
}

HeldOut load_held_out_checked(const fs::path &dir, RunRecorder &rec) {
    const fs::path h = dir / "heldout";
    if (!fs::exists(h / "heldout.json")) throw ValidationError("missing " + (h / "heldout.json").string() + " (scene was not produced by 'matlift synth')");
    for (const auto &p : fs::directory_iterator(h)) if (p.is_regular_file()) rec.input(p.path());
    return load_held_out(h);
}

// ---------------------------------------------------------------------------

int cmd_synth(const Options &o) {
    if (o.out.empty()) throw ValidationError("synth: --out is required");
    std::uint64_t seed = 0;
    const PipelineConfig config = resolve_config(o, {}, &seed);
    const fs::path dir = o.out;
    RunRecorder rec("synth", dir, g_argv);
    if (!o.config.empty()) rec.input(fs::absolute(o.config));
    const auto synth = rec.stage("generate", [&] { return make_synthetic(config, seed, o.workers); });
    rec.stage("write", [&] {
        save_scene(synth.scene, dir);
        save_held_out(synth.held_out, dir / "heldout");
        fs::create_directories(dir / "gt_maps");
        for (std::size_t v = 0; v < synth.gt_maps.size(); ++v) write_material_maps(dir / "gt_maps", v, synth.gt_maps[v]);
        detail::write_text_atomic(dir / "config.json", config_to_json(config).dump(2) + "\n");
        return 0;
    });
    rec.output_tree(dir);
    rec.write("synth", config_to_json(config), seed, MATLIFT_VERSION);
    spdlog::info("synth: {} Gaussians, {} training views, {} held-out views -> {}", synth.scene.gaussians.size(),
                 synth.scene.view_count(), synth.held_out.views.size(), dir.string());
    return 0;
}

int cmd_lift(const Options &o) {
    const fs::path dir = o.scene;
    require_dir(dir);
    std::uint64_t seed = 0;
    const PipelineConfig config = resolve_config(o, dir, &seed);
    RunRecorder rec("lift", dir, g_argv);
    if (!fs::exists(dir / "scene.json")) throw ValidationError("missing " + (dir / "scene.json").string());
    const json manifest = read_manifest(dir / "scene.json");
    std::vector<std::string> absent;
    if (manifest.contains("views"))
        for (std::size_t v = 0; v < manifest["views"].size(); ++v) {
            const auto &view = manifest["views"][v];
            for (const char *k : {"basecolor", "roughness", "metallic"}) {
                const fs::path p = view.contains("material_maps") ? dir / view["material_maps"].value(k, "")
                                                                  : dir / "maps" / (detail::view_stem(v) + "_" + k + ".png");
                if (!view.contains("material_maps") || !fs::exists(p)) absent.push_back(p.string());
            }
        }
    if (!absent.empty()) {
        std::string list;
        for (const auto &p : absent) list += "\n  " + p;
        throw ValidationError("lift: material maps missing:" + list);
    }
    SceneBundle scene = rec.stage("load", [&] { return load_scene(dir); });
    rec.input(dir / "scene.json");
    rec.input(dir / "gaussians.bin");
    for (const auto &p : fs::directory_iterator(dir / "maps")) if (p.is_regular_file()) rec.input(p.path());
    const LiftResult lifted = rec.stage("lift", [&] { return lift_scene(scene, config.lift); });
    const double culled_pct = 100.0 * lifted.culled / std::max<std::size_t>(1, scene.gaussians.size());
    rec.stage("write", [&] {
        write_gaussians(dir / "lifted.bin", lifted.gaussians);
        const json summary{{"input_gaussians", scene.gaussians.size()},
                           {"kept", lifted.gaussians.size()},
                           {"culled", lifted.culled},
                           {"supersample", config.lift.supersample}};
        detail::write_text_atomic(dir / "lift.json", summary.dump(2) + "\n");
        return 0;
    });
    rec.output(dir / "lifted.bin");
    rec.output(dir / "lift.json");
    rec.write("lift", config_to_json(config), seed, MATLIFT_VERSION);
    spdlog::info("lift: kept {} of {} Gaussians, culled {} ({:.2f}%)", lifted.gaussians.size(), scene.gaussians.size(),
                 lifted.culled, culled_pct);
    return 0;
}

int cmd_refine(const Options &o) {
    const fs::path dir = o.scene;
    require_dir(dir);
    std::uint64_t seed = 0;
    const PipelineConfig config = resolve_config(o, dir, &seed);
    const std::string variant = variant_name(config.refine.variant);
    const fs::path out = dir / "refine" / variant;
    RunRecorder rec("refine", dir, g_argv);
    const SceneBundle scene = rec.stage("load", [&] { return load_lifted(dir, rec); });
    fs::create_directories(out);

    Refiner<float> refiner = rec.stage("setup", [&] { return Refiner<float>(scene, config.refine); });
    const fs::path checkpoint = out / "checkpoint.bin";
    if (o.resume && fs::exists(checkpoint)) {
        rec.input(checkpoint);
        refiner.load_checkpoint(checkpoint);
        spdlog::info("refine: resumed {} at step {}", variant, refiner.steps_done());
    }
    const std::uint64_t total = config.refine.iterations;
    const std::uint64_t stop = o.stop_after ? std::min<std::uint64_t>(*o.stop_after, total) : total;
    if (config.refine.variant != Variant::proj_average)
        rec.stage("train", [&] {
            refiner.run_until(stop, [&](const LossReport &r) {
                const std::uint64_t done = r.step + 1;
                if (done % 100 == 0 || done == total)
                    spdlog::info("refine[{}] step {}/{}  L_image {:.5f}  L_3dgs {:.5f}  total {:.5f}", variant, done, total,
                                 r.l_image, r.l_3dgs, r.total);
                if (o.checkpoint_every > 0 && done % static_cast<std::uint64_t>(o.checkpoint_every) == 0 && done < stop)
                    refiner.save_checkpoint(checkpoint);
            });
            return 0;
        });
    const bool finished = config.refine.variant == Variant::proj_average || refiner.steps_done() >= total;
    rec.stage("write", [&] {
        refiner.save_checkpoint(checkpoint);
        detail::write_text_atomic(out / "loss.csv", loss_csv(refiner.history()));
        if (finished) {
            write_gaussians(out / "merged.bin", refiner.merged_gaussians());
            write_pfm(out / "environment.pfm", refiner.environment().to_image());
            write_png(out / "environment.png", encode_display(refiner.environment().to_image()), false);
        }
        return 0;
    });
    for (const auto &p : fs::directory_iterator(out)) if (p.is_regular_file()) rec.output(p.path());
    rec.write("refine_" + variant, config_to_json(config), config.refine.seed, MATLIFT_VERSION);
    if (finished)
        spdlog::info("refine: {} finished after {} steps -> {}", variant, refiner.steps_done(), out.string());
    else
        spdlog::info("refine: {} stopped at step {} of {}; continue with --resume", variant, refiner.steps_done(), total);
    return 0;
}

std::vector<Camera> select_views(const std::string &spec, const SceneBundle &scene, const HeldOut *held_out) {
    if (spec == "train") return scene.cameras;
    if (spec == "heldout") {
        if (!held_out) throw ValidationError("relight: --views heldout needs the scene's heldout/ directory");
        return held_out->views;
    }
    std::vector<Camera> out;
    std::stringstream ss(spec);
    std::string item;
    while (std::getline(ss, item, ',')) {
        std::size_t idx = 0;
        try {
            idx = std::stoul(item);
        } catch (const std::exception &) {
            throw ValidationError("relight: --views expects 'train', 'heldout' or comma-separated indices, got '" + spec + "'");
        }
        if (idx >= scene.cameras.size()) throw ValidationError("relight: view index " + item + " out of range");
        out.push_back(scene.cameras[idx]);
    }
    if (out.empty()) throw ValidationError("relight: no views selected");
    return out;
}

int cmd_relight(const Options &o) {
    const fs::path dir = o.scene;
    require_dir(dir);
    std::uint64_t seed = 0;
    const PipelineConfig config = resolve_config(o, dir, &seed);
    if (o.env.empty()) throw ValidationError("relight: --env is required");
    if (!fs::exists(o.env)) throw ValidationError("relight: environment file not found: " + o.env);
    RunRecorder rec("relight", dir, g_argv);
    const EnvironmentMap env = EnvironmentMap::from_image(read_pfm(o.env));
    rec.input(fs::absolute(o.env));
    const SceneBundle scene = load_scene(dir);
    std::optional<HeldOut> held_out;
    if (fs::exists(dir / "heldout" / "heldout.json")) held_out = load_held_out_checked(dir, rec);

    std::vector<GaussianPrimitive> gaussians;
    std::vector<MaterialSample> materials;
    std::string source;
    if (o.materials == "reference") {
        if (!held_out) throw ValidationError("relight: --materials reference needs the scene's heldout/ directory");
        gaussians = held_out->ground_truth;
        materials = reference_materials(gaussians);
        source = "reference";
    } else if (o.materials == "merged") {
        const std::string variant = variant_name(config.refine.variant);
        const fs::path merged = dir / "refine" / variant / "merged.bin";
        if (!fs::exists(merged)) throw ValidationError("relight: missing " + merged.string() + " (run 'matlift refine' first)");
        rec.input(merged);
        gaussians = read_gaussians(merged);
        materials = merged_materials(gaussians);
        source = variant;
    } else {
        throw ValidationError("relight: --materials must be 'merged' or 'reference'");
    }
    const auto views = select_views(o.views, scene, held_out ? &*held_out : nullptr);
    const fs::path out = o.out.empty() ? dir / "relight" / (fs::path(o.env).stem().string() + "_" + source) : fs::path(o.out);
    fs::create_directories(out);
    CompositeConfig composite = config.refine.composite;
    composite.workers = o.workers;
    rec.stage("render", [&] {
        for (std::size_t v = 0; v < views.size(); ++v) {
            const Image img = render_pbr(views[v], gaussians, materials, env, composite);
            const std::string stem = detail::view_stem(v);
            write_pfm(out / (stem + ".pfm"), img);
            write_png(out / (stem + ".png"), encode_display(img), false);
        }
        return 0;
    });
    for (const auto &p : fs::directory_iterator(out)) if (p.is_regular_file() && fs::path(p).string().find(dir.string()) == 0) rec.output(p.path());
    rec.write("relight_" + fs::path(o.env).stem().string() + "_" + source, config_to_json(config), seed, MATLIFT_VERSION);
    spdlog::info("relight: {} views under {} -> {}", views.size(), o.env, out.string());
    return 0;
}

int cmd_eval(const Options &o) {
    const fs::path dir = o.scene;
    require_dir(dir);
    std::uint64_t seed = 0;
    const PipelineConfig config = resolve_config(o, dir, &seed);
    const std::string variant = variant_name(config.refine.variant);
    RunRecorder rec("eval", dir, g_argv);
    const HeldOut held_out = load_held_out_checked(dir, rec);
    const fs::path merged = dir / "refine" / variant / "merged.bin";
    if (!fs::exists(merged)) throw ValidationError("eval: missing " + merged.string() + " (run 'matlift refine --variant " + variant + "' first)");
    rec.input(merged);
    const auto gaussians = read_gaussians(merged);
    const MetricTable table = rec.stage("evaluate", [&] {
        return evaluate_relighting(held_out.ground_truth, gaussians, held_out.views, held_out.envs, held_out.env_names, o.workers);
    });
    const fs::path out = dir / "eval" / variant;
    fs::create_directories(out);
    detail::write_text_atomic(out / "metrics.csv", table.csv());
    detail::write_text_atomic(out / "entries.csv", table.entries_csv());
    detail::write_text_atomic(out / "summary.txt", table.summary());
    for (const auto &p : fs::directory_iterator(out)) if (p.is_regular_file()) rec.output(p.path());
    rec.write("eval_" + variant, config_to_json(config), seed, MATLIFT_VERSION);
    std::cout << variant << "\n" << table.summary();
    return 0;
}

int cmd_ablate(const Options &o) {
    const fs::path dir = o.scene;
    require_dir(dir);
    std::uint64_t seed = 0;
    const PipelineConfig config = resolve_config(o, dir, &seed);
    RunRecorder rec("ablate", dir, g_argv);
    const SceneBundle scene = rec.stage("load", [&] { return load_lifted(dir, rec); });
    const HeldOut held_out = load_held_out_checked(dir, rec);
    const AblationReport report = rec.stage("ablate", [&] {
        return run_ablation(scene, held_out, config.refine, kVariants, o.workers, [&](Variant v, const LossReport &r) {
            if ((r.step + 1) % 500 == 0) spdlog::info("ablate[{}] step {}/{}", variant_name(v), r.step + 1, config.refine.iterations);
        });
    });
    const fs::path out = dir / "ablation";
    fs::create_directories(out);
    detail::write_text_atomic(out / "table.csv", report.csv());
    detail::write_text_atomic(out / "summary.txt", report.summary());
    for (const auto &v : report.outcomes)
        detail::write_text_atomic(out / (std::string("loss_") + variant_name(v.variant) + ".csv"), loss_csv(v.result.history));
    for (const auto &p : fs::directory_iterator(out)) if (p.is_regular_file()) rec.output(p.path());
    rec.write("ablate", config_to_json(config), config.refine.seed, MATLIFT_VERSION);
    std::cout << report.summary();
    return 0;
}

} // namespace

int main(int argc, char **argv) {
    g_argv.assign(argv, argv + argc);
    setup_logging();

    CLI::App app{"matlift: lift per-view PBR material maps onto 3D Gaussians and refine them"};
    app.set_version_flag("--version", MATLIFT_VERSION);
    app.require_subcommand(1);
    Options o;

    auto common = [&](CLI::App *sub) {
        sub->add_option("--config", o.config, "Pipeline config JSON (or a run manifest to replay)");
        sub->add_option("--seed", o.seed, "Random seed");
        sub->add_option("--workers", o.workers, "Worker threads (0 = all cores)")->check(CLI::NonNegativeNumber);
    };
    auto scene_arg = [&](CLI::App *sub) { sub->add_option("scene", o.scene, "Scene directory")->required(); };

    auto *synth = app.add_subcommand("synth", "Generate a synthetic benchmark scene with corrupted predictor maps");
    common(synth);
    synth->add_option("--out", o.out, "Output scene directory")->required();

    auto *lift = app.add_subcommand("lift", "Lift per-view material maps onto the Gaussians");
    scene_arg(lift);
    common(lift);
    lift->add_option("--supersample", o.supersample, "Subrays per pixel side")->check(CLI::PositiveNumber);

    auto *refine = app.add_subcommand("refine", "Train the merger and environment map");
    scene_arg(refine);
    common(refine);
    refine->add_option("--variant", o.variant, "full, supervised_only, proj_average or no_softmax");
    refine->add_option("--iterations", o.iterations, "Refinement steps")->check(CLI::PositiveNumber);
    refine->add_option("--checkpoint-every", o.checkpoint_every, "Write a checkpoint every K steps")->check(CLI::NonNegativeNumber);
    refine->add_flag("--resume", o.resume, "Continue from the variant's checkpoint");
    refine->add_option("--stop-after", o.stop_after, "Stop after this many total steps (resume later)");

    auto *relight = app.add_subcommand("relight", "Render the scene under an environment map");
    scene_arg(relight);
    common(relight);
    relight->add_option("--env", o.env, "Environment map (PFM)")->required();
    relight->add_option("--views", o.views, "'train', 'heldout' or comma-separated training view indices");
    relight->add_option("--variant", o.variant, "Which refined variant to render");
    relight->add_option("--materials", o.materials, "'merged' (refined) or 'reference' (ground truth)");
    relight->add_option("--out", o.out, "Output directory");

    auto *eval = app.add_subcommand("eval", "Metric tables on the held-out views and environments");
    scene_arg(eval);
    common(eval);
    eval->add_option("--variant", o.variant, "Which refined variant to evaluate");

    auto *ablate = app.add_subcommand("ablate", "Refine and evaluate all four variants");
    scene_arg(ablate);
    common(ablate);
    ablate->add_option("--iterations", o.iterations, "Refinement steps per variant")->check(CLI::PositiveNumber);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp &e) {
        return app.exit(e);
    } catch (const CLI::CallForVersion &e) {
        return app.exit(e);
    } catch (const CLI::ParseError &e) {
        app.exit(e);
        return 2;
    }

    try {
        if (*synth) return cmd_synth(o);
        if (*lift) return cmd_lift(o);
        if (*refine) return cmd_refine(o);
        if (*relight) return cmd_relight(o);
        if (*eval) return cmd_eval(o);
        if (*ablate) return cmd_ablate(o);
    } catch (const NumericalError &e) {
        spdlog::error("{}", e.what());
        return 3;
    } catch (const Error &e) {
        spdlog::error("{}", e.what());
        return 2;
    } catch (const std::exception &e) {
        spdlog::error("{}", e.what());
        return 1;
    }
    return 0;
}
