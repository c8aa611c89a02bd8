#pragma once

// Synthetic benchmark: analytic shapes covered with surfel-like Gaussians,
// procedural sky environments, ground-truth renders through the production
// renderer, and a corruption oracle that mimics an inconsistent per-view
// material predictor.

#include "matlift/metrics.hpp"
#include "matlift/render.hpp"

#include <nlohmann/json.hpp>

#include <random>
#include <string>
#include <vector>

namespace matlift {

enum class ShapeKind { sphere, box };

/// One surface region with its ground-truth material. With stripes > 0 the
/// basecolor alternates with `alt_basecolor` in bands along world y.
struct Region {
    std::string name;
    ShapeKind shape = ShapeKind::sphere;
    Vec3 center = Vec3::Zero();
    Vec3 size = Vec3::Constant(0.5); // sphere: radius in x; box: half extents
    MaterialSample material{Vec3(0.7, 0.3, 0.2), 0.5, 0.0};
    Vec3 alt_basecolor = Vec3::Zero();
    double stripes = 0.0;

    double area() const {
        if (shape == ShapeKind::sphere) return 4.0 * kPi * size.x() * size.x();
        return 8.0 * (size.x() * size.y() + size.y() * size.z() + size.x() * size.z());
    }
    MaterialSample material_at(const Vec3 &p) const {
        MaterialSample m = material;
        if (stripes > 0.0 && std::sin(stripes * kPi * (p.y() - center.y())) < 0.0) m.basecolor = alt_basecolor;
        return m;
    }
};

/// Procedural sky: vertical gradient (ground / horizon / zenith) plus a sun lobe.
struct EnvPreset {
    std::string name;
    Vec3 zenith = Vec3(0.30, 0.40, 0.65);
    Vec3 horizon = Vec3(0.80, 0.80, 0.78);
    Vec3 ground = Vec3(0.22, 0.20, 0.18);
    Vec3 sun_direction = Vec3(0.5, 0.7, 0.3);
    Vec3 sun_color = Vec3(6.0, 5.4, 4.6);
    double sun_sharpness = 40.0;
};

inline EnvPreset env_preset(const std::string &name) {
    EnvPreset p;
    p.name = name;
    if (name == "day") return p;
    if (name == "sunset") {
        p.zenith = Vec3(0.25, 0.22, 0.45);
        p.horizon = Vec3(0.95, 0.55, 0.30);
        p.ground = Vec3(0.15, 0.12, 0.10);
        p.sun_direction = Vec3(-0.8, 0.15, -0.4);
        p.sun_color = Vec3(7.0, 3.6, 1.6);
        p.sun_sharpness = 30.0;
        return p;
    }
    if (name == "overcast") {
        p.zenith = Vec3(0.75, 0.78, 0.82);
        p.horizon = Vec3(0.65, 0.66, 0.68);
        p.ground = Vec3(0.25, 0.25, 0.25);
        p.sun_direction = Vec3(-0.2, 0.9, 0.5);
        p.sun_color = Vec3(1.2, 1.2, 1.2);
        p.sun_sharpness = 8.0;
        return p;
    }
    if (name == "studio") {
        p.zenith = Vec3(0.15, 0.15, 0.15);
        p.horizon = Vec3(0.35, 0.35, 0.38);
        p.ground = Vec3(0.08, 0.08, 0.08);
        p.sun_direction = Vec3(0.3, 0.4, -0.85);
        p.sun_color = Vec3(5.0, 5.0, 5.2);
        p.sun_sharpness = 20.0;
        return p;
    }
    throw InvalidParameter("environment preset: unknown name '" + name + "' (expected day, sunset, overcast or studio)");
}

inline EnvironmentMap procedural_env(const EnvPreset &preset, int height = 16, int width = 32) {
    EnvironmentMap env(height, width);
    const Vec3 sun = preset.sun_direction.normalized();
    for (int r = 0; r < height; ++r)
        for (int c = 0; c < width; ++c) {
            const Vec3 d = env.texel_direction(r, c);
            const double y = d.y();
            const Vec3 sky = y >= 0.0 ? Vec3((1.0 - y) * preset.horizon + y * preset.zenith)
                                      : Vec3((1.0 + y) * preset.horizon - y * preset.ground);
            const Vec3 rad = sky + preset.sun_color * std::exp(preset.sun_sharpness * (d.dot(sun) - 1.0));
            for (int k = 0; k < 3; ++k) env.at(r, c, k) = static_cast<float>(rad[k]);
        }
    return env;
}

struct SceneSpec {
    std::vector<Region> regions;
    int gaussian_count = 2000;
    int views = 16;
    int held_out_views = 4;
    int width = 64;
    int height = 64;
    double camera_distance = 3.2;
    double fov_y_deg = 40.0;
    double opacity = 0.95;
    double footprint = 1.1; // tangent scale relative to the mean surfel spacing
    double thickness = 0.1; // normal scale relative to the tangent scale
    std::string env = "day";
    std::vector<std::string> held_out_envs{"sunset", "overcast"};
    int env_height = 16;
    int env_width = 32;

    void validate() const {
        auto fail = [](const std::string &field, const std::string &why) {
            throw ValidationError("scene spec: field '" + field + "' " + why);
        };
        if (regions.empty()) fail("regions", "must list at least one region");
        if (gaussian_count < static_cast<int>(regions.size())) fail("gaussian_count", "must be >= the number of regions");
        if (views < 1) fail("views", "must be >= 1");
        if (held_out_views < 0) fail("held_out_views", "must be >= 0");
        if (width < 1 || height < 1) fail(width < 1 ? "width" : "height", "must be >= 1");
        if (!(camera_distance > 0.0)) fail("camera_distance", "must be positive");
        if (!(fov_y_deg > 0.0 && fov_y_deg < 180.0)) fail("fov_y_deg", "must lie in (0,180)");
        if (!(opacity > 0.0 && opacity <= 1.0)) fail("opacity", "must lie in (0,1]");
        if (!(footprint > 0.0)) fail("footprint", "must be positive");
        if (!(thickness > 0.0)) fail("thickness", "must be positive");
        if (env_height < 2 || env_width < 2) fail(env_height < 2 ? "env_height" : "env_width", "must be >= 2");
        for (std::size_t i = 0; i < regions.size(); ++i) {
            const auto &r = regions[i];
            const std::string at = "regions[" + std::to_string(i) + "]";
            if (!(r.size.minCoeff() > 0.0)) fail(at + ".size", "must be positive");
            if (!r.material.in_unit_range()) fail(at + ".material", "must lie in [0,1]");
            if (r.stripes < 0.0) fail(at + ".stripes", "must be >= 0");
        }
        env_preset(env);
        for (const auto &e : held_out_envs) env_preset(e);
    }
};

/// Default desk-scale layout: striped dielectric sphere, matte box, small metal ball.
inline SceneSpec default_scene_spec() {
    SceneSpec spec;
    Region sphere{"sphere", ShapeKind::sphere, Vec3(-0.4, 0.0, 0.0), Vec3::Constant(0.45),
                  {Vec3(0.75, 0.25, 0.20), 0.45, 0.0}, Vec3(0.90, 0.80, 0.35), 3.0};
    Region box{"box", ShapeKind::box, Vec3(0.45, -0.1, 0.1), Vec3(0.28, 0.38, 0.28),
               {Vec3(0.25, 0.45, 0.75), 0.7, 0.0}, Vec3::Zero(), 0.0};
    Region ball{"ball", ShapeKind::sphere, Vec3(0.45, 0.55, -0.1), Vec3::Constant(0.2),
                {Vec3(0.95, 0.80, 0.55), 0.3, 1.0}, Vec3::Zero(), 0.0};
    spec.regions = {sphere, box, ball};
    return spec;
}

/// Same layout with every region non-metallic.
inline SceneSpec dielectric_scene_spec() {
    auto spec = default_scene_spec();
    for (auto &r : spec.regions) r.material.metallic = 0.0;
    return spec;
}

// ---------------------------------------------------------------------------
// JSON

inline nlohmann::json vec3_json(const Vec3 &v) { return nlohmann::json::array({v.x(), v.y(), v.z()}); }

inline Vec3 json_vec3(const nlohmann::json &j, const std::string &field) {
    if (!j.is_array() || j.size() != 3) throw ValidationError("scene spec: field '" + field + "' must be a 3-element array");
    Vec3 v;
    for (int i = 0; i < 3; ++i) {
        if (!j[i].is_number()) throw ValidationError("scene spec: field '" + field + "' must contain numbers");
        v[i] = j[i].get<double>();
    }
    return v;
}

inline nlohmann::json spec_to_json(const SceneSpec &s) {
    nlohmann::json regions = nlohmann::json::array();
    for (const auto &r : s.regions)
        regions.push_back({{"name", r.name},
                           {"shape", r.shape == ShapeKind::sphere ? "sphere" : "box"},
                           {"center", vec3_json(r.center)},
                           {"size", vec3_json(r.size)},
                           {"basecolor", vec3_json(r.material.basecolor)},
                           {"roughness", r.material.roughness},
                           {"metallic", r.material.metallic},
                           {"alt_basecolor", vec3_json(r.alt_basecolor)},
                           {"stripes", r.stripes}});
    return {{"regions", regions},           {"gaussian_count", s.gaussian_count}, {"views", s.views},
            {"held_out_views", s.held_out_views}, {"width", s.width},             {"height", s.height},
            {"camera_distance", s.camera_distance}, {"fov_y_deg", s.fov_y_deg},   {"opacity", s.opacity},
            {"footprint", s.footprint},     {"thickness", s.thickness},           {"env", s.env},
            {"held_out_envs", s.held_out_envs}, {"env_height", s.env_height},    {"env_width", s.env_width}};
}

namespace detail {
template <class T>
void read_field(const nlohmann::json &j, const char *key, T &out, const std::string &prefix = "",
                const char *what = "scene spec") {
    if (!j.contains(key)) return;
    try {
        out = j.at(key).get<T>();
    } catch (const nlohmann::json::exception &) {
        throw ValidationError(std::string(what) + ": field '" + prefix + key + "' has the wrong type");
    }
}

inline void reject_unknown(const nlohmann::json &j, std::span<const std::string> known, const std::string &prefix,
                           const char *what) {
    if (!j.is_object()) throw ValidationError(std::string(what) + ": expected a JSON object");
    for (auto it = j.begin(); it != j.end(); ++it)
        if (std::find(known.begin(), known.end(), it.key()) == known.end())
            throw ValidationError(std::string(what) + ": field '" + prefix + it.key() + "' is not recognized");
}
} // namespace detail

/// Fields missing from `j` keep their defaults; unknown keys are rejected.
inline SceneSpec spec_from_json(const nlohmann::json &j) {
    static const std::vector<std::string> known = {"regions", "gaussian_count", "views", "held_out_views", "width", "height",
                                                   "camera_distance", "fov_y_deg", "opacity", "footprint", "thickness", "env",
                                                   "held_out_envs", "env_height", "env_width"};
    if (!j.is_object()) throw ValidationError("scene spec: expected a JSON object");
    for (auto it = j.begin(); it != j.end(); ++it)
        if (std::find(known.begin(), known.end(), it.key()) == known.end())
            throw ValidationError("scene spec: field '" + it.key() + "' is not recognized");
    SceneSpec s = default_scene_spec();
    detail::read_field(j, "gaussian_count", s.gaussian_count);
    detail::read_field(j, "views", s.views);
    detail::read_field(j, "held_out_views", s.held_out_views);
    detail::read_field(j, "width", s.width);
    detail::read_field(j, "height", s.height);
    detail::read_field(j, "camera_distance", s.camera_distance);
    detail::read_field(j, "fov_y_deg", s.fov_y_deg);
    detail::read_field(j, "opacity", s.opacity);
    detail::read_field(j, "footprint", s.footprint);
    detail::read_field(j, "thickness", s.thickness);
    detail::read_field(j, "env", s.env);
    detail::read_field(j, "held_out_envs", s.held_out_envs);
    detail::read_field(j, "env_height", s.env_height);
    detail::read_field(j, "env_width", s.env_width);
    if (j.contains("regions")) {
        if (!j["regions"].is_array()) throw ValidationError("scene spec: field 'regions' must be an array");
        s.regions.clear();
        for (std::size_t i = 0; i < j["regions"].size(); ++i) {
            const auto &rj = j["regions"][i];
            const std::string at = "regions[" + std::to_string(i) + "].";
            Region r;
            detail::read_field(rj, "name", r.name, at);
            std::string shape = "sphere";
            detail::read_field(rj, "shape", shape, at);
            if (shape == "sphere") r.shape = ShapeKind::sphere;
            else if (shape == "box") r.shape = ShapeKind::box;
            else throw ValidationError("scene spec: field '" + at + "shape' must be 'sphere' or 'box'");
            if (rj.contains("center")) r.center = json_vec3(rj["center"], at + "center");
            if (rj.contains("size")) r.size = json_vec3(rj["size"], at + "size");
            if (rj.contains("basecolor")) r.material.basecolor = json_vec3(rj["basecolor"], at + "basecolor");
            detail::read_field(rj, "roughness", r.material.roughness, at);
            detail::read_field(rj, "metallic", r.material.metallic, at);
            if (rj.contains("alt_basecolor")) r.alt_basecolor = json_vec3(rj["alt_basecolor"], at + "alt_basecolor");
            detail::read_field(rj, "stripes", r.stripes, at);
            s.regions.push_back(r);
        }
    }
    s.validate();
    return s;
}

// ---------------------------------------------------------------------------
// Scene generation

/// Rotation whose third column is `n`.
inline Quat frame_from_normal(const Vec3 &n) {
    const Vec3 helper = std::abs(n.x()) < 0.9 ? Vec3::UnitX() : Vec3::UnitY();
    const Vec3 t1 = n.cross(helper).normalized();
    const Vec3 t2 = n.cross(t1);
    Mat3 r;
    r.col(0) = t1;
    r.col(1) = t2;
    r.col(2) = n;
    return Quat(r).normalized();
}

/// Uniform point on the region surface with its outward normal.
inline std::pair<Vec3, Vec3> sample_surface(const Region &r, std::mt19937_64 &rng) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    if (r.shape == ShapeKind::sphere) {
        const double z = 2.0 * u(rng) - 1.0, phi = 2.0 * kPi * u(rng);
        const double s = std::sqrt(std::max(0.0, 1.0 - z * z));
        const Vec3 n(s * std::cos(phi), s * std::sin(phi), z);
        return {r.center + r.size.x() * n, n};
    }
    const Vec3 &e = r.size;
    const std::array<double, 3> face_area = {e.y() * e.z(), e.x() * e.z(), e.x() * e.y()};
    const double total = face_area[0] + face_area[1] + face_area[2];
    double pick = u(rng) * total;
    int axis = 0;
    while (axis < 2 && pick >= face_area[axis]) pick -= face_area[axis++];
    const double side = u(rng) < 0.5 ? -1.0 : 1.0;
    Vec3 local(2.0 * u(rng) - 1.0, 2.0 * u(rng) - 1.0, 2.0 * u(rng) - 1.0);
    local[axis] = side;
    Vec3 n = Vec3::Zero();
    n[axis] = side;
    return {r.center + local.cwiseProduct(e), n};
}

/// Cameras on a Fibonacci sphere around the origin; consecutive indices are far apart in azimuth.
inline std::vector<Camera> fibonacci_cameras(int count, double distance, double fov_y_deg, int w, int h, double phase = 0.0) {
    std::vector<Camera> cams;
    const double golden = kPi * (3.0 - std::sqrt(5.0));
    for (int i = 0; i < count; ++i) {
        const double y = 1.0 - 2.0 * (i + 0.5) / count;
        const double r = std::sqrt(std::max(0.0, 1.0 - y * y));
        const double phi = golden * i + phase;
        const Vec3 eye = distance * Vec3(r * std::cos(phi), 0.85 * y, r * std::sin(phi)).normalized();
        cams.push_back(Camera::look_at(eye, Vec3::Zero(), Vec3::UnitY(), fov_y_deg, w, h));
    }
    return cams;
}

struct GroundTruthViews {
    std::vector<Image> images;
    std::vector<MaterialMaps> maps;
    std::vector<Image> normals; // composited unit normals, zero where uncovered
    std::vector<Image> alpha;
};

/// Renders images, material maps and normals of `gaussians` (reference materials) for each camera.
inline GroundTruthViews render_ground_truth(std::span<const GaussianPrimitive> gaussians, std::span<const Camera> cameras,
                                            const EnvironmentMap &env, int workers = 0) {
    GroundTruthViews out;
    const auto materials = reference_materials(gaussians);
    const auto lighting = EnvLighting::from(env);
    CompositeConfig config;
    config.workers = workers;
    for (const auto &cam : cameras) {
        const auto cache = build_compositing_cache(cam, gaussians, config);
        const auto geo = pixel_geometry(cam, cache, gaussians);
        out.images.push_back(render_pbr(cache, geo, materials, lighting, workers));
        const auto gb = composite_gbuffer(cache, gaussians, materials);
        out.maps.push_back(gb.normalized_materials());
        Image normals(cam.width, cam.height, 3);
        for (std::size_t i = 0; i < geo.pixels.size(); ++i)
            for (int c = 0; c < 3; ++c) normals.data[geo.pixels[i] * 3 + c] = static_cast<float>(geo.normal[i][c]);
        out.normals.push_back(std::move(normals));
        out.alpha.push_back(gb.alpha);
    }
    return out;
}

/// Training scene plus the held-out cameras and environments used for evaluation.
struct Benchmark {
    SceneBundle scene;                  // gaussians carry reference materials; material_maps = GT maps
    std::vector<Camera> held_out_views;
    std::vector<EnvironmentMap> held_out_envs;
    std::vector<std::string> held_out_env_names;
};

inline Benchmark generate_scene(const SceneSpec &spec, std::uint64_t seed, int workers = 0) {
    spec.validate();
    std::mt19937_64 rng(mix_seed(seed, 0x5ce7e));
    double total_area = 0.0;
    for (const auto &r : spec.regions) total_area += r.area();
    Benchmark bench;
    auto &gaussians = bench.scene.gaussians;
    int assigned = 0;
    for (std::size_t i = 0; i < spec.regions.size(); ++i) {
        const auto &region = spec.regions[i];
        const int n = i + 1 == spec.regions.size()
                          ? spec.gaussian_count - assigned
                          : std::max(1, static_cast<int>(std::lround(spec.gaussian_count * region.area() / total_area)));
        assigned += n;
        const double spacing = std::sqrt(region.area() / n);
        const double tangent = spec.footprint * spacing;
        for (int k = 0; k < n; ++k) {
            const auto [p, normal] = sample_surface(region, rng);
            GaussianPrimitive g;
            g.mean = p;
            g.normal = normal;
            g.rotation = frame_from_normal(normal);
            g.scale = Vec3(tangent, tangent, spec.thickness * tangent);
            g.opacity = spec.opacity;
            g.reference = region.material_at(p);
            gaussians.push_back(std::move(g));
        }
    }
    bench.scene.cameras = fibonacci_cameras(spec.views, spec.camera_distance, spec.fov_y_deg, spec.width, spec.height);
    bench.held_out_views = fibonacci_cameras(spec.held_out_views, spec.camera_distance, spec.fov_y_deg, spec.width,
                                             spec.height, 0.5 * kPi);
    bench.scene.env = procedural_env(env_preset(spec.env), spec.env_height, spec.env_width);
    for (const auto &name : spec.held_out_envs) {
        bench.held_out_envs.push_back(procedural_env(env_preset(name), spec.env_height, spec.env_width));
        bench.held_out_env_names.push_back(name);
    }
    auto gt = render_ground_truth(gaussians, bench.scene.cameras, bench.scene.env, workers);
    bench.scene.images = std::move(gt.images);
    bench.scene.material_maps = std::move(gt.maps);
    bench.scene.validate();
    return bench;
}

// ---------------------------------------------------------------------------
// Corruption oracle

struct CorruptionConfig {
    int batch_size = 4;
    double per_batch_gain = 0.15;          // log-normal σ of basecolor (per rgb channel) and roughness gains
    double per_batch_gamma = 0.15;         // basecolor exponent drawn from [1-g, 1+g]
    double baked_shading_strength = 0.5;   // basecolor *= 1 + s·(n·l), random unit l per view
    double pixel_noise_sigma = 0.02;
    double spurious_metallic_prob = 0.25;  // per batch
    double spurious_metallic_min = 0.2;
    double spurious_metallic_max = 0.5;

    void validate() const {
        auto fail = [](const std::string &field) { throw ValidationError("corruption: field '" + field + "' is out of range"); };
        if (batch_size < 1) fail("batch_size");
        if (per_batch_gain < 0) fail("per_batch_gain");
        if (per_batch_gamma < 0 || per_batch_gamma >= 1) fail("per_batch_gamma");
        if (baked_shading_strength < 0 || baked_shading_strength > 1) fail("baked_shading_strength");
        if (pixel_noise_sigma < 0) fail("pixel_noise_sigma");
        if (spurious_metallic_prob < 0 || spurious_metallic_prob > 1) fail("spurious_metallic_prob");
        if (spurious_metallic_min < 0 || spurious_metallic_max < spurious_metallic_min || spurious_metallic_max > 1)
            fail("spurious_metallic_max");
    }

    static CorruptionConfig none() { return {1, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0}; }
};

inline nlohmann::json corruption_to_json(const CorruptionConfig &c) {
    return {{"batch_size", c.batch_size},
            {"per_batch_gain", c.per_batch_gain},
            {"per_batch_gamma", c.per_batch_gamma},
            {"baked_shading_strength", c.baked_shading_strength},
            {"pixel_noise_sigma", c.pixel_noise_sigma},
            {"spurious_metallic_prob", c.spurious_metallic_prob},
            {"spurious_metallic_min", c.spurious_metallic_min},
            {"spurious_metallic_max", c.spurious_metallic_max}};
}

inline CorruptionConfig corruption_from_json(const nlohmann::json &j) {
    static const std::vector<std::string> known = {"batch_size", "per_batch_gain", "per_batch_gamma",
                                                   "baked_shading_strength", "pixel_noise_sigma", "spurious_metallic_prob",
                                                   "spurious_metallic_min", "spurious_metallic_max"};
    if (!j.is_object()) throw ValidationError("corruption: expected a JSON object");
    for (auto it = j.begin(); it != j.end(); ++it)
        if (std::find(known.begin(), known.end(), it.key()) == known.end())
            throw ValidationError("corruption: field '" + it.key() + "' is not recognized");
    CorruptionConfig c;
    detail::read_field(j, "batch_size", c.batch_size, "corruption.");
    detail::read_field(j, "per_batch_gain", c.per_batch_gain, "corruption.");
    detail::read_field(j, "per_batch_gamma", c.per_batch_gamma, "corruption.");
    detail::read_field(j, "baked_shading_strength", c.baked_shading_strength, "corruption.");
    detail::read_field(j, "pixel_noise_sigma", c.pixel_noise_sigma, "corruption.");
    detail::read_field(j, "spurious_metallic_prob", c.spurious_metallic_prob, "corruption.");
    detail::read_field(j, "spurious_metallic_min", c.spurious_metallic_min, "corruption.");
    detail::read_field(j, "spurious_metallic_max", c.spurious_metallic_max, "corruption.");
    c.validate();
    return c;
}

/// Per-batch draws of the oracle, exposed for inspection and tests.
struct BatchCorruption {
    Vec3 gain = Vec3::Ones();
    double roughness_gain = 1.0;
    double gamma = 1.0;
    double metallic_offset = 0.0;
};

inline std::vector<BatchCorruption> draw_batches(std::size_t views, const CorruptionConfig &config, std::uint64_t seed) {
    config.validate();
    const std::size_t batches = (views + config.batch_size - 1) / config.batch_size;
    std::vector<BatchCorruption> out(batches);
    for (std::size_t b = 0; b < batches; ++b) {
        std::mt19937_64 rng(mix_seed(seed, 0xba7c0000ULL + b));
        std::normal_distribution<double> normal(0.0, 1.0);
        std::uniform_real_distribution<double> u(0.0, 1.0);
        auto &bc = out[b];
        for (int c = 0; c < 3; ++c) bc.gain[c] = std::exp(config.per_batch_gain * normal(rng));
        bc.roughness_gain = std::exp(config.per_batch_gain * normal(rng));
        bc.gamma = 1.0 + config.per_batch_gamma * (2.0 * u(rng) - 1.0);
        const bool spurious = u(rng) < config.spurious_metallic_prob;
        const double magnitude = config.spurious_metallic_min + (config.spurious_metallic_max - config.spurious_metallic_min) * u(rng);
        bc.metallic_offset = spurious ? magnitude : 0.0;
    }
    return out;
}

/// Corrupted copies of the ground-truth maps. `normals` and `alpha` come from render_ground_truth.
inline std::vector<MaterialMaps> oracle_predict(std::span<const MaterialMaps> gt_maps, std::span<const Image> normals,
                                                std::span<const Image> alpha, const CorruptionConfig &config,
                                                std::uint64_t seed) {
    if (normals.size() != gt_maps.size() || alpha.size() != gt_maps.size())
        throw ValidationError("oracle_predict: one normal and alpha map per view required");
    const auto batches = draw_batches(gt_maps.size(), config, seed);
    std::vector<MaterialMaps> out;
    out.reserve(gt_maps.size());
    for (std::size_t v = 0; v < gt_maps.size(); ++v) {
        const auto &bc = batches[v / config.batch_size];
        std::mt19937_64 rng(mix_seed(seed, 0x71e40000ULL + v));
        std::normal_distribution<double> normal(0.0, 1.0);
        std::uniform_real_distribution<double> u(0.0, 1.0);
        const double z = 2.0 * u(rng) - 1.0, phi = 2.0 * kPi * u(rng);
        const double s = std::sqrt(std::max(0.0, 1.0 - z * z));
        const Vec3 light(s * std::cos(phi), s * std::sin(phi), z);
        MaterialMaps maps = gt_maps[v];
        const int w = maps.basecolor.width, h = maps.basecolor.height;
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                if (!(alpha[v].at(x, y) > kCoverageThreshold)) continue;
                auto m = maps.sample(x, y);
                const Vec3 n(normals[v].at(x, y, 0), normals[v].at(x, y, 1), normals[v].at(x, y, 2));
                const double shade = 1.0 + config.baked_shading_strength * n.dot(light);
                for (int c = 0; c < 3; ++c) {
                    double b = std::pow(clamp01(m.basecolor[c]), bc.gamma) * bc.gain[c] * shade;
                    if (config.pixel_noise_sigma > 0) b += config.pixel_noise_sigma * normal(rng);
                    m.basecolor[c] = b;
                }
                m.roughness *= bc.roughness_gain;
                m.metallic += bc.metallic_offset;
                if (config.pixel_noise_sigma > 0) {
                    m.roughness += config.pixel_noise_sigma * normal(rng);
                    m.metallic += config.pixel_noise_sigma * normal(rng);
                }
                maps.set(x, y, m.clamped());
            }
        out.push_back(std::move(maps));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Evaluation

inline constexpr std::array<const char *, 4> kTaskRows = {"Relighting", "BaseColor", "Roughness", "Metallic"};

struct MetricRow {
    std::string task;
    double psnr = 0.0;        // mean over finite entries; kInfinitePsnr when every entry was an exact match
    double ssim = 0.0;
    std::size_t count = 0;    // entries averaged
    std::size_t excluded = 0; // exact-match entries left out of the averages
};

struct MetricEntry {
    std::string task;
    std::string env; // relighting only
    std::size_t view = 0;
    double psnr = 0.0;
    double ssim = 0.0;
};

struct MetricTable {
    std::vector<MetricRow> rows;
    std::vector<MetricEntry> entries;

    const MetricRow &row(const std::string &task) const {
        for (const auto &r : rows)
            if (r.task == task) return r;
        throw InvalidParameter("metric table: no row '" + task + "'");
    }

    std::string csv() const {
        std::string out = "task,psnr,ssim,count,excluded\n";
        char buf[256];
        for (const auto &r : rows) {
            std::snprintf(buf, sizeof buf, "%s,%s,%.6f,%zu,%zu\n", r.task.c_str(),
                          is_infinite_psnr(r.psnr) ? "inf" : std::to_string(r.psnr).c_str(), r.ssim, r.count, r.excluded);
            out += buf;
        }
        return out;
    }

    std::string entries_csv() const {
        std::string out = "task,env,view,psnr,ssim\n";
        char buf[256];
        for (const auto &e : entries) {
            std::snprintf(buf, sizeof buf, "%s,%s,%zu,%s,%.6f\n", e.task.c_str(), e.env.c_str(), e.view,
                          is_infinite_psnr(e.psnr) ? "inf" : std::to_string(e.psnr).c_str(), e.ssim);
            out += buf;
        }
        return out;
    }

    std::string summary() const {
        std::string out = "task          PSNR      SSIM\n";
        char buf[256];
        for (const auto &r : rows) {
            if (is_infinite_psnr(r.psnr))
                std::snprintf(buf, sizeof buf, "%-12s %7s   %.4f  (all %zu exact)\n", r.task.c_str(), "inf", r.ssim, r.excluded);
            else
                std::snprintf(buf, sizeof buf, "%-12s %7.3f   %.4f%s\n", r.task.c_str(), r.psnr, r.ssim,
                              r.excluded ? ("  (" + std::to_string(r.excluded) + " exact, excluded)").c_str() : "");
            out += buf;
        }
        return out;
    }
};

namespace detail {
inline Image display(const Image &linear) { return encode_display(linear); }

inline MetricRow reduce_row(const std::string &task, std::span<const MetricEntry> entries) {
    MetricRow row{task};
    double psnr_sum = 0, ssim_sum = 0;
    for (const auto &e : entries) {
        if (e.task != task) continue;
        if (is_infinite_psnr(e.psnr)) {
            ++row.excluded;
            continue;
        }
        psnr_sum += e.psnr;
        ssim_sum += e.ssim;
        ++row.count;
    }
    if (row.count) {
        row.psnr = psnr_sum / row.count;
        row.ssim = ssim_sum / row.count;
    } else {
        row.psnr = kInfinitePsnr;
        row.ssim = 1.0;
    }
    return row;
}
} // namespace detail

/// Relights `predicted` (merged materials) and the ground-truth scene under each held-out
/// environment and view and compares them on display-encoded images; also compares the
/// material maps in the held-out views.
inline MetricTable evaluate_relighting(std::span<const GaussianPrimitive> ground_truth,
                                       std::span<const GaussianPrimitive> predicted, std::span<const Camera> views,
                                       std::span<const EnvironmentMap> envs, std::span<const std::string> env_names = {},
                                       int workers = 0) {
    const auto gt_mats = reference_materials(ground_truth);
    const auto pred_mats = merged_materials(predicted);
    MetricTable table;
    CompositeConfig config;
    config.workers = workers;
    for (std::size_t v = 0; v < views.size(); ++v) {
        const auto gt_cache = build_compositing_cache(views[v], ground_truth, config);
        const auto gt_geo = pixel_geometry(views[v], gt_cache, ground_truth);
        const auto pr_cache = build_compositing_cache(views[v], predicted, config);
        const auto pr_geo = pixel_geometry(views[v], pr_cache, predicted);
        for (std::size_t e = 0; e < envs.size(); ++e) {
            const auto lighting = EnvLighting::from(envs[e]);
            const Image gt = detail::display(render_pbr(gt_cache, gt_geo, gt_mats, lighting, workers));
            const Image pr = detail::display(render_pbr(pr_cache, pr_geo, pred_mats, lighting, workers));
            const std::string name = e < env_names.size() ? env_names[e] : "env" + std::to_string(e);
            table.entries.push_back({"Relighting", name, v, psnr(pr, gt), ssim(pr, gt)});
        }
        const auto gt_maps = composite_gbuffer(gt_cache, ground_truth, gt_mats).normalized_materials();
        const auto pr_maps = composite_gbuffer(pr_cache, predicted, pred_mats).normalized_materials();
        table.entries.push_back({"BaseColor", "", v, psnr(pr_maps.basecolor, gt_maps.basecolor), ssim(pr_maps.basecolor, gt_maps.basecolor)});
        table.entries.push_back({"Roughness", "", v, psnr(pr_maps.roughness, gt_maps.roughness), ssim(pr_maps.roughness, gt_maps.roughness)});
        table.entries.push_back({"Metallic", "", v, psnr(pr_maps.metallic, gt_maps.metallic), ssim(pr_maps.metallic, gt_maps.metallic)});
    }
    for (const char *task : kTaskRows) table.rows.push_back(detail::reduce_row(task, table.entries));
    return table;
}

/// Largest composited metallic value over the given views.
inline double max_metallic(std::span<const GaussianPrimitive> predicted, std::span<const Camera> views, int workers = 0) {
    const auto mats = merged_materials(predicted);
    CompositeConfig config;
    config.workers = workers;
    double top = 0.0;
    for (const auto &cam : views) {
        const auto cache = build_compositing_cache(cam, predicted, config);
        const auto maps = composite_gbuffer(cache, predicted, mats).normalized_materials();
        for (float m : maps.metallic.data) top = std::max(top, static_cast<double>(m));
    }
    return top;
}

} // namespace matlift
