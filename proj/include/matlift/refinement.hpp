#pragma once

// Joint refinement of the three channel mergers and the environment map.
//
// Geometry is fixed, so every training view gets a compositing cache once and
// rendering the material G-buffer is a sparse weighted sum per pixel. One step:
//   pick a view -> merger forward for the Gaussians it sees -> composite and
//   normalize by coverage -> material L1 against the predictor maps -> shade ->
//   λ·L1 + (1-λ)(1-SSIM) against the captured image -> backprop -> Adam.

#include "matlift/adam.hpp"
#include "matlift/log.hpp"
#include "matlift/losses.hpp"
#include "matlift/merger.hpp"
#include "matlift/render.hpp"
#include "matlift/scene_io.hpp"

#include <array>
#include <filesystem>
#include <functional>
#include <sstream>
#include <string_view>

namespace matlift {

enum class Variant { full = 0, supervised_only = 1, proj_average = 2, no_softmax = 3 };

inline constexpr std::array<Variant, 4> kVariants = {Variant::full, Variant::supervised_only, Variant::proj_average,
                                                     Variant::no_softmax};

inline const char *variant_name(Variant v) {
    switch (v) {
    case Variant::full: return "full";
    case Variant::supervised_only: return "supervised_only";
    case Variant::proj_average: return "proj_average";
    case Variant::no_softmax: return "no_softmax";
    }
    return "?";
}

inline Variant parse_variant(std::string_view name) {
    for (auto v : kVariants)
        if (name == variant_name(v)) return v;
    throw InvalidParameter("variant: unknown name '" + std::string(name) +
                           "' (expected full, supervised_only, proj_average or no_softmax)");
}

struct RefineConfig {
    std::uint64_t iterations = 10000;
    double lr_merger = 1e-3;
    double lr_env = 1e-2;
    double lr_normal = 1e-3;
    double lambda_photo = 0.8;
    double weight_material_loss = 1.0;
    std::uint64_t seed = 0;
    Variant variant = Variant::full;
    int pe_levels = 6;
    int env_height = 16;
    int env_width = 32;
    double env_init = 0.0; // constant initial radiance; 0 picks the level matching mean image brightness
    bool refine_normals = false;
    double coverage_threshold = kCoverageThreshold;
    CompositeConfig composite;
    int workers = 0;

    void validate() const {
        if (iterations < 1) throw InvalidParameter("refine: iterations must be >= 1");
        if (!(lambda_photo >= 0.0 && lambda_photo <= 1.0)) throw InvalidParameter("refine: lambda_photo must lie in [0,1]");
        if (!(lr_merger > 0.0) || !(lr_env > 0.0) || !(lr_normal > 0.0)) throw InvalidParameter("refine: learning rates must be positive");
        if (!(weight_material_loss >= 0.0)) throw InvalidParameter("refine: weight_material_loss must be >= 0");
        if (pe_levels < 1) throw InvalidParameter("refine: pe_levels must be >= 1");
        if (env_height < 2 || env_width < 2) throw InvalidParameter("refine: environment must be at least 2x2");
        if (!(env_init >= 0.0)) throw InvalidParameter("refine: env_init must be >= 0");
    }

    bool photometric() const { return variant == Variant::full || variant == Variant::no_softmax; }
    MergeHead head() const { return variant == Variant::no_softmax ? MergeHead::direct : MergeHead::softmax; }
};

struct LossReport {
    std::uint64_t step = 0;
    std::size_t view = 0;
    double l_image = 0.0;
    double l_3dgs = 0.0;
    double total = 0.0;
    std::array<double, 3> image_channels{}; // basecolor, roughness, metallic parts of l_image
    double photo_l1 = 0.0;
    double photo_ssim = 1.0;
};

inline double softplus(double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); }
inline double softplus_inverse(double y) { return y > 30.0 ? y : std::log(std::expm1(y)); }
inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

/// Maps positions into [-1,1]^3 using the axis-aligned bounds of the Gaussian means.
struct PositionNormalizer {
    Vec3 lo = Vec3::Zero(), hi = Vec3::Ones();

    static PositionNormalizer fit(std::span<const GaussianPrimitive> gaussians) {
        PositionNormalizer n;
        if (gaussians.empty()) return n;
        n.lo = n.hi = gaussians.front().mean;
        for (const auto &g : gaussians) {
            n.lo = n.lo.cwiseMin(g.mean);
            n.hi = n.hi.cwiseMax(g.mean);
        }
        return n;
    }
    Vec3 operator()(const Vec3 &p) const {
        Vec3 out;
        for (int i = 0; i < 3; ++i) {
            const double extent = hi[i] - lo[i];
            out[i] = extent > 1e-12 ? 2.0 * (p[i] - lo[i]) / extent - 1.0 : 0.0;
        }
        return out;
    }
};

template <class Scalar = float>
class Refiner {
public:
    using Merger = ChannelMerger<Scalar>;
    using Matrix = typename Merger::Matrix;

    struct Gradients {
        std::array<std::vector<Scalar>, 3> merger;
        std::vector<double> env;     // with respect to the softplus parameters
        std::vector<double> normals; // 3 per Gaussian, only with refine_normals
    };

    Refiner(const SceneBundle &scene, const RefineConfig &config) : config_(config), gaussians_(scene.gaussians) {
        config_.validate();
        scene.validate();
        if (!scene.material_maps) throw ValidationError("refine: predictor material maps are required");
        if (gaussians_.empty()) throw ValidationError("refine: scene has no Gaussians");
        const std::size_t views = scene.view_count();
        for (const auto &g : gaussians_)
            if (g.per_view.size() != views) throw ValidationError("refine: Gaussians must carry lifted per-view materials");

        const auto normalize = PositionNormalizer::fit(gaussians_);
        for (auto c : kMaterialChannels) {
            mergers_[c] = init_params<Scalar>(config_.seed, static_cast<int>(views), c, config_.pe_levels, config_.head());
            std::vector<MergerInput> inputs;
            inputs.reserve(gaussians_.size());
            for (const auto &g : gaussians_) inputs.push_back(make_merger_input(normalize(g.mean), g.per_view, c));
            full_[static_cast<int>(c)] = mergers_[c].make_batch(inputs);
            adam_[static_cast<int>(c)] = AdamState<Scalar>(mergers_[c].parameters().size());
        }

        normals_.reserve(gaussians_.size() * 3);
        for (const auto &g : gaussians_)
            for (int i = 0; i < 3; ++i) normals_.push_back(g.normal[i]);
        normal_adam_ = AdamState<double>(normals_.size());

        views_.reserve(views);
        for (std::size_t v = 0; v < views; ++v) views_.push_back(prepare_view(scene.cameras[v], scene.images[v], (*scene.material_maps)[v]));

        lighting_ = EnvLighting::geometry(config_.env_height, config_.env_width);
        const double level = config_.env_init > 0.0 ? config_.env_init : auto_env_level();
        env_theta_.assign(lighting_.radiance.size(), softplus_inverse(level));
        env_adam_ = AdamState<double>(env_theta_.size());
        refresh_lighting();
    }

    const RefineConfig &config() const { return config_; }
    std::size_t view_count() const { return views_.size(); }
    std::size_t gaussian_count() const { return gaussians_.size(); }
    std::uint64_t steps_done() const { return step_; }
    const std::vector<LossReport> &history() const { return history_; }

    MergerParams<Scalar> &mergers() { return mergers_; }
    const MergerParams<Scalar> &mergers() const { return mergers_; }
    std::vector<double> &env_parameters() { return env_theta_; }
    const std::vector<double> &env_parameters() const { return env_theta_; }
    std::vector<double> &normal_parameters() { return normals_; }
    /// Call after editing env_parameters() directly.
    void refresh_lighting() {
        for (std::size_t i = 0; i < env_theta_.size(); ++i) lighting_.radiance[i] = softplus(env_theta_[i]);
    }
    const EnvLighting &lighting() const { return lighting_; }
    EnvironmentMap environment() const { return lighting_.to_map(); }

    /// Batch of the most recent evaluate() for a channel (columns = Gaussians seen in that view).
    const typename Merger::Batch &last_batch(MaterialChannel c) const { return batches_[static_cast<int>(c)]; }
    std::span<const std::uint32_t> visible(std::size_t view) const { return views_.at(view).visible; }

    std::size_t view_for_step(std::uint64_t step) const { return static_cast<std::size_t>(mix_seed(config_.seed, step) % views_.size()); }

    /// Loss of one view at the current parameters; fills `grads` when given.
    LossReport evaluate(std::size_t view, Gradients *grads = nullptr) {
        const auto &vd = views_.at(view);
        const std::size_t n_local = vd.visible.size();
        const std::size_t n_pix = vd.geo.pixels.size();
        const bool photo = config_.photometric();
        const bool want = grads != nullptr;

        std::vector<MaterialSample> local(n_local, MaterialSample{Vec3::Zero(), 0.0, 0.0});
        for (auto c : kMaterialChannels) {
            const int ci = static_cast<int>(c);
            auto &batch = batches_[ci];
            gather(full_[ci], vd.visible, batch);
            mergers_[c].forward(batch);
            const int off = channel_offset(c);
            for (std::size_t j = 0; j < n_local; ++j) {
                auto arr = local[j].to_array();
                for (int k = 0; k < channel_width(c); ++k) arr[off + k] = static_cast<double>(batch.merged(k, static_cast<Eigen::Index>(j)));
                local[j] = MaterialSample::from_array(arr);
            }
        }

        // Composite, normalize by coverage and compare with the predictor maps.
        std::vector<std::array<double, 5>> mats(n_pix), d_mats(n_pix, std::array<double, 5>{});
        std::vector<Vec3> normal_raw, normal_unit;
        if (config_.refine_normals) normal_raw.resize(n_pix), normal_unit.resize(n_pix);
        LossReport report;
        report.view = view;
        const double img_norm = n_pix ? 1.0 / (kMaterialComponents * static_cast<double>(n_pix)) : 0.0;
        for (std::size_t i = 0; i < n_pix; ++i) {
            const std::size_t p = vd.geo.pixels[i];
            std::array<double, 5> m{};
            Vec3 n = Vec3::Zero();
            for (std::size_t k = vd.cache.begin(p); k < vd.cache.end(p); ++k) {
                const auto arr = local[vd.entry_local[k]].to_array();
                for (int q = 0; q < 5; ++q) m[q] += vd.cache.weight[k] * arr[q];
                if (config_.refine_normals) {
                    const std::size_t g = vd.cache.gaussian[k];
                    n += vd.cache.weight[k] * Vec3(normals_[3 * g], normals_[3 * g + 1], normals_[3 * g + 2]);
                }
            }
            for (auto &q : m) q /= vd.geo.alpha[i];
            mats[i] = m;
            if (config_.refine_normals) {
                normal_raw[i] = n;
                normal_unit[i] = n.norm() > 1e-12 ? Vec3(n.normalized()) : vd.geo.normal[i];
            }
            for (int q = 0; q < 5; ++q) {
                const double diff = m[q] - vd.target[i * 5 + q];
                report.image_channels[q < 3 ? 0 : q - 2] += std::abs(diff) * img_norm;
                if (want) d_mats[i][q] += config_.weight_material_loss * sign_of(diff) * img_norm;
            }
        }
        if (n_pix == 0) log(LogLevel::warn, "refine: view " + std::to_string(view) + " has no covered pixels");
        report.l_image = report.image_channels[0] + report.image_channels[1] + report.image_channels[2];

        std::vector<double> env_grad;
        if (want && photo) env_grad.assign(lighting_.radiance.size(), 0.0);
        std::vector<Vec3> d_normal;
        if (want && photo && config_.refine_normals) d_normal.assign(n_pix, Vec3::Zero());
        if (photo && n_pix > 0) {
            const auto sample = [&](std::size_t i) {
                const auto &m = mats[i];
                const Vec3 n = config_.refine_normals ? normal_unit[i] : vd.geo.normal[i];
                return ShadingSample{Vec3(m[0], m[1], m[2]), m[3], m[4], n, vd.geo.view_dir[i], vd.geo.alpha[i]};
            };
            std::vector<ShadeTerms> terms(n_pix);
            std::vector<double> rendered = vd.gt;
            parallel_chunks(n_pix, kPixelChunk, config_.workers, [&](std::size_t, std::size_t b, std::size_t e) {
                for (std::size_t i = b; i < e; ++i) {
                    const auto s = sample(i);
                    terms[i] = shade_terms(s, lighting_);
                    const Vec3 rgb = radiance_from_terms(s, terms[i]);
                    for (int c = 0; c < 3; ++c) rendered[vd.geo.pixels[i] * 3 + c] = rgb[c];
                }
            });
            const auto photo_loss =
                loss_3dgs(rendered, vd.gt, vd.cache.width, vd.cache.height, 3, config_.lambda_photo, want, vd.mask);
            report.l_3dgs = photo_loss.value;
            report.photo_l1 = photo_loss.l1;
            report.photo_ssim = photo_loss.ssim;
            if (want) {
                const std::size_t chunks = chunk_count(n_pix, kPixelChunk);
                std::vector<std::vector<double>> partial(chunks);
                parallel_chunks(n_pix, kPixelChunk, config_.workers, [&](std::size_t chunk, std::size_t b, std::size_t e) {
                    auto &acc = partial[chunk];
                    acc.assign(env_grad.size(), 0.0);
                    for (std::size_t i = b; i < e; ++i) {
                        const std::size_t p = vd.geo.pixels[i];
                        const Vec3 go(photo_loss.grad[p * 3], photo_loss.grad[p * 3 + 1], photo_loss.grad[p * 3 + 2]);
                        const auto s = sample(i);
                        const auto g = material_grad_from_terms(s, terms[i], go);
                        for (int c = 0; c < 3; ++c) d_mats[i][c] += g.basecolor[c];
                        d_mats[i][3] += g.roughness;
                        d_mats[i][4] += g.metallic;
                        const Vec3 dn = shade_backward_env(s, lighting_, go, acc, config_.refine_normals);
                        if (config_.refine_normals) {
                            const double len = normal_raw[i].norm();
                            if (len > 1e-12) {
                                const Vec3 u = normal_raw[i] / len;
                                d_normal[i] = (dn - u * u.dot(dn)) / len;
                            }
                        }
                    }
                });
                for (const auto &acc : partial)
                    for (std::size_t t = 0; t < env_grad.size(); ++t) env_grad[t] += acc[t];
            }
        }
        report.total = config_.weight_material_loss * report.l_image + report.l_3dgs;
        if (!want) return report;

        // Scatter pixel gradients to the Gaussians, then through the mergers.
        std::vector<std::array<double, 5>> d_local(n_local, std::array<double, 5>{});
        if (config_.refine_normals) grads->normals.assign(normals_.size(), 0.0);
        for (std::size_t i = 0; i < n_pix; ++i) {
            const std::size_t p = vd.geo.pixels[i];
            for (std::size_t k = vd.cache.begin(p); k < vd.cache.end(p); ++k) {
                const double s = vd.cache.weight[k] / vd.geo.alpha[i];
                auto &d = d_local[vd.entry_local[k]];
                for (int q = 0; q < 5; ++q) d[q] += s * d_mats[i][q];
                if (!d_normal.empty()) {
                    const std::size_t g = vd.cache.gaussian[k];
                    for (int c = 0; c < 3; ++c) grads->normals[3 * g + c] += vd.cache.weight[k] * d_normal[i][c];
                }
            }
        }
        for (auto c : kMaterialChannels) {
            const int ci = static_cast<int>(c), off = channel_offset(c), width = channel_width(c);
            Matrix gm(width, static_cast<Eigen::Index>(n_local));
            for (std::size_t j = 0; j < n_local; ++j)
                for (int k = 0; k < width; ++k) gm(k, static_cast<Eigen::Index>(j)) = static_cast<Scalar>(d_local[j][off + k]);
            grads->merger[ci].assign(mergers_[c].parameters().size(), Scalar(0));
            mergers_[c].backward(batches_[ci], gm, grads->merger[ci]);
        }
        grads->env.assign(env_theta_.size(), 0.0);
        for (std::size_t t = 0; t < env_grad.size(); ++t) grads->env[t] = env_grad[t] * sigmoid(env_theta_[t]);
        return report;
    }

    /// One optimization step on view_for_step(steps_done()).
    LossReport step() {
        if (config_.variant == Variant::proj_average) throw InvalidParameter("refine: proj_average has no training steps");
        const std::size_t view = view_for_step(step_);
        Gradients grads;
        LossReport report = evaluate(view, &grads);
        for (auto c : kMaterialChannels) {
            const int ci = static_cast<int>(c);
            adam_step<Scalar>(mergers_[c].parameters(), grads.merger[ci], adam_[ci], config_.lr_merger);
        }
        if (config_.photometric()) {
            adam_step<double>(env_theta_, grads.env, env_adam_, config_.lr_env);
            refresh_lighting();
            if (config_.refine_normals) {
                adam_step<double>(normals_, grads.normals, normal_adam_, config_.lr_normal);
                for (std::size_t g = 0; g < gaussians_.size(); ++g) {
                    Vec3 n(normals_[3 * g], normals_[3 * g + 1], normals_[3 * g + 2]);
                    if (n.norm() > 1e-12) n.normalize();
                    for (int c = 0; c < 3; ++c) normals_[3 * g + c] = n[c];
                }
            }
        }
        report.step = step_++;
        history_.push_back(report);
        return report;
    }

    /// Runs steps until `iterations` are done; `on_step` sees every report.
    void run(const std::function<void(const LossReport &)> &on_step = {}) { run_until(config_.iterations, on_step); }

    void run_until(std::uint64_t stop, const std::function<void(const LossReport &)> &on_step = {}) {
        if (config_.variant == Variant::proj_average) return;
        stop = std::min(stop, config_.iterations);
        while (step_ < stop) {
            const auto report = step();
            if (on_step) on_step(report);
        }
    }

    /// Merged material of every Gaussian at the current parameters.
    std::vector<MaterialSample> merged_materials() const {
        std::vector<MaterialSample> out(gaussians_.size(), MaterialSample{Vec3::Zero(), 0.0, 0.0});
        std::vector<std::uint32_t> all(gaussians_.size());
        for (std::size_t i = 0; i < all.size(); ++i) all[i] = static_cast<std::uint32_t>(i);
        for (auto c : kMaterialChannels) {
            const int ci = static_cast<int>(c), off = channel_offset(c);
            typename Merger::Batch batch;
            gather(full_[ci], all, batch);
            mergers_[c].forward(batch);
            for (std::size_t j = 0; j < out.size(); ++j) {
                auto arr = out[j].to_array();
                for (int k = 0; k < channel_width(c); ++k) arr[off + k] = static_cast<double>(batch.merged(k, static_cast<Eigen::Index>(j)));
                out[j] = MaterialSample::from_array(arr);
            }
        }
        return out;
    }

    /// Copy of the scene Gaussians with merged materials (and refined normals) written back.
    std::vector<GaussianPrimitive> merged_gaussians() const {
        auto out = gaussians_;
        const auto merged = merged_materials();
        for (std::size_t g = 0; g < out.size(); ++g) {
            out[g].merged = merged[g].clamped();
            if (config_.refine_normals) out[g].normal = Vec3(normals_[3 * g], normals_[3 * g + 1], normals_[3 * g + 2]);
        }
        return out;
    }

    // Checkpoint: "MLRF", u32 version, u32 scalar bytes, u32 variant, u64 seed, u64 step, u64 views,
    // 3 merger blobs + Adam states, env parameters + Adam, normals + Adam, loss history.
    std::string checkpoint_bytes() const {
        std::ostringstream out(std::ios::binary);
        out.write("MLRF", 4);
        detail::write_pod(out, kCheckpointVersion);
        detail::write_pod(out, static_cast<std::uint32_t>(sizeof(Scalar)));
        detail::write_pod(out, static_cast<std::uint32_t>(config_.variant));
        detail::write_pod(out, config_.seed);
        detail::write_pod(out, step_);
        detail::write_pod(out, static_cast<std::uint64_t>(views_.size()));
        for (auto c : kMaterialChannels) {
            mergers_[c].write(out);
            write_adam(out, adam_[static_cast<int>(c)]);
        }
        write_vector(out, env_theta_);
        write_adam(out, env_adam_);
        write_vector(out, normals_);
        write_adam(out, normal_adam_);
        detail::write_pod(out, static_cast<std::uint64_t>(history_.size()));
        for (const auto &r : history_) {
            detail::write_pod(out, r.step);
            detail::write_pod(out, static_cast<std::uint64_t>(r.view));
            for (double v : {r.l_image, r.l_3dgs, r.total, r.image_channels[0], r.image_channels[1], r.image_channels[2],
                             r.photo_l1, r.photo_ssim})
                detail::write_pod(out, v);
        }
        return out.str();
    }

    void save_checkpoint(const std::filesystem::path &path) const { detail::write_text_atomic(path, checkpoint_bytes()); }

    void load_checkpoint(const std::filesystem::path &path) {
        const auto bytes = detail::read_bytes(path);
        std::istringstream in(std::string(bytes.begin(), bytes.end()), std::ios::binary);
        char magic[4];
        in.read(magic, 4);
        if (!in || std::memcmp(magic, "MLRF", 4) != 0) throw ParseError("checkpoint: bad magic", 0);
        const auto version = detail::read_pod<std::uint32_t>(in, "version");
        if (version != kCheckpointVersion) throw VersionMismatch("checkpoint: unsupported version " + std::to_string(version));
        if (detail::read_pod<std::uint32_t>(in, "scalar size") != sizeof(Scalar)) throw ValidationError("checkpoint: scalar type mismatch");
        if (detail::read_pod<std::uint32_t>(in, "variant") != static_cast<std::uint32_t>(config_.variant))
            throw ValidationError("checkpoint: written by a different variant");
        if (detail::read_pod<std::uint64_t>(in, "seed") != config_.seed) throw ValidationError("checkpoint: written with a different seed");
        const auto step = detail::read_pod<std::uint64_t>(in, "step");
        if (detail::read_pod<std::uint64_t>(in, "views") != views_.size()) throw ValidationError("checkpoint: view count mismatch");
        MergerParams<Scalar> mergers;
        std::array<AdamState<Scalar>, 3> adam;
        for (auto c : kMaterialChannels) {
            mergers[c] = Merger::read(in);
            if (!(mergers[c].shape() == mergers_[c].shape())) throw ValidationError("checkpoint: merger shape mismatch");
            adam[static_cast<int>(c)] = read_adam<Scalar>(in, mergers[c].parameters().size());
        }
        auto env = read_vector<double>(in, env_theta_.size(), "environment");
        auto env_adam = read_adam<double>(in, env_theta_.size());
        auto normals = read_vector<double>(in, normals_.size(), "normals");
        auto normal_adam = read_adam<double>(in, normals_.size());
        const auto n_hist = detail::read_pod<std::uint64_t>(in, "history size");
        if (n_hist != step) throw ValidationError("checkpoint: history length does not match step");
        std::vector<LossReport> history(n_hist);
        for (auto &r : history) {
            r.step = detail::read_pod<std::uint64_t>(in, "history");
            r.view = detail::read_pod<std::uint64_t>(in, "history");
            for (double *v : {&r.l_image, &r.l_3dgs, &r.total, &r.image_channels[0], &r.image_channels[1],
                              &r.image_channels[2], &r.photo_l1, &r.photo_ssim})
                *v = detail::read_pod<double>(in, "history");
        }
        if (in.peek() != std::char_traits<char>::eof()) throw ParseError("checkpoint: trailing bytes", static_cast<std::uint64_t>(in.tellg()));
        mergers_ = std::move(mergers);
        adam_ = std::move(adam);
        env_theta_ = std::move(env);
        env_adam_ = std::move(env_adam);
        normals_ = std::move(normals);
        normal_adam_ = std::move(normal_adam);
        history_ = std::move(history);
        step_ = step;
        refresh_lighting();
    }

private:
    static constexpr std::size_t kPixelChunk = 256;
    static constexpr std::uint32_t kCheckpointVersion = 1;

    struct ViewData {
        CompositingCache cache;
        PixelGeometry geo;
        std::vector<std::uint32_t> visible;     // Gaussians contributing to covered pixels, ascending
        std::vector<std::uint32_t> entry_local; // cache entry -> index into visible
        std::vector<double> gt;                 // 3 per pixel
        std::vector<double> mask;               // 1 on covered pixels
        std::vector<double> target;             // 5 per covered pixel
    };

    ViewData prepare_view(const Camera &camera, const Image &image, const MaterialMaps &maps) const {
        ViewData vd;
        auto composite = config_.composite;
        composite.workers = config_.workers;
        vd.cache = build_compositing_cache(camera, gaussians_, composite);
        vd.geo = pixel_geometry(camera, vd.cache, gaussians_, config_.coverage_threshold);
        std::vector<std::uint32_t> slot(gaussians_.size(), kNone);
        for (std::uint32_t p : vd.geo.pixels)
            for (std::size_t k = vd.cache.begin(p); k < vd.cache.end(p); ++k) slot[vd.cache.gaussian[k]] = 0;
        for (std::size_t g = 0; g < slot.size(); ++g)
            if (slot[g] == 0) {
                slot[g] = static_cast<std::uint32_t>(vd.visible.size());
                vd.visible.push_back(static_cast<std::uint32_t>(g));
            }
        vd.entry_local.assign(vd.cache.gaussian.size(), 0);
        for (std::size_t k = 0; k < vd.cache.gaussian.size(); ++k) {
            const auto s = slot[vd.cache.gaussian[k]];
            vd.entry_local[k] = s == kNone ? 0 : s;
        }
        vd.gt.assign(image.data.begin(), image.data.end());
        vd.mask.assign(vd.cache.pixel_count(), 0.0);
        for (std::uint32_t p : vd.geo.pixels) vd.mask[p] = 1.0;
        vd.target.reserve(vd.geo.pixels.size() * 5);
        for (std::uint32_t p : vd.geo.pixels) {
            const int x = static_cast<int>(p % camera.width), y = static_cast<int>(p / camera.width);
            const auto arr = maps.sample(x, y).to_array();
            vd.target.insert(vd.target.end(), arr.begin(), arr.end());
        }
        return vd;
    }

    static void gather(const typename Merger::Batch &full, std::span<const std::uint32_t> columns, typename Merger::Batch &out) {
        const auto n = static_cast<Eigen::Index>(columns.size());
        out.input.resize(full.input.rows(), n);
        out.values.resize(full.values.rows(), n);
        out.seen.resize(full.seen.rows(), n);
        for (Eigen::Index j = 0; j < n; ++j) {
            const auto src = static_cast<Eigen::Index>(columns[static_cast<std::size_t>(j)]);
            out.input.col(j) = full.input.col(src);
            out.values.col(j) = full.values.col(src);
            out.seen.col(j) = full.seen.col(src);
        }
    }

    /// Constant radiance that makes the initial renders match the captured images on average.
    double auto_env_level() {
        lighting_.radiance.assign(lighting_.radiance.size(), 1.0);
        const auto merged = merged_materials();
        double rendered_sum = 0.0, gt_sum = 0.0;
        for (const auto &vd : views_) {
            const Image img = render_pbr(vd.cache, vd.geo, merged, lighting_, config_.workers);
            for (std::uint32_t p : vd.geo.pixels)
                for (int c = 0; c < 3; ++c) {
                    rendered_sum += img.data[p * 3 + c];
                    gt_sum += vd.gt[p * 3 + c];
                }
        }
        return rendered_sum > 1e-12 && gt_sum > 1e-12 ? gt_sum / rendered_sum : 1.0;
    }

    template <class T>
    static void write_vector(std::ostream &out, const std::vector<T> &v) {
        detail::write_pod(out, static_cast<std::uint64_t>(v.size()));
        out.write(reinterpret_cast<const char *>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(T)));
    }
    template <class T>
    static std::vector<T> read_vector(std::istream &in, std::size_t expected, const char *what) {
        const auto n = detail::read_pod<std::uint64_t>(in, what);
        if (n != expected) throw ValidationError(std::string("checkpoint: ") + what + " size mismatch");
        std::vector<T> v(n);
        const auto at = in.tellg();
        in.read(reinterpret_cast<char *>(v.data()), static_cast<std::streamsize>(n * sizeof(T)));
        if (!in) throw ParseError(std::string("checkpoint: truncated ") + what, at < 0 ? 0 : static_cast<std::uint64_t>(at));
        return v;
    }
    template <class T>
    static void write_adam(std::ostream &out, const AdamState<T> &s) {
        detail::write_pod(out, s.step);
        write_vector(out, s.m);
        write_vector(out, s.v);
    }
    template <class T>
    static AdamState<T> read_adam(std::istream &in, std::size_t expected) {
        AdamState<T> s;
        s.step = detail::read_pod<std::uint64_t>(in, "optimizer step");
        s.m = read_vector<T>(in, expected, "optimizer moments");
        s.v = read_vector<T>(in, expected, "optimizer moments");
        return s;
    }

    static constexpr std::uint32_t kNone = std::numeric_limits<std::uint32_t>::max();

    RefineConfig config_;
    std::vector<GaussianPrimitive> gaussians_;
    MergerParams<Scalar> mergers_;
    std::array<typename Merger::Batch, 3> full_;
    std::array<typename Merger::Batch, 3> batches_;
    std::array<AdamState<Scalar>, 3> adam_;
    std::vector<double> normals_;
    AdamState<double> normal_adam_;
    std::vector<ViewData> views_;
    EnvLighting lighting_;
    std::vector<double> env_theta_;
    AdamState<double> env_adam_;
    std::uint64_t step_ = 0;
    std::vector<LossReport> history_;
};

struct RefineResult {
    std::vector<GaussianPrimitive> gaussians; // merged materials written back
    EnvironmentMap env;
    std::vector<LossReport> history;
};

/// Runs the configured variant to completion.
template <class Scalar = float>
RefineResult refine(const SceneBundle &scene, const RefineConfig &config) {
    Refiner<Scalar> refiner(scene, config);
    refiner.run();
    return {refiner.merged_gaussians(), refiner.environment(), refiner.history()};
}

} // namespace matlift
