#pragma once

// Analytic ray/Gaussian queries, supersampled material lifting and
// alpha-composited G-buffer rendering.
//
// A Gaussian's response along a ray peaks at
//     tau_max = ((mu - o)^T P d) / (d^T P d),   P = Sigma^-1
// and its opacity there is
//     alpha_max = alpha * exp(-0.5 * falloff * (x_max - mu)^T P (x_max - mu)).

#include "matlift/parallel.hpp"
#include "matlift/scene.hpp"

#include <algorithm>
#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <span>
#include <vector>

namespace matlift {

struct GaussianHit {
    std::uint32_t gaussian_index = 0;
    double tau_max = 0.0;
    double alpha_max = 0.0;
};

inline bool hit_order(const GaussianHit &a, const GaussianHit &b) {
    return a.tau_max < b.tau_max || (a.tau_max == b.tau_max && a.gaussian_index < b.gaussian_index);
}

struct MaxResponse {
    double tau = 0.0;
    Vec3 point = Vec3::Zero();
};

inline MaxResponse max_response(const Ray &ray, const Vec3 &mean, const Mat3 &precision) {
    const Vec3 pd = precision * ray.direction;
    const double denom = ray.direction.dot(pd);
    if (!(denom > 0.0) || !std::isfinite(denom)) throw NumericalError("max_response: degenerate covariance along ray");
    const double tau = (mean - ray.origin).dot(pd) / denom;
    if (!std::isfinite(tau)) throw NumericalError("max_response: non-finite ray parameter");
    return {tau, ray.origin + tau * ray.direction};
}

inline MaxResponse max_response(const Ray &ray, const GaussianPrimitive &g) {
    return max_response(ray, g.mean, g.precision());
}

inline double max_opacity(const Ray &ray, const GaussianPrimitive &g, double falloff = 1.0) {
    if (!(falloff > 0.0)) throw InvalidParameter("max_opacity: falloff must be positive");
    const Mat3 p = g.precision();
    const MaxResponse r = max_response(ray, g.mean, p);
    const Vec3 delta = r.point - g.mean;
    return g.opacity * std::exp(-0.5 * falloff * delta.dot(p * delta));
}

/// Gaussian with Σ⁻¹ materialized once, as consumed by every ray query.
struct PreparedGaussian {
    Vec3 mean;
    Mat3 precision;
    Mat3 axes; // columns: principal axes scaled by the standard deviations, R·diag(scale)
    double opacity;
};

inline std::vector<PreparedGaussian> prepare_gaussians(std::span<const GaussianPrimitive> gaussians) {
    std::vector<PreparedGaussian> out;
    out.reserve(gaussians.size());
    for (const auto &g : gaussians) {
        if (!(g.scale.minCoeff() > 0.0)) throw InvalidParameter("gaussian: scale must be positive");
        const Mat3 axes = g.rotation.normalized().toRotationMatrix() * g.scale.asDiagonal();
        out.push_back({g.mean, g.precision(), axes, g.opacity});
    }
    return out;
}

/// Evaluates one Gaussian against a ray; true when tau_max > 0 and alpha_max >= threshold.
inline bool evaluate_hit(const Ray &ray, const PreparedGaussian &g, std::uint32_t index, double threshold, double falloff,
                         GaussianHit &out) {
    const MaxResponse r = max_response(ray, g.mean, g.precision);
    if (!(r.tau > 0.0)) return false;
    const Vec3 delta = r.point - g.mean;
    const double alpha = g.opacity * std::exp(-0.5 * falloff * delta.dot(g.precision * delta));
    if (alpha < threshold) return false;
    out = {index, r.tau, alpha};
    return true;
}

/// Reference query: tests every Gaussian. Hits are sorted by tau_max, ties by index.
inline std::vector<GaussianHit> trace_pixel_hits(const Ray &ray, std::span<const GaussianPrimitive> gaussians,
                                                 double hit_threshold, double falloff = 1.0) {
    if (!(hit_threshold > 0.0 && hit_threshold < 1.0)) throw InvalidParameter("trace_pixel_hits: threshold must lie in (0,1)");
    std::vector<GaussianHit> hits;
    const auto prepared = prepare_gaussians(gaussians);
    for (std::size_t i = 0; i < prepared.size(); ++i) {
        GaussianHit h;
        if (evaluate_hit(ray, prepared[i], static_cast<std::uint32_t>(i), hit_threshold, falloff, h)) hits.push_back(h);
    }
    std::sort(hits.begin(), hits.end(), hit_order);
    return hits;
}

/// Per-camera acceleration: every Gaussian is binned into the pixels its
/// threshold ellipsoid can reach. The ellipsoid {m² <= 2 ln(α/thr)/falloff}
/// contains every point with alpha_max >= thr, so its projected bounding box
/// is a conservative candidate set for all rays through those pixels.
class ViewTracer {
public:
    ViewTracer(const Camera &camera, std::span<const PreparedGaussian> gaussians, double hit_threshold, double falloff)
        : camera_(camera), gaussians_(gaussians), threshold_(hit_threshold), falloff_(falloff) {
        if (!(hit_threshold > 0.0 && hit_threshold < 1.0)) throw InvalidParameter("ViewTracer: threshold must lie in (0,1)");
        if (!(falloff > 0.0)) throw InvalidParameter("ViewTracer: falloff must be positive");
        build();
    }

    std::span<const std::uint32_t> candidates(int px, int py) const {
        const std::size_t p = static_cast<std::size_t>(py) * camera_.width + px;
        return {bins_.data() + offsets_[p], offsets_[p + 1] - offsets_[p]};
    }

    /// Sorted hits of a ray that starts at the camera and passes through pixel (px, py).
    void hits(const Ray &ray, int px, int py, std::vector<GaussianHit> &out) const {
        out.clear();
        GaussianHit h;
        for (std::uint32_t i : candidates(px, py))
            if (test(ray.direction, i, h)) out.push_back(h);
        std::sort(out.begin(), out.end(), hit_order);
    }

    /// Sorted front-to-back prefix of hits(): stops after the hit that drops the
    /// transmittance below `min_transmittance`. Candidates are visited by a lower
    /// bound on tau_max, so the scan ends as soon as no later candidate can
    /// precede that cutoff; the result equals truncating the full hit list.
    void front_hits(const Ray &ray, int px, int py, double min_transmittance, std::vector<GaussianHit> &out) const {
        out.clear();
        const std::size_t p = static_cast<std::size_t>(py) * camera_.width + px;
        GaussianHit h;
        double product = 1.0;
        double cutoff_tau = std::numeric_limits<double>::infinity();
        for (std::size_t k = offsets_[p]; k < offsets_[p + 1]; ++k) {
            if (depth_bound_[k] > cutoff_tau) break;
            if (!test(ray.direction, bins_[k], h)) continue;
            if (h.tau_max > cutoff_tau) continue; // lands behind the crossing hit
            out.push_back(h);
            product *= 1.0 - h.alpha_max;
            if (product < min_transmittance) {
                cutoff_tau = truncate(out, min_transmittance);
                product = 1.0;
                for (const auto &kept : out) product *= 1.0 - kept.alpha_max;
            }
        }
        std::sort(out.begin(), out.end(), hit_order);
        truncate(out, min_transmittance);
    }

    const Camera &camera() const { return camera_; }

private:
    // Rays share the camera center o, so with a = Σ⁻¹(μ-o) and c = (μ-o)ᵀΣ⁻¹(μ-o):
    //   tau_max = aᵀd / dᵀΣ⁻¹d,   m² = c - (aᵀd)² / dᵀΣ⁻¹d.
    struct ViewGaussian {
        double p00, p01, p02, p11, p12, p22;
        double ax, ay, az;
        double c;
        double m2_max; // alpha_max >= threshold  <=>  m² <= m2_max
        double opacity;
    };

    bool test(const Vec3 &d, std::uint32_t index, GaussianHit &out) const {
        const ViewGaussian &g = view_[index];
        const double num = g.ax * d.x() + g.ay * d.y() + g.az * d.z();
        if (!(num > 0.0)) return false;
        const double den = g.p00 * d.x() * d.x() + g.p11 * d.y() * d.y() + g.p22 * d.z() * d.z() +
                           2.0 * (g.p01 * d.x() * d.y() + g.p02 * d.x() * d.z() + g.p12 * d.y() * d.z());
        const double m2 = std::max(0.0, g.c - num * num / den);
        if (m2 > g.m2_max) return false;
        const double alpha = g.opacity * std::exp(-0.5 * falloff_ * m2);
        if (alpha < threshold_) return false;
        out = {index, num / den, alpha};
        return true;
    }

    /// Sorts hits and drops everything after the transmittance cutoff; returns the
    /// tau of the last kept hit (infinity when the cutoff is not reached).
    static double truncate(std::vector<GaussianHit> &hits, double min_transmittance) {
        std::sort(hits.begin(), hits.end(), hit_order);
        double t = 1.0;
        for (std::size_t k = 0; k < hits.size(); ++k) {
            t *= 1.0 - hits[k].alpha_max;
            if (t < min_transmittance) {
                hits.resize(k + 1);
                return hits[k].tau_max;
            }
        }
        return std::numeric_limits<double>::infinity();
    }

    /// Pixel-space bounding box of the rays with m² <= m2_max. With camera-space
    /// d = (u, v, 1) the condition is the quadratic form dᵀ M d <= 0,
    /// M = (c - K)·P_cam - a_cam a_camᵀ; for a Gaussian wholly in front of the
    /// camera this is an ellipse whose tangent lines come from the dual conic M⁻¹.
    bool conic_bounds(std::size_t i, double &xmin, double &xmax, double &ymin, double &ymax) const {
        const ViewGaussian &g = view_[i];
        if (!(g.c > g.m2_max)) return false;
        const Mat3 &rot = camera_.rotation;
        const Mat3 pc = rot.transpose() * gaussians_[i].precision * rot;
        const Vec3 ac = rot.transpose() * Vec3(g.ax, g.ay, g.az);
        const Mat3 m = (g.c - g.m2_max) * pc - ac * ac.transpose();
        if (!(m(0, 0) > 0.0) || !(m(0, 0) * m(1, 1) - m(0, 1) * m(0, 1) > 0.0)) return false;
        const Mat3 dual = m.inverse();
        if (!dual.allFinite() || dual(2, 2) == 0.0) return false;
        const double du = dual(0, 2) * dual(0, 2) - dual(0, 0) * dual(2, 2);
        const double dv = dual(1, 2) * dual(1, 2) - dual(1, 1) * dual(2, 2);
        if (!(du >= 0.0 && dv >= 0.0)) return false;
        const double u0 = (dual(0, 2) - std::sqrt(du)) / dual(2, 2), u1 = (dual(0, 2) + std::sqrt(du)) / dual(2, 2);
        const double v0 = (dual(1, 2) - std::sqrt(dv)) / dual(2, 2), v1 = (dual(1, 2) + std::sqrt(dv)) / dual(2, 2);
        xmin = camera_.focal.x() * std::min(u0, u1) + camera_.principal.x();
        xmax = camera_.focal.x() * std::max(u0, u1) + camera_.principal.x();
        ymin = camera_.focal.y() * std::min(v0, v1) + camera_.principal.y();
        ymax = camera_.focal.y() * std::max(v0, v1) + camera_.principal.y();
        return std::isfinite(xmin) && std::isfinite(xmax) && std::isfinite(ymin) && std::isfinite(ymax);
    }

    void build() {
        const int w = camera_.width, h = camera_.height;
        view_.resize(gaussians_.size());
        for (std::size_t i = 0; i < gaussians_.size(); ++i) {
            const auto &g = gaussians_[i];
            const Vec3 rel = g.mean - camera_.translation;
            const Vec3 a = g.precision * rel;
            const double bound = g.opacity >= threshold_ ? 2.0 * std::log(g.opacity / threshold_) / falloff_ : -1.0;
            const Mat3 &p = g.precision;
            view_[i] = {p(0, 0), p(0, 1), p(0, 2), p(1, 1), p(1, 2), p(2, 2), a.x(), a.y(), a.z(), rel.dot(a), bound * (1.0 + 1e-9),
                        g.opacity};
        }
        struct Rect {
            int x0, y0, x1, y1;
        };
        std::vector<Rect> rects(gaussians_.size(), Rect{0, 0, -1, -1});
        std::vector<double> near(gaussians_.size(), 0.0);
        for (std::size_t i = 0; i < gaussians_.size(); ++i) {
            const auto &g = gaussians_[i];
            if (g.opacity < threshold_) continue;
            const double k = std::sqrt(std::max(0.0, 2.0 * std::log(g.opacity / threshold_) / falloff_)) + 1e-9;
            const Mat3 ext = k * g.axes;
            double zmin = 1e300, xmin = 1e300, xmax = -1e300, ymin = 1e300, ymax = -1e300;
            bool any_front = false;
            std::array<Vec3, 8> corners; // oriented box around the threshold ellipsoid
            for (int c = 0; c < 8; ++c) {
                const Vec3 s((c & 1) ? 1 : -1, (c & 2) ? 1 : -1, (c & 4) ? 1 : -1);
                corners[c] = camera_.to_camera(g.mean + ext * s);
                zmin = std::min(zmin, corners[c].z());
                any_front = any_front || corners[c].z() > 0.0;
            }
            if (!any_front) continue; // wholly behind the camera: tau_max <= 0 for every pixel ray
            // A unit ray with camera-space direction d reaches depth z at tau = z/d_z >= z.
            near[i] = std::max(0.0, zmin);
            if (zmin <= 1e-9) {
                rects[i] = {0, 0, w - 1, h - 1};
                continue;
            }
            if (!conic_bounds(i, xmin, xmax, ymin, ymax)) {
                for (const auto &c : corners) {
                    const double x = camera_.focal.x() * c.x() / c.z() + camera_.principal.x();
                    const double y = camera_.focal.y() * c.y() / c.z() + camera_.principal.y();
                    xmin = std::min(xmin, x), xmax = std::max(xmax, x);
                    ymin = std::min(ymin, y), ymax = std::max(ymax, y);
                }
            }
            auto px = [](double v) { return static_cast<int>(std::floor(std::clamp(v, -1e7, 1e7))); };
            const int x0 = std::max(0, px(xmin - 1e-3));
            const int y0 = std::max(0, px(ymin - 1e-3));
            const int x1 = std::min(w - 1, px(xmax + 1e-3));
            const int y1 = std::min(h - 1, px(ymax + 1e-3));
            if (x0 <= x1 && y0 <= y1) rects[i] = {x0, y0, x1, y1};
        }
        offsets_.assign(static_cast<std::size_t>(w) * h + 1, 0);
        for (const auto &r : rects)
            for (int y = r.y0; y <= r.y1; ++y)
                for (int x = r.x0; x <= r.x1; ++x) ++offsets_[static_cast<std::size_t>(y) * w + x + 1];
        for (std::size_t p = 1; p < offsets_.size(); ++p) offsets_[p] += offsets_[p - 1];
        bins_.resize(offsets_.back());
        std::vector<std::size_t> fill(offsets_.begin(), offsets_.end() - 1);
        for (std::size_t i = 0; i < rects.size(); ++i) {
            const auto &r = rects[i];
            for (int y = r.y0; y <= r.y1; ++y)
                for (int x = r.x0; x <= r.x1; ++x) bins_[fill[static_cast<std::size_t>(y) * w + x]++] = static_cast<std::uint32_t>(i);
        }
        depth_bound_.resize(bins_.size());
        for (std::size_t p = 0; p + 1 < offsets_.size(); ++p) {
            const auto first = bins_.begin() + static_cast<std::ptrdiff_t>(offsets_[p]);
            const auto last = bins_.begin() + static_cast<std::ptrdiff_t>(offsets_[p + 1]);
            std::sort(first, last, [&](std::uint32_t a, std::uint32_t b) { return near[a] < near[b] || (near[a] == near[b] && a < b); });
            for (std::size_t k = offsets_[p]; k < offsets_[p + 1]; ++k) depth_bound_[k] = near[bins_[k]];
        }
    }

    Camera camera_;
    std::span<const PreparedGaussian> gaussians_;
    double threshold_;
    double falloff_;
    std::vector<std::size_t> offsets_;
    std::vector<std::uint32_t> bins_;
    std::vector<ViewGaussian> view_;
    std::vector<double> depth_bound_; // per bin entry: lower bound on tau_max, ascending within a pixel
};

// ---------------------------------------------------------------------------
// Material lifting

struct LiftConfig {
    int supersample = 16;          // n: n×n subrays per pixel
    double hit_threshold = 0.05;   // minimum alpha_max for a Gaussian to count as intersected
    double falloff = 1.0;
    double min_transmittance = 1e-3; // a subray stops assigning once its transmittance drops below this; 0 = all hits
    int workers = 0;
};

/// Per (gaussian, view) list of material samples gathered from the pixels of its footprint.
class FootprintAccumulator {
public:
    FootprintAccumulator(std::size_t gaussians, std::size_t views)
        : gaussians_(gaussians), views_(views), lists_(gaussians * views) {}

    std::size_t gaussian_count() const { return gaussians_; }
    std::size_t view_count() const { return views_; }
    std::vector<MaterialSample> &at(std::size_t g, std::size_t v) { return lists_[g * views_ + v]; }
    const std::vector<MaterialSample> &at(std::size_t g, std::size_t v) const { return lists_[g * views_ + v]; }

private:
    std::size_t gaussians_;
    std::size_t views_;
    std::vector<std::vector<MaterialSample>> lists_;
};

/// Traces supersample² subrays per pixel of one view and appends each pixel's
/// material once to every Gaussian any of its subrays hit.
inline void collect_footprints(std::size_t view, const Camera &camera, const MaterialMaps &maps,
                               std::span<const GaussianPrimitive> gaussians, const LiftConfig &config,
                               FootprintAccumulator &acc, std::span<const PreparedGaussian> prepared = {}) {
    if (!maps.matches(camera.width, camera.height))
        throw ValidationError("collect_footprints: material maps do not match camera resolution");
    if (config.supersample < 1) throw InvalidParameter("collect_footprints: supersample must be >= 1");
    if (acc.gaussian_count() != gaussians.size() || view >= acc.view_count())
        throw InvalidParameter("collect_footprints: accumulator shape mismatch");

    std::vector<PreparedGaussian> owned;
    if (prepared.empty()) {
        owned = prepare_gaussians(gaussians);
        prepared = owned;
    }
    const ViewTracer tracer(camera, prepared, config.hit_threshold, config.falloff);
    const int w = camera.width, h = camera.height, n = config.supersample;

    std::vector<std::vector<std::uint32_t>> pixel_hits(static_cast<std::size_t>(w) * h);
    parallel_chunks(static_cast<std::size_t>(h), 1, config.workers, [&](std::size_t, std::size_t y0, std::size_t y1) {
        std::vector<GaussianHit> hits;
        std::vector<std::size_t> stamp(gaussians.size(), std::numeric_limits<std::size_t>::max());
        for (int y = static_cast<int>(y0); y < static_cast<int>(y1); ++y)
            for (int x = 0; x < w; ++x) {
                const std::size_t p = static_cast<std::size_t>(y) * w + x;
                auto &set = pixel_hits[p];
                if (tracer.candidates(x, y).empty()) continue;
                for (int sy = 0; sy < n; ++sy)
                    for (int sx = 0; sx < n; ++sx) {
                        const Ray ray = camera.ray(x + (sx + 0.5) / n, y + (sy + 0.5) / n);
                        tracer.front_hits(ray, x, y, config.min_transmittance, hits);
                        for (const auto &hit : hits) {
                            if (stamp[hit.gaussian_index] == p) continue;
                            stamp[hit.gaussian_index] = p;
                            set.push_back(hit.gaussian_index);
                        }
                    }
                std::sort(set.begin(), set.end());
            }
    });
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const auto &set = pixel_hits[static_cast<std::size_t>(y) * w + x];
            if (set.empty()) continue;
            const MaterialSample m = maps.sample(x, y);
            for (std::uint32_t g : set) acc.at(g, view).push_back(m);
        }
}

/// Median with the midpoint convention for even counts.
inline double median(std::vector<double> values) {
    if (values.empty()) throw InvalidParameter("median of an empty set");
    const std::size_t mid = values.size() / 2;
    std::nth_element(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(mid), values.end());
    const double upper = values[mid];
    if (values.size() % 2 == 1) return upper;
    const double lower = *std::max_element(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(mid));
    return 0.5 * (lower + upper);
}

/// Componentwise median of a list of material samples.
inline MaterialSample median_material(std::span<const MaterialSample> samples) {
    std::array<double, 5> out{};
    std::vector<double> values(samples.size());
    for (int c = 0; c < 5; ++c) {
        for (std::size_t i = 0; i < samples.size(); ++i) values[i] = samples[i].to_array()[c];
        out[c] = median(values);
    }
    return MaterialSample::from_array(out);
}

struct LiftResult {
    std::vector<GaussianPrimitive> gaussians; // survivors with per_view filled
    std::vector<std::size_t> kept;            // input index of each survivor
    std::size_t culled = 0;
};

inline LiftResult lift_materials_median(const FootprintAccumulator &acc, std::span<const GaussianPrimitive> gaussians) {
    if (acc.gaussian_count() != gaussians.size()) throw InvalidParameter("lift: accumulator/gaussian count mismatch");
    LiftResult result;
    for (std::size_t g = 0; g < gaussians.size(); ++g) {
        GaussianPrimitive out = gaussians[g];
        out.per_view.assign(acc.view_count(), ViewMaterial{});
        bool any = false;
        for (std::size_t v = 0; v < acc.view_count(); ++v) {
            const auto &list = acc.at(g, v);
            if (list.empty()) continue;
            out.per_view[v] = {median_material(list), true};
            any = true;
        }
        if (!any) {
            ++result.culled;
            continue;
        }
        result.kept.push_back(g);
        result.gaussians.push_back(std::move(out));
    }
    return result;
}

/// Lifts every view's material maps onto the bundle's Gaussians.
inline LiftResult lift_scene(const SceneBundle &bundle, const LiftConfig &config) {
    if (!bundle.material_maps) throw ValidationError("lift: scene has no material maps");
    const auto prepared = prepare_gaussians(bundle.gaussians);
    FootprintAccumulator acc(bundle.gaussians.size(), bundle.view_count());
    for (std::size_t v = 0; v < bundle.view_count(); ++v)
        collect_footprints(v, bundle.cameras[v], (*bundle.material_maps)[v], bundle.gaussians, config, acc, prepared);
    return lift_materials_median(acc, bundle.gaussians);
}

// ---------------------------------------------------------------------------
// Compositing

struct CompositeConfig {
    double hit_threshold = 0.01;
    double falloff = 1.0;
    double min_transmittance = 1e-3;
    int workers = 0;
};

/// Per pixel: front-to-back (gaussian, weight) pairs with w_k = α_k·Π_{j<k}(1-α_j).
/// Valid as long as geometry and opacity do not change.
struct CompositingCache {
    int width = 0;
    int height = 0;
    std::vector<std::size_t> offsets; // width*height + 1
    std::vector<std::uint32_t> gaussian;
    std::vector<double> weight;
    std::vector<double> tau;

    std::size_t pixel_count() const { return static_cast<std::size_t>(width) * height; }
    std::size_t begin(std::size_t p) const { return offsets[p]; }
    std::size_t end(std::size_t p) const { return offsets[p + 1]; }
    double alpha(std::size_t p) const {
        double a = 0.0;
        for (std::size_t k = begin(p); k < end(p); ++k) a += weight[k];
        return a;
    }

    /// Binary dump for inspection; the layout is not a stability contract.
    void dump(const std::filesystem::path &path) const {
        std::ofstream out(path, std::ios::binary);
        const std::uint64_t n = gaussian.size();
        out.write(reinterpret_cast<const char *>(&width), sizeof width);
        out.write(reinterpret_cast<const char *>(&height), sizeof height);
        out.write(reinterpret_cast<const char *>(&n), sizeof n);
        out.write(reinterpret_cast<const char *>(offsets.data()), static_cast<std::streamsize>(offsets.size() * sizeof(std::size_t)));
        out.write(reinterpret_cast<const char *>(gaussian.data()), static_cast<std::streamsize>(n * sizeof(std::uint32_t)));
        out.write(reinterpret_cast<const char *>(weight.data()), static_cast<std::streamsize>(n * sizeof(double)));
        out.write(reinterpret_cast<const char *>(tau.data()), static_cast<std::streamsize>(n * sizeof(double)));
    }
};

inline CompositingCache build_compositing_cache(const Camera &camera, std::span<const GaussianPrimitive> gaussians,
                                                const CompositeConfig &config,
                                                std::span<const PreparedGaussian> prepared = {}) {
    std::vector<PreparedGaussian> owned;
    if (prepared.empty()) {
        owned = prepare_gaussians(gaussians);
        prepared = owned;
    }
    const ViewTracer tracer(camera, prepared, config.hit_threshold, config.falloff);
    const int w = camera.width, h = camera.height;
    struct Entry {
        std::uint32_t g;
        double w, tau;
    };
    std::vector<std::vector<Entry>> rows(static_cast<std::size_t>(h));
    std::vector<std::vector<std::size_t>> row_counts(static_cast<std::size_t>(h));
    parallel_chunks(static_cast<std::size_t>(h), 1, config.workers, [&](std::size_t, std::size_t y0, std::size_t y1) {
        std::vector<GaussianHit> hits;
        for (std::size_t y = y0; y < y1; ++y) {
            auto &entries = rows[y];
            auto &counts = row_counts[y];
            counts.assign(static_cast<std::size_t>(w), 0);
            for (int x = 0; x < w; ++x) {
                tracer.front_hits(camera.ray(x + 0.5, y + 0.5), x, static_cast<int>(y), config.min_transmittance, hits);
                double transmittance = 1.0;
                for (const auto &hit : hits) {
                    entries.push_back({hit.gaussian_index, hit.alpha_max * transmittance, hit.tau_max});
                    ++counts[static_cast<std::size_t>(x)];
                    transmittance *= 1.0 - hit.alpha_max;
                }
            }
        }
    });
    CompositingCache cache;
    cache.width = w;
    cache.height = h;
    cache.offsets.assign(cache.pixel_count() + 1, 0);
    std::size_t p = 0;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x, ++p) cache.offsets[p + 1] = cache.offsets[p] + row_counts[y][x];
    cache.gaussian.reserve(cache.offsets.back());
    for (const auto &entries : rows)
        for (const auto &e : entries) {
            cache.gaussian.push_back(e.g);
            cache.weight.push_back(e.w);
            cache.tau.push_back(e.tau);
        }
    return cache;
}

struct GBuffer {
    Image basecolor; // 3
    Image roughness; // 1
    Image metallic;  // 1
    Image normal;    // 3, unit where alpha > 0.01
    Image alpha;     // 1
    Image depth;     // 1

    /// Material maps with coverage divided out (A/alpha); zero where alpha <= threshold.
    MaterialMaps normalized_materials(double alpha_threshold = 0.01) const {
        MaterialMaps maps = MaterialMaps::blank(alpha.width, alpha.height);
        for (int y = 0; y < alpha.height; ++y)
            for (int x = 0; x < alpha.width; ++x) {
                const double a = alpha.at(x, y);
                if (a <= alpha_threshold) continue;
                for (int c = 0; c < 3; ++c) maps.basecolor.at(x, y, c) = static_cast<float>(basecolor.at(x, y, c) / a);
                maps.roughness.at(x, y) = static_cast<float>(roughness.at(x, y) / a);
                maps.metallic.at(x, y) = static_cast<float>(metallic.at(x, y) / a);
            }
        return maps;
    }
};

/// Resolves a cache into G-buffer channels; `materials[i]` is the attribute of gaussians[i].
inline GBuffer composite_gbuffer(const CompositingCache &cache, std::span<const GaussianPrimitive> gaussians,
                                 std::span<const MaterialSample> materials) {
    if (materials.size() != gaussians.size()) throw InvalidParameter("composite_gbuffer: one material per Gaussian required");
    const int w = cache.width, h = cache.height;
    GBuffer gb{Image(w, h, 3), Image(w, h, 1), Image(w, h, 1), Image(w, h, 3), Image(w, h, 1), Image(w, h, 1)};
    std::size_t p = 0;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x, ++p) {
            Vec3 base = Vec3::Zero(), normal = Vec3::Zero();
            double rough = 0, metal = 0, alpha = 0, depth = 0;
            for (std::size_t k = cache.begin(p); k < cache.end(p); ++k) {
                const std::uint32_t g = cache.gaussian[k];
                const double wk = cache.weight[k];
                base += wk * materials[g].basecolor;
                rough += wk * materials[g].roughness;
                metal += wk * materials[g].metallic;
                normal += wk * gaussians[g].normal;
                alpha += wk;
                depth += wk * cache.tau[k];
            }
            if (alpha > 0.01 && normal.norm() > 0) normal.normalize();
            for (int c = 0; c < 3; ++c) {
                gb.basecolor.at(x, y, c) = static_cast<float>(base[c]);
                gb.normal.at(x, y, c) = static_cast<float>(normal[c]);
            }
            gb.roughness.at(x, y) = static_cast<float>(rough);
            gb.metallic.at(x, y) = static_cast<float>(metal);
            gb.alpha.at(x, y) = static_cast<float>(alpha);
            gb.depth.at(x, y) = static_cast<float>(depth / std::max(alpha, 1e-12));
        }
    return gb;
}

inline std::pair<GBuffer, CompositingCache> composite_gbuffer(const Camera &camera,
                                                              std::span<const GaussianPrimitive> gaussians,
                                                              std::span<const MaterialSample> materials,
                                                              const CompositeConfig &config = {}) {
    CompositingCache cache = build_compositing_cache(camera, gaussians, config);
    GBuffer gb = composite_gbuffer(cache, gaussians, materials);
    return {std::move(gb), std::move(cache)};
}

/// Collects each Gaussian's merged material; throws if any is missing.
inline std::vector<MaterialSample> merged_materials(std::span<const GaussianPrimitive> gaussians) {
    std::vector<MaterialSample> out;
    out.reserve(gaussians.size());
    for (const auto &g : gaussians) {
        if (!g.merged) throw ValidationError("gaussian has no merged material");
        out.push_back(*g.merged);
    }
    return out;
}

inline std::vector<MaterialSample> reference_materials(std::span<const GaussianPrimitive> gaussians) {
    std::vector<MaterialSample> out;
    out.reserve(gaussians.size());
    for (const auto &g : gaussians) {
        if (!g.reference) throw ValidationError("gaussian has no reference material");
        out.push_back(*g.reference);
    }
    return out;
}

} // namespace matlift
