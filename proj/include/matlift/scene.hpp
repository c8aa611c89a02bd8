#pragma once

#include "matlift/core.hpp"
#include "matlift/image.hpp"

#include <Eigen/Cholesky>

#include <array>
#include <optional>
#include <span>
#include <vector>

namespace matlift {

/// Base color, roughness and metallic of one surface point. All components live in [0,1].
struct MaterialSample {
    Vec3 basecolor = Vec3::Zero();
    double roughness = 0.0;
    double metallic = 0.0;

    static constexpr int kComponents = 5;

    MaterialSample clamped() const {
        return {basecolor.unaryExpr([](double v) { return clamp01(v); }), clamp01(roughness), clamp01(metallic)};
    }
    std::array<double, kComponents> to_array() const {
        return {basecolor.x(), basecolor.y(), basecolor.z(), roughness, metallic};
    }
    static MaterialSample from_array(const std::array<double, kComponents> &a) {
        return {Vec3(a[0], a[1], a[2]), a[3], a[4]};
    }
    bool in_unit_range() const {
        return basecolor.minCoeff() >= 0 && basecolor.maxCoeff() <= 1 && roughness >= 0 && roughness <= 1 &&
               metallic >= 0 && metallic <= 1;
    }

    friend bool operator==(const MaterialSample &, const MaterialSample &) = default;
};

/// One per-view slot of a lifted Gaussian.
struct ViewMaterial {
    MaterialSample value;
    bool seen = false;

    friend bool operator==(const ViewMaterial &, const ViewMaterial &) = default;
};

struct Ray {
    Vec3 origin = Vec3::Zero();
    Vec3 direction = Vec3::UnitZ();
};

/// Σ = R·diag(scale²)·Rᵀ. Throws InvalidParameter for non-positive scale or a zero quaternion.
inline Mat3 covariance_from_scale_rotation(const Vec3 &scale, const Quat &rotation) {
    if (!(scale.minCoeff() > 0.0) || !scale.allFinite())
        throw InvalidParameter("covariance: scale components must be positive");
    const double n = rotation.norm();
    if (!(n > 1e-12) || !std::isfinite(n)) throw InvalidParameter("covariance: zero quaternion");
    const Mat3 r = rotation.normalized().toRotationMatrix();
    return r * scale.array().square().matrix().asDiagonal() * r.transpose();
}

/// Σ⁻¹ built from the factors directly, avoiding a general 3×3 inversion.
inline Mat3 precision_from_scale_rotation(const Vec3 &scale, const Quat &rotation) {
    if (!(scale.minCoeff() > 0.0) || !scale.allFinite())
        throw InvalidParameter("precision: scale components must be positive");
    const double n = rotation.norm();
    if (!(n > 1e-12) || !std::isfinite(n)) throw InvalidParameter("precision: zero quaternion");
    const Mat3 r = rotation.normalized().toRotationMatrix();
    const Vec3 inv = scale.array().square().inverse().matrix();
    if (!inv.allFinite()) throw NumericalError("precision: degenerate scale");
    return r * inv.asDiagonal() * r.transpose();
}

struct GaussianPrimitive {
    Vec3 mean = Vec3::Zero();
    Vec3 scale = Vec3::Ones();
    Quat rotation = Quat::Identity();
    double opacity = 1.0;
    Vec3 normal = Vec3::UnitZ();
    std::vector<ViewMaterial> per_view; // empty until lifted
    std::optional<MaterialSample> merged;
    std::optional<MaterialSample> reference; // ground truth, synthetic scenes only

    Mat3 covariance() const { return covariance_from_scale_rotation(scale, rotation); }
    Mat3 precision() const { return precision_from_scale_rotation(scale, rotation); }

    int seen_count() const {
        int n = 0;
        for (const auto &s : per_view) n += s.seen ? 1 : 0;
        return n;
    }

    void validate() const {
        if (!mean.allFinite()) throw ValidationError("gaussian: non-finite mean");
        if (!(scale.minCoeff() > 0.0) || !scale.allFinite()) throw ValidationError("gaussian: scale must be positive");
        if (std::abs(rotation.norm() - 1.0) > 1e-6) throw ValidationError("gaussian: rotation must be a unit quaternion");
        if (!(opacity > 0.0 && opacity <= 1.0)) throw ValidationError("gaussian: opacity must lie in (0,1]");
        if (std::abs(normal.norm() - 1.0) > 1e-6) throw ValidationError("gaussian: normal must be unit length");
    }

    friend bool operator==(const GaussianPrimitive &a, const GaussianPrimitive &b) {
        return a.mean == b.mean && a.scale == b.scale && a.rotation.coeffs() == b.rotation.coeffs() &&
               a.opacity == b.opacity && a.normal == b.normal && a.per_view == b.per_view && a.merged == b.merged &&
               a.reference == b.reference;
    }
};

/// Pinhole camera, OpenCV convention: +x right, +y down, +z forward in camera space.
/// Pixel (x, y) spans [x, x+1)×[y, y+1); its center is at (x+0.5, y+0.5).
struct Camera {
    Vec2 focal = Vec2(1, 1);
    Vec2 principal = Vec2(0.5, 0.5);
    int width = 1;
    int height = 1;
    Mat3 rotation = Mat3::Identity(); // world_from_camera
    Vec3 translation = Vec3::Zero();  // camera center in world space

    Ray ray(double px, double py) const {
        const Vec3 d((px - principal.x()) / focal.x(), (py - principal.y()) / focal.y(), 1.0);
        return {translation, (rotation * d).normalized()};
    }
    Vec3 to_camera(const Vec3 &world) const { return rotation.transpose() * (world - translation); }

    void validate() const {
        if (!(focal.minCoeff() > 0.0)) throw ValidationError("camera: focal length must be positive");
        if (width <= 0 || height <= 0) throw ValidationError("camera: resolution must be positive");
        if (principal.x() < 0 || principal.x() > width || principal.y() < 0 || principal.y() > height)
            throw ValidationError("camera: principal point outside the image");
        if (!(rotation.transpose() * rotation).isIdentity(1e-6) || rotation.determinant() < 0)
            throw ValidationError("camera: rotation is not orthonormal");
    }

    /// Camera at `eye` looking at `target`; `fov_y_deg` is the vertical field of view.
    static Camera look_at(const Vec3 &eye, const Vec3 &target, const Vec3 &up, double fov_y_deg, int w, int h) {
        Camera cam;
        cam.width = w;
        cam.height = h;
        const double f = 0.5 * h / std::tan(0.5 * fov_y_deg * kPi / 180.0);
        cam.focal = Vec2(f, f);
        cam.principal = Vec2(0.5 * w, 0.5 * h);
        const Vec3 z = (target - eye).normalized();
        Vec3 x = z.cross(up);
        if (x.norm() < 1e-8) x = z.cross(std::abs(z.x()) < 0.9 ? Vec3::UnitX() : Vec3::UnitY());
        x.normalize();
        const Vec3 y = z.cross(x); // points "down" in the image
        cam.rotation.col(0) = x;
        cam.rotation.col(1) = y;
        cam.rotation.col(2) = z;
        cam.translation = eye;
        return cam;
    }

    friend bool operator==(const Camera &, const Camera &) = default;
};

/// Equirectangular lookup: u = (atan2(x, -z)/2π + 0.5) mod 1, v = acos(y)/π, both in [0,1).
inline Vec2 direction_to_equirect(const Vec3 &dir) {
    double u = std::atan2(dir.x(), -dir.z()) / (2.0 * kPi) + 0.5;
    u -= std::floor(u);
    if (u >= 1.0) u = 0.0;
    double v = std::acos(std::clamp(dir.y(), -1.0, 1.0)) / kPi;
    if (v >= 1.0) v = std::nextafter(1.0, 0.0);
    return {u, v};
}

inline Vec3 equirect_to_direction(const Vec2 &uv) {
    const double phi = (uv.x() - 0.5) * 2.0 * kPi;
    const double theta = uv.y() * kPi;
    const double s = std::sin(theta);
    return {s * std::sin(phi), std::cos(theta), -s * std::cos(phi)};
}

/// Latitude–longitude radiance grid; row 0 is the +y pole.
struct EnvironmentMap {
    int height = 0;
    int width = 0;
    std::vector<float> radiance; // height*width*3, linear

    EnvironmentMap() = default;
    EnvironmentMap(int h, int w, float fill = 0.0f)
        : height(h), width(w), radiance(static_cast<std::size_t>(h) * w * 3, fill) {}

    std::size_t texel_count() const { return static_cast<std::size_t>(height) * width; }
    float &at(int row, int col, int c) { return radiance[(static_cast<std::size_t>(row) * width + col) * 3 + c]; }
    float at(int row, int col, int c) const { return radiance[(static_cast<std::size_t>(row) * width + col) * 3 + c]; }

    Vec3 texel_direction(int row, int col) const {
        return equirect_to_direction({(col + 0.5) / width, (row + 0.5) / height});
    }
    /// Δω = (2π/W)(π/H)·sin θ at the texel center.
    double texel_solid_angle(int row) const {
        return (2.0 * kPi / width) * (kPi / height) * std::sin(kPi * (row + 0.5) / height);
    }
    Vec3 lookup(const Vec3 &dir) const {
        const Vec2 uv = direction_to_equirect(dir);
        const int col = std::min(width - 1, static_cast<int>(uv.x() * width));
        const int row = std::min(height - 1, static_cast<int>(uv.y() * height));
        return {at(row, col, 0), at(row, col, 1), at(row, col, 2)};
    }

    void validate() const {
        if (height < 2 || width < 2) throw ValidationError("environment map: at least 2x2 texels required");
        if (radiance.size() != texel_count() * 3) throw ValidationError("environment map: radiance size mismatch");
        for (float v : radiance)
            if (!(v >= 0.0f) || !std::isfinite(v)) throw ValidationError("environment map: texels must be finite and >= 0");
    }

    Image to_image() const {
        Image img(width, height, 3);
        img.data = radiance;
        return img;
    }
    static EnvironmentMap from_image(const Image &img) {
        if (img.channels != 3) throw ValidationError("environment map: RGB raster required");
        EnvironmentMap env(img.height, img.width);
        env.radiance = img.data;
        env.validate();
        return env;
    }

    friend bool operator==(const EnvironmentMap &, const EnvironmentMap &) = default;
};

/// Per-view material rasters; basecolor has 3 channels, roughness and metallic 1.
struct MaterialMaps {
    Image basecolor;
    Image roughness;
    Image metallic;

    MaterialSample sample(int x, int y) const {
        return {Vec3(basecolor.at(x, y, 0), basecolor.at(x, y, 1), basecolor.at(x, y, 2)), roughness.at(x, y),
                metallic.at(x, y)};
    }
    void set(int x, int y, const MaterialSample &m) {
        for (int c = 0; c < 3; ++c) basecolor.at(x, y, c) = static_cast<float>(m.basecolor[c]);
        roughness.at(x, y) = static_cast<float>(m.roughness);
        metallic.at(x, y) = static_cast<float>(m.metallic);
    }
    static MaterialMaps blank(int w, int h) { return {Image(w, h, 3), Image(w, h, 1), Image(w, h, 1)}; }

    bool matches(int w, int h) const {
        return basecolor.width == w && basecolor.height == h && basecolor.channels == 3 && roughness.width == w &&
               roughness.height == h && roughness.channels == 1 && metallic.width == w && metallic.height == h &&
               metallic.channels == 1;
    }
    /// Values as they come back from the 8-bit PNG files.
    MaterialMaps quantized() const {
        return {quantize_8bit(basecolor, true), quantize_8bit(roughness, false), quantize_8bit(metallic, false)};
    }

    friend bool operator==(const MaterialMaps &, const MaterialMaps &) = default;
};

struct SceneBundle {
    std::vector<GaussianPrimitive> gaussians;
    std::vector<Camera> cameras;
    std::vector<Image> images; // linear RGB, one per camera
    std::optional<std::vector<MaterialMaps>> material_maps;
    EnvironmentMap env;

    std::size_t view_count() const { return cameras.size(); }

    void validate() const {
        if (cameras.empty()) throw ValidationError("scene: at least one camera (view) is required");
        if (images.size() != cameras.size()) throw ValidationError("scene: image count must equal camera count");
        for (std::size_t v = 0; v < cameras.size(); ++v) {
            cameras[v].validate();
            if (images[v].width != cameras[v].width || images[v].height != cameras[v].height || images[v].channels != 3)
                throw ValidationError("scene: image " + std::to_string(v) + " does not match its camera resolution");
        }
        if (material_maps) {
            if (material_maps->size() != cameras.size())
                throw ValidationError("scene: material map count must equal view count");
            for (std::size_t v = 0; v < cameras.size(); ++v)
                if (!(*material_maps)[v].matches(cameras[v].width, cameras[v].height))
                    throw ValidationError("scene: material maps of view " + std::to_string(v) + " do not match the camera");
        }
        for (const auto &g : gaussians) {
            g.validate();
            if (!g.per_view.empty() && g.per_view.size() != cameras.size())
                throw ValidationError("scene: per-view material slots must equal the view count");
        }
        env.validate();
    }

    friend bool operator==(const SceneBundle &, const SceneBundle &) = default;
};

/// True when a Cholesky factorization of `m` succeeds.
inline bool is_spd(const Mat3 &m) {
    Eigen::LLT<Mat3> llt(m);
    return llt.info() == Eigen::Success;
}

} // namespace matlift
