#pragma once

// Deferred shading under an environment map.
//
// BRDF (metallic workflow):
//   f = (1-m)·b/π + D_GGX(n·h)·V_smith(n·l, n·v)·F_schlick(v·h)
//   a = r², F0 = lerp(0.04, b, m), F = F0 + (1-F0)(1-v·h)^5
// with V the height-correlated Smith visibility, V = G/(4 n·l n·v).
//
// Lighting is a direct sum over env texels, so the result is linear in every
// texel and its gradient with respect to the environment is exact. Point
// sampling a GGX lobe narrower than a texel aliases badly (a mirror-like lobe
// lands between texel centres or on one of them), so under an environment the
// lobe width is floored at the texel footprint: a_env = sqrt(a² + σ²) with
// σ = kLobeFootprint·π/H. brdf_eval keeps the plain point BRDF.

#include "matlift/scene.hpp"

#include <span>
#include <vector>

namespace matlift {

inline constexpr double kMinRoughness = 0.04;
inline constexpr double kDielectricF0 = 0.04;
inline constexpr double kLobeFootprint = 0.75;

struct ShadingSample {
    Vec3 basecolor = Vec3::Constant(0.5);
    double roughness = 0.5;
    double metallic = 0.0;
    Vec3 normal = Vec3::UnitZ();
    Vec3 view_dir = Vec3::UnitZ(); // surface -> eye
    double alpha = 1.0;
};

/// Texel directions, solid angles and radiance in double precision.
struct EnvLighting {
    int height = 0;
    int width = 0;
    std::vector<Vec3> direction;
    std::vector<double> solid_angle;
    std::vector<double> radiance; // 3 per texel
    double lobe_floor = 0.0;      // σ above

    std::size_t texel_count() const { return direction.size(); }

    static EnvLighting geometry(int h, int w) {
        if (h < 2 || w < 2) throw InvalidParameter("environment: at least 2x2 texels required");
        EnvironmentMap probe(h, w);
        EnvLighting env;
        env.height = h;
        env.width = w;
        env.lobe_floor = kLobeFootprint * kPi / h;
        for (int r = 0; r < h; ++r)
            for (int c = 0; c < w; ++c) {
                env.direction.push_back(probe.texel_direction(r, c));
                env.solid_angle.push_back(probe.texel_solid_angle(r));
            }
        env.radiance.assign(env.texel_count() * 3, 0.0);
        return env;
    }

    static EnvLighting from(const EnvironmentMap &map) {
        EnvLighting env = geometry(map.height, map.width);
        for (std::size_t i = 0; i < env.radiance.size(); ++i) env.radiance[i] = map.radiance[i];
        return env;
    }

    void set_radiance(std::span<const double> values) {
        if (values.size() != radiance.size()) throw InvalidParameter("environment: radiance size mismatch");
        radiance.assign(values.begin(), values.end());
    }

    EnvironmentMap to_map() const {
        EnvironmentMap map(height, width);
        for (std::size_t i = 0; i < radiance.size(); ++i) map.radiance[i] = static_cast<float>(radiance[i]);
        return map;
    }
};

namespace detail {

struct MaterialTerms {
    Vec3 kd;        // (1-m)·b/π
    Vec3 f0;        // lerp(0.04, b, m)
    double a;       // r_eff²
    double da_dr;   // 0 where roughness is clamped
};

/// `floor` is the environment lobe floor σ; 0 gives the point BRDF.
inline MaterialTerms material_terms(const ShadingSample &s, double floor = 0.0) {
    const double r = std::clamp(s.roughness, kMinRoughness, 1.0);
    const bool active = s.roughness >= kMinRoughness && s.roughness <= 1.0;
    const double a = std::sqrt(r * r * r * r + floor * floor);
    return {(1.0 - s.metallic) * s.basecolor / kPi,
            Vec3::Constant(kDielectricF0 * (1.0 - s.metallic)) + s.metallic * s.basecolor, a, active ? 2.0 * r * r * r / a : 0.0};
}

/// Specular lobe pieces for one light direction.
struct LobeTerms {
    double nl, nh, vh;
    Vec3 h;
    double d, vis, fresnel_s; // fresnel_s = (1 - v·h)^5
    double q, sl, den;
};

inline bool lobe_terms(const Vec3 &n, const Vec3 &v, double nv, double sv, const Vec3 &l, double a2, LobeTerms &t) {
    t.nl = n.dot(l);
    if (t.nl <= 0.0) return false;
    t.h = (l + v).normalized();
    t.nh = n.dot(t.h);
    t.vh = std::max(0.0, v.dot(t.h));
    t.q = t.nh * t.nh * (a2 - 1.0) + 1.0;
    t.d = a2 / (kPi * t.q * t.q);
    t.sl = std::sqrt(t.nl * t.nl * (1.0 - a2) + a2);
    t.den = t.nl * sv + nv * t.sl;
    t.vis = 0.5 / t.den;
    const double one_minus = 1.0 - t.vh;
    const double sq = one_minus * one_minus;
    t.fresnel_s = sq * sq * one_minus;
    return true;
}

} // namespace detail

/// BRDF value f(l, v) per channel. Zero for back-facing light or view.
inline Vec3 brdf_eval(const ShadingSample &s, const Vec3 &light_dir) {
    const double nv = s.normal.dot(s.view_dir);
    if (nv <= 0.0) return Vec3::Zero();
    const auto m = detail::material_terms(s);
    const double a2 = m.a * m.a;
    const double sv = std::sqrt(nv * nv * (1.0 - a2) + a2);
    detail::LobeTerms t;
    if (!detail::lobe_terms(s.normal, s.view_dir, nv, sv, light_dir, a2, t)) return Vec3::Zero();
    const Vec3 fresnel = m.f0 + (Vec3::Ones() - m.f0) * t.fresnel_s;
    return m.kd + t.d * t.vis * fresnel;
}

/// Texel sums shared by the radiance and the material gradients:
///   E = Σ L·Δω·n·l            P = Σ L·w·(1-s)          Q = Σ L·w·s
///   Pa, Qa = ∂P/∂a, ∂Q/∂a     w = Δω·n·l·D·V          s = (1-v·h)^5
struct ShadeTerms {
    Vec3 e = Vec3::Zero(), p = Vec3::Zero(), q = Vec3::Zero(), pa = Vec3::Zero(), qa = Vec3::Zero();
    double da_dr = 0.0;
    bool lit = false; // false when n·v <= 0
};

inline ShadeTerms shade_terms(const ShadingSample &s, const EnvLighting &env) {
    ShadeTerms out;
    const double nv = s.normal.dot(s.view_dir);
    if (nv <= 0.0) return out;
    out.lit = true;
    const auto m = detail::material_terms(s, env.lobe_floor);
    out.da_dr = m.da_dr;
    const double a = m.a, a2 = a * a;
    const double sv = std::sqrt(nv * nv * (1.0 - a2) + a2);
    const double dsv = a * (1.0 - nv * nv) / sv;
    detail::LobeTerms t;
    for (std::size_t i = 0; i < env.texel_count(); ++i) {
        if (!detail::lobe_terms(s.normal, s.view_dir, nv, sv, env.direction[i], a2, t)) continue;
        const double dw = env.solid_angle[i] * t.nl;
        const double w = dw * t.d * t.vis;
        const double dd_da = 2.0 * a / (kPi * t.q * t.q) - 4.0 * a * a2 * t.nh * t.nh / (kPi * t.q * t.q * t.q);
        const double dden_da = t.nl * dsv + nv * a * (1.0 - t.nl * t.nl) / t.sl;
        const double dvis_da = -0.5 * dden_da / (t.den * t.den);
        const double w_a = dw * (dd_da * t.vis + t.d * dvis_da);
        const Vec3 l(env.radiance[3 * i], env.radiance[3 * i + 1], env.radiance[3 * i + 2]);
        out.e += dw * l;
        out.p += (w * (1.0 - t.fresnel_s)) * l;
        out.q += (w * t.fresnel_s) * l;
        out.pa += (w_a * (1.0 - t.fresnel_s)) * l;
        out.qa += (w_a * t.fresnel_s) * l;
    }
    return out;
}

inline Vec3 radiance_from_terms(const ShadingSample &s, const ShadeTerms &t) {
    if (!t.lit) return Vec3::Zero();
    const auto m = detail::material_terms(s);
    return s.alpha * (m.kd.cwiseProduct(t.e) + m.f0.cwiseProduct(t.p) + t.q);
}

/// Outgoing radiance toward view_dir, premultiplied by alpha.
inline Vec3 shade_pixel(const ShadingSample &s, const EnvLighting &env) { return radiance_from_terms(s, shade_terms(s, env)); }

inline Vec3 shade_pixel(const ShadingSample &s, const EnvironmentMap &env) { return shade_pixel(s, EnvLighting::from(env)); }

struct ShadeGrad {
    Vec3 basecolor = Vec3::Zero();
    double roughness = 0.0;
    double metallic = 0.0;
    Vec3 normal = Vec3::Zero();
};

/// Material gradients from cached texel sums; no texel loop needed.
inline ShadeGrad material_grad_from_terms(const ShadingSample &s, const ShadeTerms &t, const Vec3 &grad_out) {
    ShadeGrad g;
    if (!t.lit) return g;
    const auto m = detail::material_terms(s);
    const Vec3 go = s.alpha * grad_out;
    for (int c = 0; c < 3; ++c) {
        g.basecolor[c] = go[c] * ((1.0 - s.metallic) / kPi * t.e[c] + s.metallic * t.p[c]);
        g.metallic += go[c] * (-s.basecolor[c] / kPi * t.e[c] + (s.basecolor[c] - kDielectricF0) * t.p[c]);
        g.roughness += go[c] * (m.f0[c] * t.pa[c] + t.qa[c]) * t.da_dr;
    }
    return g;
}

/// Accumulates ∂loss/∂texel into `grad_env` (3 per texel) and, when requested,
/// returns ∂loss/∂normal. The normal is treated as a free 3-vector (no renormalization).
inline Vec3 shade_backward_env(const ShadingSample &s, const EnvLighting &env, const Vec3 &grad_out,
                               std::span<double> grad_env, bool want_normal) {
    Vec3 grad_n = Vec3::Zero();
    const double nv = s.normal.dot(s.view_dir);
    if (nv <= 0.0) return grad_n;
    const auto m = detail::material_terms(s, env.lobe_floor);
    const double a2 = m.a * m.a;
    const double sv = std::sqrt(nv * nv * (1.0 - a2) + a2);
    const Vec3 go = s.alpha * grad_out;
    const Vec3 kd_go = m.kd.cwiseProduct(go);
    detail::LobeTerms t;
    for (std::size_t i = 0; i < env.texel_count(); ++i) {
        const Vec3 &l = env.direction[i];
        if (!detail::lobe_terms(s.normal, s.view_dir, nv, sv, l, a2, t)) continue;
        const double dw = env.solid_angle[i] * t.nl;
        const double w = dw * t.d * t.vis;
        // spec factor per channel: F0(1-s) + s
        const Vec3 spec = m.f0 * (1.0 - t.fresnel_s) + Vec3::Constant(t.fresnel_s);
        if (!grad_env.empty()) {
            for (int c = 0; c < 3; ++c) grad_env[3 * i + c] += go[c] * (m.kd[c] * dw + w * spec[c]);
        }
        if (want_normal) {
            const Vec3 rad(env.radiance[3 * i], env.radiance[3 * i + 1], env.radiance[3 * i + 2]);
            const double coef_diffuse = kd_go.dot(rad);
            const double coef_spec = go.cwiseProduct(spec).dot(rad);
            const double dd_dnh = -4.0 * a2 * t.nh * (a2 - 1.0) / (kPi * t.q * t.q * t.q);
            const double dden_dnl = sv + nv * t.nl * (1.0 - a2) / t.sl;
            const double dden_dnv = t.nl * nv * (1.0 - a2) / sv + t.sl;
            const double k = -0.5 / (t.den * t.den);
            const Vec3 dw_dn = env.solid_angle[i] * (t.d * t.vis * l + t.nl * dd_dnh * t.vis * t.h +
                                                     t.nl * t.d * k * (dden_dnl * l + dden_dnv * s.view_dir));
            grad_n += coef_diffuse * env.solid_angle[i] * l + coef_spec * dw_dn;
        }
    }
    return grad_n;
}

/// Full backward pass: material, normal and (accumulated) environment gradients.
inline ShadeGrad shade_backward(const ShadingSample &s, const EnvLighting &env, const Vec3 &grad_out,
                                std::span<double> grad_env) {
    ShadeGrad g = material_grad_from_terms(s, shade_terms(s, env), grad_out);
    g.normal = shade_backward_env(s, env, grad_out, grad_env, true);
    return g;
}

/// out = in^gamma, approximately undoing a display tone curve. Throws for gamma <= 0.
inline Image tonemap_inverse_gamma(const Image &img, double gamma = 1.8) {
    if (!(gamma > 0.0)) throw InvalidParameter("tonemap_inverse_gamma: gamma must be positive");
    Image out = img;
    for (auto &v : out.data) v = static_cast<float>(std::pow(clamp01(v), gamma));
    return out;
}

/// out = in^(1/gamma); the forward counterpart of tonemap_inverse_gamma.
inline Image tonemap_gamma(const Image &img, double gamma = 1.8) {
    if (!(gamma > 0.0)) throw InvalidParameter("tonemap_gamma: gamma must be positive");
    Image out = img;
    for (auto &v : out.data) v = static_cast<float>(std::pow(clamp01(v), 1.0 / gamma));
    return out;
}

/// Display encoding for PNG export: clamp to [0,1], then x^(1/2.2).
inline Image encode_display(const Image &linear) { return tonemap_gamma(linear, 2.2); }

} // namespace matlift
