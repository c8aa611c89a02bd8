#pragma once

#include "matlift/core.hpp"

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

namespace matlift {

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

template <class Scalar>
struct AdamState {
    std::vector<Scalar> m;
    std::vector<Scalar> v;
    std::uint64_t step = 0;

    AdamState() = default;
    explicit AdamState(std::size_t n) : m(n, Scalar(0)), v(n, Scalar(0)) {}
    std::size_t size() const { return m.size(); }
    friend bool operator==(const AdamState &, const AdamState &) = default;
};

/// One bias-corrected Adam update in place.
template <class Scalar>
void adam_step(std::span<Scalar> params, std::span<const Scalar> grads, AdamState<Scalar> &state, double lr,
               const AdamConfig &config = {}) {
    if (params.size() != grads.size() || params.size() != state.size())
        throw InvalidParameter("adam_step: parameter, gradient and state sizes differ");
    ++state.step;
    const double t = static_cast<double>(state.step);
    const double c1 = 1.0 - std::pow(config.beta1, t);
    const double c2 = 1.0 - std::pow(config.beta2, t);
    const Scalar b1 = static_cast<Scalar>(config.beta1), b2 = static_cast<Scalar>(config.beta2);
    const Scalar step_size = static_cast<Scalar>(lr / c1);
    const Scalar inv_c2 = static_cast<Scalar>(1.0 / c2);
    const Scalar eps = static_cast<Scalar>(config.epsilon);
    for (std::size_t i = 0; i < params.size(); ++i) {
        const Scalar g = grads[i];
        state.m[i] = b1 * state.m[i] + (Scalar(1) - b1) * g;
        state.v[i] = b2 * state.v[i] + (Scalar(1) - b2) * g * g;
        params[i] -= step_size * state.m[i] / (std::sqrt(state.v[i] * inv_c2) + eps);
    }
}

} // namespace matlift
