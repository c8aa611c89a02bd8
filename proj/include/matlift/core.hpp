#pragma once

// Shared numeric aliases, error types and small helpers used by every module.

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <cmath>
#include <cstdint>
#include <numbers>
#include <stdexcept>
#include <string>

namespace matlift {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using Quat = Eigen::Quaterniond;

inline constexpr double kPi = std::numbers::pi;

/// Base class of every error thrown by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// A parameter violates its documented precondition (non-positive scale, gamma <= 0, ...).
class InvalidParameter : public Error {
public:
    using Error::Error;
};

/// Data failed a structural invariant (resolution mismatch, zero views, ...).
class ValidationError : public Error {
public:
    using Error::Error;
};

/// Numerical degeneracy such as a singular covariance.
class NumericalError : public Error {
public:
    using Error::Error;
};

/// Malformed input file. `offset()` is the byte position where decoding failed.
class ParseError : public Error {
public:
    ParseError(const std::string &what, std::uint64_t offset)
        : Error(what + " (at byte " + std::to_string(offset) + ")"), offset_(offset) {}

    std::uint64_t offset() const noexcept { return offset_; }

private:
    std::uint64_t offset_;
};

/// File carries a format version this build does not read.
class VersionMismatch : public Error {
public:
    using Error::Error;
};

inline double clamp01(double x) { return x < 0.0 ? 0.0 : (x > 1.0 ? 1.0 : x); }

/// SplitMix64 finalizer; used to derive independent, stateless random streams from (seed, key).
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t key = 0) {
    std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (key + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

} // namespace matlift
