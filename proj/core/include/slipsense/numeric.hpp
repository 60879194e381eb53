#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <string>
#include <string_view>

namespace slipsense {

inline constexpr double kGravity = 9.80665;

constexpr double deg2rad(double deg) noexcept { return deg * std::numbers::pi / 180.0; }
constexpr double rad2deg(double rad) noexcept { return rad * 180.0 / std::numbers::pi; }
constexpr double kmh2ms(double kmh) noexcept { return kmh / 3.6; }
constexpr double ms2kmh(double ms) noexcept { return ms * 3.6; }

/// log(1 + exp(x)) without overflow.
inline double softplus(double x) noexcept
{
    return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

inline double sigmoid(double x) noexcept
{
    if (x >= 0.0) {
        return 1.0 / (1.0 + std::exp(-x));
    }
    const double e = std::exp(x);
    return e / (1.0 + e);
}

/// Inverse of softplus for y > 0.
inline double softplus_inverse(double y) noexcept
{
    return y > 30.0 ? y : std::log(std::expm1(y));
}

/// Digamma function psi(x) for x > 0: upward recurrence to x >= 10, then the
/// asymptotic Bernoulli series.
double digamma(double x);

/// Shortest decimal text that parses back to the identical double.
std::string format_double(double v);

/// Strict decimal parse; throws DataError on trailing garbage or empty input.
double parse_double(std::string_view text);
long long parse_int(std::string_view text);

/// FNV-1a 64-bit, used for artifact fingerprints.
std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t seed = 0xcbf29ce484222325ULL);
std::string hex64(std::uint64_t v);

/// Derive an independent 64-bit seed from a base seed and a stream index.
std::uint64_t mix_seed(std::uint64_t base, std::uint64_t stream) noexcept;

} // namespace slipsense
