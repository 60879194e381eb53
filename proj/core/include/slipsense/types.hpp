#pragma once

#include <Eigen/Core>

#include <array>
#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

namespace slipsense {

/// Number of onboard channels fed to the estimators.
inline constexpr std::size_t kInputDim = 9;
inline constexpr double kDefaultRateHz = 50.0;

/// One time step of onboard measurements. Angles in rad, speeds in m/s.
struct SensorFrame {
    double t = 0.0;
    double v_s = 0.0;          // speedometer
    double theta_sw = 0.0;     // steering-wheel angle
    double yaw_rate_obd = 0.0; // rad/s
    double a_y = 0.0;          // m/s^2
    double p_br = 0.0;         // bar
    double v_fl = 0.0;
    double v_fr = 0.0;
    double v_rl = 0.0;
    double v_rr = 0.0;

    /// Model input vector in channel order (v_s, theta_sw, yaw, a_y, p_br, v_fl, v_fr, v_rl, v_rr).
    std::array<double, kInputDim> features() const noexcept
    {
        return {v_s, theta_sw, yaw_rate_obd, a_y, p_br, v_fl, v_fr, v_rl, v_rr};
    }
    bool finite() const noexcept;
};

inline constexpr std::array<std::string_view, kInputDim> kFeatureNames = {
    "v_s", "theta_sw", "yaw_rate_obd", "a_y", "p_br", "v_fl", "v_fr", "v_rl", "v_rr"};

enum class Maneuver {
    slalom,
    constant_radius,
    step_steer,
    sine_with_dwell,
    double_lane_change,
    figure_eight,
};

inline constexpr std::array<Maneuver, 6> kAllManeuvers = {
    Maneuver::slalom,          Maneuver::constant_radius,    Maneuver::step_steer,
    Maneuver::sine_with_dwell, Maneuver::double_lane_change, Maneuver::figure_eight};

std::string_view to_string(Maneuver m) noexcept;
/// Throws DataError for unknown names.
Maneuver maneuver_from_string(std::string_view name);

/// Contiguous labelled recording: onboard frames plus ground-truth sideslip (rad).
struct Scenario {
    std::string id;
    Maneuver maneuver = Maneuver::slalom;
    std::vector<SensorFrame> frames;
    std::vector<double> beta_gt;
    double rate_hz = kDefaultRateHz;

    std::size_t size() const noexcept { return frames.size(); }
    /// Checks length agreement, uniform spacing (1e-6 s), monotone time,
    /// finite values and non-negative wheel speeds. Throws DataError.
    void validate(std::size_t min_length = 0) const;
};

struct WindowConfig {
    std::size_t L = 50; // observation steps
    std::size_t B = 12; // decoder context steps
    std::size_t F = 5;  // forecast steps
    std::size_t m = kInputDim;

    /// Frames needed for one window.
    std::size_t min_length() const noexcept { return L + F + 1; }
    void validate() const;
};

struct EstimateWithUncertainty {
    double beta = 0.0;
    double delta = 0.0;
};

/// Fusion input h[t].
struct FusionInput {
    double beta_ml = 0.0;
    double delta_ml = 0.0;
    double beta_vm1 = 0.0;
    double delta_vm1 = 0.0;
    double beta_vm2 = 0.0;
    double delta_vm2 = 0.0;

    Eigen::Matrix<double, 6, 1> vector() const noexcept
    {
        Eigen::Matrix<double, 6, 1> h;
        h << beta_ml, delta_ml, beta_vm1, delta_vm1, beta_vm2, delta_vm2;
        return h;
    }
    static FusionInput from_vector(const Eigen::Matrix<double, 6, 1>& h) noexcept
    {
        return {h[0], h[1], h[2], h[3], h[4], h[5]};
    }
    bool valid() const noexcept;
};

} // namespace slipsense
