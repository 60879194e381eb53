#pragma once

#include "slipsense/types.hpp"

#include <Eigen/Core>

#include <cstdint>
#include <functional>
#include <map>
#include <vector>

namespace slipsense {

/// Planar vehicle parameters. Defaults approximate a small two-seater city car.
struct VehicleGeometry {
    double l = 1.87;        // wheelbase (m)
    double l_r = 1.02;      // rear axle to CoG (m)
    double track_w = 1.28;  // track width (m)
    double r_s = 21.0;      // steering ratio
    double mass = 880.0;    // kg
    double I_z = 800.0;     // kg m^2
    double c_f = 45000.0;   // front cornering stiffness (N/rad)
    double c_r = 60000.0;   // rear cornering stiffness (N/rad)
    double mu_sat = 0.9;    // lateral force saturation level

    double l_f() const noexcept { return l - l_r; }
    /// Per-axle lateral force limit.
    double axle_force_limit() const noexcept;
    void validate() const;
};

/// Lever arm from the CoG to the sensor mounting point.
struct MountingConfig {
    Eigen::Vector3d r_lever = Eigen::Vector3d::Zero();
};

/// Additive Gaussian noise per onboard channel (SI units).
struct NoiseSpec {
    double v_s = 0.05;
    double theta_sw = 0.0035;
    double yaw_rate = 0.004;
    double a_y = 0.08;
    double p_br = 0.1;
    double wheel = 0.04;
    std::uint64_t seed = 1;

    static NoiseSpec none() noexcept { return {0, 0, 0, 0, 0, 0, 1}; }
    void validate() const;
};

using TimeFunction = std::function<double(double)>;

/// Full simulation output: the noise-free scenario plus plant truth that the
/// onboard channels do not carry.
struct SimulatedRun {
    Scenario scenario;
    std::vector<double> heading;       // rad
    std::vector<double> yaw_rate;      // rad/s
    std::vector<double> speed;         // m/s
    std::vector<double> road_wheel;    // Ackermann angle (rad)
};

inline constexpr double kPlantStepHz = 200.0;

/// Integrates the nonlinear single-track plant (states beta, yaw rate,
/// heading) with RK4 at 200 Hz, decimated to `rate_hz`. Wheel speeds in the
/// returned scenario are exact rigid-body values; no noise is applied.
/// Throws NumericalError naming the step when |beta| exceeds pi/2.
SimulatedRun simulate(const TimeFunction& road_wheel_angle, const TimeFunction& speed, double duration,
                      const VehicleGeometry& geometry, double rate_hz = kDefaultRateHz);

/// Shape parameters of a maneuver; drawn from the seed by default.
struct ManeuverShape {
    double target_lateral_accel = 3.0; // m/s^2 at nominal speed
    double nominal_speed = 15.0;       // m/s
    double amplitude_scale = 1.0;      // 0 gives straight driving
};

/// Road-wheel steering program for a maneuver type. The seed varies timing
/// and small driver corrections.
TimeFunction steering_program(Maneuver maneuver, const ManeuverShape& shape, const VehicleGeometry& geometry,
                              double duration, std::uint64_t seed);

/// Simulates one maneuver. Requires duration >= 5 s.
SimulatedRun simulate_maneuver(Maneuver maneuver, double duration, const VehicleGeometry& geometry,
                               const TimeFunction& speed_profile, std::uint64_t seed,
                               const ManeuverShape& shape = {});

/// Rigid-body wheel speeds (fl, fr, rl, rr) projected on each wheel heading.
std::array<double, 4> wheel_speeds(double speed, double beta, double yaw_rate, double road_wheel_angle,
                                   const VehicleGeometry& geometry);

/// Recomputes wheel speeds from the plant state recorded in a noise-free
/// scenario and perturbs every onboard channel; ground truth stays exact.
Scenario synthesize_sensors(const Scenario& clean, const VehicleGeometry& geometry, const NoiseSpec& noise);

struct CogVelocity {
    Eigen::Vector3d v_cog;
    double beta_cog = 0.0;
};

/// v_cog = v_poi + omega x r. Throws DataError when |v_x| < 0.1 m/s.
CogVelocity transform_to_cog(const Eigen::Vector3d& v_poi, const Eigen::Vector3d& omega,
                             const Eigen::Vector3d& r_lever);

/// Relative frequency of each maneuver in a generated dataset.
using ManeuverMix = std::map<Maneuver, double>;
ManeuverMix default_mix();
/// Parses "slalom:1,figure_eight:0.5,..."; missing maneuvers get weight 0.
ManeuverMix parse_mix(std::string_view text);
std::string format_mix(const ManeuverMix& mix);

struct DatasetSpec {
    double hours = 0.5;
    ManeuverMix mix = default_mix();
    std::uint64_t seed = 7;
    double min_duration = 30.0; // s per scenario
    double max_duration = 60.0;
    VehicleGeometry geometry;
    NoiseSpec noise;
};

/// Generates scenarios until the requested total duration is covered.
std::vector<Scenario> generate_dataset(const DatasetSpec& spec);

} // namespace slipsense
