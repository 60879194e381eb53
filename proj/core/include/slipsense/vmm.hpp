#pragma once

#include "slipsense/types.hpp"
#include "slipsense/vehsim.hpp"

#include <Eigen/Core>

#include <filesystem>
#include <span>
#include <vector>

namespace slipsense {

// --- VMM1: geometric kinematic model ----------------------------------------

struct Vmm1Estimate {
    double beta = 0.0;     // rad
    double yaw_rate = 0.0; // rad/s
};

/// theta_A = theta_sw / r_s; beta = atan(l_r/l tan theta_A); yaw = v tan(theta_A) / l.
/// Throws DataError when |theta_A| >= pi/2.
Vmm1Estimate vmm1_estimate(const SensorFrame& frame, const VehicleGeometry& geometry);

/// Absolute yaw-rate residual used as the VMM1 uncertainty.
inline double vmm1_uncertainty(double yaw_rate_vm1, double yaw_rate_obd) noexcept
{
    const double d = yaw_rate_vm1 - yaw_rate_obd;
    return d < 0.0 ? -d : d;
}

// --- VMM2: wheel-speed sideslip refined by a Kalman filter ------------------

inline constexpr double kStandstillSpeed = 0.5; // m/s

/// v_x = mean wheel speed, v_y = (v_fr - v_fl + v_rr - v_rl)/2, beta = atan(v_y/v_x).
/// Throws DataError when v_x <= 0.5 m/s.
double vmm2_raw(const SensorFrame& frame);

struct KfState {
    Eigen::Vector2d s = Eigen::Vector2d::Zero(); // [beta_st, yaw_rate_st]
    Eigen::Matrix2d P = Eigen::Matrix2d::Identity();
};

/// Linear single-track model discretised by forward Euler. The transition is
/// rebuilt from the current speed, which is clamped below `freeze_speed`.
struct SingleTrackModel {
    VehicleGeometry geometry;
    double dt = 1.0 / kDefaultRateHz;
    double freeze_speed = 3.0;

    Eigen::Matrix2d A(double speed) const;
    Eigen::Vector2d Bm(double speed) const;
};

struct KfConfig {
    SingleTrackModel model;
    Eigen::Matrix2d Q = Eigen::Vector2d(1e-6, 1e-4).asDiagonal();
    Eigen::Matrix2d R = Eigen::Vector2d(1e-3, 2e-5).asDiagonal();

    void validate() const;
};

struct KfStepResult {
    KfState state;
    Eigen::Vector2d innovation;
    Eigen::Matrix2d S; // innovation covariance
};

/// Predict with s = A s + Bm theta_A, P = A P A^T + Q, then update with an
/// identity measurement map. The posterior covariance is symmetrised.
/// Throws NumericalError (with condition number) when S is singular.
KfStepResult kf_step(const KfState& state, const Eigen::Matrix2d& A, const Eigen::Vector2d& Bm,
                     const Eigen::Matrix2d& Q, const Eigen::Matrix2d& R, double theta_A,
                     const Eigen::Vector2d& z);

KfState kf_step(const KfState& state, const KfConfig& cfg, double speed, double theta_A, const Eigen::Vector2d& z);

/// Per-frame outputs of both motion models for one scenario.
struct BranchTrace {
    std::vector<double> beta_vm1;
    std::vector<double> yaw_vm1;
    std::vector<double> delta_vm1;
    std::vector<double> beta_vm2;
    std::vector<double> yaw_vm2;
    std::vector<double> delta_vm2; // P[0,0]

    std::size_t size() const noexcept { return beta_vm1.size(); }
};

/// Runs VMM1 statelessly and the VMM2 filter sequentially over the scenario.
/// Below standstill speed VMM2 repeats its last valid estimate with the
/// uncertainty inflated ten-fold.
BranchTrace run_vmms(const Scenario& scenario, const KfConfig& cfg);

void write_branch_trace_csv(const std::filesystem::path& file, const Scenario& scenario, const BranchTrace& trace);

/// Measurement noise from training data: beta part from the wheel-speed
/// sideslip residual, yaw part from first differences of the onboard yaw rate.
Eigen::Matrix2d estimate_measurement_noise(std::span<const Scenario> train, const VehicleGeometry& geometry);

struct ProcessNoiseSearch {
    std::vector<double> beta_grid = {1e-8, 1e-7, 1e-6, 1e-5, 1e-4};
    std::vector<double> yaw_grid = {1e-6, 1e-5, 1e-4, 1e-3};
};

struct TunedKf {
    KfConfig config;
    double val_mae = 0.0; // rad
};

/// Diagonal Q by coarse grid search on validation MAE of the VMM2 sideslip.
TunedKf tune_process_noise(const KfConfig& base, std::span<const Scenario> val, const ProcessNoiseSearch& grid = {});

struct ResidualRecord {
    double e_beta = 0.0; // rad
    double e_yaw = 0.0;  // rad/s, against the onboard yaw rate
};

struct ResidualSet {
    std::vector<ResidualRecord> vmm1;
    std::vector<ResidualRecord> vmm2;
};

/// Absolute residuals at every evaluable step t in [L, n-F-1].
ResidualSet collect_residuals(std::span<const Scenario> scenarios, const KfConfig& cfg, const WindowConfig& window);

} // namespace slipsense
