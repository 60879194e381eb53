#include "slipsense/vmm.hpp"

#include "slipsense/dataset.hpp"
#include "slipsense/error.hpp"
#include "slipsense/numeric.hpp"

#include <Eigen/Eigenvalues>
#include <Eigen/LU>

#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>

namespace slipsense {

Vmm1Estimate vmm1_estimate(const SensorFrame& frame, const VehicleGeometry& g)
{
    if (!(g.r_s > 0.0)) {
        throw ConfigError("steering ratio must be positive");
    }
    const double theta_a = frame.theta_sw / g.r_s;
    if (!(std::abs(theta_a) < std::numbers::pi / 2.0)) {
        throw DataError("Ackermann angle outside (-pi/2, pi/2)");
    }
    const double t = std::tan(theta_a);
    return {std::atan(g.l_r / g.l * t), frame.v_s * t / g.l};
}

double vmm2_raw(const SensorFrame& f)
{
    const double vx = (f.v_fl + f.v_fr + f.v_rl + f.v_rr) / 4.0;
    if (!(vx > kStandstillSpeed)) {
        throw DataError("standstill: mean wheel speed <= 0.5 m/s");
    }
    const double vy = (f.v_fr - f.v_fl + f.v_rr - f.v_rl) / 2.0;
    return std::atan(vy / vx);
}

Eigen::Matrix2d SingleTrackModel::A(double speed) const
{
    const auto& g = geometry;
    const double v = std::max(speed, freeze_speed);
    const double lf = g.l_f();
    Eigen::Matrix2d Ac;
    Ac(0, 0) = -(g.c_f + g.c_r) / (g.mass * v);
    Ac(0, 1) = (g.c_r * g.l_r - g.c_f * lf) / (g.mass * v * v) - 1.0;
    Ac(1, 0) = (g.c_r * g.l_r - g.c_f * lf) / g.I_z;
    Ac(1, 1) = -(g.c_f * lf * lf + g.c_r * g.l_r * g.l_r) / (g.I_z * v);
    return Eigen::Matrix2d::Identity() + dt * Ac;
}

Eigen::Vector2d SingleTrackModel::Bm(double speed) const
{
    const auto& g = geometry;
    const double v = std::max(speed, freeze_speed);
    return dt * Eigen::Vector2d(g.c_f / (g.mass * v), g.c_f * g.l_f() / g.I_z);
}

namespace {

bool symmetric_psd(const Eigen::Matrix2d& M)
{
    if (!M.allFinite() || std::abs(M(0, 1) - M(1, 0)) > 1e-12 * (1.0 + M.cwiseAbs().maxCoeff())) {
        return false;
    }
    Eigen::SelfAdjointEigenSolver<Eigen::Matrix2d> es(M);
    return es.eigenvalues().minCoeff() >= -1e-15;
}

} // namespace

void KfConfig::validate() const
{
    model.geometry.validate();
    if (!(model.dt > 0.0)) {
        throw ConfigError("Kalman filter step must be positive");
    }
    if (!symmetric_psd(Q) || !symmetric_psd(R)) {
        throw ConfigError("Kalman Q and R must be symmetric positive semi-definite");
    }
}

KfStepResult kf_step(const KfState& state, const Eigen::Matrix2d& A, const Eigen::Vector2d& Bm,
                     const Eigen::Matrix2d& Q, const Eigen::Matrix2d& R, double theta_A, const Eigen::Vector2d& z)
{
    if (!z.allFinite() || !std::isfinite(theta_A)) {
        throw DataError("Kalman measurement and input must be finite");
    }
    const Eigen::Vector2d s_prior = A * state.s + Bm * theta_A;
    Eigen::Matrix2d P_prior = A * state.P * A.transpose() + Q;
    P_prior = 0.5 * (P_prior + P_prior.transpose()).eval();

    KfStepResult out;
    out.S = P_prior + R;
    Eigen::SelfAdjointEigenSolver<Eigen::Matrix2d> es(out.S, Eigen::EigenvaluesOnly);
    const double lo = es.eigenvalues().minCoeff();
    const double hi = es.eigenvalues().maxCoeff();
    if (!(lo > hi * 1e-14) || !(hi > 0.0)) {
        const double cond = lo > 0.0 ? hi / lo : std::numeric_limits<double>::infinity();
        throw NumericalError("singular innovation covariance (condition number " + format_double(cond) + ")");
    }
    out.innovation = z - s_prior;
    const Eigen::Matrix2d S_inv = out.S.inverse();
    const Eigen::Matrix2d K = P_prior * S_inv;
    out.state.s = s_prior + K * out.innovation;
    // Joseph form keeps P positive semi-definite under rounding.
    const Eigen::Matrix2d I_K = Eigen::Matrix2d::Identity() - K;
    Eigen::Matrix2d P = I_K * P_prior * I_K.transpose() + K * R * K.transpose();
    out.state.P = 0.5 * (P + P.transpose());
    return out;
}

KfState kf_step(const KfState& state, const KfConfig& cfg, double speed, double theta_A, const Eigen::Vector2d& z)
{
    return kf_step(state, cfg.model.A(speed), cfg.model.Bm(speed), cfg.Q, cfg.R, theta_A, z).state;
}

BranchTrace run_vmms(const Scenario& scenario, const KfConfig& cfg)
{
    const auto& g = cfg.model.geometry;
    const std::size_t n = scenario.size();
    BranchTrace tr;
    for (auto* v : {&tr.beta_vm1, &tr.yaw_vm1, &tr.delta_vm1, &tr.beta_vm2, &tr.yaw_vm2, &tr.delta_vm2}) {
        v->resize(n);
    }

    KfState state;
    bool initialised = false;
    double last_beta = 0.0;
    double last_yaw = 0.0;
    double last_delta = cfg.R(0, 0);
    for (std::size_t i = 0; i < n; ++i) {
        const auto& f = scenario.frames[i];
        const auto e1 = vmm1_estimate(f, g);
        tr.beta_vm1[i] = e1.beta;
        tr.yaw_vm1[i] = e1.yaw_rate;
        tr.delta_vm1[i] = vmm1_uncertainty(e1.yaw_rate, f.yaw_rate_obd);

        const double vx = (f.v_fl + f.v_fr + f.v_rl + f.v_rr) / 4.0;
        if (!(vx > kStandstillSpeed)) {
            tr.beta_vm2[i] = last_beta;
            tr.yaw_vm2[i] = last_yaw;
            tr.delta_vm2[i] = 10.0 * last_delta;
            continue;
        }
        const Eigen::Vector2d z(vmm2_raw(f), f.yaw_rate_obd);
        if (!initialised) {
            state.s = z;
            state.P = cfg.R;
            initialised = true;
        } else {
            const auto& prev = scenario.frames[i - 1];
            state = kf_step(state, cfg, prev.v_s, prev.theta_sw / g.r_s, z);
        }
        last_beta = state.s[0];
        last_yaw = state.s[1];
        last_delta = state.P(0, 0);
        tr.beta_vm2[i] = last_beta;
        tr.yaw_vm2[i] = last_yaw;
        tr.delta_vm2[i] = last_delta;
    }
    return tr;
}

void write_branch_trace_csv(const std::filesystem::path& file, const Scenario& scenario, const BranchTrace& trace)
{
    std::ofstream out(file, std::ios::binary);
    if (!out) {
        throw DataError("cannot open '" + file.string() + "' for writing");
    }
    out << "t,beta_vm1,delta_vm1,beta_vm2,delta_vm2\n";
    for (std::size_t i = 0; i < trace.size(); ++i) {
        out << format_double(scenario.frames[i].t) << ',' << format_double(trace.beta_vm1[i]) << ','
            << format_double(trace.delta_vm1[i]) << ',' << format_double(trace.beta_vm2[i]) << ','
            << format_double(trace.delta_vm2[i]) << '\n';
    }
}

Eigen::Matrix2d estimate_measurement_noise(std::span<const Scenario> train, const VehicleGeometry& geometry)
{
    (void)geometry;
    double sum = 0.0;
    double sum_sq = 0.0;
    std::size_t count = 0;
    double diff_sq = 0.0;
    std::size_t diff_count = 0;
    for (const auto& s : train) {
        for (std::size_t i = 0; i < s.size(); ++i) {
            const auto& f = s.frames[i];
            const double vx = (f.v_fl + f.v_fr + f.v_rl + f.v_rr) / 4.0;
            if (vx > kStandstillSpeed) {
                const double r = vmm2_raw(f) - s.beta_gt[i];
                sum += r;
                sum_sq += r * r;
                ++count;
            }
            if (i > 0) {
                const double d = f.yaw_rate_obd - s.frames[i - 1].yaw_rate_obd;
                diff_sq += d * d;
                ++diff_count;
            }
        }
    }
    if (count < 2 || diff_count < 2) {
        throw DataError("not enough moving frames to estimate measurement noise");
    }
    const double mean = sum / static_cast<double>(count);
    const double var_beta = sum_sq / static_cast<double>(count) - mean * mean;
    const double var_yaw = diff_sq / static_cast<double>(diff_count) / 2.0;
    Eigen::Matrix2d R = Eigen::Matrix2d::Zero();
    R(0, 0) = std::max(var_beta, 1e-10);
    R(1, 1) = std::max(var_yaw, 1e-12);
    return R;
}

TunedKf tune_process_noise(const KfConfig& base, std::span<const Scenario> val, const ProcessNoiseSearch& grid)
{
    if (val.empty()) {
        throw DataError("process noise search needs validation scenarios");
    }
    TunedKf best;
    best.val_mae = std::numeric_limits<double>::infinity();
    for (double qb : grid.beta_grid) {
        for (double qy : grid.yaw_grid) {
            KfConfig cfg = base;
            cfg.Q = Eigen::Vector2d(qb, qy).asDiagonal();
            double abs_sum = 0.0;
            std::size_t count = 0;
            for (const auto& s : val) {
                const auto tr = run_vmms(s, cfg);
                for (std::size_t i = 0; i < s.size(); ++i) {
                    abs_sum += std::abs(tr.beta_vm2[i] - s.beta_gt[i]);
                    ++count;
                }
            }
            const double mae = abs_sum / static_cast<double>(std::max<std::size_t>(count, 1));
            if (mae < best.val_mae) {
                best.val_mae = mae;
                best.config = cfg;
            }
        }
    }
    return best;
}

ResidualSet collect_residuals(std::span<const Scenario> scenarios, const KfConfig& cfg, const WindowConfig& window)
{
    ResidualSet out;
    for (const auto& s : scenarios) {
        const auto tr = run_vmms(s, cfg);
        const std::size_t count = window_count(s.size(), window);
        for (std::size_t k = 0; k < count; ++k) {
            const std::size_t t = first_window_end(window) + k;
            const double yaw = s.frames[t].yaw_rate_obd;
            out.vmm1.push_back({std::abs(tr.beta_vm1[t] - s.beta_gt[t]), std::abs(tr.yaw_vm1[t] - yaw)});
            out.vmm2.push_back({std::abs(tr.beta_vm2[t] - s.beta_gt[t]), std::abs(tr.yaw_vm2[t] - yaw)});
        }
    }
    return out;
}

} // namespace slipsense
