#include "slipsense/vehsim.hpp"

#include "slipsense/error.hpp"
#include "slipsense/numeric.hpp"

#include <Eigen/Geometry>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <sstream>

namespace slipsense {

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;
constexpr double kBrakeGain = 12.0;     // bar per m/s^2 of deceleration
constexpr double kMinPlantSpeed = 0.5;  // m/s, below this beta is meaningless

double smoothstep(double x) noexcept
{
    x = std::clamp(x, 0.0, 1.0);
    return x * x * (3.0 - 2.0 * x);
}

struct PlantState {
    double beta = 0.0;
    double yaw_rate = 0.0;
    double heading = 0.0;
};

struct PlantRates {
    double beta_dot = 0.0;
    double yaw_acc = 0.0;
    double heading_dot = 0.0;
};

/// Tire force with smooth saturation at +-limit.
double lateral_force(double stiffness, double slip, double limit) noexcept
{
    return limit * std::tanh(stiffness * slip / limit);
}

PlantRates plant_rates(const PlantState& s, double v, double delta, const VehicleGeometry& g)
{
    const double speed = std::max(v, kMinPlantSpeed);
    const double vx = speed * std::cos(s.beta);
    const double vy = speed * std::sin(s.beta);
    const double alpha_f = delta - std::atan2(vy + g.l_f() * s.yaw_rate, vx);
    const double alpha_r = -std::atan2(vy - g.l_r * s.yaw_rate, vx);
    const double limit = g.axle_force_limit();
    const double fyf = lateral_force(g.c_f, alpha_f, limit);
    const double fyr = lateral_force(g.c_r, alpha_r, limit);

    PlantRates r;
    r.beta_dot = (fyf * std::cos(delta - s.beta) + fyr * std::cos(s.beta)) / (g.mass * speed) - s.yaw_rate;
    r.yaw_acc = (g.l_f() * fyf * std::cos(delta) - g.l_r * fyr) / g.I_z;
    r.heading_dot = s.yaw_rate;
    return r;
}

PlantState advance(const PlantState& s, const PlantRates& k, double h) noexcept
{
    return {s.beta + h * k.beta_dot, s.yaw_rate + h * k.yaw_acc, s.heading + h * k.heading_dot};
}

double derivative(const TimeFunction& f, double t)
{
    constexpr double h = 1e-3;
    return (f(t + h) - f(std::max(t - h, 0.0))) / (t + h - std::max(t - h, 0.0));
}

struct PiecewiseLinear {
    std::vector<double> t;
    std::vector<double> v;
    double operator()(double x) const
    {
        if (x <= t.front()) {
            return v.front();
        }
        if (x >= t.back()) {
            return v.back();
        }
        const auto it = std::upper_bound(t.begin(), t.end(), x);
        const auto i = static_cast<std::size_t>(it - t.begin());
        const double w = (x - t[i - 1]) / (t[i] - t[i - 1]);
        return v[i - 1] + w * (v[i] - v[i - 1]);
    }
};

} // namespace

double VehicleGeometry::axle_force_limit() const noexcept { return mu_sat * mass * kGravity / 2.0; }

void VehicleGeometry::validate() const
{
    if (!(l > 0.0) || !(l_r > 0.0) || !(l_r < l)) {
        throw ConfigError("vehicle geometry requires 0 < l_r < l");
    }
    if (!(r_s > 0.0) || !(mass > 0.0) || !(I_z > 0.0) || !(c_f > 0.0) || !(c_r > 0.0)) {
        throw ConfigError("vehicle r_s, mass, I_z, c_f and c_r must be positive");
    }
    if (!(track_w > 0.0) || !(mu_sat > 0.0)) {
        throw ConfigError("vehicle track width and mu_sat must be positive");
    }
}

void NoiseSpec::validate() const
{
    for (double s : {v_s, theta_sw, yaw_rate, a_y, p_br, wheel}) {
        if (!(s >= 0.0) || !std::isfinite(s)) {
            throw ConfigError("noise standard deviations must be finite and non-negative");
        }
    }
}

std::array<double, 4> wheel_speeds(double speed, double beta, double yaw_rate, double road_wheel_angle,
                                   const VehicleGeometry& g)
{
    const double vx = speed * std::cos(beta);
    const double vy = speed * std::sin(beta);
    const double half = g.track_w / 2.0;
    // Contact point velocity = v_cog + yaw_rate x r, r = (x, y).
    auto point = [&](double x, double y) { return std::pair{vx - yaw_rate * y, vy + yaw_rate * x}; };
    auto along = [](std::pair<double, double> v, double heading) {
        return v.first * std::cos(heading) + v.second * std::sin(heading);
    };
    return {
        std::max(0.0, along(point(g.l_f(), half), road_wheel_angle)),
        std::max(0.0, along(point(g.l_f(), -half), road_wheel_angle)),
        std::max(0.0, along(point(-g.l_r, half), 0.0)),
        std::max(0.0, along(point(-g.l_r, -half), 0.0)),
    };
}

SimulatedRun simulate(const TimeFunction& road_wheel_angle, const TimeFunction& speed, double duration,
                      const VehicleGeometry& geometry, double rate_hz)
{
    geometry.validate();
    if (!(rate_hz > 0.0) || std::fmod(kPlantStepHz, rate_hz) > 1e-9) {
        throw ConfigError("output rate must divide the 200 Hz plant rate");
    }
    const auto substeps = static_cast<int>(std::lround(kPlantStepHz / rate_hz));
    const double h = 1.0 / kPlantStepHz;
    const auto frames = static_cast<std::size_t>(std::floor(duration * rate_hz + 1e-9)) + 1;

    SimulatedRun run;
    run.scenario.rate_hz = rate_hz;
    run.scenario.frames.reserve(frames);
    run.scenario.beta_gt.reserve(frames);

    PlantState s;
    std::size_t plant_step = 0;
    for (std::size_t k = 0; k < frames; ++k) {
        const double t = static_cast<double>(k) / rate_hz;
        const double delta = road_wheel_angle(t);
        const double v = speed(t);
        const auto rates = plant_rates(s, v, delta, geometry);

        SensorFrame f;
        f.t = t;
        f.v_s = std::abs(v);
        f.theta_sw = delta * geometry.r_s;
        f.yaw_rate_obd = s.yaw_rate;
        f.a_y = std::max(v, kMinPlantSpeed) * (s.yaw_rate + rates.beta_dot);
        const double accel = derivative(speed, t);
        f.p_br = accel < -0.05 ? -accel * kBrakeGain : 0.0;
        const auto w = wheel_speeds(v, s.beta, s.yaw_rate, delta, geometry);
        f.v_fl = w[0];
        f.v_fr = w[1];
        f.v_rl = w[2];
        f.v_rr = w[3];

        run.scenario.frames.push_back(f);
        run.scenario.beta_gt.push_back(s.beta);
        run.heading.push_back(s.heading);
        run.yaw_rate.push_back(s.yaw_rate);
        run.speed.push_back(v);
        run.road_wheel.push_back(delta);

        if (k + 1 == frames) {
            break;
        }
        for (int sub = 0; sub < substeps; ++sub, ++plant_step) {
            const double ts = static_cast<double>(plant_step) * h;
            const double tm = ts + 0.5 * h;
            const double te = ts + h;
            const auto k1 = plant_rates(s, speed(ts), road_wheel_angle(ts), geometry);
            const auto k2 = plant_rates(advance(s, k1, 0.5 * h), speed(tm), road_wheel_angle(tm), geometry);
            const auto k3 = plant_rates(advance(s, k2, 0.5 * h), speed(tm), road_wheel_angle(tm), geometry);
            const auto k4 = plant_rates(advance(s, k3, h), speed(te), road_wheel_angle(te), geometry);
            s.beta += h / 6.0 * (k1.beta_dot + 2.0 * k2.beta_dot + 2.0 * k3.beta_dot + k4.beta_dot);
            s.yaw_rate += h / 6.0 * (k1.yaw_acc + 2.0 * k2.yaw_acc + 2.0 * k3.yaw_acc + k4.yaw_acc);
            s.heading += h / 6.0 * (k1.heading_dot + 2.0 * k2.heading_dot + 2.0 * k3.heading_dot + k4.heading_dot);
            if (!std::isfinite(s.beta) || std::abs(s.beta) > std::numbers::pi / 2.0) {
                throw NumericalError("simulation instability: |beta| exceeded pi/2 at plant step " +
                                     std::to_string(plant_step + 1) + " (t=" + format_double(te) + " s)");
            }
        }
    }
    return run;
}

TimeFunction steering_program(Maneuver maneuver, const ManeuverShape& shape, const VehicleGeometry& g,
                              double duration, std::uint64_t seed)
{
    std::mt19937_64 rng(seed);
    auto uniform = [&rng](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };

    const double v0 = std::max(shape.nominal_speed, 1.0);
    const double understeer = g.mass / g.l * (g.l_r / g.c_f - g.l_f() / g.c_r);
    const double amp = std::clamp((g.l / (v0 * v0) + understeer) * shape.target_lateral_accel, 0.0, 0.55) *
                       shape.amplitude_scale;

    const double f1 = uniform(0.05, 0.2);
    const double f2 = uniform(0.3, 0.8);
    const double p1 = uniform(0.0, kTwoPi);
    const double p2 = uniform(0.0, kTwoPi);
    auto correction = [=](double t) {
        return 0.04 * amp * (std::sin(kTwoPi * f1 * t + p1) + 0.5 * std::sin(kTwoPi * f2 * t + p2));
    };
    auto ramp_in = [](double t) { return smoothstep(t / 1.5); };
    const double sign0 = uniform(0.0, 1.0) < 0.5 ? -1.0 : 1.0;

    switch (maneuver) {
    case Maneuver::slalom: {
        const double f = uniform(0.3, 0.7);
        return [=](double t) { return ramp_in(t) * (amp * std::sin(kTwoPi * f * t) + correction(t)); };
    }
    case Maneuver::constant_radius: {
        return [=](double t) { return sign0 * amp * smoothstep(t / 3.0) + ramp_in(t) * correction(t); };
    }
    case Maneuver::step_steer: {
        const double period = uniform(6.0, 9.0);
        return [=](double t) {
            const double k = std::floor(t / period);
            const double tau = t - k * period;
            const double sign = (static_cast<long>(k) % 2 == 0 ? 1.0 : -1.0) * sign0;
            const double on = smoothstep((tau - 1.0) / 0.2) - smoothstep((tau - 1.0 - period / 2.0) / 0.2);
            return sign * amp * on + ramp_in(t) * correction(t);
        };
    }
    case Maneuver::sine_with_dwell: {
        const double period = uniform(5.0, 7.0);
        constexpr double freq = 0.7;
        constexpr double dwell = 0.5;
        return [=](double t) {
            const double k = std::floor(t / period);
            const double tau = t - k * period - 1.0;
            const double sign = (static_cast<long>(k) % 2 == 0 ? 1.0 : -1.0) * sign0;
            const double t34 = 0.75 / freq;
            double shape_v = 0.0;
            if (tau >= 0.0 && tau < t34) {
                shape_v = std::sin(kTwoPi * freq * tau);
            } else if (tau >= t34 && tau < t34 + dwell) {
                shape_v = -1.0;
            } else if (tau >= t34 + dwell && tau < 1.0 / freq + dwell) {
                shape_v = std::sin(kTwoPi * freq * (tau - dwell));
            }
            return sign * amp * shape_v + ramp_in(t) * correction(t);
        };
    }
    case Maneuver::double_lane_change: {
        const double period = uniform(6.0, 9.0);
        const double change = uniform(1.8, 2.6);
        const double pause = uniform(0.8, 1.5);
        return [=](double t) {
            const double k = std::floor(t / period);
            const double tau = t - k * period - 0.5;
            double shape_v = 0.0;
            if (tau >= 0.0 && tau < change) {
                shape_v = std::sin(kTwoPi * tau / change);
            } else if (tau >= change + pause && tau < 2.0 * change + pause) {
                shape_v = -std::sin(kTwoPi * (tau - change - pause) / change);
            }
            return sign0 * amp * shape_v + ramp_in(t) * correction(t);
        };
    }
    case Maneuver::figure_eight: {
        const double a = std::max(shape.target_lateral_accel, 0.1);
        const double radius = v0 * v0 / a;
        const double period = 2.0 * kTwoPi * radius / v0;
        const double phase = uniform(0.0, 0.25 * period);
        return [=](double t) {
            return ramp_in(t) * (sign0 * amp * std::tanh(3.0 * std::sin(kTwoPi * (t + phase) / period)) +
                                 correction(t));
        };
    }
    }
    (void)duration;
    return [](double) { return 0.0; };
}

SimulatedRun simulate_maneuver(Maneuver maneuver, double duration, const VehicleGeometry& geometry,
                               const TimeFunction& speed_profile, std::uint64_t seed, const ManeuverShape& shape)
{
    if (!(duration >= 5.0)) {
        throw ConfigError("maneuver duration must be at least 5 s");
    }
    geometry.validate();
    auto steer = steering_program(maneuver, shape, geometry, duration, seed);
    auto run = simulate(steer, speed_profile, duration, geometry);
    run.scenario.maneuver = maneuver;
    return run;
}

Scenario synthesize_sensors(const Scenario& clean, const VehicleGeometry& geometry, const NoiseSpec& noise)
{
    geometry.validate();
    noise.validate();
    clean.validate();
    std::mt19937_64 rng(noise.seed);
    std::normal_distribution<double> unit(0.0, 1.0);
    auto noisy = [&](double v, double std) { return std > 0.0 ? v + std * unit(rng) : v; };

    Scenario out = clean;
    for (std::size_t i = 0; i < out.size(); ++i) {
        auto& f = out.frames[i];
        const double speed = f.v_s;
        const double delta = f.theta_sw / geometry.r_s;
        const auto w = wheel_speeds(speed, clean.beta_gt[i], f.yaw_rate_obd, delta, geometry);
        f.v_s = std::max(0.0, noisy(speed, noise.v_s));
        f.theta_sw = noisy(f.theta_sw, noise.theta_sw);
        f.yaw_rate_obd = noisy(f.yaw_rate_obd, noise.yaw_rate);
        f.a_y = noisy(f.a_y, noise.a_y);
        f.p_br = std::max(0.0, noisy(f.p_br, noise.p_br));
        f.v_fl = std::max(0.0, noisy(w[0], noise.wheel));
        f.v_fr = std::max(0.0, noisy(w[1], noise.wheel));
        f.v_rl = std::max(0.0, noisy(w[2], noise.wheel));
        f.v_rr = std::max(0.0, noisy(w[3], noise.wheel));
    }
    return out;
}

CogVelocity transform_to_cog(const Eigen::Vector3d& v_poi, const Eigen::Vector3d& omega,
                             const Eigen::Vector3d& r_lever)
{
    if (!v_poi.allFinite() || !omega.allFinite() || !r_lever.allFinite()) {
        throw DataError("CoG transform inputs must be finite");
    }
    CogVelocity out;
    out.v_cog = v_poi + omega.cross(r_lever);
    if (std::abs(out.v_cog.x()) < 0.1) {
        throw DataError("standstill: |v_x| < 0.1 m/s, sideslip undefined");
    }
    out.beta_cog = std::atan2(out.v_cog.y(), out.v_cog.x());
    return out;
}

ManeuverMix default_mix()
{
    ManeuverMix mix;
    for (auto m : kAllManeuvers) {
        mix[m] = 1.0;
    }
    return mix;
}

ManeuverMix parse_mix(std::string_view text)
{
    ManeuverMix mix;
    for (auto m : kAllManeuvers) {
        mix[m] = 0.0;
    }
    std::size_t start = 0;
    while (start <= text.size()) {
        auto end = text.find(',', start);
        if (end == std::string_view::npos) {
            end = text.size();
        }
        const auto item = text.substr(start, end - start);
        if (!item.empty()) {
            const auto colon = item.find(':');
            if (colon == std::string_view::npos) {
                throw ConfigError("maneuver mix entry '" + std::string(item) + "' must be name:weight");
            }
            Maneuver m;
            try {
                m = maneuver_from_string(item.substr(0, colon));
            } catch (const DataError& e) {
                throw ConfigError(e.what());
            }
            double w = 0.0;
            try {
                w = parse_double(item.substr(colon + 1));
            } catch (const DataError& e) {
                throw ConfigError(e.what());
            }
            if (!(w >= 0.0) || !std::isfinite(w)) {
                throw ConfigError("maneuver weights must be finite and non-negative");
            }
            mix[m] = w;
        }
        start = end + 1;
    }
    double total = 0.0;
    for (const auto& [m, w] : mix) {
        total += w;
    }
    if (!(total > 0.0)) {
        throw ConfigError("maneuver mix needs at least one positive weight");
    }
    return mix;
}

std::string format_mix(const ManeuverMix& mix)
{
    std::string out;
    for (auto m : kAllManeuvers) {
        const auto it = mix.find(m);
        const double w = it == mix.end() ? 0.0 : it->second;
        if (!out.empty()) {
            out += ',';
        }
        out += std::string(to_string(m)) + ':' + format_double(w);
    }
    return out;
}

namespace {

struct ScenarioPlan {
    ManeuverShape shape;
    PiecewiseLinear speed;
};

ScenarioPlan plan_scenario(Maneuver m, double duration, const VehicleGeometry& g, std::mt19937_64& rng)
{
    auto uniform = [&rng](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };
    // Heavy-tailed lateral demand: most driving is mild, a few runs approach the limit.
    const double a_max = 0.92 * g.mu_sat * kGravity;
    const double u = uniform(0.0, 1.0);
    const double a_target = std::min(0.6 + 7.0 * std::pow(u, 2.5), a_max);

    ScenarioPlan plan;
    plan.shape.target_lateral_accel = a_target;
    double v0 = 10.0;
    double v1 = 10.0;
    bool brake_event = false;
    switch (m) {
    case Maneuver::slalom:
        v0 = uniform(8.0, 22.0);
        v1 = v0 * uniform(0.9, 1.1);
        break;
    case Maneuver::constant_radius:
        v0 = uniform(2.5, 5.0);
        v1 = uniform(6.0, 14.0);
        break;
    case Maneuver::step_steer:
        v0 = uniform(6.0, 25.0);
        v1 = v0;
        brake_event = uniform(0.0, 1.0) < 0.3;
        break;
    case Maneuver::sine_with_dwell:
        v0 = uniform(12.0, 25.0);
        v1 = v0 * uniform(0.95, 1.05);
        break;
    case Maneuver::double_lane_change:
        v0 = uniform(8.0, 20.0);
        v1 = v0;
        brake_event = uniform(0.0, 1.0) < 0.5;
        break;
    case Maneuver::figure_eight:
        v0 = uniform(3.0, 9.0);
        v1 = v0 * uniform(0.9, 1.2);
        break;
    }
    plan.shape.nominal_speed = m == Maneuver::constant_radius ? v1 : 0.5 * (v0 + v1);

    plan.speed.t = {0.0};
    plan.speed.v = {v0};
    if (brake_event) {
        const double tb = uniform(0.3, 0.6) * duration;
        const double decel = uniform(1.5, 4.0);
        const double v_at_b = v0 + (v1 - v0) * tb / duration;
        const double v_low = std::max(3.0, v_at_b - decel * 1.5);
        const double t_low = tb + (v_at_b - v_low) / decel;
        const double t_back = std::min(duration, t_low + (v_at_b - v_low) / 1.0);
        plan.speed.t.insert(plan.speed.t.end(), {tb, t_low, t_back});
        plan.speed.v.insert(plan.speed.v.end(), {v_at_b, v_low, v_at_b});
    }
    if (plan.speed.t.back() < duration) {
        plan.speed.t.push_back(duration);
        plan.speed.v.push_back(v1);
    }
    return plan;
}

} // namespace

std::vector<Scenario> generate_dataset(const DatasetSpec& spec)
{
    spec.geometry.validate();
    spec.noise.validate();
    if (!(spec.hours > 0.0)) {
        throw ConfigError("dataset duration must be positive");
    }
    if (!(spec.min_duration >= 5.0) || spec.max_duration < spec.min_duration) {
        throw ConfigError("scenario durations must satisfy 5 <= min <= max");
    }
    std::vector<Maneuver> kinds;
    std::vector<double> weights;
    for (const auto& [m, w] : spec.mix) {
        if (w > 0.0) {
            kinds.push_back(m);
            weights.push_back(w);
        }
    }
    if (kinds.empty()) {
        throw ConfigError("maneuver mix needs at least one positive weight");
    }

    std::mt19937_64 rng(spec.seed);
    std::discrete_distribution<std::size_t> pick(weights.begin(), weights.end());
    const double total = spec.hours * 3600.0;
    double covered = 0.0;
    std::vector<Scenario> out;
    for (std::size_t index = 0; covered < total; ++index) {
        const Maneuver m = kinds[pick(rng)];
        double duration = std::uniform_real_distribution<double>(spec.min_duration, spec.max_duration)(rng);
        duration = std::round(duration);
        auto plan = plan_scenario(m, duration, spec.geometry, rng);
        const auto steer_seed = mix_seed(spec.seed, 2 * index);
        auto run = simulate_maneuver(m, duration, spec.geometry, plan.speed, steer_seed, plan.shape);
        NoiseSpec noise = spec.noise;
        noise.seed = mix_seed(spec.noise.seed ^ spec.seed, 2 * index + 1);
        auto scenario = synthesize_sensors(run.scenario, spec.geometry, noise);
        char id[32];
        std::snprintf(id, sizeof(id), "s%04zu", index);
        scenario.id = std::string(id) + "_" + std::string(to_string(m));
        scenario.maneuver = m;
        out.push_back(std::move(scenario));
        covered += duration;
    }
    return out;
}

} // namespace slipsense
