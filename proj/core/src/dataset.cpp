#include "slipsense/dataset.hpp"

#include "slipsense/error.hpp"
#include "slipsense/numeric.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

namespace slipsense {

namespace {

std::vector<std::string_view> split_csv_line(std::string_view line)
{
    std::vector<std::string_view> out;
    std::size_t start = 0;
    while (true) {
        const auto pos = line.find(',', start);
        if (pos == std::string_view::npos) {
            out.push_back(line.substr(start));
            break;
        }
        out.push_back(line.substr(start, pos - start));
        start = pos + 1;
    }
    return out;
}

std::string_view strip_cr(std::string_view s)
{
    if (!s.empty() && s.back() == '\r') {
        s.remove_suffix(1);
    }
    return s;
}

} // namespace

bool SensorFrame::finite() const noexcept
{
    if (!std::isfinite(t)) {
        return false;
    }
    for (double v : features()) {
        if (!std::isfinite(v)) {
            return false;
        }
    }
    return true;
}

std::string_view to_string(Maneuver m) noexcept
{
    switch (m) {
    case Maneuver::slalom: return "slalom";
    case Maneuver::constant_radius: return "constant_radius";
    case Maneuver::step_steer: return "step_steer";
    case Maneuver::sine_with_dwell: return "sine_with_dwell";
    case Maneuver::double_lane_change: return "double_lane_change";
    case Maneuver::figure_eight: return "figure_eight";
    }
    return "unknown";
}

Maneuver maneuver_from_string(std::string_view name)
{
    for (auto m : kAllManeuvers) {
        if (to_string(m) == name) {
            return m;
        }
    }
    throw DataError("unknown maneuver '" + std::string(name) + "'");
}

bool FusionInput::valid() const noexcept
{
    const auto h = vector();
    return h.allFinite() && delta_ml >= 0.0 && delta_vm1 >= 0.0 && delta_vm2 >= 0.0;
}

void Scenario::validate(std::size_t min_length) const
{
    if (frames.size() != beta_gt.size()) {
        throw DataError("scenario '" + id + "': " + std::to_string(frames.size()) + " frames but " +
                        std::to_string(beta_gt.size()) + " ground-truth samples");
    }
    if (frames.size() < min_length) {
        throw DataError("scenario '" + id + "' has " + std::to_string(frames.size()) +
                        " frames, need at least " + std::to_string(min_length));
    }
    if (!(rate_hz > 0.0)) {
        throw DataError("scenario '" + id + "': sampling rate must be positive");
    }
    const double dt = 1.0 / rate_hz;
    for (std::size_t i = 0; i < frames.size(); ++i) {
        const auto& f = frames[i];
        if (f.v_fl < 0.0 || f.v_fr < 0.0 || f.v_rl < 0.0 || f.v_rr < 0.0) {
            throw DataError("scenario '" + id + "': negative wheel speed at frame " + std::to_string(i));
        }
        if (i > 0) {
            const double step = f.t - frames[i - 1].t;
            if (!(step > 0.0)) {
                throw DataError("scenario '" + id + "': time not strictly increasing at frame " +
                                std::to_string(i));
            }
            if (std::abs(step - dt) > 1e-6) {
                throw DataError("scenario '" + id + "': non-uniform spacing at frame " + std::to_string(i));
            }
        }
    }
}

void WindowConfig::validate() const
{
    if (m != kInputDim) {
        throw ConfigError("window input dimension must be " + std::to_string(kInputDim));
    }
    if (L == 0) {
        throw ConfigError("window L must be positive");
    }
    if (B > L) {
        throw ConfigError("window B must not exceed L");
    }
}

std::size_t first_window_end(const WindowConfig& cfg) noexcept { return cfg.L; }

std::size_t window_count(std::size_t n, const WindowConfig& cfg) noexcept
{
    return n > cfg.L + cfg.F ? n - (cfg.L + cfg.F) : 0;
}

void fill_window_inputs(const Scenario& scenario, std::size_t end, const WindowConfig& cfg,
                        Eigen::Ref<Eigen::MatrixXd> X)
{
    const std::size_t first = end + 1 - cfg.L;
    for (std::size_t r = 0; r < cfg.L; ++r) {
        const auto feats = scenario.frames[first + r].features();
        for (std::size_t c = 0; c < kInputDim; ++c) {
            X(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = feats[c];
        }
    }
}

namespace {

bool window_finite(const Scenario& s, std::size_t end, const WindowConfig& cfg)
{
    for (std::size_t i = end + 1 - cfg.L; i <= end; ++i) {
        if (!s.frames[i].finite()) {
            return false;
        }
    }
    for (std::size_t i = end; i <= end + cfg.F; ++i) {
        if (!std::isfinite(s.beta_gt[i])) {
            return false;
        }
    }
    return true;
}

} // namespace

WindowSet make_windows(const Scenario& scenario, const WindowConfig& cfg)
{
    cfg.validate();
    if (scenario.size() < cfg.min_length() || scenario.beta_gt.size() != scenario.size()) {
        throw DataError("scenario '" + scenario.id + "' too short for windowing: " +
                        std::to_string(scenario.size()) + " frames, need " + std::to_string(cfg.min_length()));
    }
    WindowSet out;
    const std::size_t count = window_count(scenario.size(), cfg);
    out.windows.reserve(count);
    for (std::size_t k = 0; k < count; ++k) {
        const std::size_t end = first_window_end(cfg) + k;
        if (!window_finite(scenario, end, cfg)) {
            ++out.dropped_nonfinite;
            continue;
        }
        Window w;
        w.end = end;
        w.X.resize(static_cast<Eigen::Index>(cfg.L), static_cast<Eigen::Index>(kInputDim));
        fill_window_inputs(scenario, end, cfg, w.X);
        w.y.resize(static_cast<Eigen::Index>(cfg.F + 1));
        for (std::size_t j = 0; j <= cfg.F; ++j) {
            w.y[static_cast<Eigen::Index>(j)] = scenario.beta_gt[end + j];
        }
        out.windows.push_back(std::move(w));
    }
    if (out.dropped_nonfinite > 0) {
        spdlog::warn("scenario '{}': dropped {} windows with non-finite values", scenario.id,
                     out.dropped_nonfinite);
    }
    return out;
}

std::vector<WindowRef> enumerate_windows(std::span<const Scenario> scenarios, const WindowConfig& cfg,
                                         std::size_t stride, std::size_t* dropped)
{
    cfg.validate();
    stride = std::max<std::size_t>(stride, 1);
    std::vector<WindowRef> refs;
    std::size_t skipped = 0;
    for (std::size_t s = 0; s < scenarios.size(); ++s) {
        const auto& sc = scenarios[s];
        if (sc.size() < cfg.min_length()) {
            throw DataError("scenario '" + sc.id + "' too short for windowing: " + std::to_string(sc.size()) +
                            " frames, need " + std::to_string(cfg.min_length()));
        }
        const std::size_t count = window_count(sc.size(), cfg);
        for (std::size_t k = 0; k < count; k += stride) {
            const std::size_t end = first_window_end(cfg) + k;
            if (!window_finite(sc, end, cfg)) {
                ++skipped;
                continue;
            }
            refs.push_back({s, end});
        }
    }
    if (skipped > 0) {
        spdlog::warn("dropped {} windows with non-finite values", skipped);
    }
    if (dropped != nullptr) {
        *dropped = skipped;
    }
    return refs;
}

bool audit_no_target_leak(const Eigen::MatrixXd& X, const Scenario& scenario, std::size_t end)
{
    const auto rows = X.rows();
    const std::size_t first = end + 1 - static_cast<std::size_t>(rows);
    for (Eigen::Index c = 0; c < X.cols(); ++c) {
        bool identical = true;
        for (Eigen::Index r = 0; r < rows && identical; ++r) {
            identical = X(r, c) == scenario.beta_gt[first + static_cast<std::size_t>(r)];
        }
        if (identical) {
            bool constant_zero = true;
            for (Eigen::Index r = 0; r < rows; ++r) {
                constant_zero = constant_zero && X(r, c) == 0.0;
            }
            // An all-zero channel during straight driving matches a zero label
            // trivially; that is not a leak.
            if (!constant_zero) {
                return false;
            }
        }
    }
    return true;
}

SplitIndices scenario_split(std::size_t scenario_count, SplitRatios ratios, std::uint64_t seed)
{
    if (ratios.train < 0.0 || ratios.val < 0.0 || ratios.test < 0.0 ||
        std::abs(ratios.train + ratios.val + ratios.test - 1.0) > 1e-9) {
        throw ConfigError("split ratios must be non-negative and sum to 1");
    }
    if (scenario_count < 10) {
        throw DataError("scenario split needs at least 10 scenarios, got " + std::to_string(scenario_count));
    }
    const auto n = static_cast<double>(scenario_count);
    const auto n_train = static_cast<std::size_t>(std::floor(ratios.train * n + 0.5));
    const auto n_val = std::min(static_cast<std::size_t>(std::floor(ratios.val * n + 0.5)),
                                scenario_count - n_train);

    std::vector<std::size_t> order(scenario_count);
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(seed);
    std::shuffle(order.begin(), order.end(), rng);

    SplitIndices out;
    out.train.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
    out.val.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train),
                   order.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
    out.test.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train + n_val), order.end());
    std::sort(out.train.begin(), out.train.end());
    std::sort(out.val.begin(), out.val.end());
    std::sort(out.test.begin(), out.test.end());
    return out;
}

std::vector<Scenario> select(std::span<const Scenario> scenarios, std::span<const std::size_t> indices)
{
    std::vector<Scenario> out;
    out.reserve(indices.size());
    for (auto i : indices) {
        out.push_back(scenarios[i]);
    }
    return out;
}

void write_scenario_csv(const std::filesystem::path& file, const Scenario& scenario)
{
    std::ofstream out(file, std::ios::binary);
    if (!out) {
        throw DataError("cannot open '" + file.string() + "' for writing");
    }
    out << kScenarioCsvHeader << '\n';
    std::string line;
    for (std::size_t i = 0; i < scenario.size(); ++i) {
        const auto& f = scenario.frames[i];
        line.clear();
        line += format_double(f.t);
        for (double v : f.features()) {
            line += ',';
            line += format_double(v);
        }
        line += ',';
        line += format_double(scenario.beta_gt[i]);
        line += '\n';
        out << line;
    }
    if (!out) {
        throw DataError("write failed for '" + file.string() + "'");
    }
}

Scenario read_scenario_csv(const std::filesystem::path& file, std::string id, Maneuver maneuver,
                           double rate_hz)
{
    std::ifstream in(file, std::ios::binary);
    if (!in) {
        throw DataError("cannot open scenario file '" + file.string() + "'");
    }
    std::string line;
    if (!std::getline(in, line) || strip_cr(line) != kScenarioCsvHeader) {
        throw DataError("'" + file.string() + "': unexpected header");
    }
    Scenario s;
    s.id = std::move(id);
    s.maneuver = maneuver;
    s.rate_hz = rate_hz;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        const auto view = strip_cr(line);
        if (view.empty()) {
            continue;
        }
        const auto fields = split_csv_line(view);
        if (fields.size() != 11) {
            throw DataError("'" + file.string() + "' line " + std::to_string(lineno) + ": expected 11 fields");
        }
        SensorFrame f;
        f.t = parse_double(fields[0]);
        f.v_s = parse_double(fields[1]);
        f.theta_sw = parse_double(fields[2]);
        f.yaw_rate_obd = parse_double(fields[3]);
        f.a_y = parse_double(fields[4]);
        f.p_br = parse_double(fields[5]);
        f.v_fl = parse_double(fields[6]);
        f.v_fr = parse_double(fields[7]);
        f.v_rl = parse_double(fields[8]);
        f.v_rr = parse_double(fields[9]);
        s.frames.push_back(f);
        s.beta_gt.push_back(parse_double(fields[10]));
    }
    return s;
}

void write_dataset(const std::filesystem::path& dir, std::span<const Scenario> scenarios)
{
    std::filesystem::create_directories(dir);
    std::ofstream manifest(dir / kManifestName, std::ios::binary);
    if (!manifest) {
        throw DataError("cannot write manifest in '" + dir.string() + "'");
    }
    manifest << kManifestHeader << '\n';
    for (const auto& s : scenarios) {
        const std::string rel = s.id + ".csv";
        write_scenario_csv(dir / rel, s);
        manifest << s.id << ',' << to_string(s.maneuver) << ',' << format_double(s.rate_hz) << ',' << rel << '\n';
    }
}

std::vector<Scenario> read_dataset(const std::filesystem::path& dir)
{
    const auto path = dir / kManifestName;
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw DataError("no dataset manifest at '" + path.string() + "'");
    }
    std::string line;
    if (!std::getline(in, line) || strip_cr(line) != kManifestHeader) {
        throw DataError("'" + path.string() + "': unexpected manifest header");
    }
    std::vector<Scenario> out;
    while (std::getline(in, line)) {
        const auto view = strip_cr(line);
        if (view.empty()) {
            continue;
        }
        const auto fields = split_csv_line(view);
        if (fields.size() != 4) {
            throw DataError("'" + path.string() + "': malformed manifest row");
        }
        std::filesystem::path file{std::string(fields[3])};
        if (file.is_relative()) {
            file = dir / file;
        }
        out.push_back(read_scenario_csv(file, std::string(fields[0]), maneuver_from_string(fields[1]),
                                        parse_double(fields[2])));
    }
    return out;
}

} // namespace slipsense
