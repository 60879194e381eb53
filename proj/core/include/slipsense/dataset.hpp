#pragma once

#include "slipsense/types.hpp"

#include <Eigen/Core>

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace slipsense {

/// A materialised training pair: X is L x m onboard history, y holds the
/// ground truth at steps t..t+F.
struct Window {
    Eigen::MatrixXd X;
    Eigen::VectorXd y;
    std::size_t end = 0; // frame index of the last observed row (t)
};

/// Lightweight handle to a window inside a scenario collection.
struct WindowRef {
    std::size_t scenario = 0;
    std::size_t end = 0;
};

struct WindowSet {
    std::vector<Window> windows;
    std::size_t dropped_nonfinite = 0;
};

/// Frame indices t that are evaluated for a scenario of length n. The first
/// frame seeds the filters, so t runs over [L, n-F-1] and the count is n-(L+F).
std::size_t first_window_end(const WindowConfig& cfg) noexcept;
std::size_t window_count(std::size_t n, const WindowConfig& cfg) noexcept;

/// Stride-1 sliding windows. Throws DataError when the scenario is shorter
/// than L+F+1. Windows with any non-finite value are dropped and counted.
WindowSet make_windows(const Scenario& scenario, const WindowConfig& cfg);

/// Enumerates windows across scenarios without copying frame data.
std::vector<WindowRef> enumerate_windows(std::span<const Scenario> scenarios, const WindowConfig& cfg,
                                         std::size_t stride = 1, std::size_t* dropped = nullptr);

/// Fills X (L x m, row-major ordering of frames) for a window ending at `end`.
void fill_window_inputs(const Scenario& scenario, std::size_t end, const WindowConfig& cfg,
                        Eigen::Ref<Eigen::MatrixXd> X);

/// True when no column of X reproduces the ground-truth sideslip over the
/// window rows. Used as a leak audit on every training batch.
bool audit_no_target_leak(const Eigen::MatrixXd& X, const Scenario& scenario, std::size_t end);

struct SplitRatios {
    double train = 0.7;
    double val = 0.1;
    double test = 0.2;
};

struct SplitIndices {
    std::vector<std::size_t> train;
    std::vector<std::size_t> val;
    std::vector<std::size_t> test;
};

/// Whole-scenario partition, deterministic for a fixed seed.
/// Throws ConfigError when ratios do not sum to 1 within 1e-9 and DataError
/// for fewer than 10 scenarios.
SplitIndices scenario_split(std::size_t scenario_count, SplitRatios ratios, std::uint64_t seed);

std::vector<Scenario> select(std::span<const Scenario> scenarios, std::span<const std::size_t> indices);

// --- on-disk format --------------------------------------------------------

inline constexpr std::string_view kScenarioCsvHeader =
    "t,v_s,theta_sw,yaw_rate_obd,a_y,p_br,v_fl,v_fr,v_rl,v_rr,beta_gt";
inline constexpr std::string_view kManifestName = "manifest.csv";
inline constexpr std::string_view kManifestHeader = "id,maneuver,rate_hz,path";

void write_scenario_csv(const std::filesystem::path& file, const Scenario& scenario);
Scenario read_scenario_csv(const std::filesystem::path& file, std::string id, Maneuver maneuver,
                           double rate_hz);

/// Writes one CSV per scenario plus manifest.csv into `dir`.
void write_dataset(const std::filesystem::path& dir, std::span<const Scenario> scenarios);
/// Reads the manifest and every scenario it lists, in manifest order.
std::vector<Scenario> read_dataset(const std::filesystem::path& dir);

} // namespace slipsense
