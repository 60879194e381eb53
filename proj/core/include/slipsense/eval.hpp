#pragma once

#include "slipsense/vmm.hpp"

#include <array>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace slipsense {

/// Error statistics in degrees.
struct Metrics {
    double mae = 0.0;
    double mse = 0.0; // deg^2
    double me = 0.0;
    std::size_t count = 0;
};

/// Inputs in radians. Throws DataError on empty or mismatched input.
Metrics compute_metrics(std::span<const double> pred, std::span<const double> gt);

/// Driving-state conditions split at v_s = 20 km/h and |a_y| = 3 m/s^2:
/// 1 slow/mild, 2 slow/high, 3 fast/mild, 4 fast/high. Boundaries belong to
/// the lower class.
int condition_of(double v_s, double a_y) noexcept;
inline constexpr double kConditionSpeed = 20.0 / 3.6; // m/s
inline constexpr double kConditionLateral = 3.0;      // m/s^2

/// Sample indices per condition (index 0 is condition 1).
std::array<std::vector<std::size_t>, 4> conditional_bins(std::span<const double> v_s, std::span<const double> a_y);

struct BinPoint {
    long long bin = 0;   // floor(gt / width)
    double lower = 0.0;  // deg
    double upper = 0.0;  // deg
    double mae = 0.0;    // deg
    double share = 0.0;  // % of samples
    std::size_t count = 0;
};

/// MAE per ground-truth bin of `width_deg`, anchored at 0. Empty bins are
/// omitted.
std::vector<BinPoint> binned_mae_curve(std::span<const double> pred, std::span<const double> gt,
                                       double width_deg = 0.125);

struct CorrelationTest {
    double r = 0.0;
    double t_star = 0.0;
    double p_value = 1.0;  // two-sided
    double critical = 0.0; // |t| threshold at the 99% level
    bool reject_at_99 = false;
    std::size_t n = 0;
};

/// Pearson r between e_beta and e_yaw with t* = r sqrt(n-2) / sqrt(1-r^2).
/// Throws DataError for fewer than 30 records or zero variance.
CorrelationTest residual_correlation(std::span<const ResidualRecord> records);

/// One model column of a comparison: estimates (rad) and uncertainties.
struct ModelSeries {
    std::string name;
    std::vector<double> beta;
    std::vector<double> delta; // NaN where a model has none
};

/// CSV with columns t, beta_gt, then beta_<name>, delta_<name> per model.
/// Angles in radians like the dataset files.
void write_trace_csv(const std::filesystem::path& file, std::span<const double> t, std::span<const double> gt,
                     std::span<const ModelSeries> models);
/// Static SVG line plot of the same series.
void write_trace_svg(const std::filesystem::path& file, std::span<const double> t, std::span<const double> gt,
                     std::span<const ModelSeries> models, const std::string& title);

/// Index of the first scenario of a maneuver type. Throws DataError when absent.
std::size_t find_maneuver(std::span<const Scenario> scenarios, Maneuver maneuver);

struct ConditionRow {
    int condition = 0;
    std::size_t count = 0;
    std::map<std::string, double> mae; // deg
};

struct MetricReport {
    std::vector<std::string> models; // column order
    std::map<std::string, Metrics> overall;
    std::array<ConditionRow, 4> conditions;
    std::map<std::string, std::vector<BinPoint>> curves;
    std::size_t samples = 0;
    std::map<std::string, double> extra; // free-form scalars

    /// Deterministic JSON text (sorted keys, shortest round-trip numbers).
    std::string to_json() const;
};

/// Evaluates every model on the same samples.
MetricReport make_report(std::span<const ModelSeries> models, std::span<const double> gt,
                         std::span<const double> v_s, std::span<const double> a_y);

/// report.json, table1.csv, table2.csv and binned_mae.csv in `dir`.
void write_report(const std::filesystem::path& dir, const MetricReport& report);

} // namespace slipsense
