#pragma once

#include "slipsense/ad.hpp"
#include "slipsense/model.hpp"
#include "slipsense/numeric.hpp"
#include "slipsense/types.hpp"
#include "slipsense/vmm.hpp"

#include <Eigen/Core>

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <vector>

namespace slipsense {

// --- uncertainty normalisation ----------------------------------------------

/// Empirical CDF of validation uncertainties. Ties count half, so the
/// median of the fitted sample maps to 0.5.
class UncertaintyCalibration {
public:
    UncertaintyCalibration() = default;
    explicit UncertaintyCalibration(std::vector<double> values);

    bool fitted() const noexcept { return !sorted_.empty(); }
    /// Rank in [0, 1], non-decreasing. Throws StateError before fitting.
    double normalize(double delta_raw) const;
    /// Raw value at the given quantile of the fitted sample.
    double quantile(double q) const;
    const std::vector<double>& values() const noexcept { return sorted_; }

private:
    std::vector<double> sorted_;
};

// --- expert fusion -----------------------------------------------------------

struct ExpertFusionConfig {
    double delta_th = 0.9;          // on the normalised scale
    double v_th = kmh2ms(20.0);     // m/s
    void validate() const;
};

enum class EfBranch { ml, vm1, vm2 };
std::string_view to_string(EfBranch b) noexcept;

struct EfResult {
    double beta = 0.0;
    EfBranch branch = EfBranch::ml;
};

/// Three-branch rule: delta_ml <= delta_th keeps beta_ml, otherwise blend
/// beta_vm delta_ml + beta_ml (1 - delta_ml) with VMM1 at low speed
/// (v_s <= v_th) and VMM2 above. `h.delta_ml` must be in [0, 1].
EfResult expert_fuse_detail(const FusionInput& h, double v_s, const ExpertFusionConfig& cfg);
inline double expert_fuse(const FusionInput& h, double v_s, const ExpertFusionConfig& cfg)
{
    return expert_fuse_detail(h, v_s, cfg).beta;
}

// --- fusion dataset ------------------------------------------------------------

/// One evaluable time step t = L of a window.
struct FusionRow {
    FusionInput h;   // raw uncertainties
    double y = 0.0;  // ground-truth sideslip (rad)
    double v_s = 0.0;
    double a_y = 0.0;
    std::size_t scenario = 0; // index within its split
    std::size_t t = 0;        // frame index
};

inline constexpr std::string_view kFusionCsvHeader = "beta_ml,delta_ml,beta_vm1,delta_vm1,beta_vm2,delta_vm2,y";
inline constexpr std::string_view kFusionMetaHeader = "scenario,t,v_s,a_y";

/// Aligns ML predictions and VMM traces at t = L of every window. Throws
/// DataError when trace lengths disagree with the window count.
std::vector<FusionRow> build_fusion_rows(std::span<const Scenario> scenarios,
                                         std::span<const std::vector<EstimateWithUncertainty>> ml,
                                         std::span<const BranchTrace> vmm, const WindowConfig& window);

/// Runs the ML model and both motion models over the scenarios first.
std::vector<FusionRow> build_fusion_dataset(const MlEstimator& model, const KfConfig& kf,
                                            std::span<const Scenario> scenarios, bool floor_at_one = false);

/// Writes `file` with the fusion header and a sibling `<stem>_meta.csv`.
void write_fusion_csv(const std::filesystem::path& file, std::span<const FusionRow> rows);
std::vector<FusionRow> read_fusion_csv(const std::filesystem::path& file);

// --- feature standardisation -------------------------------------------------

template <int N>
struct FeatureScaler {
    Eigen::Matrix<double, N, 1> mean = Eigen::Matrix<double, N, 1>::Zero();
    Eigen::Matrix<double, N, 1> scale = Eigen::Matrix<double, N, 1>::Ones();

    Eigen::Matrix<double, N, 1> apply(const Eigen::Matrix<double, N, 1>& x) const
    {
        return (x - mean).cwiseQuotient(scale);
    }
};

using HScaler = FeatureScaler<6>;
HScaler fit_h_scaler(std::span<const FusionRow> rows);

// --- deep fusion ---------------------------------------------------------------

/// 6 -> 20 -> 10 -> 1 with ReLU between layers. Parameter names l1, l2, l3.
struct DfParams {
    ad::ParameterSet params;

    static DfParams init(std::uint64_t seed);
    static DfParams zeros();
};

/// Network output for one (already standardised) feature vector.
double df_forward(const Eigen::Matrix<double, 6, 1>& x, const DfParams& p);
/// Graph over a batch of feature rows (N x 6) -> N x 1.
ad::Var df_graph(ad::Tape& t, const Eigen::MatrixXd& X, DfParams& p);

struct DfModel {
    DfParams net;
    HScaler scaler;
    std::array<bool, 6> keep = {true, true, true, true, true, true}; // ablation mask
    double output_scale = std::numbers::pi / 180.0;                  // rad per output unit

    Eigen::Matrix<double, 6, 1> features(const FusionInput& h) const;
    double predict(const FusionInput& h) const; // rad
};

struct DfTrainOptions {
    double lr = 1e-3;
    double lr_final = 1e-5; // cosine decay target, reached in the last epoch
    std::size_t batch = 250;
    std::size_t epochs = 100;
    std::uint64_t seed = 1;
    std::array<bool, 6> keep = {true, true, true, true, true, true};
};

struct DfEpochLog {
    std::size_t epoch = 0;
    double train_mse = 0.0; // deg^2
    double val_mse = 0.0;   // deg^2
};

struct DfTrainResult {
    DfModel model; // best validation MSE
    std::vector<DfEpochLog> log;
    std::size_t best_epoch = 0;
};

/// Mean squared error on targets in output units. Throws DataError on empty
/// splits and NumericalError on divergence.
DfTrainResult train_df(std::span<const FusionRow> train, std::span<const FusionRow> val, const DfTrainOptions& opt);

double df_mse_deg2(const DfModel& model, std::span<const FusionRow> rows);

/// Masks for the 2-of-3 ablation: (ml, vm1), (ml, vm2), (vm1, vm2).
struct AblationCase {
    std::string name;
    std::array<bool, 6> keep;
};
std::vector<AblationCase> ablation_cases();

} // namespace slipsense
