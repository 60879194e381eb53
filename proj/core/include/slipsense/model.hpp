#pragma once

#include "slipsense/ad.hpp"
#include "slipsense/attention.hpp"
#include "slipsense/dataset.hpp"
#include "slipsense/types.hpp"

#include <Eigen/Core>

#include <cstdint>
#include <functional>
#include <numbers>
#include <span>
#include <vector>

namespace slipsense {

struct ModelConfig {
    WindowConfig window;
    std::size_t d = 32;
    std::size_t heads = 2;
    std::size_t d_ff = 0; // 0 means 2 d
    double u_factor = 5.0;
    /// Head outputs are multiplied by this before use; pi/180 lets the
    /// network work in degrees while the loss stays in radians.
    double output_scale = std::numbers::pi / 180.0;
    std::uint64_t seed = 1;

    std::size_t ff_dim() const noexcept { return d_ff == 0 ? 2 * d : d_ff; }
    /// Encoder length after the distilling layer.
    std::size_t distilled_len() const noexcept { return (window.L + 1) / 2; }
    std::size_t decoder_len() const noexcept { return window.B + 1 + window.F; }
    void validate() const;
};

struct StudentTParams {
    double mu = 0.0;    // rad
    double sigma = 1.0; // rad
    double nu = 3.0;
};

/// Per-step negative log-likelihood of a Student-t density.
double studentt_nll(double mu, double sigma, double nu, double y);
/// Sum of per-step NLL over a forecast.
double studentt_nll(std::span<const StudentTParams> params, std::span<const double> y);

/// beta = mu, delta = nu/(nu-2) sigma^2. With `floor_at_one` the result is
/// max(delta, 1) instead.
EstimateWithUncertainty predict_with_uncertainty(const StudentTParams& p, bool floor_at_one = false);

/// Per-channel standardisation of the onboard inputs.
struct InputScaler {
    Eigen::RowVectorXd mean = Eigen::RowVectorXd::Zero(kInputDim);
    Eigen::RowVectorXd scale = Eigen::RowVectorXd::Ones(kInputDim);

    static InputScaler fit(std::span<const Scenario> scenarios);
    Eigen::MatrixXd apply(const Eigen::MatrixXd& X) const;
};

namespace ad {

/// [x_{i-1}, x_i, x_{i+1}] per row with zero padding at each sequence edge.
Var shift_concat(Tape& t, Var x, std::size_t seq_len);
/// Max over row pairs (2j, 2j+1) of each sequence; odd lengths repeat the
/// final row.
Var maxpool_time(Tape& t, Var x, std::size_t seq_len);
/// Sum over rows of the Student-t NLL, times `weight`. Columns of `head`
/// are raw outputs (o_mu, o_sigma, o_nu); mu = s o_mu,
/// sigma = s softplus(o_sigma), nu = 3 + softplus(o_nu).
Var studentt_nll_loss(Tape& t, Var head, const Eigen::VectorXd& y, double output_scale, double weight = 1.0);

} // namespace ad

/// conv1d (kernel 3, same padding) + ELU + max-pool stride 2 along time,
/// for sequences stacked along rows.
ad::Var distill(ad::Tape& t, ad::Var x, ad::Var W, ad::Var b, std::size_t seq_len);

/// Sinusoidal positional encoding, rows = positions.
Eigen::MatrixXd positional_encoding(std::size_t first, std::size_t count, std::size_t d);

/// Encoder-decoder sideslip estimator with a Student-t head.
class MlEstimator {
public:
    MlEstimator() : MlEstimator(ModelConfig{}) {}
    explicit MlEstimator(const ModelConfig& cfg);

    const ModelConfig& config() const noexcept { return cfg_; }
    ad::ParameterSet& parameters() noexcept { return params_; }
    const ad::ParameterSet& parameters() const noexcept { return params_; }
    InputScaler& scaler() noexcept { return scaler_; }
    const InputScaler& scaler() const noexcept { return scaler_; }

    /// Raw head output ((batch (F+1)) x 3) for `batch` windows stacked along
    /// rows of X (raw units). Records on `t`; gradients flow only when the
    /// tape has them enabled.
    ad::Var build(ad::Tape& t, const Eigen::MatrixXd& X, std::size_t batch);
    ad::Var build(ad::Tape& t, const Eigen::MatrixXd& X, std::size_t batch) const;

    /// Student-t parameters for steps t = L..L+F of one L x 9 window.
    std::vector<StudentTParams> forward(const Eigen::MatrixXd& X) const;
    /// Rows of (mu, sigma, nu), (F+1) per stacked window.
    Eigen::MatrixXd forward_batch(const Eigen::MatrixXd& X, std::size_t batch) const;

    StudentTParams head_to_params(double o_mu, double o_sigma, double o_nu) const noexcept;

private:
    template <typename Self>
    static ad::Var build_impl(Self& self, ad::Tape& t, const Eigen::MatrixXd& X, std::size_t batch);

    ModelConfig cfg_;
    ad::ParameterSet params_;
    InputScaler scaler_;
};

/// Stacks the windows referenced by refs[first, first+count) into one matrix.
Eigen::MatrixXd stack_windows(std::span<const Scenario> scenarios, std::span<const WindowRef> refs,
                              const WindowConfig& cfg, std::size_t first, std::size_t count);

/// ML estimate at t = L for every window of a scenario, in window order.
std::vector<EstimateWithUncertainty> predict_scenario(const MlEstimator& model, const Scenario& scenario,
                                                      bool floor_at_one = false, std::size_t batch = 256);

struct TrainOptions {
    double lr = 1e-3;
    std::size_t batch = 64;
    std::size_t epochs = 12;
    std::size_t train_stride = 4;
    std::size_t val_stride = 8;
    double clip_norm = 1.0;
    std::uint64_t seed = 1;
};

struct EpochLog {
    std::size_t epoch = 0;
    double train_nll = 0.0; // mean per window
    double val_nll = 0.0;
    double val_mae_deg = 0.0; // at t = L
    double seconds = 0.0;
};

struct TrainResult {
    MlEstimator model; // best validation NLL
    ad::Adam optimizer;
    std::vector<EpochLog> log;
    std::size_t best_epoch = 0;
};

using EpochCallback = std::function<void(const EpochLog&)>;

/// Adam on the mean window NLL. Throws NumericalError on divergence (loss
/// non-finite, or above 10x the initial loss for 3 consecutive epochs) and
/// DataError on empty splits or a target leak in a batch.
TrainResult train_ml(std::span<const Scenario> train, std::span<const Scenario> val, const ModelConfig& cfg,
                     const TrainOptions& opt, const EpochCallback& on_epoch = {});

struct ValidationScore {
    double nll = 0.0;     // mean per window
    double mae_deg = 0.0; // at t = L
    std::size_t windows = 0;
};

ValidationScore score_ml(const MlEstimator& model, std::span<const Scenario> scenarios, std::size_t stride = 1);

} // namespace slipsense
