#pragma once

#include "slipsense/fusion.hpp"

#include <Eigen/Core>
#include <Eigen/Cholesky>

#include <cstdint>
#include <span>
#include <vector>

namespace slipsense {

struct GmmModel {
    std::vector<double> weights;
    std::vector<Eigen::VectorXd> means;
    std::vector<Eigen::MatrixXd> covs;

    std::size_t size() const noexcept { return weights.size(); }
    Eigen::Index dim() const noexcept { return means.empty() ? 0 : means.front().size(); }
    /// log p(x) under the mixture.
    double log_density(const Eigen::VectorXd& x) const;
    /// Mean log-likelihood over the rows of X.
    double mean_log_likelihood(const Eigen::MatrixXd& X) const;
    /// Weights sum to one, covariances symmetric with eigenvalues >= floor.
    void validate(double cov_floor = 0.0) const;
};

struct EmOptions {
    std::size_t K = 8;
    std::uint64_t seed = 1;
    std::size_t max_iter = 300;
    double tol = 1e-8;        // on the change of mean log-likelihood
    double cov_floor = 1e-6;  // minimum covariance eigenvalue
    double prune_weight = 1e-6;
};

struct EmResult {
    GmmModel model;
    std::vector<double> log_likelihood; // total, one per E-step
    std::size_t iterations = 0;
    bool converged = false;
    std::size_t pruned = 0;
};

/// EM on the rows of X with k-means++ seeding. Throws DataError when there
/// are fewer than 10 K rows.
EmResult em_fit(const Eigen::MatrixXd& X, const EmOptions& opt);

/// One-dimensional mixture p(y | h).
struct ConditionalMixture {
    std::vector<double> weights;
    std::vector<double> means;
    std::vector<double> vars;

    double density(double y) const;
    double mean() const;
    /// Highest density point: component means plus a 512-point grid, then a
    /// golden-section refinement. A single component holding more than
    /// 0.999 of the weight returns its mean directly.
    double mode() const;
};

/// Gaussian conditioning of every component on all dimensions except `target`.
class GmmRegressor {
public:
    GmmRegressor() = default;
    GmmRegressor(const GmmModel& model, Eigen::Index target);

    /// Throws NumericalError when every component weight underflows.
    ConditionalMixture condition(const Eigen::VectorXd& h) const;

private:
    struct Part {
        double log_weight = 0.0;
        Eigen::VectorXd mu_h;
        Eigen::MatrixXd chol_l; // lower Cholesky factor of Sigma_hh
        double log_det = 0.0;
        Eigen::RowVectorXd gain; // Sigma_yh Sigma_hh^-1
        double mu_y = 0.0;
        double var_y = 0.0;
    };
    std::vector<Part> parts_;
    Eigen::Index target_ = 0;
};

/// Gaussian regression fusion over standardised (h, y).
struct GfModel {
    GmmModel gmm;
    FeatureScaler<7> scaler;
    GmmRegressor regressor; // rebuilt by prepare()

    void prepare();
    double predict(const FusionInput& h) const; // rad
};

struct GfFitResult {
    GfModel model;
    std::vector<std::pair<std::size_t, double>> val_log_likelihood; // (K, mean per row)
    std::size_t chosen_k = 0;
};

/// Fits one GMM per candidate K and keeps the best validation likelihood.
GfFitResult fit_gf(std::span<const FusionRow> train, std::span<const FusionRow> val,
                   std::span<const std::size_t> candidates, const EmOptions& base);

inline double gf_fuse(const FusionInput& h, const GfModel& model) { return model.predict(h); }

} // namespace slipsense
