#include "slipsense/gmm.hpp"

#include "slipsense/error.hpp"
#include "slipsense/numeric.hpp"

#include <Eigen/Eigenvalues>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <random>

namespace slipsense {

namespace {

constexpr double kLog2Pi = 1.8378770664093453;

Eigen::MatrixXd clip_eigenvalues(const Eigen::MatrixXd& S, double floor)
{
    const Eigen::MatrixXd sym = 0.5 * (S + S.transpose());
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(sym);
    const Eigen::VectorXd ev = es.eigenvalues();
    if (ev.minCoeff() >= floor) {
        return sym;
    }
    const Eigen::VectorXd clipped = ev.cwiseMax(floor);
    Eigen::MatrixXd out = es.eigenvectors() * clipped.asDiagonal() * es.eigenvectors().transpose();
    return 0.5 * (out + out.transpose());
}

/// log N(x_i; mu, Sigma) for every row of X.
Eigen::VectorXd log_gaussian_rows(const Eigen::MatrixXd& X, const Eigen::VectorXd& mu, const Eigen::MatrixXd& cov)
{
    Eigen::LLT<Eigen::MatrixXd> llt(cov);
    if (llt.info() != Eigen::Success) {
        throw NumericalError("gmm: covariance is not positive definite");
    }
    const Eigen::MatrixXd L = llt.matrixL();
    const double log_det = 2.0 * L.diagonal().array().log().sum();
    const Eigen::MatrixXd centered = (X.rowwise() - mu.transpose()).transpose();
    const Eigen::MatrixXd z = L.triangularView<Eigen::Lower>().solve(centered);
    const Eigen::VectorXd maha = z.colwise().squaredNorm().transpose();
    return (-0.5 * (static_cast<double>(X.cols()) * kLog2Pi + log_det)) - 0.5 * maha.array();
}

double log_sum_exp(const Eigen::Ref<const Eigen::RowVectorXd>& v)
{
    const double m = v.maxCoeff();
    if (!std::isfinite(m)) {
        return m;
    }
    return m + std::log((v.array() - m).exp().sum());
}

Eigen::MatrixXd sample_cov(const Eigen::MatrixXd& X)
{
    const Eigen::RowVectorXd mean = X.colwise().mean();
    const Eigen::MatrixXd c = X.rowwise() - mean;
    return (c.transpose() * c) / static_cast<double>(X.rows());
}

/// k-means++ seeding followed by a few Lloyd iterations.
std::vector<Eigen::Index> kmeans_assign(const Eigen::MatrixXd& X, std::size_t K, std::mt19937_64& rng,
                                        Eigen::MatrixXd& centers)
{
    const Eigen::Index n = X.rows();
    centers.resize(static_cast<Eigen::Index>(K), X.cols());
    std::uniform_int_distribution<Eigen::Index> pick(0, n - 1);
    centers.row(0) = X.row(pick(rng));
    Eigen::VectorXd d2 = (X.rowwise() - centers.row(0)).rowwise().squaredNorm();
    for (std::size_t k = 1; k < K; ++k) {
        const double total = d2.sum();
        Eigen::Index chosen = pick(rng);
        if (total > 0.0) {
            std::uniform_real_distribution<double> u(0.0, total);
            double target = u(rng);
            for (Eigen::Index i = 0; i < n; ++i) {
                target -= d2[i];
                if (target <= 0.0) {
                    chosen = i;
                    break;
                }
            }
        }
        centers.row(static_cast<Eigen::Index>(k)) = X.row(chosen);
        d2 = d2.cwiseMin((X.rowwise() - centers.row(static_cast<Eigen::Index>(k))).rowwise().squaredNorm());
    }
    std::vector<Eigen::Index> label(static_cast<std::size_t>(n), 0);
    for (int iter = 0; iter < 10; ++iter) {
        for (Eigen::Index i = 0; i < n; ++i) {
            Eigen::Index best = 0;
            (centers.rowwise() - X.row(i)).rowwise().squaredNorm().minCoeff(&best);
            label[static_cast<std::size_t>(i)] = best;
        }
        Eigen::MatrixXd sums = Eigen::MatrixXd::Zero(centers.rows(), X.cols());
        Eigen::VectorXd counts = Eigen::VectorXd::Zero(centers.rows());
        for (Eigen::Index i = 0; i < n; ++i) {
            sums.row(label[static_cast<std::size_t>(i)]) += X.row(i);
            counts[label[static_cast<std::size_t>(i)]] += 1.0;
        }
        for (Eigen::Index k = 0; k < centers.rows(); ++k) {
            if (counts[k] > 0.0) {
                centers.row(k) = sums.row(k) / counts[k];
            }
        }
    }
    return label;
}

} // namespace

double GmmModel::log_density(const Eigen::VectorXd& x) const
{
    return mean_log_likelihood(x.transpose());
}

double GmmModel::mean_log_likelihood(const Eigen::MatrixXd& X) const
{
    Eigen::MatrixXd lp(X.rows(), static_cast<Eigen::Index>(size()));
    for (std::size_t k = 0; k < size(); ++k) {
        lp.col(static_cast<Eigen::Index>(k)) = log_gaussian_rows(X, means[k], covs[k]).array() + std::log(weights[k]);
    }
    double total = 0.0;
    for (Eigen::Index i = 0; i < X.rows(); ++i) {
        total += log_sum_exp(lp.row(i));
    }
    return total / static_cast<double>(X.rows());
}

void GmmModel::validate(double cov_floor) const
{
    if (weights.empty() || means.size() != weights.size() || covs.size() != weights.size()) {
        throw StateError("gmm: inconsistent component arrays");
    }
    double s = 0.0;
    for (double w : weights) {
        s += w;
    }
    if (std::abs(s - 1.0) > 1e-9) {
        throw NumericalError("gmm: weights do not sum to one");
    }
    for (const auto& c : covs) {
        if ((c - c.transpose()).cwiseAbs().maxCoeff() > 1e-12 * (1.0 + c.cwiseAbs().maxCoeff())) {
            throw NumericalError("gmm: covariance is not symmetric");
        }
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(c);
        if (es.eigenvalues().minCoeff() < cov_floor * (1.0 - 1e-9)) {
            throw NumericalError("gmm: covariance eigenvalue below the floor");
        }
    }
}

EmResult em_fit(const Eigen::MatrixXd& X, const EmOptions& opt)
{
    const Eigen::Index n = X.rows();
    const Eigen::Index D = X.cols();
    if (opt.K == 0) {
        throw ConfigError("em_fit: K must be positive");
    }
    if (static_cast<std::size_t>(n) < 10 * opt.K) {
        throw DataError("em_fit: need at least 10 K rows");
    }
    if (!X.allFinite()) {
        throw DataError("em_fit: non-finite data");
    }
    std::mt19937_64 rng(mix_seed(opt.seed, 0x656dULL));
    EmResult res;
    auto& m = res.model;

    Eigen::MatrixXd centers;
    const auto label = kmeans_assign(X, opt.K, rng, centers);
    const Eigen::MatrixXd global_cov = clip_eigenvalues(sample_cov(X), opt.cov_floor);
    for (std::size_t k = 0; k < opt.K; ++k) {
        std::vector<Eigen::Index> rows;
        for (Eigen::Index i = 0; i < n; ++i) {
            if (label[static_cast<std::size_t>(i)] == static_cast<Eigen::Index>(k)) {
                rows.push_back(i);
            }
        }
        m.weights.push_back(std::max<double>(static_cast<double>(rows.size()), 1.0));
        if (static_cast<Eigen::Index>(rows.size()) > D) {
            Eigen::MatrixXd sub(static_cast<Eigen::Index>(rows.size()), D);
            for (std::size_t i = 0; i < rows.size(); ++i) {
                sub.row(static_cast<Eigen::Index>(i)) = X.row(rows[i]);
            }
            m.means.push_back(sub.colwise().mean().transpose());
            m.covs.push_back(clip_eigenvalues(sample_cov(sub), opt.cov_floor));
        } else {
            m.means.push_back(centers.row(static_cast<Eigen::Index>(k)).transpose());
            m.covs.push_back(global_cov);
        }
    }
    double wsum = 0.0;
    for (double w : m.weights) {
        wsum += w;
    }
    for (double& w : m.weights) {
        w /= wsum;
    }

    Eigen::MatrixXd lp;
    double prev = -std::numeric_limits<double>::infinity();
    for (std::size_t iter = 0; iter < opt.max_iter; ++iter) {
        const auto K = static_cast<Eigen::Index>(m.size());
        // E-step
        lp.resize(n, K);
        for (Eigen::Index k = 0; k < K; ++k) {
            lp.col(k) = log_gaussian_rows(X, m.means[static_cast<std::size_t>(k)], m.covs[static_cast<std::size_t>(k)])
                            .array() +
                        std::log(m.weights[static_cast<std::size_t>(k)]);
        }
        double ll = 0.0;
        for (Eigen::Index i = 0; i < n; ++i) {
            const double lse = log_sum_exp(lp.row(i));
            if (!std::isfinite(lse)) {
                throw NumericalError("em_fit: responsibilities underflow for row " + std::to_string(i));
            }
            ll += lse;
            lp.row(i) = (lp.row(i).array() - lse).exp();
        }
        res.log_likelihood.push_back(ll);
        res.iterations = iter + 1;
        if (!std::isfinite(ll)) {
            throw NumericalError("em_fit: non-finite log-likelihood");
        }
        if (iter > 0 && (ll - prev) / static_cast<double>(n) < opt.tol) {
            res.converged = true;
            break;
        }
        prev = ll;

        // M-step
        const Eigen::RowVectorXd nk = lp.colwise().sum();
        GmmModel next;
        for (Eigen::Index k = 0; k < K; ++k) {
            const double w = nk[k] / static_cast<double>(n);
            if (w < opt.prune_weight) {
                ++res.pruned;
                spdlog::warn("em_fit: pruned component with weight {:.3g}", w);
                continue;
            }
            const Eigen::VectorXd mu = (X.transpose() * lp.col(k)) / nk[k];
            const Eigen::MatrixXd c = X.rowwise() - mu.transpose();
            const Eigen::MatrixXd S = (c.transpose() * lp.col(k).asDiagonal() * c) / nk[k];
            next.weights.push_back(w);
            next.means.push_back(mu);
            next.covs.push_back(clip_eigenvalues(S, opt.cov_floor));
        }
        if (next.weights.empty()) {
            throw NumericalError("em_fit: every component collapsed");
        }
        double s = 0.0;
        for (double w : next.weights) {
            s += w;
        }
        for (double& w : next.weights) {
            w /= s;
        }
        m = std::move(next);
    }
    return res;
}

double ConditionalMixture::density(double y) const
{
    double p = 0.0;
    for (std::size_t k = 0; k < weights.size(); ++k) {
        const double d = y - means[k];
        p += weights[k] * std::exp(-0.5 * d * d / vars[k]) / std::sqrt(2.0 * std::numbers::pi * vars[k]);
    }
    return p;
}

double ConditionalMixture::mean() const
{
    double m = 0.0;
    for (std::size_t k = 0; k < weights.size(); ++k) {
        m += weights[k] * means[k];
    }
    return m;
}

double ConditionalMixture::mode() const
{
    if (weights.empty()) {
        throw StateError("conditional mixture is empty");
    }
    const auto top = std::max_element(weights.begin(), weights.end());
    if (*top > 0.999) {
        return means[static_cast<std::size_t>(top - weights.begin())];
    }
    double lo = means[0];
    double hi = means[0];
    double sd = 0.0;
    for (std::size_t k = 0; k < weights.size(); ++k) {
        lo = std::min(lo, means[k]);
        hi = std::max(hi, means[k]);
        sd = std::max(sd, std::sqrt(vars[k]));
    }
    lo -= 3.0 * sd;
    hi += 3.0 * sd;
    constexpr int kGrid = 512;
    const double step = (hi - lo) / (kGrid - 1);
    double best = means[0];
    double best_p = density(best);
    for (double c : means) {
        const double p = density(c);
        if (p > best_p) {
            best_p = p;
            best = c;
        }
    }
    for (int i = 0; i < kGrid; ++i) {
        const double y = lo + step * i;
        const double p = density(y);
        if (p > best_p) {
            best_p = p;
            best = y;
        }
    }
    // golden-section refinement around the best candidate
    const double invphi = (std::sqrt(5.0) - 1.0) / 2.0;
    double a = best - step;
    double b = best + step;
    double c = b - invphi * (b - a);
    double d = a + invphi * (b - a);
    double fc = density(c);
    double fd = density(d);
    for (int i = 0; i < 200 && (b - a) > 1e-12 * (1.0 + std::abs(best)); ++i) {
        if (fc > fd) {
            b = d;
            d = c;
            fd = fc;
            c = b - invphi * (b - a);
            fc = density(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + invphi * (b - a);
            fd = density(d);
        }
    }
    double refined = 0.5 * (a + b);
    // fixed-point steps on d/dy log p = 0
    for (int i = 0; i < 50; ++i) {
        double num = 0.0;
        double den = 0.0;
        for (std::size_t k = 0; k < weights.size(); ++k) {
            const double e = refined - means[k];
            const double r = weights[k] * std::exp(-0.5 * e * e / vars[k]) / std::sqrt(vars[k]);
            num += r * means[k] / vars[k];
            den += r / vars[k];
        }
        if (!(den > 0.0)) {
            break;
        }
        const double next = num / den;
        if (density(next) < density(refined)) {
            break;
        }
        const bool done = std::abs(next - refined) <= 1e-15 * (1.0 + std::abs(refined));
        refined = next;
        if (done) {
            break;
        }
    }
    return density(refined) >= best_p ? refined : best;
}

GmmRegressor::GmmRegressor(const GmmModel& model, Eigen::Index target) : target_(target)
{
    const Eigen::Index D = model.dim();
    if (target < 0 || target >= D || D < 2) {
        throw StateError("gmm regressor: bad target dimension");
    }
    std::vector<Eigen::Index> hidx;
    for (Eigen::Index j = 0; j < D; ++j) {
        if (j != target) {
            hidx.push_back(j);
        }
    }
    const auto Dh = static_cast<Eigen::Index>(hidx.size());
    for (std::size_t k = 0; k < model.size(); ++k) {
        const auto& mu = model.means[k];
        const auto& S = model.covs[k];
        Part p;
        p.log_weight = std::log(model.weights[k]);
        p.mu_h.resize(Dh);
        Eigen::MatrixXd Shh(Dh, Dh);
        Eigen::RowVectorXd Syh(Dh);
        for (Eigen::Index a = 0; a < Dh; ++a) {
            p.mu_h[a] = mu[hidx[static_cast<std::size_t>(a)]];
            Syh[a] = S(target, hidx[static_cast<std::size_t>(a)]);
            for (Eigen::Index b = 0; b < Dh; ++b) {
                Shh(a, b) = S(hidx[static_cast<std::size_t>(a)], hidx[static_cast<std::size_t>(b)]);
            }
        }
        Eigen::LLT<Eigen::MatrixXd> llt(Shh);
        if (llt.info() != Eigen::Success) {
            throw NumericalError("gmm regressor: marginal covariance is not positive definite");
        }
        p.chol_l = llt.matrixL();
        p.log_det = 2.0 * p.chol_l.diagonal().array().log().sum();
        p.gain = llt.solve(Syh.transpose()).transpose();
        p.mu_y = mu[target];
        p.var_y = std::max(S(target, target) - p.gain.dot(Syh), 1e-300);
        parts_.push_back(std::move(p));
    }
}

ConditionalMixture GmmRegressor::condition(const Eigen::VectorXd& h) const
{
    if (parts_.empty()) {
        throw StateError("gmm regressor used before fitting");
    }
    ConditionalMixture cm;
    std::vector<double> logw;
    logw.reserve(parts_.size());
    double mx = -std::numeric_limits<double>::infinity();
    for (const auto& p : parts_) {
        const Eigen::VectorXd diff = h - p.mu_h;
        const Eigen::VectorXd z = p.chol_l.triangularView<Eigen::Lower>().solve(diff);
        const double lw =
            p.log_weight - 0.5 * (static_cast<double>(diff.size()) * kLog2Pi + p.log_det + z.squaredNorm());
        logw.push_back(lw);
        if (lw > mx) {
            mx = lw;
        }
        cm.means.push_back(p.mu_y + p.gain.dot(diff));
        cm.vars.push_back(p.var_y);
    }
    if (!std::isfinite(mx)) {
        throw NumericalError("gmm regressor: all component responsibilities underflow");
    }
    double s = 0.0;
    for (double lw : logw) {
        s += std::exp(lw - mx);
    }
    for (double lw : logw) {
        cm.weights.push_back(std::exp(lw - mx) / s);
    }
    return cm;
}

void GfModel::prepare()
{
    regressor = GmmRegressor(gmm, 6);
}

double GfModel::predict(const FusionInput& h) const
{
    Eigen::Matrix<double, 7, 1> x;
    x << h.vector(), 0.0;
    const Eigen::Matrix<double, 7, 1> z = scaler.apply(x);
    const Eigen::VectorXd hz = z.head<6>();
    const double mode = regressor.condition(hz).mode();
    return scaler.mean[6] + scaler.scale[6] * mode;
}

GfFitResult fit_gf(std::span<const FusionRow> train, std::span<const FusionRow> val,
                   std::span<const std::size_t> candidates, const EmOptions& base)
{
    if (train.empty() || val.empty() || candidates.empty()) {
        throw DataError("fit_gf: empty training data, validation data or K candidates");
    }
    const auto to_matrix = [](std::span<const FusionRow> rows) {
        Eigen::MatrixXd X(static_cast<Eigen::Index>(rows.size()), 7);
        for (std::size_t i = 0; i < rows.size(); ++i) {
            X.row(static_cast<Eigen::Index>(i)) << rows[i].h.vector().transpose(), rows[i].y;
        }
        return X;
    };
    const Eigen::MatrixXd Xtr = to_matrix(train);
    FeatureScaler<7> sc;
    sc.mean = Xtr.colwise().mean().transpose();
    for (int j = 0; j < 7; ++j) {
        const double sd = std::sqrt((Xtr.col(j).array() - sc.mean[j]).square().mean());
        sc.scale[j] = sd > 1e-12 ? sd : 1.0;
    }
    const auto standardize = [&sc](const Eigen::MatrixXd& X) {
        return Eigen::MatrixXd((X.rowwise() - sc.mean.transpose()).array().rowwise() / sc.scale.transpose().array());
    };
    const Eigen::MatrixXd Ztr = standardize(Xtr);
    const Eigen::MatrixXd Zva = standardize(to_matrix(val));

    GfFitResult out;
    double best = -std::numeric_limits<double>::infinity();
    for (std::size_t K : candidates) {
        if (static_cast<std::size_t>(Ztr.rows()) < 10 * K) {
            spdlog::warn("fit_gf: skipping K={} (too few rows)", K);
            continue;
        }
        EmOptions o = base;
        o.K = K;
        auto fit = em_fit(Ztr, o);
        const double vll = fit.model.mean_log_likelihood(Zva);
        out.val_log_likelihood.emplace_back(K, vll);
        spdlog::info("fit_gf: K={} iterations {} validation log-likelihood {:.6f}", K, fit.iterations, vll);
        if (vll > best) {
            best = vll;
            out.chosen_k = K;
            out.model.gmm = std::move(fit.model);
        }
    }
    if (out.chosen_k == 0) {
        throw DataError("fit_gf: no candidate K could be fitted");
    }
    out.model.scaler = sc;
    out.model.prepare();
    return out;
}

} // namespace slipsense
