#include "slipsense/attention.hpp"

#include "slipsense/error.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace slipsense {

namespace {

/// Row-wise softmax in place.
void softmax_rows(Eigen::MatrixXd& S)
{
    for (Eigen::Index i = 0; i < S.rows(); ++i) {
        const double mx = S.row(i).maxCoeff();
        S.row(i) = (S.row(i).array() - mx).exp();
        S.row(i) /= S.row(i).sum();
    }
}

} // namespace

Eigen::VectorXd sparsity_measure(const Eigen::MatrixXd& Q, const Eigen::MatrixXd& K)
{
    if (Q.cols() != K.cols()) {
        throw StateError("sparsity_measure: Q and K column counts differ");
    }
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(Q.cols()));
    const Eigen::MatrixXd S = (Q * K.transpose()) * inv_sqrt_d;
    return S.rowwise().maxCoeff() - S.rowwise().mean();
}

std::vector<Eigen::Index> top_queries(const Eigen::VectorXd& M, std::size_t u)
{
    std::vector<Eigen::Index> idx(static_cast<std::size_t>(M.size()));
    std::iota(idx.begin(), idx.end(), Eigen::Index{0});
    u = std::min(u, idx.size());
    std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(u), idx.end(),
                      [&M](Eigen::Index a, Eigen::Index b) { return M[a] > M[b] || (M[a] == M[b] && a < b); });
    idx.resize(u);
    return idx;
}

std::size_t query_budget(double factor, std::size_t query_len)
{
    if (query_len == 0) {
        return 0;
    }
    const double c = std::ceil(std::log(static_cast<double>(query_len)));
    const auto u = static_cast<std::size_t>(std::max(0.0, factor * std::max(c, 1.0)));
    return std::min(u, query_len);
}

Eigen::MatrixXd dense_attention(const Eigen::MatrixXd& Q, const Eigen::MatrixXd& K, const Eigen::MatrixXd& V)
{
    Eigen::MatrixXd S = (Q * K.transpose()) / std::sqrt(static_cast<double>(Q.cols()));
    softmax_rows(S);
    return S * V;
}

Eigen::MatrixXd probsparse_attention(const Eigen::MatrixXd& Q, const Eigen::MatrixXd& K, const Eigen::MatrixXd& V,
                                     std::size_t u)
{
    if (u > static_cast<std::size_t>(Q.rows())) {
        throw StateError("probsparse_attention: u exceeds the number of queries");
    }
    const Eigen::RowVectorXd lazy = V.colwise().mean();
    Eigen::MatrixXd out = lazy.replicate(Q.rows(), 1);
    if (u == 0) {
        return out;
    }
    const auto active = top_queries(sparsity_measure(Q, K), u);
    Eigen::MatrixXd Qs(static_cast<Eigen::Index>(active.size()), Q.cols());
    for (std::size_t i = 0; i < active.size(); ++i) {
        Qs.row(static_cast<Eigen::Index>(i)) = Q.row(active[i]);
    }
    const Eigen::MatrixXd rows = dense_attention(Qs, K, V);
    for (std::size_t i = 0; i < active.size(); ++i) {
        out.row(active[i]) = rows.row(static_cast<Eigen::Index>(i));
    }
    return out;
}

namespace ad {

namespace {

struct HeadCache {
    std::vector<Eigen::Index> active; // query rows (local to the sequence)
    Eigen::MatrixXd P;                // active x key_len softmax weights
};

} // namespace

Var multihead_attention(Tape& t, Var q, Var k, Var v, const AttentionShape& shape)
{
    const auto& Q = t.value(q);
    const auto& K = t.value(k);
    const auto& V = t.value(v);
    const auto Lq = static_cast<Eigen::Index>(shape.query_len);
    const auto Lk = static_cast<Eigen::Index>(shape.key_len);
    const auto H = static_cast<Eigen::Index>(shape.heads);
    if (Lq == 0 || Lk == 0 || H == 0 || Q.cols() % H != 0 || Q.cols() != K.cols() || K.rows() != V.rows() ||
        Q.rows() % Lq != 0 || K.rows() % Lk != 0 || Q.rows() / Lq != K.rows() / Lk) {
        throw StateError("multihead_attention: inconsistent shapes");
    }
    const Eigen::Index batch = Q.rows() / Lq;
    const Eigen::Index dk = Q.cols() / H;
    const Eigen::Index dv = V.cols() / H;
    const double scale_f = 1.0 / std::sqrt(static_cast<double>(dk));
    const std::size_t u = shape.sparse ? query_budget(shape.u_factor, shape.query_len) : shape.query_len;

    Matrix out(Q.rows(), V.cols());
    std::vector<HeadCache> cache(static_cast<std::size_t>(batch * H));
    Eigen::MatrixXd S;
    for (Eigen::Index b = 0; b < batch; ++b) {
        for (Eigen::Index h = 0; h < H; ++h) {
            const auto Qh = Q.block(b * Lq, h * dk, Lq, dk);
            const auto Kh = K.block(b * Lk, h * dk, Lk, dk);
            const auto Vh = V.block(b * Lk, h * dv, Lk, dv);
            auto& c = cache[static_cast<std::size_t>(b * H + h)];
            S.noalias() = (Qh * Kh.transpose()) * scale_f;
            if (u == static_cast<std::size_t>(Lq)) {
                c.active.resize(static_cast<std::size_t>(Lq));
                std::iota(c.active.begin(), c.active.end(), Eigen::Index{0});
                c.P = S;
            } else {
                const Eigen::VectorXd M = S.rowwise().maxCoeff() - S.rowwise().mean();
                c.active = top_queries(M, u);
                c.P.resize(static_cast<Eigen::Index>(c.active.size()), Lk);
                for (std::size_t i = 0; i < c.active.size(); ++i) {
                    c.P.row(static_cast<Eigen::Index>(i)) = S.row(c.active[i]);
                }
                const Eigen::RowVectorXd lazy = Vh.colwise().mean();
                out.block(b * Lq, h * dv, Lq, dv).rowwise() = lazy;
            }
            softmax_rows(c.P);
            const Eigen::MatrixXd rows = c.P * Vh;
            for (std::size_t i = 0; i < c.active.size(); ++i) {
                out.block(b * Lq + c.active[i], h * dv, 1, dv) = rows.row(static_cast<Eigen::Index>(i));
            }
        }
    }

    return t.record(std::move(out), {q, k, v},
                    [q, k, v, cache = std::move(cache), Lq, Lk, H, dk, dv, batch, scale_f](Tape& tp,
                                                                                           const Matrix& g) {
                        const auto& Qv = tp.value(q);
                        const auto& Kv = tp.value(k);
                        const auto& Vv = tp.value(v);
                        Matrix gq = Matrix::Zero(Qv.rows(), Qv.cols());
                        Matrix gk = Matrix::Zero(Kv.rows(), Kv.cols());
                        Matrix gv = Matrix::Zero(Vv.rows(), Vv.cols());
                        Eigen::MatrixXd Gs;
                        Eigen::MatrixXd Qs;
                        for (Eigen::Index b = 0; b < batch; ++b) {
                            for (Eigen::Index h = 0; h < H; ++h) {
                                const auto& c = cache[static_cast<std::size_t>(b * H + h)];
                                const auto n_act = static_cast<Eigen::Index>(c.active.size());
                                const auto Kh = Kv.block(b * Lk, h * dk, Lk, dk);
                                const auto Vh = Vv.block(b * Lk, h * dv, Lk, dv);
                                Gs.resize(n_act, dv);
                                Qs.resize(n_act, dk);
                                Eigen::RowVectorXd lazy_g = Eigen::RowVectorXd::Zero(dv);
                                std::vector<char> is_active(static_cast<std::size_t>(Lq), 0);
                                for (Eigen::Index i = 0; i < n_act; ++i) {
                                    const auto r = c.active[static_cast<std::size_t>(i)];
                                    is_active[static_cast<std::size_t>(r)] = 1;
                                    Gs.row(i) = g.block(b * Lq + r, h * dv, 1, dv);
                                    Qs.row(i) = Qv.block(b * Lq + r, h * dk, 1, dk);
                                }
                                for (Eigen::Index r = 0; r < Lq; ++r) {
                                    if (!is_active[static_cast<std::size_t>(r)]) {
                                        lazy_g += g.block(b * Lq + r, h * dv, 1, dv);
                                    }
                                }
                                auto gVh = gv.block(b * Lk, h * dv, Lk, dv);
                                if (n_act < Lq) {
                                    gVh.rowwise() += lazy_g / static_cast<double>(Lk);
                                }
                                if (n_act == 0) {
                                    continue;
                                }
                                gVh.noalias() += c.P.transpose() * Gs;
                                Eigen::MatrixXd dP = Gs * Vh.transpose();
                                const Eigen::VectorXd row_dot = dP.cwiseProduct(c.P).rowwise().sum();
                                dP.colwise() -= row_dot;
                                const Eigen::MatrixXd dS = c.P.cwiseProduct(dP) * scale_f;
                                const Eigen::MatrixXd dQs = dS * Kh;
                                gk.block(b * Lk, h * dk, Lk, dk).noalias() += dS.transpose() * Qs;
                                for (Eigen::Index i = 0; i < n_act; ++i) {
                                    gq.block(b * Lq + c.active[static_cast<std::size_t>(i)], h * dk, 1, dk) +=
                                        dQs.row(i);
                                }
                            }
                        }
                        tp.accumulate(q, gq);
                        tp.accumulate(k, gk);
                        tp.accumulate(v, gv);
                    });
}

} // namespace ad

} // namespace slipsense
