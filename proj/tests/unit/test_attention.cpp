#include "slipsense/attention.hpp"

#include "grad_check.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>

using namespace slipsense;
using Eigen::MatrixXd;

namespace {

MatrixXd gaussian(Eigen::Index r, Eigen::Index c, std::mt19937_64& rng)
{
    std::normal_distribution<double> n(0.0, 1.0);
    MatrixXd m(r, c);
    for (Eigen::Index i = 0; i < m.size(); ++i) {
        m.data()[i] = n(rng);
    }
    return m;
}

// Row-by-row softmax attention written out with plain loops.
MatrixXd brute_attention(const MatrixXd& Q, const MatrixXd& K, const MatrixXd& V)
{
    const double inv = 1.0 / std::sqrt(static_cast<double>(Q.cols()));
    MatrixXd out = MatrixXd::Zero(Q.rows(), V.cols());
    for (Eigen::Index i = 0; i < Q.rows(); ++i) {
        std::vector<double> s(static_cast<std::size_t>(K.rows()));
        double mx = -1e300;
        for (Eigen::Index j = 0; j < K.rows(); ++j) {
            double dot = 0.0;
            for (Eigen::Index c = 0; c < Q.cols(); ++c) {
                dot += Q(i, c) * K(j, c);
            }
            s[static_cast<std::size_t>(j)] = dot * inv;
            mx = std::max(mx, dot * inv);
        }
        double z = 0.0;
        for (auto& v : s) {
            v = std::exp(v - mx);
            z += v;
        }
        for (Eigen::Index j = 0; j < K.rows(); ++j) {
            out.row(i) += s[static_cast<std::size_t>(j)] / z * V.row(j);
        }
    }
    return out;
}

} // namespace

TEST(Sparsity, IdenticalKeysGiveZero)
{
    std::mt19937_64 rng(1);
    const MatrixXd Q = gaussian(6, 4, rng);
    const MatrixXd K = gaussian(1, 4, rng).replicate(9, 1);
    EXPECT_LT(sparsity_measure(Q, K).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(Sparsity, NonNegativeAndMatchesBruteForce)
{
    std::mt19937_64 rng(2);
    const MatrixXd Q = gaussian(8, 4, rng);
    const MatrixXd K = gaussian(8, 4, rng);
    const auto M = sparsity_measure(Q, K);
    for (Eigen::Index i = 0; i < Q.rows(); ++i) {
        double mx = -1e300;
        double mean = 0.0;
        for (Eigen::Index j = 0; j < K.rows(); ++j) {
            const double s = Q.row(i).dot(K.row(j)) / 2.0;
            mx = std::max(mx, s);
            mean += s / 8.0;
        }
        EXPECT_NEAR(M[i], mx - mean, 1e-12);
        EXPECT_GE(M[i], 0.0);
    }
}

TEST(Sparsity, TopQueriesOrderAndTies)
{
    Eigen::VectorXd M(5);
    M << 0.1, 0.7, 0.3, 0.7, 0.0;
    EXPECT_EQ(top_queries(M, 3), (std::vector<Eigen::Index>{1, 3, 2}));
    EXPECT_TRUE(top_queries(M, 0).empty());
}

TEST(Sparsity, QueryBudget)
{
    EXPECT_EQ(query_budget(5.0, 50), 20u); // ceil(ln 50) = 4
    EXPECT_EQ(query_budget(5.0, 18), 15u);
    EXPECT_EQ(query_budget(5.0, 6), 6u);
    EXPECT_EQ(query_budget(0.0, 40), 0u);
}

TEST(ProbSparse, FullBudgetEqualsDense)
{
    std::mt19937_64 rng(3);
    std::uniform_int_distribution<int> len(1, 64);
    std::uniform_int_distribution<int> width(1, 32);
    for (int trial = 0; trial < 100; ++trial) {
        const int lq = len(rng);
        const int lk = len(rng);
        const int dk = width(rng);
        const int dv = width(rng);
        const MatrixXd Q = gaussian(lq, dk, rng);
        const MatrixXd K = gaussian(lk, dk, rng);
        const MatrixXd V = gaussian(lk, dv, rng);
        const MatrixXd dense = dense_attention(Q, K, V);
        ASSERT_LT((dense - brute_attention(Q, K, V)).cwiseAbs().maxCoeff(), 1e-10);
        const MatrixXd sparse = probsparse_attention(Q, K, V, static_cast<std::size_t>(lq));
        ASSERT_LT((sparse - dense).cwiseAbs().maxCoeff(), 1e-10) << lq << "x" << dk;
    }
}

TEST(ProbSparse, ZeroBudgetGivesMeanOfValues)
{
    std::mt19937_64 rng(4);
    const MatrixXd Q = gaussian(7, 5, rng);
    const MatrixXd K = gaussian(9, 5, rng);
    const MatrixXd V = gaussian(9, 3, rng);
    const MatrixXd out = probsparse_attention(Q, K, V, 0);
    const Eigen::RowVectorXd mean = V.colwise().mean();
    for (Eigen::Index i = 0; i < out.rows(); ++i) {
        EXPECT_LT((out.row(i) - mean).cwiseAbs().maxCoeff(), 1e-14);
    }
}

TEST(ProbSparse, DominantQueryIsTheOnlyActiveRow)
{
    std::mt19937_64 rng(5);
    MatrixXd Q = 0.01 * gaussian(10, 4, rng);
    Q.row(6) = 25.0 * gaussian(1, 4, rng);
    const MatrixXd K = gaussian(12, 4, rng);
    const MatrixXd V = gaussian(12, 3, rng);
    const MatrixXd out = probsparse_attention(Q, K, V, 1);
    const MatrixXd dense = brute_attention(Q, K, V);
    const Eigen::RowVectorXd mean = V.colwise().mean();
    for (Eigen::Index i = 0; i < out.rows(); ++i) {
        const Eigen::RowVectorXd expect = i == 6 ? Eigen::RowVectorXd(dense.row(i)) : mean;
        EXPECT_LT((out.row(i) - expect).cwiseAbs().maxCoeff(), 1e-12) << "row " << i;
    }
}

TEST(ProbSparse, BudgetAboveQueryLengthRejected)
{
    const MatrixXd Q = MatrixXd::Ones(3, 2);
    EXPECT_THROW(probsparse_attention(Q, Q, Q, 4), std::exception);
}

TEST(MultiHead, GradientsMatchFiniteDifferences)
{
    std::mt19937_64 rng(6);
    for (bool sparse : {false, true}) {
        ad::ParameterSet ps;
        auto& q = ps.add("q", gaussian(2 * 9, 6, rng));
        auto& k = ps.add("k", gaussian(2 * 7, 6, rng));
        auto& v = ps.add("v", gaussian(2 * 7, 6, rng));
        AttentionShape shape;
        shape.heads = 2;
        shape.query_len = 9;
        shape.key_len = 7;
        shape.sparse = sparse;
        shape.u_factor = 1.0;
        const MatrixXd w = gaussian(2 * 9, 6, rng);
        auto graph = [&](ad::Tape& t) {
            auto o = ad::multihead_attention(t, t.parameter(q), t.parameter(k), t.parameter(v), shape);
            return ad::mean_squared_error(t, o, w);
        };
        const auto r = slipsense::testing::check_parameter_gradients(
            ps,
            [&] {
                ad::Tape t(false);
                return t.value(graph(t))(0, 0);
            },
            [&] {
                ad::Tape t;
                t.backward(graph(t));
            },
            120, 9);
        EXPECT_LT(r.worst_rel, 1e-4) << (sparse ? "sparse" : "dense");
    }
}

TEST(MultiHead, DenseHeadsMatchPerHeadOracle)
{
    std::mt19937_64 rng(7);
    const MatrixXd q = gaussian(5, 4, rng);
    const MatrixXd k = gaussian(6, 4, rng);
    const MatrixXd v = gaussian(6, 4, rng);
    AttentionShape shape;
    shape.heads = 2;
    shape.query_len = 5;
    shape.key_len = 6;
    shape.sparse = false;
    ad::Tape t(false);
    const MatrixXd out = t.value(ad::multihead_attention(t, t.constant(q), t.constant(k), t.constant(v), shape));
    for (int h = 0; h < 2; ++h) {
        const MatrixXd ref = brute_attention(q.middleCols(2 * h, 2), k.middleCols(2 * h, 2), v.middleCols(2 * h, 2));
        EXPECT_LT((out.middleCols(2 * h, 2) - ref).cwiseAbs().maxCoeff(), 1e-12);
    }
}
