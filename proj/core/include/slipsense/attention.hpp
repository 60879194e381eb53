#pragma once

#include "slipsense/ad.hpp"

#include <Eigen/Core>

#include <cstddef>
#include <vector>

namespace slipsense {

/// M(q_i, K) = max_j(q_i k_j / sqrt(d)) - mean_j(q_i k_j / sqrt(d)), d = Q.cols().
Eigen::VectorXd sparsity_measure(const Eigen::MatrixXd& Q, const Eigen::MatrixXd& K);

/// Indices of the u largest entries of M, ordered by decreasing M (ties by index).
std::vector<Eigen::Index> top_queries(const Eigen::VectorXd& M, std::size_t u);

/// Number of active queries: min(L_Q, c * ceil(ln L_Q)).
std::size_t query_budget(double factor, std::size_t query_len);

/// softmax(Q K^T / sqrt(d_k)) V.
Eigen::MatrixXd dense_attention(const Eigen::MatrixXd& Q, const Eigen::MatrixXd& K, const Eigen::MatrixXd& V);

/// Top-u queries (by sparsity measure) get exact softmax attention; every
/// other row receives the mean of the rows of V. Requires u <= L_Q.
Eigen::MatrixXd probsparse_attention(const Eigen::MatrixXd& Q, const Eigen::MatrixXd& K, const Eigen::MatrixXd& V,
                                     std::size_t u);

struct AttentionShape {
    std::size_t heads = 1;
    std::size_t query_len = 0; // rows per sequence in Q
    std::size_t key_len = 0;   // rows per sequence in K and V
    bool sparse = true;
    double u_factor = 5.0;
};

namespace ad {

/// Multi-head attention over a batch of sequences stacked along rows.
/// q is (batch*query_len) x d, k and v are (batch*key_len) x d; heads split
/// the columns evenly. Query selection is treated as locally constant.
Var multihead_attention(Tape& t, Var q, Var k, Var v, const AttentionShape& shape);

} // namespace ad

} // namespace slipsense
