#pragma once

// Independent reference implementations used only by the tests.

#include "tardis/corpus.hpp"
#include "tardis/numerics.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <vector>

namespace oracle {

inline Eigen::MatrixXd to_eigen(const tardis::Matrix& m) {
    Eigen::MatrixXd e(m.rows(), m.cols());
    for (std::size_t r = 0; r < m.rows(); ++r)
        for (std::size_t c = 0; c < m.cols(); ++c) e(r, c) = m(r, c);
    return e;
}

// Singular values from the eigenvalues of M^T M, descending.
inline std::vector<double> singular_values(const tardis::Matrix& m) {
    const Eigen::MatrixXd a = to_eigen(m);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(a.transpose() * a);
    std::vector<double> s;
    for (Eigen::Index i = es.eigenvalues().size(); i-- > 0;) s.push_back(std::sqrt(std::max(0.0, es.eigenvalues()(i))));
    s.resize(std::min(m.rows(), m.cols()));
    return s;
}

// Best rank-k approximation M V_k V_k^T, V_k the top-k eigenvectors of M^T M.
inline Eigen::MatrixXd rank_k(const tardis::Matrix& m, std::size_t k) {
    const Eigen::MatrixXd a = to_eigen(m);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(a.transpose() * a);
    const Eigen::MatrixXd vk = es.eigenvectors().rightCols(static_cast<Eigen::Index>(k));
    return a * vk * vk.transpose();
}

inline double relative_frobenius(const tardis::Matrix& ours, const Eigen::MatrixXd& ref, const tardis::Matrix& scale) {
    return (to_eigen(ours) - ref).norm() / to_eigen(scale).norm();
}

inline tardis::Matrix random_matrix(std::size_t rows, std::size_t cols, std::uint64_t seed) {
    tardis::Rng rng(seed);
    tardis::Matrix m(rows, cols);
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) m(r, c) = rng.uniform(-1.0, 1.0);
    return m;
}

// Mean difference of the rank-k reconstructions, columns as samples.
inline Eigen::VectorXd lowrank_mean_diff(const tardis::Matrix& source, const tardis::Matrix& target, std::size_t k) {
    return rank_k(target, k).rowwise().mean() - rank_k(source, k).rowwise().mean();
}

// Floor-on-minority by exhaustive search: the minority class (smallest
// positive target share) keeps the largest count m for which the real-valued
// totals m * p_c / p_min fit inside every class; the other classes keep
// round(m * p_c / p_min).
inline std::vector<std::size_t> resample_counts(const std::vector<std::size_t>& have, const std::vector<double>& target) {
    std::size_t minority = have.size();
    for (std::size_t c = 0; c < have.size(); ++c)
        if (target[c] > 0.0 && (minority == have.size() || target[c] < target[minority])) minority = c;
    std::size_t best = 0;
    for (std::size_t m = 0; m <= have[minority]; ++m) {
        bool fits = true;
        for (std::size_t c = 0; c < have.size(); ++c)
            if (static_cast<double>(m) * target[c] / target[minority] > static_cast<double>(have[c]) + 1e-9) fits = false;
        if (fits) best = m;
    }
    std::vector<std::size_t> out(have.size(), 0);
    for (std::size_t c = 0; c < have.size(); ++c)
        if (target[c] > 0.0) out[c] = static_cast<std::size_t>(std::llround(static_cast<double>(best) * target[c] / target[minority]));
    return out;
}

} // namespace oracle
