#include "flat/pca.hpp"

#include "flat/errors.hpp"

#include <algorithm>
#include <numeric>
#include <string>
#include <vector>

namespace flat {

namespace {

// Flip each column so its first nonzero entry is positive.
void canonicalize_signs(Mat& q) {
    for (Index j = 0; j < q.cols(); ++j) {
        for (Index i = 0; i < q.rows(); ++i) {
            if (q(i, j) != 0.0) {
                if (q(i, j) < 0.0) q.col(j) = -q.col(j);
                break;
            }
        }
    }
}

bool col_lex_less(const Mat& q, Index a, Index b) {
    for (Index i = 0; i < q.rows(); ++i) {
        if (q(i, a) != q(i, b)) return q(i, a) < q(i, b);
    }
    return false;
}

} // namespace

EigenDecomposition sym_eig(const Mat& c) {
    if (c.rows() != c.cols())
        throw usage_error("sym_eig expects a square matrix, got " + std::to_string(c.rows()) +
                          "x" + std::to_string(c.cols()));
    if (!c.allFinite()) throw numeric_error("sym_eig input contains a non-finite value");

    const Index d = c.rows();
    EigenDecomposition out;
    if (max_abs(c) == 0.0) {
        out.q = Mat::Identity(d, d);
        out.lambda = Vec::Zero(d);
        return out;
    }

    Mat sym = 0.5 * (c + c.transpose());
    Eigen::SelfAdjointEigenSolver<Mat> solver(sym);
    if (solver.info() != Eigen::Success)
        throw numeric_error("symmetric eigendecomposition failed to converge");

    Mat q = solver.eigenvectors();
    Vec lambda = solver.eigenvalues(); // ascending
    canonicalize_signs(q);

    std::vector<Index> order(static_cast<std::size_t>(d));
    std::iota(order.begin(), order.end(), Index{0});
    std::stable_sort(order.begin(), order.end(), [&](Index a, Index b) {
        if (lambda(a) != lambda(b)) return lambda(a) > lambda(b);
        return col_lex_less(q, a, b);
    });

    out.q.resize(d, d);
    out.lambda.resize(d);
    for (Index j = 0; j < d; ++j) {
        out.q.col(j) = q.col(order[static_cast<std::size_t>(j)]);
        out.lambda(j) = lambda(order[static_cast<std::size_t>(j)]);
    }

    const double lmax = out.lambda(0);
    if (lmax < 0.0)
        throw numeric_error("matrix is not PSD: largest eigenvalue " + std::to_string(lmax));
    const double floor = -1e-10 * lmax;
    for (Index i = 0; i < d; ++i) {
        if (out.lambda(i) < floor)
            throw numeric_error("matrix is not PSD: eigenvalue " + std::to_string(out.lambda(i)) +
                                " below tolerance (accumulator may be corrupted)");
        out.lambda(i) = std::max(out.lambda(i), 0.0);
    }
    return out;
}

TruncatedBasis truncate(const EigenDecomposition& eig, int r) {
    if (r < 1 || r > eig.dim())
        throw usage_error("truncation rank " + std::to_string(r) + " out of [1, " +
                          std::to_string(eig.dim()) + "]");
    return TruncatedBasis{eig.q.leftCols(r), r};
}

double reconstruction_error(const Mat& y, const TruncatedBasis& basis) {
    if (y.cols() != basis.q.rows())
        throw usage_error("reconstruction_error: y has " + std::to_string(y.cols()) +
                          " columns, basis expects " + std::to_string(basis.q.rows()));
    const Mat residual = y - (y * basis.q) * basis.q.transpose();
    return residual.squaredNorm();
}

double tail_sum(const EigenDecomposition& eig, int r) {
    if (r < 0 || r > eig.dim()) throw usage_error("tail_sum rank out of range");
    double s = 0.0;
    for (Index i = r; i < eig.dim(); ++i) s += eig.lambda(i);
    return s;
}

} // namespace flat
