#pragma once

#include "flat/tensor.hpp"

namespace flat {

/// Eigendecomposition of a symmetric PSD matrix, eigenvalues descending and
/// clamped at zero. Columns of q are the eigenvectors.
struct EigenDecomposition {
    Mat q;      // d x d, orthonormal columns
    Vec lambda; // length d, lambda[0] >= ... >= lambda[d-1] >= 0

    Index dim() const { return lambda.size(); }
};

/// First r eigenvector columns of an EigenDecomposition.
struct TruncatedBasis {
    Mat q; // d x r
    int r = 0;
};

// Symmetric eigendecomposition with deterministic ordering. The input is
// symmetrized as (C + C^T)/2 first. Eigenvalues in [-1e-10 * lambda_max, 0)
// are clamped to zero; anything more negative signals a corrupted
// accumulator and throws numeric_error. Ties between equal eigenvalues are
// broken by the sign-canonicalized eigenvectors (first nonzero component
// made positive, then lexicographic order) so repeated runs and checkpoints
// agree. An all-zero input decomposes as q = I, lambda = 0.
EigenDecomposition sym_eig(const Mat& c);

TruncatedBasis truncate(const EigenDecomposition& eig, int r);

// ||y - y q q^T||_F^2 for the truncated basis q.
double reconstruction_error(const Mat& y, const TruncatedBasis& basis);

// Sum of the eigenvalues dropped by a rank-r truncation.
double tail_sum(const EigenDecomposition& eig, int r);

} // namespace flat
