#pragma once

#include "flat/model.hpp"
#include "flat/pca.hpp"

#include <vector>

namespace flat {

/// Ridge leverage score per intermediate channel: diag(C (C + I)^-1),
/// each in [0, 1).
struct LeverageScores {
    Vec scores;
};

/// Top-k channel selection, indices strictly increasing.
struct SelectionMatrix {
    std::vector<int> indices;

    int k() const { return static_cast<int>(indices.size()); }
};

/// Compressed MLP pair with intermediate width k.
struct MlpCompression {
    Mat w_up;   // k x d_hid, selected rows of the up-projection
    Mat w_down; // d_hid x k, Nystrom-reconstructed down-projection
    SelectionMatrix selection;
};

// Computed through the eigendecomposition of c_sigma:
// score_i = sum_j q_ij^2 * lambda_j / (lambda_j + 1).
LeverageScores ridge_leverage(const Mat& c_sigma);

// k largest scores, ties broken toward the lower index.
SelectionMatrix select_topk(const LeverageScores& scores, int k);

// Keeps the selected up-projection channels and rebuilds the down-projection
// from the selected block: (S^T C S)^-1 S^T C W_down^T. The selected block
// gets ridge damping 1e-8 * trace(C)/d_int when near-singular. k = d_int
// short-circuits to the identity selection so the lossless limit is exact
// even for rank-deficient calibration Grams.
MlpCompression compress_mlp(const DecoderWeights& w, const Mat& c_sigma, int k,
                            const ModelConfig& cfg);

} // namespace flat
