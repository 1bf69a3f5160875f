#include "flat/mlp_compress.hpp"

#include "flat/errors.hpp"

#include <algorithm>
#include <numeric>
#include <string>

namespace flat {

LeverageScores ridge_leverage(const Mat& c_sigma) {
    const EigenDecomposition eig = sym_eig(c_sigma);
    const Index d = eig.dim();
    Vec shrink(d);
    for (Index j = 0; j < d; ++j) shrink(j) = eig.lambda(j) / (eig.lambda(j) + 1.0);
    LeverageScores out;
    out.scores = (eig.q.array().square().matrix() * shrink);
    return out;
}

SelectionMatrix select_topk(const LeverageScores& scores, int k) {
    const Index d = scores.scores.size();
    if (k < 1 || k > d)
        throw usage_error("selection size " + std::to_string(k) + " out of [1, " +
                          std::to_string(d) + "]");
    std::vector<int> order(static_cast<std::size_t>(d));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        if (scores.scores(a) != scores.scores(b)) return scores.scores(a) > scores.scores(b);
        return a < b;
    });
    order.resize(static_cast<std::size_t>(k));
    std::sort(order.begin(), order.end());
    return SelectionMatrix{std::move(order)};
}

MlpCompression compress_mlp(const DecoderWeights& w, const Mat& c_sigma, int k,
                            const ModelConfig& cfg) {
    if (c_sigma.rows() != cfg.d_int || c_sigma.cols() != cfg.d_int)
        throw usage_error("c_sigma shape does not match d_int");
    if (k < 1 || k > cfg.d_int)
        throw usage_error("retained MLP width " + std::to_string(k) + " out of [1, " +
                          std::to_string(cfg.d_int) + "]");

    MlpCompression out;
    if (k == cfg.d_int) {
        // full selection: keep everything verbatim
        out.w_up = w.w_up;
        out.w_down = w.w_down;
        out.selection.indices.resize(static_cast<std::size_t>(k));
        std::iota(out.selection.indices.begin(), out.selection.indices.end(), 0);
        return out;
    }

    out.selection = select_topk(ridge_leverage(c_sigma), k);
    const auto& idx = out.selection.indices;

    out.w_up.resize(k, cfg.d_hid);
    for (int i = 0; i < k; ++i) out.w_up.row(i) = w.w_up.row(idx[static_cast<std::size_t>(i)]);

    Mat block(k, k);                 // S^T C S
    Mat cross(k, cfg.d_int);         // S^T C
    for (int i = 0; i < k; ++i) {
        cross.row(i) = c_sigma.row(idx[static_cast<std::size_t>(i)]);
        for (int j = 0; j < k; ++j)
            block(i, j) = c_sigma(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(j)]);
    }

    // rhs = S^T C W_2 with W_2 = w_down^T
    const Mat rhs = cross * w.w_down.transpose(); // k x d_hid

    EigenDecomposition eig = sym_eig(block);
    const double lmax = eig.lambda(0);
    const double lmin = eig.lambda(eig.dim() - 1);
    double damp = 0.0;
    if (lmax <= 0.0 || lmin <= 1e-12 * lmax)
        damp = 1e-8 * c_sigma.trace() / static_cast<double>(cfg.d_int);

    Vec inv(eig.dim());
    for (Index j = 0; j < eig.dim(); ++j) {
        const double denom = eig.lambda(j) + damp;
        if (denom <= 0.0)
            throw numeric_error("selected MLP block is singular even after regularization");
        inv(j) = 1.0 / denom;
    }
    const Mat solved = eig.q * inv.asDiagonal() * (eig.q.transpose() * rhs); // k x d_hid
    if (!solved.allFinite())
        throw numeric_error("Nystrom reconstruction of the down-projection is not finite");
    out.w_down = solved.transpose();
    return out;
}

} // namespace flat
