#include "flat/calibration.hpp"
#include "flat/errors.hpp"
#include "flat/mlp_compress.hpp"

#include <doctest.h>

#include <Eigen/Cholesky>

#include "oracles.hpp"

using namespace flat;

namespace {

Mat random_psd(Index d, Rng& rng, Index samples = 0) {
    if (samples == 0) samples = 2 * d;
    const Mat a = gaussian_matrix(samples, d, rng);
    return a.transpose() * a;
}

DecoderWeights mlp_only_weights(const ModelConfig& cfg, std::uint64_t seed) {
    return random_model(cfg, seed).layers[0];
}

} // namespace

TEST_CASE("ridge leverage closed forms") {
    SUBCASE("zero correlation gives zero scores") {
        const LeverageScores s = ridge_leverage(Mat::Zero(4, 4));
        CHECK(s.scores.maxCoeff() == 0.0);
    }
    SUBCASE("diagonal case is lambda over lambda plus one") {
        Mat c = Mat::Zero(2, 2);
        c(0, 0) = 3.0;
        c(1, 1) = 1.0;
        const LeverageScores s = ridge_leverage(c);
        CHECK(s.scores(0) == doctest::Approx(0.75).epsilon(1e-12));
        CHECK(s.scores(1) == doctest::Approx(0.5).epsilon(1e-12));
    }
    SUBCASE("random PSD matches a dense linear solve") {
        Rng rng(91);
        const Mat c = random_psd(6, rng);
        const LeverageScores s = ridge_leverage(c);
        // independent route: solve (C + I) X = C and read the diagonal
        const Mat x = (c + Mat(Mat::Identity(6, 6))).ldlt().solve(c);
        for (Index i = 0; i < 6; ++i)
            CHECK(s.scores(i) == doctest::Approx(x(i, i)).epsilon(1e-10));
    }
    SUBCASE("scores stay inside the unit interval") {
        Rng rng(92);
        for (int trial = 0; trial < 30; ++trial) {
            const LeverageScores s = ridge_leverage(random_psd(5, rng));
            CHECK(s.scores.minCoeff() >= 0.0);
            CHECK(s.scores.maxCoeff() < 1.0);
        }
    }
}

TEST_CASE("leverage sum is monotone under PSD increments") {
    Rng rng(93);
    for (int trial = 0; trial < 25; ++trial) {
        const Mat c = random_psd(6, rng);
        const Mat d = random_psd(6, rng, 4); // possibly rank-deficient increment
        const double before = ridge_leverage(c).scores.sum();
        const double after = ridge_leverage(Mat(c + d)).scores.sum();
        CHECK(after >= before - 1e-10);
    }
}

TEST_CASE("top-k selection") {
    LeverageScores s;
    s.scores = Vec(3);
    s.scores << 0.9, 0.1, 0.5;
    CHECK(select_topk(s, 2).indices == std::vector<int>{0, 2});
    CHECK(select_topk(s, 3).indices == std::vector<int>{0, 1, 2});

    SUBCASE("ties break toward the lower index") {
        LeverageScores tie;
        tie.scores = Vec::Constant(4, 0.25);
        CHECK(select_topk(tie, 2).indices == std::vector<int>{0, 1});
    }
    SUBCASE("bounds") {
        CHECK_THROWS_AS(select_topk(s, 0), usage_error);
        CHECK_THROWS_AS(select_topk(s, 4), usage_error);
    }
}

TEST_CASE("full selection keeps the down-projection verbatim") {
    const ModelConfig cfg = oracle::toy_config(1, 4, 2, 1, 10);
    const DecoderWeights w = mlp_only_weights(cfg, 94);
    Rng rng(95);
    const Mat c = random_psd(cfg.d_int, rng, 4); // rank-deficient on purpose
    const MlpCompression mlp = compress_mlp(w, c, cfg.d_int, cfg);
    CHECK(mlp.w_down == w.w_down);
    CHECK(mlp.w_up == w.w_up);
    CHECK(mlp.selection.k() == cfg.d_int);
}

TEST_CASE("diagonal correlation restricts the down-projection exactly") {
    const ModelConfig cfg = oracle::toy_config(1, 4, 2, 1, 8);
    const DecoderWeights w = mlp_only_weights(cfg, 96);
    Vec diag(8);
    diag << 5.0, 0.5, 4.0, 0.25, 3.0, 0.125, 2.0, 1.0;
    const Mat c = diag.asDiagonal();

    const MlpCompression mlp = compress_mlp(w, c, 4, cfg);
    CHECK(mlp.selection.indices == std::vector<int>{0, 2, 4, 6});
    for (int i = 0; i < 4; ++i) {
        const int channel = mlp.selection.indices[static_cast<std::size_t>(i)];
        CHECK(rel_fro_error(Mat(mlp.w_down.col(i)), Mat(w.w_down.col(channel))) < 1e-10);
        CHECK(Mat(mlp.w_up.row(i)) == Mat(w.w_up.row(channel)));
    }
}

TEST_CASE("activations spanned by the selected channels are recovered exactly") {
    const ModelConfig cfg = oracle::toy_config(1, 4, 2, 1, 8);
    const DecoderWeights w = mlp_only_weights(cfg, 97);

    // activations live on channels {1, 3, 6} only
    Rng rng(98);
    Mat sigma = Mat::Zero(20, cfg.d_int);
    const std::vector<int> active = {1, 3, 6};
    for (int ch : active) sigma.col(ch) = gaussian_matrix(20, 1, rng);
    const Mat c = sigma.transpose() * sigma;

    const MlpCompression mlp = compress_mlp(w, c, 3, cfg);
    CHECK(mlp.selection.indices == active);

    // compressed MLP tail reproduces the original on these activations
    Mat sigma_sel(20, 3);
    for (int i = 0; i < 3; ++i) sigma_sel.col(i) = sigma.col(active[static_cast<std::size_t>(i)]);
    const Mat original = sigma * w.w_down.transpose();
    const Mat compressed = sigma_sel * mlp.w_down.transpose();
    CHECK(rel_fro_error(compressed, original) < 1e-8);
}

TEST_CASE("calibration-set reconstruction improves with nested selections") {
    const ModelConfig cfg = oracle::toy_config(1, 4, 2, 1, 16);
    const Model model = random_model(cfg, 99);
    const auto batches = synthetic_batches(cfg, 2, 40, 100);
    const CalibrationCapture cap = run_calibration(model, batches);

    // post-SiLU activations over the whole calibration set
    Mat sigma(0, cfg.d_int);
    for (const auto& b : batches) {
        const DecoderTaps t = forward_decoder(model.layers[0], b.x, cfg);
        Mat grown(sigma.rows() + t.mlp_act.rows(), cfg.d_int);
        grown << sigma, t.mlp_act;
        sigma = std::move(grown);
    }

    double prev = std::numeric_limits<double>::infinity();
    for (const int k : {2, 4, 8, 12, 16}) {
        const MlpCompression mlp = compress_mlp(model.layers[0], cap.c_sigma[0], k, cfg);
        Mat sigma_sel(sigma.rows(), k);
        for (int i = 0; i < k; ++i)
            sigma_sel.col(i) = sigma.col(mlp.selection.indices[static_cast<std::size_t>(i)]);
        const double err =
            (sigma_sel * mlp.w_down.transpose() - sigma * model.layers[0].w_down.transpose())
                .norm();
        CHECK(err <= prev + 1e-9);
        prev = err;
    }
}

TEST_CASE("near-singular selected blocks fall back to damping") {
    const ModelConfig cfg = oracle::toy_config(1, 4, 2, 1, 6);
    const DecoderWeights w = mlp_only_weights(cfg, 101);
    // two selected channels perfectly correlated -> singular 2x2 block
    Mat sigma = Mat::Zero(10, cfg.d_int);
    Rng rng(102);
    sigma.col(0) = gaussian_matrix(10, 1, rng);
    sigma.col(1) = sigma.col(0);
    const Mat c = sigma.transpose() * sigma;
    const MlpCompression mlp = compress_mlp(w, c, 2, cfg);
    CHECK(mlp.w_down.allFinite());
}

TEST_CASE("width bounds are enforced") {
    const ModelConfig cfg = oracle::toy_config(1, 4, 2, 1, 6);
    const DecoderWeights w = mlp_only_weights(cfg, 103);
    Rng rng(104);
    const Mat c = random_psd(cfg.d_int, rng);
    CHECK_THROWS_AS(compress_mlp(w, c, 0, cfg), usage_error);
    CHECK_THROWS_AS(compress_mlp(w, c, cfg.d_int + 1, cfg), usage_error);
}
