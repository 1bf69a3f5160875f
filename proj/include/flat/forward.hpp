#pragma once

#include "flat/model.hpp"

#include <vector>

namespace flat {

/// One calibration batch of input hidden states, rows are tokens.
struct CalibrationBatch {
    Mat x; // N x d_hid

    Index tokens() const { return x.rows(); }
    void validate(const ModelConfig& cfg) const;
};

/// Intermediate activations of one decoder forward pass. Value/key taps are
/// per kv-head, query taps and attention maps per query head.
struct DecoderTaps {
    std::vector<Mat> y_q;  // H matrices, N x d_head (or N x r when compressed)
    std::vector<Mat> y_k;  // G matrices
    std::vector<Mat> y_v;  // G matrices
    std::vector<Mat> attn; // H matrices, N x N, rows sum to 1 (causal softmax)
    Mat mlp_act;           // N x d_int (or N x k), post-SiLU
    Mat attn_out;          // N x d_hid, attention block output before residual
    Mat mlp_out;           // N x d_hid, MLP block output before residual
    Mat y;                 // N x d_hid, decoder output (both residuals added)
};

Vec rms_norm_row(const Vec& x, const Vec& gain, double eps);
Mat rms_norm(const Mat& x, const Vec& gain, double eps);

// Pre-norm residual decoder with causal attention:
//   y = x + attn(rmsnorm(x)) + mlp(rmsnorm(x + attn(...)))
DecoderTaps forward_decoder(const DecoderWeights& w, const Mat& x, const ModelConfig& cfg);
DecoderTaps forward_decoder(const CompressedDecoderWeights& w, const Mat& x,
                            const ModelConfig& cfg);

/// Hidden states collected while running a full model.
struct ForwardTrace {
    std::vector<Mat> layer_inputs;  // L entries, input to each decoder
    std::vector<DecoderTaps> taps;  // L entries
    Mat output;                     // N x d_hid
};

ForwardTrace forward_model(const Model& model, const Mat& x);
ForwardTrace forward_model(const CompressedModel& model, const Mat& x);

} // namespace flat
