#pragma once

#include "flat/calibration.hpp"
#include "flat/iprs.hpp"
#include "flat/model.hpp"
#include "flat/pca.hpp"

#include <vector>

namespace flat {

/// Per-decoder compression knobs.
struct HeadCompressionPlan {
    int layer = 0;
    int r = 0;              // retained rank per head, in [1, d_head]
    bool qk_enabled = false;
};

/// Joint value/output truncation. bases[g] is the truncated per-kv-head
/// eigenbasis (d_head x r) that was absorbed into both sides.
struct ValueOutputCompression {
    Mat w_v;                // (G*r) x d_hid, head g absorbed as q_g^T w_v^g
    Mat w_o;                // d_hid x (H*r), head h absorbed as w_o^h q_{g(h)}
    std::vector<Mat> bases; // G matrices, d_head x r
};

/// Independent query/key truncation. The reduced bases are kept because the
/// query and key subspaces differ, so the projectors do not cancel in the
/// logits.
struct QueryKeyCompression {
    Mat w_q;     // (H*r) x d_hid
    Mat w_k;     // (G*r) x d_hid
    Mat q_basis; // (H*d_head) x r
    Mat k_basis; // (G*d_head) x r
};

// Head-wise PCA of the value Grams, shared across each kv-head's query
// group: w_v^g -> q_g^T w_v^g and w_o^h -> w_o^h q_{g(h)}. Pure truncation
// plus absorption; for r = d_head the decoder output is unchanged up to
// roundoff.
ValueOutputCompression compress_value_output(const DecoderWeights& w,
                                             const std::vector<Mat>& c_v, int r,
                                             const ModelConfig& cfg);

QueryKeyCompression compress_query_key(const DecoderWeights& w, const std::vector<Mat>& c_q,
                                       const std::vector<Mat>& c_k, int r,
                                       const ModelConfig& cfg);

// Attention part of one decoder; MLP blocks pass through untouched
// (retained_mlp = d_int) until compress_mlp replaces them.
CompressedDecoderWeights compress_attention_layer(const DecoderWeights& w,
                                                  const CalibrationCapture& capture,
                                                  const HeadCompressionPlan& plan,
                                                  const ModelConfig& cfg);

} // namespace flat
