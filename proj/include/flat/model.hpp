#pragma once

#include "flat/tensor.hpp"

#include <cstdint>
#include <vector>

namespace flat {

/// Dimensions of the toy decoder-only transformer.
struct ModelConfig {
    int d_hid = 0;     // hidden dimension, = n_q_heads * d_head
    int d_head = 0;    // per-head dimension
    int n_q_heads = 0; // H
    int n_kv_heads = 0; // G, divides H
    int d_int = 0;     // MLP intermediate dimension
    int n_layers = 0;  // L
    double norm_eps = 1e-6;

    int group_size() const { return n_q_heads / n_kv_heads; }
    // kv head serving query head h (0-based)
    int kv_head(int h) const { return h / group_size(); }

    // Throws data_error on any structural violation.
    void validate() const;
};

/// Dense weights of one decoder. Projections are stored out_dim x in_dim, so
/// the forward pass computes x * W^T. Head h of w_q occupies rows
/// [h*d_head, (h+1)*d_head); w_o holds head blocks along its columns.
struct DecoderWeights {
    Mat w_q;      // (H*d_head) x d_hid
    Mat w_k;      // (G*d_head) x d_hid
    Mat w_v;      // (G*d_head) x d_hid
    Mat w_o;      // d_hid x (H*d_head)
    Mat w_up;     // d_int x d_hid
    Mat w_down;   // d_hid x d_int
    Vec rms_attn; // d_hid
    Vec rms_mlp;  // d_hid

    void validate(const ModelConfig& cfg, int layer) const;
};

/// Decoder weights after truncation/absorption. Value/output head blocks are
/// r wide; the MLP keeps k intermediate channels. When query/key compression
/// is on, w_q/w_k shrink to r rows per head and the truncated bases are kept
/// (query and key use different subspaces, so neither basis cancels).
struct CompressedDecoderWeights {
    int retained_rank = 0; // r, shared by all heads of this decoder
    int retained_mlp = 0;  // k
    bool qk_compressed = false;

    Mat w_q;     // (H*r) x d_hid when qk_compressed, else (H*d_head) x d_hid
    Mat w_k;     // (G*r) x d_hid when qk_compressed, else (G*d_head) x d_hid
    Mat q_basis; // (H*d_head) x r when qk_compressed, else empty
    Mat k_basis; // (G*d_head) x r when qk_compressed, else empty
    Mat w_v;     // (G*r) x d_hid
    Mat w_o;     // d_hid x (H*r)
    Mat w_up;    // k x d_hid
    Mat w_down;  // d_hid x k
    Vec rms_attn;
    Vec rms_mlp;
    std::vector<int> mlp_indices; // selected intermediate channels, ascending

    void validate(const ModelConfig& cfg, int layer) const;
};

struct Model {
    ModelConfig config;
    std::vector<DecoderWeights> layers;

    void validate() const;
};

struct CompressedModel {
    ModelConfig config;
    std::vector<CompressedDecoderWeights> layers;

    void validate() const;
};

/// Deterministic toy model: weight entries ~ N(0, 1/d_hid), RMSNorm gains 1.
Model random_model(const ModelConfig& cfg, std::uint64_t seed);

} // namespace flat
