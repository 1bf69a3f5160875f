#include "flat/model.hpp"

#include "flat/errors.hpp"

#include <cmath>
#include <string>

namespace flat {

namespace {

void require(bool ok, const std::string& msg) {
    if (!ok) throw data_error(msg);
}

void check_shape(const Mat& m, Index rows, Index cols, const std::string& name, int layer) {
    require(m.rows() == rows && m.cols() == cols,
            "tensor " + name + " of layer " + std::to_string(layer) + " has shape " +
                std::to_string(m.rows()) + "x" + std::to_string(m.cols()) + ", expected " +
                std::to_string(rows) + "x" + std::to_string(cols));
}

void check_finite(const Mat& m, const std::string& name, int layer) {
    require(m.allFinite(), "tensor " + name + " of layer " + std::to_string(layer) +
                               " contains a non-finite value");
}

void check_finite(const Vec& v, const std::string& name, int layer) {
    require(v.allFinite(), "tensor " + name + " of layer " + std::to_string(layer) +
                               " contains a non-finite value");
}

} // namespace

void ModelConfig::validate() const {
    require(d_hid >= 1 && d_head >= 1 && n_q_heads >= 1 && n_kv_heads >= 1 && d_int >= 1,
            "all model dimensions must be >= 1");
    require(n_layers >= 1, "n_layers must be >= 1");
    require(d_hid == n_q_heads * d_head,
            "d_hid (" + std::to_string(d_hid) + ") must equal n_q_heads * d_head (" +
                std::to_string(n_q_heads * d_head) + ")");
    require(n_q_heads % n_kv_heads == 0,
            "n_q_heads (" + std::to_string(n_q_heads) + ") must be a multiple of n_kv_heads (" +
                std::to_string(n_kv_heads) + ")");
    require(std::isfinite(norm_eps) && norm_eps >= 0.0, "norm_eps must be finite and >= 0");
}

void DecoderWeights::validate(const ModelConfig& cfg, int layer) const {
    const Index H = cfg.n_q_heads, G = cfg.n_kv_heads, dh = cfg.d_head;
    check_shape(w_q, H * dh, cfg.d_hid, "w_q", layer);
    check_shape(w_k, G * dh, cfg.d_hid, "w_k", layer);
    check_shape(w_v, G * dh, cfg.d_hid, "w_v", layer);
    check_shape(w_o, cfg.d_hid, H * dh, "w_o", layer);
    check_shape(w_up, cfg.d_int, cfg.d_hid, "w_up", layer);
    check_shape(w_down, cfg.d_hid, cfg.d_int, "w_down", layer);
    require(rms_attn.size() == cfg.d_hid, "rms_attn of layer " + std::to_string(layer) +
                                              " has wrong length");
    require(rms_mlp.size() == cfg.d_hid, "rms_mlp of layer " + std::to_string(layer) +
                                             " has wrong length");
    check_finite(w_q, "w_q", layer);
    check_finite(w_k, "w_k", layer);
    check_finite(w_v, "w_v", layer);
    check_finite(w_o, "w_o", layer);
    check_finite(w_up, "w_up", layer);
    check_finite(w_down, "w_down", layer);
    check_finite(rms_attn, "rms_attn", layer);
    check_finite(rms_mlp, "rms_mlp", layer);
}

void CompressedDecoderWeights::validate(const ModelConfig& cfg, int layer) const {
    const Index H = cfg.n_q_heads, G = cfg.n_kv_heads, dh = cfg.d_head;
    const int r = retained_rank, k = retained_mlp;
    require(r >= 1 && r <= cfg.d_head,
            "retained_rank of layer " + std::to_string(layer) + " out of [1, d_head]");
    require(k >= 1 && k <= cfg.d_int,
            "retained_mlp of layer " + std::to_string(layer) + " out of [1, d_int]");

    const Index qk_rows = qk_compressed ? r : dh;
    check_shape(w_q, H * qk_rows, cfg.d_hid, "w_q", layer);
    check_shape(w_k, G * qk_rows, cfg.d_hid, "w_k", layer);
    if (qk_compressed) {
        check_shape(q_basis, H * dh, r, "q_basis", layer);
        check_shape(k_basis, G * dh, r, "k_basis", layer);
        check_finite(q_basis, "q_basis", layer);
        check_finite(k_basis, "k_basis", layer);
    } else {
        require(q_basis.size() == 0 && k_basis.size() == 0,
                "layer " + std::to_string(layer) + " carries qk bases without qk compression");
    }
    check_shape(w_v, G * r, cfg.d_hid, "w_v", layer);
    check_shape(w_o, cfg.d_hid, H * r, "w_o", layer);
    check_shape(w_up, k, cfg.d_hid, "w_up", layer);
    check_shape(w_down, cfg.d_hid, k, "w_down", layer);
    require(rms_attn.size() == cfg.d_hid && rms_mlp.size() == cfg.d_hid,
            "rms vectors of layer " + std::to_string(layer) + " have wrong length");

    require(static_cast<int>(mlp_indices.size()) == k,
            "mlp_indices of layer " + std::to_string(layer) + " must list k channels");
    for (std::size_t i = 0; i < mlp_indices.size(); ++i) {
        require(mlp_indices[i] >= 0 && mlp_indices[i] < cfg.d_int,
                "mlp_indices of layer " + std::to_string(layer) + " out of range");
        require(i == 0 || mlp_indices[i - 1] < mlp_indices[i],
                "mlp_indices of layer " + std::to_string(layer) + " must be strictly increasing");
    }

    check_finite(w_q, "w_q", layer);
    check_finite(w_k, "w_k", layer);
    check_finite(w_v, "w_v", layer);
    check_finite(w_o, "w_o", layer);
    check_finite(w_up, "w_up", layer);
    check_finite(w_down, "w_down", layer);
    check_finite(rms_attn, "rms_attn", layer);
    check_finite(rms_mlp, "rms_mlp", layer);
}

void Model::validate() const {
    config.validate();
    if (static_cast<int>(layers.size()) != config.n_layers)
        throw data_error("model has " + std::to_string(layers.size()) + " layers, config declares " +
                         std::to_string(config.n_layers));
    for (int l = 0; l < config.n_layers; ++l) layers[l].validate(config, l);
}

void CompressedModel::validate() const {
    config.validate();
    if (static_cast<int>(layers.size()) != config.n_layers)
        throw data_error("model has " + std::to_string(layers.size()) + " layers, config declares " +
                         std::to_string(config.n_layers));
    for (int l = 0; l < config.n_layers; ++l) layers[l].validate(config, l);
}

Model random_model(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Rng rng(seed);
    const double scale = 1.0 / std::sqrt(static_cast<double>(cfg.d_hid));
    Model m;
    m.config = cfg;
    m.layers.reserve(cfg.n_layers);
    for (int l = 0; l < cfg.n_layers; ++l) {
        DecoderWeights w;
        w.w_q = gaussian_matrix(cfg.n_q_heads * cfg.d_head, cfg.d_hid, rng, scale);
        w.w_k = gaussian_matrix(cfg.n_kv_heads * cfg.d_head, cfg.d_hid, rng, scale);
        w.w_v = gaussian_matrix(cfg.n_kv_heads * cfg.d_head, cfg.d_hid, rng, scale);
        w.w_o = gaussian_matrix(cfg.d_hid, cfg.n_q_heads * cfg.d_head, rng, scale);
        w.w_up = gaussian_matrix(cfg.d_int, cfg.d_hid, rng, scale);
        w.w_down = gaussian_matrix(cfg.d_hid, cfg.d_int, rng, scale);
        w.rms_attn = Vec::Ones(cfg.d_hid);
        w.rms_mlp = Vec::Ones(cfg.d_hid);
        m.layers.push_back(std::move(w));
    }
    return m;
}

} // namespace flat
