#include "flat/attn_compress.hpp"

#include "flat/errors.hpp"

#include <numeric>
#include <string>

namespace flat {

namespace {

void check_rank(int r, const ModelConfig& cfg) {
    if (r < 1 || r > cfg.d_head)
        throw usage_error("retained rank " + std::to_string(r) + " out of [1, " +
                          std::to_string(cfg.d_head) + "]");
}

TruncatedBasis head_basis(const Mat& c, int r, int expected_dim, const char* what, int head) {
    if (c.rows() != expected_dim || c.cols() != expected_dim)
        throw data_error(std::string(what) + " accumulator of head " + std::to_string(head) +
                         " has shape " + std::to_string(c.rows()) + "x" + std::to_string(c.cols()) +
                         ", expected " + std::to_string(expected_dim) + " (capture a dense model)");
    const double asym = max_abs(c - Mat(c.transpose()));
    if (asym > 1e-10 * std::max(max_abs(c), 1e-300))
        throw numeric_error(std::string(what) + " accumulator of head " + std::to_string(head) +
                            " is asymmetric beyond tolerance");
    return truncate(sym_eig(c), r);
}

} // namespace

ValueOutputCompression compress_value_output(const DecoderWeights& w, const std::vector<Mat>& c_v,
                                             int r, const ModelConfig& cfg) {
    check_rank(r, cfg);
    const int H = cfg.n_q_heads, G = cfg.n_kv_heads, dh = cfg.d_head;
    if (static_cast<int>(c_v.size()) != G)
        throw usage_error("expected one value accumulator per kv-head");

    ValueOutputCompression out;
    out.bases.reserve(G);
    out.w_v.resize(static_cast<Index>(G) * r, cfg.d_hid);
    out.w_o.resize(cfg.d_hid, static_cast<Index>(H) * r);

    for (int g = 0; g < G; ++g) {
        TruncatedBasis basis = head_basis(c_v[g], r, cfg.d_head, "value", g);
        out.w_v.middleRows(static_cast<Index>(g) * r, r) =
            basis.q.transpose() * w.w_v.middleRows(g * dh, dh);
        out.bases.push_back(std::move(basis.q));
    }
    for (int h = 0; h < H; ++h) {
        const int g = cfg.kv_head(h);
        out.w_o.middleCols(static_cast<Index>(h) * r, r) =
            w.w_o.middleCols(h * dh, dh) * out.bases[g];
    }
    return out;
}

QueryKeyCompression compress_query_key(const DecoderWeights& w, const std::vector<Mat>& c_q,
                                       const std::vector<Mat>& c_k, int r,
                                       const ModelConfig& cfg) {
    check_rank(r, cfg);
    const int H = cfg.n_q_heads, G = cfg.n_kv_heads, dh = cfg.d_head;
    if (static_cast<int>(c_q.size()) != H || static_cast<int>(c_k.size()) != G)
        throw usage_error("query/key accumulator count does not match head counts");

    QueryKeyCompression out;
    out.w_q.resize(static_cast<Index>(H) * r, cfg.d_hid);
    out.w_k.resize(static_cast<Index>(G) * r, cfg.d_hid);
    out.q_basis.resize(static_cast<Index>(H) * dh, r);
    out.k_basis.resize(static_cast<Index>(G) * dh, r);

    for (int h = 0; h < H; ++h) {
        const TruncatedBasis basis = head_basis(c_q[h], r, cfg.d_head, "query", h);
        out.w_q.middleRows(static_cast<Index>(h) * r, r) =
            basis.q.transpose() * w.w_q.middleRows(h * dh, dh);
        out.q_basis.middleRows(static_cast<Index>(h) * dh, dh) = basis.q;
    }
    for (int g = 0; g < G; ++g) {
        const TruncatedBasis basis = head_basis(c_k[g], r, cfg.d_head, "key", g);
        out.w_k.middleRows(static_cast<Index>(g) * r, r) =
            basis.q.transpose() * w.w_k.middleRows(g * dh, dh);
        out.k_basis.middleRows(static_cast<Index>(g) * dh, dh) = basis.q;
    }
    return out;
}

CompressedDecoderWeights compress_attention_layer(const DecoderWeights& w,
                                                  const CalibrationCapture& capture,
                                                  const HeadCompressionPlan& plan,
                                                  const ModelConfig& cfg) {
    if (plan.layer < 0 || plan.layer >= cfg.n_layers)
        throw usage_error("compression plan names layer " + std::to_string(plan.layer) +
                          " outside the model");
    CompressedDecoderWeights out;
    out.retained_rank = plan.r;
    out.qk_compressed = plan.qk_enabled;

    ValueOutputCompression vo = compress_value_output(w, capture.c_v[plan.layer], plan.r, cfg);
    out.w_v = std::move(vo.w_v);
    out.w_o = std::move(vo.w_o);

    if (plan.qk_enabled) {
        QueryKeyCompression qk =
            compress_query_key(w, capture.c_q[plan.layer], capture.c_k[plan.layer], plan.r, cfg);
        out.w_q = std::move(qk.w_q);
        out.w_k = std::move(qk.w_k);
        out.q_basis = std::move(qk.q_basis);
        out.k_basis = std::move(qk.k_basis);
    } else {
        out.w_q = w.w_q;
        out.w_k = w.w_k;
    }

    // MLP untouched at this stage
    out.retained_mlp = cfg.d_int;
    out.w_up = w.w_up;
    out.w_down = w.w_down;
    out.mlp_indices.resize(static_cast<std::size_t>(cfg.d_int));
    std::iota(out.mlp_indices.begin(), out.mlp_indices.end(), 0);

    out.rms_attn = w.rms_attn;
    out.rms_mlp = w.rms_mlp;
    return out;
}

} // namespace flat
