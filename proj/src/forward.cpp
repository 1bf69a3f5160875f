#include "flat/forward.hpp"

#include "flat/errors.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace flat {

namespace {

Mat causal_softmax(const Mat& logits) {
    const Index n = logits.rows();
    Mat p = Mat::Zero(n, logits.cols());
    for (Index i = 0; i < n; ++i) {
        // keys at positions <= i
        double m = logits(i, 0);
        for (Index j = 1; j <= i; ++j) m = std::max(m, logits(i, j));
        double z = 0.0;
        for (Index j = 0; j <= i; ++j) {
            p(i, j) = std::exp(logits(i, j) - m);
            z += p(i, j);
        }
        for (Index j = 0; j <= i; ++j) p(i, j) /= z;
    }
    return p;
}

Mat silu(const Mat& x) {
    return x.unaryExpr([](double v) { return v / (1.0 + std::exp(-v)); });
}

// Attention/MLP skeleton shared by the dense and compressed paths. qk_width
// and v_width are the per-head row counts of the stored projections; `logits`
// turns the y_q/y_k taps of one head pair into pre-softmax scores.
template <typename Weights, typename LogitsFn>
DecoderTaps run_decoder(const Weights& w, const Mat& x, const ModelConfig& cfg, Index qk_width,
                        Index v_width, LogitsFn&& logits) {
    if (x.cols() != cfg.d_hid)
        throw data_error("decoder input has " + std::to_string(x.cols()) + " columns, expected " +
                         std::to_string(cfg.d_hid));
    const int H = cfg.n_q_heads, G = cfg.n_kv_heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(cfg.d_head));

    DecoderTaps t;
    const Mat xn = rms_norm(x, w.rms_attn, cfg.norm_eps);

    t.y_q.reserve(H);
    for (int h = 0; h < H; ++h)
        t.y_q.push_back(xn * w.w_q.middleRows(h * qk_width, qk_width).transpose());
    t.y_k.reserve(G);
    for (int g = 0; g < G; ++g)
        t.y_k.push_back(xn * w.w_k.middleRows(g * qk_width, qk_width).transpose());
    t.y_v.reserve(G);
    for (int g = 0; g < G; ++g)
        t.y_v.push_back(xn * w.w_v.middleRows(g * v_width, v_width).transpose());

    t.attn.reserve(H);
    t.attn_out = Mat::Zero(x.rows(), cfg.d_hid);
    for (int h = 0; h < H; ++h) {
        const int g = cfg.kv_head(h);
        t.attn.push_back(causal_softmax(logits(t, h, g) * scale));
        const Mat z = t.attn[h] * t.y_v[g]; // N x v_width
        t.attn_out += z * w.w_o.middleCols(h * v_width, v_width).transpose();
    }

    const Mat x2 = x + t.attn_out;
    const Mat xn2 = rms_norm(x2, w.rms_mlp, cfg.norm_eps);
    t.mlp_act = silu(xn2 * w.w_up.transpose());
    t.mlp_out = t.mlp_act * w.w_down.transpose();
    t.y = x2 + t.mlp_out;
    return t;
}

} // namespace

void CalibrationBatch::validate(const ModelConfig& cfg) const {
    if (x.rows() < 1) throw data_error("calibration batch must hold at least one token");
    if (x.cols() != cfg.d_hid)
        throw data_error("calibration batch has " + std::to_string(x.cols()) +
                         " columns, model expects " + std::to_string(cfg.d_hid));
    if (!x.allFinite()) throw data_error("calibration batch contains a non-finite value");
}

Vec rms_norm_row(const Vec& x, const Vec& gain, double eps) {
    const double ms = x.squaredNorm() / static_cast<double>(x.size());
    return (x / std::sqrt(ms + eps)).cwiseProduct(gain);
}

Mat rms_norm(const Mat& x, const Vec& gain, double eps) {
    Mat out(x.rows(), x.cols());
    for (Index i = 0; i < x.rows(); ++i) {
        const double ms = x.row(i).squaredNorm() / static_cast<double>(x.cols());
        out.row(i) = x.row(i) / std::sqrt(ms + eps);
    }
    return out * gain.asDiagonal();
}

DecoderTaps forward_decoder(const DecoderWeights& w, const Mat& x, const ModelConfig& cfg) {
    return run_decoder(w, x, cfg, cfg.d_head, cfg.d_head,
                       [](const DecoderTaps& t, int h, int g) -> Mat {
                           return t.y_q[h] * t.y_k[g].transpose();
                       });
}

DecoderTaps forward_decoder(const CompressedDecoderWeights& w, const Mat& x,
                            const ModelConfig& cfg) {
    const int dh = cfg.d_head;
    const Index qk_width = w.qk_compressed ? w.retained_rank : dh;
    return run_decoder(w, x, cfg, qk_width, w.retained_rank,
                       [&](const DecoderTaps& t, int h, int g) -> Mat {
                           if (!w.qk_compressed) return t.y_q[h] * t.y_k[g].transpose();
                           // reconstruct both sides in their own truncated bases;
                           // the bases differ, so neither side cancels
                           const Mat yq = t.y_q[h] * w.q_basis.middleRows(h * dh, dh).transpose();
                           const Mat yk = t.y_k[g] * w.k_basis.middleRows(g * dh, dh).transpose();
                           return yq * yk.transpose();
                       });
}

namespace {

template <typename ModelT>
ForwardTrace run_model(const ModelT& model, const Mat& x) {
    ForwardTrace trace;
    Mat h = x;
    trace.layer_inputs.reserve(model.layers.size());
    trace.taps.reserve(model.layers.size());
    for (const auto& layer : model.layers) {
        trace.layer_inputs.push_back(h);
        trace.taps.push_back(forward_decoder(layer, h, model.config));
        h = trace.taps.back().y;
    }
    trace.output = std::move(h);
    return trace;
}

} // namespace

ForwardTrace forward_model(const Model& model, const Mat& x) { return run_model(model, x); }

ForwardTrace forward_model(const CompressedModel& model, const Mat& x) {
    return run_model(model, x);
}

} // namespace flat
