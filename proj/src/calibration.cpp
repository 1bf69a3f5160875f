#include "flat/calibration.hpp"

#include "flat/errors.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <future>
#include <string>
#include <tuple>

namespace flat {

namespace {

constexpr char kCalibMagic[8] = {'F', 'L', 'A', 'T', 'C', 'A', 'L', '1'};

Mat gram(const Mat& y) {
    Mat g = y.transpose() * y;
    g = 0.5 * (g + g.transpose()).eval(); // keep accumulators exactly symmetric
    return g;
}

// Per-layer tap widths. A compressed model produces r-wide value taps and
// k-wide activations, so its accumulators shrink with it.
struct LayerWidths {
    Index value, qk, mlp;
};

LayerWidths tap_widths(const Model& model, int) {
    return {model.config.d_head, model.config.d_head, model.config.d_int};
}

LayerWidths tap_widths(const CompressedModel& model, int layer) {
    const CompressedDecoderWeights& w = model.layers[static_cast<std::size_t>(layer)];
    return {w.retained_rank, w.qk_compressed ? w.retained_rank : model.config.d_head,
            w.retained_mlp};
}

template <typename ModelT>
CalibrationCapture empty_capture(const ModelT& model) {
    const ModelConfig& cfg = model.config;
    CalibrationCapture cap;
    cap.config = cfg;
    cap.c_v.resize(cfg.n_layers);
    cap.c_q.resize(cfg.n_layers);
    cap.c_k.resize(cfg.n_layers);
    cap.c_sigma.resize(cfg.n_layers);
    for (int l = 0; l < cfg.n_layers; ++l) {
        const LayerWidths w = tap_widths(model, l);
        cap.c_v[l].assign(cfg.n_kv_heads, Mat::Zero(w.value, w.value));
        cap.c_q[l].assign(cfg.n_q_heads, Mat::Zero(w.qk, w.qk));
        cap.c_k[l].assign(cfg.n_kv_heads, Mat::Zero(w.qk, w.qk));
        cap.c_sigma[l] = Mat::Zero(w.mlp, w.mlp);
    }
    cap.x_in.assign(cfg.n_layers, Mat(0, cfg.d_hid));
    cap.x_out.assign(cfg.n_layers, Mat(0, cfg.d_hid));
    return cap;
}

// Rows retained for cosine scoring: global token indices = 0 mod stride.
std::vector<Index> retained_rows(Index batch_rows, Index global_offset, Index stride) {
    std::vector<Index> rows;
    for (Index i = 0; i < batch_rows; ++i)
        if ((global_offset + i) % stride == 0) rows.push_back(i);
    return rows;
}

Mat take_rows(const Mat& m, const std::vector<Index>& rows) {
    Mat out(static_cast<Index>(rows.size()), m.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Index>(i)) = m.row(rows[i]);
    return out;
}

Mat vstack(const Mat& a, const Mat& b) {
    Mat out(a.rows() + b.rows(), b.cols());
    if (a.rows() > 0) out.topRows(a.rows()) = a;
    if (b.rows() > 0) out.bottomRows(b.rows()) = b;
    return out;
}

template <typename ModelT>
void accumulate_batch(CalibrationCapture& cap, const ModelT& model, const CalibrationBatch& batch,
                      Index global_offset, Index stride) {
    const ModelConfig& cfg = model.config;
    const ForwardTrace trace = forward_model(model, batch.x);
    const std::vector<Index> rows = retained_rows(batch.tokens(), global_offset, stride);
    for (int l = 0; l < cfg.n_layers; ++l) {
        const DecoderTaps& t = trace.taps[l];
        for (int g = 0; g < cfg.n_kv_heads; ++g) {
            cap.c_v[l][g] += gram(t.y_v[g]);
            cap.c_k[l][g] += gram(t.y_k[g]);
        }
        for (int h = 0; h < cfg.n_q_heads; ++h) cap.c_q[l][h] += gram(t.y_q[h]);
        cap.c_sigma[l] += gram(t.mlp_act);
        if (!rows.empty()) {
            cap.x_in[l] = vstack(cap.x_in[l], take_rows(trace.layer_inputs[l], rows));
            cap.x_out[l] = vstack(cap.x_out[l], take_rows(t.y, rows));
        }
    }
}

void merge_into(CalibrationCapture& cap, const CalibrationCapture& part) {
    const ModelConfig& cfg = cap.config;
    for (int l = 0; l < cfg.n_layers; ++l) {
        for (int g = 0; g < cfg.n_kv_heads; ++g) {
            cap.c_v[l][g] += part.c_v[l][g];
            cap.c_k[l][g] += part.c_k[l][g];
        }
        for (int h = 0; h < cfg.n_q_heads; ++h) cap.c_q[l][h] += part.c_q[l][h];
        cap.c_sigma[l] += part.c_sigma[l];
        cap.x_in[l] = vstack(cap.x_in[l], part.x_in[l]);
        cap.x_out[l] = vstack(cap.x_out[l], part.x_out[l]);
    }
}

} // namespace

template <typename ModelT>
CalibrationCapture run_calibration(const ModelT& model, const std::vector<CalibrationBatch>& batches,
                                   const CalibrationOptions& opts) {
    if (batches.empty()) throw usage_error("calibration requires at least one batch");
    model.validate();
    for (const auto& b : batches) b.validate(model.config);

    Index total = 0;
    std::vector<Index> offsets(batches.size());
    for (std::size_t i = 0; i < batches.size(); ++i) {
        offsets[i] = total;
        total += batches[i].tokens();
    }
    const Index cap_rows = std::max<Index>(opts.max_retained_rows, 1);
    const Index stride = (total + cap_rows - 1) / cap_rows; // ceil; 1 when under the cap

    const int threads = std::clamp(opts.threads, 1, static_cast<int>(batches.size()));
    if (threads == 1) {
        CalibrationCapture cap = empty_capture(model);
        for (std::size_t i = 0; i < batches.size(); ++i)
            accumulate_batch(cap, model, batches[i], offsets[i], stride);
        return cap;
    }

    // Fixed contiguous chunks, merged in chunk order.
    std::vector<std::future<CalibrationCapture>> parts;
    const std::size_t per = (batches.size() + threads - 1) / threads;
    for (int c = 0; c < threads; ++c) {
        const std::size_t lo = per * static_cast<std::size_t>(c);
        const std::size_t hi = std::min(batches.size(), lo + per);
        if (lo >= hi) break;
        parts.push_back(std::async(std::launch::async, [&, lo, hi]() {
            CalibrationCapture part = empty_capture(model);
            for (std::size_t i = lo; i < hi; ++i)
                accumulate_batch(part, model, batches[i], offsets[i], stride);
            return part;
        }));
    }
    CalibrationCapture cap = empty_capture(model);
    for (auto& f : parts) merge_into(cap, f.get());
    return cap;
}

template CalibrationCapture run_calibration<Model>(const Model&, const std::vector<CalibrationBatch>&,
                                                   const CalibrationOptions&);
template CalibrationCapture run_calibration<CompressedModel>(const CompressedModel&,
                                                             const std::vector<CalibrationBatch>&,
                                                             const CalibrationOptions&);

ImportanceScores importance_scores(const CalibrationCapture& capture) {
    const int L = capture.config.n_layers;
    ImportanceScores scores;
    scores.t.resize(L);
    scores.c.resize(L);
    for (int l = 0; l < L; ++l) {
        const Mat& in = capture.x_in[l];
        const Mat& out = capture.x_out[l];
        if (in.rows() == 0 || in.rows() != out.rows())
            throw data_error("layer " + std::to_string(l) +
                             " has no retained hidden states for importance scoring");
        double sum = 0.0;
        Index used = 0;
        for (Index p = 0; p < in.rows(); ++p) {
            const double ni = in.row(p).norm();
            const double no = out.row(p).norm();
            if (ni == 0.0 || no == 0.0) continue; // undefined direction, excluded
            sum += in.row(p).dot(out.row(p)) / (ni * no);
            ++used;
        }
        if (used == 0)
            throw data_error("layer " + std::to_string(l) +
                             " has only zero-norm rows; cosine importance undefined");
        const double c = sum / static_cast<double>(used);
        scores.c(l) = c;
        scores.t(l) = std::acos(std::clamp(c, -1.0, 1.0)) / M_PI;
    }
    return scores;
}

std::vector<CalibrationBatch> synthetic_batches(const ModelConfig& cfg, int n_batches, Index tokens,
                                                std::uint64_t seed) {
    if (n_batches < 1 || tokens < 1)
        throw usage_error("synthetic calibration needs at least one batch and one token");
    std::vector<CalibrationBatch> batches;
    batches.reserve(static_cast<std::size_t>(n_batches));
    for (int m = 0; m < n_batches; ++m) {
        Rng rng(derive_seed(seed, static_cast<std::uint64_t>(m)));
        batches.push_back(CalibrationBatch{gaussian_matrix(tokens, cfg.d_hid, rng)});
    }
    return batches;
}

void save_calibration_file(const std::vector<CalibrationBatch>& batches,
                           const std::filesystem::path& path) {
    if (batches.empty()) throw usage_error("cannot save an empty calibration set");
    const Index tokens = batches.front().tokens();
    const Index d_hid = batches.front().x.cols();
    for (const auto& b : batches)
        if (b.tokens() != tokens || b.x.cols() != d_hid)
            throw data_error("all batches in a calibration file must share one shape");

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw io_error("cannot open " + path.string() + " for writing");
    out.write(kCalibMagic, sizeof(kCalibMagic));
    const std::uint64_t header[3] = {static_cast<std::uint64_t>(batches.size()),
                                     static_cast<std::uint64_t>(tokens),
                                     static_cast<std::uint64_t>(d_hid)};
    out.write(reinterpret_cast<const char*>(header), sizeof(header));
    for (const auto& b : batches)
        out.write(reinterpret_cast<const char*>(b.x.data()),
                  static_cast<std::streamsize>(sizeof(double)) * b.x.size());
    if (!out) throw io_error("short write to " + path.string());
}

std::vector<CalibrationBatch> load_calibration_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw io_error("cannot open calibration file " + path.string());
    char magic[8];
    std::uint64_t header[3];
    in.read(magic, sizeof(magic));
    in.read(reinterpret_cast<char*>(header), sizeof(header));
    if (!in || std::memcmp(magic, kCalibMagic, sizeof(magic)) != 0)
        throw data_error(path.string() + " is not a calibration container");
    const auto [n_batches, tokens, d_hid] = std::tuple{header[0], header[1], header[2]};
    if (n_batches == 0 || tokens == 0 || d_hid == 0)
        throw data_error("calibration container declares an empty shape");

    std::vector<CalibrationBatch> batches;
    batches.reserve(n_batches);
    for (std::uint64_t m = 0; m < n_batches; ++m) {
        Mat x(static_cast<Index>(tokens), static_cast<Index>(d_hid));
        in.read(reinterpret_cast<char*>(x.data()),
                static_cast<std::streamsize>(sizeof(double)) * x.size());
        if (!in) throw data_error("calibration container " + path.string() + " is truncated");
        if (!x.allFinite())
            throw data_error("calibration batch " + std::to_string(m) +
                             " contains a non-finite value");
        batches.push_back(CalibrationBatch{std::move(x)});
    }
    return batches;
}

} // namespace flat
