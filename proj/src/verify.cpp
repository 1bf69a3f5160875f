#include "flat/verify.hpp"

#include "flat/errors.hpp"
#include "flat/forward.hpp"
#include "flat/pca.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <string>

namespace flat {

using json = nlohmann::json;

double check_truncation_identity(std::uint64_t seed, Index n, Index d, int r) {
    if (r < 1 || r > d) throw usage_error("rank out of range for identity check");
    Rng rng(seed);
    const Mat y = gaussian_matrix(n, d, rng);
    const EigenDecomposition eig = sym_eig(y.transpose() * y);
    const double err = reconstruction_error(y, truncate(eig, r));
    const double tail = tail_sum(eig, r);
    return std::abs(err - tail) / std::max(1.0, y.squaredNorm());
}

double check_multihead_identity(std::uint64_t seed, int heads, Index n, Index d_head, int r) {
    if (heads < 1) throw usage_error("identity check needs at least one head");
    if (r < 1 || r > d_head) throw usage_error("rank out of range for identity check");
    double err = 0.0, tail = 0.0, scale = 0.0;
    for (int h = 0; h < heads; ++h) {
        Rng rng(derive_seed(seed, static_cast<std::uint64_t>(h)));
        const Mat y = gaussian_matrix(n, d_head, rng);
        const EigenDecomposition eig = sym_eig(y.transpose() * y);
        err += reconstruction_error(y, truncate(eig, r));
        tail += tail_sum(eig, r);
        scale += y.squaredNorm();
    }
    return std::abs(err - tail) / std::max(1.0, scale);
}

AllocationComparison compare_allocations(const Vec& t, double sparsity, double grid_step) {
    const Index L = t.size();
    if (L > 6) throw usage_error("grid oracle is limited to L <= 6");
    if (grid_step < 0.01 - 1e-12) throw usage_error("grid step must be >= 0.01");
    const long per_unit = std::lround(1.0 / grid_step);
    if (std::abs(per_unit * grid_step - 1.0) > 1e-9)
        throw usage_error("grid step must divide 1");

    AllocationComparison out;
    out.greedy = iprs_allocate(t, sparsity);
    const Vec w_hat = naive_allocation(t, sparsity);
    out.greedy_objective = (out.greedy - w_hat).norm();
    out.grid_tolerance = grid_step * static_cast<double>(L);

    const double budget = static_cast<double>(L) * (1.0 - sparsity);
    const long total_units = std::lround(budget / grid_step);

    Vec best = Vec::Zero(L);
    double best_obj = std::numeric_limits<double>::infinity();
    Vec current = Vec::Zero(L);

    // Exhaustive over grid points with sum fixed at the nearest grid total.
    std::function<void(Index, long)> visit = [&](Index pos, long remaining) {
        if (pos == L - 1) {
            if (remaining < 0 || remaining > per_unit) return;
            current(pos) = static_cast<double>(remaining) * grid_step;
            const double obj = (current - w_hat).norm();
            if (obj < best_obj) {
                best_obj = obj;
                best = current;
            }
            return;
        }
        const long hi = std::min(per_unit, remaining);
        const long lo = std::max<long>(0, remaining - per_unit * (L - 1 - pos));
        for (long u = lo; u <= hi; ++u) {
            current(pos) = static_cast<double>(u) * grid_step;
            visit(pos + 1, remaining - u);
        }
    };
    visit(0, total_units);

    out.oracle = best;
    out.oracle_objective = best_obj;
    out.gap = out.greedy_objective - out.oracle_objective;
    return out;
}

namespace {

double rel_err(const Mat& approx, const Mat& exact) {
    return (approx - exact).norm() / std::max(exact.norm(), 1e-300);
}

// Truncation identity re-derived from scratch on this batch: Grams of the
// original value taps, truncated at the compressed rank.
double identity_residual_on_batch(const DecoderTaps& taps, int r, const ModelConfig& cfg) {
    double err = 0.0, tail = 0.0, scale = 0.0;
    for (int g = 0; g < cfg.n_kv_heads; ++g) {
        const Mat& y = taps.y_v[g];
        const EigenDecomposition eig = sym_eig(y.transpose() * y);
        err += reconstruction_error(y, truncate(eig, r));
        tail += tail_sum(eig, r);
        scale += y.squaredNorm();
    }
    return std::abs(err - tail) / std::max(1.0, scale);
}

} // namespace

ReconReport end_to_end_report(const Model& original, const CompressedModel& compressed,
                              const CalibrationBatch& eval_batch) {
    const ModelConfig& cfg = original.config;
    {
        const ModelConfig& c2 = compressed.config;
        if (cfg.d_hid != c2.d_hid || cfg.d_head != c2.d_head || cfg.n_q_heads != c2.n_q_heads ||
            cfg.n_kv_heads != c2.n_kv_heads || cfg.d_int != c2.d_int ||
            cfg.n_layers != c2.n_layers)
            throw data_error("original and compressed models disagree on topology");
    }
    eval_batch.validate(cfg);

    const ForwardTrace ref = forward_model(original, eval_batch.x);
    const ForwardTrace free_run = forward_model(compressed, eval_batch.x);

    ReconReport report;
    report.layers.reserve(static_cast<std::size_t>(cfg.n_layers));
    for (int l = 0; l < cfg.n_layers; ++l) {
        const Mat& x_l = ref.layer_inputs[l];
        const DecoderTaps teacher = forward_decoder(compressed.layers[l], x_l, cfg);

        LayerReport lr;
        lr.layer = l;
        lr.rank_attn = compressed.layers[l].retained_rank;
        lr.rank_mlp = compressed.layers[l].retained_mlp;
        lr.attn_err_teacher = rel_err(teacher.attn_out, ref.taps[l].attn_out);
        lr.mlp_err_teacher = rel_err(teacher.mlp_out, ref.taps[l].mlp_out);
        lr.decoder_err_teacher = rel_err(teacher.y, ref.taps[l].y);
        lr.attn_err_free = rel_err(free_run.taps[l].attn_out, ref.taps[l].attn_out);
        lr.mlp_err_free = rel_err(free_run.taps[l].mlp_out, ref.taps[l].mlp_out);
        lr.decoder_err_free = rel_err(free_run.taps[l].y, ref.taps[l].y);
        lr.truncation_residual = identity_residual_on_batch(ref.taps[l], lr.rank_attn, cfg);
        report.layers.push_back(lr);
    }
    report.output_err_free = rel_err(free_run.output, ref.output);
    return report;
}

std::string report_to_json(const ReconReport& report) {
    json j;
    j["schema"] = 1;
    j["output_err_free"] = report.output_err_free;
    json layers = json::array();
    for (const LayerReport& lr : report.layers) {
        json e;
        e["layer"] = lr.layer;
        e["rank_attn"] = lr.rank_attn;
        e["rank_mlp"] = lr.rank_mlp;
        e["attn_err_teacher"] = lr.attn_err_teacher;
        e["mlp_err_teacher"] = lr.mlp_err_teacher;
        e["decoder_err_teacher"] = lr.decoder_err_teacher;
        e["attn_err_free"] = lr.attn_err_free;
        e["mlp_err_free"] = lr.mlp_err_free;
        e["decoder_err_free"] = lr.decoder_err_free;
        e["truncation_residual"] = lr.truncation_residual;
        layers.push_back(std::move(e));
    }
    j["layers"] = std::move(layers);
    return j.dump(2);
}

ReconReport report_from_json(const std::string& text) {
    ReconReport report;
    try {
        const json j = json::parse(text);
        if (j.at("schema").get<int>() != 1) throw data_error("unsupported report schema");
        report.output_err_free = j.at("output_err_free").get<double>();
        for (const auto& e : j.at("layers")) {
            LayerReport lr;
            lr.layer = e.at("layer").get<int>();
            lr.rank_attn = e.at("rank_attn").get<int>();
            lr.rank_mlp = e.at("rank_mlp").get<int>();
            lr.attn_err_teacher = e.at("attn_err_teacher").get<double>();
            lr.mlp_err_teacher = e.at("mlp_err_teacher").get<double>();
            lr.decoder_err_teacher = e.at("decoder_err_teacher").get<double>();
            lr.attn_err_free = e.at("attn_err_free").get<double>();
            lr.mlp_err_free = e.at("mlp_err_free").get<double>();
            lr.decoder_err_free = e.at("decoder_err_free").get<double>();
            lr.truncation_residual = e.at("truncation_residual").get<double>();
            report.layers.push_back(lr);
        }
    } catch (const json::exception& ex) {
        throw data_error(std::string("report JSON is malformed: ") + ex.what());
    }
    return report;
}

} // namespace flat
