// Acceptance suite: one pass/fail line per criterion, nonzero exit on any
// failure. argv[1] names the CLI binary (used by the determinism criterion).

#include "flat/attn_compress.hpp"
#include "flat/calibration.hpp"
#include "flat/checkpoint.hpp"
#include "flat/forward.hpp"
#include "flat/iprs.hpp"
#include "flat/mlp_compress.hpp"
#include "flat/pca.hpp"
#include "flat/pipeline.hpp"
#include "flat/verify.hpp"

#include <Eigen/Cholesky>

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

using namespace flat;
namespace fs = std::filesystem;

namespace {

int g_failures = 0;

void report(int criterion, bool pass, const std::string& what) {
    std::cout << (pass ? "[PASS]" : "[FAIL]") << " criterion " << criterion << ": " << what
              << "\n";
    if (!pass) ++g_failures;
}

double elapsed_s(const std::chrono::steady_clock::time_point& start) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

ModelConfig toy_config(int layers, int d_head, int q_heads, int kv_heads, int d_int) {
    ModelConfig cfg;
    cfg.n_layers = layers;
    cfg.d_head = d_head;
    cfg.n_q_heads = q_heads;
    cfg.n_kv_heads = kv_heads;
    cfg.d_hid = d_head * q_heads;
    cfg.d_int = d_int;
    return cfg;
}

// ---- criterion 1 & 2: truncation identities --------------------------------

void criterion_single_head_identity() {
    const auto start = std::chrono::steady_clock::now();
    Rng pick(20250801);
    double worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
        const Index d = 2 + static_cast<Index>(pick() % 15);  // <= 16
        const Index n = 1 + static_cast<Index>(pick() % 64);  // <= 64
        const int r = 1 + static_cast<int>(pick() % static_cast<std::uint64_t>(d));
        worst = std::max(worst, check_truncation_identity(derive_seed(1, trial), n, d, r));
    }
    const double t = elapsed_s(start);
    std::ostringstream msg;
    msg << "truncation-error identity, 100 trials, max residual " << worst << " (" << t << " s)";
    report(1, worst <= 1e-8 && t < 5.0, msg.str());
}

void criterion_multihead_identity() {
    const auto start = std::chrono::steady_clock::now();
    Rng pick(20250802);
    double worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
        const int heads = 1 + static_cast<int>(pick() % 8);   // <= 8
        const Index d = 2 + static_cast<Index>(pick() % 15);
        const Index n = 1 + static_cast<Index>(pick() % 64);
        const int r = 1 + static_cast<int>(pick() % static_cast<std::uint64_t>(d));
        worst = std::max(worst, check_multihead_identity(derive_seed(2, trial), heads, n, d, r));
    }
    const double t = elapsed_s(start);
    std::ostringstream msg;
    msg << "multi-head identity, 100 trials, max residual " << worst << " (" << t << " s)";
    report(2, worst <= 1e-8 && t < 5.0, msg.str());
}

// ---- criterion 3: absorption is exact algebra ------------------------------

void criterion_absorption() {
    double worst = 0.0;
    for (const std::uint64_t seed : {301, 302, 303}) {
        const ModelConfig cfg = toy_config(2, 8, 4, 2, 24);
        const Model model = random_model(cfg, seed);
        const auto batches = synthetic_batches(cfg, 2, 24, derive_seed(seed, 5));
        const CalibrationCapture capture = run_calibration(model, batches);
        Rng rng(derive_seed(seed, 6));
        const Mat x = gaussian_matrix(16, cfg.d_hid, rng);

        for (int layer = 0; layer < cfg.n_layers; ++layer) {
            const DecoderTaps taps = forward_decoder(model.layers[layer], x, cfg);
            for (int r = 1; r <= cfg.d_head; ++r) {
                const ValueOutputCompression vo =
                    compress_value_output(model.layers[layer], capture.c_v[layer], r, cfg);
                HeadCompressionPlan plan{layer, r, false};
                const CompressedDecoderWeights cw =
                    compress_attention_layer(model.layers[layer], capture, plan, cfg);
                const Mat absorbed = forward_decoder(cw, x, cfg).attn_out;

                Mat projected = Mat::Zero(x.rows(), cfg.d_hid);
                for (int h = 0; h < cfg.n_q_heads; ++h) {
                    const int g = cfg.kv_head(h);
                    projected += taps.attn[h] * taps.y_v[g] * vo.bases[g] *
                                 vo.bases[g].transpose() *
                                 model.layers[layer]
                                     .w_o.middleCols(h * cfg.d_head, cfg.d_head)
                                     .transpose();
                }
                worst = std::max(worst, rel_fro_error(absorbed, projected));
            }
        }
    }
    std::ostringstream msg;
    msg << "absorption equals explicit projection, worst relative gap " << worst;
    report(3, worst <= 1e-12, msg.str());
}

// ---- criterion 4: lossless limit -------------------------------------------

void criterion_lossless() {
    const ModelConfig cfg = toy_config(3, 8, 4, 2, 40);
    const Model model = random_model(cfg, 401);
    const auto batches = synthetic_batches(cfg, 3, 32, 402);
    const CalibrationCapture capture = run_calibration(model, batches);
    const ImportanceScores scores = importance_scores(capture);
    const RankPlan plan = make_rank_plan(scores, 0.0, RankMode::Iprs, cfg);

    bool ranks_full = true;
    for (int l = 0; l < cfg.n_layers; ++l)
        ranks_full = ranks_full && plan.ranks_attn[l] == cfg.d_head &&
                     plan.ranks_mlp[l] == cfg.d_int;

    const CompressedModel compressed = compress_model(model, capture, plan, true);
    double worst = 0.0;
    for (const std::uint64_t s : {403, 404}) { // held-out batches
        Rng rng(s);
        const Mat x = gaussian_matrix(24, cfg.d_hid, rng);
        worst = std::max(worst, rel_fro_error(forward_model(compressed, x).output,
                                              forward_model(model, x).output));
    }
    std::ostringstream msg;
    msg << "s = 0 keeps held-out outputs within " << worst << " (ranks forced full: "
        << (ranks_full ? "yes" : "no") << ")";
    report(4, worst <= 1e-10 && ranks_full, msg.str());
}

// ---- criterion 5: IPRS feasibility and proportionality ----------------------

void criterion_iprs() {
    bool ok = true;
    std::string detail = "1000 random instances feasible, proportional, scale-invariant";
    Rng rng(501);
    std::uniform_real_distribution<double> score(0.0, 1.0);
    std::uniform_real_distribution<double> sp(0.0, 0.95);

    for (int trial = 0; trial < 1000 && ok; ++trial) {
        const Index L = 1 + static_cast<Index>(rng() % 16);
        Vec t(L);
        for (Index l = 0; l < L; ++l) t(l) = score(rng);
        if (t.sum() <= 0.0) t(0) = 0.5;
        const double s = sp(rng);
        const double budget = static_cast<double>(L) * (1.0 - s);
        const Vec w = iprs_allocate(t, s);

        ok = ok && std::abs(w.sum() - budget) <= 1e-9;
        ok = ok && w.minCoeff() >= 0.0 && w.maxCoeff() <= 1.0 + 1e-12;
        for (Index i = 0; i < L && ok; ++i)
            for (Index j = 0; j < L && ok; ++j) {
                if (t(i) >= t(j)) ok = w(i) >= w(j) - 1e-12;
                if (ok && w(i) < 1.0 - 1e-12 && w(j) < 1.0 - 1e-12 && t(j) > 1e-12 && w(j) > 0.0)
                    ok = std::abs(w(i) / w(j) - t(i) / t(j)) <= 1e-9 * std::max(1.0, t(i) / t(j));
            }
        if (ok) {
            const Vec w2 = iprs_allocate(Vec(2.5 * t), s);
            ok = (w - w2).lpNorm<Eigen::Infinity>() <= 1e-9;
        }
        if (ok) {
            const Vec naive = naive_allocation(t, s);
            if (naive.maxCoeff() <= 1.0) ok = (w - naive).lpNorm<Eigen::Infinity>() == 0.0;
        }
        if (!ok) detail = "violation at trial " + std::to_string(trial);
    }

    Vec worked(3);
    worked << 0.6, 0.3, 0.1;
    const Vec w = iprs_allocate(worked, 1.0 / 3.0);
    const bool worked_ok = std::abs(w(0) - 1.0) <= 1e-12 && std::abs(w(1) - 0.75) <= 1e-12 &&
                           std::abs(w(2) - 0.25) <= 1e-12;
    if (!worked_ok) detail = "worked instance mismatch";
    report(5, ok && worked_ok, detail + "; worked instance gives [1, 0.75, 0.25]");
}

// ---- criterion 6: greedy vs grid oracle -------------------------------------

void criterion_grid_oracle() {
    const auto start = std::chrono::steady_clock::now();
    bool feasible = true;
    double max_gap = -1e9, min_gap = 1e9;
    Rng rng(601);
    std::uniform_real_distribution<double> score(0.01, 1.0);
    std::uniform_real_distribution<double> sp(0.05, 0.8);

    std::vector<std::pair<Vec, double>> cases;
    Vec worked(3);
    worked << 0.6, 0.3, 0.1;
    cases.emplace_back(worked, 1.0 / 3.0);
    for (int i = 0; i < 6; ++i) {
        Vec t(2 + static_cast<Index>(rng() % 3)); // L <= 4
        for (Index l = 0; l < t.size(); ++l) t(l) = score(rng);
        cases.emplace_back(t, sp(rng));
    }

    for (const auto& [t, s] : cases) {
        const AllocationComparison cmp = compare_allocations(t, s, 0.01);
        const double budget = static_cast<double>(t.size()) * (1.0 - s);
        feasible = feasible && std::abs(cmp.greedy.sum() - budget) <= 1e-9 &&
                   cmp.greedy.minCoeff() >= 0.0 && cmp.greedy.maxCoeff() <= 1.0 + 1e-12 &&
                   cmp.gap >= -cmp.grid_tolerance;
        max_gap = std::max(max_gap, cmp.gap);
        min_gap = std::min(min_gap, cmp.gap);
    }
    const double t_s = elapsed_s(start);
    std::ostringstream msg;
    msg << cases.size() << " instances, measured gap in [" << min_gap << ", " << max_gap
        << "], greedy always feasible (" << t_s << " s)";
    report(6, feasible && t_s < 60.0, msg.str());
}

// ---- criterion 7: Nystrom exactness ------------------------------------------

void criterion_nystrom() {
    const ModelConfig cfg = toy_config(1, 4, 2, 1, 12);
    const Model model = random_model(cfg, 701);
    const DecoderWeights& w = model.layers[0];
    bool ok = true;
    std::ostringstream msg;

    {
        Rng rng(702);
        const Mat a = gaussian_matrix(8, cfg.d_int, rng); // rank-deficient Gram
        const Mat c = a.transpose() * a;
        const MlpCompression full = compress_mlp(w, c, cfg.d_int, cfg);
        const double err = rel_fro_error(full.w_down, w.w_down);
        ok = ok && err <= 1e-10;
        msg << "full selection error " << err;
    }
    {
        Vec diag(12);
        for (Index i = 0; i < 12; ++i) diag(i) = static_cast<double>(12 - i);
        const Mat c = diag.asDiagonal();
        const MlpCompression restricted = compress_mlp(w, c, 5, cfg);
        double err = 0.0;
        for (int i = 0; i < 5; ++i) {
            const int ch = restricted.selection.indices[i];
            err = std::max(err, rel_fro_error(Mat(restricted.w_down.col(i)),
                                              Mat(w.w_down.col(ch))));
        }
        ok = ok && err <= 1e-10;
        msg << ", diagonal restriction error " << err;
    }
    {
        Rng rng(703);
        const Mat a = gaussian_matrix(24, cfg.d_int, rng);
        const Mat c = a.transpose() * a;
        const Vec lev = ridge_leverage(c).scores;
        const Mat dense = (c + Mat(Mat::Identity(12, 12))).ldlt().solve(c);
        double err = 0.0;
        for (Index i = 0; i < 12; ++i) err = std::max(err, std::abs(lev(i) - dense(i, i)));
        ok = ok && err <= 1e-10;
        msg << ", leverage vs dense solve " << err;
    }
    report(7, ok, msg.str());
}

// ---- criterion 8: GQA consistency ---------------------------------------------

void criterion_gqa() {
    bool ok = true;
    std::ostringstream msg;

    {
        // H == G: the grouped path must equal a per-head reference bit-for-bit
        const ModelConfig cfg = toy_config(1, 6, 3, 3, 12);
        const Model model = random_model(cfg, 801);
        const auto batches = synthetic_batches(cfg, 2, 20, 802);
        const CalibrationCapture capture = run_calibration(model, batches);
        const int r = 3;
        const ValueOutputCompression vo =
            compress_value_output(model.layers[0], capture.c_v[0], r, cfg);
        bool bitwise = true;
        for (int h = 0; h < 3; ++h) {
            const TruncatedBasis basis = truncate(sym_eig(capture.c_v[0][h]), r);
            const Mat wv_ref =
                basis.q.transpose() * model.layers[0].w_v.middleRows(h * cfg.d_head, cfg.d_head);
            const Mat wo_ref =
                model.layers[0].w_o.middleCols(h * cfg.d_head, cfg.d_head) * basis.q;
            bitwise = bitwise && Mat(vo.w_v.middleRows(h * r, r)) == wv_ref &&
                      Mat(vo.w_o.middleCols(h * r, r)) == wo_ref;
        }
        ok = ok && bitwise;
        msg << "H=G bitwise equal: " << (bitwise ? "yes" : "no");
    }
    {
        // H = 2G vs the kv-head-duplicated MHA construction
        const ModelConfig cfg = toy_config(1, 8, 4, 2, 16);
        const Model model = random_model(cfg, 803);
        const auto batches = synthetic_batches(cfg, 2, 24, 804);
        const CalibrationCapture capture = run_calibration(model, batches);

        ModelConfig dup_cfg = cfg;
        dup_cfg.n_kv_heads = cfg.n_q_heads;
        Model twin;
        twin.config = dup_cfg;
        DecoderWeights dup = model.layers[0];
        dup.w_k.resize(dup_cfg.n_kv_heads * cfg.d_head, cfg.d_hid);
        dup.w_v.resize(dup_cfg.n_kv_heads * cfg.d_head, cfg.d_hid);
        for (int h = 0; h < cfg.n_q_heads; ++h) {
            const int g = cfg.kv_head(h);
            dup.w_k.middleRows(h * cfg.d_head, cfg.d_head) =
                model.layers[0].w_k.middleRows(g * cfg.d_head, cfg.d_head);
            dup.w_v.middleRows(h * cfg.d_head, cfg.d_head) =
                model.layers[0].w_v.middleRows(g * cfg.d_head, cfg.d_head);
        }
        twin.layers = {dup};
        const CalibrationCapture twin_capture = run_calibration(twin, batches);

        HeadCompressionPlan plan{0, 4, false};
        const CompressedDecoderWeights a =
            compress_attention_layer(model.layers[0], capture, plan, cfg);
        const CompressedDecoderWeights b =
            compress_attention_layer(dup, twin_capture, plan, dup_cfg);

        Rng rng(805);
        const Mat x = gaussian_matrix(12, cfg.d_hid, rng);
        const double err = rel_fro_error(forward_decoder(a, x, cfg).y,
                                         forward_decoder(b, x, dup_cfg).y);
        ok = ok && err <= 1e-10;
        msg << "; duplicated-head gap " << err;
    }
    report(8, ok, msg.str());
}

// ---- criterion 9: IPRS beats uniform on engineered models ----------------------

void criterion_quality_trend() {
    const ModelConfig cfg = toy_config(4, 8, 4, 2, 32);
    bool ok = true;
    std::ostringstream msg;
    msg << "mean free-running error over 6 seeds:";
    for (const double s : {0.3, 0.4}) {
        double iprs_sum = 0.0, uniform_sum = 0.0;
        for (std::uint64_t seed = 901; seed < 907; ++seed) {
            Model model = random_model(cfg, seed);
            for (const int l : {1, 2}) { // near-identity middle layers
                model.layers[l].w_o *= 0.02;
                model.layers[l].w_down *= 0.02;
            }
            const auto batches = synthetic_batches(cfg, 2, 48, derive_seed(seed, 9));
            const CalibrationCapture capture = run_calibration(model, batches);
            const ImportanceScores scores = importance_scores(capture);
            Rng rng(derive_seed(seed, 10));
            const CalibrationBatch eval{gaussian_matrix(48, cfg.d_hid, rng)};

            for (const RankMode mode : {RankMode::Iprs, RankMode::Uniform}) {
                const RankPlan plan = make_rank_plan(scores, s, mode, cfg);
                const CompressedModel compressed = compress_model(model, capture, plan, false);
                const double err = end_to_end_report(model, compressed, eval).output_err_free;
                (mode == RankMode::Iprs ? iprs_sum : uniform_sum) += err;
            }
        }
        msg << " s=" << s << " iprs " << iprs_sum / 6.0 << " vs uniform " << uniform_sum / 6.0;
        ok = ok && iprs_sum <= uniform_sum;
    }
    report(9, ok, msg.str());
}

// ---- criterion 10: CLI determinism ----------------------------------------------

std::string slurp_binary(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void criterion_determinism(const char* flat_bin) {
    if (!flat_bin) {
        report(10, false, "CLI binary path missing (pass it as argv[1])");
        return;
    }
    const fs::path work = fs::temp_directory_path() /
                          ("flat_accept_" + std::to_string(std::random_device{}()));
    fs::create_directories(work);
    const fs::path model_dir = work / "model";
    {
        const ModelConfig cfg = toy_config(2, 8, 4, 2, 24);
        save_checkpoint(random_model(cfg, 1001), model_dir);
    }
    auto run = [&](const std::string& out) {
        std::ostringstream cmd;
        cmd << "\"" << flat_bin << "\" compress --model " << model_dir.string()
            << " --calib-synthetic seed=3,batches=2,tokens=24 --sparsity 0.25 --qk"
            << " --deterministic --seed 3 --out " << (work / out).string() << " > /dev/null";
        return std::system(cmd.str().c_str());
    };
    const int rc1 = run("a");
    const int rc2 = run("b");

    bool identical = rc1 == 0 && rc2 == 0;
    std::size_t files = 0;
    if (identical) {
        for (const auto& entry : fs::directory_iterator(work / "a")) {
            const fs::path other = work / "b" / entry.path().filename();
            identical = identical && fs::exists(other) &&
                        slurp_binary(entry.path()) == slurp_binary(other);
            ++files;
        }
    }
    fs::remove_all(work);
    std::ostringstream msg;
    msg << "two CLI runs, " << files << " artifacts byte-identical: "
        << (identical ? "yes" : "no");
    report(10, identical && files > 0, msg.str());
}

} // namespace

int main(int argc, char** argv) {
    criterion_single_head_identity();
    criterion_multihead_identity();
    criterion_absorption();
    criterion_lossless();
    criterion_iprs();
    criterion_grid_oracle();
    criterion_nystrom();
    criterion_gqa();
    criterion_quality_trend();
    criterion_determinism(argc > 1 ? argv[1] : nullptr);

    if (g_failures > 0) {
        std::cout << g_failures << " criterion(s) failed\n";
        return 1;
    }
    std::cout << "all acceptance criteria passed\n";
    return 0;
}
