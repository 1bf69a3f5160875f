#include "flat/checkpoint.hpp"
#include "flat/errors.hpp"
#include "flat/pipeline.hpp"
#include "flat/verify.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

namespace {

using json = nlohmann::json;

constexpr int kExitUsage = 2;
constexpr int kExitData = 3;
constexpr int kExitNumeric = 4;

std::uint64_t env_seed_or(std::uint64_t fallback) {
    const char* env = std::getenv("FLAT_SEED");
    if (!env) return fallback;
    try {
        return std::stoull(env);
    } catch (const std::exception&) {
        throw flat::usage_error("FLAT_SEED is not an unsigned integer");
    }
}

// "seed=S,batches=M,tokens=N", every field optional
flat::SyntheticCalibSpec parse_synthetic(const std::string& spec, std::uint64_t default_seed) {
    flat::SyntheticCalibSpec out;
    out.seed = default_seed;
    std::stringstream ss(spec);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item.empty()) continue;
        const auto eq = item.find('=');
        if (eq == std::string::npos)
            throw flat::usage_error("bad synthetic calibration field '" + item + "'");
        const std::string key = item.substr(0, eq);
        const std::string val = item.substr(eq + 1);
        try {
            if (key == "seed")
                out.seed = std::stoull(val);
            else if (key == "batches")
                out.batches = std::stoi(val);
            else if (key == "tokens")
                out.tokens = std::stol(val);
            else
                throw flat::usage_error("unknown synthetic calibration key '" + key + "'");
        } catch (const flat::usage_error&) {
            throw;
        } catch (const std::exception&) {
            throw flat::usage_error("bad value for synthetic calibration key '" + key + "'");
        }
    }
    if (out.batches < 1 || out.tokens < 1)
        throw flat::usage_error("synthetic calibration needs batches >= 1 and tokens >= 1");
    return out;
}

void write_file(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw flat::io_error("cannot open " + path + " for writing");
    out << text << "\n";
    if (!out) throw flat::io_error("short write to " + path);
}

std::string read_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw flat::io_error("cannot open " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::vector<flat::CalibrationBatch> resolve_batches(const flat::Model& model,
                                                    const std::string& calib_file,
                                                    const std::optional<flat::SyntheticCalibSpec>& synth) {
    if (calib_file.empty() == !synth.has_value())
        throw flat::usage_error("pass exactly one of --calib or --calib-synthetic");
    if (synth)
        return flat::synthetic_batches(model.config, synth->batches, synth->tokens, synth->seed);
    auto batches = flat::load_calibration_file(calib_file);
    for (const auto& b : batches) b.validate(model.config);
    return batches;
}

int run_verify_theorems(std::uint64_t seed, json& out) {
    double worst_single = 0.0, worst_multi = 0.0;
    flat::Rng pick(flat::derive_seed(seed, 1));
    for (int trial = 0; trial < 100; ++trial) {
        const auto d = static_cast<flat::Index>(2 + pick() % 15);  // <= 16
        const auto n = static_cast<flat::Index>(1 + pick() % 64);  // <= 64
        const int r = static_cast<int>(1 + pick() % static_cast<std::uint64_t>(d));
        worst_single =
            std::max(worst_single, flat::check_truncation_identity(flat::derive_seed(seed, 100 + trial),
                                                            n, d, r));
        const int heads = static_cast<int>(1 + pick() % 8);
        worst_multi = std::max(
            worst_multi, flat::check_multihead_identity(flat::derive_seed(seed, 300 + trial),
                                                       heads, n, d, r));
    }
    out["suite"] = "theorems";
    out["trials"] = 100;
    out["max_single_head_residual"] = worst_single;
    out["max_multi_head_residual"] = worst_multi;
    std::cout << "single-head truncation identity: max residual " << worst_single << "\n";
    std::cout << "multi-head truncation identity: max residual " << worst_multi << "\n";
    if (worst_single > 1e-8 || worst_multi > 1e-8) {
        std::cerr << "truncation identities violated the 1e-8 tolerance\n";
        return kExitNumeric;
    }
    return 0;
}

int run_verify_alloc(std::uint64_t seed, json& out) {
    json cases = json::array();
    bool ok = true;

    auto run_case = [&](const flat::Vec& t, double s) {
        const auto cmp = flat::compare_allocations(t, s, 0.01);
        json c;
        c["t"] = std::vector<double>(t.data(), t.data() + t.size());
        c["s"] = s;
        c["greedy_objective"] = cmp.greedy_objective;
        c["oracle_objective"] = cmp.oracle_objective;
        c["gap"] = cmp.gap;
        cases.push_back(std::move(c));
        const double sum = cmp.greedy.sum();
        const double budget = static_cast<double>(t.size()) * (1.0 - s);
        if (std::abs(sum - budget) > 1e-9 || cmp.greedy.minCoeff() < 0.0 ||
            cmp.greedy.maxCoeff() > 1.0 + 1e-12)
            ok = false;
        std::cout << "alloc L=" << t.size() << " s=" << s << ": greedy " << cmp.greedy_objective
                  << ", grid oracle " << cmp.oracle_objective << ", gap " << cmp.gap << "\n";
    };

    flat::Vec worked(3);
    worked << 0.6, 0.3, 0.1;
    run_case(worked, 1.0 / 3.0);

    flat::Rng rng(flat::derive_seed(seed, 7));
    std::uniform_real_distribution<double> score(0.01, 1.0);
    std::uniform_real_distribution<double> sp(0.05, 0.7);
    for (int i = 0; i < 4; ++i) {
        flat::Vec t(3 + static_cast<int>(rng() % 2));
        for (flat::Index l = 0; l < t.size(); ++l) t(l) = score(rng);
        run_case(t, sp(rng));
    }

    out["suite"] = "alloc";
    out["cases"] = std::move(cases);
    if (!ok) {
        std::cerr << "greedy allocation violated feasibility\n";
        return kExitNumeric;
    }
    return 0;
}

int run_verify_e2e(std::uint64_t seed, json& out) {
    flat::ModelConfig cfg;
    cfg.d_head = 8;
    cfg.n_q_heads = 4;
    cfg.n_kv_heads = 2;
    cfg.d_hid = 32;
    cfg.d_int = 64;
    cfg.n_layers = 3;
    const flat::Model model = flat::random_model(cfg, seed);
    const auto batches = flat::synthetic_batches(cfg, 4, 128, flat::derive_seed(seed, 2));
    const auto eval = flat::synthetic_batches(cfg, 5, 128, flat::derive_seed(seed, 2)).back();
    const auto capture = flat::run_calibration(model, batches);
    const auto scores = flat::importance_scores(capture);

    json runs = json::array();
    double lossless_err = 0.0;
    for (const double s : {0.0, 0.2, 0.4}) {
        const auto plan = flat::make_rank_plan(scores, s, flat::RankMode::Iprs, cfg);
        const auto compressed = flat::compress_model(model, capture, plan, false);
        const auto report = flat::end_to_end_report(model, compressed, eval);
        json r;
        r["s"] = s;
        r["report"] = json::parse(flat::report_to_json(report));
        runs.push_back(std::move(r));
        if (s == 0.0) lossless_err = report.output_err_free;
        std::cout << "e2e s=" << s << ": free-running output error " << report.output_err_free
                  << "\n";
    }
    out["suite"] = "e2e";
    out["runs"] = std::move(runs);
    if (lossless_err > 1e-10) {
        std::cerr << "lossless compression drifted beyond 1e-10\n";
        return kExitNumeric;
    }
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"structural compression toolkit for toy decoder-only transformers"};
    app.require_subcommand(1);

    // random-model
    auto* cmd_random = app.add_subcommand("random-model", "generate a seeded toy checkpoint");
    std::string rm_out;
    int rm_layers = 2, rm_d_head = 8, rm_q_heads = 4, rm_kv_heads = 4, rm_d_int = 64;
    double rm_eps = 1e-6;
    std::uint64_t rm_seed = 0;
    bool rm_seed_given = false;
    cmd_random->add_option("--out", rm_out, "output checkpoint directory")->required();
    cmd_random->add_option("--layers", rm_layers, "decoder count");
    cmd_random->add_option("--d-head", rm_d_head, "per-head dimension");
    cmd_random->add_option("--q-heads", rm_q_heads, "query head count");
    cmd_random->add_option("--kv-heads", rm_kv_heads, "key/value head count");
    cmd_random->add_option("--d-int", rm_d_int, "MLP intermediate dimension");
    cmd_random->add_option("--eps", rm_eps, "RMSNorm epsilon");
    cmd_random->add_option("--seed", rm_seed, "RNG seed (FLAT_SEED as fallback)")
        ->each([&](const std::string&) { rm_seed_given = true; });

    // importance
    auto* cmd_importance = app.add_subcommand("importance", "calibrate and write importance scores");
    std::string imp_model, imp_calib, imp_synth, imp_out;
    std::uint64_t imp_seed = 0;
    bool imp_seed_given = false;
    int imp_threads = 1;
    bool imp_deterministic = false;
    cmd_importance->add_option("--model", imp_model, "model checkpoint directory")->required();
    cmd_importance->add_option("--calib", imp_calib, "calibration container file");
    cmd_importance->add_option("--calib-synthetic", imp_synth,
                               "synthetic calibration spec seed=S,batches=M,tokens=N");
    cmd_importance->add_option("--out", imp_out, "scores.json path")->required();
    cmd_importance->add_option("--seed", imp_seed, "seed for synthetic calibration")
        ->each([&](const std::string&) { imp_seed_given = true; });
    cmd_importance->add_option("--threads", imp_threads, "worker threads");
    cmd_importance->add_flag("--deterministic", imp_deterministic,
                             "force single-threaded reductions");

    // plan
    auto* cmd_plan = app.add_subcommand("plan", "turn scores into a rank plan");
    std::string plan_scores, plan_out, plan_mode = "iprs";
    double plan_sparsity = 0.0;
    cmd_plan->add_option("--scores", plan_scores, "scores.json path")->required();
    cmd_plan->add_option("--sparsity", plan_sparsity, "target sparsity in [0,1)")->required();
    cmd_plan->add_option("--mode", plan_mode, "iprs | uniform")
        ->check(CLI::IsMember({"iprs", "uniform"}));
    cmd_plan->add_option("--out", plan_out, "plan.json path")->required();

    // compress
    auto* cmd_compress = app.add_subcommand("compress", "run the full compression pipeline");
    flat::PipelineConfig pc;
    std::string comp_synth, comp_mode = "iprs";
    std::uint64_t comp_seed = 0;
    bool comp_seed_given = false;
    cmd_compress->add_option("--model", pc.model_dir, "model checkpoint directory")->required();
    cmd_compress->add_option("--calib", pc.calib_file, "calibration container file");
    cmd_compress->add_option("--calib-synthetic", comp_synth,
                             "synthetic calibration spec seed=S,batches=M,tokens=N");
    cmd_compress->add_option("--sparsity", pc.sparsity, "target sparsity in [0,1)")->required();
    cmd_compress->add_option("--mode", comp_mode, "iprs | uniform")
        ->check(CLI::IsMember({"iprs", "uniform"}));
    cmd_compress->add_flag("--qk", pc.qk_compress, "also compress query/key projections");
    cmd_compress->add_option("--out", pc.output_dir, "output checkpoint directory")->required();
    cmd_compress->add_option("--seed", comp_seed, "seed (FLAT_SEED as fallback)")
        ->each([&](const std::string&) { comp_seed_given = true; });
    cmd_compress->add_flag("--f32", pc.export_f32, "export tensors as f32 (lossy)");
    cmd_compress->add_option("--threads", pc.threads, "worker threads");
    bool comp_deterministic = false;
    cmd_compress->add_flag("--deterministic", comp_deterministic,
                           "force single-threaded reductions");
    cmd_compress->add_flag("--importance-on-compressed", pc.importance_on_compressed,
                           "re-score importance on the compressed model and re-plan");

    // verify
    auto* cmd_verify = app.add_subcommand("verify", "run numerical verification suites");
    std::string ver_suite, ver_json;
    std::uint64_t ver_seed = 0;
    bool ver_seed_given = false;
    cmd_verify->add_option("--suite", ver_suite, "theorems | alloc | e2e")
        ->required()
        ->check(CLI::IsMember({"theorems", "alloc", "e2e"}));
    cmd_verify->add_option("--seed", ver_seed, "master seed (FLAT_SEED as fallback)")
        ->each([&](const std::string&) { ver_seed_given = true; });
    cmd_verify->add_option("--json", ver_json, "write suite results to this JSON file");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitUsage;
    }

    try {
        if (app.got_subcommand(cmd_random)) {
            flat::ModelConfig cfg;
            cfg.n_layers = rm_layers;
            cfg.d_head = rm_d_head;
            cfg.n_q_heads = rm_q_heads;
            cfg.n_kv_heads = rm_kv_heads;
            cfg.d_int = rm_d_int;
            cfg.d_hid = rm_q_heads * rm_d_head;
            cfg.norm_eps = rm_eps;
            const std::uint64_t seed = rm_seed_given ? rm_seed : env_seed_or(0);
            flat::save_checkpoint(flat::random_model(cfg, seed), rm_out);
            std::cout << "wrote " << rm_out << " (layers=" << cfg.n_layers
                      << ", d_hid=" << cfg.d_hid << ", seed=" << seed << ")\n";
        } else if (app.got_subcommand(cmd_importance)) {
            const std::uint64_t seed = imp_seed_given ? imp_seed : env_seed_or(0);
            const flat::Model model = flat::load_checkpoint(imp_model);
            std::optional<flat::SyntheticCalibSpec> synth;
            if (!imp_synth.empty()) synth = parse_synthetic(imp_synth, seed);
            const auto batches = resolve_batches(model, imp_calib, synth);
            flat::CalibrationOptions copts;
            copts.threads = imp_deterministic ? 1 : imp_threads;
            const auto capture = flat::run_calibration(model, batches, copts);
            const auto scores = flat::importance_scores(capture);
            write_file(imp_out, flat::scores_to_json(scores, model.config));
            std::cout << "importance scores: min " << scores.t.minCoeff() << ", max "
                      << scores.t.maxCoeff() << " (pretrained LLMs typically sit in ~0.06-0.30)\n";
        } else if (app.got_subcommand(cmd_plan)) {
            flat::ModelConfig dims;
            const auto scores = flat::scores_from_json(read_file(plan_scores), dims);
            const auto mode = plan_mode == "uniform" ? flat::RankMode::Uniform : flat::RankMode::Iprs;
            flat::RankPlan plan;
            plan.sparsity = plan_sparsity;
            plan.budget = static_cast<double>(scores.t.size()) * (1.0 - plan_sparsity);
            if (mode == flat::RankMode::Uniform) {
                if (!(plan_sparsity >= 0.0 && plan_sparsity < 1.0))
                    throw flat::usage_error("sparsity must lie in [0, 1)");
                plan.w = flat::Vec::Constant(scores.t.size(), 1.0 - plan_sparsity);
            } else {
                plan.w = flat::iprs_allocate(scores.t, plan_sparsity);
            }
            plan.ranks_attn = flat::ratios_to_ranks(plan.w, dims.d_head);
            plan.ranks_mlp = flat::ratios_to_ranks(plan.w, dims.d_int);
            write_file(plan_out, flat::plan_to_json(plan, mode));
            std::cout << "wrote " << plan_out << "\n";
        } else if (app.got_subcommand(cmd_compress)) {
            const std::uint64_t seed = comp_seed_given ? comp_seed : env_seed_or(0);
            pc.seed = seed;
            if (!comp_synth.empty()) pc.synthetic = parse_synthetic(comp_synth, seed);
            pc.mode = comp_mode == "uniform" ? flat::RankMode::Uniform : flat::RankMode::Iprs;
            pc.deterministic = comp_deterministic || pc.threads <= 1;
            const auto result = flat::run_compress(pc);
            std::cout << "compressed model written to " << pc.output_dir << "\n";
            std::cout << "realized parameter reduction: " << result.reduction << " (target "
                      << pc.sparsity << ")\n";
            std::cout << "free-running output error: " << result.report.output_err_free << "\n";
        } else if (app.got_subcommand(cmd_verify)) {
            const std::uint64_t seed = ver_seed_given ? ver_seed : env_seed_or(0);
            json out;
            out["schema"] = 1;
            out["seed"] = seed;
            int rc = 0;
            if (ver_suite == "theorems")
                rc = run_verify_theorems(seed, out);
            else if (ver_suite == "alloc")
                rc = run_verify_alloc(seed, out);
            else
                rc = run_verify_e2e(seed, out);
            if (!ver_json.empty()) write_file(ver_json, out.dump(2));
            return rc;
        }
    } catch (const flat::usage_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const flat::numeric_error& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return kExitNumeric;
    } catch (const flat::data_error& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return kExitData;
    } catch (const flat::io_error& e) {
        std::cerr << "io error: " << e.what() << "\n";
        return kExitData;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
