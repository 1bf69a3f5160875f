#include "flat/pipeline.hpp"

#include "flat/checkpoint.hpp"
#include "flat/errors.hpp"

#include <nlohmann/json.hpp>

#include <atomic>
#include <filesystem>
#include <fstream>
#include <future>
#include <string>
#include <vector>

namespace flat {

namespace fs = std::filesystem;
using json = nlohmann::json;

void PipelineConfig::validate() const {
    if (model_dir.empty()) throw usage_error("no model directory given");
    if (!(sparsity >= 0.0 && sparsity < 1.0))
        throw usage_error("sparsity must lie in [0, 1), got " + std::to_string(sparsity));
    if (calib_file.empty() == !synthetic.has_value())
        throw usage_error("exactly one of a calibration file or synthetic calibration is required");
    if (!output_dir.empty() &&
        fs::weakly_canonical(output_dir) == fs::weakly_canonical(model_dir))
        throw usage_error("output directory must differ from the model directory");
    if (threads < 1) throw usage_error("thread count must be >= 1");
}

CompressedModel compress_model(const Model& model, const CalibrationCapture& capture,
                               const RankPlan& plan, bool qk_compress, int threads) {
    const ModelConfig& cfg = model.config;
    if (static_cast<int>(plan.ranks_attn.size()) != cfg.n_layers ||
        static_cast<int>(plan.ranks_mlp.size()) != cfg.n_layers)
        throw usage_error("rank plan does not cover every layer");

    CompressedModel out;
    out.config = cfg;
    out.layers.resize(static_cast<std::size_t>(cfg.n_layers));

    auto compress_layer = [&](int l) {
        HeadCompressionPlan hp;
        hp.layer = l;
        hp.r = plan.ranks_attn[static_cast<std::size_t>(l)];
        hp.qk_enabled = qk_compress;
        CompressedDecoderWeights cw = compress_attention_layer(model.layers[l], capture, hp, cfg);
        MlpCompression mlp = compress_mlp(model.layers[l], capture.c_sigma[l],
                                          plan.ranks_mlp[static_cast<std::size_t>(l)], cfg);
        cw.retained_mlp = mlp.selection.k();
        cw.w_up = std::move(mlp.w_up);
        cw.w_down = std::move(mlp.w_down);
        cw.mlp_indices = std::move(mlp.selection.indices);
        out.layers[static_cast<std::size_t>(l)] = std::move(cw);
    };

    if (threads <= 1) {
        for (int l = 0; l < cfg.n_layers; ++l) compress_layer(l);
    } else {
        std::vector<std::future<void>> jobs;
        std::atomic<int> next{0};
        const int workers = std::min(threads, cfg.n_layers);
        for (int t = 0; t < workers; ++t)
            jobs.push_back(std::async(std::launch::async, [&] {
                for (int l = next.fetch_add(1); l < cfg.n_layers; l = next.fetch_add(1))
                    compress_layer(l);
            }));
        for (auto& j : jobs) j.get();
    }
    out.validate();
    return out;
}

namespace {

double vo_params(const ModelConfig& cfg, int width) {
    return static_cast<double>(cfg.n_kv_heads) * width * cfg.d_hid +
           static_cast<double>(cfg.d_hid) * cfg.n_q_heads * width;
}

double qk_params(const ModelConfig& cfg, int width, bool with_bases) {
    double p = static_cast<double>(cfg.n_q_heads + cfg.n_kv_heads) * width * cfg.d_hid;
    if (with_bases)
        p += static_cast<double>(cfg.n_q_heads + cfg.n_kv_heads) * cfg.d_head * width;
    return p;
}

double mlp_params(const ModelConfig& cfg, int width) {
    return 2.0 * static_cast<double>(width) * cfg.d_hid;
}

} // namespace

double realized_reduction(const Model& original, const CompressedModel& compressed,
                          bool qk_compress) {
    const ModelConfig& cfg = original.config;
    double orig = 0.0, comp = 0.0;
    for (int l = 0; l < cfg.n_layers; ++l) {
        const CompressedDecoderWeights& cw = compressed.layers[static_cast<std::size_t>(l)];
        orig += vo_params(cfg, cfg.d_head) + mlp_params(cfg, cfg.d_int);
        comp += vo_params(cfg, cw.retained_rank) + mlp_params(cfg, cw.retained_mlp);
        if (qk_compress) {
            orig += qk_params(cfg, cfg.d_head, false);
            comp += qk_params(cfg, cw.retained_rank, true);
        }
    }
    return 1.0 - comp / orig;
}

namespace {

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw io_error("cannot open " + path.string() + " for writing");
    out << text;
    if (!text.empty() && text.back() != '\n') out << "\n";
    if (!out) throw io_error("short write to " + path.string());
}

} // namespace

CompressResult run_compress(const PipelineConfig& cfg) {
    cfg.validate();
    const int threads = cfg.deterministic ? 1 : cfg.threads;

    const Model model = load_checkpoint(cfg.model_dir);

    std::vector<CalibrationBatch> batches;
    CalibrationBatch eval_batch;
    if (cfg.synthetic) {
        batches = synthetic_batches(model.config, cfg.synthetic->batches, cfg.synthetic->tokens,
                                    cfg.synthetic->seed);
        // one extra batch index past the calibration set
        eval_batch = synthetic_batches(model.config, cfg.synthetic->batches + 1,
                                       cfg.synthetic->tokens, cfg.synthetic->seed)
                         .back();
    } else {
        batches = load_calibration_file(cfg.calib_file);
        for (const auto& b : batches) b.validate(model.config);
        eval_batch = batches.back();
        if (batches.size() > 1) batches.pop_back();
    }

    CalibrationOptions copts;
    copts.threads = threads;
    const CalibrationCapture capture = run_calibration(model, batches, copts);

    CompressResult result;
    result.scores = importance_scores(capture);
    result.plan = make_rank_plan(result.scores, cfg.sparsity, cfg.mode, model.config);
    result.model = compress_model(model, capture, result.plan, cfg.qk_compress, threads);

    if (cfg.importance_on_compressed) {
        // second pass: score the compressed model's hidden-state drift, then
        // re-plan and re-compress the original weights
        const CalibrationCapture second = run_calibration(result.model, batches, copts);
        result.scores = importance_scores(second);
        result.plan = make_rank_plan(result.scores, cfg.sparsity, cfg.mode, model.config);
        result.model = compress_model(model, capture, result.plan, cfg.qk_compress, threads);
    }

    result.report = end_to_end_report(model, result.model, eval_batch);
    result.reduction = realized_reduction(model, result.model, cfg.qk_compress);

    if (!cfg.output_dir.empty()) {
        const fs::path out_dir(cfg.output_dir);
        save_checkpoint(result.model, out_dir, cfg.export_f32);
        write_text(out_dir / "scores.json", scores_to_json(result.scores, model.config));
        write_text(out_dir / "plan.json", plan_to_json(result.plan, cfg.mode));
        write_text(out_dir / "report.json", report_to_json(result.report));
    }
    return result;
}

std::string scores_to_json(const ImportanceScores& scores, const ModelConfig& cfg) {
    json j;
    j["schema"] = 1;
    j["n_layers"] = cfg.n_layers;
    j["d_head"] = cfg.d_head;
    j["d_int"] = cfg.d_int;
    j["t"] = std::vector<double>(scores.t.data(), scores.t.data() + scores.t.size());
    j["cosine"] = std::vector<double>(scores.c.data(), scores.c.data() + scores.c.size());
    return j.dump(2);
}

ImportanceScores scores_from_json(const std::string& text, ModelConfig& cfg_out) {
    ImportanceScores scores;
    try {
        const json j = json::parse(text);
        if (j.at("schema").get<int>() != 1) throw data_error("unsupported scores schema");
        cfg_out.n_layers = j.at("n_layers").get<int>();
        cfg_out.d_head = j.at("d_head").get<int>();
        cfg_out.d_int = j.at("d_int").get<int>();
        const auto t = j.at("t").get<std::vector<double>>();
        const auto c = j.at("cosine").get<std::vector<double>>();
        if (t.size() != c.size() || static_cast<int>(t.size()) != cfg_out.n_layers)
            throw data_error("scores file is internally inconsistent");
        scores.t = Eigen::Map<const Vec>(t.data(), static_cast<Index>(t.size()));
        scores.c = Eigen::Map<const Vec>(c.data(), static_cast<Index>(c.size()));
    } catch (const json::exception& e) {
        throw data_error(std::string("scores JSON is malformed: ") + e.what());
    }
    return scores;
}

std::string plan_to_json(const RankPlan& plan, RankMode mode) {
    json j;
    j["schema"] = 1;
    j["s"] = plan.sparsity;
    j["B"] = plan.budget;
    j["mode"] = mode == RankMode::Iprs ? "iprs" : "uniform";
    j["w"] = std::vector<double>(plan.w.data(), plan.w.data() + plan.w.size());
    j["ranks_attn"] = plan.ranks_attn;
    j["ranks_mlp"] = plan.ranks_mlp;
    return j.dump(2);
}

RankPlan plan_from_json(const std::string& text) {
    RankPlan plan;
    try {
        const json j = json::parse(text);
        if (j.at("schema").get<int>() != 1) throw data_error("unsupported plan schema");
        plan.sparsity = j.at("s").get<double>();
        plan.budget = j.at("B").get<double>();
        const auto w = j.at("w").get<std::vector<double>>();
        plan.w = Eigen::Map<const Vec>(w.data(), static_cast<Index>(w.size()));
        plan.ranks_attn = j.at("ranks_attn").get<std::vector<int>>();
        plan.ranks_mlp = j.at("ranks_mlp").get<std::vector<int>>();
    } catch (const json::exception& e) {
        throw data_error(std::string("plan JSON is malformed: ") + e.what());
    }
    return plan;
}

} // namespace flat
