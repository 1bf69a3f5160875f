#pragma once

#include "flat/attn_compress.hpp"
#include "flat/calibration.hpp"
#include "flat/iprs.hpp"
#include "flat/mlp_compress.hpp"
#include "flat/model.hpp"
#include "flat/verify.hpp"

#include <optional>
#include <string>

namespace flat {

struct SyntheticCalibSpec {
    std::uint64_t seed = 0;
    int batches = 8;
    Index tokens = 256;
};

/// Knobs of the full calibrate -> score -> plan -> compress -> report run.
struct PipelineConfig {
    std::string model_dir;
    std::string calib_file;                        // exclusive with synthetic
    std::optional<SyntheticCalibSpec> synthetic;
    double sparsity = 0.0;
    RankMode mode = RankMode::Iprs;
    bool qk_compress = false;
    std::string output_dir;                        // empty: nothing written
    std::uint64_t seed = 0;
    bool export_f32 = false;                       // lossy checkpoint export
    int threads = 1;
    bool deterministic = true;                     // forces single-threaded reductions
    bool importance_on_compressed = false;         // re-score on the compressed model

    void validate() const;
};

// Whole-model compression for a fixed plan; layers are independent and run
// in parallel when threads > 1 (results land in per-layer slots, so any
// thread count reproduces the same bytes).
CompressedModel compress_model(const Model& model, const CalibrationCapture& capture,
                               const RankPlan& plan, bool qk_compress, int threads = 1);

// Fraction of parameters removed from the compressible blocks (value/output,
// query/key + bases when enabled, MLP up/down).
double realized_reduction(const Model& original, const CompressedModel& compressed,
                          bool qk_compress);

struct CompressResult {
    ImportanceScores scores;
    RankPlan plan;
    CompressedModel model;
    ReconReport report;
    double reduction = 0.0;
};

// Runs the pipeline. With output_dir set, writes the compressed checkpoint
// plus scores.json, plan.json and report.json into it. The report batch is
// held out: the last file batch (when more than one), or an extra synthetic
// batch otherwise.
CompressResult run_compress(const PipelineConfig& cfg);

// scores.json / plan.json round-trips (schema-versioned).
std::string scores_to_json(const ImportanceScores& scores, const ModelConfig& cfg);
ImportanceScores scores_from_json(const std::string& text, ModelConfig& cfg_out);
std::string plan_to_json(const RankPlan& plan, RankMode mode);
RankPlan plan_from_json(const std::string& text);

} // namespace flat
