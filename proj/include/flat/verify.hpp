#pragma once

#include "flat/calibration.hpp"
#include "flat/iprs.hpp"
#include "flat/model.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace flat {

// Numerical checks of the truncation-error identities and desk-scale
// quality reports.

// |  ||Y - Y q q^T||_F^2 - sum_{i>r} lambda_i  | / max(1, ||Y||_F^2)
// for a random N x d matrix Y and its rank-r PCA truncation.
double check_truncation_identity(std::uint64_t seed, Index n, Index d, int r);

// Same identity summed over H independent heads of width d_head.
double check_multihead_identity(std::uint64_t seed, int heads, Index n, Index d_head, int r);

/// Greedy allocation vs an exhaustive grid search of the constrained
/// projection problem. gap = ||w_greedy - w_hat|| - ||w_oracle - w_hat||;
/// a negative gap can reach -grid_tolerance through discretization alone.
struct AllocationComparison {
    Vec greedy;
    Vec oracle;
    double greedy_objective = 0.0;
    double oracle_objective = 0.0;
    double gap = 0.0;
    double grid_tolerance = 0.0; // grid_step * L
};

AllocationComparison compare_allocations(const Vec& t, double sparsity, double grid_step);

/// Per-layer approximation quality of a compressed model against its
/// original. Teacher-forced errors feed each compressed layer the original
/// model's inputs; free-running errors let the drift propagate.
struct LayerReport {
    int layer = 0;
    int rank_attn = 0;
    int rank_mlp = 0;
    double attn_err_teacher = 0.0;    // attention block output, original inputs
    double mlp_err_teacher = 0.0;     // MLP block output, original inputs
    double decoder_err_teacher = 0.0; // decoder output, original inputs
    double attn_err_free = 0.0;       // same blocks under propagated drift
    double mlp_err_free = 0.0;
    double decoder_err_free = 0.0;
    double truncation_residual = 0.0; // truncation identity re-derived on the eval batch
};

struct ReconReport {
    std::vector<LayerReport> layers;
    double output_err_free = 0.0; // final hidden states, free-running
};

ReconReport end_to_end_report(const Model& original, const CompressedModel& compressed,
                              const CalibrationBatch& eval_batch);

std::string report_to_json(const ReconReport& report);
ReconReport report_from_json(const std::string& text);

} // namespace flat
