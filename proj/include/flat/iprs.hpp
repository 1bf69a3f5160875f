#pragma once

#include "flat/calibration.hpp"
#include "flat/model.hpp"

namespace flat {

/// Per-decoder remaining-rank ratios and the integer ranks derived from
/// them. budget = L * (1 - s) and sum(w) == budget.
struct RankPlan {
    double sparsity = 0.0;
    double budget = 0.0;
    Vec w;                       // length L, each in [0, 1]
    std::vector<int> ranks_attn; // r_l = clamp(round(w_l * d_head), 1, d_head)
    std::vector<int> ranks_mlp;  // k_l = clamp(round(w_l * d_int), 1, d_int)
};

enum class RankMode { Iprs, Uniform };

// Proportional allocation w_hat_l = t_l / sum(t) * L(1-s). May exceed 1 when
// scores are lopsided; iprs_allocate exists to repair exactly that.
Vec naive_allocation(const Vec& t, double sparsity);

// Greedy redistribution: rescale the active set to the remaining budget,
// clip entries above 1 to exactly 1, deduct them from the budget, repeat.
// Unclipped entries stay proportional to their scores.
Vec iprs_allocate(const Vec& t, double sparsity);

// Rounds ratios to integer ranks with budget repair: while the rank sum
// misses round(budget * dim), the layer with the largest rounding residual
// moves by one step within [1, dim].
std::vector<int> ratios_to_ranks(const Vec& w, int dim);

RankPlan make_rank_plan(const ImportanceScores& scores, double sparsity, RankMode mode,
                        const ModelConfig& cfg);

} // namespace flat
