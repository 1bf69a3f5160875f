#include "flat/iprs.hpp"

#include "flat/errors.hpp"

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

namespace flat {

namespace {

void check_scores(const Vec& t, double sparsity) {
    if (t.size() < 1) throw usage_error("importance scores are empty");
    if (!(sparsity >= 0.0 && sparsity < 1.0))
        throw usage_error("sparsity must lie in [0, 1), got " + std::to_string(sparsity));
    double sum = 0.0;
    for (Index l = 0; l < t.size(); ++l) {
        if (!(t(l) >= 0.0) || !std::isfinite(t(l)))
            throw usage_error("importance scores must be finite and >= 0");
        sum += t(l);
    }
    if (sum <= 0.0) throw usage_error("importance scores are all zero");
}

double sequential_sum(const Vec& t) {
    double s = 0.0;
    for (Index l = 0; l < t.size(); ++l) s += t(l);
    return s;
}

} // namespace

Vec naive_allocation(const Vec& t, double sparsity) {
    check_scores(t, sparsity);
    const double budget = static_cast<double>(t.size()) * (1.0 - sparsity);
    // same expression the greedy pass uses, so the no-clip case agrees bit
    // for bit
    const double scale = budget / sequential_sum(t);
    Vec w(t.size());
    for (Index l = 0; l < t.size(); ++l) w(l) = t(l) * scale;
    return w;
}

Vec iprs_allocate(const Vec& t, double sparsity) {
    check_scores(t, sparsity);
    const Index L = t.size();
    double budget = static_cast<double>(L) * (1.0 - sparsity);

    Vec w = Vec::Zero(L);
    std::vector<Index> active(static_cast<std::size_t>(L));
    for (Index l = 0; l < L; ++l) active[static_cast<std::size_t>(l)] = l;

    while (!active.empty()) {
        double active_sum = 0.0;
        for (Index l : active) active_sum += t(l);
        if (active_sum <= 0.0) {
            // Only zero scores left but budget remains (their positive peers
            // all clipped). Spread it uniformly; budget <= |active| here.
            const double share = budget / static_cast<double>(active.size());
            for (Index l : active) w(l) = share;
            break;
        }
        const double scale = budget / active_sum;

        std::vector<bool> clip(static_cast<std::size_t>(t.size()), false);
        bool any_clipped = false;
        for (Index l : active)
            if (t(l) * scale > 1.0) {
                clip[static_cast<std::size_t>(l)] = true;
                any_clipped = true;
            }

        if (!any_clipped) {
            for (Index l : active) w(l) = t(l) * scale;
            break;
        }
        for (Index l : active)
            if (clip[static_cast<std::size_t>(l)]) {
                w(l) = 1.0;
                budget -= 1.0;
            }
        std::erase_if(active, [&](Index l) { return clip[static_cast<std::size_t>(l)]; });
    }
    return w;
}

std::vector<int> ratios_to_ranks(const Vec& w, int dim) {
    if (dim < 1) throw usage_error("rank dimension must be >= 1");
    const Index L = w.size();
    std::vector<int> ranks(static_cast<std::size_t>(L));
    for (Index l = 0; l < L; ++l) {
        if (!(w(l) >= 0.0 && w(l) <= 1.0 + 1e-12))
            throw usage_error("remaining-rank ratio out of [0, 1]");
        const long raw = std::lround(w(l) * dim);
        ranks[static_cast<std::size_t>(l)] = static_cast<int>(std::clamp<long>(raw, 1, dim));
    }

    const long target = std::clamp<long>(std::lround(w.sum() * dim), L, static_cast<long>(L) * dim);
    auto total = [&] {
        long s = 0;
        for (int r : ranks) s += r;
        return s;
    };
    // Largest-residual repair, one unit at a time.
    while (total() != target) {
        const int dir = total() < target ? +1 : -1;
        Index best = -1;
        double best_res = -1.0;
        for (Index l = 0; l < L; ++l) {
            const int r = ranks[static_cast<std::size_t>(l)];
            if (dir > 0 && r >= dim) continue;
            if (dir < 0 && r <= 1) continue;
            const double res = dir * (w(l) * dim - r);
            if (res > best_res) {
                best_res = res;
                best = l;
            }
        }
        if (best < 0) break; // every layer pinned at a bound
        ranks[static_cast<std::size_t>(best)] += dir;
    }
    return ranks;
}

RankPlan make_rank_plan(const ImportanceScores& scores, double sparsity, RankMode mode,
                        const ModelConfig& cfg) {
    RankPlan plan;
    plan.sparsity = sparsity;
    const Index L = scores.t.size();
    if (L != cfg.n_layers) throw usage_error("importance scores do not match n_layers");
    plan.budget = static_cast<double>(L) * (1.0 - sparsity);
    if (mode == RankMode::Uniform) {
        if (!(sparsity >= 0.0 && sparsity < 1.0))
            throw usage_error("sparsity must lie in [0, 1)");
        plan.w = Vec::Constant(L, 1.0 - sparsity);
    } else {
        plan.w = iprs_allocate(scores.t, sparsity);
    }
    plan.ranks_attn = ratios_to_ranks(plan.w, cfg.d_head);
    plan.ranks_mlp = ratios_to_ranks(plan.w, cfg.d_int);
    return plan;
}

} // namespace flat
