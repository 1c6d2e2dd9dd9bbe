#pragma once

#include <future>
#include <string>
#include <vector>

#include "vqt/attention.hpp"

namespace vqt {

// Multi-pathway temporal network: several sparse temporal attention blocks in
// parallel at geometrically increasing keyframe budgets, merged back to a
// full-length temporal axis.

struct PathwayPlan {
    size_t clip_len = 0;
    size_t max_exponent = 0;        // m
    std::vector<size_t> budgets;    // 2^a * ceil(log2 T) for a = 0..m

    size_t budget_sum() const {
        size_t s = 0;
        for (size_t b : budgets) s += b;
        return s;
    }
    size_t pathway_count() const { return budgets.size(); }
};

// Budgets are 2^a * ceil(log2 T) for a = 0..m with
// m = floor(log2(T / ceil(log2 T) + 1)) - 1, evaluated in exact integer
// arithmetic. Degenerate plans (a budget above T, or budgets summing past T)
// are clamped and deduplicated; a plan that still cannot fit is rejected.
inline PathwayPlan plan_pathways(size_t t) {
    if (t < 2) throw ContractError("plan_pathways: clip length must be >= 2");
    const size_t c = ceil_log2(t);
    // largest e with c * 2^e <= t + c, so that e = floor(log2(t/c + 1))
    size_t e = 0;
    while (c * (size_t(1) << (e + 1)) <= t + c) ++e;
    if (e == 0)
        throw ContractError("plan_pathways: no pathway fits clip length " + std::to_string(t) +
                            "; use a shorter pathway list");
    PathwayPlan plan;
    plan.clip_len = t;
    plan.max_exponent = e - 1;
    for (size_t a = 0; a <= plan.max_exponent; ++a) plan.budgets.push_back(c << a);

    bool degenerate = false;
    for (size_t& b : plan.budgets)
        if (b > t) {
            b = t;
            degenerate = true;
        }
    if (degenerate) {
        std::vector<size_t> dedup;
        for (size_t b : plan.budgets)
            if (dedup.empty() || dedup.back() != b) dedup.push_back(b);
        plan.budgets = std::move(dedup);
        plan.max_exponent = plan.budgets.size() - 1;
    }
    if (plan.budget_sum() > t)
        throw ContractError("plan_pathways: budgets for T=" + std::to_string(t) +
                            " sum to " + std::to_string(plan.budget_sum()) +
                            " > T; use a shorter pathway list");
    return plan;
}

enum class MptnMode {
    scatter,  // pathway outputs return to their source frame rows
    literal   // concatenate pathway outputs, then mean-pad to T rows
};

inline const char* to_string(MptnMode m) { return m == MptnMode::scatter ? "scatter" : "literal"; }

inline MptnMode mptn_mode_from_string(const std::string& s) {
    if (s == "scatter") return MptnMode::scatter;
    if (s == "literal") return MptnMode::literal;
    throw ConfigError("mptn: unknown mode '" + s + "' (expected scatter|literal)");
}

template <std::floating_point S>
struct MptnResult {
    Tensor<S> tokens;  // [T, N, d]
    std::vector<KeyframeSelection> selections;  // one per pathway
};

// Run one sparse attention pass per pathway and merge. Pathway rng streams
// derive from the incoming stream by pathway index, so results do not depend
// on execution order; with threads > 1 the pathways run concurrently.
template <std::floating_point S>
MptnResult<S> mptn_forward(const Tensor<S>& tokens,
                           const std::vector<AttentionParams<S>>& pathway_params,
                           const PathwayPlan& plan, Rng rng, MptnMode mode,
                           SelectionPolicy policy = SelectionPolicy::fill_fallback,
                           const std::vector<KeyframeSelection>* pinned = nullptr,
                           std::vector<SelectionRecord>* records = nullptr, size_t threads = 1) {
    if (pathway_params.size() != plan.pathway_count())
        throw ContractError("mptn_forward: " + std::to_string(pathway_params.size()) +
                            " parameter sets for " + std::to_string(plan.pathway_count()) +
                            " pathways");
    const size_t t = tokens.dim(0), n = tokens.dim(1), d = tokens.dim(2);
    const size_t pw = plan.pathway_count();

    std::vector<StaResult<S>> results(pw);
    std::vector<SelectionRecord> local_records(pw);
    auto run_pathway = [&](size_t a) {
        const KeyframeSelection* pin = pinned ? &(*pinned)[a] : nullptr;
        results[a] = sta_forward(tokens, pathway_params[a], plan.budgets[a], rng.derive(a), policy,
                                 pin, records ? &local_records[a] : nullptr);
    };
    if (threads > 1 && pw > 1) {
        std::vector<std::future<void>> futs;
        for (size_t a = 0; a < pw; ++a)
            futs.push_back(std::async(std::launch::async, run_pathway, a));
        for (auto& f : futs) f.get();
    } else {
        for (size_t a = 0; a < pw; ++a) run_pathway(a);
    }

    MptnResult<S> out;
    for (size_t a = 0; a < pw; ++a) {
        out.selections.push_back(results[a].selection);
        if (records) {
            local_records[a].pathway = a;
            records->push_back(std::move(local_records[a]));
        }
    }

    std::vector<Tensor<S>> produced;
    for (auto& r : results) produced.push_back(r.values);
    auto all_rows = concat<S>(produced, 0);  // [sum(budgets), N, d]
    auto mean_row = reshape(mean_axis(all_rows, 0), {size_t(1), n, d});

    if (mode == MptnMode::literal) {
        const size_t pad = t - std::min<size_t>(t, all_rows.dim(0));
        if (pad == 0 && all_rows.dim(0) == t) {
            out.tokens = all_rows;
        } else {
            auto pad_rows = gather_rows(mean_row, std::vector<size_t>(pad, 0));  // [pad, N, d]
            out.tokens = concat<S>({all_rows, pad_rows}, 0);
        }
        return out;
    }

    // scatter mode: a frame selected by k pathways averages those k outputs;
    // unselected frames take the global mean of all produced rows.
    std::vector<size_t> pathway_offset(pw, 0);
    for (size_t a = 1; a < pw; ++a)
        pathway_offset[a] = pathway_offset[a - 1] + results[a - 1].values.dim(0);
    std::vector<std::vector<size_t>> contributors(t);
    for (size_t a = 0; a < pw; ++a) {
        const auto& idx = results[a].selection.indices;
        for (size_t r = 0; r < idx.size(); ++r)
            contributors[idx[r]].push_back(pathway_offset[a] + r);
    }
    std::vector<Tensor<S>> frame_rows;
    frame_rows.reserve(t);
    for (size_t fr = 0; fr < t; ++fr) {
        const auto& rows = contributors[fr];
        if (rows.empty()) {
            frame_rows.push_back(mean_row);
        } else if (rows.size() == 1) {
            frame_rows.push_back(gather_rows(all_rows, rows));
        } else {
            frame_rows.push_back(
                reshape(mean_axis(gather_rows(all_rows, rows), 0), {size_t(1), n, d}));
        }
    }
    out.tokens = concat<S>(frame_rows, 0);
    return out;
}

}  // namespace vqt
