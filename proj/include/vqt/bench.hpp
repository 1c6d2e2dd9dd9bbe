#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "vqt/mptn.hpp"

namespace vqt {

// Cost accounting for the temporal stage.
//
// FLOP convention (fixed so ratios are convention-independent): one
// multiply-add counts as 2 FLOPs, and the headline number charges one
// multiply-add per (query frame, key frame, spatial location, channel),
// covering the score and value products of the attention core. Softmax and
// normalization are excluded; both variants share them proportionally.
//   dense:  2 * T^2 * N * d
//   sta:    2 * b * T * N * d      (single pathway, minimal budget b)
//   mptn:   sum_a 2 * b_a * T * N * d
//
// Wall-clock convention: the dense side times the attention core alone --
// scores, softmax and value mixing on head-split inputs -- which is the
// quadratic object under test; projections and head reshuffles are linear in
// T and identical in kind across variants, so they are hoisted out. The MPTN
// side times its complete temporal stage -- per-pathway projections (each
// pathway owns parameters, so they cannot be hoisted), selection, spatial
// shift, sparse attention and the merge -- from the block input. Tokenizer
// and MLP never enter either side.

enum class CostVariant { dense, sta, mptn };

inline const char* to_string(CostVariant v) {
    switch (v) {
        case CostVariant::dense: return "dense";
        case CostVariant::sta: return "sta";
        case CostVariant::mptn: return "mptn";
    }
    return "?";
}

struct CostReport {
    CostVariant variant = CostVariant::dense;
    size_t t = 0, n = 0, d = 0;
    unsigned long long flops = 0;
    double wall_nanos = 0;       // median over repetitions; 0 if not measured
    double ratio_vs_dense = 1.0; // analytic flops ratio
    bool noisy = false;          // timing spread above 20%, rerun advised
};

inline unsigned long long flops_temporal(CostVariant variant, size_t t, size_t n, size_t d,
                                         const PathwayPlan* plan = nullptr) {
    const unsigned long long base = 2ULL * t * n * d;
    switch (variant) {
        case CostVariant::dense:
            return base * t;
        case CostVariant::sta: {
            if (!plan) throw ContractError("flops_temporal: sta variant needs a pathway plan");
            return base * plan->budgets.front();
        }
        case CostVariant::mptn: {
            if (!plan) throw ContractError("flops_temporal: mptn variant needs a pathway plan");
            unsigned long long acc = 0;
            for (size_t b : plan->budgets) acc += base * b;
            return acc;
        }
    }
    throw ContractError("flops_temporal: unknown variant");
}

// Johnson-Lindenstrauss error bound sqrt(8 ln T / d): the distortion level
// at which d dimensions preserve T points.
inline double jl_error_bound(double t, double d) {
    if (t < 2.0) throw ContractError("jl_error_bound: need T >= 2");
    if (d < 1.0) throw ContractError("jl_error_bound: need d >= 1");
    return std::sqrt(8.0 * std::log(t) / d);
}

// ---------------------------------------------------------------------------
// Wall-clock scaling study on the tiny geometry (N = 16 locations, d = 32,
// 2 heads), sweeping the clip length.

struct ScalingResult {
    std::vector<CostReport> reports;  // two rows per T (dense, mptn)
    double dense_slope = 0, dense_stderr = 0;
    double mptn_slope = 0, mptn_stderr = 0;
};

namespace detail {

struct SlopeFit {
    double slope = 0, stderr_ = 0;
};

inline SlopeFit fit_loglog(const std::vector<double>& xs, const std::vector<double>& ys) {
    const size_t n = xs.size();
    std::vector<double> lx(n), ly(n);
    for (size_t i = 0; i < n; ++i) {
        lx[i] = std::log(xs[i]);
        ly[i] = std::log(ys[i]);
    }
    double mx = 0, my = 0;
    for (size_t i = 0; i < n; ++i) {
        mx += lx[i];
        my += ly[i];
    }
    mx /= double(n);
    my /= double(n);
    double sxy = 0, sxx = 0;
    for (size_t i = 0; i < n; ++i) {
        sxy += (lx[i] - mx) * (ly[i] - my);
        sxx += (lx[i] - mx) * (lx[i] - mx);
    }
    SlopeFit fit;
    fit.slope = sxy / sxx;
    if (n > 2) {
        double ss_res = 0;
        const double b0 = my - fit.slope * mx;
        for (size_t i = 0; i < n; ++i) {
            const double r = ly[i] - (b0 + fit.slope * lx[i]);
            ss_res += r * r;
        }
        fit.stderr_ = std::sqrt(ss_res / double(n - 2) / sxx);
    }
    return fit;
}

inline double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

inline bool spread_noisy(const std::vector<double>& v, double med) {
    double mn = v[0], mx = v[0];
    for (double x : v) {
        mn = std::min(mn, x);
        mx = std::max(mx, x);
    }
    return med > 0 && (mx - mn) / med > 0.20;
}

}  // namespace detail

template <std::floating_point S>
ScalingResult scaling_study(const std::vector<size_t>& clip_lens, size_t repetitions,
                            uint64_t seed) {
    if (clip_lens.size() < 3)
        throw ContractError("scaling_study: need at least 3 clip lengths for a slope fit, got " +
                            std::to_string(clip_lens.size()));
    if (repetitions == 0) throw ContractError("scaling_study: repetitions must be positive");
    constexpr size_t kN = 16, kD = 32, kHeads = 2;
    using clock = std::chrono::steady_clock;

    ScalingResult out;
    std::vector<double> dense_meds, mptn_meds, ts;
    for (size_t t : clip_lens) {
        Rng rng(Rng(seed).derive(t).next_u64());
        const PathwayPlan plan = plan_pathways(t);
        std::vector<S> tok(t * kN * kD);
        for (auto& x : tok) x = static_cast<S>(rng.normal());
        auto tokens = Tensor<S>::from({t, kN, kD}, std::move(tok));

        // forward-only parameters: no tape is recorded during timing
        auto dense_params = init_attention_params<S>(kD, kHeads, rng);
        std::vector<AttentionParams<S>> pathway_params;
        for (size_t a = 0; a < plan.pathway_count(); ++a)
            pathway_params.push_back(init_attention_params<S>(kD, kHeads, rng));
        auto drop_grad = [](AttentionParams<S>& p) {
            for (Tensor<S>* w : {&p.query_proj, &p.key_proj, &p.value_proj, &p.out_proj,
                                 &p.offset_weight, &p.offset_bias})
                w->node()->requires_grad = false;
        };
        drop_grad(dense_params);
        for (auto& p : pathway_params) drop_grad(p);

        // dense core input: projected and head-split q/k/v
        constexpr size_t kDh = kD / kHeads;
        auto flat = reshape(tokens, {t * kN, kD});
        auto head_split = [&](const Tensor<S>& w) {
            auto proj = reshape(matmul(flat, w), {t, kN, kHeads, kDh});
            return permute(proj, {1, 2, 0, 3});  // [N, heads, T, dh]
        };
        auto qh = head_split(dense_params.query_proj);
        auto kh_t = permute(head_split(dense_params.key_proj), {0, 1, 3, 2});
        auto vh = head_split(dense_params.value_proj);
        auto dense_core = [&] {
            auto attn = softmax(scale(matmul(qh, kh_t), 1.0 / std::sqrt(double(kDh))), 3);
            return matmul(attn, vh);
        };

        std::vector<double> dense_ns, mptn_ns;
        (void)dense_core();  // warm-up
        (void)mptn_forward(tokens, pathway_params, plan, rng.derive(7), MptnMode::scatter);
        for (size_t rep = 0; rep < repetitions; ++rep) {
            auto t0 = clock::now();
            auto dense_out = dense_core();
            auto t1 = clock::now();
            dense_ns.push_back(std::chrono::duration<double, std::nano>(t1 - t0).count());
            auto t2 = clock::now();
            auto mptn_out = mptn_forward(tokens, pathway_params, plan, rng.derive(8, rep),
                                         MptnMode::scatter);
            auto t3 = clock::now();
            mptn_ns.push_back(std::chrono::duration<double, std::nano>(t3 - t2).count());
            (void)dense_out;
            (void)mptn_out;
        }
        const double dmed = detail::median(dense_ns);
        const double mmed = detail::median(mptn_ns);
        const auto dense_flops = flops_temporal(CostVariant::dense, t, kN, kD);
        const auto mptn_flops = flops_temporal(CostVariant::mptn, t, kN, kD, &plan);

        CostReport dr;
        dr.variant = CostVariant::dense;
        dr.t = t;
        dr.n = kN;
        dr.d = kD;
        dr.flops = dense_flops;
        dr.wall_nanos = dmed;
        dr.ratio_vs_dense = 1.0;
        dr.noisy = detail::spread_noisy(dense_ns, dmed);
        CostReport mr = dr;
        mr.variant = CostVariant::mptn;
        mr.flops = mptn_flops;
        mr.wall_nanos = mmed;
        mr.ratio_vs_dense = double(mptn_flops) / double(dense_flops);
        mr.noisy = detail::spread_noisy(mptn_ns, mmed);
        out.reports.push_back(dr);
        out.reports.push_back(mr);

        ts.push_back(double(t));
        dense_meds.push_back(dmed);
        mptn_meds.push_back(mmed);
    }
    const auto df = detail::fit_loglog(ts, dense_meds);
    const auto mf = detail::fit_loglog(ts, mptn_meds);
    out.dense_slope = df.slope;
    out.dense_stderr = df.stderr_;
    out.mptn_slope = mf.slope;
    out.mptn_stderr = mf.stderr_;
    return out;
}

}  // namespace vqt
