#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "vqt/rng.hpp"
#include "vqt/tensor.hpp"

namespace vqt {

// Attention stack: dense temporal and spatial attention, divergence-scored
// keyframe selection, spatial shift of the selected queries, the sparse
// temporal attention forward, and the baseline reduction strategies used in
// ablations.

inline size_t ceil_log2(size_t n) {
    size_t c = 0, p = 1;
    while (p < n) {
        p <<= 1;
        ++c;
    }
    return c == 0 ? 1 : c;  // at least one probe/keyframe even for n <= 2
}

template <std::floating_point S>
struct AttentionParams {
    Tensor<S> query_proj, key_proj, value_proj, out_proj;  // each [d, d]
    Tensor<S> offset_weight;                               // [d, 2]
    Tensor<S> offset_bias;                                 // [2]
    size_t head_count = 1;
};

// Projections ~ N(0, 1/sqrt(d)); offset predictor starts at exact zero so
// the initial spatial shift is the identity.
template <std::floating_point S>
AttentionParams<S> init_attention_params(size_t d, size_t heads, Rng& rng) {
    if (heads == 0 || d % heads != 0)
        throw ConfigError("attention: embed dim " + std::to_string(d) +
                          " not divisible by head count " + std::to_string(heads));
    const double stddev = 1.0 / std::sqrt(double(d));
    auto normal_tensor = [&](std::vector<size_t> shape) {
        std::vector<S> v(detail::shape_numel(shape));
        for (auto& x : v) x = static_cast<S>(rng.normal() * stddev);
        return Tensor<S>::from(std::move(shape), std::move(v), true);
    };
    AttentionParams<S> p;
    p.query_proj = normal_tensor({d, d});
    p.key_proj = normal_tensor({d, d});
    p.value_proj = normal_tensor({d, d});
    p.out_proj = normal_tensor({d, d});
    p.offset_weight = Tensor<S>::zeros({d, 2}, true);
    p.offset_bias = Tensor<S>::zeros({2}, true);
    p.head_count = heads;
    return p;
}

// Multi-head scaled dot-product attention over batched sequences:
// q [B, Lq, d], k/v [B, Lk, d] -> [B, Lq, d]. Heads are split from d,
// scaled by 1/sqrt(d/heads), and concatenated again (no output projection).
template <std::floating_point S>
Tensor<S> multihead_attend(const Tensor<S>& q, const Tensor<S>& k, const Tensor<S>& v,
                           size_t heads) {
    const size_t b = q.dim(0), lq = q.dim(1), d = q.dim(2), lk = k.dim(1);
    const size_t dh = d / heads;
    auto split = [&](const Tensor<S>& x, size_t len) {
        return permute(reshape(x, {b, len, heads, dh}), {0, 2, 1, 3});  // [B,h,L,dh]
    };
    auto qh = split(q, lq);
    auto kh = split(k, lk);
    auto vh = split(v, lk);
    auto scores = scale(matmul(qh, permute(kh, {0, 1, 3, 2})), 1.0 / std::sqrt(double(dh)));
    auto attn = softmax(scores, 3);  // rows over keys sum to 1
    auto ctx = matmul(attn, vh);     // [B,h,Lq,dh]
    return reshape(permute(ctx, {0, 2, 1, 3}), {b, lq, d});
}

namespace detail {

template <std::floating_point S>
Tensor<S> project(const Tensor<S>& tokens_flat, const Tensor<S>& weight) {
    return matmul(tokens_flat, weight);
}

}  // namespace detail

// Dense temporal attention: for every spatial location, attention across all
// T frames at that location. Quality token is excluded by contract.
template <std::floating_point S>
Tensor<S> dense_temporal_attention(const Tensor<S>& tokens, const AttentionParams<S>& params) {
    if (tokens.rank() != 3) throw ShapeError("dense_temporal_attention: expected [T,N,d]");
    const size_t t = tokens.dim(0), n = tokens.dim(1), d = tokens.dim(2);
    auto flat = reshape(tokens, {t * n, d});
    auto q = reshape(detail::project(flat, params.query_proj), {t, n, d});
    auto k = reshape(detail::project(flat, params.key_proj), {t, n, d});
    auto v = reshape(detail::project(flat, params.value_proj), {t, n, d});
    auto qp = permute(q, {1, 0, 2});  // [N, T, d]
    auto kp = permute(k, {1, 0, 2});
    auto vp = permute(v, {1, 0, 2});
    auto ctx = multihead_attend(qp, kp, vp, params.head_count);  // [N, T, d]
    auto merged = reshape(permute(ctx, {1, 0, 2}), {t * n, d});
    return reshape(matmul(merged, params.out_proj), {t, n, d});
}

// Spatial attention per frame over the N patch tokens plus the shared
// quality token; the per-frame quality outputs are averaged back into the
// single quality state.
template <std::floating_point S>
struct SpatialResult {
    Tensor<S> tokens;   // [T, N, d]
    Tensor<S> quality;  // [1, d]
};

template <std::floating_point S>
SpatialResult<S> spatial_attention(const Tensor<S>& tokens, const Tensor<S>& quality,
                                   const AttentionParams<S>& params) {
    const size_t t = tokens.dim(0), n = tokens.dim(1), d = tokens.dim(2);
    // broadcast the quality state to row 0 of every frame's sequence
    auto q_rows = reshape(gather_rows(quality, std::vector<size_t>(t, 0)), {t, 1, d});
    auto seq = concat<S>({q_rows, tokens}, 1);  // [T, N+1, d]
    auto flat = reshape(seq, {t * (n + 1), d});
    auto q = reshape(detail::project(flat, params.query_proj), {t, n + 1, d});
    auto k = reshape(detail::project(flat, params.key_proj), {t, n + 1, d});
    auto v = reshape(detail::project(flat, params.value_proj), {t, n + 1, d});
    auto ctx = multihead_attend(q, k, v, params.head_count);  // [T, N+1, d]
    auto merged = reshape(matmul(reshape(ctx, {t * (n + 1), d}), params.out_proj), {t, n + 1, d});
    SpatialResult<S> out;
    out.tokens = narrow(merged, 1, 1, n);
    out.quality = mean_axis(narrow(merged, 1, 0, 1), 0);  // [1, d]
    return out;
}

// Quality-free variant (plain per-frame attention over N tokens).
template <std::floating_point S>
Tensor<S> spatial_attention(const Tensor<S>& tokens, const AttentionParams<S>& params) {
    const size_t t = tokens.dim(0), n = tokens.dim(1), d = tokens.dim(2);
    auto flat = reshape(tokens, {t * n, d});
    auto q = reshape(detail::project(flat, params.query_proj), {t, n, d});
    auto k = reshape(detail::project(flat, params.key_proj), {t, n, d});
    auto v = reshape(detail::project(flat, params.value_proj), {t, n, d});
    auto ctx = multihead_attend(q, k, v, params.head_count);
    return reshape(matmul(reshape(ctx, {t * n, d}), params.out_proj), {t, n, d});
}

// ---------------------------------------------------------------------------
// Divergence scoring and keyframe selection.

namespace detail {

// log-sum-exp minus mean of the scaled similarity scores s_j = q.k_j/sqrt(d),
// computed with max subtraction. Always >= ln T; equality iff all scores are
// equal; invariant under adding a constant to every score.
inline double kl_score_raw(const double* scores, size_t t) {
    double mx = scores[0];
    for (size_t j = 1; j < t; ++j) mx = std::max(mx, scores[j]);
    double sum_exp = 0, mean = 0;
    for (size_t j = 0; j < t; ++j) {
        sum_exp += std::exp(scores[j] - mx);
        mean += scores[j];
    }
    return mx + std::log(sum_exp) - mean / double(t);
}

template <std::floating_point S>
double kl_score_frame(const S* q, const S* keys, size_t t, size_t d) {
    std::vector<double> scores(t);
    const double inv_sqrt_d = 1.0 / std::sqrt(double(d));
    for (size_t j = 0; j < t; ++j) {
        double dot = 0;
        const S* k = keys + j * d;
        for (size_t i = 0; i < d; ++i) dot += double(q[i]) * double(k[i]);
        scores[j] = dot * inv_sqrt_d;
    }
    return kl_score_raw(scores.data(), t);
}

}  // namespace detail

// Divergence of one frame's similarity distribution from uniform, in the
// rewritten log-sum-exp minus mean form (the constant ln(1/T) term dropped).
template <std::floating_point S>
double kl_divergence_score(const Tensor<S>& q, const Tensor<S>& keys) {
    if (keys.rank() != 2) throw ShapeError("kl_divergence_score: keys must be [T,d]");
    const size_t t = keys.dim(0), d = keys.dim(1);
    if (q.numel() != d) throw ShapeError("kl_divergence_score: query length mismatch");
    return detail::kl_score_frame(q.values().data(), keys.values().data(), t, d);
}

struct KeyframeSelection {
    std::vector<size_t> indices;        // ascending, unique
    std::vector<size_t> probe_indices;  // ascending
    std::vector<double> probe_scores;   // aligned with probe_indices
    double threshold = 0;               // mu + sigma of the probe scores
};

enum class SelectionPolicy {
    fill_fallback,  // guarantee exactly `budget` selected frames
    strict          // threshold scan only; may select fewer
};

// Keyframe selection: probe ceil(log2 T) random frames, estimate the score
// distribution (mu, population sigma), then scan frames in index order taking
// those whose divergence exceeds mu + sigma until the budget is filled.
// Under fill_fallback any shortfall is filled first with the top-divergence
// probed frames, then with the lowest-index frames still unselected.
template <std::floating_point S>
KeyframeSelection select_keyframes(const Tensor<S>& q_frames, const Tensor<S>& k_frames,
                                   size_t budget, Rng& rng,
                                   SelectionPolicy policy = SelectionPolicy::fill_fallback,
                                   size_t probe_count_override = 0) {
    if (q_frames.rank() != 2 || k_frames.rank() != 2 || q_frames.shape() != k_frames.shape())
        throw ShapeError("select_keyframes: expected matching [T,d] query/key representatives");
    const size_t t = q_frames.dim(0), d = q_frames.dim(1);
    if (budget > t)
        throw ContractError("select_keyframes: budget " + std::to_string(budget) + " exceeds " +
                            std::to_string(t) + " frames");
    if (budget == 0) throw ContractError("select_keyframes: budget must be positive");

    const S* qv = q_frames.values().data();
    const S* kv = k_frames.values().data();
    std::vector<double> score_cache(t, 0);
    std::vector<char> scored(t, 0);
    auto score_of = [&](size_t i) {
        if (!scored[i]) {
            score_cache[i] = detail::kl_score_frame(qv + i * d, kv, t, d);
            scored[i] = 1;
        }
        return score_cache[i];
    };

    KeyframeSelection sel;
    const size_t probe_count = std::min(probe_count_override ? probe_count_override : ceil_log2(t), t);
    sel.probe_indices = sample_without_replacement(t, probe_count, rng);
    sel.probe_scores.reserve(probe_count);
    double mu = 0;
    for (size_t p : sel.probe_indices) {
        const double s = score_of(p);
        sel.probe_scores.push_back(s);
        mu += s;
    }
    mu /= double(probe_count);
    double var = 0;
    for (double s : sel.probe_scores) var += (s - mu) * (s - mu);
    var /= double(probe_count);  // population standard deviation
    sel.threshold = mu + std::sqrt(var);

    std::vector<char> taken(t, 0);
    for (size_t i = 0; i < t && sel.indices.size() < budget; ++i) {
        if (score_of(i) > sel.threshold) {
            sel.indices.push_back(i);
            taken[i] = 1;
        }
    }

    if (policy == SelectionPolicy::fill_fallback && sel.indices.size() < budget) {
        // highest-divergence probes first (ties broken toward lower index)
        std::vector<size_t> by_score(sel.probe_indices);
        std::sort(by_score.begin(), by_score.end(), [&](size_t a, size_t b) {
            if (score_cache[a] != score_cache[b]) return score_cache[a] > score_cache[b];
            return a < b;
        });
        for (size_t p : by_score) {
            if (sel.indices.size() >= budget) break;
            if (!taken[p]) {
                sel.indices.push_back(p);
                taken[p] = 1;
            }
        }
        for (size_t i = 0; i < t && sel.indices.size() < budget; ++i) {
            if (!taken[i]) {
                sel.indices.push_back(i);
                taken[i] = 1;
            }
        }
    }
    std::sort(sel.indices.begin(), sel.indices.end());
    return sel;
}

// ---------------------------------------------------------------------------
// Spatial shift: predict a 2D offset per token with a linear layer and
// resample the sqrt(N) x sqrt(N) token grid bilinearly. Zero-initialized
// predictors make this an exact identity.

template <std::floating_point S>
Tensor<S> spatial_shift(const Tensor<S>& queries, const AttentionParams<S>& params) {
    if (queries.rank() != 3) throw ShapeError("spatial_shift: expected [S,N,d]");
    const size_t s = queries.dim(0), n = queries.dim(1), d = queries.dim(2);
    const size_t side = static_cast<size_t>(std::lround(std::sqrt(double(n))));
    if (side * side != n)
        throw ConfigError("spatial_shift: token count " + std::to_string(n) +
                          " is not a perfect square");
    auto flat = reshape(queries, {s * n, d});
    auto offsets = reshape(add_bias(matmul(flat, params.offset_weight), params.offset_bias),
                           {s, side, side, 2});
    auto grid = reshape(queries, {s, side, side, d});
    return reshape(bilinear_sample(grid, offsets), {s, n, d});
}

// ---------------------------------------------------------------------------
// Sparse temporal attention: keyframe queries only, keys and values over all
// frames. Selection is a hard, non-differentiable decision (values still
// carry gradient through the gather).

struct SelectionRecord {
    size_t block = 0;
    size_t pathway = 0;
    size_t budget = 0;
    size_t clip_len = 0;
    KeyframeSelection selection;
    // mean attention weight over locations and heads, row per selected frame
    std::vector<double> attention_rows;  // [S * T]
};

struct DiagnosticSink {
    std::vector<SelectionRecord> records;
};

template <std::floating_point S>
struct StaResult {
    Tensor<S> values;  // [budget, N, d]
    KeyframeSelection selection;
};

template <std::floating_point S>
StaResult<S> sta_forward(const Tensor<S>& tokens, const AttentionParams<S>& params, size_t budget,
                         Rng rng, SelectionPolicy policy = SelectionPolicy::fill_fallback,
                         const KeyframeSelection* pinned = nullptr,
                         SelectionRecord* record = nullptr) {
    if (tokens.rank() != 3) throw ShapeError("sta_forward: expected [T,N,d]");
    const size_t t = tokens.dim(0), n = tokens.dim(1), d = tokens.dim(2);
    auto flat = reshape(tokens, {t * n, d});
    auto q = reshape(detail::project(flat, params.query_proj), {t, n, d});
    auto k = reshape(detail::project(flat, params.key_proj), {t, n, d});
    auto v = reshape(detail::project(flat, params.value_proj), {t, n, d});

    StaResult<S> out;
    if (pinned) {
        out.selection = *pinned;
    } else {
        // frame representatives: mean of the frame's projected query/key rows
        std::vector<S> q_rep(t * d, S(0)), k_rep(t * d, S(0));
        const auto& qvals = q.values();
        const auto& kvals = k.values();
        const S inv_n = S(1) / static_cast<S>(n);
        for (size_t fr = 0; fr < t; ++fr)
            for (size_t p = 0; p < n; ++p)
                for (size_t i = 0; i < d; ++i) {
                    q_rep[fr * d + i] += qvals[(fr * n + p) * d + i] * inv_n;
                    k_rep[fr * d + i] += kvals[(fr * n + p) * d + i] * inv_n;
                }
        auto q_frames = Tensor<S>::from({t, d}, std::move(q_rep));
        auto k_frames = Tensor<S>::from({t, d}, std::move(k_rep));
        out.selection = select_keyframes(q_frames, k_frames, budget, rng, policy);
    }
    const auto& indices = out.selection.indices;
    const size_t s_count = indices.size();

    auto q_sel = gather_rows(q, indices);                 // [S, N, d]
    auto q_shifted = spatial_shift(q_sel, params);        // [S, N, d]
    auto qp = permute(q_shifted, {1, 0, 2});              // [N, S, d]
    auto kp = permute(k, {1, 0, 2});                      // [N, T, d]
    auto vp = permute(v, {1, 0, 2});

    // expanded attend so the attention map is observable for diagnostics
    const size_t heads = params.head_count;
    const size_t dh = d / heads;
    auto split = [&](const Tensor<S>& x, size_t len) {
        return permute(reshape(x, {n, len, heads, dh}), {0, 2, 1, 3});
    };
    auto scores = scale(matmul(split(qp, s_count), permute(split(kp, t), {0, 1, 3, 2})),
                        1.0 / std::sqrt(double(dh)));
    auto attn = softmax(scores, 3);  // [N, heads, S, T]
    if (record) {
        record->budget = budget;
        record->clip_len = t;
        record->selection = out.selection;
        record->attention_rows.assign(s_count * t, 0.0);
        const auto& av = attn.values();
        for (size_t loc = 0; loc < n; ++loc)
            for (size_t h = 0; h < heads; ++h)
                for (size_t r = 0; r < s_count; ++r)
                    for (size_t c = 0; c < t; ++c)
                        record->attention_rows[r * t + c] +=
                            double(av[((loc * heads + h) * s_count + r) * t + c]) / double(n * heads);
    }
    auto ctx = matmul(attn, split(vp, t));                              // [N,h,S,dh]
    auto merged = reshape(permute(reshape(permute(ctx, {0, 2, 1, 3}), {n, s_count, d}), {1, 0, 2}),
                          {s_count * n, d});
    auto values = reshape(matmul(merged, params.out_proj), {s_count, n, d});

    if (s_count < budget) {
        // strict mode shortfall: remaining rows stay zero, as in the
        // zero-initialized attention buffer of the scan formulation
        auto zeros = Tensor<S>::zeros({budget - s_count, n, d});
        values = concat<S>({values, zeros}, 0);
    }
    out.values = values;
    return out;
}

// ---------------------------------------------------------------------------
// Baseline temporal reductions for ablations.

enum class ReduceStrategy { random, linear, conv, clustering };

inline ReduceStrategy reduce_strategy_from_string(const std::string& s) {
    if (s == "random") return ReduceStrategy::random;
    if (s == "linear") return ReduceStrategy::linear;
    if (s == "conv") return ReduceStrategy::conv;
    if (s == "clustering") return ReduceStrategy::clustering;
    throw ConfigError("baseline_reduce: unknown strategy '" + s + "'");
}

template <std::floating_point S>
struct BaselineParams {
    Tensor<S> mix;        // [budget, T] mixing matrix (linear, conv)
    Tensor<S> conv_bias;  // [budget]
};

template <std::floating_point S>
BaselineParams<S> init_baseline_params(size_t t, size_t budget, Rng& rng) {
    std::vector<S> m(budget * t);
    for (auto& x : m) x = static_cast<S>(rng.normal() * 0.02);
    BaselineParams<S> p;
    p.mix = Tensor<S>::from({budget, t}, std::move(m), true);
    p.conv_bias = Tensor<S>::zeros({budget}, true);
    return p;
}

template <std::floating_point S>
Tensor<S> baseline_reduce(const Tensor<S>& tokens, ReduceStrategy strategy, size_t budget,
                          const BaselineParams<S>* params, Rng& rng,
                          std::vector<size_t>* chosen_indices = nullptr) {
    if (tokens.rank() != 3) throw ShapeError("baseline_reduce: expected [T,N,d]");
    const size_t t = tokens.dim(0), n = tokens.dim(1), d = tokens.dim(2);
    if (budget == 0 || budget > t)
        throw ContractError("baseline_reduce: budget " + std::to_string(budget) + " invalid for " +
                            std::to_string(t) + " frames");
    switch (strategy) {
        case ReduceStrategy::random: {
            auto idx = sample_without_replacement(t, budget, rng);
            if (chosen_indices) *chosen_indices = idx;
            return gather_rows(tokens, idx);
        }
        case ReduceStrategy::linear: {
            if (!params) throw ContractError("baseline_reduce: linear strategy needs params");
            auto flat = reshape(tokens, {t, n * d});
            return reshape(matmul(params->mix, flat), {budget, n, d});
        }
        case ReduceStrategy::conv: {
            if (!params) throw ContractError("baseline_reduce: conv strategy needs params");
            auto flat = reshape(tokens, {t, n * d});
            auto mixed = matmul(params->mix, flat);  // [budget, N*d]
            auto biased = transpose(add_bias(transpose(mixed), params->conv_bias));
            return reshape(relu(biased), {budget, n, d});
        }
        case ReduceStrategy::clustering: {
            // k-means on frame representatives with cosine assignment,
            // fixed 10 iterations, seeded init; outputs are the member means.
            const auto& tv = tokens.values();
            std::vector<double> rep(t * d, 0);
            for (size_t fr = 0; fr < t; ++fr)
                for (size_t p = 0; p < n; ++p)
                    for (size_t i = 0; i < d; ++i)
                        rep[fr * d + i] += double(tv[(fr * n + p) * d + i]) / double(n);
            auto cosine = [&](const double* a, const double* b) {
                double dot = 0, na = 0, nb = 0;
                for (size_t i = 0; i < d; ++i) {
                    dot += a[i] * b[i];
                    na += a[i] * a[i];
                    nb += b[i] * b[i];
                }
                const double denom = std::sqrt(na) * std::sqrt(nb);
                return denom > 0 ? dot / denom : 0.0;
            };
            const auto seeds = sample_without_replacement(t, budget, rng);
            std::vector<double> centroids(budget * d);
            for (size_t c = 0; c < budget; ++c)
                std::copy(rep.begin() + seeds[c] * d, rep.begin() + (seeds[c] + 1) * d,
                          centroids.begin() + c * d);
            std::vector<size_t> assign(t, 0);
            for (int iter = 0; iter < 10; ++iter) {
                for (size_t fr = 0; fr < t; ++fr) {
                    size_t best = 0;
                    double best_sim = -2;
                    for (size_t c = 0; c < budget; ++c) {
                        const double sim = cosine(rep.data() + fr * d, centroids.data() + c * d);
                        if (sim > best_sim) {
                            best_sim = sim;
                            best = c;
                        }
                    }
                    assign[fr] = best;
                }
                for (size_t c = 0; c < budget; ++c) {
                    std::vector<double> acc(d, 0);
                    size_t count = 0;
                    for (size_t fr = 0; fr < t; ++fr)
                        if (assign[fr] == c) {
                            for (size_t i = 0; i < d; ++i) acc[i] += rep[fr * d + i];
                            ++count;
                        }
                    if (count > 0)
                        for (size_t i = 0; i < d; ++i) centroids[c * d + i] = acc[i] / double(count);
                }
            }
            if (chosen_indices) *chosen_indices = assign;
            std::vector<Tensor<S>> rows;
            for (size_t c = 0; c < budget; ++c) {
                std::vector<size_t> members;
                for (size_t fr = 0; fr < t; ++fr)
                    if (assign[fr] == c) members.push_back(fr);
                if (members.empty()) members.push_back(seeds[c]);
                auto gathered = gather_rows(tokens, members);  // [m, N, d]
                rows.push_back(reshape(mean_axis(gathered, 0), {size_t(1), n, d}));
            }
            return concat<S>(rows, 0);
        }
    }
    throw ConfigError("baseline_reduce: unknown strategy");
}

}  // namespace vqt
