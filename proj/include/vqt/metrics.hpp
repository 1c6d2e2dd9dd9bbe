#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "vqt/errors.hpp"

namespace vqt {

// Evaluation criteria for score prediction: Pearson (PLCC), Spearman (SROCC),
// Kendall tau-b (KROCC) and RMSE. Correlations use the standard tie-aware
// definitions: average ranks for Spearman, tie-corrected tau-b for Kendall.

namespace detail {

inline void check_pair(const std::vector<double>& a, const std::vector<double>& b, size_t min_n) {
    if (a.size() != b.size())
        throw ContractError("metrics: length mismatch " + std::to_string(a.size()) + " vs " +
                            std::to_string(b.size()));
    if (a.size() < min_n)
        throw ContractError("metrics: need at least " + std::to_string(min_n) + " samples, got " +
                            std::to_string(a.size()));
}

}  // namespace detail

inline double plcc(const std::vector<double>& pred, const std::vector<double>& label) {
    detail::check_pair(pred, label, 2);
    const size_t n = pred.size();
    double mx = 0, my = 0;
    for (size_t i = 0; i < n; ++i) {
        mx += pred[i];
        my += label[i];
    }
    mx /= double(n);
    my /= double(n);
    double sxy = 0, sxx = 0, syy = 0;
    for (size_t i = 0; i < n; ++i) {
        const double dx = pred[i] - mx;
        const double dy = label[i] - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if (sxx == 0.0 || syy == 0.0)
        throw UndefinedCorrelationError("plcc: undefined for constant input");
    return sxy / std::sqrt(sxx * syy);
}

// Ranks with ties replaced by the average rank of the tied group (1-based).
inline std::vector<double> average_ranks(const std::vector<double>& v) {
    const size_t n = v.size();
    std::vector<size_t> order(n);
    std::iota(order.begin(), order.end(), size_t{0});
    std::sort(order.begin(), order.end(), [&](size_t a, size_t b) { return v[a] < v[b]; });
    std::vector<double> ranks(n);
    size_t i = 0;
    while (i < n) {
        size_t j = i;
        while (j + 1 < n && v[order[j + 1]] == v[order[i]]) ++j;
        const double avg = 0.5 * (double(i + 1) + double(j + 1));
        for (size_t k = i; k <= j; ++k) ranks[order[k]] = avg;
        i = j + 1;
    }
    return ranks;
}

inline double srocc(const std::vector<double>& pred, const std::vector<double>& label) {
    detail::check_pair(pred, label, 2);
    return plcc(average_ranks(pred), average_ranks(label));
}

// Kendall tau-b by exhaustive pair counting; fine at this scale.
inline double krocc(const std::vector<double>& pred, const std::vector<double>& label) {
    detail::check_pair(pred, label, 2);
    const size_t n = pred.size();
    long long concordant = 0, discordant = 0, ties_x = 0, ties_y = 0;
    for (size_t i = 0; i < n; ++i) {
        for (size_t j = i + 1; j < n; ++j) {
            const double dx = pred[i] - pred[j];
            const double dy = label[i] - label[j];
            if (dx == 0.0 && dy == 0.0) {
                ++ties_x;
                ++ties_y;
            } else if (dx == 0.0) {
                ++ties_x;
            } else if (dy == 0.0) {
                ++ties_y;
            } else if ((dx > 0.0) == (dy > 0.0)) {
                ++concordant;
            } else {
                ++discordant;
            }
        }
    }
    const long long n0 = static_cast<long long>(n) * (n - 1) / 2;
    const double denom =
        std::sqrt(double(n0 - ties_x)) * std::sqrt(double(n0 - ties_y));
    if (denom == 0.0) throw UndefinedCorrelationError("krocc: undefined for all-tied input");
    return double(concordant - discordant) / denom;
}

inline double rmse(const std::vector<double>& pred, const std::vector<double>& label) {
    detail::check_pair(pred, label, 1);
    double acc = 0;
    for (size_t i = 0; i < pred.size(); ++i) {
        const double e = pred[i] - label[i];
        acc += e * e;
    }
    return std::sqrt(acc / double(pred.size()));
}

// Full report plus run metadata; serializes to "key: value" lines.
struct MetricReport {
    double plcc = 0, srocc = 0, krocc = 0, rmse = 0;
    size_t n = 0;
    std::string checkpoint, manifest, split;
    uint64_t seed = 0;

    static MetricReport compute(const std::vector<double>& pred, const std::vector<double>& label) {
        MetricReport r;
        r.plcc = vqt::plcc(pred, label);
        r.srocc = vqt::srocc(pred, label);
        r.krocc = vqt::krocc(pred, label);
        r.rmse = vqt::rmse(pred, label);
        r.n = pred.size();
        return r;
    }

    std::string serialize() const {
        char buf[128];
        std::string out;
        auto emit = [&](const char* key, const std::string& v) {
            out += key;
            out += ": ";
            out += v;
            out += "\n";
        };
        auto num = [&](double v) {
            std::snprintf(buf, sizeof buf, "%.6f", v);
            return std::string(buf);
        };
        emit("plcc", num(plcc));
        emit("srocc", num(srocc));
        emit("krocc", num(krocc));
        emit("rmse", num(rmse));
        emit("n", std::to_string(n));
        emit("checkpoint", checkpoint);
        emit("manifest", manifest);
        emit("split", split);
        emit("seed", std::to_string(seed));
        return out;
    }

    static MetricReport parse(const std::string& text) {
        MetricReport r;
        size_t pos = 0;
        std::map<std::string, std::string> kv;
        while (pos < text.size()) {
            size_t eol = text.find('\n', pos);
            if (eol == std::string::npos) eol = text.size();
            const std::string line = text.substr(pos, eol - pos);
            pos = eol + 1;
            if (line.empty()) continue;
            const size_t sep = line.find(": ");
            if (sep == std::string::npos) throw DataError("metric report: malformed line '" + line + "'");
            kv[line.substr(0, sep)] = line.substr(sep + 2);
        }
        for (const char* key : {"plcc", "srocc", "krocc", "rmse", "n"})
            if (!kv.count(key)) throw DataError(std::string("metric report: missing key '") + key + "'");
        r.plcc = std::stod(kv["plcc"]);
        r.srocc = std::stod(kv["srocc"]);
        r.krocc = std::stod(kv["krocc"]);
        r.rmse = std::stod(kv["rmse"]);
        r.n = std::stoul(kv["n"]);
        if (kv.count("checkpoint")) r.checkpoint = kv["checkpoint"];
        if (kv.count("manifest")) r.manifest = kv["manifest"];
        if (kv.count("split")) r.split = kv["split"];
        if (kv.count("seed")) r.seed = std::stoull(kv["seed"]);
        return r;
    }
};

}  // namespace vqt
