#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

namespace vqt {

// Deterministic, platform-independent random source (splitmix64 core).
// std::random distributions are implementation-defined, so everything here
// is hand-rolled: two binaries with the same seed produce the same bytes.
class Rng {
  public:
    explicit Rng(uint64_t seed = 0) : state_(seed) {}

    uint64_t next_u64() {
        state_ += 0x9e3779b97f4a7c15ULL;
        uint64_t z = state_;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    // Uniform in [0, 1), 53-bit resolution.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Standard normal via Box-Muller; draws two uniforms per value so the
    // stream advance is input-independent.
    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        if (u1 < 1e-300) u1 = 1e-300;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
    }

    // Uniform integer in [0, n). Rejection-free multiply-shift map; the tiny
    // modulo bias (n << 2^64) is irrelevant here.
    size_t index(size_t n) {
        return static_cast<size_t>((static_cast<unsigned __int128>(next_u64()) * n) >> 64);
    }

    // Derive an independent child stream. Used for per-pathway / per-epoch /
    // per-clip streams so results do not depend on evaluation order.
    Rng derive(uint64_t id) const {
        uint64_t z = state_ ^ (0x9e3779b97f4a7c15ULL + id * 0xd1342543de82ef95ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return Rng(z ^ (z >> 31));
    }

    Rng derive(uint64_t a, uint64_t b) const { return derive(a).derive(b); }
    Rng derive(uint64_t a, uint64_t b, uint64_t c) const { return derive(a).derive(b).derive(c); }

  private:
    uint64_t state_;
};

// k distinct indices drawn uniformly from [0, n), returned ascending.
inline std::vector<size_t> sample_without_replacement(size_t n, size_t k, Rng& rng) {
    std::vector<size_t> pool(n);
    for (size_t i = 0; i < n; ++i) pool[i] = i;
    for (size_t i = 0; i < k && i + 1 < n; ++i) {
        size_t j = i + rng.index(n - i);
        std::swap(pool[i], pool[j]);
    }
    std::vector<size_t> out(pool.begin(), pool.begin() + static_cast<long>(k));
    for (size_t i = 1; i < out.size(); ++i) {
        size_t v = out[i];
        size_t j = i;
        while (j > 0 && out[j - 1] > v) {
            out[j] = out[j - 1];
            --j;
        }
        out[j] = v;
    }
    return out;
}

}  // namespace vqt
