#pragma once

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <future>
#include <string>
#include <vector>

#include "vqt/errors.hpp"
#include "vqt/rng.hpp"

namespace vqt {

static_assert(std::endian::native == std::endian::little,
              "clip/checkpoint formats are little-endian; big-endian hosts are unsupported");

// A decoded clip: T frames of H x W RGB, float pixels in [0, 1], stored
// frame-major, then row-major, channel-last.
struct RawClip {
    size_t t = 0, h = 0, w = 0;
    std::vector<float> pixels;   // t*h*w*3
    double frame_rate = 0.0;     // 0 = unknown

    size_t index(size_t fr, size_t y, size_t x, size_t c) const {
        return ((fr * h + y) * w + x) * 3 + c;
    }
    float& at(size_t fr, size_t y, size_t x, size_t c) { return pixels[index(fr, y, x, c)]; }
    float at(size_t fr, size_t y, size_t x, size_t c) const { return pixels[index(fr, y, x, c)]; }
};

// ---------------------------------------------------------------------------
// Clip file format: magic "VQTC", version u32, T/H/W/C u32, then T*H*W*C
// little-endian f32 values in [0,1]. The payload length must match the header
// exactly; validation failures are DataErrors, never crashes.

namespace detail {

constexpr uint32_t kClipVersion = 1;

inline void write_u32(std::ofstream& f, uint32_t v) {
    f.write(reinterpret_cast<const char*>(&v), 4);
}

inline uint32_t read_u32(std::ifstream& f, const char* what) {
    uint32_t v = 0;
    f.read(reinterpret_cast<char*>(&v), 4);
    if (!f) throw DataError(std::string("truncated file while reading ") + what);
    return v;
}

}  // namespace detail

inline void save_clip(const RawClip& clip, const std::string& path) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw DataError("cannot open '" + tmp + "' for writing");
        f.write("VQTC", 4);
        detail::write_u32(f, detail::kClipVersion);
        detail::write_u32(f, static_cast<uint32_t>(clip.t));
        detail::write_u32(f, static_cast<uint32_t>(clip.h));
        detail::write_u32(f, static_cast<uint32_t>(clip.w));
        detail::write_u32(f, 3);
        f.write(reinterpret_cast<const char*>(clip.pixels.data()),
                static_cast<std::streamsize>(clip.pixels.size() * sizeof(float)));
        if (!f) throw DataError("write failure on '" + tmp + "'");
    }
    std::filesystem::rename(tmp, path);
}

inline RawClip load_clip(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot open clip file '" + path + "'");
    char magic[4] = {};
    f.read(magic, 4);
    if (!f || std::memcmp(magic, "VQTC", 4) != 0)
        throw DataError("'" + path + "' is not a clip file (bad magic)");
    const uint32_t version = detail::read_u32(f, "version");
    if (version != detail::kClipVersion)
        throw DataError("clip '" + path + "': unsupported version " + std::to_string(version));
    RawClip clip;
    clip.t = detail::read_u32(f, "frame count");
    clip.h = detail::read_u32(f, "height");
    clip.w = detail::read_u32(f, "width");
    const uint32_t channels = detail::read_u32(f, "channels");
    if (channels != 3)
        throw DataError("clip '" + path + "': expected 3 channels, got " + std::to_string(channels));
    if (clip.t == 0 || clip.h == 0 || clip.w == 0)
        throw DataError("clip '" + path + "': zero dimension in header");
    const size_t count = clip.t * clip.h * clip.w * 3;
    clip.pixels.resize(count);
    f.read(reinterpret_cast<char*>(clip.pixels.data()),
           static_cast<std::streamsize>(count * sizeof(float)));
    if (static_cast<size_t>(f.gcount()) != count * sizeof(float))
        throw DataError("clip '" + path + "': truncated payload");
    f.peek();
    if (!f.eof()) throw DataError("clip '" + path + "': trailing bytes after payload");
    for (size_t i = 0; i < count; ++i) {
        const float v = clip.pixels[i];
        if (!(v >= 0.0f && v <= 1.0f))
            throw DataError("clip '" + path + "': pixel out of [0,1] at index " + std::to_string(i));
    }
    return clip;
}

// ---------------------------------------------------------------------------
// Synthetic distortions. Each spec covers a frame range [onset, onset+duration)
// and an intensity in (0, 1]; ranges never overlap within a clip.

enum class DistortionKind { blur, blocking, overexposure };

inline const char* to_string(DistortionKind k) {
    switch (k) {
        case DistortionKind::blur: return "blur";
        case DistortionKind::blocking: return "blocking";
        case DistortionKind::overexposure: return "overexposure";
    }
    return "?";
}

inline DistortionKind distortion_from_string(const std::string& s) {
    if (s == "blur") return DistortionKind::blur;
    if (s == "blocking") return DistortionKind::blocking;
    if (s == "overexposure") return DistortionKind::overexposure;
    throw DataError("unknown distortion kind '" + s + "'");
}

struct DistortionSpec {
    DistortionKind kind = DistortionKind::blur;
    double severity = 0;  // (0, 1]
    size_t onset = 0;
    size_t duration = 0;
};

namespace detail {

inline void blur_frame(std::vector<float>& px, size_t h, size_t w, double severity) {
    const double sigma = 3.0 * severity;
    const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
    std::vector<double> kernel(2 * radius + 1);
    double norm = 0;
    for (int i = -radius; i <= radius; ++i) {
        kernel[i + radius] = std::exp(-0.5 * (i * i) / (sigma * sigma));
        norm += kernel[i + radius];
    }
    for (double& k : kernel) k /= norm;
    std::vector<float> tmp(px.size());
    // horizontal pass, border clamp
    for (size_t y = 0; y < h; ++y)
        for (size_t x = 0; x < w; ++x)
            for (size_t c = 0; c < 3; ++c) {
                double acc = 0;
                for (int i = -radius; i <= radius; ++i) {
                    const long xx = std::clamp<long>(long(x) + i, 0, long(w) - 1);
                    acc += kernel[i + radius] * px[(y * w + size_t(xx)) * 3 + c];
                }
                tmp[(y * w + x) * 3 + c] = static_cast<float>(acc);
            }
    for (size_t y = 0; y < h; ++y)
        for (size_t x = 0; x < w; ++x)
            for (size_t c = 0; c < 3; ++c) {
                double acc = 0;
                for (int i = -radius; i <= radius; ++i) {
                    const long yy = std::clamp<long>(long(y) + i, 0, long(h) - 1);
                    acc += kernel[i + radius] * tmp[(size_t(yy) * w + x) * 3 + c];
                }
                px[(y * w + x) * 3 + c] = std::clamp(static_cast<float>(acc), 0.0f, 1.0f);
            }
}

inline void blocking_frame(std::vector<float>& px, size_t h, size_t w, double severity) {
    const double step = 0.5 * severity;
    constexpr size_t kBlock = 8;
    for (size_t by = 0; by < h; by += kBlock)
        for (size_t bx = 0; bx < w; bx += kBlock)
            for (size_t c = 0; c < 3; ++c) {
                const size_t ey = std::min(by + kBlock, h);
                const size_t ex = std::min(bx + kBlock, w);
                double mean = 0;
                size_t count = 0;
                for (size_t y = by; y < ey; ++y)
                    for (size_t x = bx; x < ex; ++x) {
                        mean += px[(y * w + x) * 3 + c];
                        ++count;
                    }
                mean /= double(count);
                const double q = std::floor(mean / step + 0.5) * step;
                const float qv = std::clamp(static_cast<float>(q), 0.0f, 1.0f);
                for (size_t y = by; y < ey; ++y)
                    for (size_t x = bx; x < ex; ++x) px[(y * w + x) * 3 + c] = qv;
            }
}

inline void overexpose_frame(std::vector<float>& px, double severity) {
    const float push = static_cast<float>(0.7 * severity);
    for (float& v : px) v = std::min(1.0f, v + push);
}

}  // namespace detail

inline void apply_distortion(RawClip& clip, const DistortionSpec& spec) {
    if (spec.onset + spec.duration > clip.t)
        throw ContractError("distortion range exceeds clip length");
    const size_t frame_px = clip.h * clip.w * 3;
    for (size_t fr = spec.onset; fr < spec.onset + spec.duration; ++fr) {
        std::vector<float> frame(clip.pixels.begin() + fr * frame_px,
                                 clip.pixels.begin() + (fr + 1) * frame_px);
        switch (spec.kind) {
            case DistortionKind::blur: detail::blur_frame(frame, clip.h, clip.w, spec.severity); break;
            case DistortionKind::blocking:
                detail::blocking_frame(frame, clip.h, clip.w, spec.severity);
                break;
            case DistortionKind::overexposure: detail::overexpose_frame(frame, spec.severity); break;
        }
        std::copy(frame.begin(), frame.end(), clip.pixels.begin() + fr * frame_px);
    }
}

// Synthetic label: 5 - 4 * clamp(sum severity*duration / T, 0, 1). Monotone
// non-increasing in every spec's severity and duration, so rank-correlation
// targets against it are meaningful.
inline double synthetic_label(const std::vector<DistortionSpec>& specs, size_t t) {
    double mass = 0;
    for (const auto& s : specs) mass += s.severity * double(s.duration) / double(t);
    return 5.0 - 4.0 * std::clamp(mass, 0.0, 1.0);
}

// Base content: two moving low-frequency gradients plus a static seeded
// texture, kept inside [0.05, 0.95] so every distortion stays visible.
inline RawClip synthesize_base_clip(size_t t, size_t h, size_t w, Rng rng) {
    RawClip clip;
    clip.t = t;
    clip.h = h;
    clip.w = w;
    clip.pixels.resize(t * h * w * 3);
    const double fx1 = 1.0 + rng.index(2), fy1 = 1.0 + rng.index(2);
    const double fx2 = 2.0 + rng.index(2), fy2 = 2.0 + rng.index(2);
    const double sp1 = rng.uniform(0.5, 2.0), sp2 = rng.uniform(0.5, 2.0);
    std::array<double, 3> phase1{}, phase2{};
    for (int c = 0; c < 3; ++c) {
        phase1[c] = rng.uniform(0.0, 6.283185307179586);
        phase2[c] = rng.uniform(0.0, 6.283185307179586);
    }
    // coarse texture grid, bilinearly upsampled
    const size_t gy = std::max<size_t>(2, h / 2), gx = std::max<size_t>(2, w / 2);
    std::vector<double> grid(gy * gx * 3);
    for (double& g : grid) g = rng.uniform(-1.0, 1.0);
    constexpr double kTau = 6.283185307179586;
    for (size_t fr = 0; fr < t; ++fr) {
        for (size_t y = 0; y < h; ++y) {
            for (size_t x = 0; x < w; ++x) {
                const double yy = double(y) * double(gy - 1) / double(h - 1);
                const double xx = double(x) * double(gx - 1) / double(w - 1);
                const size_t y0 = static_cast<size_t>(yy), x0 = static_cast<size_t>(xx);
                const size_t y1 = std::min(y0 + 1, gy - 1), x1 = std::min(x0 + 1, gx - 1);
                const double fy = yy - double(y0), fxw = xx - double(x0);
                for (size_t c = 0; c < 3; ++c) {
                    const double tex = (1 - fy) * ((1 - fxw) * grid[(y0 * gx + x0) * 3 + c] +
                                                   fxw * grid[(y0 * gx + x1) * 3 + c]) +
                                       fy * ((1 - fxw) * grid[(y1 * gx + x0) * 3 + c] +
                                             fxw * grid[(y1 * gx + x1) * 3 + c]);
                    const double a1 = std::sin(kTau * (fx1 * x / double(w) + fy1 * y / double(h) +
                                                       sp1 * fr / double(t)) +
                                               phase1[c]);
                    const double a2 = std::sin(kTau * (fx2 * x / double(w) - fy2 * y / double(h) -
                                                       sp2 * fr / double(t)) +
                                               phase2[c]);
                    const double v = 0.5 + 0.16 * a1 + 0.10 * a2 + 0.16 * tex;
                    clip.pixels[clip.index(fr, y, x, c)] =
                        static_cast<float>(std::clamp(v, 0.05, 0.95));
                }
            }
        }
    }
    return clip;
}

// Draw 0..3 non-overlapping distortion segments. Overlapping draws are
// rejected and redrawn as a whole set.
inline std::vector<DistortionSpec> draw_distortions(size_t t, Rng& rng) {
    const size_t count = rng.index(4);
    for (int attempt = 0; attempt < 1000; ++attempt) {
        std::vector<DistortionSpec> specs;
        for (size_t i = 0; i < count; ++i) {
            DistortionSpec s;
            const size_t kind = rng.index(3);
            s.kind = kind == 0 ? DistortionKind::blur
                               : (kind == 1 ? DistortionKind::blocking : DistortionKind::overexposure);
            s.severity = rng.uniform(0.3, 1.0);
            // at least two frames per segment so every distortion leaves
            // usable temporal evidence
            s.duration = std::min(t, 2 + rng.index(t - 1));
            s.onset = rng.index(t - s.duration + 1);
            specs.push_back(s);
        }
        bool overlap = false;
        for (size_t i = 0; i < specs.size() && !overlap; ++i)
            for (size_t j = i + 1; j < specs.size() && !overlap; ++j) {
                const size_t a0 = specs[i].onset, a1 = specs[i].onset + specs[i].duration;
                const size_t b0 = specs[j].onset, b1 = specs[j].onset + specs[j].duration;
                overlap = a0 < b1 && b0 < a1;
            }
        if (!overlap) return specs;
    }
    return {};  // degenerate geometry; fall back to a clean clip
}

// ---------------------------------------------------------------------------
// Manifest: one record per line, tab-separated:
//   path  label  split  spec;spec;...   (specs "-" when none)
// Spec tuple: kind,severity,onset,duration.

struct ManifestEntry {
    std::string path;
    double label = 0;
    std::string split;  // "train" | "test"
    std::vector<DistortionSpec> specs;
};

struct Manifest {
    std::vector<ManifestEntry> entries;

    std::vector<size_t> split_indices(const std::string& split) const {
        std::vector<size_t> out;
        for (size_t i = 0; i < entries.size(); ++i)
            if (entries[i].split == split) out.push_back(i);
        return out;
    }
};

inline void save_manifest(const Manifest& m, const std::string& path) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream f(tmp, std::ios::trunc);
        if (!f) throw DataError("cannot open '" + tmp + "' for writing");
        char buf[64];
        for (const auto& e : m.entries) {
            f << e.path << "\t";
            std::snprintf(buf, sizeof buf, "%.6f", e.label);
            f << buf << "\t" << e.split << "\t";
            if (e.specs.empty()) {
                f << "-";
            } else {
                for (size_t i = 0; i < e.specs.size(); ++i) {
                    const auto& s = e.specs[i];
                    std::snprintf(buf, sizeof buf, "%s,%.6f,%zu,%zu", to_string(s.kind), s.severity,
                                  s.onset, s.duration);
                    f << buf;
                    if (i + 1 < e.specs.size()) f << ";";
                }
            }
            f << "\n";
        }
        if (!f) throw DataError("write failure on '" + tmp + "'");
    }
    std::filesystem::rename(tmp, path);
}

inline Manifest load_manifest(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw DataError("cannot open manifest '" + path + "'");
    Manifest m;
    std::string line;
    size_t lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::vector<std::string> cols;
        size_t pos = 0;
        while (true) {
            const size_t tab = line.find('\t', pos);
            cols.push_back(line.substr(pos, tab == std::string::npos ? std::string::npos : tab - pos));
            if (tab == std::string::npos) break;
            pos = tab + 1;
        }
        if (cols.size() != 4)
            throw DataError("manifest '" + path + "' line " + std::to_string(lineno) +
                            ": expected 4 tab-separated fields");
        ManifestEntry e;
        e.path = cols[0];
        try {
            e.label = std::stod(cols[1]);
        } catch (const std::exception&) {
            throw DataError("manifest line " + std::to_string(lineno) + ": bad label '" + cols[1] + "'");
        }
        if (!std::isfinite(e.label))
            throw DataError("manifest line " + std::to_string(lineno) + ": non-finite label");
        e.split = cols[2];
        if (e.split != "train" && e.split != "test")
            throw DataError("manifest line " + std::to_string(lineno) + ": bad split '" + e.split + "'");
        if (cols[3] != "-") {
            size_t sp = 0;
            while (sp <= cols[3].size()) {
                const size_t semi = cols[3].find(';', sp);
                const std::string tuple =
                    cols[3].substr(sp, semi == std::string::npos ? std::string::npos : semi - sp);
                std::vector<std::string> parts;
                size_t tp = 0;
                while (true) {
                    const size_t comma = tuple.find(',', tp);
                    parts.push_back(
                        tuple.substr(tp, comma == std::string::npos ? std::string::npos : comma - tp));
                    if (comma == std::string::npos) break;
                    tp = comma + 1;
                }
                if (parts.size() != 4)
                    throw DataError("manifest line " + std::to_string(lineno) + ": bad spec tuple '" +
                                    tuple + "'");
                DistortionSpec s;
                s.kind = distortion_from_string(parts[0]);
                s.severity = std::stod(parts[1]);
                s.onset = std::stoul(parts[2]);
                s.duration = std::stoul(parts[3]);
                e.specs.push_back(s);
                if (semi == std::string::npos) break;
                sp = semi + 1;
            }
        }
        m.entries.push_back(std::move(e));
    }
    return m;
}

// ---------------------------------------------------------------------------
// Dataset generation: `count` clips under `out_dir` plus a manifest. Fully
// deterministic per seed (clip i depends only on derive(seed, i)); clips can
// be generated in parallel.

struct GeneratedDataset {
    Manifest manifest;
    std::string manifest_path;
};

inline GeneratedDataset generate_synthetic_dataset(size_t count, size_t t, size_t h, size_t w,
                                                   uint64_t seed, const std::string& out_dir,
                                                   size_t threads = 1) {
    if (count == 0) throw ContractError("generate_synthetic_dataset: count must be positive");
    if (t < 2) throw ContractError("generate_synthetic_dataset: need at least 2 frames");
    std::filesystem::create_directories(out_dir);
    const Rng root(seed);

    std::vector<ManifestEntry> entries(count);
    auto make_clip = [&](size_t i) {
        Rng rng = root.derive(1, i);
        RawClip clip = synthesize_base_clip(t, h, w, rng.derive(0));
        Rng spec_rng = rng.derive(1);
        const auto specs = draw_distortions(t, spec_rng);
        for (const auto& s : specs) apply_distortion(clip, s);
        char name[64];
        std::snprintf(name, sizeof name, "clip_%05zu.vqtc", i);
        const std::string path = out_dir + "/" + name;
        save_clip(clip, path);
        ManifestEntry e;
        e.path = name;
        e.label = synthetic_label(specs, t);
        e.specs = specs;
        entries[i] = std::move(e);
    };

    if (threads <= 1) {
        for (size_t i = 0; i < count; ++i) make_clip(i);
    } else {
        std::vector<std::future<void>> futs;
        for (size_t chunk = 0; chunk < threads; ++chunk) {
            futs.push_back(std::async(std::launch::async, [&, chunk] {
                for (size_t i = chunk; i < count; i += threads) make_clip(i);
            }));
        }
        for (auto& fu : futs) fu.get();
    }

    // 80/20 split by clip, seeded.
    std::vector<size_t> order(count);
    for (size_t i = 0; i < count; ++i) order[i] = i;
    Rng split_rng = root.derive(2);
    for (size_t i = count; i-- > 1;) {
        const size_t j = split_rng.index(i + 1);
        std::swap(order[i], order[j]);
    }
    const size_t train_count = (count * 8 + 5) / 10;
    for (size_t k = 0; k < count; ++k)
        entries[order[k]].split = k < train_count ? "train" : "test";

    GeneratedDataset out;
    out.manifest.entries = std::move(entries);
    out.manifest_path = out_dir + "/manifest.txt";
    save_manifest(out.manifest, out.manifest_path);
    return out;
}

}  // namespace vqt
