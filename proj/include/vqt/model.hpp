#pragma once

#include <cmath>
#include <cstring>
#include <fstream>
#include <future>
#include <map>
#include <string>
#include <vector>

#include "vqt/data.hpp"
#include "vqt/metrics.hpp"
#include "vqt/mptn.hpp"
#include "vqt/tokenizer.hpp"

namespace vqt {

// The full quality model: tokenizer -> L pre-norm encoder blocks (temporal
// attention, spatial attention, MLP, each with residuals) -> quality head.

enum class TemporalMode { mptn, dense };

inline const char* to_string(TemporalMode m) { return m == TemporalMode::mptn ? "mptn" : "dense"; }

inline TemporalMode temporal_mode_from_string(const std::string& s) {
    if (s == "mptn") return TemporalMode::mptn;
    if (s == "dense") return TemporalMode::dense;
    throw ConfigError("model: unknown temporal mode '" + s + "' (expected mptn|dense)");
}

struct ModelConfig {
    size_t depth = 12;
    size_t embed_dim = 768;
    size_t heads = 12;
    size_t patch = 16;
    size_t clip_len = 96;
    size_t height = 224;
    size_t width = 224;
    double mlp_ratio = 4.0;
    TemporalMode temporal = TemporalMode::mptn;
    MptnMode mptn_mode = MptnMode::scatter;
    bool strict_selection = false;       // zero-row scan fidelity mode
    bool share_pathway_params = false;   // ablation: one parameter set for all pathways

    static ModelConfig tiny() {
        ModelConfig c;
        c.depth = 2;
        c.embed_dim = 32;
        c.heads = 2;
        c.patch = 8;
        c.clip_len = 8;
        c.height = 32;
        c.width = 32;
        return c;
    }

    static ModelConfig preset(const std::string& name) {
        if (name == "tiny") return tiny();
        if (name == "default") return ModelConfig{};
        throw ConfigError("unknown preset '" + name + "' (expected tiny|default)");
    }

    size_t tokens_per_frame() const { return height * width / (patch * patch); }
    size_t mlp_hidden() const { return static_cast<size_t>(std::llround(mlp_ratio * double(embed_dim))); }

    void validate() const {
        if (heads == 0 || embed_dim % heads != 0)
            throw ConfigError("config: embed_dim " + std::to_string(embed_dim) +
                              " not divisible by heads " + std::to_string(heads));
        if (patch == 0 || height % patch != 0 || width % patch != 0)
            throw ConfigError("config: frame " + std::to_string(height) + "x" + std::to_string(width) +
                              " not divisible by patch " + std::to_string(patch));
        if (clip_len < 2) throw ConfigError("config: clip_len must be >= 2");
        const size_t n = tokens_per_frame();
        const size_t side = static_cast<size_t>(std::lround(std::sqrt(double(n))));
        if (side * side != n)
            throw ConfigError("config: tokens per frame " + std::to_string(n) +
                              " must be a perfect square for the spatial shift");
        if (mlp_hidden() == 0) throw ConfigError("config: mlp_ratio too small");
    }

    SelectionPolicy selection_policy() const {
        return strict_selection ? SelectionPolicy::strict : SelectionPolicy::fill_fallback;
    }

    std::string serialize() const {
        char buf[64];
        std::string out;
        auto kv = [&](const char* k, const std::string& v) { out += std::string(k) + "=" + v + "\n"; };
        kv("depth", std::to_string(depth));
        kv("embed_dim", std::to_string(embed_dim));
        kv("heads", std::to_string(heads));
        kv("patch", std::to_string(patch));
        kv("clip_len", std::to_string(clip_len));
        kv("height", std::to_string(height));
        kv("width", std::to_string(width));
        std::snprintf(buf, sizeof buf, "%.6f", mlp_ratio);
        kv("mlp_ratio", buf);
        kv("temporal", to_string(temporal));
        kv("mptn_mode", to_string(mptn_mode));
        kv("strict_selection", strict_selection ? "1" : "0");
        kv("share_pathway_params", share_pathway_params ? "1" : "0");
        return out;
    }

    static ModelConfig parse(const std::string& text) {
        ModelConfig c;
        std::map<std::string, std::string> kv;
        size_t pos = 0;
        while (pos < text.size()) {
            size_t eol = text.find('\n', pos);
            if (eol == std::string::npos) eol = text.size();
            const std::string line = text.substr(pos, eol - pos);
            pos = eol + 1;
            if (line.empty()) continue;
            const size_t eq = line.find('=');
            if (eq == std::string::npos) throw DataError("config block: malformed line '" + line + "'");
            kv[line.substr(0, eq)] = line.substr(eq + 1);
        }
        auto need = [&](const char* k) {
            auto it = kv.find(k);
            if (it == kv.end()) throw DataError(std::string("config block: missing key '") + k + "'");
            return it->second;
        };
        c.depth = std::stoul(need("depth"));
        c.embed_dim = std::stoul(need("embed_dim"));
        c.heads = std::stoul(need("heads"));
        c.patch = std::stoul(need("patch"));
        c.clip_len = std::stoul(need("clip_len"));
        c.height = std::stoul(need("height"));
        c.width = std::stoul(need("width"));
        c.mlp_ratio = std::stod(need("mlp_ratio"));
        c.temporal = temporal_mode_from_string(need("temporal"));
        c.mptn_mode = mptn_mode_from_string(need("mptn_mode"));
        c.strict_selection = need("strict_selection") == "1";
        c.share_pathway_params = need("share_pathway_params") == "1";
        c.validate();
        return c;
    }

    bool operator==(const ModelConfig&) const = default;
};

// ---------------------------------------------------------------------------
// Parameters. Every learnable tensor lives in the ParamSet exactly once under
// a dotted name; the Model just holds aliasing views grouped per block.

template <std::floating_point S>
struct ModelBlock {
    Tensor<S> temporal_norm_gain, temporal_norm_bias;
    Tensor<S> spatial_norm_gain, spatial_norm_bias;
    Tensor<S> mlp_norm_gain, mlp_norm_bias;
    std::vector<AttentionParams<S>> pathways;  // mptn temporal mode
    AttentionParams<S> temporal_dense;         // dense temporal mode
    AttentionParams<S> spatial;
    Tensor<S> mlp_w1, mlp_b1, mlp_w2, mlp_b2;
};

template <std::floating_point S>
struct Model {
    ModelConfig config;
    PathwayPlan plan;
    ParamSet<S> params;
    Tensor<S> embed_weight, pos_embedding, quality_token;
    std::vector<ModelBlock<S>> blocks;
    Tensor<S> final_norm_gain, final_norm_bias;
    Tensor<S> head_weight, head_bias;

    void set_requires_grad(bool on) {
        for (size_t i = 0; i < params.size(); ++i) params.tensor(i).node()->requires_grad = on;
    }
};

namespace detail {

template <std::floating_point S>
Tensor<S> normal_param(std::vector<size_t> shape, Rng& rng, double stddev = 0.02) {
    std::vector<S> v(shape_numel(shape));
    for (auto& x : v) x = static_cast<S>(rng.normal() * stddev);
    return Tensor<S>::from(std::move(shape), std::move(v), true);
}

template <std::floating_point S>
AttentionParams<S> register_attention(ParamSet<S>& ps, const std::string& prefix, size_t d,
                                      size_t heads, Rng& rng, bool with_offsets) {
    AttentionParams<S> a;
    a.head_count = heads;
    a.query_proj = ps.add(prefix + ".query_proj", normal_param<S>({d, d}, rng));
    a.key_proj = ps.add(prefix + ".key_proj", normal_param<S>({d, d}, rng));
    a.value_proj = ps.add(prefix + ".value_proj", normal_param<S>({d, d}, rng));
    a.out_proj = ps.add(prefix + ".out_proj", normal_param<S>({d, d}, rng));
    if (with_offsets) {
        a.offset_weight = ps.add(prefix + ".offset_weight", Tensor<S>::zeros({d, 2}, true));
        a.offset_bias = ps.add(prefix + ".offset_bias", Tensor<S>::zeros({2}, true));
    }
    return a;
}

}  // namespace detail

template <std::floating_point S>
Model<S> build_model(const ModelConfig& config, uint64_t seed) {
    config.validate();
    Model<S> m;
    m.config = config;
    m.plan = plan_pathways(config.clip_len);
    Rng rng = Rng(seed).derive(0x1000);

    const size_t d = config.embed_dim;
    const size_t n = config.tokens_per_frame();
    const size_t t = config.clip_len;
    const size_t in_dim = 3 * config.patch * config.patch;
    const size_t hidden = config.mlp_hidden();

    m.embed_weight = m.params.add("tokenizer.embed_weight",
                                  detail::normal_param<S>({d, in_dim}, rng, 1.0 / std::sqrt(double(in_dim))));
    m.pos_embedding =
        m.params.add("tokenizer.pos_embedding", detail::normal_param<S>({t * n + 1, d}, rng));
    m.quality_token = m.params.add("tokenizer.quality_token", detail::normal_param<S>({1, d}, rng));

    for (size_t i = 0; i < config.depth; ++i) {
        const std::string bp = "blocks." + std::to_string(i);
        ModelBlock<S> blk;
        blk.temporal_norm_gain = m.params.add(bp + ".temporal_norm.gain", Tensor<S>::full({d}, S(1), true));
        blk.temporal_norm_bias = m.params.add(bp + ".temporal_norm.bias", Tensor<S>::zeros({d}, true));
        if (config.temporal == TemporalMode::mptn) {
            const size_t shared_count = config.share_pathway_params ? 1 : m.plan.pathway_count();
            std::vector<AttentionParams<S>> owned;
            for (size_t a = 0; a < shared_count; ++a)
                owned.push_back(detail::register_attention(m.params, bp + ".pathways." + std::to_string(a),
                                                           d, config.heads, rng, true));
            for (size_t a = 0; a < m.plan.pathway_count(); ++a)
                blk.pathways.push_back(owned[config.share_pathway_params ? 0 : a]);
        } else {
            blk.temporal_dense =
                detail::register_attention(m.params, bp + ".temporal", d, config.heads, rng, false);
        }
        blk.spatial_norm_gain = m.params.add(bp + ".spatial_norm.gain", Tensor<S>::full({d}, S(1), true));
        blk.spatial_norm_bias = m.params.add(bp + ".spatial_norm.bias", Tensor<S>::zeros({d}, true));
        blk.spatial = detail::register_attention(m.params, bp + ".spatial", d, config.heads, rng, false);
        blk.mlp_norm_gain = m.params.add(bp + ".mlp_norm.gain", Tensor<S>::full({d}, S(1), true));
        blk.mlp_norm_bias = m.params.add(bp + ".mlp_norm.bias", Tensor<S>::zeros({d}, true));
        blk.mlp_w1 = m.params.add(bp + ".mlp.w1",
                                  detail::normal_param<S>({d, hidden}, rng, 1.0 / std::sqrt(double(d))));
        blk.mlp_b1 = m.params.add(bp + ".mlp.b1", Tensor<S>::zeros({hidden}, true));
        blk.mlp_w2 = m.params.add(bp + ".mlp.w2",
                                  detail::normal_param<S>({hidden, d}, rng, 1.0 / std::sqrt(double(hidden))));
        blk.mlp_b2 = m.params.add(bp + ".mlp.b2", Tensor<S>::zeros({d}, true));
        m.blocks.push_back(std::move(blk));
    }
    m.final_norm_gain = m.params.add("final_norm.gain", Tensor<S>::full({d}, S(1), true));
    m.final_norm_bias = m.params.add("final_norm.bias", Tensor<S>::zeros({d}, true));
    // zero head: training starts from the label mean instead of killing a
    // noisy random feature path first
    m.head_weight = m.params.add("head.weight", Tensor<S>::zeros({d, 1}, true));
    m.head_bias = m.params.add("head.bias", Tensor<S>::zeros({1}, true));
    return m;
}

// ---------------------------------------------------------------------------
// Forward.

template <std::floating_point S>
struct PinnedSelections {
    // [block][pathway]; replays a captured hard selection so perturbation
    // probes differentiate exactly the function backward() differentiates
    std::vector<std::vector<KeyframeSelection>> by_block;
};

template <std::floating_point S>
Tensor<S> model_forward(const Model<S>& m, const RawClip& clip, Rng rng,
                        const PinnedSelections<S>* pinned = nullptr,
                        DiagnosticSink* sink = nullptr, size_t threads = 1) {
    const auto& cfg = m.config;
    if (clip.t != cfg.clip_len || clip.h != cfg.height || clip.w != cfg.width)
        throw ShapeError("forward: clip " + std::to_string(clip.t) + "x" + std::to_string(clip.h) +
                         "x" + std::to_string(clip.w) + " does not match config " +
                         std::to_string(cfg.clip_len) + "x" + std::to_string(cfg.height) + "x" +
                         std::to_string(cfg.width));
    auto patches = patchify<S>(clip, cfg.patch);
    auto grid = embed(patches, m.embed_weight, m.pos_embedding, m.quality_token);
    Tensor<S> tokens = grid.tokens;
    Tensor<S> quality = grid.quality;
    const size_t d = cfg.embed_dim;

    auto mlp_apply = [&](const ModelBlock<S>& blk, const Tensor<S>& x) {
        const size_t rows = x.numel() / d;
        auto flat = reshape(x, {rows, d});
        auto h = gelu(add_bias(matmul(flat, blk.mlp_w1), blk.mlp_b1));
        return reshape(add_bias(matmul(h, blk.mlp_w2), blk.mlp_b2), x.shape());
    };

    for (size_t i = 0; i < m.blocks.size(); ++i) {
        const auto& blk = m.blocks[i];
        // temporal stage (quality token excluded)
        auto t_in = layer_norm(tokens, blk.temporal_norm_gain, blk.temporal_norm_bias);
        Tensor<S> t_out;
        if (cfg.temporal == TemporalMode::mptn) {
            std::vector<SelectionRecord> records;
            auto res = mptn_forward(t_in, blk.pathways, m.plan, rng.derive(0x2000, i),
                                    cfg.mptn_mode, cfg.selection_policy(),
                                    pinned ? &pinned->by_block[i] : nullptr,
                                    sink ? &records : nullptr, threads);
            if (sink) {
                for (auto& r : records) {
                    r.block = i;
                    sink->records.push_back(std::move(r));
                }
            }
            t_out = res.tokens;
        } else {
            t_out = dense_temporal_attention(t_in, blk.temporal_dense);
        }
        tokens = add(tokens, t_out);

        // spatial stage (quality token participates)
        auto s_in = layer_norm(tokens, blk.spatial_norm_gain, blk.spatial_norm_bias);
        auto q_in = layer_norm(quality, blk.spatial_norm_gain, blk.spatial_norm_bias);
        auto sp = spatial_attention(s_in, q_in, blk.spatial);
        tokens = add(tokens, sp.tokens);
        quality = add(quality, sp.quality);

        // MLP stage
        auto m_in = layer_norm(tokens, blk.mlp_norm_gain, blk.mlp_norm_bias);
        auto mq_in = layer_norm(quality, blk.mlp_norm_gain, blk.mlp_norm_bias);
        tokens = add(tokens, mlp_apply(blk, m_in));
        quality = add(quality, mlp_apply(blk, mq_in));
    }
    auto q_final = layer_norm(quality, m.final_norm_gain, m.final_norm_bias);  // [1, d]
    auto pred = add_bias(matmul(q_final, m.head_weight), m.head_bias);         // [1, 1]
    return reshape(pred, {size_t(1)});
}

// Capture the hard keyframe selections of one forward pass so later passes
// can replay them (finite-difference checks, attention dumps).
template <std::floating_point S>
PinnedSelections<S> capture_selections(const Model<S>& m, const RawClip& clip, Rng rng) {
    DiagnosticSink sink;
    model_forward(m, clip, rng, static_cast<const PinnedSelections<S>*>(nullptr), &sink);
    PinnedSelections<S> pinned;
    pinned.by_block.resize(m.blocks.size());
    for (auto& b : pinned.by_block) b.resize(m.plan.pathway_count());
    for (const auto& r : sink.records) pinned.by_block[r.block][r.pathway] = r.selection;
    return pinned;
}

// ---------------------------------------------------------------------------
// Smooth-L1 objective: 0.5 e^2 for |e| < 1, |e| - 0.5 otherwise (transition
// at 1). Continuous with continuous first derivative.

template <std::floating_point S>
Tensor<S> smooth_l1(const Tensor<S>& pred, double label) {
    if (pred.numel() != 1) throw ContractError("smooth_l1: prediction must be scalar");
    auto n = detail::new_node<S>({1}, {pred.node()}, "smooth_l1");
    const double e = double(pred.values()[0]) - label;
    n->value[0] = static_cast<S>(std::abs(e) < 1.0 ? 0.5 * e * e : std::abs(e) - 0.5);
    return detail::finish<S>(std::move(n), [label](Node<S>& n) {
        if (!n.parents[0]->requires_grad) return;
        n.parents[0]->ensure_grad();
        const double e = double(n.parents[0]->value[0]) - label;
        const double d = std::abs(e) < 1.0 ? e : (e > 0 ? 1.0 : -1.0);
        n.parents[0]->grad[0] += n.grad[0] * static_cast<S>(d);
    });
}

// Mini-batch objective: mean of per-sample smooth-L1 terms.
template <std::floating_point S>
Tensor<S> batch_loss(const std::vector<Tensor<S>>& sample_losses) {
    if (sample_losses.empty()) throw ContractError("batch_loss: empty batch");
    return mean_axis(concat(sample_losses, 0), 0);
}

// ---------------------------------------------------------------------------
// Checkpoints. Layout: magic "VQTW", version u32, config block (u32 length +
// key=value text), then one record per tensor: name length u32, name bytes,
// dtype tag u8 (0 = f32, 1 = f64), rank u32, dims u64 each, raw
// little-endian data. Records follow ParamSet order; load(save(p)) is
// bit-exact.

namespace detail {

constexpr uint32_t kCheckpointVersion = 1;

template <std::floating_point S>
constexpr uint8_t dtype_tag() {
    return std::is_same_v<S, float> ? 0 : 1;
}

inline const char* dtype_name(uint8_t tag) { return tag == 0 ? "f32" : "f64"; }

}  // namespace detail

template <std::floating_point S>
void save_checkpoint(const ParamSet<S>& params, const ModelConfig& config, const std::string& path) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw DataError("cannot open '" + tmp + "' for writing");
        f.write("VQTW", 4);
        detail::write_u32(f, detail::kCheckpointVersion);
        const std::string cfg = config.serialize();
        detail::write_u32(f, static_cast<uint32_t>(cfg.size()));
        f.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));
        for (size_t i = 0; i < params.size(); ++i) {
            const std::string& name = params.name(i);
            const Tensor<S>& tsr = params.tensor(i);
            detail::write_u32(f, static_cast<uint32_t>(name.size()));
            f.write(name.data(), static_cast<std::streamsize>(name.size()));
            const uint8_t tag = detail::dtype_tag<S>();
            f.write(reinterpret_cast<const char*>(&tag), 1);
            detail::write_u32(f, static_cast<uint32_t>(tsr.rank()));
            for (size_t dim : tsr.shape()) {
                const uint64_t v = dim;
                f.write(reinterpret_cast<const char*>(&v), 8);
            }
            f.write(reinterpret_cast<const char*>(tsr.values().data()),
                    static_cast<std::streamsize>(tsr.numel() * sizeof(S)));
        }
        if (!f) throw DataError("write failure on '" + tmp + "'");
    }
    std::filesystem::rename(tmp, path);
}

// Reads just the header to recover the architecture.
inline ModelConfig read_checkpoint_config(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot open checkpoint '" + path + "'");
    char magic[4] = {};
    f.read(magic, 4);
    if (!f || std::memcmp(magic, "VQTW", 4) != 0)
        throw DataError("'" + path + "' is not a checkpoint (bad magic)");
    const uint32_t version = detail::read_u32(f, "version");
    if (version != detail::kCheckpointVersion)
        throw DataError("checkpoint '" + path + "': unsupported version " + std::to_string(version));
    const uint32_t cfg_len = detail::read_u32(f, "config length");
    std::string cfg(cfg_len, '\0');
    f.read(cfg.data(), cfg_len);
    if (!f) throw DataError("checkpoint '" + path + "': truncated config block");
    return ModelConfig::parse(cfg);
}

// Loads tensors into an existing parameter set. Version, missing/extra keys,
// dtype and shape mismatches are all reported distinctly; the first offending
// key is named.
template <std::floating_point S>
void load_checkpoint(ParamSet<S>& params, const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot open checkpoint '" + path + "'");
    char magic[4] = {};
    f.read(magic, 4);
    if (!f || std::memcmp(magic, "VQTW", 4) != 0)
        throw DataError("'" + path + "' is not a checkpoint (bad magic)");
    const uint32_t version = detail::read_u32(f, "version");
    if (version != detail::kCheckpointVersion)
        throw DataError("checkpoint '" + path + "': unsupported version " + std::to_string(version));
    const uint32_t cfg_len = detail::read_u32(f, "config length");
    f.seekg(cfg_len, std::ios::cur);
    if (!f) throw DataError("checkpoint '" + path + "': truncated config block");

    std::vector<std::string> seen;
    while (true) {
        uint32_t name_len = 0;
        f.read(reinterpret_cast<char*>(&name_len), 4);
        if (f.eof()) break;
        if (!f || name_len == 0 || name_len > 4096)
            throw DataError("checkpoint '" + path + "': corrupt record header");
        std::string name(name_len, '\0');
        f.read(name.data(), name_len);
        uint8_t tag = 0;
        f.read(reinterpret_cast<char*>(&tag), 1);
        const uint32_t rank = detail::read_u32(f, "rank");
        if (!f || rank > 8) throw DataError("checkpoint '" + path + "': corrupt record for '" + name + "'");
        std::vector<size_t> dims(rank);
        for (size_t k = 0; k < rank; ++k) {
            uint64_t v = 0;
            f.read(reinterpret_cast<char*>(&v), 8);
            dims[k] = static_cast<size_t>(v);
        }
        if (!f) throw DataError("checkpoint '" + path + "': truncated dims for '" + name + "'");
        if (!params.has(name))
            throw DataError("checkpoint '" + path + "': unexpected key '" + name + "'");
        Tensor<S>& dst = params.at(name);
        if (tag != detail::dtype_tag<S>())
            throw DataError("checkpoint '" + path + "': dtype mismatch for '" + name + "' (file " +
                            detail::dtype_name(tag) + ", model " +
                            detail::dtype_name(detail::dtype_tag<S>()) + ")");
        if (dims != dst.shape())
            throw DataError("checkpoint '" + path + "': shape mismatch for '" + name + "': file " +
                            shape_str(dims) + ", model " + shape_str(dst.shape()));
        f.read(reinterpret_cast<char*>(dst.values_mut().data()),
               static_cast<std::streamsize>(dst.numel() * sizeof(S)));
        if (static_cast<size_t>(f.gcount()) != dst.numel() * sizeof(S))
            throw DataError("checkpoint '" + path + "': truncated data for '" + name + "'");
        seen.push_back(name);
    }
    if (seen.size() != params.size()) {
        std::unordered_set<std::string> have(seen.begin(), seen.end());
        for (size_t i = 0; i < params.size(); ++i)
            if (!have.count(params.name(i)))
                throw DataError("checkpoint '" + path + "': missing key '" + params.name(i) + "'");
    }
}

// ---------------------------------------------------------------------------
// Training.

struct TrainConfig {
    size_t epochs = 90;
    size_t batch = 4;
    double lr = 1e-5;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double weight_decay = 0.01;
    size_t decay_every = 30;   // epochs between learning-rate steps
    double decay_factor = 0.1;
    double head_lr_scale = 1.0;  // rate multiplier for the quality head
    uint64_t seed = 0;
    size_t threads = 1;
};

struct EpochLog {
    size_t epoch = 0;
    double train_loss = 0;
    bool metrics_defined = false;
    double plcc = 0, srocc = 0, krocc = 0, rmse = 0;

    std::string line() const {
        char buf[256];
        if (metrics_defined)
            std::snprintf(buf, sizeof buf, "%zu\t%.6f\t%.6f\t%.6f\t%.6f\t%.6f", epoch, train_loss,
                          plcc, srocc, krocc, rmse);
        else
            std::snprintf(buf, sizeof buf, "%zu\t%.6f\tnan\tnan\tnan\tnan", epoch, train_loss);
        return buf;
    }
};

// Scores one clip; selection probes depend only on the given stream, so the
// same clip under the same seed always scores identically.
template <std::floating_point S>
double score_clip(const Model<S>& m, const RawClip& clip, uint64_t seed,
                  DiagnosticSink* sink = nullptr) {
    return double(model_forward(m, clip, Rng(seed).derive(0x5C0F),
                                static_cast<const PinnedSelections<S>*>(nullptr), sink)
                      .scalar());
}

template <std::floating_point S>
std::vector<double> score_clips(const Model<S>& m, const std::vector<const RawClip*>& clips,
                                uint64_t seed, size_t threads = 1) {
    std::vector<double> out(clips.size());
    if (threads <= 1 || clips.size() < 2) {
        for (size_t i = 0; i < clips.size(); ++i) out[i] = score_clip(m, *clips[i], seed);
    } else {
        std::vector<std::future<void>> futs;
        for (size_t chunk = 0; chunk < threads; ++chunk)
            futs.push_back(std::async(std::launch::async, [&, chunk] {
                for (size_t i = chunk; i < clips.size(); i += threads)
                    out[i] = score_clip(m, *clips[i], seed);
            }));
        for (auto& fu : futs) fu.get();
    }
    return out;
}

struct TrainResult {
    std::vector<EpochLog> log;
};

// Mini-batch AdamW with step-decay schedule. Per-epoch shuffling and keyframe
// sampling derive from (seed, epoch), so a rerun reproduces the log exactly.
// The final parameter state is the result (last iteration, no best-epoch
// selection); the caller persists it.
template <std::floating_point S>
TrainResult train(Model<S>& model, const Manifest& manifest, const std::string& data_dir,
                  const TrainConfig& tc) {
    std::vector<size_t> train_idx = manifest.split_indices("train");
    std::vector<size_t> test_idx = manifest.split_indices("test");
    if (train_idx.empty()) throw ContractError("train: empty training split");
    {
        std::unordered_set<std::string> train_paths;
        for (size_t i : train_idx) train_paths.insert(manifest.entries[i].path);
        for (size_t i : test_idx)
            if (train_paths.count(manifest.entries[i].path))
                throw ContractError("train: clip '" + manifest.entries[i].path +
                                    "' appears in both splits");
    }

    std::vector<RawClip> clips(manifest.entries.size());
    for (size_t i = 0; i < manifest.entries.size(); ++i)
        clips[i] = load_clip(data_dir + "/" + manifest.entries[i].path);

    AdamW<S> opt(tc.lr, tc.beta1, tc.beta2, tc.weight_decay);
    if (tc.head_lr_scale != 1.0) opt.add_lr_scale("head.", tc.head_lr_scale);
    const Rng root(tc.seed);
    TrainResult result;

    for (size_t epoch = 0; epoch < tc.epochs; ++epoch) {
        const size_t decay_steps = tc.decay_every > 0 ? epoch / tc.decay_every : 0;
        opt.set_lr(tc.lr * std::pow(tc.decay_factor, double(decay_steps)));

        std::vector<size_t> order = train_idx;
        Rng shuffle_rng = root.derive(3, epoch);
        for (size_t i = order.size(); i-- > 1;) {
            const size_t j = shuffle_rng.index(i + 1);
            std::swap(order[i], order[j]);
        }

        double loss_sum = 0;
        size_t batch_index = 0;
        for (size_t start = 0; start < order.size(); start += tc.batch, ++batch_index) {
            const size_t end = std::min(start + tc.batch, order.size());
            try {
                model.params.zero_grad();
                std::vector<Tensor<S>> losses(end - start);
                auto run_sample = [&](size_t k) {
                    const size_t idx = order[start + k];
                    auto pred = model_forward(model, clips[idx], root.derive(4, epoch).derive(idx),
                                              static_cast<const PinnedSelections<S>*>(nullptr));
                    losses[k] = smooth_l1(pred, manifest.entries[idx].label);
                };
                if (tc.threads > 1 && losses.size() > 1) {
                    std::vector<std::future<void>> futs;
                    for (size_t chunk = 0; chunk < std::min(tc.threads, losses.size()); ++chunk)
                        futs.push_back(std::async(std::launch::async, [&, chunk] {
                            for (size_t k = chunk; k < losses.size(); k += tc.threads) run_sample(k);
                        }));
                    for (auto& fu : futs) fu.get();
                } else {
                    for (size_t k = 0; k < losses.size(); ++k) run_sample(k);
                }
                auto loss = batch_loss(losses);
                loss_sum += double(loss.scalar()) * double(losses.size());
                backward(loss);
                opt.step(model.params);
            } catch (const NumericError& e) {
                throw NumericError("train: aborted at epoch " + std::to_string(epoch) + " batch " +
                                   std::to_string(batch_index) + ": " + e.what());
            }
        }

        EpochLog log;
        log.epoch = epoch;
        log.train_loss = loss_sum / double(order.size());
        // correlations need at least two samples; tiny eval splits just log nan
        if (test_idx.size() >= 2) {
            model.set_requires_grad(false);
            std::vector<const RawClip*> test_clips;
            std::vector<double> labels;
            for (size_t i : test_idx) {
                test_clips.push_back(&clips[i]);
                labels.push_back(manifest.entries[i].label);
            }
            auto preds = score_clips(model, test_clips, tc.seed, tc.threads);
            model.set_requires_grad(true);
            try {
                log.plcc = plcc(preds, labels);
                log.srocc = srocc(preds, labels);
                log.krocc = krocc(preds, labels);
                log.rmse = rmse(preds, labels);
                log.metrics_defined = true;
            } catch (const UndefinedCorrelationError&) {
                log.metrics_defined = false;
            }
        }
        result.log.push_back(log);
    }
    return result;
}

}  // namespace vqt
