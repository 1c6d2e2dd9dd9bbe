#pragma once

#include <string>
#include <vector>

#include "vqt/data.hpp"
#include "vqt/tensor.hpp"

namespace vqt {

// Clip tokenization: non-overlapping P x P patches per frame, linear
// embedding, learned positional table, and a single learnable quality token.

template <std::floating_point S>
struct TokenGrid {
    Tensor<S> tokens;   // [T, N, d]
    Tensor<S> quality;  // [1, d] shared across frames
    bool pos_embedding_applied = false;
};

// Frames -> [T, N, 3*P*P]. Patches are ordered row-major within the frame;
// each patch flattens in (row, col, channel) order. The order is fixed so
// that checkpoints stay portable.
template <std::floating_point S>
Tensor<S> patchify(const RawClip& clip, size_t patch) {
    if (clip.t < 2) throw ConfigError("patchify: need at least 2 frames, got " + std::to_string(clip.t));
    if (patch == 0 || clip.h % patch != 0 || clip.w % patch != 0)
        throw ConfigError("patchify: frame " + std::to_string(clip.h) + "x" + std::to_string(clip.w) +
                          " is not divisible by patch size " + std::to_string(patch));
    const size_t rows = clip.h / patch, cols = clip.w / patch;
    const size_t n = rows * cols;
    const size_t dim = 3 * patch * patch;
    std::vector<S> data(clip.t * n * dim);
    for (size_t fr = 0; fr < clip.t; ++fr)
        for (size_t pr = 0; pr < rows; ++pr)
            for (size_t pc = 0; pc < cols; ++pc) {
                S* dst = data.data() + ((fr * n) + pr * cols + pc) * dim;
                size_t k = 0;
                for (size_t y = 0; y < patch; ++y)
                    for (size_t x = 0; x < patch; ++x)
                        for (size_t c = 0; c < 3; ++c)
                            dst[k++] = static_cast<S>(
                                clip.at(fr, pr * patch + y, pc * patch + x, c));
            }
    return Tensor<S>::from({clip.t, n, dim}, std::move(data));
}

// Inverse of patchify; exact round-trip up to the float cast.
template <std::floating_point S>
RawClip unpatchify(const Tensor<S>& patches, size_t patch, size_t h, size_t w) {
    if (patches.rank() != 3) throw ShapeError("unpatchify: expected [T,N,3P^2]");
    const size_t rows = h / patch, cols = w / patch;
    if (patches.dim(1) != rows * cols || patches.dim(2) != 3 * patch * patch)
        throw ShapeError("unpatchify: shape " + shape_str(patches.shape()) + " does not match " +
                         std::to_string(h) + "x" + std::to_string(w) + "/P=" + std::to_string(patch));
    RawClip clip;
    clip.t = patches.dim(0);
    clip.h = h;
    clip.w = w;
    clip.pixels.resize(clip.t * h * w * 3);
    const auto& v = patches.values();
    const size_t n = rows * cols, dim = 3 * patch * patch;
    for (size_t fr = 0; fr < clip.t; ++fr)
        for (size_t pr = 0; pr < rows; ++pr)
            for (size_t pc = 0; pc < cols; ++pc) {
                const S* src = v.data() + ((fr * n) + pr * cols + pc) * dim;
                size_t k = 0;
                for (size_t y = 0; y < patch; ++y)
                    for (size_t x = 0; x < patch; ++x)
                        for (size_t c = 0; c < 3; ++c)
                            clip.pixels[clip.index(fr, pr * patch + y, pc * patch + x, c)] =
                                static_cast<float>(src[k++]);
            }
    return clip;
}

// Linear patch embedding plus positional table. embed_weight is [d, 3P^2]
// (token = W * patch), pos_embedding is [(T*N + 1), d] with row 0 reserved
// for the quality token's slot.
template <std::floating_point S>
TokenGrid<S> embed(const Tensor<S>& patches, const Tensor<S>& embed_weight,
                   const Tensor<S>& pos_embedding, const Tensor<S>& quality_token) {
    if (patches.rank() != 3) throw ShapeError("embed: patches must be [T,N,3P^2]");
    const size_t t = patches.dim(0), n = patches.dim(1), in_dim = patches.dim(2);
    if (embed_weight.rank() != 2 || embed_weight.dim(1) != in_dim)
        throw ShapeError("embed: weight " + shape_str(embed_weight.shape()) +
                         " does not accept patch dim " + std::to_string(in_dim));
    const size_t d = embed_weight.dim(0);
    if (pos_embedding.rank() != 2 || pos_embedding.dim(0) != t * n + 1 || pos_embedding.dim(1) != d)
        throw ShapeError("embed: positional table " + shape_str(pos_embedding.shape()) +
                         " must be [" + std::to_string(t * n + 1) + "," + std::to_string(d) + "]");
    if (quality_token.rank() != 2 || quality_token.dim(0) != 1 || quality_token.dim(1) != d)
        throw ShapeError("embed: quality token must be [1," + std::to_string(d) + "]");

    auto flat = reshape(patches, {t * n, in_dim});
    auto projected = matmul(flat, transpose(embed_weight));              // [T*N, d]
    auto patch_pos = narrow(pos_embedding, 0, 1, t * n);                 // rows 1..T*N
    TokenGrid<S> out;
    out.tokens = reshape(add(projected, patch_pos), {t, n, d});
    out.quality = add(quality_token, narrow(pos_embedding, 0, 0, 1));
    out.pos_embedding_applied = true;
    return out;
}

}  // namespace vqt
