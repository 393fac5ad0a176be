// SPDX-License-Identifier: Apache-2.0
//
// Minimal ViT encoder: linear patch embedding, learnable class token and
// positional embeddings, pre-norm blocks. No final norm; each block output
// (class token first) is exposed to callers.
#pragma once

#include <json.hpp>

#include <cmath>
#include <optional>
#include <vector>

#include "tec/nn.hpp"

namespace tec {

struct ViTConfig {
    std::size_t image_size = 32;
    std::size_t patch_size = 8;
    std::size_t channels = 3;
    std::size_t depth = 6;
    std::size_t heads = 4;
    std::size_t embed_dim = 128;
    double mlp_ratio = 4.0;

    std::size_t grid() const { return image_size / patch_size; }
    std::size_t num_patches() const { return grid() * grid(); }
    std::size_t patch_dim() const { return patch_size * patch_size * channels; }
    std::size_t head_dim() const { return embed_dim / heads; }

    void validate() const {
        if (patch_size == 0 || image_size == 0 || image_size % patch_size != 0)
            throw ConfigError("image_size must be a positive multiple of patch_size");
        if (depth < 1) throw ConfigError("depth must be >= 1");
        if (heads == 0 || embed_dim % heads != 0) throw ConfigError("embed_dim must be divisible by heads");
        if (channels == 0) throw ConfigError("channels must be >= 1");
        if (!(mlp_ratio > 0.0)) throw ConfigError("mlp_ratio must be positive");
    }

    bool operator==(const ViTConfig&) const = default;
};

inline void to_json(nlohmann::json& j, const ViTConfig& c) {
    j = {{"image_size", c.image_size}, {"patch_size", c.patch_size}, {"channels", c.channels},
         {"depth", c.depth},           {"heads", c.heads},           {"embed_dim", c.embed_dim},
         {"mlp_ratio", c.mlp_ratio}};
}

inline void from_json(const nlohmann::json& j, ViTConfig& c) {
    j.at("image_size").get_to(c.image_size);
    j.at("patch_size").get_to(c.patch_size);
    j.at("channels").get_to(c.channels);
    j.at("depth").get_to(c.depth);
    j.at("heads").get_to(c.heads);
    j.at("embed_dim").get_to(c.embed_dim);
    j.at("mlp_ratio").get_to(c.mlp_ratio);
}

/// Per-image visible patch indices, sorted; every image keeps the same count.
using VisibleIndex = std::vector<std::vector<std::size_t>>;

/// channels x S x S image -> L x (P*P*channels) tokens. Patches are in
/// row-major grid order; within a patch the layout is (row, col, channel).
inline Tensor patchify(const Tensor& image, std::size_t patch) {
    if (image.dim() != 3 || image.size(1) != image.size(2))
        throw DimensionError("patchify expects a square channels x S x S image, got " + shape_str(image.shape()));
    const std::size_t c = image.size(0), s = image.size(1);
    if (patch == 0 || s % patch != 0) throw DimensionError("image size not divisible by patch size");
    const std::size_t g = s / patch, d = patch * patch * c;
    std::vector<double> out(g * g * d);
    const auto& px = image.values();
    for (std::size_t gy = 0; gy < g; ++gy)
        for (std::size_t gx = 0; gx < g; ++gx)
            for (std::size_t py = 0; py < patch; ++py)
                for (std::size_t pxi = 0; pxi < patch; ++pxi)
                    for (std::size_t ch = 0; ch < c; ++ch)
                        out[(gy * g + gx) * d + (py * patch + pxi) * c + ch] =
                            px[ch * s * s + (gy * patch + py) * s + gx * patch + pxi];
    return Tensor({g * g, d}, std::move(out));
}

inline Tensor unpatchify(const Tensor& tokens, std::size_t patch, std::size_t channels) {
    const std::size_t l = tokens.size(0);
    const auto g = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(l))));
    if (g * g != l || tokens.size(1) != patch * patch * channels)
        throw DimensionError("unpatchify: token matrix " + shape_str(tokens.shape()) + " is not a square grid");
    const std::size_t s = g * patch;
    std::vector<double> out(channels * s * s);
    const auto& tv = tokens.values();
    const std::size_t d = tokens.size(1);
    for (std::size_t gy = 0; gy < g; ++gy)
        for (std::size_t gx = 0; gx < g; ++gx)
            for (std::size_t py = 0; py < patch; ++py)
                for (std::size_t pxi = 0; pxi < patch; ++pxi)
                    for (std::size_t ch = 0; ch < channels; ++ch)
                        out[ch * s * s + (gy * patch + py) * s + gx * patch + pxi] =
                            tv[(gy * g + gx) * d + (py * patch + pxi) * channels + ch];
    return Tensor({channels, s, s}, std::move(out));
}

/// Stacks patchified images into [B, L, d].
inline Tensor patchify_batch(const std::vector<Tensor>& images, std::size_t patch) {
    if (images.empty()) throw DimensionError("empty image batch");
    std::vector<double> out;
    Shape one;
    for (const auto& img : images) {
        Tensor t = patchify(img, patch);
        if (one.empty()) one = t.shape();
        else if (t.shape() != one) throw DimensionError("images in a batch differ in size");
        out.insert(out.end(), t.values().begin(), t.values().end());
    }
    return Tensor({images.size(), one[0], one[1]}, std::move(out));
}

struct BlockOutputs {
    std::vector<Tensor> X; // D tensors, each [B, T, C], class token at row 0
};

struct AttentionRecord {
    std::vector<Tensor> probs;  // D tensors [B, H, T, T]
    std::vector<Tensor> logits; // D tensors [B, H, T, T]
};

struct EncodeResult {
    BlockOutputs blocks;
    AttentionRecord attention;
};

class ViT {
public:
    ViTConfig config;
    Linear patch_embed;
    Tensor cls_token; // [1, C]
    Tensor pos_embed; // [L, C], patch positions only
    std::vector<TransformerBlock> blocks;

    ViT() = default;

    ViT(const ViTConfig& cfg, Rng& rng) : config(cfg) {
        cfg.validate();
        patch_embed = Linear(cfg.patch_dim(), cfg.embed_dim, rng);
        cls_token = normal_param({1, cfg.embed_dim}, 0.02, rng);
        pos_embed = normal_param({cfg.num_patches(), cfg.embed_dim}, 0.02, rng);
        for (std::size_t i = 0; i < cfg.depth; ++i)
            blocks.emplace_back(cfg.embed_dim, cfg.heads, cfg.mlp_ratio, rng);
    }

    /// Runs the blocks over `tokens` [B, L, patch_dim]. When `visible` is
    /// given only those patches (per image) enter the encoder; their
    /// positional embeddings are gathered by the same indices.
    EncodeResult encode(const Tensor& tokens, const Tensor& class_token,
                        const VisibleIndex* visible = nullptr) const {
        if (tokens.dim() != 3 || tokens.size(2) != config.patch_dim() || tokens.size(1) != config.num_patches())
            throw DimensionError("encode: expected tokens [B, " + std::to_string(config.num_patches()) + ", " +
                                 std::to_string(config.patch_dim()) + "], got " + shape_str(tokens.shape()));
        if (class_token.numel() != config.embed_dim) throw DimensionError("encode: class token width mismatch");
        const std::size_t b = tokens.size(0), l = tokens.size(1), c = config.embed_dim;

        std::vector<std::size_t> rows, pos;
        std::size_t v = l;
        if (visible) {
            if (visible->size() != b) throw DimensionError("encode: one visible index list per image required");
            v = visible->front().size();
            if (v == 0) throw DimensionError("encode: no visible patches");
            for (std::size_t i = 0; i < b; ++i) {
                if ((*visible)[i].size() != v) throw DimensionError("encode: visible counts differ across batch");
                for (auto p : (*visible)[i]) {
                    if (p >= l) throw DimensionError("encode: visible index out of range");
                    rows.push_back(i * l + p);
                    pos.push_back(p);
                }
            }
        } else {
            for (std::size_t i = 0; i < b; ++i)
                for (std::size_t p = 0; p < l; ++p) {
                    rows.push_back(i * l + p);
                    pos.push_back(p);
                }
        }

        Tensor flat = reshape(tokens, {b * l, config.patch_dim()});
        Tensor emb = add(patch_embed(index_select(flat, rows)), index_select(pos_embed, pos));
        Tensor x = concat({repeat_batch(reshape(class_token, {1, c}), b), reshape(emb, {b, v, c})}, 1);

        EncodeResult result;
        for (const auto& blk : blocks) {
            AttentionOutput o = blk(x);
            x = o.out;
            result.blocks.X.push_back(x);
            result.attention.probs.push_back(o.probs);
            result.attention.logits.push_back(o.logits);
        }
        return result;
    }

    EncodeResult encode(const Tensor& tokens, const VisibleIndex* visible = nullptr) const {
        return encode(tokens, cls_token, visible);
    }

    NamedTensors named_parameters() const {
        NamedTensors out;
        patch_embed.collect("patch_embed.", out);
        out.emplace_back("cls_token", cls_token);
        out.emplace_back("pos_embed", pos_embed);
        for (std::size_t i = 0; i < blocks.size(); ++i) blocks[i].collect("blocks." + std::to_string(i) + ".", out);
        return out;
    }

    /// Independent deep copy.
    ViT clone() const {
        Rng scratch(0);
        ViT copy(config, scratch);
        auto dst = copy.named_parameters();
        copy_parameters(named_parameters(), dst);
        return copy;
    }
};

/// Class-query attention over patch keys from post-softmax maps [B, H, T, T]:
/// the class-to-class entry is dropped and each head's row renormalized.
inline Tensor class_patch_attention(const Tensor& probs) {
    const std::size_t b = probs.size(0), h = probs.size(1), t = probs.size(2), l = t - 1;
    std::vector<double> out(b * h * l);
    const auto& pv = probs.values();
    for (std::size_t i = 0; i < b * h; ++i) {
        const double* row = pv.data() + i * t * t; // query row 0
        double z = 0.0;
        for (std::size_t j = 1; j < t; ++j) z += row[j];
        for (std::size_t j = 1; j < t; ++j) out[i * l + j - 1] = row[j] / z;
    }
    return Tensor({b, h, l}, std::move(out));
}

/// A_c [B, H, L] of the last block for full (unmasked) images.
inline Tensor class_attention_last_block(const ViT& model, const Tensor& tokens) {
    NoGradGuard no_grad;
    EncodeResult r = model.encode(tokens);
    return class_patch_attention(r.attention.probs.back());
}

} // namespace tec
