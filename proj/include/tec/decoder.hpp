// SPDX-License-Identifier: Apache-2.0
//
// Multi-target decoder: two path-specific input projections and mask tokens
// feeding one shared stack of two transformer blocks, with a feature head and
// a query/key head pair for attention-map prediction.
#pragma once

#include <cmath>
#include <vector>

#include "tec/masking.hpp"
#include "tec/vit.hpp"

namespace tec {

enum class DecoderPath { feature, attention };

struct DecoderConfig {
    std::size_t encoder_dim = 128;  // C
    std::size_t decoder_dim = 64;   // C_dec
    std::size_t decoder_heads = 4;  // heads inside the shared blocks
    std::size_t attention_heads = 4; // H of the predicted maps (= base heads)
    std::size_t num_patches = 16;   // L
    std::size_t depth = 2;
    double mlp_ratio = 4.0;

    void validate() const {
        if (decoder_dim == 0 || decoder_heads == 0 || decoder_dim % decoder_heads != 0)
            throw ConfigError("decoder_dim must be divisible by decoder_heads");
        if (attention_heads == 0 || decoder_dim % attention_heads != 0)
            throw ConfigError("decoder_dim must be divisible by the base head count");
        if (depth == 0) throw ConfigError("decoder depth must be positive");
    }
};

inline void to_json(nlohmann::json& j, const DecoderConfig& c) {
    j = {{"encoder_dim", c.encoder_dim},         {"decoder_dim", c.decoder_dim},
         {"decoder_heads", c.decoder_heads},     {"attention_heads", c.attention_heads},
         {"num_patches", c.num_patches},         {"depth", c.depth},
         {"mlp_ratio", c.mlp_ratio}};
}

inline void from_json(const nlohmann::json& j, DecoderConfig& c) {
    j.at("encoder_dim").get_to(c.encoder_dim);
    j.at("decoder_dim").get_to(c.decoder_dim);
    j.at("decoder_heads").get_to(c.decoder_heads);
    j.at("attention_heads").get_to(c.attention_heads);
    j.at("num_patches").get_to(c.num_patches);
    j.at("depth").get_to(c.depth);
    j.at("mlp_ratio").get_to(c.mlp_ratio);
}

struct Predictions {
    Tensor Z_f; // [B, L, C]
    Tensor Z_a; // [B, H, k+1, L]
};

struct MultiTargetDecoder {
    DecoderConfig config;
    Linear feature_proj;   // C -> C_dec
    Linear attention_proj; // C -> C_dec
    Tensor feature_mask_token;   // [1, C_dec]
    Tensor attention_mask_token; // [1, C_dec]
    Tensor pos_embed;            // [L+1, C_dec], row 0 is the class position
    std::vector<TransformerBlock> blocks;
    Linear feature_head; // C_dec -> C
    Linear query_head;   // C_dec -> C_dec
    Linear key_head;     // C_dec -> C_dec

    MultiTargetDecoder() = default;

    MultiTargetDecoder(const DecoderConfig& cfg, Rng& rng) : config(cfg) {
        cfg.validate();
        feature_proj = Linear(cfg.encoder_dim, cfg.decoder_dim, rng);
        attention_proj = Linear(cfg.encoder_dim, cfg.decoder_dim, rng);
        feature_mask_token = normal_param({1, cfg.decoder_dim}, 0.02, rng);
        attention_mask_token = normal_param({1, cfg.decoder_dim}, 0.02, rng);
        pos_embed = normal_param({cfg.num_patches + 1, cfg.decoder_dim}, 0.02, rng);
        for (std::size_t i = 0; i < cfg.depth; ++i)
            blocks.emplace_back(cfg.decoder_dim, cfg.decoder_heads, cfg.mlp_ratio, rng);
        feature_head = Linear(cfg.decoder_dim, cfg.encoder_dim, rng);
        query_head = Linear(cfg.decoder_dim, cfg.decoder_dim, rng);
        key_head = Linear(cfg.decoder_dim, cfg.decoder_dim, rng);
    }

    void collect(const std::string& prefix, NamedTensors& out) const {
        feature_proj.collect(prefix + "feature_proj.", out);
        attention_proj.collect(prefix + "attention_proj.", out);
        out.emplace_back(prefix + "feature_mask_token", feature_mask_token);
        out.emplace_back(prefix + "attention_mask_token", attention_mask_token);
        out.emplace_back(prefix + "pos_embed", pos_embed);
        for (std::size_t i = 0; i < blocks.size(); ++i)
            blocks[i].collect(prefix + "blocks." + std::to_string(i) + ".", out);
        feature_head.collect(prefix + "feature_head.", out);
        query_head.collect(prefix + "query_head.", out);
        key_head.collect(prefix + "key_head.", out);
    }
};

/// Projects Z_e [B, V+1, C] for the chosen path, scatters visible rows back to
/// their patch positions, fills masked positions with the path's mask token
/// and adds positional embeddings. Output [B, L+1, C_dec], class at row 0.
inline Tensor prepare_decoder_input(const MultiTargetDecoder& dec, const Tensor& Z_e,
                                    const std::vector<MaskSpec>& masks, DecoderPath path) {
    const std::size_t b = Z_e.size(0), rows = Z_e.size(1), l = dec.config.num_patches;
    const std::size_t cd = dec.config.decoder_dim;
    if (masks.size() != b) throw DimensionError("prepare_decoder_input: one mask per image required");
    for (const auto& m : masks)
        if (m.L != l || m.visible_count() + 1 != rows)
            throw DimensionError("prepare_decoder_input: mask inconsistent with Z_e rows");
    const Linear& proj = path == DecoderPath::feature ? dec.feature_proj : dec.attention_proj;
    const Tensor& token = path == DecoderPath::feature ? dec.feature_mask_token : dec.attention_mask_token;
    if (cd != token.numel()) throw DimensionError("prepare_decoder_input: mask token width mismatch");
    return add(fill_masked(proj(Z_e), token, masks), dec.pos_embed);
}

/// Shared blocks over a prepared input; shape preserved.
inline Tensor decode(const MultiTargetDecoder& dec, const Tensor& input) {
    Tensor x = input;
    for (const auto& blk : dec.blocks) x = blk(x).out;
    return x;
}

/// Z_f [B, L, C]: class row dropped, feature head applied.
inline Tensor predict_features(const MultiTargetDecoder& dec, const Tensor& dec_out) {
    return dec.feature_head(slice(dec_out, 1, 1, dec_out.size(1)));
}

/// Z_a [B, H, k+1, L]. Queries are the selected rows of Z_q followed by the
/// decoder class output; keys are Z_k over all L patches.
inline Tensor predict_attention(const MultiTargetDecoder& dec, const Tensor& dec_out,
                                const std::vector<std::vector<std::size_t>>& selected, double tau_pred = 1.0) {
    const std::size_t b = dec_out.size(0), l = dec_out.size(1) - 1, cd = dec_out.size(2);
    const std::size_t h = dec.config.attention_heads;
    if (selected.size() != b) throw DimensionError("predict_attention: one selection per image required");
    const std::size_t k = selected.front().size();
    std::vector<std::size_t> rows;
    for (std::size_t i = 0; i < b; ++i) {
        if (selected[i].size() != k) throw DimensionError("predict_attention: selection sizes differ");
        for (auto s : selected[i]) {
            if (s >= l) throw DimensionError("predict_attention: selected index out of range");
            rows.push_back(i * l + s);
        }
    }
    Tensor patches = slice(dec_out, 1, 1, l + 1);
    Tensor z_q = dec.query_head(patches);
    Tensor z_k = dec.key_head(patches);
    Tensor z_q_sel = reshape(index_select(reshape(z_q, {b * l, cd}), rows), {b, k, cd});
    Tensor cls = slice(dec_out, 1, 0, 1);
    Tensor queries = concat({z_q_sel, cls}, 1); // [B, k+1, C_dec]
    const double s = 1.0 / std::sqrt(static_cast<double>(cd / h));
    Tensor logits = scale(matmul_nt(split_heads(queries, h), split_heads(z_k, h)), s);
    return softmax(logits, -1, tau_pred);
}

} // namespace tec
