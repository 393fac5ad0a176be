// SPDX-License-Identifier: Apache-2.0
//
// Training loops: the TEC step (frozen base targets -> masked new encoder ->
// adapters -> shared decoder -> losses -> AdamW), the pixel-reconstruction
// pretrainer that bootstraps a toy base encoder, chained rounds, and
// conversion of models to and from checkpoints.
#pragma once

#include <algorithm>
#include <cstdlib>
#include <functional>
#include <memory>
#include <string>
#include <thread>
#include <vector>

#include "tec/adapters.hpp"
#include "tec/checkpoint.hpp"
#include "tec/data.hpp"
#include "tec/decoder.hpp"
#include "tec/grad_check.hpp"
#include "tec/losses.hpp"
#include "tec/masking.hpp"
#include "tec/optim.hpp"
#include "tec/targets.hpp"
#include "tec/vit.hpp"

namespace tec {

// -------------------------------------------------------------------- configs

struct TrainConfig {
    double base_lr = 1.5e-4;
    double min_lr = 0.0;
    double weight_decay = 0.05;
    double beta1 = 0.9;
    double beta2 = 0.95;
    std::size_t batch_size = 64;
    std::size_t warmup_epochs = 2;
    std::size_t total_epochs = 20;
    std::size_t max_steps = 0; // when nonzero, overrides total_epochs * steps_per_epoch
    std::uint64_t seed = 0;
    double lambda_att = 1.0;
    double mask_ratio = 0.75;
    bool augment = true;

    /// Linear scaling rule: base_lr * batch / 256.
    double peak_lr() const { return base_lr * static_cast<double>(batch_size) / 256.0; }

    void validate() const {
        if (batch_size == 0) throw ConfigError("batch_size must be positive");
        if (total_epochs == 0 && max_steps == 0) throw ConfigError("training length must be positive");
        if (max_steps == 0 && warmup_epochs >= total_epochs) throw ConfigError("warmup_epochs must be < total_epochs");
        if (!(base_lr > 0.0) || min_lr < 0.0) throw ConfigError("learning rates must be positive");
        if (!(lambda_att >= 0.0)) throw ConfigError("lambda_att must be nonnegative");
        masked_count_for(16, mask_ratio); // range check
    }

    std::size_t steps_per_epoch(std::size_t corpus_size) const {
        return (corpus_size + batch_size - 1) / batch_size;
    }

    std::size_t total_steps(std::size_t corpus_size) const {
        return max_steps ? max_steps : total_epochs * steps_per_epoch(corpus_size);
    }

    LrSchedule schedule(std::size_t corpus_size) const {
        LrSchedule s;
        s.peak_lr = peak_lr();
        s.min_lr = min_lr;
        s.total_steps = total_steps(corpus_size);
        s.warmup_steps = std::min(warmup_epochs * steps_per_epoch(corpus_size), s.total_steps - 1);
        return s;
    }

    AdamWConfig adamw() const { return {beta1, beta2, 1e-8, weight_decay}; }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
    j = {{"base_lr", c.base_lr},
         {"min_lr", c.min_lr},
         {"weight_decay", c.weight_decay},
         {"beta1", c.beta1},
         {"beta2", c.beta2},
         {"batch_size", c.batch_size},
         {"warmup_epochs", c.warmup_epochs},
         {"total_epochs", c.total_epochs},
         {"max_steps", c.max_steps},
         {"seed", c.seed},
         {"lambda_att", c.lambda_att},
         {"mask_ratio", c.mask_ratio},
         {"augment", c.augment}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
    j.at("base_lr").get_to(c.base_lr);
    j.at("min_lr").get_to(c.min_lr);
    j.at("weight_decay").get_to(c.weight_decay);
    j.at("beta1").get_to(c.beta1);
    j.at("beta2").get_to(c.beta2);
    j.at("batch_size").get_to(c.batch_size);
    j.at("warmup_epochs").get_to(c.warmup_epochs);
    j.at("total_epochs").get_to(c.total_epochs);
    j.at("max_steps").get_to(c.max_steps);
    j.at("seed").get_to(c.seed);
    j.at("lambda_att").get_to(c.lambda_att);
    j.at("mask_ratio").get_to(c.mask_ratio);
    j.at("augment").get_to(c.augment);
}

/// lr at `step` for a corpus of `corpus_size` images.
inline double lr_at(std::size_t step, const TrainConfig& cfg, std::size_t corpus_size) {
    return cfg.schedule(corpus_size).at(step);
}

struct TecConfig {
    ViTConfig encoder;
    std::size_t group_size = 3;
    std::size_t decoder_dim = 64;
    std::size_t decoder_heads = 4;
    std::size_t decoder_depth = 2;
    TargetConfig targets;

    void validate() const {
        encoder.validate();
        if (group_size == 0) throw ConfigError("group_size must be positive");
        targets.validate(encoder.num_patches());
    }

    DecoderConfig decoder(std::size_t base_heads) const {
        DecoderConfig d;
        d.encoder_dim = encoder.embed_dim;
        d.decoder_dim = decoder_dim;
        d.decoder_heads = decoder_heads;
        d.attention_heads = base_heads;
        d.num_patches = encoder.num_patches();
        d.depth = decoder_depth;
        d.mlp_ratio = encoder.mlp_ratio;
        return d;
    }
};

inline void to_json(nlohmann::json& j, const TecConfig& c) {
    j = {{"encoder", c.encoder},
         {"group_size", c.group_size},
         {"decoder_dim", c.decoder_dim},
         {"decoder_heads", c.decoder_heads},
         {"decoder_depth", c.decoder_depth},
         {"targets", c.targets}};
}

inline void from_json(const nlohmann::json& j, TecConfig& c) {
    j.at("encoder").get_to(c.encoder);
    j.at("group_size").get_to(c.group_size);
    j.at("decoder_dim").get_to(c.decoder_dim);
    j.at("decoder_heads").get_to(c.decoder_heads);
    j.at("decoder_depth").get_to(c.decoder_depth);
    j.at("targets").get_to(c.targets);
}

/// Worker cap from TEC_THREADS (default 1).
inline std::size_t worker_threads() {
    if (const char* env = std::getenv("TEC_THREADS")) {
        const long v = std::strtol(env, nullptr, 10);
        if (v > 0) return static_cast<std::size_t>(v);
    }
    return 1;
}

// ------------------------------------------------------------------ TEC model

struct TecModel {
    ViT encoder;
    InputAdapter input_adapter;
    EncoderAdapterBank adapters;
    MultiTargetDecoder decoder;

    TecModel() = default;

    TecModel(const TecConfig& cfg, std::size_t base_heads, Rng& rng) {
        cfg.validate();
        const std::size_t c = cfg.encoder.embed_dim;
        encoder = ViT(cfg.encoder, rng);
        input_adapter = InputAdapter(c, c / 2, rng);
        adapters = EncoderAdapterBank(cfg.encoder.depth, c, cfg.group_size, c / 2, rng);
        decoder = MultiTargetDecoder(cfg.decoder(base_heads), rng);
    }

    /// T' = MLP(T) for the encoder's class token.
    Tensor class_token() const { return enhance_class_token(input_adapter, encoder.cls_token); }

    NamedTensors named_parameters() const {
        NamedTensors out;
        for (auto& [n, t] : encoder.named_parameters()) out.emplace_back("encoder." + n, t);
        input_adapter.collect("input_adapter.", out);
        adapters.collect("adapters.", out);
        decoder.collect("decoder.", out);
        return out;
    }

    NamedTensors adapter_parameters() const {
        NamedTensors out;
        input_adapter.collect("input_adapter.", out);
        adapters.collect("adapters.", out);
        return out;
    }
};

/// Plain encoder for downstream use: a copy of the encoder whose class token
/// is the folded input-adapter output. Adapters and decoder are dropped.
inline ViT strip_adapters(const TecModel& model) {
    ViT out = model.encoder.clone();
    Tensor folded = fold_input_adapter(model.input_adapter, model.encoder.cls_token);
    auto dst = out.cls_token.mutable_data();
    std::copy(folded.data().begin(), folded.data().end(), dst.begin());
    return out;
}

inline void freeze(ViT& model) {
    for (auto& [_, t] : model.named_parameters()) t.set_requires_grad(false);
}

struct TecForward {
    Tensor l_fea;
    Tensor l_att;
    Tensor total;
    Tensor Z_f;
    Tensor Z_a;
    AdapterOutput adapted;
    BlockOutputs blocks;
};

/// Full TEC forward for a batch of token matrices [B, L, d] under `masks`,
/// supervised by precomputed base targets.
inline TecForward tec_forward(const TecModel& model, const BaseTargets& targets, const Tensor& tokens,
                              const std::vector<MaskSpec>& masks, double lambda_att) {
    const VisibleIndex visible = visible_lists(masks);
    TecForward f;
    EncodeResult enc = model.encoder.encode(tokens, model.class_token(), &visible);
    f.blocks = enc.blocks;
    f.adapted = adapt(model.adapters, enc.blocks);
    const Tensor& z_e = f.adapted.Z_e;
    Tensor dec_f = decode(model.decoder, prepare_decoder_input(model.decoder, z_e, masks, DecoderPath::feature));
    Tensor dec_a = decode(model.decoder, prepare_decoder_input(model.decoder, z_e, masks, DecoderPath::attention));
    f.Z_f = predict_features(model.decoder, dec_f);
    f.Z_a = predict_attention(model.decoder, dec_a, targets.selected);
    f.l_fea = feature_loss(targets.Y_f, f.Z_f, masks);
    f.l_att = attention_loss(targets.A_s, f.Z_a);
    f.total = total_loss(f.l_fea, f.l_att, lambda_att);
    return f;
}

/// Images per target-computation chunk. Chunking is fixed so results do not
/// depend on how many workers share the chunks.
inline constexpr std::size_t kTargetChunk = 16;

/// Base targets for a batch, computed in fixed chunks of kTargetChunk images
/// spread over up to `threads` workers and joined in image order.
inline BaseTargets compute_targets_parallel(const ViT& base, const Tensor& tokens, const TargetConfig& cfg,
                                            std::size_t threads) {
    const std::size_t b = tokens.size(0);
    const std::size_t chunks = (b + kTargetChunk - 1) / kTargetChunk;
    if (chunks == 1) return compute_targets(base, tokens, cfg);
    threads = std::clamp<std::size_t>(threads, 1, chunks);
    std::vector<BaseTargets> parts(chunks);
    auto work = [&](std::size_t t) {
        NoGradGuard no_grad;
        for (std::size_t c = t; c < chunks; c += threads)
            parts[c] = compute_targets(base, slice(tokens, 0, c * kTargetChunk, std::min(b, (c + 1) * kTargetChunk)),
                                       cfg);
    };
    if (threads == 1) {
        work(0);
    } else {
        std::vector<std::jthread> pool;
        for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(work, t);
    }
    BaseTargets out;
    std::vector<Tensor> y, yf, as, ac;
    for (auto& p : parts) {
        y.push_back(p.Y);
        yf.push_back(p.Y_f);
        as.push_back(p.A_s);
        ac.push_back(p.A_c);
        out.selected.insert(out.selected.end(), p.selected.begin(), p.selected.end());
    }
    NoGradGuard no_grad;
    out.Y = concat(y, 0);
    out.Y_f = concat(yf, 0);
    out.A_s = concat(as, 0);
    out.A_c = concat(ac, 0);
    return out;
}

/// Model input: patchified images shifted and scaled by fixed corpus-level
/// pixel statistics so patch embeddings start centred.
inline constexpr double kPixelMean = 0.45;
inline constexpr double kPixelStd = 0.25;

inline Tensor model_tokens(const std::vector<Tensor>& images, std::size_t patch) {
    return scale(add_scalar(patchify_batch(images, patch), -kPixelMean), 1.0 / kPixelStd);
}

/// Masks for one step; image j of step s uses seed derive(seed, s) ^ j.
inline std::vector<MaskSpec> step_masks(std::size_t L, double ratio, std::uint64_t seed, std::size_t step,
                                        std::size_t batch) {
    const std::uint64_t step_seed = derive_seed(seed, 0x6d61736bULL + step);
    std::vector<MaskSpec> masks;
    masks.reserve(batch);
    for (std::size_t j = 0; j < batch; ++j) masks.push_back(sample_mask(L, ratio, step_seed ^ j));
    return masks;
}

/// Crop-and-resize per image with a per-(step, image) seed; identity when disabled.
inline std::vector<Tensor> augment_batch(const std::vector<Tensor>& images, const TrainConfig& cfg,
                                         std::size_t step) {
    if (!cfg.augment) return images;
    std::vector<Tensor> out;
    out.reserve(images.size());
    const std::uint64_t step_seed = derive_seed(cfg.seed, 0x61756775ULL + step);
    for (std::size_t j = 0; j < images.size(); ++j) {
        Rng rng(step_seed ^ j);
        out.push_back(random_resized_crop(images[j], rng));
    }
    return out;
}

/// One optimization step. The base only produces targets (no gradients);
/// the update touches the new encoder, adapters and decoder.
inline LossReport train_step(TecModel& model, AdamW& opt, const ViT& base, const std::vector<Tensor>& batch,
                             const TrainConfig& cfg, const TargetConfig& tcfg, std::size_t step, double lr) {
    if (batch.empty()) throw ConfigError("train_step: empty batch");
    const std::size_t patch = model.encoder.config.patch_size, l = model.encoder.config.num_patches();
    std::vector<Tensor> images = augment_batch(batch, cfg, step);
    std::vector<MaskSpec> masks = step_masks(l, cfg.mask_ratio, cfg.seed, step, batch.size());
    LossReport rep;
    rep.lambda_att = cfg.lambda_att;
    try {
        Tensor tokens = model_tokens(images, patch);
        BaseTargets targets = compute_targets_parallel(base, tokens, tcfg, worker_threads());
        TecForward f = tec_forward(model, targets, tokens, masks, cfg.lambda_att);
        rep.l_fea = f.l_fea.item();
        rep.l_att = f.l_att.item();
        rep.total = f.total.item();
        f.total.backward();
    } catch (const NumericError& e) {
        // Re-run image by image to name the offending batch entry.
        std::string where = "unknown";
        NoGradGuard no_grad;
        for (std::size_t j = 0; j < batch.size(); ++j) {
            try {
                Tensor one = model_tokens({images[j]}, patch);
                BaseTargets t = compute_targets(base, one, tcfg);
                tec_forward(model, t, one, {masks[j]}, cfg.lambda_att);
            } catch (const NumericError&) {
                where = std::to_string(j);
                break;
            }
        }
        opt.zero_grad();
        throw NumericError("non-finite loss at step " + std::to_string(step) + ", batch index " + where + ": " +
                           e.what());
    }
    for (std::size_t i = 0; i < masks.size(); ++i) rep.masked_count += masks[i].masked_count();
    opt.step(lr);
    opt.zero_grad();
    return rep;
}

using StepCallback = std::function<void(std::size_t step, const LossReport&, double lr)>;

/// Owns the trainable model, optimizer and step counter for a TEC run.
class TecTrainer {
public:
    TecTrainer(const TecConfig& tcfg, const TrainConfig& cfg, const ViT& base, std::uint64_t init_seed)
        : tec_cfg_(tcfg), cfg_(cfg), base_(base.clone()) {
        tcfg.validate();
        cfg.validate();
        if (base_.config.num_patches() != tcfg.encoder.num_patches() ||
            base_.config.patch_size != tcfg.encoder.patch_size || base_.config.channels != tcfg.encoder.channels)
            throw ConfigError("base and new encoder must share the patch grid");
        freeze(base_);
        Rng rng(init_seed);
        model_ = TecModel(tcfg, base_.config.heads, rng);
        opt_ = std::make_unique<AdamW>(model_.named_parameters(), cfg.adamw());
    }

    /// Trains over `images` for the configured number of steps.
    void run(const std::vector<Tensor>& images, const StepCallback& cb = {}) {
        const LrSchedule sched = cfg_.schedule(images.size());
        const std::size_t spe = cfg_.steps_per_epoch(images.size());
        while (step_ < sched.total_steps) {
            const std::size_t epoch = step_ / spe;
            const auto batches = epoch_batches(images.size(), cfg_.batch_size, epoch, cfg_.seed);
            const auto& idx = batches[step_ % spe];
            std::vector<Tensor> batch;
            for (auto i : idx) batch.push_back(images[i]);
            const double lr = sched.at(step_);
            LossReport rep = train_step(model_, *opt_, base_, batch, cfg_, tec_cfg_.targets, step_, lr);
            if (cb) cb(step_, rep, lr);
            ++step_;
        }
    }

    const TecModel& model() const { return model_; }
    TecModel& model() { return model_; }
    const ViT& base() const { return base_; }
    std::size_t step() const { return step_; }
    const TecConfig& tec_config() const { return tec_cfg_; }
    const TrainConfig& train_config() const { return cfg_; }

private:
    TecConfig tec_cfg_;
    TrainConfig cfg_;
    ViT base_;
    TecModel model_;
    std::unique_ptr<AdamW> opt_;
    std::size_t step_ = 0;
};

// -------------------------------------------------------------- checkpoints

inline Checkpoint encoder_checkpoint(const ViT& enc, std::uint64_t step = 0, const std::string& rng_state = {}) {
    Checkpoint ck;
    ck.kind = "vit_encoder";
    ck.config = {{"vit", enc.config}};
    ck.step = step;
    ck.rng_state = rng_state;
    ck.add("", enc.named_parameters());
    return ck;
}

inline ViT load_encoder(const Checkpoint& ck) {
    if (ck.kind != "vit_encoder") throw IngestionError("checkpoint kind '" + ck.kind + "' is not an encoder");
    const auto cfg = ck.config.at("vit").get<ViTConfig>();
    Rng scratch(0);
    ViT enc(cfg, scratch);
    auto params = enc.named_parameters();
    ck.restore("", params);
    return enc;
}

inline Checkpoint tec_state_checkpoint(const TecModel& model, const TecConfig& tcfg, const TrainConfig& cfg,
                                       std::uint64_t step, const std::string& rng_state = {}) {
    Checkpoint ck;
    ck.kind = "tec_state";
    ck.config = {{"tec", tcfg}, {"train", cfg}, {"base_heads", model.decoder.config.attention_heads}};
    ck.step = step;
    ck.rng_state = rng_state;
    ck.add("", model.named_parameters());
    return ck;
}

inline TecModel load_tec_state(const Checkpoint& ck) {
    if (ck.kind != "tec_state") throw IngestionError("checkpoint kind '" + ck.kind + "' is not a TEC state");
    const auto tcfg = ck.config.at("tec").get<TecConfig>();
    Rng scratch(0);
    TecModel model(tcfg, ck.config.at("base_heads").get<std::size_t>(), scratch);
    auto params = model.named_parameters();
    ck.restore("", params);
    return model;
}

// ------------------------------------------------------- pixel MIM base model

struct PixelDecoder {
    LayerNorm norm_in;
    Linear embed;
    Tensor mask_token;
    Tensor pos_embed; // [L+1, C_dec]
    std::vector<TransformerBlock> blocks;
    LayerNorm norm_out;
    Linear pred; // C_dec -> patch_dim

    PixelDecoder() = default;
    PixelDecoder(const ViTConfig& enc, std::size_t dim, std::size_t heads, std::size_t depth, Rng& rng)
        : norm_in(enc.embed_dim), embed(enc.embed_dim, dim, rng) {
        mask_token = normal_param({1, dim}, 0.02, rng);
        pos_embed = normal_param({enc.num_patches() + 1, dim}, 0.02, rng);
        for (std::size_t i = 0; i < depth; ++i) blocks.emplace_back(dim, heads, enc.mlp_ratio, rng);
        norm_out = LayerNorm(dim);
        pred = Linear(dim, enc.patch_dim(), rng);
    }

    void collect(const std::string& prefix, NamedTensors& out) const {
        norm_in.collect(prefix + "norm_in.", out);
        embed.collect(prefix + "embed.", out);
        out.emplace_back(prefix + "mask_token", mask_token);
        out.emplace_back(prefix + "pos_embed", pos_embed);
        for (std::size_t i = 0; i < blocks.size(); ++i)
            blocks[i].collect(prefix + "blocks." + std::to_string(i) + ".", out);
        norm_out.collect(prefix + "norm_out.", out);
        pred.collect(prefix + "pred.", out);
    }
};

/// Per-patch standardized pixels (mean/var over each token row).
inline Tensor normalized_pixel_targets(const Tensor& tokens) {
    NoGradGuard no_grad;
    return layer_norm(tokens.detach(), 1e-6);
}

/// Masked-patch MSE against per-patch-normalized pixels.
inline Tensor mim_loss(const ViT& enc, const PixelDecoder& dec, const Tensor& tokens,
                       const std::vector<MaskSpec>& masks) {
    const VisibleIndex visible = visible_lists(masks);
    EncodeResult r = enc.encode(tokens, &visible);
    Tensor x = fill_masked(dec.embed(dec.norm_in(r.blocks.X.back())), dec.mask_token, masks);
    x = add(x, dec.pos_embed);
    for (const auto& b : dec.blocks) x = b(x).out;
    Tensor pred = dec.pred(dec.norm_out(slice(x, 1, 1, x.size(1))));
    return feature_loss(normalized_pixel_targets(tokens), pred, masks);
}

struct MimConfig {
    ViTConfig encoder;
    std::size_t decoder_dim = 64;
    std::size_t decoder_heads = 4;
    std::size_t decoder_depth = 2;
};

/// Trains a ViT by masked pixel reconstruction and returns the encoder
/// (the pixel decoder is discarded). `cb` receives (step, loss, lr) with the
/// pixel loss in LossReport::l_fea and LossReport::total.
inline ViT pretrain_base_mim(const MimConfig& mcfg, const TrainConfig& cfg, const std::vector<Tensor>& images,
                             const StepCallback& cb = {}) {
    cfg.validate();
    mcfg.encoder.validate();
    Rng rng(derive_seed(cfg.seed, 0x626173ULL));
    ViT enc(mcfg.encoder, rng);
    PixelDecoder dec(mcfg.encoder, mcfg.decoder_dim, mcfg.decoder_heads, mcfg.decoder_depth, rng);
    NamedTensors params;
    for (auto& [n, t] : enc.named_parameters()) params.emplace_back("encoder." + n, t);
    dec.collect("decoder.", params);
    AdamW opt(params, cfg.adamw());

    const LrSchedule sched = cfg.schedule(images.size());
    const std::size_t spe = cfg.steps_per_epoch(images.size()), l = mcfg.encoder.num_patches();
    for (std::size_t step = 0; step < sched.total_steps; ++step) {
        const auto batches = epoch_batches(images.size(), cfg.batch_size, step / spe, cfg.seed);
        std::vector<Tensor> batch;
        for (auto i : batches[step % spe]) batch.push_back(images[i]);
        Tensor tokens = model_tokens(augment_batch(batch, cfg, step), mcfg.encoder.patch_size);
        auto masks = step_masks(l, cfg.mask_ratio, cfg.seed, step, batch.size());
        LossReport rep;
        try {
            Tensor loss = mim_loss(enc, dec, tokens, masks);
            rep.l_fea = rep.total = loss.item();
            loss.backward();
        } catch (const NumericError& e) {
            throw NumericError("non-finite pixel loss at step " + std::to_string(step) + ": " + e.what());
        }
        const double lr = sched.at(step);
        opt.step(lr);
        opt.zero_grad();
        if (cb) cb(step, rep, lr);
    }
    return enc;
}

// ------------------------------------------------------------------ chaining

/// One TEC round using `prev` (a stripped encoder) as the frozen base. The
/// new model is freshly initialized from a round-specific RNG stream.
inline ViT chain_round(const ViT& prev, const TecConfig& tcfg, const TrainConfig& cfg,
                       const std::vector<Tensor>& images, std::size_t round, const StepCallback& cb = {},
                       TecModel* full_state = nullptr) {
    TecTrainer trainer(tcfg, cfg, prev, derive_seed(cfg.seed, 0x636861696eULL + round));
    trainer.run(images, cb);
    if (full_state) *full_state = trainer.model();
    return strip_adapters(trainer.model());
}

inline std::vector<Tensor> corpus_pixels(const Corpus& corpus) {
    std::vector<Tensor> out;
    out.reserve(corpus.size());
    for (const auto& r : corpus) out.push_back(r.pixels);
    return out;
}

} // namespace tec

namespace tec {

/// Finite-difference check of the full TEC loss on a small configuration
/// (depth-2 encoder, 32x32 images with 8x8 patches). Parameters initialised
/// to exactly zero are jittered first so every path carries gradient.
inline GradCheckResult gradcheck_tec_loss(std::uint64_t seed, std::size_t coords = 64, double eps = 1e-6) {
    TecConfig cfg;
    cfg.encoder.depth = 2;
    cfg.encoder.heads = 2;
    cfg.encoder.embed_dim = 16;
    cfg.group_size = 1;
    cfg.decoder_dim = 8;
    cfg.decoder_heads = 2;
    cfg.targets.k = std::min<std::size_t>(15, cfg.encoder.num_patches() - 1);
    Rng rng(seed);
    ViT base(cfg.encoder, rng);
    TecModel model(cfg, base.config.heads, rng);
    for (auto& [_, t] : model.named_parameters()) {
        auto d = t.mutable_data();
        for (auto& v : d)
            if (v == 0.0) v = to_storage(rng.normal(0.0, 0.05));
    }
    CorpusConfig cc;
    cc.n_images = 2;
    cc.seed = seed;
    Tensor tokens = model_tokens(corpus_pixels(gen_synthetic(cc)), cfg.encoder.patch_size);
    auto masks = step_masks(cfg.encoder.num_patches(), 0.75, seed, 0, 2);
    BaseTargets targets;
    {
        NoGradGuard no_grad;
        targets = compute_targets(base, tokens, cfg.targets);
    }
    std::vector<Tensor> params;
    for (auto& [_, t] : model.named_parameters()) params.push_back(t);
    return grad_check([&] { return tec_forward(model, targets, tokens, masks, 1.0).total; }, params, eps, coords,
                      seed);
}

} // namespace tec

// ---------------------------------------------------------------- diagnostics

namespace tec {

struct SimilarityReport {
    CosineStats raw, channel, patch; // pooled over images
    std::size_t images = 0;
};

namespace detail {
inline void pool_cosine(CosineStats& acc, const CosineStats& s) {
    if (acc.histogram.empty()) acc.histogram.assign(CosineStats::kBins, 0);
    const double total = acc.mean * static_cast<double>(acc.pairs) + s.mean * static_cast<double>(s.pairs);
    acc.pairs += s.pairs;
    acc.skipped += s.skipped;
    acc.mean = acc.pairs ? total / static_cast<double>(acc.pairs) : 0.0;
    for (std::size_t i = 0; i < CosineStats::kBins; ++i) acc.histogram[i] += s.histogram[i];
}
} // namespace detail

/// Pairwise patch cosine of base features under the three normalisations.
inline SimilarityReport similarity_report(const ViT& base, const std::vector<Tensor>& images,
                                          std::size_t chunk = 64) {
    NoGradGuard no_grad;
    SimilarityReport rep;
    const std::size_t l = base.config.num_patches(), c = base.config.embed_dim;
    for (std::size_t start = 0; start < images.size(); start += chunk) {
        const std::size_t end = std::min(images.size(), start + chunk);
        std::vector<Tensor> part(images.begin() + static_cast<std::ptrdiff_t>(start),
                                 images.begin() + static_cast<std::ptrdiff_t>(end));
        Tensor y = base_features(base, model_tokens(part, base.config.patch_size));
        for (std::size_t i = 0; i < part.size(); ++i) {
            Tensor yi = reshape(slice(y, 0, i, i + 1), {l, c});
            detail::pool_cosine(rep.raw, mean_pairwise_cosine(yi));
            detail::pool_cosine(rep.channel, mean_pairwise_cosine(channel_dim_normalize(yi)));
            detail::pool_cosine(rep.patch, mean_pairwise_cosine(patch_dim_normalize(yi)));
        }
        rep.images += part.size();
    }
    return rep;
}

/// Per-group share of the adapter residual norm, averaged over all tokens
/// of unmasked forwards of `images`.
inline ContributionProfile adapter_profile(const TecModel& model, const std::vector<Tensor>& images) {
    NoGradGuard no_grad;
    Tensor tokens = model_tokens(images, model.encoder.config.patch_size);
    EncodeResult enc = model.encoder.encode(tokens, model.class_token(), nullptr);
    return contribution_profile(adapt(model.adapters, enc.blocks).Z_prime);
}

/// Mean entropy (nats) of the head-averaged last-block class attention.
inline double class_attention_entropy(const ViT& base, const std::vector<Tensor>& images) {
    NoGradGuard no_grad;
    Tensor a = class_attention_last_block(base, model_tokens(images, base.config.patch_size));
    const std::size_t b = a.size(0);
    double total = 0.0;
    for (std::size_t i = 0; i < b; ++i) {
        const auto avg = head_average(reshape(slice(a, 0, i, i + 1), {a.size(1), a.size(2)}));
        for (double p : avg)
            if (p > 0.0) total -= p * std::log(p);
    }
    return total / static_cast<double>(b);
}

} // namespace tec
