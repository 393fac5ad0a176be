// SPDX-License-Identifier: Apache-2.0
//
// Acceptance harness. Prints one PASS/FAIL line per criterion and exits
// nonzero if any criterion fails. The two expensive runs (the toy pixel
// base and the 200-step TEC run) are shared across the criteria that
// need them.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <sstream>
#include <string>

#include <unistd.h>

#include "helpers.hpp"

using namespace tec;
using namespace tec::testing;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

// Shared desk-scale corpus and the runs built on it.
struct Shared {
    std::vector<Tensor> images;
    std::optional<ViT> base;
    double base_seconds = 0.0;
    std::optional<ViT> round1; // stripped encoder after the 200-step run
};

std::vector<Tensor> desk_corpus() {
    CorpusConfig cc;
    cc.n_images = 2048;
    cc.seed = 1;
    return corpus_pixels(gen_synthetic(cc));
}

TrainConfig base_train_config() {
    TrainConfig tc;
    tc.base_lr = 3e-3;
    tc.total_epochs = 20;
    tc.warmup_epochs = 2;
    tc.batch_size = 64;
    tc.seed = 1;
    return tc;
}

TrainConfig tec_train_config(std::uint64_t seed) {
    TrainConfig tc;
    tc.base_lr = 1.5e-3;
    tc.batch_size = 64;
    tc.max_steps = 200;
    tc.warmup_epochs = 2;
    tc.seed = seed;
    return tc;
}

double mean_of(const std::vector<double>& v, std::size_t from, std::size_t to) {
    double s = 0.0;
    for (std::size_t i = from; i < to; ++i) s += v[i];
    return s / static_cast<double>(to - from);
}

// Mean absolute gap between the sorted value distributions of two parameter
// sets (1-Wasserstein distance of the pooled weights).
double weight_distribution_distance(const NamedTensors& a, const NamedTensors& b) {
    std::vector<double> va, vb;
    for (auto& [_, t] : a) va.insert(va.end(), t.values().begin(), t.values().end());
    for (auto& [_, t] : b) vb.insert(vb.end(), t.values().begin(), t.values().end());
    if (va.size() != vb.size()) return INFINITY;
    std::sort(va.begin(), va.end());
    std::sort(vb.begin(), vb.end());
    double d = 0.0;
    for (std::size_t i = 0; i < va.size(); ++i) d += std::abs(va[i] - vb[i]);
    return d / static_cast<double>(va.size());
}

// ------------------------------------------------------------------ 1

Outcome gradient_oracle() {
    const auto t0 = Clock::now();
    double worst_full = 0.0;
    for (std::uint64_t seed : {1, 2, 3}) worst_full = std::max(worst_full, gradcheck_tec_loss(seed, 64).max_rel_error);

    using Fn = std::function<Tensor(const std::vector<Tensor>&)>;
    const std::vector<std::pair<std::vector<Shape>, Fn>> ops = {
        {{{3, 4}, {3, 4}}, [](const auto& x) { return mul(x[0], x[1]); }},
        {{{2, 3, 4}, {4, 3}, {3}}, [](const auto& x) { return linear(x[0], x[1], x[2]); }},
        {{{2, 3, 4}, {2, 5, 4}}, [](const auto& x) { return matmul_nt(x[0], x[1]); }},
        {{{3, 5}}, [](const auto& x) { return softmax(x[0], -1, 1.8); }},
        {{{3, 6}, {6}, {6}}, [](const auto& x) { return layer_norm(x[0], x[1], x[2], 1e-6); }},
        {{{7}}, [](const auto& x) { return gelu(x[0]); }},
        {{{2, 5, 3}}, [](const auto& x) { return slice(x[0], 1, 1, 4); }},
        {{{4, 3}}, [](const auto& x) { return index_select(x[0], {3, 0, 3, 1}); }},
        {{{2, 3}, {1, 3}}, [](const auto& x) { return concat({x[0], x[1]}, 0); }},
        {{{2, 3, 4}}, [](const auto& x) { return permute(x[0], {2, 0, 1}); }},
    };
    double worst_op = 0.0;
    Rng rng(17);
    for (const auto& [shapes, fn] : ops) {
        std::vector<Tensor> xs;
        for (const auto& s : shapes) xs.push_back(random_tensor(s, rng, -2.0, 2.0, true));
        Tensor w = random_tensor(fn(xs).shape(), rng);
        worst_op = std::max(worst_op, grad_check([&] { return sum(mul(fn(xs), w)); }, xs, 1e-6, 200, 3).max_rel_error);
    }
    const double secs = seconds_since(t0);
    return {worst_full < 1e-4 && worst_op < 1e-6 && secs < 60.0,
            fmt("full loss max rel err %.2e (< 1e-4), per-op %.2e (< 1e-6), %.1f s (< 60 s)", worst_full, worst_op,
                secs)};
}

// ------------------------------------------------------------------ 2

Outcome patch_norm_invariant() {
    double worst_mean = 0.0, worst_std = 0.0;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        Rng rng(seed);
        Tensor y = random_tensor({64, 128}, rng, -3.0, 5.0);
        Tensor out = patch_dim_normalize(y);
        for (std::size_t j = 0; j < 128; ++j) {
            double mu = 0.0, var = 0.0;
            for (std::size_t i = 0; i < 64; ++i) mu += out[i * 128 + j];
            mu /= 64.0;
            for (std::size_t i = 0; i < 64; ++i) var += (out[i * 128 + j] - mu) * (out[i * 128 + j] - mu);
            worst_mean = std::max(worst_mean, std::abs(mu));
            worst_std = std::max(worst_std, std::abs(std::sqrt(var / 64.0) - 1.0));
        }
    }
    return {worst_mean < 1e-6 && worst_std < 1e-5,
            fmt("max |mean| %.1e (< 1e-6), max |std-1| %.1e (< 1e-5) over 10 draws", worst_mean, worst_std)};
}

// ------------------------------------------------------------------ 3

Outcome similarity_ordering(Shared& sh) {
    const auto t0 = Clock::now();
    MimConfig mc;
    sh.base = pretrain_base_mim(mc, base_train_config(), sh.images);
    sh.base_seconds = seconds_since(t0);
    std::vector<Tensor> probe(sh.images.begin(), sh.images.begin() + 256);
    SimilarityReport rep = similarity_report(*sh.base, probe);
    const double secs = seconds_since(t0);
    const double raw = rep.raw.mean, chan = rep.channel.mean, patch = rep.patch.mean;
    const bool ok = patch < raw && raw <= chan && chan - patch >= 0.2 && secs < 600.0;
    return {ok, fmt("patch %.4f < raw %.4f <= channel %.4f, margin %.4f (>= 0.2), %.0f s (< 600 s)", patch, raw, chan,
                    chan - patch, secs)};
}

// ------------------------------------------------------------------ 4

Outcome adapter_topology() {
    TecConfig cfg;
    cfg.encoder = tiny_vit(6, 16, 4, 16, 2);
    cfg.group_size = 2;
    cfg.decoder_dim = 8;
    cfg.decoder_heads = 2;
    cfg.targets.k = 4;
    Rng rng(4);
    TecModel m(cfg, 2, rng);
    Tensor tokens = random_tensor({3, 16, 16}, rng);
    const Tensor T = m.class_token();

    // Zero adapter MLPs: Z_e is exactly the sum of the merged groups.
    EncodeResult r = m.encoder.encode(tokens, T);
    AdapterOutput zero = adapt(m.adapters, r.blocks);
    bool sum_exact = true;
    for (std::size_t i = 0; i < zero.Z_e.numel(); ++i) {
        double s = 0.0;
        for (std::size_t n = 0; n < m.adapters.groups(); ++n) {
            std::vector<Tensor> members;
            auto [lo, hi] = adapter_groups(6, 2)[n];
            for (std::size_t b = lo; b < hi; ++b) members.push_back(r.blocks.X[b]);
            s += merge_group(members, m.adapters.merge[n])[i];
        }
        sum_exact = sum_exact && zero.Z_e[i] == s;
    }

    // Perturbing every adapter parameter moves Z_e but no block output.
    jitter(m.adapter_parameters(), rng, 0.5);
    const Tensor T2 = m.class_token();
    EncodeResult before = m.encoder.encode(tokens, T2);
    AdapterOutput z1 = adapt(m.adapters, before.blocks);
    NamedTensors bank;
    m.adapters.collect("", bank);
    jitter(bank, rng, 0.5);
    EncodeResult after = m.encoder.encode(tokens, T2);
    AdapterOutput z2 = adapt(m.adapters, after.blocks);
    bool blocks_same = true;
    for (std::size_t i = 0; i < 6; ++i) blocks_same = blocks_same && bitwise_equal(before.blocks.X[i], after.blocks.X[i]);
    const bool ze_moved = !bitwise_equal(z1.Z_e, z2.Z_e);

    // Stripped encoder reproduces the pre-strip block outputs.
    ViT stripped = strip_adapters(m);
    EncodeResult s = stripped.encode(tokens);
    bool strip_same = true;
    for (std::size_t i = 0; i < 6; ++i) strip_same = strip_same && bitwise_equal(after.blocks.X[i], s.blocks.X[i]);

    return {sum_exact && blocks_same && ze_moved && strip_same,
            fmt("Z_e = sum Z_n exact: %s; X_i unchanged: %s; Z_e moved: %s; stripped forward bitwise: %s",
                sum_exact ? "yes" : "no", blocks_same ? "yes" : "no", ze_moved ? "yes" : "no",
                strip_same ? "yes" : "no")};
}

// ------------------------------------------------------------------ 5

Outcome folding() {
    TecConfig cfg;
    Rng rng(5);
    TecModel m(cfg, 4, rng);
    jitter(m.adapter_parameters(), rng, 0.2);
    ViT stripped = strip_adapters(m);
    std::size_t equal = 0;
    for (int i = 0; i < 100; ++i) {
        Tensor tokens = random_tensor({1, 16, 192}, rng);
        Tensor a = m.encoder.encode(tokens, m.class_token()).blocks.X.back();
        Tensor b = stripped.encode(tokens).blocks.X.back();
        equal += bitwise_equal(a, b);
    }
    return {equal == 100, fmt("%zu/100 inputs bitwise identical", equal)};
}

// ------------------------------------------------------------------ 6

Outcome mask_locality() {
    TecConfig cfg;
    Rng rng(6);
    ViT base(cfg.encoder, rng);
    TecModel m(cfg, base.config.heads, rng);
    CorpusConfig cc;
    cc.n_images = 4;
    Tensor tokens = model_tokens(corpus_pixels(gen_synthetic(cc)), 8);
    auto masks = step_masks(16, 0.75, 3, 0, 4);
    BaseTargets t = compute_targets(base, tokens, cfg.targets);
    Tensor z_f;
    {
        NoGradGuard ng;
        z_f = tec_forward(m, t, tokens, masks, 1.0).Z_f;
    }
    Tensor leaf(z_f.shape(), z_f.values(), true);
    Tensor loss = feature_loss(t.Y_f, leaf, masks);
    loss.backward();

    std::vector<double> moved = z_f.values();
    const std::size_t c = z_f.size(2);
    std::size_t unmasked_rows = 0;
    bool grad_zero = true;
    for (std::size_t b = 0; b < 4; ++b)
        for (std::size_t l = 0; l < 16; ++l) {
            if (masks[b].is_masked(l)) continue;
            ++unmasked_rows;
            for (std::size_t j = 0; j < c; ++j) {
                const std::size_t i = (b * 16 + l) * c + j;
                moved[i] += rng.normal(0.0, 100.0);
                grad_zero = grad_zero && leaf.grad()[i] == 0.0;
            }
        }
    const double delta = feature_loss(t.Y_f, Tensor(z_f.shape(), moved), masks).item() - loss.item();
    return {delta == 0.0 && grad_zero,
            fmt("%zu unmasked rows perturbed: loss change %.1e (exactly 0), gradient exactly 0: %s", unmasked_rows,
                delta, grad_zero ? "yes" : "no")};
}

// ------------------------------------------------------------------ 7

Outcome attention_contract() {
    TargetConfig tc;
    ViTConfig vc;
    Rng rng(7);
    ViT base(vc, rng);
    bool shapes = true, rows = true, topk = true, rescale = true;
    double worst_row = 0.0;
    for (int trial = 0; trial < 20; ++trial) {
        Tensor tokens = random_tensor({16, 192}, rng);
        AttentionTarget at = build_attention_target(base, tokens, tc);
        shapes = shapes && at.A_s.shape() == Shape{vc.heads, tc.k + 1, 16};
        for (std::size_t r = 0; r < vc.heads * (tc.k + 1); ++r) {
            double s = 0.0;
            for (std::size_t j = 0; j < 16; ++j) s += at.A_s[r * 16 + j];
            worst_row = std::max(worst_row, std::abs(s - 1.0));
        }
        // Brute force: each chosen value is >= every unchosen value.
        const auto& a = at.A_c_prime;
        for (std::size_t i : at.selected_index)
            for (std::size_t j = 0; j < 16; ++j)
                if (std::find(at.selected_index.begin(), at.selected_index.end(), j) == at.selected_index.end())
                    topk = topk && a[i] >= a[j];
        std::vector<double> scaled = a;
        for (auto& v : scaled) v *= 37.5;
        rescale = rescale && select_top_k(scaled, tc.k) == at.selected_index;
    }
    rows = worst_row < 1e-6;
    // Ties go to the lower index, on every call.
    const std::vector<double> tied = {0.1, 0.3, 0.3, 0.3, 0.0, 0.3};
    const bool ties = select_top_k(tied, 2) == std::vector<std::size_t>{1, 2} &&
                      select_top_k(tied, 3) == std::vector<std::size_t>{1, 2, 3};
    return {shapes && rows && topk && rescale && ties,
            fmt("shape H x (k+1) x L: %s; max |row sum - 1| %.1e (<= 1e-6); top-k: %s; ties: %s; rescaling: %s",
                shapes ? "ok" : "bad", worst_row, topk ? "ok" : "bad", ties ? "ok" : "bad",
                rescale ? "invariant" : "changed")};
}

// ------------------------------------------------------------------ 8, 9

struct RunStats {
    std::vector<double> losses;
    bool finite = true;
    double seconds = 0.0;
    double reference = 0.0, final = 0.0;
    double reduction() const { return 1.0 - final / reference; }
};

RunStats run_tec(TecTrainer& trainer, const std::vector<Tensor>& images) {
    RunStats st;
    const auto t0 = Clock::now();
    try {
        trainer.run(images, [&](std::size_t, const LossReport& r, double) {
            st.losses.push_back(r.total);
            st.finite = st.finite && std::isfinite(r.total) && std::isfinite(r.l_fea) && std::isfinite(r.l_att);
        });
    } catch (const NumericError& e) {
        std::printf("  %s\n", e.what());
        st.finite = false;
    }
    st.seconds = seconds_since(t0);
    const std::size_t n = st.losses.size();
    if (n >= 10) {
        st.reference = mean_of(st.losses, 0, 5);
        st.final = mean_of(st.losses, n - 5, n);
    }
    return st;
}

Outcome end_to_end(Shared& sh) {
    if (!sh.base) return {false, "no base model"};
    TecConfig cfg; // depth 6, L = 16, tau 1.8, k = 15
    cfg.targets.k = std::min<std::size_t>(15, cfg.encoder.num_patches() - 1);
    TrainConfig tc = tec_train_config(2);
    TecTrainer trainer(cfg, tc, *sh.base, 8);
    RunStats st = run_tec(trainer, sh.images);
    sh.round1 = strip_adapters(trainer.model());
    const bool ok = st.finite && st.losses.size() == 200 && st.reduction() >= 0.5 && st.seconds < 600.0;
    return {ok, fmt("smoothed total %.4f -> %.4f over %zu steps, reduction %.1f%% (>= 50%%), finite: %s, %.0f s "
                    "(< 600 s)",
                    st.reference, st.final, st.losses.size(), 100.0 * st.reduction(), st.finite ? "yes" : "no",
                    st.seconds)};
}

Outcome chain(Shared& sh) {
    if (!sh.round1) return {false, "no round-1 encoder"};
    TecConfig cfg;
    TrainConfig tc = tec_train_config(3);
    TecTrainer trainer(cfg, tc, *sh.round1, derive_seed(tc.seed, 2));
    const double dist = weight_distribution_distance(trainer.model().encoder.named_parameters(),
                                                     sh.round1->named_parameters());
    std::size_t shared_arrays = 0;
    const auto fresh = trainer.model().encoder.named_parameters();
    const auto base = sh.round1->named_parameters();
    for (std::size_t i = 0; i < fresh.size(); ++i)
        shared_arrays += bitwise_equal(fresh[i].second, base[i].second) && fresh[i].second.numel() > 1 &&
                         fresh[i].first.find("weight") != std::string::npos;
    RunStats st = run_tec(trainer, sh.images);
    const bool descending = st.finite && st.losses.size() == 200 && st.final < st.reference;
    return {descending && dist > 0.0 && shared_arrays == 0,
            fmt("round 2 smoothed total %.4f -> %.4f (%.1f%% lower), finite: %s; step-0 weight distance to base %.3e "
                "(> 0), weight matrices copied from base: %zu",
                st.reference, st.final, 100.0 * st.reduction(), st.finite ? "yes" : "no", dist, shared_arrays)};
}

// ------------------------------------------------------------------ 10

Outcome determinism() {
    TecConfig cfg;
    cfg.encoder = tiny_vit(2, 16, 4, 16, 2);
    cfg.encoder.channels = 3;
    cfg.group_size = 1;
    cfg.decoder_dim = 8;
    cfg.decoder_heads = 2;
    cfg.targets.k = 4;
    TrainConfig tc;
    tc.base_lr = 1e-2;
    tc.batch_size = 4;
    tc.max_steps = 3;
    tc.seed = 11;
    CorpusConfig cc;
    cc.n_images = 8;
    cc.image_size = 16;
    auto images = corpus_pixels(gen_synthetic(cc));

    MimConfig mc;
    mc.encoder = cfg.encoder;
    mc.decoder_dim = 8;
    mc.decoder_heads = 2;
    const std::string b1 = encoder_checkpoint(pretrain_base_mim(mc, tc, images)).to_bytes();
    const std::string b2 = encoder_checkpoint(pretrain_base_mim(mc, tc, images)).to_bytes();
    ViT base = load_encoder(Checkpoint::from_bytes(b1));

    auto train = [&] {
        TecTrainer t(cfg, tc, base, 5);
        t.run(images);
        return t;
    };
    TecTrainer r1 = train(), r2 = train();
    const std::string s1 = tec_state_checkpoint(r1.model(), cfg, tc, r1.step()).to_bytes();
    const std::string s2 = tec_state_checkpoint(r2.model(), cfg, tc, r2.step()).to_bytes();
    const std::string e1 = encoder_checkpoint(strip_adapters(r1.model()), r1.step()).to_bytes();
    const std::string e2 = encoder_checkpoint(strip_adapters(r2.model()), r2.step()).to_bytes();
    const bool identical = b1 == b2 && s1 == s2 && e1 == e2;

    // Save/load through files, then compare forwards.
    const auto dir = std::filesystem::temp_directory_path() / ("tec_accept_" + std::to_string(::getpid()));
    std::filesystem::create_directories(dir);
    tec_state_checkpoint(r1.model(), cfg, tc, r1.step()).save(dir / "state.ckpt");
    encoder_checkpoint(strip_adapters(r1.model())).save(dir / "encoder.ckpt");
    TecModel m = load_tec_state(Checkpoint::load(dir / "state.ckpt"));
    ViT enc = load_encoder(Checkpoint::load(dir / "encoder.ckpt"));
    std::filesystem::remove_all(dir);

    Tensor tokens = model_tokens(images, 4);
    auto masks = step_masks(16, 0.75, 9, 0, images.size());
    BaseTargets t = compute_targets(base, tokens, cfg.targets);
    NoGradGuard ng;
    TecForward fa = tec_forward(r1.model(), t, tokens, masks, 1.0), fb = tec_forward(m, t, tokens, masks, 1.0);
    const bool state_fwd = bitwise_equal(fa.Z_f, fb.Z_f) && bitwise_equal(fa.Z_a, fb.Z_a) &&
                           fa.total.item() == fb.total.item();
    const bool enc_fwd = bitwise_equal(strip_adapters(r1.model()).encode(tokens).blocks.X.back(),
                                       enc.encode(tokens).blocks.X.back());
    return {identical && state_fwd && enc_fwd,
            fmt("same seed checkpoints identical: %s; state round trip forward bitwise: %s; encoder round trip "
                "forward bitwise: %s",
                identical ? "yes" : "no", state_fwd ? "yes" : "no", enc_fwd ? "yes" : "no")};
}

// ------------------------------------------------------------------ 11

Outcome schedule() {
    TrainConfig tc;
    tc.batch_size = 256; // peak equals base_lr under the linear scaling rule
    tc.min_lr = 1e-6;
    const std::size_t n = 2048 * 4;
    const LrSchedule s = tc.schedule(n);
    const std::size_t w = s.warmup_steps, f = s.final_step();
    const bool at_peak = s.at(w) == tc.base_lr;
    const bool at_min = std::abs(s.at(f) - tc.min_lr) <= 1e-12;
    // Continuity: the step into the joint matches the warmup slope and the
    // step out of it is far smaller than that slope.
    const double slope = tc.base_lr / static_cast<double>(w);
    const bool continuous = std::abs((s.at(w) - s.at(w - 1)) - slope) < 1e-15 && s.at(w) - s.at(w + 1) < slope;
    bool monotone = true;
    for (std::size_t i = w; i < f; ++i) monotone = monotone && s.at(i + 1) <= s.at(i);
    return {at_peak && at_min && continuous && monotone,
            fmt("warmup end %zu: %.3e (= base_lr %.3e); final step %zu: %.3e (min_lr 1e-6 +/- 1e-12); continuous: "
                "%s; monotone after joint: %s",
                w, s.at(w), tc.base_lr, f, s.at(f), continuous ? "yes" : "no", monotone ? "yes" : "no")};
}

// --------------------------------------------------------- supplementary

// Class attention entropy of the toy base on structured images and on pixel
// noise, for reference only.
void report_attention_focus(const Shared& sh) {
    if (!sh.base) return;
    std::vector<Tensor> structured(sh.images.begin(), sh.images.begin() + 128), noise;
    for (std::uint64_t i = 0; i < 128; ++i) noise.push_back(noise_image(32, 3, 1000 + i));
    std::printf("INFO  class attention entropy: structured %.4f, noise %.4f, uniform %.4f nats\n",
                class_attention_entropy(*sh.base, structured), class_attention_entropy(*sh.base, noise),
                std::log(16.0));
}

} // namespace

int main() {
    Shared sh;
    sh.images = desk_corpus();
    const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria = {
        {"gradient oracle", gradient_oracle},
        {"patch-dim normalization invariant", patch_norm_invariant},
        {"patch similarity ordering", [&] { return similarity_ordering(sh); }},
        {"adapter topology", adapter_topology},
        {"input adapter folding", folding},
        {"mask locality", mask_locality},
        {"attention target contract", attention_contract},
        {"end-to-end descent", [&] { return end_to_end(sh); }},
        {"chain round", [&] { return chain(sh); }},
        {"determinism and persistence", determinism},
        {"learning-rate schedule", schedule},
    };
    int failed = 0;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        Outcome o;
        try {
            o = criteria[i].second();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        failed += !o.pass;
        std::printf("%s  %2zu %s: %s\n", o.pass ? "PASS" : "FAIL", i + 1, criteria[i].first, o.detail.c_str());
        std::fflush(stdout);
    }
    report_attention_focus(sh);
    std::printf("%d/%zu criteria passed\n", static_cast<int>(criteria.size()) - failed, criteria.size());
    return failed == 0 ? 0 : 1;
}
