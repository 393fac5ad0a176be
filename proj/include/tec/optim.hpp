// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "tec/nn.hpp"

namespace tec {

/// Linear warmup to the peak, then cosine decay reaching `min_lr` on the
/// last executed step (total_steps - 1).
struct LrSchedule {
    double peak_lr = 1.5e-4;
    double min_lr = 0.0;
    std::size_t warmup_steps = 0;
    std::size_t total_steps = 1;

    std::size_t final_step() const { return total_steps ? total_steps - 1 : 0; }

    double at(std::size_t step) const {
        if (step < warmup_steps)
            return peak_lr * static_cast<double>(step) / static_cast<double>(warmup_steps);
        if (final_step() <= warmup_steps) return peak_lr;
        const double t =
            std::min(1.0, static_cast<double>(step - warmup_steps) / static_cast<double>(final_step() - warmup_steps));
        // Written as peak minus decay so the joint (t = 0) is exactly peak_lr.
        return peak_lr - (peak_lr - min_lr) * 0.5 * (1.0 - std::cos(std::numbers::pi * t));
    }
};

struct AdamWConfig {
    double beta1 = 0.9;
    double beta2 = 0.95;
    double eps = 1e-8;
    double weight_decay = 0.05;
};

/// Decoupled weight decay Adam. Decay applies to 2-D weight matrices only
/// (not biases, norms, tokens or positional tables). Updated values are
/// rounded to f32 precision to stay checkpoint-exact.
class AdamW {
public:
    AdamW(NamedTensors params, AdamWConfig cfg = {}) : params_(std::move(params)), cfg_(cfg) {
        for (const auto& [name, t] : params_) {
            m_.emplace_back(t.numel(), 0.0);
            v_.emplace_back(t.numel(), 0.0);
            decay_.push_back(t.dim() == 2 && name.size() >= 6 && name.ends_with("weight"));
        }
    }

    void step(double lr) {
        ++t_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
        for (std::size_t p = 0; p < params_.size(); ++p) {
            Tensor& t = params_[p].second;
            auto w = t.mutable_data();
            const bool has = t.has_grad();
            auto g = t.grad();
            const double wd = decay_[p] ? cfg_.weight_decay : 0.0;
            for (std::size_t i = 0; i < w.size(); ++i) {
                const double gi = has ? g[i] : 0.0;
                m_[p][i] = cfg_.beta1 * m_[p][i] + (1.0 - cfg_.beta1) * gi;
                v_[p][i] = cfg_.beta2 * v_[p][i] + (1.0 - cfg_.beta2) * gi * gi;
                const double update = (m_[p][i] / bc1) / (std::sqrt(v_[p][i] / bc2) + cfg_.eps) + wd * w[i];
                w[i] = to_storage(w[i] - lr * update);
            }
        }
    }

    void zero_grad() {
        for (auto& [_, t] : params_) t.zero_grad();
    }

    std::size_t steps() const { return t_; }
    const NamedTensors& params() const { return params_; }

private:
    NamedTensors params_;
    AdamWConfig cfg_;
    std::vector<std::vector<double>> m_, v_;
    std::vector<bool> decay_;
    std::size_t t_ = 0;
};

} // namespace tec
