// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "tec/rng.hpp"
#include "tec/tensor.hpp"

namespace tec {

struct GradCheckResult {
    double max_rel_error = 0.0;
    std::size_t coordinates = 0;
};

/// Compares reverse-mode gradients of the scalar `loss_fn` with central
/// differences. Coordinates are sampled uniformly over all parameters when
/// their total count exceeds `max_coords`; otherwise every coordinate is
/// checked. Relative error is |a - n| / max(1, |a|, |n|).
inline GradCheckResult grad_check(const std::function<Tensor()>& loss_fn, std::vector<Tensor> params,
                                  double eps = 1e-6, std::size_t max_coords = 64, std::uint64_t seed = 0) {
    if (!(eps >= 1e-7 && eps <= 1e-4)) throw ParameterError("grad_check eps must lie in [1e-7, 1e-4]");

    for (auto& p : params) p.zero_grad();
    Tensor loss = loss_fn();
    if (!std::isfinite(loss.item())) throw NumericError("grad_check: non-finite loss");
    loss.backward();

    struct Coord {
        std::size_t param, index;
    };
    std::vector<Coord> coords;
    for (std::size_t p = 0; p < params.size(); ++p)
        for (std::size_t i = 0; i < params[p].numel(); ++i) coords.push_back({p, i});
    if (coords.size() > max_coords) {
        Rng rng(seed);
        rng.shuffle(coords);
        coords.resize(max_coords);
    }

    GradCheckResult result;
    NoGradGuard no_grad;
    for (const auto& c : coords) {
        Tensor& p = params[c.param];
        const double analytic = p.has_grad() ? p.grad()[c.index] : 0.0;
        auto data = p.mutable_data();
        const double saved = data[c.index];
        data[c.index] = saved + eps;
        const double up = loss_fn().item();
        data[c.index] = saved - eps;
        const double down = loss_fn().item();
        data[c.index] = saved;
        if (!std::isfinite(up) || !std::isfinite(down)) throw NumericError("grad_check: non-finite loss");
        const double numeric = (up - down) / (2.0 * eps);
        const double denom = std::max({1.0, std::abs(analytic), std::abs(numeric)});
        result.max_rel_error = std::max(result.max_rel_error, std::abs(analytic - numeric) / denom);
        ++result.coordinates;
    }
    return result;
}

} // namespace tec
