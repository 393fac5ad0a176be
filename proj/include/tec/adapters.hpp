// SPDX-License-Identifier: Apache-2.0
//
// Conditional adapters used only during pretraining. The input adapter maps
// the class token through a two-layer MLP; the encoder adapter bank merges
// contiguous groups of block outputs and sums the residual-adapted groups.
// Adapters read block outputs but never feed back into the encoder.
#pragma once

#include <cmath>
#include <vector>

#include "tec/vit.hpp"

namespace tec {

struct InputAdapter {
    Mlp mlp; // C -> hidden -> C

    InputAdapter() = default;

    /// The output layer starts at zero weight with a small random bias, so
    /// the enhanced token is initially a learnable constant.
    InputAdapter(std::size_t dim, std::size_t hidden, Rng& rng) : mlp(dim, hidden, dim, rng) {
        mlp.fc2.weight = constant_param({hidden, dim}, 0.0);
        mlp.fc2.bias = normal_param({dim}, 0.02, rng);
    }

    void collect(const std::string& prefix, NamedTensors& out) const { mlp.collect(prefix, out); }
};

/// T' = MLP(T), no residual.
inline Tensor enhance_class_token(const InputAdapter& adapter, const Tensor& T) { return adapter.mlp(T); }

/// Precomputes T' for inference. The result is a detached snapshot.
inline Tensor fold_input_adapter(const InputAdapter& adapter, const Tensor& T) {
    NoGradGuard no_grad;
    return enhance_class_token(adapter, T.detach());
}

/// Contiguous block ranges [first, last) per group; the last group takes the
/// remainder when depth is not a multiple of group_size.
inline std::vector<std::pair<std::size_t, std::size_t>> adapter_groups(std::size_t depth, std::size_t group_size) {
    if (group_size == 0 || depth == 0) throw ConfigError("depth and group_size must be positive");
    std::vector<std::pair<std::size_t, std::size_t>> groups;
    for (std::size_t first = 0; first < depth; first += group_size)
        groups.emplace_back(first, std::min(first + group_size, depth));
    return groups;
}

/// Z_n = FC(concat(X_i..X_j)) along the channel axis.
inline Tensor merge_group(const std::vector<Tensor>& members, const Linear& projection) {
    if (members.empty()) throw DimensionError("merge_group: empty group");
    for (const auto& m : members)
        if (m.shape() != members.front().shape()) throw DimensionError("merge_group: member shapes differ");
    const std::size_t width = members.front().size(-1) * members.size();
    if (projection.in_features() != width)
        throw DimensionError("merge_group: projection expects " + std::to_string(projection.in_features()) +
                             " inputs, concat width is " + std::to_string(width));
    return projection(members.size() == 1 ? members.front() : concat(members, -1));
}

struct AdapterOutput {
    Tensor Z_e;                  // [B, T, C]
    std::vector<Tensor> Z_prime; // per-group Z_n'
};

struct EncoderAdapterBank {
    std::size_t depth = 0;
    std::size_t group_size = 3;
    std::vector<Linear> merge;    // (g_n * C) -> C
    std::vector<Mlp> residual;    // C -> hidden -> C

    EncoderAdapterBank() = default;

    /// The residual branch's output layer starts at zero so Z_n' = Z_n initially.
    EncoderAdapterBank(std::size_t depth_, std::size_t dim, std::size_t group_size_, std::size_t hidden, Rng& rng)
        : depth(depth_), group_size(group_size_) {
        for (auto [first, last] : adapter_groups(depth, group_size)) {
            merge.emplace_back((last - first) * dim, dim, rng);
            residual.emplace_back(dim, hidden, dim, rng);
            residual.back().fc2.weight = constant_param({hidden, dim}, 0.0);
        }
    }

    std::size_t groups() const { return merge.size(); }

    void collect(const std::string& prefix, NamedTensors& out) const {
        for (std::size_t n = 0; n < merge.size(); ++n) {
            merge[n].collect(prefix + std::to_string(n) + ".merge.", out);
            residual[n].collect(prefix + std::to_string(n) + ".mlp.", out);
        }
    }
};

/// Z_n' = Z_n + MLP(Z_n); Z_e = sum_n Z_n'.
inline AdapterOutput adapt(const EncoderAdapterBank& bank, const BlockOutputs& X) {
    if (X.X.size() != bank.depth)
        throw ConfigError("adapter bank built for depth " + std::to_string(bank.depth) + " got " +
                          std::to_string(X.X.size()) + " block outputs");
    const auto groups = adapter_groups(bank.depth, bank.group_size);
    if (groups.size() != bank.groups()) throw ConfigError("adapter group partition inconsistent with depth");
    AdapterOutput out;
    for (std::size_t n = 0; n < groups.size(); ++n) {
        std::vector<Tensor> members(X.X.begin() + static_cast<std::ptrdiff_t>(groups[n].first),
                                    X.X.begin() + static_cast<std::ptrdiff_t>(groups[n].second));
        Tensor z = merge_group(members, bank.merge[n]);
        Tensor zp = add(z, bank.residual[n](z));
        out.Z_prime.push_back(zp);
        out.Z_e = n == 0 ? zp : add(out.Z_e, zp);
    }
    return out;
}

struct ContributionProfile {
    std::vector<double> proportions; // length N, sums to 1
    std::size_t tokens = 0;
    std::size_t skipped = 0; // tokens where every group output is zero
};

/// Mean over tokens of ||Z_n'(t)|| / sum_m ||Z_m'(t)||.
inline ContributionProfile contribution_profile(const std::vector<Tensor>& Z_prime) {
    if (Z_prime.empty()) throw ParameterError("contribution_profile needs at least one group");
    const std::size_t c = Z_prime.front().size(-1);
    const std::size_t tokens = Z_prime.front().numel() / c;
    for (const auto& z : Z_prime)
        if (z.shape() != Z_prime.front().shape()) throw DimensionError("contribution_profile: group shapes differ");
    ContributionProfile prof;
    prof.proportions.assign(Z_prime.size(), 0.0);
    std::vector<double> norms(Z_prime.size());
    for (std::size_t t = 0; t < tokens; ++t) {
        double total = 0.0;
        for (std::size_t n = 0; n < Z_prime.size(); ++n) {
            double s = 0.0;
            const double* row = Z_prime[n].values().data() + t * c;
            for (std::size_t j = 0; j < c; ++j) s += row[j] * row[j];
            norms[n] = std::sqrt(s);
            total += norms[n];
        }
        if (total == 0.0) {
            ++prof.skipped;
            continue;
        }
        for (std::size_t n = 0; n < Z_prime.size(); ++n) prof.proportions[n] += norms[n] / total;
        ++prof.tokens;
    }
    if (prof.tokens)
        for (auto& p : prof.proportions) p /= static_cast<double>(prof.tokens);
    return prof;
}

} // namespace tec
