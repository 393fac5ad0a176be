// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include "helpers.hpp"

using namespace tec;
using namespace tec::testing;

namespace {

TecConfig tiny_tec(std::size_t depth = 3, std::size_t group = 3) {
    TecConfig cfg;
    cfg.encoder = tiny_vit(depth, 8, 4, 8, 2);
    cfg.group_size = group;
    cfg.decoder_dim = 8;
    cfg.decoder_heads = 2;
    cfg.decoder_depth = 2;
    cfg.targets.k = 2;
    return cfg;
}

} // namespace

TEST(InputAdapter, ZeroOutputWeightGivesBias) {
    Rng rng(1);
    InputAdapter a(8, 4, rng);
    std::vector<double> c(8);
    for (std::size_t j = 0; j < 8; ++j) c[j] = 0.1 * static_cast<double>(j) - 0.3;
    std::copy(c.begin(), c.end(), a.mlp.fc2.bias.mutable_data().begin());
    for (int trial = 0; trial < 3; ++trial) {
        Tensor out = enhance_class_token(a, random_tensor({1, 8}, rng));
        EXPECT_EQ(out.values(), c);
    }
}

TEST(InputAdapter, StartsAsLearnableConstant) {
    Rng rng(2);
    InputAdapter a(8, 4, rng);
    for (double w : a.mlp.fc2.weight.values()) EXPECT_EQ(w, 0.0);
    Tensor out = enhance_class_token(a, random_tensor({1, 8}, rng));
    EXPECT_EQ(out.values(), a.mlp.fc2.bias.values());
}

TEST(InputAdapter, NearIdentityWhenWeightsChosenSo) {
    // fc1 = scaled identity into a wide GELU regime, fc2 = inverse scale:
    // GELU(s x) / s -> x for large s and positive x.
    Rng rng(3);
    InputAdapter a(4, 4, rng);
    const double s = 50.0;
    zero_param(a.mlp.fc1.weight);
    zero_param(a.mlp.fc2.weight);
    zero_param(a.mlp.fc2.bias);
    auto w1 = a.mlp.fc1.weight.mutable_data(), w2 = a.mlp.fc2.weight.mutable_data();
    for (std::size_t i = 0; i < 4; ++i) {
        w1[i * 4 + i] = s;
        w2[i * 4 + i] = 1.0 / s;
    }
    Tensor t({1, 4}, {0.5, 1.0, 1.5, 2.0});
    Tensor out = enhance_class_token(a, t);
    for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(out[j], t[j], 1e-9);
}

TEST(InputAdapter, FoldingMatchesLiveForwardBitwise) {
    Rng rng(4);
    TecModel m(tiny_tec(), 2, rng);
    jitter(m.adapter_parameters(), rng);
    Tensor live = m.class_token();
    Tensor folded = fold_input_adapter(m.input_adapter, m.encoder.cls_token);
    EXPECT_TRUE(bitwise_equal(live, folded));

    ViT stripped = strip_adapters(m);
    Tensor tokens = random_tensor({2, 4, 16}, rng);
    Tensor a = m.encoder.encode(tokens, m.class_token()).blocks.X.back();
    Tensor b = stripped.encode(tokens).blocks.X.back();
    EXPECT_TRUE(bitwise_equal(a, b));
}

TEST(AdapterGroups, EvenAndRemainderPartitions) {
    using G = std::vector<std::pair<std::size_t, std::size_t>>;
    EXPECT_EQ(adapter_groups(6, 3), (G{{0, 3}, {3, 6}}));
    EXPECT_EQ(adapter_groups(7, 3), (G{{0, 3}, {3, 6}, {6, 7}}));
    EXPECT_EQ(adapter_groups(12, 3).size(), 4u);
    EXPECT_EQ(adapter_groups(2, 1), (G{{0, 1}, {1, 2}}));
    EXPECT_THROW(adapter_groups(6, 0), ConfigError);
}

TEST(MergeGroup, SelectorProjectionPicksOneMember) {
    Rng rng(5);
    std::vector<Tensor> members = {random_tensor({1, 3, 4}, rng), random_tensor({1, 3, 4}, rng),
                                   random_tensor({1, 3, 4}, rng)};
    Linear proj(12, 4, rng);
    zero_param(proj.weight);
    auto w = proj.weight.mutable_data();
    for (std::size_t j = 0; j < 4; ++j) w[(4 + j) * 4 + j] = 1.0; // rows of member 1
    Tensor z = merge_group(members, proj);
    EXPECT_EQ(z.values(), members[1].values());
}

TEST(MergeGroup, ZeroProjectionGivesBias) {
    Rng rng(6);
    std::vector<Tensor> members = {random_tensor({2, 3, 4}, rng), random_tensor({2, 3, 4}, rng)};
    Linear proj(8, 4, rng);
    zero_param(proj.weight);
    auto bias = proj.bias.mutable_data();
    for (std::size_t j = 0; j < 4; ++j) bias[j] = static_cast<double>(j);
    Tensor z = merge_group(members, proj);
    for (std::size_t r = 0; r < 6; ++r)
        for (std::size_t j = 0; j < 4; ++j) EXPECT_EQ(z[r * 4 + j], static_cast<double>(j));
}

TEST(MergeGroup, WidthMismatchIsDimensionError) {
    Rng rng(7);
    std::vector<Tensor> members = {random_tensor({1, 3, 4}, rng), random_tensor({1, 3, 4}, rng)};
    Linear proj(12, 4, rng);
    EXPECT_THROW(merge_group(members, proj), DimensionError);
    EXPECT_THROW(merge_group({}, proj), DimensionError);
}

TEST(AdapterBank, ZeroResidualSumsMergedGroups) {
    Rng rng(8);
    EncoderAdapterBank bank(6, 8, 3, 4, rng);
    ASSERT_EQ(bank.groups(), 2u);
    BlockOutputs x;
    for (int i = 0; i < 6; ++i) x.X.push_back(random_tensor({2, 5, 8}, rng));
    AdapterOutput out = adapt(bank, x);
    Tensor z0 = merge_group({x.X[0], x.X[1], x.X[2]}, bank.merge[0]);
    Tensor z1 = merge_group({x.X[3], x.X[4], x.X[5]}, bank.merge[1]);
    for (std::size_t i = 0; i < z0.numel(); ++i) EXPECT_EQ(out.Z_e[i], z0[i] + z1[i]);
    EXPECT_EQ(out.Z_prime[0].values(), z0.values());
}

TEST(AdapterBank, ResidualBranchAddsMlpOutput) {
    Rng rng(9);
    EncoderAdapterBank bank(3, 8, 3, 4, rng);
    NamedTensors params;
    bank.collect("", params);
    jitter(params, rng);
    BlockOutputs x;
    for (int i = 0; i < 3; ++i) x.X.push_back(random_tensor({1, 5, 8}, rng));
    AdapterOutput out = adapt(bank, x);
    Tensor z = merge_group(x.X, bank.merge[0]);
    Tensor ref = add(z, bank.residual[0](z));
    EXPECT_LT(max_abs_diff(out.Z_e, ref), 1e-15);
}

TEST(AdapterBank, DepthMismatchIsConfigError) {
    Rng rng(10);
    EncoderAdapterBank bank(6, 8, 3, 4, rng);
    BlockOutputs x;
    for (int i = 0; i < 5; ++i) x.X.push_back(random_tensor({1, 5, 8}, rng));
    EXPECT_THROW(adapt(bank, x), ConfigError);
}

TEST(Contribution, HandExample) {
    Tensor a({1, 2, 2}, {3, 4, 0, 0});  // norms 5, 0
    Tensor b({1, 2, 2}, {0, 5, 0, 0});  // norms 5, 0
    Tensor c({1, 2, 2}, {0, 10, 0, 0}); // norms 10, 0
    ContributionProfile p = contribution_profile({a, b, c});
    EXPECT_EQ(p.tokens, 1u);
    EXPECT_EQ(p.skipped, 1u);
    EXPECT_NEAR(p.proportions[0], 0.25, 1e-15);
    EXPECT_NEAR(p.proportions[1], 0.25, 1e-15);
    EXPECT_NEAR(p.proportions[2], 0.5, 1e-15);
}

TEST(Contribution, ProportionsSumToOne) {
    Rng rng(11);
    std::vector<Tensor> z = {random_tensor({3, 5, 8}, rng), random_tensor({3, 5, 8}, rng),
                             random_tensor({3, 5, 8}, rng), random_tensor({3, 5, 8}, rng)};
    ContributionProfile p = contribution_profile(z);
    double s = 0.0;
    for (double v : p.proportions) {
        EXPECT_GE(v, 0.0);
        s += v;
    }
    EXPECT_NEAR(s, 1.0, 1e-12);
    EXPECT_THROW(contribution_profile({}), ParameterError);
}

TEST(Topology, AdaptersNeverFeedBackIntoEncoder) {
    Rng rng(12);
    TecModel m(tiny_tec(3, 1), 2, rng);
    Tensor tokens = random_tensor({1, 4, 16}, rng);
    Tensor T = m.encoder.cls_token;
    EncodeResult before = m.encoder.encode(tokens, T);
    NamedTensors bank;
    m.adapters.collect("", bank);
    jitter(bank, rng, 1.0);
    adapt(m.adapters, before.blocks);
    EncodeResult after = m.encoder.encode(tokens, T);
    for (std::size_t i = 0; i < 3; ++i) EXPECT_TRUE(bitwise_equal(before.blocks.X[i], after.blocks.X[i]));
}

TEST(Topology, EncoderGradientFlowsThroughEveryGroup) {
    Rng rng(13);
    TecModel m(tiny_tec(3, 1), 2, rng);
    jitter(m.adapter_parameters(), rng);
    Tensor tokens = random_tensor({1, 4, 16}, rng);
    EncodeResult r = m.encoder.encode(tokens, m.class_token());
    AdapterOutput out = adapt(m.adapters, r.blocks);
    sum(out.Z_e).backward();
    for (std::size_t n = 0; n < 3; ++n) EXPECT_TRUE(m.adapters.merge[n].weight.has_grad());
    EXPECT_TRUE(m.input_adapter.mlp.fc2.bias.has_grad());
}

TEST(Strip, DropsAdaptersAndDecoder) {
    Rng rng(14);
    TecModel m(tiny_tec(), 2, rng);
    ViT stripped = strip_adapters(m);
    auto names = stripped.named_parameters();
    EXPECT_EQ(names.size(), m.encoder.named_parameters().size());
    for (auto& [n, _] : names) {
        EXPECT_EQ(n.find("adapter"), std::string::npos);
        EXPECT_EQ(n.find("decoder"), std::string::npos);
    }
    EXPECT_EQ(stripped.config, m.encoder.config);
    // Stripped copy is independent of later training of the full model.
    m.encoder.patch_embed.weight.mutable_data()[0] += 1.0;
    EXPECT_NE(stripped.patch_embed.weight[0], m.encoder.patch_embed.weight[0]);
}
