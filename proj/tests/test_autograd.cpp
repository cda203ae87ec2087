#include <gtest/gtest.h>

#include "gif/autograd.hpp"
#include "test_util.hpp"

using namespace gif;
using ag::Var;

namespace {

using Op = std::function<Var(const std::vector<Var>&)>;

/// Checks d/d inputs of sum(w * op(inputs)) against central differences.
void check_op(const Op& op, std::vector<Tensor> inputs, std::uint64_t seed, double tol = 1e-6) {
    std::vector<Var> vars;
    for (auto& t : inputs) vars.emplace_back(t, true);
    const Tensor out0 = op(vars).value();
    const Tensor w = testutil::normal_tensor(out0.shape(), Rng(seed));
    ag::backward(ag::weighted_sum(op(vars), w));
    const double h = 1e-6;
    ag::NoGradGuard ng;
    for (std::size_t k = 0; k < vars.size(); ++k) {
        const Tensor g = vars[k].grad().empty() ? Tensor::zeros_like(vars[k].value()) : vars[k].grad();
        auto& val = vars[k].mutable_value();
        for (std::size_t i = 0; i < val.size(); ++i) {
            const double x = val[i];
            val[i] = x + h;
            const double lp = ag::weighted_sum(op(vars), w).value()[0];
            val[i] = x - h;
            const double lm = ag::weighted_sum(op(vars), w).value()[0];
            val[i] = x;
            const double num = (lp - lm) / (2 * h);
            EXPECT_NEAR(g[i], num, tol * std::max(1.0, std::abs(num))) << "input " << k << " entry " << i;
        }
    }
}

Tensor randn(Shape s, std::uint64_t seed) { return testutil::normal_tensor(std::move(s), Rng(seed)); }

}  // namespace

TEST(Autograd, ElementwiseOps) {
    check_op([](const auto& v) { return ag::add(v[0], v[1]); }, {randn({2, 3}, 1), randn({2, 3}, 2)}, 10);
    check_op([](const auto& v) { return ag::scale(v[0], -1.7); }, {randn({5}, 3)}, 11);
    check_op([](const auto& v) { return ag::silu(v[0]); }, {randn({2, 4}, 4)}, 12);
    // keep away from the kink
    Tensor r = randn({8}, 5);
    for (auto& x : r.vec()) x += x > 0 ? 0.1 : -0.1;
    check_op([](const auto& v) { return ag::relu(v[0]); }, {r}, 13);
    check_op([](const auto& v) { return ag::reshape(v[0], {3, 2}); }, {randn({2, 3}, 6)}, 14);
}

TEST(Autograd, Mse) {
    const Tensor target = randn({3, 3}, 9);
    check_op([&](const auto& v) { return ag::mse(v[0], target); }, {randn({3, 3}, 8)}, 15);
}

TEST(Autograd, BlendPerItem) {
    const Tensor x = randn({2, 1, 2, 2}, 7);
    check_op([&](const auto& v) { return ag::blend_per_item(v[0], x, {0.3, 0.9}, {0.5, -1.0}); }, {randn({2, 1, 2, 2}, 1)}, 16);
}

TEST(Autograd, Linear) {
    check_op([](const auto& v) { return ag::linear(v[0], v[1], v[2]); }, {randn({2, 3, 4}, 1), randn({4, 5}, 2), randn({5}, 3)}, 17);
}

TEST(Autograd, LayerNorm) {
    check_op([](const auto& v) { return ag::layer_norm(v[0], v[1], v[2]); }, {randn({3, 6}, 1), randn({6}, 2), randn({6}, 3)}, 18);
}

TEST(Autograd, Conv2d) {
    check_op([](const auto& v) { return ag::conv2d(v[0], v[1], v[2]); }, {randn({2, 3, 5, 4}, 1), randn({4, 3, 3, 3}, 2), randn({4}, 3)},
             19);
    check_op([](const auto& v) { return ag::conv2d(v[0], v[1], v[2]); }, {randn({1, 3, 3, 3}, 4), randn({2, 3, 1, 1}, 5), randn({2}, 6)},
             20);
}

TEST(Autograd, Conv2dMatchesDirectLoop) {
    const Tensor x = randn({1, 2, 4, 5}, 1), w = randn({3, 2, 3, 3}, 2), b = randn({3}, 3);
    const Tensor y = ag::conv2d(Var(x), Var(w), Var(b)).value();
    for (std::size_t o = 0; o < 3; ++o)
        for (std::size_t r = 0; r < 4; ++r)
            for (std::size_t c = 0; c < 5; ++c) {
                double s = b[o];
                for (std::size_t i = 0; i < 2; ++i)
                    for (int dr = -1; dr <= 1; ++dr)
                        for (int dc = -1; dc <= 1; ++dc) {
                            const long rr = long(r) + dr, cc = long(c) + dc;
                            if (rr < 0 || cc < 0 || rr >= 4 || cc >= 5) continue;
                            s += w[((o * 2 + i) * 3 + std::size_t(dr + 1)) * 3 + std::size_t(dc + 1)] * x[(i * 4 + std::size_t(rr)) * 5 + std::size_t(cc)];
                        }
                EXPECT_NEAR(y[(o * 4 + r) * 5 + c], s, 1e-12);
            }
}

TEST(Autograd, GroupNorm) {
    check_op([](const auto& v) { return ag::group_norm(v[0], 2, v[1], v[2]); }, {randn({2, 4, 3, 3}, 1), randn({4}, 2), randn({4}, 3)},
             21);
    EXPECT_EQ(ag::group_count(12, 8), 6u);
    EXPECT_EQ(ag::group_count(4, 8), 4u);
    EXPECT_EQ(ag::group_count(7, 8), 7u);
}

TEST(Autograd, Film) {
    check_op([](const auto& v) { return ag::film(v[0], v[1]); }, {randn({2, 3, 2, 2}, 1), randn({2, 6}, 2)}, 22);
    check_op([](const auto& v) { return ag::film(v[0], v[1]); }, {randn({2, 3, 2, 2}, 3), randn({2, 6, 2, 2}, 4)}, 23);
}

TEST(Autograd, PoolUpsampleConcat) {
    check_op([](const auto& v) { return ag::avg_pool2(v[0]); }, {randn({2, 2, 4, 6}, 1)}, 24);
    check_op([](const auto& v) { return ag::upsample2(v[0]); }, {randn({2, 2, 2, 3}, 2)}, 25);
    check_op([](const auto& v) { return ag::concat_channels(v[0], v[1]); }, {randn({2, 2, 2, 2}, 3), randn({2, 3, 2, 2}, 4)}, 26);
    EXPECT_THROW(ag::avg_pool2(Var(Tensor({1, 1, 3, 4}))), ShapeError);
}

TEST(Autograd, TokensAndStack) {
    check_op([](const auto& v) { return ag::to_tokens(v[0]); }, {randn({2, 3, 2, 2}, 1)}, 27);
    check_op([](const auto& v) { return ag::from_tokens(v[0], 2, 3); }, {randn({2, 6, 4}, 2)}, 28);
    check_op([](const auto& v) { return ag::stack({v[0], v[1]}); }, {randn({2, 3}, 3), randn({2, 3}, 4)}, 29);
}

TEST(Autograd, ReplaceMasked) {
    check_op([](const auto& v) { return ag::replace_masked(v[0], v[1], {true, false, true}); }, {randn({3, 2, 2, 2}, 1), randn({2}, 2)},
             30);
    check_op([](const auto& v) { return ag::replace_masked(v[0], v[1], {false, true}); }, {randn({2, 3, 4}, 3), randn({4}, 4)}, 31);
}

TEST(Autograd, MultiHeadAttention) {
    check_op([](const auto& v) { return ag::multi_head_attention(v[0], v[1], v[2], 2); },
             {randn({2, 5, 4}, 1), randn({2, 3, 4}, 2), randn({2, 3, 4}, 3)}, 32);
}

TEST(Autograd, AttentionRowsAreConvexCombinations) {
    // Identical values: every output row equals that value.
    Tensor V({1, 3, 2});
    for (std::size_t k = 0; k < 3; ++k) {
        V.at(k, 0) = 0.5;
        V.at(k, 1) = -2.0;
    }
    const auto out = ag::multi_head_attention(Var(randn({1, 4, 2}, 1)), Var(randn({1, 3, 2}, 2)), Var(V), 1).value();
    for (std::size_t r = 0; r < 4; ++r) {
        EXPECT_NEAR(out.at(r, 0), 0.5, 1e-14);
        EXPECT_NEAR(out.at(r, 1), -2.0, 1e-14);
    }
}

TEST(Autograd, GatedAdd) {
    check_op([](const auto& v) { return ag::gated_add(v[0], v[1], v[2]); }, {randn({1, 2, 2, 2}, 1), randn({1, 2, 2, 2}, 2), randn({1}, 3)},
             33);
    // Closed gate: signed zeros survive.
    Tensor x({1, 1, 1, 2}, std::vector<double>{-0.0, 1.0});
    const auto y = ag::gated_add(Var(x), Var(Tensor({1, 1, 1, 2}, 5.0)), Var(Tensor({1}, 0.0))).value();
    EXPECT_TRUE(std::signbit(y[0]));
    // The gate still receives gradient at zero.
    Var a(Tensor({1}, 0.0), true);
    ag::backward(ag::weighted_sum(ag::gated_add(Var(x), Var(Tensor({1, 1, 1, 2}, 5.0)), a), Tensor({1, 1, 1, 2}, 1.0)));
    EXPECT_DOUBLE_EQ(a.grad()[0], 10.0);
}

TEST(Autograd, SparseAndPooling) {
    ag::SparseRows A;
    A.n = 3;
    A.rows = {{{0, 0.5}, {2, -1.0}}, {{1, 2.0}, {2, 0.25}}, {{0, -1.0}, {1, 0.25}}};  // symmetric
    check_op([&](const auto& v) { return ag::sparse_left_multiply(A, v[0]); }, {randn({3, 2}, 1)}, 34);
    const std::vector<std::vector<std::size_t>> sets{{0}, {1, 2}, {0, 1, 2}};
    check_op([&](const auto& v) { return ag::index_mean(v[0], sets); }, {randn({3, 4}, 2)}, 35);
    check_op([](const auto& v) { return ag::repeat_rows(v[0], 3); }, {randn({4}, 3)}, 36);
}

TEST(Autograd, GradientsAccumulateAcrossUses) {
    Var x(Tensor({2}, std::vector<double>{1.0, 2.0}), true);
    ag::backward(ag::weighted_sum(ag::add(x, ag::scale(x, 3.0)), Tensor({2}, 1.0)));
    EXPECT_EQ(x.grad()[0], 4.0);
    EXPECT_EQ(x.grad()[1], 4.0);
}

TEST(Autograd, NoGradBuildsNoGraph) {
    Var x(Tensor({2}, 1.0), true);
    Var y;
    {
        ag::NoGradGuard ng;
        y = ag::silu(x);
    }
    EXPECT_FALSE(y.requires_grad());
    EXPECT_TRUE(ag::grad_mode());
    EXPECT_THROW(ag::backward(ag::silu(x)), ShapeError);
}
