#include <gtest/gtest.h>

#include <cstring>

#include "gif/condnet.hpp"
#include "test_util.hpp"

using namespace gif;
using testutil::TinyProblem;
using ag::Var;

namespace {

nn::Denoiser tiny_denoiser(std::uint64_t seed, const diff::NoiseSchedule& s) {
    nn::Denoiser m(testutil::tiny_model(), Rng(seed));
    m.set_output_schedule(s.alpha_bar);
    return m;
}

bool bit_identical(const Tensor& a, const Tensor& b) {
    return a.shape() == b.shape() && std::memcmp(a.ptr(), b.ptr(), a.size() * sizeof(double)) == 0;
}

}  // namespace

TEST(Denoiser, OutputShapeMatchesInput) {
    TinyProblem p(Rng(1));
    auto m = tiny_denoiser(1, p.sched);
    std::vector<const nn::GraphInput*> gp{&p.graphs[0], &p.graphs[1], &p.graphs[2]};
    const auto e = m.forward(p.x_t, p.t, {p.features, gp, p.drop});
    EXPECT_EQ(e.value().shape(), p.x_t.shape());
    EXPECT_TRUE(e.value().all_finite());
}

TEST(Denoiser, RejectsBadResolutionAndShapes) {
    TinyProblem p(Rng(1));
    auto m = tiny_denoiser(1, p.sched);
    std::vector<const nn::GraphInput*> gp{&p.graphs[0], &p.graphs[1], &p.graphs[2]};
    Tensor odd({3, 1, 6, 6});
    EXPECT_THROW(m.forward(odd, p.t, {Tensor({3, 34, 6, 6}), gp, p.drop}), ShapeError);
    EXPECT_THROW(m.forward(p.x_t, p.t, {Tensor({3, 24, 8, 8}), gp, p.drop}), ShapeError);
    EXPECT_THROW(m.forward(p.x_t, {1, 2}, {p.features, gp, p.drop}), ShapeError);
}

TEST(Denoiser, VelocityOutputNeedsSchedule) {
    TinyProblem p(Rng(1));
    nn::Denoiser m(testutil::tiny_model(), Rng(1));
    std::vector<const nn::GraphInput*> gp{&p.graphs[0], &p.graphs[1], &p.graphs[2]};
    EXPECT_THROW(m.forward(p.x_t, p.t, {p.features, gp, p.drop}), ConfigError);
}

TEST(Denoiser, GradientsMatchCentralDifferences) {
    TinyProblem p(Rng(7));
    auto m = tiny_denoiser(3, p.sched);
    testutil::perturb_params(m, Rng(11));
    const auto rep = testutil::gradient_check(m, [&](const nn::Denoiser& d) { return p.loss(d); }, Rng(5), 0.01);
    EXPECT_EQ(rep.groups_covered, rep.groups);
    EXPECT_EQ(rep.failures, 0u) << "worst: " << rep.worst << " rel " << rep.max_rel;
    EXPECT_LT(rep.max_rel, 1e-4);
}

TEST(Denoiser, EpsOutputGradients) {
    TinyProblem p(Rng(8));
    auto cfg = testutil::tiny_model();
    cfg.output = nn::OutputKind::eps;
    nn::Denoiser m(cfg, Rng(4));
    testutil::perturb_params(m, Rng(12));
    const auto rep = testutil::gradient_check(m, [&](const nn::Denoiser& d) { return p.loss(d); }, Rng(6), 0.005);
    EXPECT_EQ(rep.failures, 0u) << rep.worst;
}

class ZeroGate : public ::testing::TestWithParam<std::size_t> {};

TEST_P(ZeroGate, TokensHaveNoEffectWhenGatesAreClosed) {
    const std::size_t H = GetParam();
    TinyProblem p(Rng(9), H);
    auto m = tiny_denoiser(2, p.sched);
    testutil::perturb_params(m, Rng(3));
    for (const auto& g : m.gate_names()) m.params()[g].node()->value.fill(0.0);
    ag::NoGradGuard ng;
    const std::vector<bool> none(3, false), all(3, true);
    Var tokens(testutil::normal_tensor({3, 4, 8}, Rng(77)));
    const auto with_tokens = m.forward_with_tokens(p.x_t, p.t, p.features, tokens, none, none).value();
    const auto with_null = m.forward_with_tokens(p.x_t, p.t, p.features, tokens, none, all).value();
    EXPECT_TRUE(bit_identical(with_tokens, with_null));
    // And an open gate does make a difference.
    m.params()["attn_mid.gate"].node()->value.fill(0.5);
    const auto open = m.forward_with_tokens(p.x_t, p.t, p.features, tokens, none, none).value();
    EXPECT_FALSE(bit_identical(open, with_null));
}

INSTANTIATE_TEST_SUITE_P(Resolutions, ZeroGate, ::testing::Values(32, 64));

TEST(Denoiser, DropReplacesBothConditions) {
    TinyProblem p(Rng(4));
    auto m = tiny_denoiser(5, p.sched);
    testutil::perturb_params(m, Rng(5));
    ag::NoGradGuard ng;
    std::vector<const nn::GraphInput*> gp{&p.graphs[0], &p.graphs[1], &p.graphs[2]};
    const std::vector<bool> drop(3, true);
    const auto a = m.forward(p.x_t, p.t, {p.features, gp, drop}).value();
    Tensor other = testutil::uniform_tensor(p.features.shape(), Rng(99));
    const std::vector<const nn::GraphInput*> no_graph(3, nullptr);
    const auto b = m.forward(p.x_t, p.t, {other, no_graph, drop}).value();
    EXPECT_TRUE(bit_identical(a, b));
}

TEST(Denoiser, InitIsDeterministicPerSeed) {
    const auto s = diff::make_schedule(10, diff::ScheduleKind::cosine);
    auto a = tiny_denoiser(42, s), b = tiny_denoiser(42, s), c = tiny_denoiser(43, s);
    const auto va = a.params().values(), vb = b.params().values(), vc = c.params().values();
    bool differs = false;
    for (std::size_t k = 0; k < va.size(); ++k) {
        EXPECT_TRUE(bit_identical(va[k], vb[k]));
        differs = differs || !bit_identical(va[k], vc[k]);
    }
    EXPECT_TRUE(differs);
}

TEST(Denoiser, GatesAndFilmOutputsStartAtZero) {
    const auto s = diff::make_schedule(10, diff::ScheduleKind::cosine);
    auto m = tiny_denoiser(1, s);
    for (const auto& g : m.gate_names()) EXPECT_EQ(m.params()[g].value()[0], 0.0);
    for (const auto& p : m.params().all())
        if (p.name.find(".tfilm.") != std::string::npos || p.name.find(".xfilm2.") != std::string::npos) {
            for (double v : p.var.value().vec()) EXPECT_EQ(v, 0.0) << p.name;
        }
}

TEST(Checkpoint, RoundTripIsExact) {
    const auto s = diff::make_schedule(10, diff::ScheduleKind::cosine);
    auto a = tiny_denoiser(1, s), b = tiny_denoiser(2, s);
    testutil::perturb_params(a, Rng(3));
    const auto dir = testutil::temp_dir("ckpt");
    nn::save_params(dir / "p.gift", a.params(), {{"step", 5}});
    const auto extra = nn::load_params(dir / "p.gift", b.params());
    EXPECT_EQ(extra["step"], 5);
    const auto va = a.params().values(), vb = b.params().values();
    for (std::size_t k = 0; k < va.size(); ++k) EXPECT_TRUE(bit_identical(va[k], vb[k]));
}

TEST(Checkpoint, MismatchedModelIsRejected) {
    const auto s = diff::make_schedule(10, diff::ScheduleKind::cosine);
    auto a = tiny_denoiser(1, s);
    auto cfg = testutil::tiny_model();
    cfg.channels = {8, 16};
    nn::Denoiser b(cfg, Rng(1));
    const auto dir = testutil::temp_dir("ckpt_mismatch");
    nn::save_params(dir / "p.gift", a.params());
    EXPECT_THROW(nn::load_params(dir / "p.gift", b.params()), FormatError);
}

TEST(GraphEncoder, NormalizedAdjacencyOfPath) {
    graph::DesignGraph g;
    g.node_features = Tensor({3, 7}, 1.0);
    g.edges = {{0, 1}, {1, 2}};
    const auto A = nn::normalized_adjacency(g);
    // degrees with self loops: 2, 3, 2
    auto entry = [&](std::size_t i, std::size_t j) {
        for (const auto& [c, v] : A.rows[i])
            if (c == j) return v;
        return 0.0;
    };
    EXPECT_DOUBLE_EQ(entry(0, 0), 0.5);
    EXPECT_DOUBLE_EQ(entry(1, 1), 1.0 / 3.0);
    EXPECT_DOUBLE_EQ(entry(0, 1), 1.0 / std::sqrt(6.0));
    EXPECT_DOUBLE_EQ(entry(1, 0), entry(0, 1));
    EXPECT_EQ(entry(0, 2), 0.0);
}

TEST(GraphEncoder, TopkPoolingOrdersByDegreeThenIndex) {
    const std::vector<std::size_t> deg{1, 3, 3, 0, 2};
    const auto sets = nn::pooling_sets(deg, 3, nn::PoolMode::topk);
    ASSERT_EQ(sets.size(), 3u);
    EXPECT_EQ(sets[0], std::vector<std::size_t>{1});
    EXPECT_EQ(sets[1], std::vector<std::size_t>{2});
    EXPECT_EQ(sets[2], std::vector<std::size_t>{4});
}

TEST(GraphEncoder, TopkPadsWithMeanOfAllNodes) {
    Tensor H({2, 2}, std::vector<double>{1, 2, 3, 6});
    const auto tok = nn::pool_tokens(H, {0, 1}, 3, nn::PoolMode::topk);
    EXPECT_EQ(tok.at(0, 0), 3.0);
    EXPECT_EQ(tok.at(1, 0), 1.0);
    EXPECT_EQ(tok.at(2, 0), 2.0);
    EXPECT_EQ(tok.at(2, 1), 4.0);
}

TEST(GraphEncoder, PoolingIsPermutationInvariant) {
    // Relabel nodes: same multiset of (degree, embedding) rows gives the same
    // tokens when degrees are distinct.
    Tensor H({4, 2}, std::vector<double>{1, 0, 2, 0, 3, 0, 4, 0});
    const std::vector<std::size_t> deg{3, 1, 2, 0};
    Tensor Hp({4, 2}, std::vector<double>{4, 0, 2, 0, 1, 0, 3, 0});
    const std::vector<std::size_t> degp{0, 1, 3, 2};
    for (auto mode : {nn::PoolMode::topk, nn::PoolMode::mean}) {
        const auto a = nn::pool_tokens(H, deg, 2, mode), b = nn::pool_tokens(Hp, degp, 2, mode);
        EXPECT_EQ(a.vec(), b.vec());
    }
}

TEST(GraphEncoder, MeanPoolingBucketsCoverAllNodes) {
    const std::vector<std::size_t> deg{5, 4, 3, 2, 1};
    const auto sets = nn::pooling_sets(deg, 2, nn::PoolMode::mean);
    EXPECT_EQ(sets[0], (std::vector<std::size_t>{0, 1}));
    EXPECT_EQ(sets[1], (std::vector<std::size_t>{2, 3, 4}));
    const auto many = nn::pooling_sets(deg, 8, nn::PoolMode::mean);
    std::size_t empty_buckets = 0;
    for (const auto& s : many) empty_buckets += s.size() == 5;
    EXPECT_EQ(empty_buckets, 3u);
}

TEST(GraphEncoder, NodeFeatureNormalizationIsColumnwise) {
    Tensor x({3, 2}, std::vector<double>{0, 5, 5, 5, 10, 5});
    const auto n = nn::normalize_node_features(x);
    EXPECT_EQ(n.at(0, 0), 0.0);
    EXPECT_EQ(n.at(1, 0), 0.5);
    EXPECT_EQ(n.at(2, 0), 1.0);
    EXPECT_EQ(n.at(1, 1), 0.0);
}

TEST(Timestep, FeaturesAreSinCos) {
    const auto f = nn::timestep_features({0, 3}, 4);
    EXPECT_EQ(f.at(0, 0), 0.0);
    EXPECT_EQ(f.at(0, 2), 1.0);
    EXPECT_DOUBLE_EQ(f.at(1, 0), std::sin(3.0));
    EXPECT_DOUBLE_EQ(f.at(1, 1), std::sin(3.0 * std::exp(-std::log(10000.0) / 2)));
}

TEST(ModelConfig, ValidationCatchesBadWidths) {
    auto c = testutil::tiny_model();
    c.heads = 3;
    EXPECT_THROW(c.validate(), ConfigError);
    c = testutil::tiny_model();
    c.channels.clear();
    EXPECT_THROW(c.validate(), ConfigError);
    c = testutil::tiny_model();
    c.time_dim = 7;
    EXPECT_THROW(c.validate(), ConfigError);
}
