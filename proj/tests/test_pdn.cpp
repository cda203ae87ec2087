#include <gtest/gtest.h>

#include "gif/design.hpp"
#include "gif/features.hpp"
#include "gif/pdn.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace gif;

namespace {

pdn::ConductanceSystem system_for(std::uint64_t seed, std::size_t grid = 16) {
    const auto d = generate_design(seed, grid, grid, 60, 40);
    const auto fs = build_feature_stack(d);
    const pdn::PdnConfig c;
    return pdn::assemble_system(d, pdn::effective_resistance(fs, c.r0, c.beta), pdn::effective_current(fs, d.vdd, c.alpha),
                                c.g_pad_ratio / c.r0, 1.0 / c.r0);
}

double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
    double m = 0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

}  // namespace

TEST(Pdn, SystemIsSymmetricAndDominant) {
    for (std::uint64_t s = 0; s < 5; ++s) {
        const auto sys = system_for(s);
        EXPECT_TRUE(pdn::check_system(sys).empty());
        EXPECT_EQ(sys.G.n, 256u);
        EXPECT_FALSE(sys.pad_nodes.empty());
    }
}

TEST(Pdn, CheckSystemFlagsAsymmetry) {
    auto sys = system_for(1);
    sys.G.val[1] *= 2;
    EXPECT_FALSE(pdn::check_system(sys).empty());
}

TEST(Pdn, ConjugateGradientMatchesDenseAndEigen) {
    for (std::uint64_t s = 0; s < 8; ++s) {
        const auto sys = system_for(100 + s);
        const auto cg = pdn::solve_drop(sys, pdn::SolveMethod::conjugate_gradient);
        const auto dense = pdn::solve_drop(sys, pdn::SolveMethod::dense);
        const auto ref = oracle::eigen_solve(sys.G, sys.current);
        EXPECT_LE(max_abs_diff(cg, dense), 1e-8);
        EXPECT_LE(max_abs_diff(dense, ref), 1e-10);
    }
}

TEST(Pdn, ResidualIsSmall) {
    const auto sys = system_for(3);
    const auto r = pdn::conjugate_gradient(sys.G, sys.current);
    EXPECT_LE(r.relative_residual, 1e-10);
    EXPECT_GT(r.iterations, 0u);
}

TEST(Pdn, ZeroInjectionGivesZeroDrop) {
    auto sys = system_for(4);
    std::fill(sys.current.begin(), sys.current.end(), 0.0);
    for (auto m : {pdn::SolveMethod::conjugate_gradient, pdn::SolveMethod::dense})
        for (double v : pdn::solve_drop(sys, m)) EXPECT_EQ(v, 0.0);
}

TEST(Pdn, SolveIsLinearInInjection) {
    auto sys = system_for(5);
    const auto i1 = sys.current;
    std::vector<double> i2(i1.size());
    Rng r(8);
    for (auto& v : i2) v = r.uniform(0, 0.01);
    auto solve = [&](const std::vector<double>& i) {
        auto s = sys;
        s.current = i;
        return pdn::solve_drop(s, pdn::SolveMethod::dense);
    };
    const auto d1 = solve(i1), d2 = solve(i2);
    std::vector<double> sum(i1.size()), twice(i1.size());
    for (std::size_t k = 0; k < i1.size(); ++k) {
        sum[k] = i1[k] + i2[k];
        twice[k] = 2 * i1[k];
    }
    const auto ds = solve(sum), dt = solve(twice);
    for (std::size_t k = 0; k < i1.size(); ++k) {
        EXPECT_NEAR(ds[k], d1[k] + d2[k], 1e-9);
        EXPECT_NEAR(dt[k], 2 * d1[k], 1e-12 * std::abs(d1[k]) + 1e-300);
    }
}

TEST(Pdn, DropIsNonnegativeAndLowestAtPads) {
    const auto d = generate_design(6, 16, 16, 80, 50);
    const auto fs = build_feature_stack(d);
    const auto y = pdn::ir_label(d, fs, {});
    EXPECT_GE(y.min(), 0.0);
    EXPECT_LT(y.max(), 1.0);
    EXPECT_GT(y.max(), 0.0);
    double pad_max = 0;
    for (const auto& p : d.pads) pad_max = std::max(pad_max, y.at(static_cast<std::size_t>(p.y), static_cast<std::size_t>(p.x)));
    EXPECT_LT(pad_max, y.max());
}

TEST(Pdn, UniformMeshWithOnePadIsSymmetric) {
    SyntheticDesign d;
    d.grid_h = d.grid_w = 9;
    d.pads = {{4, 4}};
    Tensor r({9, 9}, 1.0), i({9, 9}, 1e-3);
    const auto sys = pdn::assemble_system(d, r, i, 100.0);
    const auto drop = pdn::solve_drop(sys, pdn::SolveMethod::dense);
    auto at = [&](int y, int x) { return drop[static_cast<std::size_t>(y * 9 + x)]; };
    EXPECT_NEAR(at(0, 0), at(8, 8), 1e-13);
    EXPECT_NEAR(at(0, 8), at(8, 0), 1e-13);
    EXPECT_NEAR(at(2, 5), at(5, 2), 1e-13);
    EXPECT_GT(at(0, 0), at(4, 4));
    // All current leaves through the pad.
    EXPECT_NEAR(100.0 * at(4, 4), 81e-3, 1e-13);
}

TEST(Pdn, EffectiveMapsFollowTheirFormulas) {
    Tensor p({1, 2}, std::vector<double>{2, 4}), z({1, 2}), one({1, 2}, 1.0);
    const auto i = pdn::effective_current(p, one, z, z, one, 2.0, {0.5, 0.1, 0.1, 0.25});
    EXPECT_DOUBLE_EQ(i[0], 1.0 + 0.5 + 0.25);
    EXPECT_DOUBLE_EQ(i[1], 2.0 + 0.5 + 0.25);
    const auto r = pdn::effective_resistance(one, z, one, z, 0.01, {0.5, 1, 0.25, 1});
    EXPECT_DOUBLE_EQ(r[0], 0.01 * 1.75);
    EXPECT_THROW(pdn::effective_resistance(one, z, one, z, 0.0, {0, 0, 0, 0}), ConfigError);
    EXPECT_THROW(pdn::effective_current(p, one, z, z, one, 1.0, {-1, 0, 0, 0}), ConfigError);
}

TEST(Pdn, RejectsMissingPadsAndBadResistance) {
    SyntheticDesign d;
    d.grid_h = d.grid_w = 4;
    Tensor r({4, 4}, 1.0), i({4, 4});
    EXPECT_THROW(pdn::assemble_system(d, r, i, 1.0), DataError);
    d.pads = {{0, 0}};
    r[3] = 0.0;
    EXPECT_THROW(pdn::assemble_system(d, r, i, 1.0), DataError);
}

TEST(Pdn, UnderProvisionedGridIsANumericError) {
    SyntheticDesign d;
    d.grid_h = d.grid_w = 8;
    d.pads = {{0, 0}};
    Tensor r({8, 8}, 1.0), i({8, 8}, 1.0);
    const auto sys = pdn::assemble_system(d, r, i, 1.0);
    EXPECT_THROW(pdn::solve_ir(sys, 1.0), NumericError);
}

TEST(Design, GeneratorIsDeterministicAndValid) {
    const auto a = generate_design(11, 32, 32, 200, 150), b = generate_design(11, 32, 32, 200, 150);
    EXPECT_EQ(design_to_json(a), design_to_json(b));
    EXPECT_TRUE(validate_design(a).empty());
    EXPECT_NE(design_to_json(a), design_to_json(generate_design(12, 32, 32, 200, 150)));
}

TEST(Design, JsonRoundTrip) {
    const auto d = generate_design(2, 16, 16, 30, 20);
    const auto dir = testutil::temp_dir("design");
    save_design(dir / "d.json", d);
    const auto e = load_design(dir / "d.json");
    EXPECT_EQ(design_to_json(d), design_to_json(e));
}

TEST(Design, ValidationCatchesBrokenInvariants) {
    auto d = generate_design(2, 16, 16, 30, 20);
    d.instances[0].toggle_rate = 2.0;
    d.instances[1].window.clear();
    d.instances[2].bbox.r = 99;
    const auto v = validate_design(d);
    EXPECT_GE(v.size(), 3u);
    EXPECT_THROW(require_valid(d), DataError);
}

TEST(Design, TooDenseGridIsRejected) {
    EXPECT_THROW(generate_design(1, 8, 8, 10000, 10), DataError);
    EXPECT_THROW(generate_design(1, 4, 4, 10, 10), DataError);
}

TEST(Design, RegularPadsAreOffsetByHalfPitch) {
    const auto p = regular_pads(16, 16, 8);
    ASSERT_EQ(p.size(), 4u);
    EXPECT_EQ(p[0], (TileCoord{4, 4}));
    EXPECT_EQ(p[3], (TileCoord{12, 12}));
}
