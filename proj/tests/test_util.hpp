#ifndef GIF_TESTS_TEST_UTIL_HPP
#define GIF_TESTS_TEST_UTIL_HPP

#include <chrono>
#include <cmath>
#include <filesystem>
#include <functional>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "gif/condnet.hpp"
#include "gif/design.hpp"
#include "gif/diffusion.hpp"
#include "gif/netgraph.hpp"
#include "gif/rng.hpp"
#include "gif/tensor.hpp"

namespace testutil {

using gif::Rng;
using gif::Tensor;

inline Tensor uniform_tensor(gif::Shape s, Rng rng, double lo = 0.0, double hi = 1.0) {
    Tensor t(std::move(s));
    for (auto& v : t.vec()) v = rng.uniform(lo, hi);
    return t;
}

inline Tensor normal_tensor(gif::Shape s, Rng rng) {
    Tensor t(std::move(s));
    for (auto& v : t.vec()) v = rng.normal();
    return t;
}

struct RandomNetlist {
    gif::graph::NetlistAttributes attrs;
    std::vector<gif::BBox> placement;
};

/// Up to `max_inst` instances and `max_nets` nets with 1..max_fanout+1 pins each.
inline RandomNetlist random_netlist(Rng rng, std::size_t max_inst = 20, std::size_t max_nets = 30, std::size_t max_fanout = 5) {
    RandomNetlist r;
    const std::size_t n = 1 + rng.below(max_inst), nets = 1 + rng.below(max_nets);
    for (std::size_t i = 0; i < n; ++i) {
        r.attrs.nodes.push_back({"U" + std::to_string(i), "INV"});
        const double x = rng.uniform(0, 30), y = rng.uniform(0, 30);
        r.placement.push_back({x, y, x + rng.uniform(0.5, 2), y + rng.uniform(0.5, 1)});
    }
    for (std::size_t k = 0; k < nets; ++k) {
        r.attrs.net_names.push_back("n" + std::to_string(k));
        const std::size_t pins = 1 + rng.below(max_fanout + 1);
        for (std::size_t p = 0; p < pins; ++p)
            r.attrs.pins.push_back({"P" + std::to_string(k) + "_" + std::to_string(p), k, static_cast<std::size_t>(rng.below(n))});
    }
    return r;
}

/// Model used by the gradient check: 8x8 input, channels [8,16,32], D=8, K=4.
inline gif::nn::ModelConfig tiny_model() {
    gif::nn::ModelConfig m;
    m.in_features = 34;
    m.channels = {8, 16, 32};
    m.time_dim = 16;
    m.film_hidden = 8;
    m.gcn_hidden = 8;
    m.token_dim = 8;
    m.tokens = 4;
    m.heads = 4;
    return m;
}

/// A fixed batch and loss for the tiny model. Items: two conditioned at low
/// and high t, one with both conditions dropped.
struct TinyProblem {
    gif::diff::NoiseSchedule sched = gif::diff::make_schedule(20, gif::diff::ScheduleKind::cosine);
    std::vector<gif::nn::GraphInput> graphs;
    Tensor features, y0, eps, x_t;
    std::vector<int> t{1, 2, 15};
    std::vector<bool> drop{false, false, true};

    explicit TinyProblem(Rng rng, std::size_t H = 8) {
        const std::size_t N = t.size();
        for (std::size_t n = 0; n < N; ++n) {
            auto nl = random_netlist(rng.split(100 + n), 10, 12, 4);
            graphs.push_back(gif::nn::prepare_graph(gif::graph::build_graph(nl.attrs, nl.placement), 4, gif::nn::PoolMode::topk));
        }
        features = uniform_tensor({N, 34, H, H}, rng.split("f"));
        y0 = uniform_tensor({N, 1, H, H}, rng.split("y"), -0.9, 0.1);
        eps = normal_tensor({N, 1, H, H}, rng.split("e"));
        x_t = Tensor::zeros_like(y0);
        const std::size_t P = H * H;
        for (std::size_t n = 0; n < N; ++n) {
            const double ab = sched.alpha_bar[static_cast<std::size_t>(t[n])];
            for (std::size_t i = n * P; i < (n + 1) * P; ++i) x_t[i] = std::sqrt(ab) * y0[i] + std::sqrt(1 - ab) * eps[i];
        }
    }

    gif::ag::Var loss(const gif::nn::Denoiser& m) const {
        std::vector<const gif::nn::GraphInput*> gp;
        for (const auto& g : graphs) gp.push_back(&g);
        const auto e = m.forward(x_t, t, {features, gp, drop});
        return gif::diff::diffusion_loss(e, eps, x_t, y0, t, sched, 0.1, 0.15);
    }
};

struct GradCheckReport {
    std::size_t checked = 0;
    std::size_t groups = 0, groups_covered = 0;
    std::size_t failures = 0;
    double max_rel = 0.0;  // over entries with |gradient| >= 1e3 * abs_floor
    std::string worst;
    double seconds = 0.0;
};

/// Central differences on a random `fraction` of parameter entries plus at
/// least one entry of every parameter tensor. An entry passes when
/// |a - n| <= tol * max(|a|, |n|) or |a - n| <= abs_floor.
inline GradCheckReport gradient_check(gif::nn::Denoiser& model, const std::function<gif::ag::Var(const gif::nn::Denoiser&)>& loss,
                                      Rng pick, double fraction = 0.01, double h = 1e-5, double tol = 1e-4, double abs_floor = 1e-9) {
    const auto t0 = std::chrono::steady_clock::now();
    auto& ps = model.params();
    ps.zero_grad();
    gif::ag::backward(loss(model));
    std::vector<std::vector<std::size_t>> chosen(ps.size());
    for (std::size_t k = 0; k < ps.size(); ++k) {
        const std::size_t n = ps.all()[k].var.value().size();
        for (std::size_t i = 0; i < n; ++i)
            if (pick.uniform() < fraction) chosen[k].push_back(i);
        if (chosen[k].empty()) chosen[k].push_back(static_cast<std::size_t>(pick.below(n)));
    }
    GradCheckReport rep;
    rep.groups = ps.size();
    gif::ag::NoGradGuard ng;
    for (std::size_t k = 0; k < ps.size(); ++k) {
        auto& node = *ps.all()[k].var.node();
        const Tensor analytic = node.grad.empty() ? Tensor::zeros_like(node.value) : node.grad;
        for (std::size_t i : chosen[k]) {
            const double w = node.value[i];
            node.value[i] = w + h;
            const double lp = loss(model).value()[0];
            node.value[i] = w - h;
            const double lm = loss(model).value()[0];
            node.value[i] = w;
            const double num = (lp - lm) / (2 * h), a = analytic[i];
            const double diff = std::abs(a - num), scale = std::max(std::abs(a), std::abs(num));
            ++rep.checked;
            const bool ok = diff <= tol * scale || diff <= abs_floor;
            if (!ok) ++rep.failures;
            if (scale >= 1e3 * abs_floor && diff / scale > rep.max_rel) {
                rep.max_rel = diff / scale;
                rep.worst = ps.all()[k].name + "[" + std::to_string(i) + "] analytic " + std::to_string(a) + " numeric " + std::to_string(num);
            }
        }
        ++rep.groups_covered;
    }
    rep.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return rep;
}

/// Moves every parameter off its initializer so that zero-initialized
/// branches and gates carry gradient.
inline void perturb_params(gif::nn::Denoiser& m, Rng rng, double scale = 0.2) {
    for (auto& p : m.params().all()) {
        Rng r = rng.split(std::string_view(p.name));
        for (auto& v : p.var.node()->value.vec()) v += scale * r.normal();
    }
}

/// Two instance groups far apart, each with its own nets, so the two net
/// sets never touch the same tile.
inline gif::SyntheticDesign two_islands(Rng rng) {
    gif::SyntheticDesign d;
    d.grid_h = d.grid_w = 24;
    d.pads = gif::regular_pads(24, 24, 8);
    for (std::size_t i = 0; i < 20; ++i) {
        gif::Instance inst;
        inst.id = i;
        inst.name = "U" + std::to_string(i);
        inst.cell_type = "INV";
        const double x0 = i < 10 ? 1.0 : 14.0;
        const double x = x0 + rng.uniform(0, 8), y = 1 + rng.uniform(0, 20);
        inst.bbox = {x, y, x + 1, y + 1};
        inst.p_internal = inst.p_switching = inst.p_leakage = 0.1;
        inst.toggle_rate = 0.5;
        inst.window = {0};
        d.instances.push_back(inst);
    }
    for (std::size_t n = 0; n < 12; ++n) {
        gif::Net net;
        net.id = n;
        net.name = "n" + std::to_string(n);
        const std::size_t base = n < 6 ? 0 : 10;
        const std::size_t a = base + rng.below(10);
        std::size_t b = base + rng.below(10);
        if (b == a) b = base + (a - base + 1) % 10;
        net.pins = {{a, "A"}, {b, "Z"}};
        d.nets.push_back(net);
    }
    gif::refresh_pin_counts(d);
    return d;
}

/// Copy of `d` keeping nets [lo, hi).
inline gif::SyntheticDesign with_nets(const gif::SyntheticDesign& d, std::size_t lo, std::size_t hi) {
    gif::SyntheticDesign e = d;
    e.nets.assign(d.nets.begin() + static_cast<std::ptrdiff_t>(lo), d.nets.begin() + static_cast<std::ptrdiff_t>(hi));
    gif::refresh_pin_counts(e);
    return e;
}

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path temp_dir(const std::string& name) {
    auto p = std::filesystem::temp_directory_path() / ("gif_test_" + name);
    std::filesystem::remove_all(p);
    std::filesystem::create_directories(p);
    return p;
}

}  // namespace testutil

#endif  // GIF_TESTS_TEST_UTIL_HPP
