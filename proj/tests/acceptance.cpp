// Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any FAIL.
//
//   gif_acceptance --workdir DIR [--only 1,2,9] [--steps N]

#include <chrono>
#include <cstdio>
#include <cstring>
#include <ctime>
#include <fstream>
#include <functional>

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include "gif/experiment.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace gif;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string format(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

double cpu_seconds() { return static_cast<double>(std::clock()) / CLOCKS_PER_SEC; }

bool bit_identical(const Tensor& a, const Tensor& b) {
    return a.shape() == b.shape() && std::memcmp(a.ptr(), b.ptr(), a.size() * sizeof(double)) == 0;
}

pdn::ConductanceSystem system_for(std::uint64_t seed) {
    const auto d = generate_design(seed, 16, 16, 60, 40);
    const auto fs = build_feature_stack(d);
    const pdn::PdnConfig c;
    return pdn::assemble_system(d, pdn::effective_resistance(fs, c.r0, c.beta), pdn::effective_current(fs, d.vdd, c.alpha),
                                c.g_pad_ratio / c.r0, 1.0 / c.r0);
}

// ------------------------------------------------------------------ 1-8

Outcome solver_agreement() {
    const auto t0 = std::chrono::steady_clock::now();
    double worst = 0;
    for (std::uint64_t s = 0; s < 20; ++s) {
        const auto sys = system_for(5000 + s);
        const auto cg = pdn::solve_drop(sys, pdn::SolveMethod::conjugate_gradient);
        const auto dense = pdn::solve_drop(sys, pdn::SolveMethod::dense);
        for (std::size_t i = 0; i < cg.size(); ++i) worst = std::max(worst, std::abs(cg[i] - dense[i]));
    }
    const double sec = seconds_since(t0);
    return {worst <= 1e-8 && sec < 5.0, format("20 designs, max |cg - dense| %.3g, %.2f s", worst, sec)};
}

Outcome solver_linearity() {
    double zero = 0, sup = 0, dbl = 0;
    for (std::uint64_t s = 0; s < 5; ++s) {
        auto sys = system_for(6000 + s);
        const auto i1 = sys.current;
        std::vector<double> i2(i1.size()), sum(i1.size()), twice(i1.size());
        Rng r(s);
        for (std::size_t k = 0; k < i1.size(); ++k) {
            i2[k] = r.uniform(0, 2 * i1[k] + 1e-3);
            sum[k] = i1[k] + i2[k];
            twice[k] = 2 * i1[k];
        }
        for (auto m : {pdn::SolveMethod::conjugate_gradient, pdn::SolveMethod::dense}) {
            auto solve = [&](const std::vector<double>& i) {
                auto c = sys;
                c.current = i;
                return pdn::solve_drop(c, m);
            };
            for (double v : solve(std::vector<double>(i1.size(), 0.0))) zero = std::max(zero, std::abs(v));
            const auto d1 = solve(i1), d2 = solve(i2), ds = solve(sum), dt = solve(twice);
            for (std::size_t k = 0; k < i1.size(); ++k) {
                sup = std::max(sup, std::abs(ds[k] - d1[k] - d2[k]));
                dbl = std::max(dbl, std::abs(dt[k] - 2 * d1[k]) / std::abs(2 * d1[k]));
            }
        }
    }
    return {zero == 0.0 && sup <= 1e-9 && dbl <= 1e-12,
            format("zero drop %.3g, superposition %.3g, doubling rel %.3g", zero, sup, dbl)};
}

Outcome feature_conservation() {
    double p_rel = 0, slot = 0;
    for (std::uint64_t s = 0; s < 10; ++s) {
        const auto d = generate_design(7000 + s, 32, 32, 200, 150);
        const auto p = build_power_channels(d, power_report_from(d));
        double total = 0;
        for (const auto& i : d.instances) total += i.p_internal + i.p_switching + i.p_leakage;
        p_rel = std::max(p_rel, std::abs(p.channel(ch::p_all).sum() - total) / total);
        for (std::size_t y = 0; y < 32; ++y)
            for (std::size_t x = 0; x < 32; ++x) {
                double acc = 0;
                for (int k = 0; k < kTimeSlots; ++k) acc += p.at(ch::p_t0 + static_cast<std::size_t>(k), y, x);
                slot = std::max(slot, std::abs(acc - p.at(ch::p_sca, y, x)));
            }
    }
    bool additive = true;
    for (std::uint64_t s = 0; s < 10; ++s) {
        const auto d = testutil::two_islands(Rng(s));
        const auto a = testutil::with_nets(d, 0, 6), b = testutil::with_nets(d, 6, 12);
        additive = additive && rudy_map(d) == rudy_map(a) + rudy_map(b) && pin_rudy_map(d) == pin_rudy_map(a) + pin_rudy_map(b);
    }
    return {p_rel <= 1e-9 && slot <= 1e-9 && additive,
            format("power rel %.3g, time slots %.3g, RUDY additivity %s", p_rel, slot, additive ? "exact" : "broken")};
}

Outcome graph_construction() {
    Rng rng(2024);
    std::size_t mismatches = 0;
    for (int k = 0; k < 100; ++k) {
        const auto nl = testutil::random_netlist(rng.split(static_cast<std::uint64_t>(k)));
        const auto g = graph::build_graph(nl.attrs, nl.placement);
        if (std::set<std::pair<std::size_t, std::size_t>>(g.edges.begin(), g.edges.end()) != oracle::brute_force_edges(nl.attrs))
            ++mismatches;
    }
    graph::NetlistAttributes a;
    a.pins = {{"I", 0, 0}, {"P1", 1, 0}, {"P3", 1, 1}, {"P4", 2, 1}};
    a.net_names = {"a", "n1", "out"};
    a.nodes = {{"NAND_1", "NAND"}, {"INV_1", "INV"}};
    const auto g = graph::build_graph(a, {{0, 0, 1, 1}, {2, 0, 3, 1}});
    const bool example = g.edges == std::vector<std::pair<std::size_t, std::size_t>>{{0, 1}};
    return {mismatches == 0 && example, format("%zu/100 netlists differ from brute force, two-gate example %s", mismatches,
                                            example ? "gives edge (0,1)" : "wrong")};
}

Outcome gradient_check() {
    testutil::TinyProblem p(Rng(7));
    nn::Denoiser m(testutil::tiny_model(), Rng(3));
    m.set_output_schedule(p.sched.alpha_bar);
    testutil::perturb_params(m, Rng(11));
    const auto rep = testutil::gradient_check(m, [&](const nn::Denoiser& d) { return p.loss(d); }, Rng(5), 0.01, 1e-5, 1e-4);
    const bool ok = rep.failures == 0 && rep.groups_covered == rep.groups && rep.seconds < 60;
    return {ok, format("%zu entries over %zu/%zu tensors, %zu failures, max rel %.3g, %.1f s", rep.checked, rep.groups_covered,
                    rep.groups, rep.failures, rep.max_rel, rep.seconds)};
}

Outcome zero_gate() {
    std::string detail;
    bool ok = true;
    for (std::size_t H : {32, 64}) {
        testutil::TinyProblem p(Rng(9), H);
        nn::Denoiser m(testutil::tiny_model(), Rng(2));
        m.set_output_schedule(p.sched.alpha_bar);
        testutil::perturb_params(m, Rng(3));
        for (const auto& g : m.gate_names()) m.params()[g].node()->value.fill(0.0);
        ag::NoGradGuard ng;
        const std::vector<bool> none(3, false), all(3, true);
        const ag::Var tokens(testutil::normal_tensor({3, 4, 8}, Rng(77)));
        const bool same = bit_identical(m.forward_with_tokens(p.x_t, p.t, p.features, tokens, none, none).value(),
                                        m.forward_with_tokens(p.x_t, p.t, p.features, tokens, none, all).value());
        ok = ok && same;
        detail += format("%s%zux%zu %s", detail.empty() ? "" : ", ", H, H, same ? "bit-identical" : "differs");
    }
    return {ok, detail};
}

Outcome schedule_checks() {
    bool dec = true;
    double closed = 0, var_err = 0;
    for (int T : {64, 1000}) {
        const auto s = diff::make_schedule(T, diff::ScheduleKind::cosine);
        for (int t = 1; t <= T; ++t) dec = dec && s.alpha_bar[t] < s.alpha_bar[t - 1];
        const double c = 0.008;
        auto f = [&](double t) { return std::pow(std::cos((t / T + c) / (1 + c) * std::numbers::pi / 2), 2); };
        closed = std::max(closed, std::abs(s.alpha_bar[T / 2] - f(T / 2) / f(0)));
        const std::size_t n = 100000;
        for (int t : {1, T / 4, T / 2, T}) {
            const Tensor x = diff::forward_noise(Tensor({n}, 0.3), t, testutil::normal_tensor({n}, Rng(100 + t)), s);
            double m = 0, v = 0;
            for (double a : x.vec()) m += a;
            m /= n;
            for (double a : x.vec()) v += (a - m) * (a - m);
            v /= n - 1;
            var_err = std::max(var_err, std::abs(v / (1 - s.alpha_bar[t]) - 1));
        }
    }
    return {dec && closed <= 1e-12 && var_err <= 0.02,
            format("decreasing %s, closed form err %.3g, variance rel err %.4f", dec ? "yes" : "no", closed, var_err)};
}

Outcome metric_checks() {
    double ssim_err = 0, self = 0, pw = 0;
    for (std::uint64_t s = 0; s < 10; ++s) {
        const Tensor a = testutil::uniform_tensor({16, 16}, Rng(s));
        Tensor b = a;
        Rng r(s + 50);
        for (auto& v : b.vec()) v = std::clamp(v + 0.1 * r.normal(), 0.0, 1.0);
        ssim_err = std::max(ssim_err, std::abs(metrics::ssim(a, b) - oracle::ssim(a, b)));
        self = std::max(self, std::abs(metrics::ssim(a, a) - 1.0));
        for (double e : {metrics::pearson(a, b).value - oracle::pearson(a.vec(), b.vec()),
                         metrics::spearman(a, b).value - oracle::spearman(a.vec(), b.vec()), metrics::mae(a, b) - oracle::mae(a, b),
                         metrics::rmse(a, b) - oracle::rmse(a, b), metrics::psnr(a, b) - oracle::psnr(a, b)})
            pw = std::max(pw, std::abs(e));
    }
    return {ssim_err <= 1e-9 && self <= 1e-9 && pw <= 1e-10,
            format("ssim vs brute force %.3g, |ssim(x,x) - 1| %.3g, other metrics %.3g", ssim_err, self, pw)};
}

// ------------------------------------------------------------------ 9-11

exp::ExperimentConfig pipeline_config(std::uint64_t steps) {
    exp::ExperimentConfig c;
    c.data.seed = 2024;
    c.data.train_count = 256;
    c.data.test_count = 32;
    c.data.grid = 32;
    c.data.instances = 200;
    c.data.nets = 150;
    c.graph.tokens = 16;
    c.model.channels = {8, 16, 32};
    c.model.time_dim = 32;
    c.model.film_hidden = 32;
    c.model.gcn_hidden = 32;
    c.model.token_dim = 32;
    c.diffusion.T = 64;
    c.diffusion.train.lr = 1e-3;
    c.diffusion.train.ema_decay = 0.995;
    c.diffusion.train.batch = 8;
    c.diffusion.train.steps = steps;
    c.diffusion.log_every = 100;
    c.diffusion.checkpoint_every = 500;
    c.diffusion.sample_batch = 32;
    return c;
}

struct PipelineRun {
    double final_loss = 0;
    metrics::EvalReport report;
    std::vector<Tensor> maps;
    double cpu = 0, wall = 0;
};

/// train + sample + eval on an existing dataset.
PipelineRun train_and_score(const exp::ExperimentConfig& cfg, const fs::path& data, const fs::path& dir) {
    PipelineRun r;
    const double c0 = cpu_seconds();
    const auto t0 = std::chrono::steady_clock::now();
    r.final_loss = exp::cmd_train(cfg, data, dir / "train").last.loss.total;
    r.maps = exp::cmd_sample(cfg, data, dir / "train" / "ckpt", dir / "sample").maps;
    r.report = exp::cmd_eval(cfg, data, dir / "sample" / "samples", dir / "eval");
    r.cpu = cpu_seconds() - c0;
    r.wall = seconds_since(t0);
    return r;
}

struct Pipeline {
    fs::path work;
    std::uint64_t steps;
    std::optional<PipelineRun> main;
    double gen_cpu = 0;

    fs::path data() const { return work / "data"; }

    const PipelineRun& main_run() {
        if (!main) {
            const double c0 = cpu_seconds();
            exp::cmd_gen(pipeline_config(steps), data());
            gen_cpu = cpu_seconds() - c0;
            main = train_and_score(pipeline_config(steps), data(), work / "run");
        }
        return *main;
    }
};

Outcome end_to_end(Pipeline& p) {
    const auto& r = p.main_run();
    const double cpu = p.gen_cpu + r.cpu;
    const auto& m = r.report.mean;
    return {m.pearson >= 0.70 && m.nmae <= 0.10 && cpu <= 45 * 60,
            format("%zu held-out maps: pearson %.4f, nmae %.4f, ssim %.4f; cpu %.0f s (gen %.0f s)", r.report.count(), m.pearson, m.nmae,
                m.ssim, cpu, p.gen_cpu)};
}

Outcome ablation(Pipeline& p) {
    const auto& base = p.main_run();
    double full = 0, power = 0;
    std::string per;
    for (std::uint64_t k = 0; k < 3; ++k) {
        for (std::size_t channels : {kFeatureChannels, kPowerChannels}) {
            double pr;
            if (k == 0 && channels == kFeatureChannels) {
                pr = base.report.mean.pearson;
            } else {
                auto cfg = pipeline_config(p.steps);
                cfg.data.seed += k;  // dataset stays; init, batches and noise change
                cfg.features.channels = channels;
                pr = train_and_score(cfg, p.data(), p.work / format("ablation_%zu_%llu", channels, (unsigned long long)k)).report.mean.pearson;
            }
            (channels == kFeatureChannels ? full : power) += pr / 3;
            per += format("%s%zu/%llu %.4f", per.empty() ? "" : ", ", channels, (unsigned long long)k, pr);
        }
    }
    return {full >= power - 0.02, format("mean pearson 34ch %.4f vs 24ch %.4f (%s)", full, power, per.c_str())};
}

Outcome reproducibility(Pipeline& p) {
    const auto& a = p.main_run();
    const fs::path data2 = p.work / "data_rerun";
    const auto cfg = pipeline_config(p.steps);
    exp::cmd_gen(cfg, data2);
    const auto b = train_and_score(cfg, data2, p.work / "rerun");
    std::size_t same = 0;
    for (std::size_t i = 0; i < a.maps.size() && i < b.maps.size(); ++i) same += bit_identical(a.maps[i], b.maps[i]);
    const bool loss_same = std::memcmp(&a.final_loss, &b.final_loss, sizeof(double)) == 0;
    return {loss_same && same == a.maps.size() && a.maps.size() == b.maps.size(),
            format("final loss %s (%.17g), %zu/%zu maps bit-identical", loss_same ? "identical" : "differs", b.final_loss, same,
                a.maps.size())};
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Acceptance criteria"};
    std::string workdir = "acceptance_work";
    std::vector<int> only;
    std::uint64_t steps = 1500;
    app.add_option("--workdir", workdir, "scratch directory for the pipeline runs");
    app.add_option("--only", only, "criteria to run")->delimiter(',');
    app.add_option("--steps", steps, "training steps for criteria 9-11");
    CLI11_PARSE(app, argc, argv);

    spdlog::set_level(spdlog::level::warn);
    const fs::path work = fs::absolute(workdir);
    fs::remove_all(work);
    fs::create_directories(work);
    Pipeline pipe{work, steps, std::nullopt};

    const std::vector<std::pair<int, std::function<Outcome()>>> criteria{
        {1, solver_agreement},
        {2, solver_linearity},
        {3, feature_conservation},
        {4, graph_construction},
        {5, gradient_check},
        {6, zero_gate},
        {7, schedule_checks},
        {8, metric_checks},
        {9, [&] { return end_to_end(pipe); }},
        {11, [&] { return reproducibility(pipe); }},
        {10, [&] { return ablation(pipe); }},
    };
    std::vector<std::pair<int, Outcome>> results;
    for (const auto& [id, fn] : criteria) {
        if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) continue;
        const auto t0 = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = fn();
        } catch (const std::exception& e) {
            o = {false, std::string("error: ") + e.what()};
        }
        o.detail += format(" [%.1f s]", seconds_since(t0));
        std::printf("criterion %2d: %s  %s\n", id, o.pass ? "PASS" : "FAIL", o.detail.c_str());
        std::fflush(stdout);
        results.emplace_back(id, o);
    }

    nlohmann::json j = nlohmann::json::array();
    bool all = true;
    for (const auto& [id, o] : results) {
        j.push_back({{"criterion", id}, {"pass", o.pass}, {"detail", o.detail}});
        all = all && o.pass;
    }
    exp::write_json_file(work / "acceptance.json", j);
    return all ? 0 : 1;
}
