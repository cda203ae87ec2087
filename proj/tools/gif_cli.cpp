// gif: command-line driver for the IR-drop diffusion pipeline.
//
//   gif gen      --config c.json --seed 7 --out data/
//   gif train    --config c.json --dataset data/ --out run/
//   gif sample   --config c.json --dataset data/ --ckpt run/ckpt --out samp/
//   gif eval     --config c.json --dataset data/ --samples samp/samples --out eval/
//   gif features|graph|solve --design d.json --out file
//
// Exit codes: 0 ok, 2 configuration, 3 data, 4 numeric abort, 1 other.

#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include "gif/experiment.hpp"

namespace {

enum Exit { kOk = 0, kOther = 1, kConfig = 2, kData = 3, kNumeric = 4 };

struct Common {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out;
    std::size_t jobs = 1;
};

gif::exp::ExperimentConfig resolve(const Common& c) {
    gif::exp::ExperimentConfig cfg = c.config.empty() ? gif::exp::ExperimentConfig{} : gif::exp::load_config(c.config);
    if (c.seed) cfg.data.seed = *c.seed;
    cfg.validate();
    return cfg;
}

std::filesystem::path out_dir(const Common& c, const gif::exp::ExperimentConfig& cfg, const char* sub) {
    if (!c.out.empty()) return c.out;
    return std::filesystem::path(cfg.io.out) / sub;
}

void set_log_level() {
    const char* env = std::getenv("GIF_LOG_LEVEL");
    if (!env || !*env) return;
    const auto lvl = spdlog::level::from_str(env);
    // from_str maps unknown names to off; only accept that for "off" itself.
    if (lvl == spdlog::level::off && std::string(env) != "off")
        throw gif::ConfigError(std::string("GIF_LOG_LEVEL: unknown level '") + env + "'");
    spdlog::set_level(lvl);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Diffusion-based IR-drop map generation pipeline"};
    app.require_subcommand(1);
    Common com;
    app.add_option("--config", com.config, "experiment config JSON")->check(CLI::ExistingFile);
    app.add_option("--seed", com.seed, "master seed, overrides data.seed");
    app.add_option("--out", com.out, "output directory or file");
    app.add_option("--jobs", com.jobs, "worker threads for gen and sample")->check(CLI::PositiveNumber);

    auto* gen = app.add_subcommand("gen", "generate designs, features, labels and graphs");

    std::string dataset, ckpt, samples, design, method = "cg";
    bool resume = false;
    auto* train = app.add_subcommand("train", "train the denoiser on a dataset");
    train->add_option("--dataset", dataset, "dataset directory")->required();
    train->add_flag("--resume", resume, "continue from the checkpoint in --out");

    auto* sample = app.add_subcommand("sample", "sample one map per held-out design");
    sample->add_option("--dataset", dataset, "dataset directory")->required();
    sample->add_option("--ckpt", ckpt, "checkpoint directory")->required();

    auto* eval = app.add_subcommand("eval", "score sampled maps against labels");
    eval->add_option("--dataset", dataset, "dataset directory")->required();
    eval->add_option("--samples", samples, "directory of <id>.gift maps")->required();

    auto* features = app.add_subcommand("features", "34-channel feature stack of one design");
    auto* graph = app.add_subcommand("graph", "netlist graph JSON of one design");
    auto* solve = app.add_subcommand("solve", "IR-drop map of one design");
    for (auto* s : {features, graph, solve}) s->add_option("--design", design, "design JSON")->required();
    solve->add_option("--method", method, "cg or dense")->check(CLI::IsMember({"cg", "dense"}));

    for (auto* s : app.get_subcommands({})) s->fallthrough();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kConfig;
    }

    namespace ex = gif::exp;
    try {
        set_log_level();
        const auto cfg = resolve(com);
        if (gen->parsed()) {
            ex::cmd_gen(cfg, out_dir(com, cfg, "data"), com.jobs);
        } else if (train->parsed()) {
            ex::cmd_train(cfg, dataset, out_dir(com, cfg, "train"), {resume, std::nullopt});
        } else if (sample->parsed()) {
            ex::cmd_sample(cfg, dataset, ckpt, out_dir(com, cfg, "sample"), com.jobs);
        } else if (eval->parsed()) {
            ex::cmd_eval(cfg, dataset, samples, out_dir(com, cfg, "eval"));
        } else {
            if (com.out.empty()) throw gif::ConfigError("--out is required for " + app.get_subcommands().front()->get_name());
            if (features->parsed()) ex::cmd_features(cfg, design, com.out);
            if (graph->parsed()) ex::cmd_graph(cfg, design, com.out);
            if (solve->parsed())
                ex::cmd_solve(cfg, design, com.out, method == "dense" ? gif::pdn::SolveMethod::dense : gif::pdn::SolveMethod::conjugate_gradient);
        }
    } catch (const gif::ConfigError& e) {
        spdlog::error("config error: {}", e.what());
        return kConfig;
    } catch (const gif::NumericError& e) {
        spdlog::error("numeric error: {}", e.what());
        return kNumeric;
    } catch (const gif::DataError& e) {
        spdlog::error("data error: {}", e.what());
        return kData;
    } catch (const std::filesystem::filesystem_error& e) {
        spdlog::error("data error: {}", e.what());
        return kData;
    } catch (const std::exception& e) {
        spdlog::error("{}", e.what());
        return kOther;
    }
    return kOk;
}
