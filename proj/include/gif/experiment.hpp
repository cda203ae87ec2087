#ifndef GIF_EXPERIMENT_HPP
#define GIF_EXPERIMENT_HPP

// Pipeline driver behind the command-line tool: experiment configuration,
// dataset generation, training with checkpoints, sampling, evaluation and
// run provenance. Everything random derives from one master seed.

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>
#include <openssl/evp.h>
#include <spdlog/spdlog.h>

#include "gif/condnet.hpp"
#include "gif/design.hpp"
#include "gif/diffusion.hpp"
#include "gif/error.hpp"
#include "gif/features.hpp"
#include "gif/metrics.hpp"
#include "gif/netgraph.hpp"
#include "gif/pdn.hpp"
#include "gif/rng.hpp"
#include "gif/tensor_io.hpp"

namespace gif::exp {

namespace fs = std::filesystem;
using nlohmann::json;

// ------------------------------------------------------------------ config

struct DataSection {
    std::uint64_t seed = 0;
    std::size_t train_count = 256;
    std::size_t test_count = 32;
    std::size_t grid = 32;
    std::size_t instances = 200;
    std::size_t nets = 150;
    GenConfig gen{};
};

struct FeatureSection {
    std::size_t channels = kFeatureChannels;  // 34, or 24 for the power-only ablation
    pdn::PdnConfig pdn{};
};

struct GraphSection {
    bool enabled = true;
    std::size_t tokens = 16;
    nn::PoolMode pool = nn::PoolMode::topk;
    std::size_t fanout_cap = 64;
};

struct DiffusionSection {
    int T = 64;
    diff::ScheduleKind schedule = diff::ScheduleKind::cosine;
    diff::TrainConfig train{};
    std::size_t log_every = 50;
    std::size_t checkpoint_every = 500;
    bool clip_denoised = false;
    double guidance = 0.0;  // 0 disables guidance
    bool use_ema = true;
    std::size_t sample_batch = 32;
};

inline const std::vector<std::string>& metric_names() {
    static const std::vector<std::string> n{"mae", "rmse", "nmae", "psnr_db", "ssim", "pearson", "spearman"};
    return n;
}

struct EvalSection {
    std::vector<std::string> metrics = metric_names();
    std::string split = "test";
    bool panels = true;
    std::string panel_format = "png";
    std::size_t gutter = 4;
};

struct IoSection {
    std::string out = "runs";
};

struct ExperimentConfig {
    DataSection data;
    FeatureSection features;
    GraphSection graph;
    nn::ModelConfig model = desk_model();
    DiffusionSection diffusion;
    EvalSection eval;
    IoSection io;

    static nn::ModelConfig desk_model() {
        nn::ModelConfig m;
        m.channels = {16, 32, 64};
        m.time_dim = 32;
        m.film_hidden = 32;
        m.gcn_hidden = 32;
        m.token_dim = 32;
        m.tokens = 16;
        return m;
    }

    /// Model configuration with the fields owned by other sections filled in.
    nn::ModelConfig model_config() const {
        nn::ModelConfig m = model;
        m.in_features = features.channels;
        m.use_graph = graph.enabled;
        m.tokens = graph.tokens;
        m.pool = graph.pool;
        return m;
    }

    void validate() const {
        if (data.grid < 8) throw ConfigError("data.grid must be at least 8");
        if (data.instances == 0) throw ConfigError("data.instances must be positive");
        if (features.channels != kFeatureChannels && features.channels != kPowerChannels)
            throw ConfigError("features.channels must be 34 or 24");
        if (graph.tokens == 0) throw ConfigError("graph.tokens must be positive");
        if (graph.fanout_cap < 2) throw ConfigError("graph.fanout_cap must be at least 2");
        model_config().validate();
        if (data.grid % (std::size_t{1} << (model.channels.size() - 1)))
            throw ConfigError("data.grid must be divisible by 2^(levels-1)");
        if (diffusion.T < 2) throw ConfigError("diffusion.T must be at least 2");
        diffusion.train.validate();
        if (diffusion.log_every == 0 || diffusion.sample_batch == 0) throw ConfigError("log_every and sample_batch must be positive");
        if (!(diffusion.guidance >= 0)) throw ConfigError("diffusion.guidance must be nonnegative");
        for (const auto& m : eval.metrics)
            if (std::find(metric_names().begin(), metric_names().end(), m) == metric_names().end())
                throw ConfigError("unknown metric '" + m + "'");
        if (eval.split != "train" && eval.split != "test") throw ConfigError("eval.split must be train or test");
        if (eval.panel_format != "png" && eval.panel_format != "pgm") throw ConfigError("eval.panel_format must be png or pgm");
    }

    json to_json() const;
    static ExperimentConfig from_json(const json& j);
};

namespace detail {

/// Reads keys from one JSON object and rejects the ones nobody asked for.
class Section {
public:
    Section(const json& j, std::string name) : j_(j), name_(std::move(name)) {
        if (!j_.is_object()) throw ConfigError("config section '" + name_ + "' must be an object");
    }

    template <class T>
    void get(const char* key, T& out) {
        seen_.insert(key);
        if (!j_.contains(key)) return;
        try {
            out = j_.at(key).get<T>();
        } catch (const json::exception& e) {
            throw ConfigError("config " + name_ + "." + key + ": " + e.what());
        }
    }

    template <class Enum, class Parse>
    void get_enum(const char* key, Enum& out, Parse parse) {
        std::string s;
        get(key, s);
        if (!s.empty()) out = parse(s);
    }

    const json* child(const char* key) {
        seen_.insert(key);
        return j_.contains(key) ? &j_.at(key) : nullptr;
    }

    void finish() const {
        for (const auto& [k, v] : j_.items())
            if (!seen_.count(k)) throw ConfigError("unknown config key '" + name_ + "." + k + "'");
    }

private:
    const json& j_;
    std::string name_;
    std::set<std::string> seen_;
};

}  // namespace detail

inline json ExperimentConfig::to_json() const {
    const auto& g = data.gen;
    const auto& t = diffusion.train;
    json j;
    j["data"] = {{"seed", data.seed},
                 {"train_count", data.train_count},
                 {"test_count", data.test_count},
                 {"grid", data.grid},
                 {"instances", data.instances},
                 {"nets", data.nets},
                 {"clusters_min", g.clusters_min},
                 {"clusters_max", g.clusters_max},
                 {"cluster_sigma_min", g.cluster_sigma_min},
                 {"cluster_sigma_max", g.cluster_sigma_max},
                 {"background_fraction", g.background_fraction},
                 {"macros_max", g.macros_max},
                 {"power_scale", g.power_scale},
                 {"max_fanout", g.max_fanout},
                 {"net_locality", g.net_locality},
                 {"pad_pitch", g.pad_pitch},
                 {"vdd", g.vdd}};
    j["features"] = {{"channels", features.channels},
                     {"alpha", features.pdn.alpha},
                     {"beta", features.pdn.beta},
                     {"r0", features.pdn.r0},
                     {"g_pad_ratio", features.pdn.g_pad_ratio},
                     {"capacity_early_global", features.pdn.capacity.early_global},
                     {"capacity_global", features.pdn.capacity.global}};
    j["graph"] = {{"enabled", graph.enabled},
                  {"tokens", graph.tokens},
                  {"pool", nn::to_string(graph.pool)},
                  {"fanout_cap", graph.fanout_cap}};
    j["model"] = {{"channels", model.channels},
                  {"time_dim", model.time_dim},
                  {"film_hidden", model.film_hidden},
                  {"groups", model.groups},
                  {"gcn_hidden", model.gcn_hidden},
                  {"token_dim", model.token_dim},
                  {"heads", model.heads},
                  {"output", nn::to_string(model.output)}};
    j["diffusion"] = {{"T", diffusion.T},
                      {"schedule", diff::to_string(diffusion.schedule)},
                      {"lr", t.lr},
                      {"adam_beta1", t.adam_beta1},
                      {"adam_beta2", t.adam_beta2},
                      {"adam_eps", t.adam_eps},
                      {"weight_decay", t.weight_decay},
                      {"ema_decay", t.ema_decay},
                      {"aux_weight", t.aux_weight},
                      {"aux_fraction", t.aux_fraction},
                      {"cfg_drop", t.cfg_drop},
                      {"grad_clip", t.grad_clip},
                      {"batch", t.batch},
                      {"steps", t.steps},
                      {"lr_schedule", diff::to_string(t.lr_schedule)},
                      {"log_every", diffusion.log_every},
                      {"checkpoint_every", diffusion.checkpoint_every},
                      {"clip_denoised", diffusion.clip_denoised},
                      {"guidance", diffusion.guidance},
                      {"use_ema", diffusion.use_ema},
                      {"sample_batch", diffusion.sample_batch}};
    j["eval"] = {{"metrics", eval.metrics},
                 {"split", eval.split},
                 {"panels", eval.panels},
                 {"panel_format", eval.panel_format},
                 {"gutter", eval.gutter}};
    j["io"] = {{"out", io.out}};
    return j;
}

inline ExperimentConfig ExperimentConfig::from_json(const json& j) {
    ExperimentConfig c;
    detail::Section root(j, "config");
    if (const json* s = root.child("data")) {
        detail::Section d(*s, "data");
        auto& g = c.data.gen;
        d.get("seed", c.data.seed);
        d.get("train_count", c.data.train_count);
        d.get("test_count", c.data.test_count);
        d.get("grid", c.data.grid);
        d.get("instances", c.data.instances);
        d.get("nets", c.data.nets);
        d.get("clusters_min", g.clusters_min);
        d.get("clusters_max", g.clusters_max);
        d.get("cluster_sigma_min", g.cluster_sigma_min);
        d.get("cluster_sigma_max", g.cluster_sigma_max);
        d.get("background_fraction", g.background_fraction);
        d.get("macros_max", g.macros_max);
        d.get("power_scale", g.power_scale);
        d.get("max_fanout", g.max_fanout);
        d.get("net_locality", g.net_locality);
        d.get("pad_pitch", g.pad_pitch);
        d.get("vdd", g.vdd);
        d.finish();
    }
    if (const json* s = root.child("features")) {
        detail::Section f(*s, "features");
        f.get("channels", c.features.channels);
        f.get("alpha", c.features.pdn.alpha);
        f.get("beta", c.features.pdn.beta);
        f.get("r0", c.features.pdn.r0);
        f.get("g_pad_ratio", c.features.pdn.g_pad_ratio);
        f.get("capacity_early_global", c.features.pdn.capacity.early_global);
        f.get("capacity_global", c.features.pdn.capacity.global);
        f.finish();
    }
    if (const json* s = root.child("graph")) {
        detail::Section g(*s, "graph");
        g.get("enabled", c.graph.enabled);
        g.get("tokens", c.graph.tokens);
        g.get_enum("pool", c.graph.pool, nn::pool_mode_from);
        g.get("fanout_cap", c.graph.fanout_cap);
        g.finish();
    }
    if (const json* s = root.child("model")) {
        detail::Section m(*s, "model");
        m.get("channels", c.model.channels);
        m.get("time_dim", c.model.time_dim);
        m.get("film_hidden", c.model.film_hidden);
        m.get("groups", c.model.groups);
        m.get("gcn_hidden", c.model.gcn_hidden);
        m.get("token_dim", c.model.token_dim);
        m.get("heads", c.model.heads);
        m.get_enum("output", c.model.output, nn::output_kind_from);
        m.finish();
    }
    if (const json* s = root.child("diffusion")) {
        detail::Section d(*s, "diffusion");
        auto& t = c.diffusion.train;
        d.get("T", c.diffusion.T);
        d.get_enum("schedule", c.diffusion.schedule, diff::schedule_kind_from);
        d.get("lr", t.lr);
        d.get("adam_beta1", t.adam_beta1);
        d.get("adam_beta2", t.adam_beta2);
        d.get("adam_eps", t.adam_eps);
        d.get("weight_decay", t.weight_decay);
        d.get("ema_decay", t.ema_decay);
        d.get("aux_weight", t.aux_weight);
        d.get("aux_fraction", t.aux_fraction);
        d.get("cfg_drop", t.cfg_drop);
        d.get("grad_clip", t.grad_clip);
        d.get("batch", t.batch);
        d.get("steps", t.steps);
        d.get_enum("lr_schedule", t.lr_schedule, diff::lr_schedule_from);
        d.get("log_every", c.diffusion.log_every);
        d.get("checkpoint_every", c.diffusion.checkpoint_every);
        d.get("clip_denoised", c.diffusion.clip_denoised);
        d.get("guidance", c.diffusion.guidance);
        d.get("use_ema", c.diffusion.use_ema);
        d.get("sample_batch", c.diffusion.sample_batch);
        d.finish();
    }
    if (const json* s = root.child("eval")) {
        detail::Section e(*s, "eval");
        e.get("metrics", c.eval.metrics);
        e.get("split", c.eval.split);
        e.get("panels", c.eval.panels);
        e.get("panel_format", c.eval.panel_format);
        e.get("gutter", c.eval.gutter);
        e.finish();
    }
    if (const json* s = root.child("io")) {
        detail::Section io(*s, "io");
        io.get("out", c.io.out);
        io.finish();
    }
    root.finish();
    c.validate();
    return c;
}

inline json read_json_file(const fs::path& path) {
    std::ifstream is(path);
    if (!is) throw DataError("cannot open " + path.string());
    try {
        json j;
        is >> j;
        return j;
    } catch (const json::exception& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
}

inline void write_json_file(const fs::path& path, const json& j) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw DataError("cannot open " + path.string() + " for writing");
    os << j.dump(2) << '\n';
}

inline ExperimentConfig load_config(const fs::path& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open config " + path.string());
    json j;
    try {
        is >> j;
    } catch (const json::exception& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
    return ExperimentConfig::from_json(j);
}

// ------------------------------------------------------------------ provenance

/// Git blob hash: SHA-1 over "blob <size>\0" followed by the bytes.
inline std::string git_blob_sha1(const std::string& bytes) {
    const std::string header = "blob " + std::to_string(bytes.size()) + std::string(1, '\0');
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_MD_CTX* ctx = EVP_MD_CTX_new();
    if (!ctx) throw std::runtime_error("EVP_MD_CTX_new failed");
    const bool ok = EVP_DigestInit_ex(ctx, EVP_sha1(), nullptr) == 1 && EVP_DigestUpdate(ctx, header.data(), header.size()) == 1 &&
                    EVP_DigestUpdate(ctx, bytes.data(), bytes.size()) == 1 && EVP_DigestFinal_ex(ctx, md, &len) == 1;
    EVP_MD_CTX_free(ctx);
    if (!ok) throw std::runtime_error("SHA-1 digest failed");
    std::ostringstream os;
    for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(md[i]);
    return os.str();
}

inline std::string read_bytes(const fs::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open " + path.string());
    return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

/// Blob hash of a file, or for a directory the blob hash of its sorted
/// "<hash> <relative path>" listing.
inline std::string content_hash(const fs::path& path) {
    if (!fs::is_directory(path)) return git_blob_sha1(read_bytes(path));
    std::vector<fs::path> files;
    for (const auto& e : fs::recursive_directory_iterator(path))
        if (e.is_regular_file()) files.push_back(fs::relative(e.path(), path));
    std::sort(files.begin(), files.end());
    std::string listing;
    for (const auto& f : files) listing += git_blob_sha1(read_bytes(path / f)) + " " + f.generic_string() + "\n";
    return git_blob_sha1(listing);
}

/// config.json echo plus run.json with the command and input hashes.
inline void write_run_record(const fs::path& out, const std::string& command, const ExperimentConfig& cfg,
                             const std::vector<fs::path>& inputs) {
    fs::create_directories(out);
    const json cj = cfg.to_json();
    write_json_file(out / "config.json", cj);
    json r;
    r["command"] = command;
    r["seed"] = cfg.data.seed;
    r["config_sha1"] = git_blob_sha1(cj.dump(2) + "\n");
    r["inputs"] = json::array();
    for (const auto& p : inputs) r["inputs"].push_back({{"path", p.generic_string()}, {"sha1", content_hash(p)}});
    write_json_file(out / "run.json", r);
}

// ------------------------------------------------------------------ helpers

/// Rethrows the active exception with `context` prefixed, keeping its category.
[[noreturn]] inline void rethrow_with_context(const std::string& context) {
    try {
        throw;
    } catch (const ConfigError& e) {
        throw ConfigError(context + ": " + e.what());
    } catch (const NumericError& e) {
        throw NumericError(context + ": " + e.what());
    } catch (const DataError& e) {
        throw DataError(context + ": " + e.what());
    }
}

/// Runs body(i) for i in [0, n) on up to `jobs` threads. The first error
/// (lowest index) is rethrown after all workers stop.
inline void parallel_for(std::size_t n, std::size_t jobs, const std::function<void(std::size_t)>& body) {
    jobs = std::max<std::size_t>(1, std::min(jobs, n));
    if (jobs == 1) {
        for (std::size_t i = 0; i < n; ++i) body(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::mutex mu;
    std::size_t err_index = n;
    std::exception_ptr err;
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < jobs; ++w)
        pool.emplace_back([&] {
            for (std::size_t i; (i = next.fetch_add(1)) < n;) {
                try {
                    body(i);
                } catch (...) {
                    std::lock_guard lk(mu);
                    if (i < err_index) {
                        err_index = i;
                        err = std::current_exception();
                    }
                }
            }
        });
    for (auto& t : pool) t.join();
    if (err) std::rethrow_exception(err);
}

inline std::uint64_t design_seed(std::uint64_t master, std::size_t index) {
    return SeedStreams(master).data().split(static_cast<std::uint64_t>(index)).next_u64();
}

inline std::string sample_id(std::size_t index) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "d%05zu", index);
    return buf;
}

// ------------------------------------------------------------------ dataset

struct SampleEntry {
    std::string id;
    std::string split;  // "train" or "test"
    std::uint64_t seed = 0;
    std::string design, features, label;  // paths relative to the dataset root
    std::optional<std::string> graph;
};

struct Manifest {
    fs::path root;
    std::vector<SampleEntry> samples;
    std::size_t skipped_graphs = 0;

    std::vector<const SampleEntry*> split(const std::string& name) const {
        std::vector<const SampleEntry*> out;
        for (const auto& s : samples)
            if (s.split == name) out.push_back(&s);
        return out;
    }
};

inline constexpr int kManifestVersion = 1;

inline json manifest_to_json(const Manifest& m) {
    json j;
    j["format"] = "gif-dataset";
    j["version"] = kManifestVersion;
    j["skipped_graphs"] = m.skipped_graphs;
    j["samples"] = json::array();
    for (const auto& s : m.samples) {
        json e = {{"id", s.id}, {"split", s.split}, {"seed", s.seed}, {"design", s.design}, {"features", s.features}, {"label", s.label}};
        if (s.graph) e["graph"] = *s.graph;
        j["samples"].push_back(std::move(e));
    }
    return j;
}

inline Manifest load_manifest(const fs::path& dir) {
    const json j = read_json_file(dir / "manifest.json");
    Manifest m;
    m.root = dir;
    try {
        if (j.at("format") != "gif-dataset") throw FormatError("not a dataset manifest");
        if (j.at("version") != kManifestVersion) throw VersionMismatchError("dataset manifest version mismatch");
        m.skipped_graphs = j.value("skipped_graphs", std::size_t{0});
        for (const auto& e : j.at("samples")) {
            SampleEntry s;
            s.id = e.at("id").get<std::string>();
            s.split = e.at("split").get<std::string>();
            s.seed = e.at("seed").get<std::uint64_t>();
            s.design = e.at("design").get<std::string>();
            s.features = e.at("features").get<std::string>();
            s.label = e.at("label").get<std::string>();
            if (e.contains("graph")) s.graph = e.at("graph").get<std::string>();
            m.samples.push_back(std::move(s));
        }
    } catch (const json::exception& e) {
        throw FormatError((dir / "manifest.json").string() + ": " + e.what());
    }
    return m;
}

struct DesignArtifacts {
    SyntheticDesign design;
    FeatureStack features;
    Tensor label;
    std::optional<graph::DesignGraph> graph;
};

inline DesignArtifacts build_artifacts(const ExperimentConfig& cfg, std::uint64_t seed) {
    DesignArtifacts a;
    a.design = generate_design(seed, cfg.data.grid, cfg.data.grid, cfg.data.instances, cfg.data.nets, cfg.data.gen);
    a.features = build_feature_stack(a.design, cfg.features.pdn.capacity);
    a.label = pdn::ir_label(a.design, a.features, cfg.features.pdn);
    try {
        a.graph = graph::build_graph(graph::netlist_attributes(a.design), graph::placement_of(a.design),
                                     {cfg.graph.fanout_cap});
    } catch (const graph::DegenerateGraphError& e) {
        spdlog::warn("design seed {}: graph skipped ({})", seed, e.what());
    }
    return a;
}

/// Writes train + test designs under `out` with manifest.json.
inline Manifest cmd_gen(const ExperimentConfig& cfg, const fs::path& out, std::size_t jobs = 1) {
    cfg.validate();
    write_run_record(out, "gen", cfg, {});
    fs::create_directories(out / "designs");
    const std::size_t n = cfg.data.train_count + cfg.data.test_count;
    Manifest m;
    m.root = out;
    m.samples.resize(n);
    parallel_for(n, jobs, [&](std::size_t i) {
        const std::uint64_t seed = design_seed(cfg.data.seed, i);
        try {
            const auto a = build_artifacts(cfg, seed);
            SampleEntry& s = m.samples[i];
            s.id = sample_id(i);
            s.split = i < cfg.data.train_count ? "train" : "test";
            s.seed = seed;
            const fs::path rel = fs::path("designs") / s.id;
            fs::create_directories(out / rel);
            s.design = (rel / "design.json").generic_string();
            s.features = (rel / "features.gift").generic_string();
            s.label = (rel / "label.gift").generic_string();
            save_design(out / s.design, a.design);
            save_feature_stack(out / s.features, a.features);
            save_tensor(out / s.label, a.label, Dtype::f64);
            if (a.graph) {
                s.graph = (rel / "graph.json").generic_string();
                graph::save_graph(out / *s.graph, *a.graph);
            }
        } catch (...) {
            rethrow_with_context("design seed " + std::to_string(seed));
        }
    });
    for (const auto& s : m.samples)
        if (!s.graph) ++m.skipped_graphs;
    write_json_file(out / "manifest.json", manifest_to_json(m));
    spdlog::info("generated {} designs ({} without graph) in {}", n, m.skipped_graphs, out.string());
    return m;
}

/// Feature tensor for the configured channel count.
inline Tensor select_channels(const Tensor& stack, std::size_t channels) {
    if (stack.rank() != 3 || stack.dim(0) < channels) throw ShapeError("feature stack has too few channels");
    if (stack.dim(0) == channels) return stack;
    const std::size_t plane = stack.dim(1) * stack.dim(2);
    return Tensor({channels, stack.dim(1), stack.dim(2)},
                  std::vector<double>(stack.vec().begin(), stack.vec().begin() + static_cast<std::ptrdiff_t>(channels * plane)));
}

/// One split loaded into memory with prepared graphs.
struct LoadedSplit {
    std::vector<std::string> ids;
    std::vector<Tensor> features;  // selected channels
    std::vector<Tensor> labels;    // [H,W] in [0,1]
    std::vector<std::optional<nn::GraphInput>> graphs;

    std::size_t size() const noexcept { return ids.size(); }

    std::vector<diff::TrainItem> items() const {
        std::vector<diff::TrainItem> out;
        for (std::size_t i = 0; i < ids.size(); ++i) out.push_back({features[i], labels[i], graphs[i] ? &*graphs[i] : nullptr});
        return out;
    }
};

inline LoadedSplit load_split(const Manifest& m, const std::string& split, const ExperimentConfig& cfg) {
    LoadedSplit s;
    for (const auto* e : m.split(split)) {
        try {
            const FeatureStack fs = load_feature_stack(m.root / e->features);
            Tensor label = load_tensor(m.root / e->label);
            if (label.rank() != 2 || label.dim(0) != fs.height() || label.dim(1) != fs.width())
                throw ShapeError("label and features differ in resolution");
            s.ids.push_back(e->id);
            s.features.push_back(select_channels(fs.data, cfg.features.channels));
            s.labels.push_back(std::move(label));
            if (cfg.graph.enabled && e->graph)
                s.graphs.push_back(nn::prepare_graph(graph::load_graph(m.root / *e->graph), cfg.graph.tokens, cfg.graph.pool));
            else
                s.graphs.push_back(std::nullopt);
        } catch (...) {
            rethrow_with_context("sample " + e->id + " (seed " + std::to_string(e->seed) + ")");
        }
    }
    return s;
}

// ------------------------------------------------------------------ training

inline diff::NoiseSchedule schedule_of(const ExperimentConfig& cfg) { return diff::make_schedule(cfg.diffusion.T, cfg.diffusion.schedule); }

inline nn::Denoiser make_model(const ExperimentConfig& cfg, const diff::NoiseSchedule& sched) {
    nn::Denoiser model(cfg.model_config(), SeedStreams(cfg.data.seed).init());
    model.set_output_schedule(sched.alpha_bar);
    return model;
}

struct Checkpoint {
    std::vector<Tensor> params, ema, adam_m, adam_v;
    std::uint64_t step = 0, adam_steps = 0;
};

/// Writes params / EMA / optimizer state into `dir` through a temporary
/// directory, so an interrupted write never replaces the previous one.
inline void save_checkpoint(const fs::path& dir, const nn::Denoiser& model, const diff::TrainerState& st) {
    const fs::path tmp = dir.string() + ".tmp";
    fs::remove_all(tmp);
    fs::create_directories(tmp);
    const json extra = {{"step", st.step}, {"adam_steps", st.opt.steps()}};
    nn::save_params(tmp / "params.gift", model.params(), extra);
    std::vector<std::string> names;
    for (const auto& p : model.params().all()) names.push_back(p.name);
    nn::save_named_tensors(tmp / "ema.gift", names, st.ema.values(), extra);
    std::vector<std::string> onames;
    std::vector<Tensor> ot;
    const auto& opt = st.opt;
    for (std::size_t k = 0; k < names.size(); ++k) {
        onames.push_back("m/" + names[k]);
        ot.push_back(opt.first_moments()[k]);
    }
    for (std::size_t k = 0; k < names.size(); ++k) {
        onames.push_back("v/" + names[k]);
        ot.push_back(opt.second_moments()[k]);
    }
    nn::save_named_tensors(tmp / "optimizer.gift", onames, ot, extra);
    fs::remove_all(dir);
    fs::rename(tmp, dir);
}

inline bool has_checkpoint(const fs::path& dir) { return fs::exists(dir / "params.gift") && fs::exists(dir / "optimizer.gift"); }

/// Restores model weights and trainer state; the model must match the checkpoint.
inline void load_checkpoint(const fs::path& dir, nn::Denoiser& model, diff::TrainerState& st) {
    const json extra = nn::load_params(dir / "params.gift", model.params());
    const auto ema = nn::load_named_tensors(dir / "ema.gift");
    const auto opt = nn::load_named_tensors(dir / "optimizer.gift");
    const std::size_t P = model.params().size();
    if (ema.tensors.size() != P || opt.tensors.size() != 2 * P) throw FormatError(dir.string() + ": checkpoint parts disagree");
    st = diff::TrainerState{diff::AdamW(model.params()), diff::Ema(model.params()), 0};
    for (std::size_t k = 0; k < P; ++k) {
        if (ema.tensors[k].shape() != model.params().all()[k].var.value().shape() ||
            opt.tensors[k].shape() != ema.tensors[k].shape() || opt.tensors[P + k].shape() != ema.tensors[k].shape())
            throw FormatError(dir.string() + ": shape mismatch in " + model.params().all()[k].name);
        st.ema.values()[k] = ema.tensors[k];
        st.opt.first_moments()[k] = opt.tensors[k];
        st.opt.second_moments()[k] = opt.tensors[P + k];
    }
    try {
        st.step = extra.at("step").get<std::uint64_t>();
        st.opt.set_steps(extra.at("adam_steps").get<std::uint64_t>());
    } catch (const json::exception& e) {
        throw FormatError(dir.string() + ": " + e.what());
    }
}

/// Weights for sampling: EMA shadow or raw parameters from a checkpoint dir.
inline void load_weights(const fs::path& dir, nn::Denoiser& model, bool ema) {
    nn::load_params(dir / (ema ? "ema.gift" : "params.gift"), model.params());
}

struct TrainResult {
    std::uint64_t steps = 0;  // total steps after this call
    diff::StepStats last;
    std::vector<double> losses;  // per step run in this call
};

inline json log_record(const diff::StepStats& s) {
    return {{"step", s.step},   {"loss", s.loss.total}, {"mse", s.loss.mse},
            {"aux", s.loss.aux}, {"lr", s.lr},          {"grad_norm", s.grad_norm}};
}

struct TrainOptions {
    bool resume = false;
    std::optional<std::uint64_t> stop_after;  // stop early at this total step count
};

/// Trains on the manifest's train split. Output: ckpt/ (raw, EMA, optimizer),
/// train_log.jsonl, config.json, run.json. On a non-finite loss the last
/// written checkpoint stays in place and the NumericError propagates.
inline TrainResult cmd_train(const ExperimentConfig& cfg, const fs::path& dataset, const fs::path& out, const TrainOptions& opt = {}) {
    cfg.validate();
    const Manifest m = load_manifest(dataset);
    const LoadedSplit train = load_split(m, "train", cfg);
    if (train.size() == 0) throw DataError("dataset has no training samples");
    const auto items = train.items();
    write_run_record(out, "train", cfg, {dataset / "manifest.json"});

    const auto sched = schedule_of(cfg);
    nn::Denoiser model = make_model(cfg, sched);
    diff::TrainerState st{diff::AdamW(model.params()), diff::Ema(model.params()), 0};
    const fs::path ckpt = out / "ckpt";
    if (opt.resume && has_checkpoint(ckpt)) {
        load_checkpoint(ckpt, model, st);
        spdlog::info("resuming from step {}", st.step);
    }
    std::ofstream log(out / "train_log.jsonl", opt.resume ? std::ios::app : std::ios::trunc);
    if (!log) throw DataError("cannot open training log in " + out.string());

    const SeedStreams streams(cfg.data.seed);
    const Rng order = streams.data().split("order"), noise = streams.noise();
    const auto& tc = cfg.diffusion.train;
    const std::uint64_t end = opt.stop_after ? std::min<std::uint64_t>(*opt.stop_after, tc.steps) : tc.steps;
    TrainResult res;
    while (st.step < end) {
        const auto idx = diff::batch_indices(items.size(), tc.batch, st.step, order);
        const auto batch = diff::make_batch(items, idx);
        try {
            res.last = diff::training_step(model, st, batch, tc, sched, noise.split(st.step));
        } catch (const NumericError& e) {
            log << json{{"step", st.step}, {"aborted", e.what()}}.dump() << '\n';
            spdlog::error("training aborted: {}", e.what());
            throw;
        }
        res.losses.push_back(res.last.loss.total);
        if (st.step % cfg.diffusion.log_every == 0 || st.step == end) {
            log << log_record(res.last).dump() << '\n';
            spdlog::info("step {} loss {:.5f} mse {:.5f} aux {:.5f} gn {:.3f}", res.last.step, res.last.loss.total,
                         res.last.loss.mse, res.last.loss.aux, res.last.grad_norm);
        }
        if ((cfg.diffusion.checkpoint_every && st.step % cfg.diffusion.checkpoint_every == 0) || st.step == end)
            save_checkpoint(ckpt, model, st);
    }
    res.steps = st.step;
    return res;
}

// ------------------------------------------------------------------ sampling

struct SampleSet {
    std::vector<std::string> ids;
    std::vector<Tensor> maps;   // generated Y, [H,W] in [0,1]
    std::vector<Tensor> noise;  // x_T, [H,W]
};

/// One sample per item of `split` with the given weights. Item i of the split
/// uses sampling stream i, so results do not depend on batching or jobs.
inline SampleSet sample_split(const ExperimentConfig& cfg, const nn::Denoiser& model, const LoadedSplit& split, std::size_t jobs = 1) {
    const auto sched = schedule_of(cfg);
    const std::size_t n = split.size(), B = cfg.diffusion.sample_batch;
    SampleSet out;
    out.ids = split.ids;
    out.maps.resize(n);
    out.noise.resize(n);
    if (n == 0) return out;
    const std::size_t H = split.labels[0].dim(0), W = split.labels[0].dim(1);
    const Rng root = SeedStreams(cfg.data.seed).sampling();
    const auto items = split.items();
    const std::size_t chunks = (n + B - 1) / B;
    parallel_for(chunks, jobs, [&](std::size_t c) {
        ag::NoGradGuard ng;
        std::vector<std::size_t> idx;
        for (std::size_t i = c * B; i < std::min(n, (c + 1) * B); ++i) idx.push_back(i);
        const auto batch = diff::make_batch(items, idx);
        std::vector<Rng> streams;
        for (std::size_t i : idx) streams.push_back(root.split(static_cast<std::uint64_t>(i)));
        const std::size_t N = idx.size();
        const double w = cfg.diffusion.guidance;
        auto eps_fn = [&](const Tensor& x, int t) {
            const std::vector<int> ts(N, t);
            Tensor e = model.forward(x, ts, {batch.features, batch.graphs, std::vector<bool>(N, false)}).value();
            if (w > 0) {
                const Tensor u = model.forward(x, ts, {batch.features, batch.graphs, std::vector<bool>(N, true)}).value();
                for (std::size_t k = 0; k < e.size(); ++k) e[k] = (1.0 + w) * e[k] - w * u[k];
            }
            return e;
        };
        Tensor xT;
        const Tensor Y = diff::sample(eps_fn, H, W, sched, streams, {cfg.diffusion.clip_denoised}, &xT);
        const std::size_t P = H * W;
        for (std::size_t j = 0; j < N; ++j) {
            out.maps[idx[j]] = Tensor({H, W}, std::vector<double>(Y.vec().begin() + static_cast<std::ptrdiff_t>(j * P),
                                                                 Y.vec().begin() + static_cast<std::ptrdiff_t>((j + 1) * P)));
            out.noise[idx[j]] = Tensor({H, W}, std::vector<double>(xT.vec().begin() + static_cast<std::ptrdiff_t>(j * P),
                                                                  xT.vec().begin() + static_cast<std::ptrdiff_t>((j + 1) * P)));
        }
    });
    return out;
}

/// Side-by-side RGB panel: noise, feature composite, generated, ground truth.
/// Size (4W + 5g) x (H + 2g) for gutter g.
inline Image make_panel(const Tensor& noise, const Tensor& features, const Tensor& generated, const Tensor& truth, std::size_t g) {
    const std::size_t H = truth.dim(0), W = truth.dim(1);
    Image img(4 * W + 5 * g, H + 2 * g, 3, 255);
    auto put_gray = [&](std::size_t tile, const Tensor& m, double lo, double hi) {
        const double span = hi - lo;
        for (std::size_t y = 0; y < H; ++y)
            for (std::size_t x = 0; x < W; ++x) {
                const std::uint8_t v = to_byte(span > 0 ? (m.at(y, x) - lo) / span : 0.0);
                for (std::size_t c = 0; c < 3; ++c) img.px(g + tile * (W + g) + x, g + y, c) = v;
            }
    };
    put_gray(0, noise, noise.min(), noise.max());
    // Power, routing demand and cell density when present.
    const std::size_t C = features.dim(0);
    const std::size_t chans[3] = {ch::p_all, C > ch::rudy ? ch::rudy : ch::p_i, C > ch::c_den ? ch::c_den : ch::p_s};
    for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x)
            for (std::size_t c = 0; c < 3; ++c) img.px(g + (W + g) + x, g + y, c) = to_byte(features.at(chans[c], y, x));
    const double hi = std::max(generated.max(), truth.max());
    put_gray(2, generated, 0.0, hi);
    put_gray(3, truth, 0.0, hi);
    return img;
}

inline void write_image(const fs::path& path_no_ext, const Image& img, const std::string& format) {
    if (format == "pgm")
        write_pgm(fs::path(path_no_ext.string() + ".pgm"), img);
    else
        write_png(fs::path(path_no_ext.string() + ".png"), img);
}

/// Samples the configured split from a checkpoint directory. Writes
/// samples/<id>.gift and, if enabled, panels/<id>.png.
inline SampleSet cmd_sample(const ExperimentConfig& cfg, const fs::path& dataset, const fs::path& ckpt, const fs::path& out,
                            std::size_t jobs = 1) {
    cfg.validate();
    const Manifest m = load_manifest(dataset);
    const LoadedSplit split = load_split(m, cfg.eval.split, cfg);
    write_run_record(out, "sample", cfg, {dataset / "manifest.json", ckpt});
    const auto sched = schedule_of(cfg);
    nn::Denoiser model = make_model(cfg, sched);
    try {
        load_weights(ckpt, model, cfg.diffusion.use_ema);
    } catch (const FormatError& e) {
        throw ConfigError(std::string("checkpoint does not match the model configuration: ") + e.what());
    }
    SampleSet s = sample_split(cfg, model, split, jobs);
    fs::create_directories(out / "samples");
    if (cfg.eval.panels) fs::create_directories(out / "panels");
    for (std::size_t i = 0; i < s.ids.size(); ++i) {
        save_tensor(out / "samples" / (s.ids[i] + ".gift"), s.maps[i], Dtype::f64);
        if (cfg.eval.panels)
            write_image(out / "panels" / s.ids[i], make_panel(s.noise[i], split.features[i], s.maps[i], split.labels[i], cfg.eval.gutter),
                        cfg.eval.panel_format);
    }
    spdlog::info("sampled {} designs into {}", s.ids.size(), out.string());
    return s;
}

// ------------------------------------------------------------------ evaluation

/// Report JSON restricted to the enabled metrics.
inline json report_json(const metrics::EvalReport& r, const std::vector<std::string>& enabled) {
    json j = metrics::to_json(r);
    auto filter = [&](json& row) {
        for (const auto& name : metric_names())
            if (std::find(enabled.begin(), enabled.end(), name) == enabled.end()) row.erase(name);
    };
    filter(j["mean"]);
    for (auto& row : j["samples"]) filter(row);
    return j;
}

inline void write_report(const fs::path& out, const metrics::EvalReport& r, const std::vector<std::string>& enabled) {
    fs::create_directories(out);
    write_json_file(out / "report.json", report_json(r, enabled));
    std::ofstream cs(out / "report.csv", std::ios::trunc);
    if (!cs) throw DataError("cannot write " + (out / "report.csv").string());
    cs << "id";
    for (const auto& name : metric_names())
        if (std::find(enabled.begin(), enabled.end(), name) != enabled.end()) cs << ',' << name;
    cs << '\n';
    const json j = metrics::to_json(r);
    for (const auto& row : j["samples"]) {
        cs << row["id"].get<std::string>();
        for (const auto& name : metric_names()) {
            if (std::find(enabled.begin(), enabled.end(), name) == enabled.end()) continue;
            const auto& v = row[name];
            if (v.is_string()) {
                cs << ',' << v.get<std::string>();
            } else {
                char buf[32];
                std::snprintf(buf, sizeof buf, "%.17g", v.get<double>());
                cs << ',' << buf;
            }
        }
        cs << '\n';
    }
}

/// Compares `samples_dir/<id>.gift` to the labels of the configured split.
inline metrics::EvalReport cmd_eval(const ExperimentConfig& cfg, const fs::path& dataset, const fs::path& samples_dir,
                                    const fs::path& out) {
    cfg.validate();
    const Manifest m = load_manifest(dataset);
    std::vector<metrics::EvalSample> pairs;
    for (const auto* e : m.split(cfg.eval.split)) {
        const fs::path p = samples_dir / (e->id + ".gift");
        if (!fs::exists(p)) throw DataError("no sample for " + e->id + " in " + samples_dir.string());
        pairs.push_back({e->id, load_tensor(p), load_tensor(m.root / e->label)});
    }
    write_run_record(out, "eval", cfg, {dataset / "manifest.json", samples_dir});
    auto rep = metrics::evaluate_all(pairs, cfg.to_json());
    write_report(out, rep, cfg.eval.metrics);
    spdlog::info("evaluated {} samples: pearson {:.4f} nmae {:.4f}", rep.count(), rep.mean.pearson, rep.mean.nmae);
    return rep;
}

// ------------------------------------------------------------------ single-design stages

inline FeatureStack cmd_features(const ExperimentConfig& cfg, const fs::path& design, const fs::path& out_gift) {
    const auto d = load_design(design);
    auto fs = build_feature_stack(d, cfg.features.pdn.capacity);
    save_feature_stack(out_gift, fs);
    return fs;
}

inline graph::DesignGraph cmd_graph(const ExperimentConfig& cfg, const fs::path& design, const fs::path& out_json) {
    const auto d = load_design(design);
    const auto attrs = graph::netlist_attributes(d);
    auto g = graph::build_graph(attrs, graph::placement_of(d), {cfg.graph.fanout_cap});
    const auto rep = graph::validate_graph(g, attrs);
    for (const auto& v : rep.violations) spdlog::warn("graph: {}", v);
    graph::save_graph(out_json, g);
    spdlog::info("graph: {} nodes, {} edges", g.num_nodes(), g.edges.size());
    return g;
}

inline Tensor cmd_solve(const ExperimentConfig& cfg, const fs::path& design, const fs::path& out_gift,
                        pdn::SolveMethod method = pdn::SolveMethod::conjugate_gradient) {
    const auto d = load_design(design);
    const auto fs = build_feature_stack(d, cfg.features.pdn.capacity);
    Tensor y = pdn::ir_label(d, fs, cfg.features.pdn, method);
    save_tensor(out_gift, y, Dtype::f64);
    auto png = out_gift;
    png.replace_extension(".png");
    write_png(png, map_to_image(y));
    spdlog::info("IR drop: max {:.4g}, mean {:.4g} of Vdd", y.max(), y.sum() / static_cast<double>(y.size()));
    return y;
}

}  // namespace gif::exp

#endif  // GIF_EXPERIMENT_HPP
