#ifndef GIF_CONDNET_HPP
#define GIF_CONDNET_HPP

// Conditional noise predictor. A U-Net whose ResBlocks are modulated by the
// timestep and by the (downsampled) feature stack, with graph tokens fused
// through gated cross-attention at the bottleneck and the first decoder level.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gif/autograd.hpp"
#include "gif/error.hpp"
#include "gif/netgraph.hpp"
#include "gif/rng.hpp"
#include "gif/tensor.hpp"
#include "gif/tensor_io.hpp"

namespace gif::nn {

using ag::Var;

// ------------------------------------------------------------------ parameters

struct Parameter {
    std::string name;
    Var var;  // leaf that accumulates its gradient
};

class ParamStore {
public:
    Var add(const std::string& name, Tensor init) {
        if (index_.count(name)) throw ConfigError("duplicate parameter " + name);
        index_[name] = params_.size();
        params_.push_back({name, Var(std::move(init), true)});
        return params_.back().var;
    }

    const Var& operator[](const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw ConfigError("unknown parameter " + name);
        return params_[it->second].var;
    }
    bool contains(const std::string& name) const { return index_.count(name) > 0; }

    std::vector<Parameter>& all() noexcept { return params_; }
    const std::vector<Parameter>& all() const noexcept { return params_; }
    std::size_t size() const noexcept { return params_.size(); }

    std::size_t element_count() const {
        std::size_t n = 0;
        for (const auto& p : params_) n += p.var.value().size();
        return n;
    }

    void zero_grad() {
        for (auto& p : params_) p.var.node()->grad = Tensor();
    }

    std::vector<Tensor> values() const {
        std::vector<Tensor> v;
        for (const auto& p : params_) v.push_back(p.var.value());
        return v;
    }

    void set_values(const std::vector<Tensor>& v) {
        if (v.size() != params_.size()) throw FormatError("parameter count mismatch");
        for (std::size_t i = 0; i < v.size(); ++i) {
            if (v[i].shape() != params_[i].var.value().shape())
                throw FormatError("parameter " + params_[i].name + ": shape " + shape_str(v[i].shape()) + " vs " +
                                  shape_str(params_[i].var.value().shape()));
            params_[i].var.node()->value = v[i];
        }
    }

private:
    std::vector<Parameter> params_;
    std::map<std::string, std::size_t> index_;
};

inline Tensor normal_init(Shape shape, double stddev, Rng rng) {
    Tensor t(std::move(shape));
    for (auto& v : t.vec()) v = stddev * rng.normal();
    return t;
}

// ------------------------------------------------------------------ checkpoints

inline constexpr int kCheckpointVersion = 1;

/// Named tensors in one .gift container (f64, so resuming is exact) plus a
/// JSON manifest next to it listing names, shapes and the format version.
inline void save_named_tensors(const std::filesystem::path& gift_path, const std::vector<std::string>& names,
                               const std::vector<Tensor>& tensors, const nlohmann::json& extra = {}) {
    save_tensors(gift_path, tensors, Dtype::f64);
    nlohmann::json m;
    m["format"] = "gif-checkpoint";
    m["version"] = kCheckpointVersion;
    m["tensors"] = nlohmann::json::array();
    for (std::size_t i = 0; i < names.size(); ++i) m["tensors"].push_back({{"name", names[i]}, {"shape", tensors[i].shape()}});
    if (!extra.is_null()) m["extra"] = extra;
    auto mp = gift_path;
    mp.replace_extension(".json");
    std::ofstream os(mp, std::ios::trunc);
    if (!os) throw DataError("cannot write " + mp.string());
    os << m.dump(1) << '\n';
}

struct NamedTensors {
    std::vector<std::string> names;
    std::vector<Tensor> tensors;
    nlohmann::json extra;
};

inline NamedTensors load_named_tensors(const std::filesystem::path& gift_path) {
    auto mp = gift_path;
    mp.replace_extension(".json");
    std::ifstream is(mp);
    if (!is) throw DataError("missing checkpoint manifest " + mp.string());
    NamedTensors out;
    nlohmann::json m;
    try {
        is >> m;
        if (m.at("format") != "gif-checkpoint") throw FormatError(mp.string() + ": not a checkpoint manifest");
        if (m.at("version") != kCheckpointVersion) throw VersionMismatchError(mp.string() + ": checkpoint version mismatch");
        for (const auto& e : m.at("tensors")) out.names.push_back(e.at("name").get<std::string>());
        if (m.contains("extra")) out.extra = m["extra"];
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(mp.string() + ": " + e.what());
    }
    out.tensors = load_tensors(gift_path);
    if (out.tensors.size() != out.names.size()) throw FormatError(gift_path.string() + ": manifest and payload disagree");
    for (std::size_t i = 0; i < out.names.size(); ++i)
        if (m["tensors"][i]["shape"].get<Shape>() != out.tensors[i].shape())
            throw FormatError(gift_path.string() + ": shape of " + out.names[i] + " differs from manifest");
    return out;
}

inline void save_params(const std::filesystem::path& path, const ParamStore& ps, const nlohmann::json& extra = {}) {
    std::vector<std::string> names;
    for (const auto& p : ps.all()) names.push_back(p.name);
    save_named_tensors(path, names, ps.values(), extra);
}

/// Loads into an existing store; names and shapes must match exactly.
inline nlohmann::json load_params(const std::filesystem::path& path, ParamStore& ps) {
    auto nt = load_named_tensors(path);
    if (nt.names.size() != ps.size()) throw FormatError(path.string() + ": checkpoint does not match the model configuration");
    for (std::size_t i = 0; i < nt.names.size(); ++i)
        if (nt.names[i] != ps.all()[i].name)
            throw FormatError(path.string() + ": expected parameter " + ps.all()[i].name + ", found " + nt.names[i]);
    ps.set_values(nt.tensors);
    return nt.extra;
}

// ------------------------------------------------------------------ graph encoder

enum class PoolMode { topk, mean };

inline std::string to_string(PoolMode m) { return m == PoolMode::topk ? "topk" : "mean"; }
inline PoolMode pool_mode_from(const std::string& s) {
    if (s == "topk") return PoolMode::topk;
    if (s == "mean") return PoolMode::mean;
    throw ConfigError("unknown pooling mode '" + s + "' (expected topk or mean)");
}

/// D^-1/2 (A + I) D^-1/2 with D the degree of A + I.
inline ag::SparseRows normalized_adjacency(const graph::DesignGraph& g) {
    const std::size_t n = g.num_nodes();
    ag::SparseRows A;
    A.n = n;
    A.rows.resize(n);
    std::vector<double> deg(n, 1.0);
    for (const auto& [i, j] : g.edges) {
        deg[i] += 1;
        deg[j] += 1;
    }
    for (std::size_t i = 0; i < n; ++i) A.rows[i].emplace_back(i, 1.0 / deg[i]);
    for (const auto& [i, j] : g.edges) {
        const double a = 1.0 / std::sqrt(deg[i] * deg[j]);
        A.rows[i].emplace_back(j, a);
        A.rows[j].emplace_back(i, a);
    }
    for (auto& r : A.rows) std::sort(r.begin(), r.end());
    return A;
}

/// Per-column min-max scaling of the [N,7] node features; constant columns map to 0.
inline Tensor normalize_node_features(const Tensor& x) {
    Tensor out = x;
    const std::size_t n = x.dim(0), f = x.dim(1);
    for (std::size_t c = 0; c < f; ++c) {
        double lo = x.at(0, c), hi = lo;
        for (std::size_t r = 1; r < n; ++r) {
            lo = std::min(lo, x.at(r, c));
            hi = std::max(hi, x.at(r, c));
        }
        for (std::size_t r = 0; r < n; ++r) out.at(r, c) = hi > lo ? (x.at(r, c) - lo) / (hi - lo) : 0.0;
    }
    return out;
}

/// Node order used by pooling: degree descending, then node index ascending.
inline std::vector<std::size_t> degree_order(const std::vector<std::size_t>& degrees) {
    std::vector<std::size_t> order(degrees.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return degrees[a] > degrees[b]; });
    return order;
}

/// Index sets whose row means are the K tokens. topk: the K highest-degree
/// nodes, padded with the all-node mean when N < K. mean: K contiguous
/// buckets of the degree order; an empty bucket (N < K) also takes the
/// all-node mean.
inline std::vector<std::vector<std::size_t>> pooling_sets(const std::vector<std::size_t>& degrees, std::size_t K,
                                                          PoolMode mode) {
    if (K == 0) throw ConfigError("token count must be positive");
    const std::size_t n = degrees.size();
    if (n == 0) throw DataError("pooling an empty graph");
    const auto order = degree_order(degrees);
    std::vector<std::size_t> all(n);
    std::iota(all.begin(), all.end(), 0);
    std::vector<std::vector<std::size_t>> sets;
    for (std::size_t k = 0; k < K; ++k) {
        if (mode == PoolMode::topk) {
            sets.push_back(k < n ? std::vector<std::size_t>{order[k]} : all);
        } else {
            const std::size_t lo = k * n / K, hi = (k + 1) * n / K;
            sets.push_back(hi > lo ? std::vector<std::size_t>(order.begin() + static_cast<std::ptrdiff_t>(lo),
                                                              order.begin() + static_cast<std::ptrdiff_t>(hi))
                                   : all);
        }
    }
    return sets;
}

/// Tensor-level token pooling of embeddings H [N,D].
inline Tensor pool_tokens(const Tensor& H, const std::vector<std::size_t>& degrees, std::size_t K, PoolMode mode) {
    if (H.rank() != 2 || H.dim(0) != degrees.size()) throw ShapeError("pool_tokens: embeddings and degrees disagree");
    ag::NoGradGuard ng;
    return ag::index_mean(Var(H), pooling_sets(degrees, K, mode)).value();
}

/// Everything the encoder needs from one design graph, computed once.
struct GraphInput {
    ag::SparseRows adjacency;
    Tensor node_features;  // normalized [N,7]
    std::vector<std::vector<std::size_t>> pool_sets;
};

inline GraphInput prepare_graph(const graph::DesignGraph& g, std::size_t K, PoolMode mode) {
    if (g.num_nodes() == 0) throw DataError("empty graph");
    return {normalized_adjacency(g), normalize_node_features(g.node_features), pooling_sets(g.degrees(), K, mode)};
}

struct GcnWeights {
    Var w1, b1, w2, b2;
};

/// H = A relu(A X W1 + b1) W2 + b2.
inline Var gcn_encode(const ag::SparseRows& A, const Var& x, const GcnWeights& p) {
    auto layer = [&](const Var& in, const Var& w, const Var& b) {
        const Var xw = ag::linear(in, w, Var(Tensor({w.dim(1)})));
        const Var ax = ag::sparse_left_multiply(A, xw);
        // bias after propagation
        return ag::add(ax, ag::repeat_rows(b, A.n));
    };
    return layer(ag::relu(layer(x, p.w1, p.b1)), p.w2, p.b2);
}

// ------------------------------------------------------------------ denoiser

/// How the head output u becomes the noise estimate: directly, or as a
/// velocity through eps = sqrt(ab) u + sqrt(1-ab) x_t.
enum class OutputKind { eps, velocity };

inline std::string to_string(OutputKind k) { return k == OutputKind::eps ? "eps" : "velocity"; }
inline OutputKind output_kind_from(const std::string& s) {
    if (s == "eps") return OutputKind::eps;
    if (s == "velocity") return OutputKind::velocity;
    throw ConfigError("unknown output kind '" + s + "' (expected eps or velocity)");
}

struct ModelConfig {
    std::size_t in_features = 34;
    std::vector<std::size_t> channels{32, 64, 128};
    std::size_t time_dim = 64;
    std::size_t film_hidden = 32;
    std::size_t groups = 8;
    bool use_graph = true;
    std::size_t gcn_hidden = 64;
    std::size_t token_dim = 64;
    std::size_t tokens = 32;
    PoolMode pool = PoolMode::topk;
    std::size_t heads = 4;
    OutputKind output = OutputKind::velocity;

    std::size_t levels() const { return channels.size(); }

    void validate() const {
        if (channels.empty()) throw ConfigError("model needs at least one level");
        if (in_features == 0 || time_dim < 2 || time_dim % 2 || film_hidden == 0)
            throw ConfigError("model widths must be positive (time_dim even)");
        for (auto c : channels)
            if (c == 0) throw ConfigError("channel widths must be positive");
        if (use_graph) {
            if (heads == 0) throw ConfigError("heads must be positive");
            for (std::size_t l : {levels() - 1, levels() >= 2 ? levels() - 2 : levels() - 1})
                if (channels[l] % heads) throw ConfigError("attention heads must divide the channel width at attention sites");
            if (tokens == 0 || token_dim == 0 || gcn_hidden == 0) throw ConfigError("graph widths must be positive");
        }
    }
};

/// Sinusoidal timestep features [N, dim].
inline Tensor timestep_features(const std::vector<int>& t, std::size_t dim) {
    const std::size_t half = dim / 2;
    Tensor out({t.size(), dim});
    for (std::size_t n = 0; n < t.size(); ++n)
        for (std::size_t k = 0; k < half; ++k) {
            const double f = std::exp(-std::log(10000.0) * static_cast<double>(k) / static_cast<double>(half));
            out.at(n, k) = std::sin(t[n] * f);
            out.at(n, half + k) = std::cos(t[n] * f);
        }
    return out;
}

/// Conditioning for one batch. `drop[n]` replaces both conditions of item n
/// by the learned null embeddings; a missing graph behaves like a drop of
/// the graph branch only.
struct Conditioning {
    Tensor features;                         // [N,Cf,H,W]
    std::vector<const GraphInput*> graphs;   // per item, nullptr when absent
    std::vector<bool> drop;                  // per item
};

class Denoiser {
public:
    Denoiser(ModelConfig cfg, Rng init) : cfg_(std::move(cfg)) {
        cfg_.validate();
        build(init);
    }

    const ModelConfig& config() const noexcept { return cfg_; }
    ParamStore& params() noexcept { return params_; }
    const ParamStore& params() const noexcept { return params_; }

    /// Gate parameters of the attention sites (empty without graph).
    std::vector<std::string> gate_names() const {
        if (!cfg_.use_graph) return {};
        if (cfg_.levels() < 2) return {"attn_mid.gate"};
        return {"attn_mid.gate", "attn_dec.gate"};
    }

    /// Graph tokens [N,K,D] for a batch; absent graphs get the null token.
    Var graph_tokens(const std::vector<const GraphInput*>& graphs) const {
        std::vector<Var> rows;
        const GcnWeights w{p("gcn.l1.w"), p("gcn.l1.b"), p("gcn.l2.w"), p("gcn.l2.b")};
        for (const auto* g : graphs) {
            if (g) {
                const Var h = gcn_encode(g->adjacency, Var(g->node_features), w);
                rows.push_back(ag::index_mean(h, g->pool_sets));
            } else {
                rows.push_back(ag::repeat_rows(p("null_token"), cfg_.tokens));
            }
        }
        return ag::stack(rows);
    }

    Var forward(const Tensor& x_t, const std::vector<int>& t, const Conditioning& c) const {
        std::optional<Var> tokens;
        std::vector<bool> token_drop = c.drop;
        if (cfg_.use_graph) {
            if (c.graphs.size() != x_t.dim(0)) throw ShapeError("one graph slot per batch item required");
            for (std::size_t n = 0; n < c.graphs.size(); ++n)
                if (!c.graphs[n]) token_drop[n] = true;
            tokens = graph_tokens(c.graphs);
        }
        return forward_with_tokens(x_t, t, c.features, tokens, c.drop, token_drop);
    }

    /// Forward pass with explicit tokens [N,K,D]. `drop` nulls the features,
    /// `token_drop` nulls the tokens.
    Var forward_with_tokens(const Tensor& x_t, const std::vector<int>& t, const Tensor& features,
                            const std::optional<Var>& tokens, const std::vector<bool>& drop,
                            const std::vector<bool>& token_drop) const {
        const std::size_t L = cfg_.levels();
        if (x_t.rank() != 4 || x_t.dim(1) != 1) throw ShapeError("x_t must be [N,1,H,W], got " + shape_str(x_t.shape()));
        const std::size_t N = x_t.dim(0), H = x_t.dim(2), W = x_t.dim(3);
        const std::size_t div = std::size_t{1} << (L - 1);
        if (H % div || W % div)
            throw ShapeError("resolution " + std::to_string(H) + "x" + std::to_string(W) + " not divisible by " + std::to_string(div));
        if (features.shape() != Shape{N, cfg_.in_features, H, W})
            throw ShapeError("features must be " + shape_str({N, cfg_.in_features, H, W}) + ", got " + shape_str(features.shape()));
        if (t.size() != N || drop.size() != N) throw ShapeError("one timestep and one drop flag per batch item required");

        Var X(features);
        if (std::any_of(drop.begin(), drop.end(), [](bool b) { return b; })) X = ag::replace_masked(X, p("null_features"), drop);
        std::vector<Var> pyramid{X};
        for (std::size_t l = 1; l < L; ++l) pyramid.push_back(ag::avg_pool2(pyramid.back()));

        Var temb = ag::linear(Var(timestep_features(t, cfg_.time_dim)), p("time.l1.w"), p("time.l1.b"));
        temb = ag::linear(ag::silu(temb), p("time.l2.w"), p("time.l2.b"));
        const Var temb_act = ag::silu(temb);

        std::optional<Var> tok;
        if (cfg_.use_graph) {
            if (!tokens) throw ShapeError("graph-conditioned model needs tokens");
            if (tokens->value().shape() != Shape{N, cfg_.tokens, cfg_.token_dim})
                throw ShapeError("tokens must be " + shape_str({N, cfg_.tokens, cfg_.token_dim}));
            tok = std::any_of(token_drop.begin(), token_drop.end(), [](bool b) { return b; })
                      ? ag::replace_masked(*tokens, p("null_token"), token_drop)
                      : *tokens;
        }

        Var h = conv(Var(x_t), "conv_in");
        std::vector<Var> skips;
        for (std::size_t l = 0; l < L; ++l) {
            h = resblock("enc" + std::to_string(l), h, temb_act, pyramid[l]);
            if (l + 1 < L) {
                skips.push_back(h);
                h = ag::avg_pool2(h);
            }
        }
        h = resblock("mid", h, temb_act, pyramid[L - 1]);
        if (tok) h = cross_attention("attn_mid", h, *tok);
        for (std::size_t l = L - 1; l-- > 0;) {
            h = ag::concat_channels(ag::upsample2(h), skips[l]);
            h = resblock("dec" + std::to_string(l), h, temb_act, pyramid[l]);
            if (tok && l == L - 2) h = cross_attention("attn_dec", h, *tok);
        }
        // No norm before the head: it would strip the per-sample mean.
        const Var u = conv(ag::silu(h), "head.conv");
        if (cfg_.output == OutputKind::eps) return u;
        if (alpha_bar_.empty()) throw ConfigError("velocity output needs a noise schedule; call set_output_schedule");
        std::vector<double> a(N), b(N);
        for (std::size_t n = 0; n < N; ++n) {
            if (t[n] < 0 || static_cast<std::size_t>(t[n]) >= alpha_bar_.size())
                throw ShapeError("timestep " + std::to_string(t[n]) + " outside the schedule");
            a[n] = std::sqrt(alpha_bar_[t[n]]);
            b[n] = std::sqrt(1.0 - alpha_bar_[t[n]]);
        }
        return ag::blend_per_item(u, x_t, a, b);
    }

    /// alpha_bar table indexed by timestep, used by the velocity output.
    /// At high noise the implied x0 then comes from u, not x_t / sqrt(ab).
    void set_output_schedule(std::vector<double> alpha_bar) { alpha_bar_ = std::move(alpha_bar); }
    const std::vector<double>& output_schedule() const noexcept { return alpha_bar_; }

private:
    std::vector<double> alpha_bar_;

    const Var& p(const std::string& name) const { return params_[name]; }

    Var conv(const Var& x, const std::string& name) const { return ag::conv2d(x, p(name + ".w"), p(name + ".b")); }

    Var resblock(const std::string& name, const Var& x, const Var& temb_act, const Var& feat) const {
        const std::size_t cout = p(name + ".conv1.w").dim(0);
        const std::size_t groups = ag::group_count(cout, cfg_.groups);
        Var h = conv(x, name + ".conv1");
        h = ag::group_norm(h, groups, p(name + ".gn1.g"), p(name + ".gn1.b"));
        h = ag::film(h, ag::linear(temb_act, p(name + ".tfilm.w"), p(name + ".tfilm.b")));
        h = ag::silu(h);
        h = conv(h, name + ".conv2");
        h = ag::group_norm(h, groups, p(name + ".gn2.g"), p(name + ".gn2.b"));
        const Var g = conv(ag::silu(conv(feat, name + ".xfilm1")), name + ".xfilm2");
        h = ag::film(h, g);
        h = ag::silu(h);
        const Var skip = params_.contains(name + ".skip.w") ? conv(x, name + ".skip") : x;
        return ag::add(h, skip);
    }

    Var cross_attention(const std::string& name, const Var& h, const Var& tok) const {
        const std::size_t Hh = h.dim(2), Ww = h.dim(3);
        const Var q = ag::layer_norm(ag::to_tokens(h), p(name + ".lnq.g"), p(name + ".lnq.b"));
        const Var kv = ag::layer_norm(tok, p(name + ".lnk.g"), p(name + ".lnk.b"));
        const Var Q = ag::linear(q, p(name + ".q.w"), p(name + ".q.b"));
        const Var K = ag::linear(kv, p(name + ".k.w"), p(name + ".k.b"));
        const Var V = ag::linear(kv, p(name + ".v.w"), p(name + ".v.b"));
        const Var A = ag::multi_head_attention(Q, K, V, cfg_.heads);
        const Var O = ag::linear(A, p(name + ".o.w"), p(name + ".o.b"));
        return ag::gated_add(h, ag::from_tokens(O, Hh, Ww), p(name + ".gate"));
    }

    void build(const Rng& init) {
        auto rng = [&](const std::string& name) { return init.split(std::string_view(name)); };
        auto weight = [&](const std::string& name, Shape s, std::size_t fan_in) {
            params_.add(name, normal_init(std::move(s), 1.0 / std::sqrt(static_cast<double>(fan_in)), rng(name)));
        };
        auto zeros = [&](const std::string& name, Shape s) { params_.add(name, Tensor(std::move(s))); };
        auto ones = [&](const std::string& name, Shape s) { params_.add(name, Tensor(std::move(s), 1.0)); };
        auto conv_p = [&](const std::string& name, std::size_t cin, std::size_t cout, std::size_t k, bool zero = false) {
            if (zero)
                zeros(name + ".w", {cout, cin, k, k});
            else
                weight(name + ".w", {cout, cin, k, k}, cin * k * k);
            zeros(name + ".b", {cout});
        };
        auto lin_p = [&](const std::string& name, std::size_t in, std::size_t out, bool zero = false) {
            if (zero)
                zeros(name + ".w", {in, out});
            else
                weight(name + ".w", {in, out}, in);
            zeros(name + ".b", {out});
        };
        auto block_p = [&](const std::string& name, std::size_t cin, std::size_t cout) {
            conv_p(name + ".conv1", cin, cout, 3);
            ones(name + ".gn1.g", {cout});
            zeros(name + ".gn1.b", {cout});
            lin_p(name + ".tfilm", cfg_.time_dim, 2 * cout, true);
            conv_p(name + ".conv2", cout, cout, 3);
            ones(name + ".gn2.g", {cout});
            zeros(name + ".gn2.b", {cout});
            conv_p(name + ".xfilm1", cfg_.in_features, cfg_.film_hidden, 1);
            conv_p(name + ".xfilm2", cfg_.film_hidden, 2 * cout, 1, true);
            if (cin != cout) conv_p(name + ".skip", cin, cout, 1);
        };
        auto attn_p = [&](const std::string& name, std::size_t C) {
            ones(name + ".lnq.g", {C});
            zeros(name + ".lnq.b", {C});
            ones(name + ".lnk.g", {cfg_.token_dim});
            zeros(name + ".lnk.b", {cfg_.token_dim});
            lin_p(name + ".q", C, C);
            lin_p(name + ".k", cfg_.token_dim, C);
            lin_p(name + ".v", cfg_.token_dim, C);
            lin_p(name + ".o", C, C);
            zeros(name + ".gate", {1});
        };

        const auto& ch = cfg_.channels;
        const std::size_t L = ch.size();
        lin_p("time.l1", cfg_.time_dim, cfg_.time_dim);
        lin_p("time.l2", cfg_.time_dim, cfg_.time_dim);
        weight("null_features", {cfg_.in_features}, 1);
        conv_p("conv_in", 1, ch[0], 3);
        for (std::size_t l = 0; l < L; ++l) block_p("enc" + std::to_string(l), l ? ch[l - 1] : ch[0], ch[l]);
        block_p("mid", ch[L - 1], ch[L - 1]);
        for (std::size_t l = L - 1; l-- > 0;) block_p("dec" + std::to_string(l), ch[l + 1] + ch[l], ch[l]);
        conv_p("head.conv", ch[0], 1, 3);
        if (cfg_.use_graph) {
            lin_p("gcn.l1", graph::kNodeFeatures, cfg_.gcn_hidden);
            lin_p("gcn.l2", cfg_.gcn_hidden, cfg_.token_dim);
            weight("null_token", {cfg_.token_dim}, 1);
            attn_p("attn_mid", ch[L - 1]);
            if (L >= 2) attn_p("attn_dec", ch[L - 2]);
        }
    }

    ModelConfig cfg_;
    ParamStore params_;
};

}  // namespace gif::nn

#endif  // GIF_CONDNET_HPP
