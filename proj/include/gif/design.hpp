#ifndef GIF_DESIGN_HPP
#define GIF_DESIGN_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gif/error.hpp"
#include "gif/rng.hpp"

namespace gif {

/// Axis-aligned box in tile units; x grows right, y grows up (row index).
struct BBox {
    double l = 0, b = 0, r = 0, t = 0;

    double width() const noexcept { return r - l; }
    double height() const noexcept { return t - b; }
    double cx() const noexcept { return 0.5 * (l + r); }
    double cy() const noexcept { return 0.5 * (b + t); }
    bool operator==(const BBox&) const = default;
};

/// Half-open integer tile rectangle [l, r) x [b, t).
struct TileRect {
    int l = 0, b = 0, r = 0, t = 0;

    bool contains(double x, double y) const noexcept { return x >= l && x < r && y >= b && y < t; }
    bool contains_tile(int x, int y) const noexcept { return x >= l && x < r && y >= b && y < t; }
    bool operator==(const TileRect&) const = default;
};

struct TileCoord {
    int x = 0, y = 0;
    bool operator==(const TileCoord&) const = default;
};

inline constexpr int kTimeSlots = 20;

struct Instance {
    std::size_t id = 0;
    std::string name;
    std::string cell_type;
    BBox bbox;
    double p_internal = 0;   // p_i
    double p_switching = 0;  // p_s
    double p_leakage = 0;    // p_l
    double toggle_rate = 0;  // r_togg
    std::vector<int> window; // switching slots, sorted, subset of [0, 20)
    std::size_t pin_count = 0;

    double cx() const noexcept { return bbox.cx(); }
    double cy() const noexcept { return bbox.cy(); }
};

struct PinRef {
    std::size_t instance = 0;
    std::string name;
    bool operator==(const PinRef&) const = default;
};

struct Net {
    std::size_t id = 0;
    std::string name;
    std::vector<PinRef> pins;
};

struct SyntheticDesign {
    std::size_t grid_h = 0;
    std::size_t grid_w = 0;
    double tile_size_um = 2.25;
    double vdd = 1.0;
    std::vector<Instance> instances;
    std::vector<Net> nets;
    std::vector<TileRect> macros;
    std::vector<TileCoord> pads;
};

/// Recomputes every instance's pin count from the net list.
inline void refresh_pin_counts(SyntheticDesign& d) {
    for (auto& inst : d.instances) inst.pin_count = 0;
    for (const auto& net : d.nets)
        for (const auto& pin : net.pins)
            if (pin.instance < d.instances.size()) ++d.instances[pin.instance].pin_count;
}

/// Lists every broken invariant; empty means valid.
inline std::vector<std::string> validate_design(const SyntheticDesign& d) {
    std::vector<std::string> v;
    const auto W = static_cast<double>(d.grid_w), H = static_cast<double>(d.grid_h);
    if (d.grid_h == 0 || d.grid_w == 0) v.push_back("empty grid");
    if (d.pads.empty()) v.push_back("no pad locations");
    for (const auto& p : d.pads)
        if (p.x < 0 || p.y < 0 || p.x >= static_cast<int>(d.grid_w) || p.y >= static_cast<int>(d.grid_h))
            v.push_back("pad outside grid");
    for (const auto& m : d.macros)
        if (m.l < 0 || m.b < 0 || m.r > static_cast<int>(d.grid_w) || m.t > static_cast<int>(d.grid_h) || m.l >= m.r ||
            m.b >= m.t)
            v.push_back("macro outside grid or empty");
    std::vector<std::size_t> pins(d.instances.size(), 0);
    for (const auto& net : d.nets) {
        if (net.pins.size() < 2) v.push_back("net " + net.name + " has fewer than 2 pins");
        for (std::size_t i = 0; i < net.pins.size(); ++i) {
            if (net.pins[i].instance >= d.instances.size()) {
                v.push_back("net " + net.name + " references a missing instance");
                continue;
            }
            ++pins[net.pins[i].instance];
            for (std::size_t j = 0; j < i; ++j)
                if (net.pins[i] == net.pins[j]) v.push_back("net " + net.name + " repeats a pin");
        }
    }
    for (std::size_t i = 0; i < d.instances.size(); ++i) {
        const auto& inst = d.instances[i];
        const auto& bb = inst.bbox;
        if (inst.id != i) v.push_back("instance ids must be dense, got " + std::to_string(inst.id));
        if (!(bb.l <= bb.r && bb.b <= bb.t)) v.push_back(inst.name + ": inverted bbox");
        if (bb.l < 0 || bb.b < 0 || bb.r > W || bb.t > H) v.push_back(inst.name + ": bbox outside grid");
        if (inst.p_internal < 0 || inst.p_switching < 0 || inst.p_leakage < 0) v.push_back(inst.name + ": negative power");
        if (!(inst.toggle_rate >= 0 && inst.toggle_rate <= 1)) v.push_back(inst.name + ": toggle rate outside [0,1]");
        if (inst.window.empty()) v.push_back(inst.name + ": empty switching window");
        for (int k : inst.window)
            if (k < 0 || k >= kTimeSlots) v.push_back(inst.name + ": switching slot out of range");
        if (!std::is_sorted(inst.window.begin(), inst.window.end()) ||
            std::adjacent_find(inst.window.begin(), inst.window.end()) != inst.window.end())
            v.push_back(inst.name + ": switching window must be sorted and unique");
        if (inst.pin_count != pins[i]) v.push_back(inst.name + ": pin count does not match net list");
    }
    return v;
}

inline void require_valid(const SyntheticDesign& d) {
    const auto v = validate_design(d);
    if (!v.empty()) throw DataError("invalid design: " + v.front());
}

/// Knobs for the synthetic layout generator.
struct GenConfig {
    int clusters_min = 2;
    int clusters_max = 5;
    double cluster_sigma_min = 0.09;  // fraction of grid side
    double cluster_sigma_max = 0.18;
    double background_fraction = 0.15;
    double inst_w_min = 0.6, inst_w_max = 2.4;
    double inst_h_min = 0.6, inst_h_max = 1.2;
    int macros_max = 2;
    int macro_side_min = 3, macro_side_max = 7;
    double power_scale = 1.0;
    int max_fanout = 5;             // sinks per net
    double net_locality = 3.0;      // tiles; sink choice decays as exp(-d / locality)
    int pad_pitch = 8;
    double vdd = 1.0;
    double tile_size_um = 2.25;
    double max_density = 4.0;       // instances per free tile the generator accepts
};

namespace detail {

inline const std::vector<std::string>& cell_types() {
    static const std::vector<std::string> types{"INV", "BUF", "NAND2", "NOR2", "AOI21", "MUX2", "DFF", "XOR2"};
    return types;
}

inline bool in_any_macro(const std::vector<TileRect>& macros, double x, double y) {
    return std::any_of(macros.begin(), macros.end(), [&](const TileRect& m) { return m.contains(x, y); });
}

}  // namespace detail

/// Regular pad sub-grid: one tap every `pitch` tiles, offset by half a pitch.
inline std::vector<TileCoord> regular_pads(std::size_t grid_h, std::size_t grid_w, int pitch) {
    if (pitch < 1) throw ConfigError("pad pitch must be >= 1");
    std::vector<TileCoord> pads;
    const int off = pitch / 2;
    for (int y = off; y < static_cast<int>(grid_h); y += pitch)
        for (int x = off; x < static_cast<int>(grid_w); x += pitch) pads.push_back({x, y});
    if (pads.empty()) pads.push_back({static_cast<int>(grid_w) / 2, static_cast<int>(grid_h) / 2});
    return pads;
}

/// Clustered synthetic placement with locality-biased nets. Deterministic per seed.
inline SyntheticDesign generate_design(std::uint64_t seed, std::size_t grid_h, std::size_t grid_w,
                                       std::size_t n_instances, std::size_t n_nets, const GenConfig& cfg = {}) {
    if (n_instances < 1) throw DataError("generate_design: need at least one instance");
    if (grid_h < 8 || grid_w < 8) throw DataError("generate_design: grid must be at least 8x8");
    Rng rng(seed);
    const auto H = static_cast<double>(grid_h), W = static_cast<double>(grid_w);

    SyntheticDesign d;
    d.grid_h = grid_h;
    d.grid_w = grid_w;
    d.vdd = cfg.vdd;
    d.tile_size_um = cfg.tile_size_um;
    d.pads = regular_pads(grid_h, grid_w, cfg.pad_pitch);

    const int n_macros = static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.macros_max) + 1));
    for (int m = 0; m < n_macros; ++m) {
        const int side_span = cfg.macro_side_max - cfg.macro_side_min + 1;
        const int mw = std::min(cfg.macro_side_min + static_cast<int>(rng.below(side_span)), static_cast<int>(grid_w) / 2);
        const int mh = std::min(cfg.macro_side_min + static_cast<int>(rng.below(side_span)), static_cast<int>(grid_h) / 2);
        const int l = static_cast<int>(rng.below(grid_w - static_cast<std::size_t>(mw) + 1));
        const int b = static_cast<int>(rng.below(grid_h - static_cast<std::size_t>(mh) + 1));
        d.macros.push_back({l, b, l + mw, b + mh});
    }
    std::size_t macro_tiles = 0;
    for (std::size_t y = 0; y < grid_h; ++y)
        for (std::size_t x = 0; x < grid_w; ++x)
            if (detail::in_any_macro(d.macros, x + 0.5, y + 0.5)) ++macro_tiles;
    const double free_tiles = static_cast<double>(grid_h * grid_w - macro_tiles);
    if (static_cast<double>(n_instances) > cfg.max_density * free_tiles)
        throw DataError("generate_design: grid too small to place " + std::to_string(n_instances) + " instances");

    struct Cluster {
        double x, y, sx, sy;
    };
    std::vector<Cluster> clusters;
    const int n_clusters =
        cfg.clusters_min + static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.clusters_max - cfg.clusters_min + 1)));
    for (int c = 0; c < n_clusters; ++c) {
        const double side = std::min(H, W);
        clusters.push_back({rng.uniform(0.15, 0.85) * W, rng.uniform(0.15, 0.85) * H,
                            rng.uniform(cfg.cluster_sigma_min, cfg.cluster_sigma_max) * side,
                            rng.uniform(cfg.cluster_sigma_min, cfg.cluster_sigma_max) * side});
    }

    const auto& types = detail::cell_types();
    d.instances.reserve(n_instances);
    for (std::size_t i = 0; i < n_instances; ++i) {
        Instance inst;
        inst.id = i;
        inst.name = "U" + std::to_string(i);
        inst.cell_type = types[rng.below(types.size())];
        const double w = rng.uniform(cfg.inst_w_min, cfg.inst_w_max);
        const double h = rng.uniform(cfg.inst_h_min, cfg.inst_h_max);
        double cx = 0, cy = 0;
        for (int attempt = 0; attempt < 32; ++attempt) {
            if (rng.uniform() < cfg.background_fraction) {
                cx = rng.uniform(0, W);
                cy = rng.uniform(0, H);
            } else {
                const auto& c = clusters[rng.below(clusters.size())];
                cx = rng.normal(c.x, c.sx);
                cy = rng.normal(c.y, c.sy);
            }
            cx = std::clamp(cx, w / 2, W - w / 2);
            cy = std::clamp(cy, h / 2, H - h / 2);
            if (!detail::in_any_macro(d.macros, cx, cy)) break;
        }
        inst.bbox = {cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2};
        const double area = w * h;
        inst.p_internal = rng.uniform(0.2, 1.0) * area * cfg.power_scale;
        inst.p_switching = rng.uniform(0.2, 1.0) * area * cfg.power_scale;
        inst.p_leakage = rng.uniform(0.02, 0.1) * area * cfg.power_scale;
        inst.toggle_rate = rng.uniform(0.05, 0.6);
        const int start = static_cast<int>(rng.below(kTimeSlots));
        const int len = 1 + static_cast<int>(rng.below(8));
        for (int k = 0; k < len; ++k) inst.window.push_back((start + k) % kTimeSlots);
        std::sort(inst.window.begin(), inst.window.end());
        d.instances.push_back(std::move(inst));
    }

    // Nets need two distinct instances; a one-instance design has none.
    if (n_instances >= 2) {
        std::vector<int> next_pin(n_instances, 0);
        auto pin_name = [&](std::size_t inst) { return "A" + std::to_string(next_pin[inst]++); };
        std::vector<double> weight(n_instances);
        for (std::size_t n = 0; n < n_nets; ++n) {
            Net net;
            net.id = n;
            net.name = "n" + std::to_string(n);
            const std::size_t driver = rng.below(n_instances);
            net.pins.push_back({driver, pin_name(driver)});
            const std::size_t fanout =
                1 + rng.below(static_cast<std::uint64_t>(std::min<std::size_t>(cfg.max_fanout, n_instances - 1)));
            std::vector<bool> used(n_instances, false);
            used[driver] = true;
            const auto& dr = d.instances[driver];
            for (std::size_t s = 0; s < fanout; ++s) {
                double total = 0;
                for (std::size_t j = 0; j < n_instances; ++j) {
                    if (used[j]) {
                        weight[j] = 0;
                        continue;
                    }
                    const double dist = std::hypot(d.instances[j].cx() - dr.cx(), d.instances[j].cy() - dr.cy());
                    weight[j] = std::exp(-dist / cfg.net_locality);
                    total += weight[j];
                }
                std::size_t pick = 0;
                if (total > 0) {
                    double u = rng.uniform() * total;
                    for (pick = 0; pick + 1 < n_instances; ++pick) {
                        if (used[pick]) continue;
                        u -= weight[pick];
                        if (u < 0) break;
                    }
                    while (used[pick]) pick = (pick + 1) % n_instances;
                } else {
                    while (used[pick]) ++pick;
                }
                used[pick] = true;
                net.pins.push_back({pick, pin_name(pick)});
            }
            d.nets.push_back(std::move(net));
        }
    }
    refresh_pin_counts(d);
    return d;
}

// ------------------------------------------------------------------ JSON

inline nlohmann::json design_to_json(const SyntheticDesign& d) {
    using nlohmann::json;
    json j;
    j["format"] = "gif-design";
    j["version"] = 1;
    j["grid_h"] = d.grid_h;
    j["grid_w"] = d.grid_w;
    j["tile_size_um"] = d.tile_size_um;
    j["vdd"] = d.vdd;
    j["pads"] = json::array();
    for (const auto& p : d.pads) j["pads"].push_back({p.x, p.y});
    j["macros"] = json::array();
    for (const auto& m : d.macros) j["macros"].push_back({m.l, m.b, m.r, m.t});
    j["instances"] = json::array();
    for (const auto& i : d.instances) {
        j["instances"].push_back({{"id", i.id},
                                  {"name", i.name},
                                  {"cell_type", i.cell_type},
                                  {"bbox", {i.bbox.l, i.bbox.b, i.bbox.r, i.bbox.t}},
                                  {"p_i", i.p_internal},
                                  {"p_s", i.p_switching},
                                  {"p_l", i.p_leakage},
                                  {"r_togg", i.toggle_rate},
                                  {"window", i.window}});
    }
    j["nets"] = json::array();
    for (const auto& n : d.nets) {
        json pins = json::array();
        for (const auto& p : n.pins) pins.push_back({p.instance, p.name});
        j["nets"].push_back({{"id", n.id}, {"name", n.name}, {"pins", pins}});
    }
    return j;
}

inline SyntheticDesign design_from_json(const nlohmann::json& j) {
    try {
        if (j.at("format") != "gif-design") throw FormatError("not a gif-design document");
        if (j.at("version") != 1) throw VersionMismatchError("unsupported design version");
        SyntheticDesign d;
        d.grid_h = j.at("grid_h").get<std::size_t>();
        d.grid_w = j.at("grid_w").get<std::size_t>();
        d.tile_size_um = j.at("tile_size_um").get<double>();
        d.vdd = j.at("vdd").get<double>();
        for (const auto& p : j.at("pads")) d.pads.push_back({p.at(0).get<int>(), p.at(1).get<int>()});
        for (const auto& m : j.at("macros"))
            d.macros.push_back({m.at(0).get<int>(), m.at(1).get<int>(), m.at(2).get<int>(), m.at(3).get<int>()});
        for (const auto& ji : j.at("instances")) {
            Instance i;
            i.id = ji.at("id").get<std::size_t>();
            i.name = ji.at("name").get<std::string>();
            i.cell_type = ji.at("cell_type").get<std::string>();
            const auto& bb = ji.at("bbox");
            i.bbox = {bb.at(0).get<double>(), bb.at(1).get<double>(), bb.at(2).get<double>(), bb.at(3).get<double>()};
            i.p_internal = ji.at("p_i").get<double>();
            i.p_switching = ji.at("p_s").get<double>();
            i.p_leakage = ji.at("p_l").get<double>();
            i.toggle_rate = ji.at("r_togg").get<double>();
            i.window = ji.at("window").get<std::vector<int>>();
            d.instances.push_back(std::move(i));
        }
        for (const auto& jn : j.at("nets")) {
            Net n;
            n.id = jn.at("id").get<std::size_t>();
            n.name = jn.at("name").get<std::string>();
            for (const auto& p : jn.at("pins")) n.pins.push_back({p.at(0).get<std::size_t>(), p.at(1).get<std::string>()});
            d.nets.push_back(std::move(n));
        }
        refresh_pin_counts(d);
        require_valid(d);
        return d;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("malformed design JSON: ") + e.what());
    }
}

inline void save_design(const std::filesystem::path& path, const SyntheticDesign& d) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw DataError("cannot open " + path.string() + " for writing");
    os << design_to_json(d).dump(1) << '\n';
}

inline SyntheticDesign load_design(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw DataError("cannot open " + path.string());
    nlohmann::json j;
    try {
        is >> j;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
    return design_from_json(j);
}

}  // namespace gif

#endif  // GIF_DESIGN_HPP
