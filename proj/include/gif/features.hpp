#ifndef GIF_FEATURES_HPP
#define GIF_FEATURES_HPP

// The 34-channel conditioning stack: 24 power channels (p_i, p_s, p_sca,
// p_all and 20 time slots) followed by 10 layout channels.

#include <array>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "gif/design.hpp"
#include "gif/routing.hpp"
#include "gif/tensor.hpp"
#include "gif/tensor_io.hpp"

namespace gif {

inline constexpr std::size_t kPowerChannels = 24;
inline constexpr std::size_t kLayoutChannels = 10;
inline constexpr std::size_t kFeatureChannels = kPowerChannels + kLayoutChannels;
inline constexpr int kFeatureLayoutVersion = 1;

// Channel indices into the stack.
namespace ch {
inline constexpr std::size_t p_i = 0, p_s = 1, p_sca = 2, p_all = 3, p_t0 = 4;
inline constexpr std::size_t c_den = 24, macro = 25, rudy = 26, rudy_pin = 27, rudy_long = 28, rudy_short = 29;
inline constexpr std::size_t ovf_egr_h = 30, ovf_egr_v = 31, ovf_gr_h = 32, ovf_gr_v = 33;
}  // namespace ch

inline const std::vector<std::string>& feature_channel_names() {
    static const std::vector<std::string> names = [] {
        std::vector<std::string> n{"p_i", "p_s", "p_sca", "p_all"};
        for (int k = 0; k < kTimeSlots; ++k) n.push_back("p_t" + std::to_string(k));
        for (const char* s : {"C_den", "M", "RUDY", "RUDY_pin", "RUDY_long", "RUDY_short", "O_eGR_H", "O_eGR_V", "O_GR_H",
                              "O_GR_V"})
            n.emplace_back(s);
        return n;
    }();
    return names;
}

struct PowerEntry {
    double p_internal = 0, p_switching = 0, p_leakage = 0, toggle_rate = 0;
    std::vector<int> window;
};

/// Instance-level power report, indexed by instance id.
struct PowerReport {
    std::vector<PowerEntry> entries;
};

inline PowerReport power_report_from(const SyntheticDesign& d) {
    PowerReport r;
    for (const auto& i : d.instances)
        r.entries.push_back({i.p_internal, i.p_switching, i.p_leakage, i.toggle_rate, i.window});
    return r;
}

/// Scaled activity power of one instance: (p_s + p_i) * r_togg + p_l.
inline double switching_activity_power(const PowerEntry& e) {
    return (e.p_switching + e.p_internal) * e.toggle_rate + e.p_leakage;
}

/// Raw (unnormalized) [24,H,W] power channels.
inline Tensor build_power_channels(const SyntheticDesign& d, const PowerReport& report) {
    if (report.entries.size() != d.instances.size())
        throw DataError("power report has " + std::to_string(report.entries.size()) + " entries for " +
                        std::to_string(d.instances.size()) + " instances");
    Tensor out({kPowerChannels, d.grid_h, d.grid_w});
    for (std::size_t i = 0; i < d.instances.size(); ++i) {
        const auto& e = report.entries[i];
        if (e.window.empty()) throw DataError(d.instances[i].name + ": empty switching window");
        const auto tiles = covered_tiles(d.instances[i].bbox, d.grid_h, d.grid_w);
        const double share = 1.0 / static_cast<double>(tiles.size());
        const double sca = switching_activity_power(e);
        const double total = e.p_switching + e.p_internal + e.p_leakage;
        const double per_slot = sca / static_cast<double>(e.window.size());
        for (const auto& t : tiles) {
            const auto y = static_cast<std::size_t>(t.y), x = static_cast<std::size_t>(t.x);
            out.at(ch::p_i, y, x) += e.p_internal * share;
            out.at(ch::p_s, y, x) += e.p_switching * share;
            out.at(ch::p_sca, y, x) += sca * share;
            out.at(ch::p_all, y, x) += total * share;
            for (int k : e.window) out.at(ch::p_t0 + static_cast<std::size_t>(k), y, x) += per_slot * share;
        }
    }
    return out;
}

inline Tensor cell_density_map(const SyntheticDesign& d) {
    Tensor m({d.grid_h, d.grid_w});
    for (const auto& inst : d.instances) {
        const auto c = center_tile(inst.bbox, d.grid_h, d.grid_w);
        m.at(static_cast<std::size_t>(c.y), static_cast<std::size_t>(c.x)) += 1.0;
    }
    return m;
}

inline Tensor macro_map(const SyntheticDesign& d) {
    Tensor m({d.grid_h, d.grid_w});
    for (const auto& mac : d.macros)
        for (int y = mac.b; y < mac.t; ++y)
            for (int x = mac.l; x < mac.r; ++x) m.at(static_cast<std::size_t>(y), static_cast<std::size_t>(x)) = 1.0;
    return m;
}

/// Raw [10,H,W] layout channels.
inline Tensor build_layout_channels(const SyntheticDesign& d, const RoutingCapacity& cap = {}) {
    Tensor out({kLayoutChannels, d.grid_h, d.grid_w});
    const std::size_t plane = d.grid_h * d.grid_w;
    auto put = [&](std::size_t c, const Tensor& m) {
        std::copy(m.vec().begin(), m.vec().end(), out.vec().begin() + static_cast<std::ptrdiff_t>(c * plane));
    };
    put(0, cell_density_map(d));
    put(1, macro_map(d));
    put(2, rudy_map(d));
    put(3, pin_rudy_map(d));
    auto [lng, sht] = rudy_long_short(d);
    put(4, lng);
    put(5, sht);
    const auto o = synthesize_overflow(d, cap);
    put(6, o.egr_h);
    put(7, o.egr_v);
    put(8, o.gr_h);
    put(9, o.gr_v);
    return out;
}

/// Normalized [34,H,W] conditioning tensor plus what is needed to undo it.
struct FeatureStack {
    Tensor data;
    std::vector<std::string> channel_names;
    std::vector<std::pair<double, double>> norm_params;  // (min, max) per channel

    std::size_t channels() const { return data.dim(0); }
    std::size_t height() const { return data.dim(1); }
    std::size_t width() const { return data.dim(2); }

    /// Channel c mapped back to raw units.
    Tensor raw_channel(std::size_t c) const {
        Tensor m = data.channel(c);
        const auto [lo, hi] = norm_params.at(c);
        for (auto& v : m.vec()) v = lo + v * (hi - lo);
        return m;
    }
};

/// Concatenates power and layout channels and min-max normalizes each
/// channel independently; constant channels map to 0.
inline FeatureStack compose_feature_stack(const Tensor& power24, const Tensor& layout10) {
    if (power24.rank() != 3 || power24.dim(0) != kPowerChannels) throw ShapeError("power channels must be [24,H,W]");
    if (layout10.rank() != 3 || layout10.dim(0) != kLayoutChannels) throw ShapeError("layout channels must be [10,H,W]");
    if (power24.dim(1) != layout10.dim(1) || power24.dim(2) != layout10.dim(2))
        throw ShapeError("power and layout channels differ in H x W");
    const std::size_t H = power24.dim(1), W = power24.dim(2), plane = H * W;
    FeatureStack fs;
    fs.channel_names = feature_channel_names();
    fs.data = Tensor({kFeatureChannels, H, W});
    auto& out = fs.data.vec();
    std::copy(power24.vec().begin(), power24.vec().end(), out.begin());
    std::copy(layout10.vec().begin(), layout10.vec().end(), out.begin() + static_cast<std::ptrdiff_t>(kPowerChannels * plane));
    for (std::size_t c = 0; c < kFeatureChannels; ++c) {
        auto first = out.begin() + static_cast<std::ptrdiff_t>(c * plane);
        auto last = first + static_cast<std::ptrdiff_t>(plane);
        const auto [mn, mx] = std::minmax_element(first, last);
        const double lo = *mn, hi = *mx;
        fs.norm_params.emplace_back(lo, hi);
        const double span = hi - lo;
        for (auto it = first; it != last; ++it) *it = span > 0 ? (*it - lo) / span : 0.0;
    }
    return fs;
}

inline FeatureStack build_feature_stack(const SyntheticDesign& d, const RoutingCapacity& cap = {}) {
    return compose_feature_stack(build_power_channels(d, power_report_from(d)), build_layout_channels(d, cap));
}

// ------------------------------------------------------------------ files

inline nlohmann::json feature_sidecar(const FeatureStack& fs) {
    nlohmann::json j;
    j["format"] = "gif-features";
    j["layout_version"] = kFeatureLayoutVersion;
    j["channel_names"] = fs.channel_names;
    j["norm_params"] = nlohmann::json::array();
    for (const auto& [lo, hi] : fs.norm_params) j["norm_params"].push_back({lo, hi});
    return j;
}

/// Writes `<stem>.gift` and `<stem>.json` (channel names and norm params).
inline void save_feature_stack(const std::filesystem::path& gift_path, const FeatureStack& fs) {
    save_tensor(gift_path, fs.data);
    auto side = gift_path;
    side.replace_extension(".json");
    std::ofstream os(side, std::ios::trunc);
    if (!os) throw DataError("cannot open " + side.string());
    os << feature_sidecar(fs).dump(1) << '\n';
}

inline FeatureStack load_feature_stack(const std::filesystem::path& gift_path) {
    FeatureStack fs;
    fs.data = load_tensor(gift_path);
    auto side = gift_path;
    side.replace_extension(".json");
    std::ifstream is(side);
    if (!is) throw DataError("missing feature sidecar " + side.string());
    nlohmann::json j;
    try {
        is >> j;
        if (j.at("format") != "gif-features") throw FormatError("not a feature sidecar");
        if (j.at("layout_version") != kFeatureLayoutVersion) throw VersionMismatchError("feature layout version mismatch");
        fs.channel_names = j.at("channel_names").get<std::vector<std::string>>();
        for (const auto& p : j.at("norm_params")) fs.norm_params.emplace_back(p.at(0).get<double>(), p.at(1).get<double>());
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(side.string() + ": " + e.what());
    }
    if (fs.channel_names != feature_channel_names()) throw FormatError("feature channel order differs from the frozen layout");
    if (fs.data.rank() != 3 || fs.data.dim(0) != kFeatureChannels || fs.norm_params.size() != kFeatureChannels)
        throw FormatError("feature stack must hold 34 channels");
    return fs;
}

}  // namespace gif

#endif  // GIF_FEATURES_HPP
