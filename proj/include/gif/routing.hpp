#ifndef GIF_ROUTING_HPP
#define GIF_ROUTING_HPP

// Tile rasterization of instances and nets: membership, RUDY kernels and the
// directional demand / overflow maps that stand in for a global router.

#include <algorithm>
#include <cmath>
#include <vector>

#include "gif/design.hpp"
#include "gif/tensor.hpp"

namespace gif {

inline TileCoord center_tile(const BBox& bb, std::size_t grid_h, std::size_t grid_w) {
    const int x = std::clamp(static_cast<int>(std::floor(bb.cx())), 0, static_cast<int>(grid_w) - 1);
    const int y = std::clamp(static_cast<int>(std::floor(bb.cy())), 0, static_cast<int>(grid_h) - 1);
    return {x, y};
}

/// Tiles an instance contributes to: those whose area is at least half
/// covered by the bbox. An instance too small to half-cover any tile falls
/// back to the tile holding its center, so no power is dropped.
inline std::vector<TileCoord> covered_tiles(const BBox& bb, std::size_t grid_h, std::size_t grid_w) {
    std::vector<TileCoord> out;
    const int x0 = std::max(0, static_cast<int>(std::floor(bb.l)));
    const int x1 = std::min(static_cast<int>(grid_w) - 1, static_cast<int>(std::ceil(bb.r)) - 1);
    const int y0 = std::max(0, static_cast<int>(std::floor(bb.b)));
    const int y1 = std::min(static_cast<int>(grid_h) - 1, static_cast<int>(std::ceil(bb.t)) - 1);
    for (int y = y0; y <= y1; ++y)
        for (int x = x0; x <= x1; ++x) {
            const double ox = std::min<double>(bb.r, x + 1) - std::max<double>(bb.l, x);
            const double oy = std::min<double>(bb.t, y + 1) - std::max<double>(bb.b, y);
            if (ox > 0 && oy > 0 && ox * oy >= 0.5) out.push_back({x, y});
        }
    if (out.empty()) out.push_back(center_tile(bb, grid_h, grid_w));
    return out;
}

/// Tile-aligned bounding box of a net's pins (pins sit at instance centers).
struct NetBox {
    int x0 = 0, y0 = 0, x1 = 0, y1 = 0;  // inclusive
    int w() const noexcept { return x1 - x0 + 1; }
    int h() const noexcept { return y1 - y0 + 1; }
    int half_perimeter() const noexcept { return w() + h(); }
};

inline NetBox net_box(const SyntheticDesign& d, const Net& net) {
    NetBox nb{static_cast<int>(d.grid_w), static_cast<int>(d.grid_h), -1, -1};
    for (const auto& p : net.pins) {
        const auto c = center_tile(d.instances.at(p.instance).bbox, d.grid_h, d.grid_w);
        nb.x0 = std::min(nb.x0, c.x);
        nb.y0 = std::min(nb.y0, c.y);
        nb.x1 = std::max(nb.x1, c.x);
        nb.y1 = std::max(nb.y1, c.y);
    }
    return nb;
}

/// Adds `value` to every tile of the box in an [H,W] map.
inline void splat(Tensor& map, const NetBox& nb, double value) {
    for (int y = nb.y0; y <= nb.y1; ++y)
        for (int x = nb.x0; x <= nb.x1; ++x) map.at(static_cast<std::size_t>(y), static_cast<std::size_t>(x)) += value;
}

/// RUDY density of one net: wirelength proxy (w + h) over area (w * h).
inline double rudy_kernel(const NetBox& nb) {
    return static_cast<double>(nb.w() + nb.h()) / static_cast<double>(nb.w() * nb.h());
}

inline Tensor rudy_map(const SyntheticDesign& d) {
    Tensor m({d.grid_h, d.grid_w});
    for (const auto& net : d.nets) {
        const auto nb = net_box(d, net);
        splat(m, nb, rudy_kernel(nb));
    }
    return m;
}

/// Pin RUDY: each pin contributes its net's RUDY kernel over the net box.
inline Tensor pin_rudy_map(const SyntheticDesign& d) {
    Tensor m({d.grid_h, d.grid_w});
    for (const auto& net : d.nets) {
        const auto nb = net_box(d, net);
        splat(m, nb, static_cast<double>(net.pins.size()) * rudy_kernel(nb));
    }
    return m;
}

/// Median half-perimeter over all nets (mean of the middle pair for even counts).
inline double median_half_perimeter(const SyntheticDesign& d) {
    std::vector<double> hp;
    hp.reserve(d.nets.size());
    for (const auto& net : d.nets) hp.push_back(net_box(d, net).half_perimeter());
    if (hp.empty()) return 0.0;
    std::sort(hp.begin(), hp.end());
    const std::size_t n = hp.size();
    return n % 2 ? hp[n / 2] : 0.5 * (hp[n / 2 - 1] + hp[n / 2]);
}

/// RUDY split at the median half-perimeter; nets at or below it are "short".
inline std::pair<Tensor, Tensor> rudy_long_short(const SyntheticDesign& d) {
    Tensor longm({d.grid_h, d.grid_w}), shortm({d.grid_h, d.grid_w});
    const double med = median_half_perimeter(d);
    for (const auto& net : d.nets) {
        const auto nb = net_box(d, net);
        splat(nb.half_perimeter() > med ? longm : shortm, nb, rudy_kernel(nb));
    }
    return {std::move(longm), std::move(shortm)};
}

/// Horizontal (w / (w h)) and vertical (h / (w h)) routing demand.
inline std::pair<Tensor, Tensor> directional_demand(const SyntheticDesign& d) {
    Tensor hm({d.grid_h, d.grid_w}), vm({d.grid_h, d.grid_w});
    for (const auto& net : d.nets) {
        const auto nb = net_box(d, net);
        splat(hm, nb, 1.0 / nb.h());
        splat(vm, nb, 1.0 / nb.w());
    }
    return {std::move(hm), std::move(vm)};
}

struct RoutingCapacity {
    double early_global = 5.0;  // tracks per tile seen by early global routing
    double global = 4.0;        // tracks per tile after detour spreading
};

/// max(0, demand - capacity) / capacity, elementwise.
inline Tensor overflow_from_demand(const Tensor& demand, double capacity) {
    if (!(capacity > 0)) throw ConfigError("routing capacity must be positive");
    Tensor o = Tensor::zeros_like(demand);
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = std::max(0.0, demand[i] - capacity) / capacity;
    return o;
}

/// 3x3 box average with edge renormalization; models detours that spread
/// demand into neighboring tiles during global routing.
inline Tensor spread_demand(const Tensor& m) {
    const std::size_t H = m.dim(0), W = m.dim(1);
    Tensor out({H, W});
    for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x) {
            double s = 0;
            int n = 0;
            for (int dy = -1; dy <= 1; ++dy)
                for (int dx = -1; dx <= 1; ++dx) {
                    const long yy = static_cast<long>(y) + dy, xx = static_cast<long>(x) + dx;
                    if (yy < 0 || xx < 0 || yy >= static_cast<long>(H) || xx >= static_cast<long>(W)) continue;
                    s += m.at(static_cast<std::size_t>(yy), static_cast<std::size_t>(xx));
                    ++n;
                }
            out.at(y, x) = s / n;
        }
    return out;
}

/// The four overflow maps in channel order eGR_H, eGR_V, GR_H, GR_V.
struct OverflowMaps {
    Tensor egr_h, egr_v, gr_h, gr_v;
};

inline OverflowMaps synthesize_overflow(const SyntheticDesign& d, const RoutingCapacity& cap) {
    auto [dh, dv] = directional_demand(d);
    OverflowMaps o;
    o.egr_h = overflow_from_demand(dh, cap.early_global);
    o.egr_v = overflow_from_demand(dv, cap.early_global);
    o.gr_h = overflow_from_demand(spread_demand(dh), cap.global);
    o.gr_v = overflow_from_demand(spread_demand(dv), cap.global);
    return o;
}

}  // namespace gif

#endif  // GIF_ROUTING_HPP
