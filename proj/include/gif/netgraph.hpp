#ifndef GIF_NETGRAPH_HPP
#define GIF_NETGRAPH_HPP

// Netlist graph: one node per instance, an edge between every pair of
// instances that share a net. Built from the pin / net / node attribute
// arrays plus placement bounding boxes.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "gif/design.hpp"
#include "gif/error.hpp"
#include "gif/tensor.hpp"

namespace gif::graph {

struct PinAttr {
    std::string name;
    std::size_t net = 0;
    std::size_t node = 0;
};

struct NodeAttr {
    std::string instance_name;
    std::string cell_type;
};

struct NetlistAttributes {
    std::vector<PinAttr> pins;
    std::vector<std::string> net_names;  // net index -> name
    std::vector<NodeAttr> nodes;         // node index -> instance
};

inline constexpr std::size_t kNodeFeatures = 7;  // c_x, c_y, l, b, r, t, p

struct DesignGraph {
    Tensor node_features;  // [N,7]
    std::vector<std::pair<std::size_t, std::size_t>> edges;  // i < j, sorted, unique

    std::size_t num_nodes() const { return node_features.empty() ? 0 : node_features.dim(0); }

    std::vector<std::size_t> degrees() const {
        std::vector<std::size_t> deg(num_nodes(), 0);
        for (const auto& [i, j] : edges) {
            ++deg[i];
            ++deg[j];
        }
        return deg;
    }
};

/// Raised when every placement box is zero, as in corrupt placement snapshots;
/// callers skip the graph and fall back to image-only conditioning.
struct DegenerateGraphError : DataError {
    using DataError::DataError;
};

struct BuildOptions {
    std::size_t fanout_cap = 64;  // nets touching more nodes become a star on the lowest index
};

inline DesignGraph build_graph(const NetlistAttributes& attrs, const std::vector<BBox>& placement,
                               const BuildOptions& opt = {}) {
    const std::size_t n_nodes = attrs.nodes.size(), n_nets = attrs.net_names.size();
    if (n_nodes == 0) throw DataError("build_graph: no nodes");
    for (const auto& p : attrs.pins) {
        if (p.net >= n_nets) throw DataError("build_graph: pin " + p.name + " references missing net " + std::to_string(p.net));
        if (p.node >= n_nodes)
            throw DataError("build_graph: pin " + p.name + " references missing node " + std::to_string(p.node));
    }
    if (placement.size() != n_nodes)
        throw DataError("build_graph: placement covers " + std::to_string(placement.size()) + " of " +
                        std::to_string(n_nodes) + " nodes");
    if (std::all_of(placement.begin(), placement.end(), [](const BBox& b) { return b == BBox{}; }))
        throw DegenerateGraphError("build_graph: every placement box is zero");

    std::vector<std::vector<std::size_t>> members(n_nets);
    std::vector<std::size_t> pin_count(n_nodes, 0);
    for (const auto& p : attrs.pins) {
        members[p.net].push_back(p.node);
        ++pin_count[p.node];
    }
    std::vector<std::pair<std::size_t, std::size_t>> edges;
    for (auto& m : members) {
        std::sort(m.begin(), m.end());
        m.erase(std::unique(m.begin(), m.end()), m.end());
        if (m.size() < 2) continue;
        if (m.size() > opt.fanout_cap) {
            for (std::size_t k = 1; k < m.size(); ++k) edges.emplace_back(m[0], m[k]);
        } else {
            for (std::size_t a = 0; a < m.size(); ++a)
                for (std::size_t b = a + 1; b < m.size(); ++b) edges.emplace_back(m[a], m[b]);
        }
    }
    std::sort(edges.begin(), edges.end());
    edges.erase(std::unique(edges.begin(), edges.end()), edges.end());

    DesignGraph g;
    g.node_features = Tensor({n_nodes, kNodeFeatures});
    for (std::size_t v = 0; v < n_nodes; ++v) {
        const auto& b = placement[v];
        const double row[kNodeFeatures] = {b.cx(), b.cy(), b.l, b.b, b.r, b.t, static_cast<double>(pin_count[v])};
        for (std::size_t k = 0; k < kNodeFeatures; ++k) g.node_features.at(v, k) = row[k];
    }
    g.edges = std::move(edges);
    return g;
}

/// Attribute arrays for a synthetic design: node = instance id, net = net id.
inline NetlistAttributes netlist_attributes(const SyntheticDesign& d) {
    NetlistAttributes a;
    for (const auto& inst : d.instances) a.nodes.push_back({inst.name, inst.cell_type});
    for (const auto& net : d.nets) {
        a.net_names.push_back(net.name);
        for (const auto& p : net.pins) a.pins.push_back({d.instances[p.instance].name + "/" + p.name, net.id, p.instance});
    }
    return a;
}

inline std::vector<BBox> placement_of(const SyntheticDesign& d) {
    std::vector<BBox> p;
    for (const auto& inst : d.instances) p.push_back(inst.bbox);
    return p;
}

struct GraphReport {
    std::vector<std::string> violations;
    std::map<std::size_t, std::size_t> degree_histogram;  // degree -> node count

    bool ok() const { return violations.empty(); }
};

/// Checks graph invariants. Never throws; problems land in `violations`.
inline GraphReport validate_graph(const DesignGraph& g) {
    GraphReport rep;
    const auto& f = g.node_features;
    if (f.rank() != 2 || f.dim(1) != kNodeFeatures) {
        rep.violations.push_back("node features must be [N,7]");
        return rep;
    }
    const std::size_t n = f.dim(0);
    if (!f.all_finite()) rep.violations.push_back("node features contain non-finite values");
    for (std::size_t v = 0; v < n; ++v) {
        const double p = f.at(v, 6);
        if (p < 0 || p != std::floor(p)) rep.violations.push_back("node " + std::to_string(v) + " has a non-integer pin count");
    }
    std::vector<std::vector<std::size_t>> adj(n);
    for (std::size_t e = 0; e < g.edges.size(); ++e) {
        const auto [i, j] = g.edges[e];
        if (i >= n || j >= n) {
            rep.violations.push_back("edge " + std::to_string(e) + " references a missing node");
            continue;
        }
        if (i == j) {
            rep.violations.push_back("self-loop on node " + std::to_string(i));
            continue;
        }
        if (i > j) rep.violations.push_back("edge (" + std::to_string(i) + "," + std::to_string(j) + ") not stored as i<j");
        if (e > 0 && g.edges[e - 1] == g.edges[e])
            rep.violations.push_back("duplicate edge (" + std::to_string(i) + "," + std::to_string(j) + ")");
        adj[i].push_back(j);
        adj[j].push_back(i);
    }
    // Symmetry of the implied adjacency.
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j : adj[i])
            if (std::count(adj[j].begin(), adj[j].end(), i) != std::count(adj[i].begin(), adj[i].end(), j))
                rep.violations.push_back("asymmetric adjacency between " + std::to_string(i) + " and " + std::to_string(j));
    for (std::size_t i = 0; i < n; ++i) ++rep.degree_histogram[adj[i].size()];
    return rep;
}

/// Additionally checks the pin-count column against the attribute arrays.
inline GraphReport validate_graph(const DesignGraph& g, const NetlistAttributes& attrs) {
    auto rep = validate_graph(g);
    if (g.num_nodes() != attrs.nodes.size()) {
        rep.violations.push_back("node count differs from attributes");
        return rep;
    }
    std::vector<std::size_t> pins(attrs.nodes.size(), 0);
    for (const auto& p : attrs.pins)
        if (p.node < pins.size()) ++pins[p.node];
    for (std::size_t v = 0; v < pins.size(); ++v)
        if (g.node_features.at(v, 6) != static_cast<double>(pins[v]))
            rep.violations.push_back("node " + std::to_string(v) + " pin count differs from attributes");
    return rep;
}

// ------------------------------------------------------------------ JSON

inline nlohmann::json graph_to_json(const DesignGraph& g) {
    nlohmann::json j;
    j["nodes"] = nlohmann::json::array();
    for (std::size_t v = 0; v < g.num_nodes(); ++v) {
        nlohmann::json row = nlohmann::json::array();
        for (std::size_t k = 0; k < kNodeFeatures; ++k) row.push_back(g.node_features.at(v, k));
        j["nodes"].push_back(std::move(row));
    }
    j["edges"] = nlohmann::json::array();
    for (const auto& [a, b] : g.edges) j["edges"].push_back({a, b});
    return j;
}

inline DesignGraph graph_from_json(const nlohmann::json& j) {
    try {
        DesignGraph g;
        const auto& nodes = j.at("nodes");
        if (nodes.empty()) throw FormatError("graph has no nodes");
        g.node_features = Tensor({nodes.size(), kNodeFeatures});
        for (std::size_t v = 0; v < nodes.size(); ++v) {
            if (nodes[v].size() != kNodeFeatures) throw FormatError("graph node rows must have 7 entries");
            for (std::size_t k = 0; k < kNodeFeatures; ++k) g.node_features.at(v, k) = nodes[v][k].get<double>();
        }
        for (const auto& e : j.at("edges")) g.edges.emplace_back(e.at(0).get<std::size_t>(), e.at(1).get<std::size_t>());
        return g;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("malformed graph JSON: ") + e.what());
    }
}

inline void save_graph(const std::filesystem::path& path, const DesignGraph& g) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw DataError("cannot open " + path.string() + " for writing");
    os << graph_to_json(g).dump() << '\n';
}

inline DesignGraph load_graph(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw DataError("cannot open " + path.string());
    nlohmann::json j;
    try {
        is >> j;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
    return graph_from_json(j);
}

}  // namespace gif::graph

#endif  // GIF_NETGRAPH_HPP
