#ifndef GIF_PDN_HPP
#define GIF_PDN_HPP

// Static IR-drop ground truth. The supply mesh is a 4-neighbor resistive
// grid with one node per tile; pads tie nodes to Vdd through g_pad. Working
// in drop variables d = Vdd - v turns G v = i into G d = I_eff with I_eff
// the current each tile draws.

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "gif/design.hpp"
#include "gif/error.hpp"
#include "gif/features.hpp"
#include "gif/routing.hpp"
#include "gif/tensor.hpp"

namespace gif::pdn {

struct PdnConfig {
    std::array<double, 4> alpha{0.1, 0.1, 0.1, 0.1};    // RUDY, pin RUDY, density, macro
    std::array<double, 4> beta{0.25, 0.25, 0.25, 0.25};  // eGR H/V, GR H/V overflow
    double r0 = 0.003;                                   // nominal mesh resistance per tile
    double g_pad_ratio = 100.0;                          // pad conductance in units of 1/r0
    RoutingCapacity capacity{};
};

inline void require_same_hw(const Tensor& a, const Tensor& b, const char* what) {
    if (a.rank() != 2 || a.shape() != b.shape()) throw ShapeError(std::string(what) + ": map shape mismatch");
}

/// I_eff = P / Vdd + a1 RUDY + a2 RUDY_pin + a3 density + a4 macro, on raw maps.
inline Tensor effective_current(const Tensor& power, const Tensor& rudy, const Tensor& rudy_pin, const Tensor& density,
                                const Tensor& macro, double vdd, const std::array<double, 4>& alpha) {
    for (const Tensor* m : {&rudy, &rudy_pin, &density, &macro}) require_same_hw(power, *m, "effective_current");
    for (double a : alpha)
        if (!(a >= 0)) throw ConfigError("current coefficients must be nonnegative");
    if (!(vdd > 0)) throw ConfigError("vdd must be positive");
    Tensor out = Tensor::zeros_like(power);
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = power[i] / vdd + alpha[0] * rudy[i] + alpha[1] * rudy_pin[i] + alpha[2] * density[i] + alpha[3] * macro[i];
    return out;
}

inline Tensor effective_current(const FeatureStack& fs, double vdd, const std::array<double, 4>& alpha) {
    return effective_current(fs.raw_channel(ch::p_all), fs.raw_channel(ch::rudy), fs.raw_channel(ch::rudy_pin),
                             fs.raw_channel(ch::c_den), fs.raw_channel(ch::macro), vdd, alpha);
}

/// R_eff = R0 (1 + b1 O_eGR_H + b2 O_eGR_V + b3 O_GR_H + b4 O_GR_V).
inline Tensor effective_resistance(const Tensor& egr_h, const Tensor& egr_v, const Tensor& gr_h, const Tensor& gr_v,
                                   double r0, const std::array<double, 4>& beta) {
    for (const Tensor* m : {&egr_v, &gr_h, &gr_v}) require_same_hw(egr_h, *m, "effective_resistance");
    if (!(r0 > 0)) throw ConfigError("nominal resistance must be positive");
    for (double b : beta)
        if (!(b >= 0)) throw ConfigError("resistance coefficients must be nonnegative");
    Tensor out = Tensor::zeros_like(egr_h);
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = r0 * (1.0 + beta[0] * egr_h[i] + beta[1] * egr_v[i] + beta[2] * gr_h[i] + beta[3] * gr_v[i]);
    return out;
}

inline Tensor effective_resistance(const FeatureStack& fs, double r0, const std::array<double, 4>& beta) {
    return effective_resistance(fs.raw_channel(ch::ovf_egr_h), fs.raw_channel(ch::ovf_egr_v), fs.raw_channel(ch::ovf_gr_h),
                                fs.raw_channel(ch::ovf_gr_v), r0, beta);
}

/// Compressed sparse row matrix.
struct SparseMatrix {
    std::size_t n = 0;
    std::vector<std::size_t> row_ptr;
    std::vector<std::size_t> col;
    std::vector<double> val;

    void multiply(const std::vector<double>& x, std::vector<double>& y) const {
        y.assign(n, 0.0);
        for (std::size_t r = 0; r < n; ++r) {
            double s = 0;
            for (std::size_t k = row_ptr[r]; k < row_ptr[r + 1]; ++k) s += val[k] * x[col[k]];
            y[r] = s;
        }
    }

    double coeff(std::size_t r, std::size_t c) const {
        for (std::size_t k = row_ptr[r]; k < row_ptr[r + 1]; ++k)
            if (col[k] == c) return val[k];
        return 0.0;
    }

    std::vector<double> diagonal() const {
        std::vector<double> d(n, 0.0);
        for (std::size_t r = 0; r < n; ++r) d[r] = coeff(r, r);
        return d;
    }
};

struct ConductanceSystem {
    std::size_t grid_h = 0, grid_w = 0;
    SparseMatrix G;                 // siemens
    std::vector<double> current;    // amps drawn per node
    std::vector<std::size_t> pad_nodes;
    double g_pad = 0;
    double g_mesh = 0;

    std::size_t node(std::size_t y, std::size_t x) const noexcept { return y * grid_w + x; }
};

/// Builds G and the injection vector. Adjacent tiles a, b are joined by
/// 2 / (R_eff(a) + R_eff(b)); pads add g_pad to their diagonal.
inline ConductanceSystem assemble_system(const SyntheticDesign& d, const Tensor& r_eff, const Tensor& i_eff, double g_pad,
                                         double g_mesh = 0.0) {
    require_same_hw(r_eff, i_eff, "assemble_system");
    if (r_eff.dim(0) != d.grid_h || r_eff.dim(1) != d.grid_w) throw ShapeError("assemble_system: maps do not match grid");
    if (d.pads.empty()) throw DataError("assemble_system: design has no pads");
    if (!(g_pad > 0)) throw ConfigError("pad conductance must be positive");
    for (double r : r_eff.vec())
        if (!(r > 0)) throw DataError("assemble_system: nonpositive effective resistance");
    const std::size_t H = d.grid_h, W = d.grid_w, N = H * W;

    ConductanceSystem sys;
    sys.grid_h = H;
    sys.grid_w = W;
    sys.g_pad = g_pad;
    sys.g_mesh = g_mesh;
    sys.current = i_eff.vec();

    std::vector<double> pad_g(N, 0.0);
    for (const auto& p : d.pads) {
        const std::size_t k = sys.node(static_cast<std::size_t>(p.y), static_cast<std::size_t>(p.x));
        if (pad_g[k] == 0.0) sys.pad_nodes.push_back(k);
        pad_g[k] = g_pad;
    }

    auto& G = sys.G;
    G.n = N;
    G.row_ptr.assign(1, 0);
    for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x) {
            const std::size_t k = sys.node(y, x);
            const double rk = r_eff[k];
            double diag = pad_g[k];
            // Neighbors in increasing column order keeps rows sorted.
            auto link = [&](std::size_t j) {
                const double g = 2.0 / (rk + r_eff[j]);
                diag += g;
                return g;
            };
            std::array<std::pair<std::size_t, double>, 4> nb{};
            std::size_t cnt = 0;
            if (y > 0) nb[cnt++] = {sys.node(y - 1, x), link(sys.node(y - 1, x))};
            if (x > 0) nb[cnt++] = {sys.node(y, x - 1), link(sys.node(y, x - 1))};
            const std::size_t before = cnt;
            if (x + 1 < W) nb[cnt++] = {sys.node(y, x + 1), link(sys.node(y, x + 1))};
            if (y + 1 < H) nb[cnt++] = {sys.node(y + 1, x), link(sys.node(y + 1, x))};
            for (std::size_t q = 0; q < before; ++q) {
                G.col.push_back(nb[q].first);
                G.val.push_back(-nb[q].second);
            }
            G.col.push_back(k);
            G.val.push_back(diag);
            for (std::size_t q = before; q < cnt; ++q) {
                G.col.push_back(nb[q].first);
                G.val.push_back(-nb[q].second);
            }
            G.row_ptr.push_back(G.col.size());
        }
    return sys;
}

/// Violations of symmetry, sign pattern and diagonal dominance.
inline std::vector<std::string> check_system(const ConductanceSystem& sys) {
    std::vector<std::string> v;
    const auto& G = sys.G;
    std::vector<bool> is_pad(G.n, false);
    for (auto k : sys.pad_nodes) is_pad[k] = true;
    for (std::size_t r = 0; r < G.n; ++r) {
        double off = 0, diag = 0;
        for (std::size_t k = G.row_ptr[r]; k < G.row_ptr[r + 1]; ++k) {
            const std::size_t c = G.col[k];
            if (c == r) {
                diag = G.val[k];
                continue;
            }
            if (G.val[k] > 0) v.push_back("positive off-diagonal in row " + std::to_string(r));
            if (G.val[k] != G.coeff(c, r)) v.push_back("asymmetric entry (" + std::to_string(r) + "," + std::to_string(c) + ")");
            off += std::abs(G.val[k]);
        }
        if (diag < off) v.push_back("row " + std::to_string(r) + " not diagonally dominant");
        if (is_pad[r] && !(diag > off)) v.push_back("pad row " + std::to_string(r) + " not strictly dominant");
    }
    return v;
}

enum class SolveMethod { dense, conjugate_gradient };

struct CgOptions {
    double tolerance = 1e-12;  // relative residual ||b - Gx|| / ||b||
    std::size_t max_iterations = 0;  // 0 means 10 * n
};

struct CgResult {
    std::vector<double> x;
    std::size_t iterations = 0;
    double relative_residual = 0;
};

namespace detail {

inline double dot(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

}  // namespace detail

/// Jacobi-preconditioned conjugate gradient. Reductions run in index order,
/// so results are reproducible bit for bit.
inline CgResult conjugate_gradient(const SparseMatrix& A, const std::vector<double>& b, const CgOptions& opt = {}) {
    const std::size_t n = A.n;
    CgResult res;
    res.x.assign(n, 0.0);
    const double bnorm = std::sqrt(detail::dot(b, b));
    if (bnorm == 0.0) return res;
    const std::size_t max_it = opt.max_iterations ? opt.max_iterations : 10 * n;
    const auto diag = A.diagonal();
    std::vector<double> r = b, z(n), p(n), q(n);
    for (std::size_t i = 0; i < n; ++i) z[i] = r[i] / diag[i];
    p = z;
    double rz = detail::dot(r, z);
    double rnorm = bnorm;
    while (res.iterations < max_it) {
        A.multiply(p, q);
        const double pq = detail::dot(p, q);
        if (!(pq > 0)) throw NumericError("conjugate gradient breakdown: matrix is not positive definite");
        const double a = rz / pq;
        for (std::size_t i = 0; i < n; ++i) {
            res.x[i] += a * p[i];
            r[i] -= a * q[i];
        }
        ++res.iterations;
        rnorm = std::sqrt(detail::dot(r, r));
        if (rnorm <= opt.tolerance * bnorm) break;
        for (std::size_t i = 0; i < n; ++i) z[i] = r[i] / diag[i];
        const double rz_new = detail::dot(r, z);
        const double beta = rz_new / rz;
        rz = rz_new;
        for (std::size_t i = 0; i < n; ++i) p[i] = z[i] + beta * p[i];
    }
    // Report the true residual rather than the recurrence estimate.
    A.multiply(res.x, q);
    double tr = 0;
    for (std::size_t i = 0; i < n; ++i) tr += (b[i] - q[i]) * (b[i] - q[i]);
    res.relative_residual = std::sqrt(tr) / bnorm;
    if (res.relative_residual > std::max(opt.tolerance, 1e-10))
        throw NumericError("conjugate gradient did not converge after " + std::to_string(res.iterations) +
                           " iterations (relative residual " + std::to_string(res.relative_residual) + ")");
    return res;
}

inline constexpr std::size_t kDenseLimit = 4096;

/// In-place dense Cholesky factor (lower triangle). Throws when A is not SPD.
inline void cholesky(std::vector<double>& a, std::size_t n) {
    for (std::size_t j = 0; j < n; ++j) {
        double s = a[j * n + j];
        for (std::size_t k = 0; k < j; ++k) s -= a[j * n + k] * a[j * n + k];
        if (!(s > 0)) throw NumericError("Cholesky failed: matrix is singular or not positive definite");
        const double l = std::sqrt(s);
        a[j * n + j] = l;
        for (std::size_t i = j + 1; i < n; ++i) {
            double t = a[i * n + j];
            for (std::size_t k = 0; k < j; ++k) t -= a[i * n + k] * a[j * n + k];
            a[i * n + j] = t / l;
        }
    }
}

inline std::vector<double> to_dense(const SparseMatrix& A) {
    std::vector<double> a(A.n * A.n, 0.0);
    for (std::size_t r = 0; r < A.n; ++r)
        for (std::size_t k = A.row_ptr[r]; k < A.row_ptr[r + 1]; ++k) a[r * A.n + A.col[k]] = A.val[k];
    return a;
}

inline std::vector<double> dense_solve(const SparseMatrix& A, const std::vector<double>& b) {
    const std::size_t n = A.n;
    if (n > kDenseLimit) throw ConfigError("dense solve limited to " + std::to_string(kDenseLimit) + " nodes");
    auto a = to_dense(A);
    cholesky(a, n);
    std::vector<double> y(b);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t k = 0; k < i; ++k) y[i] -= a[i * n + k] * y[k];
        y[i] /= a[i * n + i];
    }
    for (std::size_t i = n; i-- > 0;) {
        for (std::size_t k = i + 1; k < n; ++k) y[i] -= a[k * n + i] * y[k];
        y[i] /= a[i * n + i];
    }
    return y;
}

/// Drop per node in volts (Vdd - v), before normalization.
inline std::vector<double> solve_drop(const ConductanceSystem& sys, SolveMethod method, const CgOptions& opt = {}) {
    if (sys.current.size() != sys.G.n) throw ShapeError("injection vector does not match G");
    if (method == SolveMethod::dense) return dense_solve(sys.G, sys.current);
    return conjugate_gradient(sys.G, sys.current, opt).x;
}

/// IR-drop map normalized by Vdd. Entries must already lie in [0, 1).
inline Tensor solve_ir(const ConductanceSystem& sys, double vdd, SolveMethod method = SolveMethod::conjugate_gradient,
                       const CgOptions& opt = {}) {
    if (!(vdd > 0)) throw ConfigError("vdd must be positive");
    auto drop = solve_drop(sys, method, opt);
    Tensor m({sys.grid_h, sys.grid_w}, std::move(drop));
    for (auto& v : m.vec()) {
        v /= vdd;
        if (!(v >= -1e-12 && v < 1.0))
            throw NumericError("IR drop " + std::to_string(v) + " of Vdd is outside [0,1); the PDN is under-provisioned");
        if (v < 0) v = 0;  // roundoff below zero on current-free grids
    }
    return m;
}

/// Ground-truth label for a design: features -> R_eff, I_eff -> solve.
inline Tensor ir_label(const SyntheticDesign& d, const FeatureStack& fs, const PdnConfig& cfg,
                       SolveMethod method = SolveMethod::conjugate_gradient) {
    const Tensor i_eff = effective_current(fs, d.vdd, cfg.alpha);
    const Tensor r_eff = effective_resistance(fs, cfg.r0, cfg.beta);
    const auto sys = assemble_system(d, r_eff, i_eff, cfg.g_pad_ratio / cfg.r0, 1.0 / cfg.r0);
    return solve_ir(sys, d.vdd, method);
}

}  // namespace gif::pdn

#endif  // GIF_PDN_HPP
