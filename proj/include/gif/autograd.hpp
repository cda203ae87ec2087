#ifndef GIF_AUTOGRAD_HPP
#define GIF_AUTOGRAD_HPP

// Reverse-mode differentiation over Tensor values. Every op records its
// parents and a closure that pushes the output gradient back to them;
// `backward` walks the recorded graph in reverse topological order.
// Image tensors are [N,C,H,W]; token tensors are [N,L,C].

#include <cmath>
#include <cstring>
#include <functional>
#include <memory>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "gif/error.hpp"
#include "gif/tensor.hpp"

namespace gif::ag {

inline bool& grad_mode() noexcept {
    thread_local bool enabled = true;
    return enabled;
}

/// Disables graph recording in its scope (sampling, evaluation).
class NoGradGuard {
public:
    NoGradGuard() noexcept : prev_(grad_mode()) { grad_mode() = false; }
    ~NoGradGuard() { grad_mode() = prev_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;

    Tensor& grad_buf() {
        if (grad.empty()) grad = Tensor::zeros_like(value);
        return grad;
    }
    // Gradient buffer of parent i, or nullptr when it needs none.
    Tensor* pgrad(std::size_t i) { return parents[i]->requires_grad ? &parents[i]->grad_buf() : nullptr; }
    const Tensor& pval(std::size_t i) const { return parents[i]->value; }
};

class Var {
public:
    Var() = default;
    explicit Var(std::shared_ptr<Node> n) : node_(std::move(n)) {}
    explicit Var(Tensor v, bool requires_grad = false) : node_(std::make_shared<Node>()) {
        node_->value = std::move(v);
        node_->requires_grad = requires_grad;
    }

    const Tensor& value() const { return node_->value; }
    Tensor& mutable_value() { return node_->value; }
    const Tensor& grad() const { return node_->grad; }
    const Shape& shape() const { return node_->value.shape(); }
    std::size_t dim(std::size_t i) const { return node_->value.dim(i); }
    bool requires_grad() const { return node_ && node_->requires_grad; }
    const std::shared_ptr<Node>& node() const { return node_; }
    explicit operator bool() const { return static_cast<bool>(node_); }

private:
    std::shared_ptr<Node> node_;
};

/// Output node of an op. Records parents only when one of them needs a gradient.
inline Var make_op(Tensor value, std::initializer_list<Var> inputs, std::function<void(Node&)> backward) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    if (grad_mode()) {
        bool any = false;
        for (const auto& v : inputs) any = any || v.requires_grad();
        if (any) {
            n->requires_grad = true;
            for (const auto& v : inputs) n->parents.push_back(v.node());
            n->backward_fn = std::move(backward);
        }
    }
    return Var(std::move(n));
}

inline Var make_op(Tensor value, const std::vector<Var>& inputs, std::function<void(Node&)> backward) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    if (grad_mode()) {
        bool any = false;
        for (const auto& v : inputs) any = any || v.requires_grad();
        if (any) {
            n->requires_grad = true;
            for (const auto& v : inputs) n->parents.push_back(v.node());
            n->backward_fn = std::move(backward);
        }
    }
    return Var(std::move(n));
}

/// Back-propagates from a scalar. Intermediate gradients are released as
/// soon as they have been consumed; leaf gradients accumulate.
inline void backward(const Var& root) {
    if (root.value().size() != 1) throw ShapeError("backward needs a scalar root");
    if (!root.requires_grad()) return;
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack{{root.node().get(), 0}};
    seen.insert(root.node().get());
    while (!stack.empty()) {
        auto& [n, i] = stack.back();
        if (i < n->parents.size()) {
            Node* p = n->parents[i++].get();
            if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }
    root.node()->grad_buf().fill(1.0);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (!n->backward_fn) continue;
        if (!n->grad.empty()) n->backward_fn(*n);
        n->grad = Tensor();
    }
}

// ------------------------------------------------------------------ helpers

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

inline void require_rank(const Tensor& t, std::size_t r, const char* op) {
    if (t.rank() != r) throw ShapeError(std::string(op) + ": expected rank " + std::to_string(r) + ", got " + shape_str(t.shape()));
}

inline void require_shape(const Tensor& t, const Shape& s, const char* op) {
    if (t.shape() != s) throw ShapeError(std::string(op) + ": expected " + shape_str(s) + ", got " + shape_str(t.shape()));
}

// ------------------------------------------------------------------ elementwise

inline Var add(const Var& a, const Var& b) {
    a.value().require_same_shape(b.value(), "add");
    return make_op(a.value() + b.value(), {a, b}, [](Node& self) {
        for (std::size_t i : {0u, 1u})
            if (auto* g = self.pgrad(i)) *g += self.grad;
    });
}

inline Var scale(const Var& a, double s) {
    return make_op(a.value() * s, {a}, [s](Node& self) {
        if (auto* g = self.pgrad(0))
            for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += s * self.grad[i];
    });
}

inline Var silu(const Var& a) {
    Tensor out = Tensor::zeros_like(a.value());
    const auto& x = a.value();
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] / (1.0 + std::exp(-x[i]));
    return make_op(std::move(out), {a}, [](Node& self) {
        auto* g = self.pgrad(0);
        if (!g) return;
        const auto& x = self.pval(0);
        for (std::size_t i = 0; i < x.size(); ++i) {
            const double s = 1.0 / (1.0 + std::exp(-x[i]));
            (*g)[i] += self.grad[i] * s * (1.0 + x[i] * (1.0 - s));
        }
    });
}

inline Var relu(const Var& a) {
    Tensor out = a.value();
    for (auto& v : out.vec()) v = v > 0 ? v : 0.0;
    return make_op(std::move(out), {a}, [](Node& self) {
        auto* g = self.pgrad(0);
        if (!g) return;
        const auto& x = self.pval(0);
        for (std::size_t i = 0; i < x.size(); ++i)
            if (x[i] > 0) (*g)[i] += self.grad[i];
    });
}

inline Var reshape(const Var& a, Shape s) {
    return make_op(a.value().reshaped(std::move(s)), {a}, [](Node& self) {
        if (auto* g = self.pgrad(0))
            for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
    });
}

/// Scalar sum of w * a with a constant weight tensor.
inline Var weighted_sum(const Var& a, const Tensor& w) {
    a.value().require_same_shape(w, "weighted_sum");
    double s = 0;
    for (std::size_t i = 0; i < w.size(); ++i) s += w[i] * a.value()[i];
    return make_op(Tensor({1}, s), {a}, [w](Node& self) {
        if (auto* g = self.pgrad(0))
            for (std::size_t i = 0; i < w.size(); ++i) (*g)[i] += self.grad[0] * w[i];
    });
}

/// Mean squared difference to a constant target.
inline Var mse(const Var& a, const Tensor& target) {
    a.value().require_same_shape(target, "mse");
    const double n = static_cast<double>(target.size());
    double s = 0;
    for (std::size_t i = 0; i < target.size(); ++i) {
        const double d = a.value()[i] - target[i];
        s += d * d;
    }
    return make_op(Tensor({1}, s / n), {a}, [target, n](Node& self) {
        auto* g = self.pgrad(0);
        if (!g) return;
        const auto& x = self.pval(0);
        for (std::size_t i = 0; i < x.size(); ++i) (*g)[i] += self.grad[0] * 2.0 * (x[i] - target[i]) / n;
    });
}

/// a[n] * u + b[n] * x per batch item n, with x a constant [N, ...] tensor.
inline Var blend_per_item(const Var& u, const Tensor& x, const std::vector<double>& a, const std::vector<double>& b) {
    u.value().require_same_shape(x, "blend_per_item");
    const std::size_t N = x.dim(0), P = x.size() / N;
    if (a.size() != N || b.size() != N) throw ShapeError("blend_per_item: one coefficient pair per item required");
    Tensor out = Tensor::zeros_like(x);
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t i = n * P; i < (n + 1) * P; ++i) out[i] = a[n] * u.value()[i] + b[n] * x[i];
    return make_op(std::move(out), {u}, [a, N, P](Node& self) {
        auto* g = self.pgrad(0);
        if (!g) return;
        for (std::size_t n = 0; n < N; ++n)
            for (std::size_t i = n * P; i < (n + 1) * P; ++i) (*g)[i] += a[n] * self.grad[i];
    });
}

// ------------------------------------------------------------------ dense layers

/// x [..., K] times W [K, O] plus b [O].
inline Var linear(const Var& x, const Var& w, const Var& b) {
    const auto& X = x.value();
    const auto& Wt = w.value();
    require_rank(Wt, 2, "linear");
    const std::size_t K = Wt.dim(0), O = Wt.dim(1);
    if (X.dim(X.rank() - 1) != K) throw ShapeError("linear: input width " + shape_str(X.shape()) + " vs weight " + shape_str(Wt.shape()));
    require_shape(b.value(), {O}, "linear bias");
    const std::size_t M = X.size() / K;
    Shape os = X.shape();
    os.back() = O;
    Tensor out(os);
    MapMat Y(out.ptr(), M, O);
    Y.noalias() = CMapMat(X.ptr(), M, K) * CMapMat(Wt.ptr(), K, O);
    Y.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(b.value().ptr(), O);
    return make_op(std::move(out), {x, w, b}, [M, K, O](Node& self) {
        CMapMat G(self.grad.ptr(), M, O);
        if (auto* gx = self.pgrad(0)) MapMat(gx->ptr(), M, K).noalias() += G * CMapMat(self.pval(1).ptr(), K, O).transpose();
        if (auto* gw = self.pgrad(1)) MapMat(gw->ptr(), K, O).noalias() += CMapMat(self.pval(0).ptr(), M, K).transpose() * G;
        if (auto* gb = self.pgrad(2))
            for (std::size_t m = 0; m < M; ++m)
                for (std::size_t o = 0; o < O; ++o) (*gb)[o] += self.grad[m * O + o];
    });
}

/// Layer norm over the last dimension with affine gamma, beta [D].
inline Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5) {
    const auto& X = x.value();
    const std::size_t D = X.dim(X.rank() - 1), M = X.size() / D;
    require_shape(gamma.value(), {D}, "layer_norm gamma");
    require_shape(beta.value(), {D}, "layer_norm beta");
    Tensor out = Tensor::zeros_like(X);
    Tensor xhat = Tensor::zeros_like(X);
    std::vector<double> rstd(M);
    for (std::size_t m = 0; m < M; ++m) {
        const double* r = X.ptr() + m * D;
        double mu = 0, var = 0;
        for (std::size_t d = 0; d < D; ++d) mu += r[d];
        mu /= static_cast<double>(D);
        for (std::size_t d = 0; d < D; ++d) var += (r[d] - mu) * (r[d] - mu);
        var /= static_cast<double>(D);
        rstd[m] = 1.0 / std::sqrt(var + eps);
        for (std::size_t d = 0; d < D; ++d) {
            xhat[m * D + d] = (r[d] - mu) * rstd[m];
            out[m * D + d] = xhat[m * D + d] * gamma.value()[d] + beta.value()[d];
        }
    }
    return make_op(std::move(out), {x, gamma, beta}, [xhat = std::move(xhat), rstd = std::move(rstd), M, D](Node& self) {
        const auto& gam = self.pval(1);
        auto* gx = self.pgrad(0);
        auto* gg = self.pgrad(1);
        auto* gb = self.pgrad(2);
        std::vector<double> dxh(D);
        for (std::size_t m = 0; m < M; ++m) {
            const double* go = self.grad.ptr() + m * D;
            const double* xh = xhat.ptr() + m * D;
            double s1 = 0, s2 = 0;
            for (std::size_t d = 0; d < D; ++d) {
                if (gg) (*gg)[d] += go[d] * xh[d];
                if (gb) (*gb)[d] += go[d];
                dxh[d] = go[d] * gam[d];
                s1 += dxh[d];
                s2 += dxh[d] * xh[d];
            }
            if (!gx) continue;
            s1 /= static_cast<double>(D);
            s2 /= static_cast<double>(D);
            for (std::size_t d = 0; d < D; ++d) (*gx)[m * D + d] += rstd[m] * (dxh[d] - s1 - xh[d] * s2);
        }
    });
}

// ------------------------------------------------------------------ convolution

namespace detail {

// col [Ci*k*k, H*W] from one [Ci,H,W] image, zero padded by k/2.
inline void im2col(const double* x, std::size_t C, std::size_t H, std::size_t W, std::size_t k, double* col) {
    const long pad = static_cast<long>(k / 2);
    const std::size_t HW = H * W;
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t ky = 0; ky < k; ++ky)
            for (std::size_t kx = 0; kx < k; ++kx) {
                double* row = col + ((c * k + ky) * k + kx) * HW;
                const long dy = static_cast<long>(ky) - pad, dx = static_cast<long>(kx) - pad;
                for (std::size_t y = 0; y < H; ++y) {
                    const long sy = static_cast<long>(y) + dy;
                    double* dst = row + y * W;
                    if (sy < 0 || sy >= static_cast<long>(H)) {
                        std::memset(dst, 0, W * sizeof(double));
                        continue;
                    }
                    const double* src = x + (c * H + static_cast<std::size_t>(sy)) * W;
                    for (std::size_t xx = 0; xx < W; ++xx) {
                        const long sx = static_cast<long>(xx) + dx;
                        dst[xx] = (sx < 0 || sx >= static_cast<long>(W)) ? 0.0 : src[sx];
                    }
                }
            }
}

inline void col2im(const double* col, std::size_t C, std::size_t H, std::size_t W, std::size_t k, double* x) {
    const long pad = static_cast<long>(k / 2);
    const std::size_t HW = H * W;
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t ky = 0; ky < k; ++ky)
            for (std::size_t kx = 0; kx < k; ++kx) {
                const double* row = col + ((c * k + ky) * k + kx) * HW;
                const long dy = static_cast<long>(ky) - pad, dx = static_cast<long>(kx) - pad;
                for (std::size_t y = 0; y < H; ++y) {
                    const long sy = static_cast<long>(y) + dy;
                    if (sy < 0 || sy >= static_cast<long>(H)) continue;
                    double* dst = x + (c * H + static_cast<std::size_t>(sy)) * W;
                    const double* src = row + y * W;
                    for (std::size_t xx = 0; xx < W; ++xx) {
                        const long sx = static_cast<long>(xx) + dx;
                        if (sx >= 0 && sx < static_cast<long>(W)) dst[sx] += src[xx];
                    }
                }
            }
}

}  // namespace detail

/// Stride-1 "same" convolution: x [N,Ci,H,W], w [Co,Ci,k,k] (k odd), b [Co].
inline Var conv2d(const Var& x, const Var& w, const Var& b) {
    const auto& X = x.value();
    const auto& Wt = w.value();
    require_rank(X, 4, "conv2d input");
    require_rank(Wt, 4, "conv2d weight");
    const std::size_t N = X.dim(0), Ci = X.dim(1), H = X.dim(2), W = X.dim(3);
    const std::size_t Co = Wt.dim(0), k = Wt.dim(2);
    if (Wt.dim(1) != Ci || Wt.dim(3) != k || k % 2 == 0)
        throw ShapeError("conv2d: weight " + shape_str(Wt.shape()) + " does not fit input " + shape_str(X.shape()));
    require_shape(b.value(), {Co}, "conv2d bias");
    const std::size_t HW = H * W, CK = Ci * k * k;
    Tensor out({N, Co, H, W});
    std::vector<double> col(k == 1 ? 0 : CK * HW);
    CMapMat Wm(Wt.ptr(), Co, CK);
    const Eigen::Map<const Eigen::VectorXd> bias(b.value().ptr(), static_cast<Eigen::Index>(Co));
    for (std::size_t n = 0; n < N; ++n) {
        const double* xn = X.ptr() + n * Ci * HW;
        const double* cp = xn;
        if (k != 1) {
            detail::im2col(xn, Ci, H, W, k, col.data());
            cp = col.data();
        }
        MapMat Y(out.ptr() + n * Co * HW, Co, HW);
        Y.noalias() = Wm * CMapMat(cp, CK, HW);
        Y.colwise() += bias;
    }
    return make_op(std::move(out), {x, w, b}, [N, Ci, H, W, Co, k, HW, CK](Node& self) {
        const auto& X = self.pval(0);
        CMapMat Wm(self.pval(1).ptr(), Co, CK);
        auto* gx = self.pgrad(0);
        auto* gw = self.pgrad(1);
        auto* gb = self.pgrad(2);
        std::vector<double> col(k == 1 ? 0 : CK * HW), dcol(k == 1 ? 0 : CK * HW);
        for (std::size_t n = 0; n < N; ++n) {
            CMapMat G(self.grad.ptr() + n * Co * HW, Co, HW);
            const double* xn = X.ptr() + n * Ci * HW;
            if (gw) {
                const double* cp = xn;
                if (k != 1) {
                    detail::im2col(xn, Ci, H, W, k, col.data());
                    cp = col.data();
                }
                MapMat(gw->ptr(), Co, CK).noalias() += G * CMapMat(cp, CK, HW).transpose();
            }
            // Plain loop: Eigen's vectorized row sums peel by address, which
            // would make the result depend on heap placement.
            if (gb)
                for (std::size_t o = 0; o < Co; ++o) {
                    const double* g = self.grad.ptr() + (n * Co + o) * HW;
                    double acc = 0;
                    for (std::size_t i = 0; i < HW; ++i) acc += g[i];
                    (*gb)[o] += acc;
                }
            if (gx) {
                double* gxn = gx->ptr() + n * Ci * HW;
                if (k == 1) {
                    MapMat(gxn, Ci, HW).noalias() += Wm.transpose() * G;
                } else {
                    MapMat(dcol.data(), CK, HW).noalias() = Wm.transpose() * G;
                    detail::col2im(dcol.data(), Ci, H, W, k, gxn);
                }
            }
        }
    });
}

// ------------------------------------------------------------------ normalization and modulation

inline std::size_t group_count(std::size_t channels, std::size_t preferred = 8) {
    std::size_t g = std::min(preferred, channels);
    while (channels % g) --g;
    return g;
}

/// Group norm over [N,C,H,W] with per-channel affine gamma, beta [C].
inline Var group_norm(const Var& x, std::size_t groups, const Var& gamma, const Var& beta, double eps = 1e-5) {
    const auto& X = x.value();
    require_rank(X, 4, "group_norm");
    const std::size_t N = X.dim(0), C = X.dim(1), HW = X.dim(2) * X.dim(3);
    if (groups == 0 || C % groups) throw ShapeError("group_norm: groups must divide channels");
    require_shape(gamma.value(), {C}, "group_norm gamma");
    require_shape(beta.value(), {C}, "group_norm beta");
    const std::size_t cpg = C / groups, len = cpg * HW;
    Tensor out = Tensor::zeros_like(X), xhat = Tensor::zeros_like(X);
    std::vector<double> rstd(N * groups);
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t g = 0; g < groups; ++g) {
            const std::size_t off = (n * C + g * cpg) * HW;
            double mu = 0, var = 0;
            for (std::size_t i = 0; i < len; ++i) mu += X[off + i];
            mu /= static_cast<double>(len);
            for (std::size_t i = 0; i < len; ++i) var += (X[off + i] - mu) * (X[off + i] - mu);
            var /= static_cast<double>(len);
            const double r = 1.0 / std::sqrt(var + eps);
            rstd[n * groups + g] = r;
            for (std::size_t c = 0; c < cpg; ++c) {
                const std::size_t ch = g * cpg + c;
                const double ga = gamma.value()[ch], be = beta.value()[ch];
                for (std::size_t i = 0; i < HW; ++i) {
                    const std::size_t idx = off + c * HW + i;
                    xhat[idx] = (X[idx] - mu) * r;
                    out[idx] = xhat[idx] * ga + be;
                }
            }
        }
    return make_op(std::move(out), {x, gamma, beta},
                   [xhat = std::move(xhat), rstd = std::move(rstd), N, C, HW, groups, cpg, len](Node& self) {
                       const auto& gam = self.pval(1);
                       auto* gx = self.pgrad(0);
                       auto* gg = self.pgrad(1);
                       auto* gb = self.pgrad(2);
                       const auto& go = self.grad;
                       for (std::size_t n = 0; n < N; ++n)
                           for (std::size_t g = 0; g < groups; ++g) {
                               const std::size_t off = (n * C + g * cpg) * HW;
                               double s1 = 0, s2 = 0;
                               for (std::size_t c = 0; c < cpg; ++c) {
                                   const std::size_t ch = g * cpg + c;
                                   double sg = 0, sgx = 0;
                                   for (std::size_t i = 0; i < HW; ++i) {
                                       const std::size_t idx = off + c * HW + i;
                                       sg += go[idx];
                                       sgx += go[idx] * xhat[idx];
                                   }
                                   if (gg) (*gg)[ch] += sgx;
                                   if (gb) (*gb)[ch] += sg;
                                   s1 += sg * gam[ch];
                                   s2 += sgx * gam[ch];
                               }
                               if (!gx) continue;
                               s1 /= static_cast<double>(len);
                               s2 /= static_cast<double>(len);
                               const double r = rstd[n * groups + g];
                               for (std::size_t c = 0; c < cpg; ++c) {
                                   const double ga = gam[g * cpg + c];
                                   for (std::size_t i = 0; i < HW; ++i) {
                                       const std::size_t idx = off + c * HW + i;
                                       (*gx)[idx] += r * (go[idx] * ga - s1 - xhat[idx] * s2);
                                   }
                               }
                           }
                   });
}

/// x * (1 + gamma) + beta with gb = [gamma | beta] of shape [N,2C] (per channel)
/// or [N,2C,H,W] (per pixel).
inline Var film(const Var& x, const Var& gb) {
    const auto& X = x.value();
    const auto& GB = gb.value();
    require_rank(X, 4, "film");
    const std::size_t N = X.dim(0), C = X.dim(1), HW = X.dim(2) * X.dim(3);
    const bool spatial = GB.rank() == 4;
    if (spatial)
        require_shape(GB, {N, 2 * C, X.dim(2), X.dim(3)}, "film modulation");
    else
        require_shape(GB, {N, 2 * C}, "film modulation");
    // Index of gamma for (n, c, i); beta sits C channels later.
    auto gi = [=](std::size_t n, std::size_t c, std::size_t i) {
        return spatial ? (n * 2 * C + c) * HW + i : n * 2 * C + c;
    };
    const std::size_t boff = spatial ? C * HW : C;
    Tensor out = Tensor::zeros_like(X);
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t i = 0; i < HW; ++i) {
                const std::size_t idx = (n * C + c) * HW + i, g = gi(n, c, i);
                out[idx] = X[idx] * (1.0 + GB[g]) + GB[g + boff];
            }
    return make_op(std::move(out), {x, gb}, [=](Node& self) {
        const auto& X = self.pval(0);
        const auto& GB = self.pval(1);
        auto* gx = self.pgrad(0);
        auto* ggb = self.pgrad(1);
        for (std::size_t n = 0; n < N; ++n)
            for (std::size_t c = 0; c < C; ++c)
                for (std::size_t i = 0; i < HW; ++i) {
                    const std::size_t idx = (n * C + c) * HW + i, g = gi(n, c, i);
                    const double go = self.grad[idx];
                    if (gx) (*gx)[idx] += go * (1.0 + GB[g]);
                    if (ggb) {
                        (*ggb)[g] += go * X[idx];
                        (*ggb)[g + boff] += go;
                    }
                }
    });
}

// ------------------------------------------------------------------ resampling and layout

/// 2x2 area average; H and W must be even.
inline Var avg_pool2(const Var& x) {
    const auto& X = x.value();
    require_rank(X, 4, "avg_pool2");
    const std::size_t N = X.dim(0), C = X.dim(1), H = X.dim(2), W = X.dim(3);
    if (H % 2 || W % 2) throw ShapeError("avg_pool2: odd spatial size " + shape_str(X.shape()));
    const std::size_t h = H / 2, w = W / 2;
    Tensor out({N, C, h, w});
    for (std::size_t p = 0; p < N * C; ++p)
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t xx = 0; xx < w; ++xx) {
                const double* s = X.ptr() + (p * H + 2 * y) * W + 2 * xx;
                out[(p * h + y) * w + xx] = 0.25 * (s[0] + s[1] + s[W] + s[W + 1]);
            }
    return make_op(std::move(out), {x}, [N, C, H, W, h, w](Node& self) {
        auto* g = self.pgrad(0);
        if (!g) return;
        for (std::size_t p = 0; p < N * C; ++p)
            for (std::size_t y = 0; y < h; ++y)
                for (std::size_t xx = 0; xx < w; ++xx) {
                    const double v = 0.25 * self.grad[(p * h + y) * w + xx];
                    double* d = g->ptr() + (p * H + 2 * y) * W + 2 * xx;
                    d[0] += v;
                    d[1] += v;
                    d[W] += v;
                    d[W + 1] += v;
                }
    });
}

/// Nearest-neighbor 2x upsampling.
inline Var upsample2(const Var& x) {
    const auto& X = x.value();
    require_rank(X, 4, "upsample2");
    const std::size_t N = X.dim(0), C = X.dim(1), h = X.dim(2), w = X.dim(3), H = 2 * h, W = 2 * w;
    Tensor out({N, C, H, W});
    for (std::size_t p = 0; p < N * C; ++p)
        for (std::size_t y = 0; y < H; ++y)
            for (std::size_t xx = 0; xx < W; ++xx) out[(p * H + y) * W + xx] = X[(p * h + y / 2) * w + xx / 2];
    return make_op(std::move(out), {x}, [N, C, H, W, h, w](Node& self) {
        auto* g = self.pgrad(0);
        if (!g) return;
        for (std::size_t p = 0; p < N * C; ++p)
            for (std::size_t y = 0; y < H; ++y)
                for (std::size_t xx = 0; xx < W; ++xx) (*g)[(p * h + y / 2) * w + xx / 2] += self.grad[(p * H + y) * W + xx];
    });
}

/// Channel concatenation of [N,Ca,H,W] and [N,Cb,H,W].
inline Var concat_channels(const Var& a, const Var& b) {
    const auto& A = a.value();
    const auto& B = b.value();
    require_rank(A, 4, "concat_channels");
    if (B.rank() != 4 || A.dim(0) != B.dim(0) || A.dim(2) != B.dim(2) || A.dim(3) != B.dim(3))
        throw ShapeError("concat_channels: " + shape_str(A.shape()) + " vs " + shape_str(B.shape()));
    const std::size_t N = A.dim(0), la = A.size() / N, lb = B.size() / N;
    Tensor out({N, A.dim(1) + B.dim(1), A.dim(2), A.dim(3)});
    for (std::size_t n = 0; n < N; ++n) {
        std::copy_n(A.ptr() + n * la, la, out.ptr() + n * (la + lb));
        std::copy_n(B.ptr() + n * lb, lb, out.ptr() + n * (la + lb) + la);
    }
    return make_op(std::move(out), {a, b}, [N, la, lb](Node& self) {
        auto* ga = self.pgrad(0);
        auto* gb = self.pgrad(1);
        for (std::size_t n = 0; n < N; ++n) {
            const double* s = self.grad.ptr() + n * (la + lb);
            if (ga)
                for (std::size_t i = 0; i < la; ++i) (*ga)[n * la + i] += s[i];
            if (gb)
                for (std::size_t i = 0; i < lb; ++i) (*gb)[n * lb + i] += s[la + i];
        }
    });
}

/// [N,C,H,W] -> [N,H*W,C] (pixels become query rows).
inline Var to_tokens(const Var& x) {
    const auto& X = x.value();
    require_rank(X, 4, "to_tokens");
    const std::size_t N = X.dim(0), C = X.dim(1), HW = X.dim(2) * X.dim(3);
    Tensor out({N, HW, C});
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t i = 0; i < HW; ++i) out[(n * HW + i) * C + c] = X[(n * C + c) * HW + i];
    return make_op(std::move(out), {x}, [N, C, HW](Node& self) {
        auto* g = self.pgrad(0);
        if (!g) return;
        for (std::size_t n = 0; n < N; ++n)
            for (std::size_t c = 0; c < C; ++c)
                for (std::size_t i = 0; i < HW; ++i) (*g)[(n * C + c) * HW + i] += self.grad[(n * HW + i) * C + c];
    });
}

/// [N,H*W,C] -> [N,C,H,W].
inline Var from_tokens(const Var& t, std::size_t H, std::size_t W) {
    const auto& T = t.value();
    require_rank(T, 3, "from_tokens");
    const std::size_t N = T.dim(0), HW = T.dim(1), C = T.dim(2);
    if (HW != H * W) throw ShapeError("from_tokens: token count does not match H*W");
    Tensor out({N, C, H, W});
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t i = 0; i < HW; ++i) out[(n * C + c) * HW + i] = T[(n * HW + i) * C + c];
    return make_op(std::move(out), {t}, [N, C, HW](Node& self) {
        auto* g = self.pgrad(0);
        if (!g) return;
        for (std::size_t n = 0; n < N; ++n)
            for (std::size_t c = 0; c < C; ++c)
                for (std::size_t i = 0; i < HW; ++i) (*g)[(n * HW + i) * C + c] += self.grad[(n * C + c) * HW + i];
    });
}

/// Stacks equally shaped Vars along a new leading axis.
inline Var stack(const std::vector<Var>& parts) {
    if (parts.empty()) throw ShapeError("stack of zero tensors");
    std::vector<Tensor> vals;
    vals.reserve(parts.size());
    for (const auto& p : parts) vals.push_back(p.value());
    const std::size_t len = vals.front().size();
    return make_op(gif::stack(vals), parts, [len](Node& self) {
        for (std::size_t k = 0; k < self.parents.size(); ++k)
            if (auto* g = self.pgrad(k))
                for (std::size_t i = 0; i < len; ++i) (*g)[i] += self.grad[k * len + i];
    });
}

/// Replaces item n of x [N, ...] by the broadcast of `fill` where mask[n].
/// `fill` holds either one value per channel of [N,C,H,W] input (shape [C])
/// or one row for every position of [N,L,D] input (shape [D]).
inline Var replace_masked(const Var& x, const Var& fill, const std::vector<bool>& mask) {
    const auto& X = x.value();
    const auto& F = fill.value();
    const std::size_t N = X.dim(0);
    if (mask.size() != N) throw ShapeError("replace_masked: mask length differs from batch");
    require_rank(F, 1, "replace_masked fill");
    const std::size_t per = X.size() / N, S = F.size();
    // For images the fill value is constant over each channel plane; for
    // token rows it repeats every D entries.
    std::size_t plane = 1;
    bool image = X.rank() == 4;
    if (image) {
        if (X.dim(1) != S) throw ShapeError("replace_masked: fill must have one value per channel");
        plane = X.dim(2) * X.dim(3);
    } else if (X.dim(X.rank() - 1) != S) {
        throw ShapeError("replace_masked: fill width differs from row width");
    }
    auto src = [=](std::size_t i) { return image ? i / plane : i % S; };
    Tensor out = X;
    for (std::size_t n = 0; n < N; ++n)
        if (mask[n])
            for (std::size_t i = 0; i < per; ++i) out[n * per + i] = F[src(i)];
    return make_op(std::move(out), {x, fill}, [=](Node& self) {
        auto* gx = self.pgrad(0);
        auto* gf = self.pgrad(1);
        for (std::size_t n = 0; n < N; ++n)
            for (std::size_t i = 0; i < per; ++i) {
                const double go = self.grad[n * per + i];
                if (mask[n]) {
                    if (gf) (*gf)[src(i)] += go;
                } else if (gx) {
                    (*gx)[n * per + i] += go;
                }
            }
    });
}

// ------------------------------------------------------------------ attention

/// Row-wise softmax of scores [L, K] in place.
inline void softmax_rows(double* s, std::size_t L, std::size_t K) {
    for (std::size_t r = 0; r < L; ++r) {
        double* row = s + r * K;
        double mx = row[0];
        for (std::size_t j = 1; j < K; ++j) mx = std::max(mx, row[j]);
        double z = 0;
        for (std::size_t j = 0; j < K; ++j) {
            row[j] = std::exp(row[j] - mx);
            z += row[j];
        }
        for (std::size_t j = 0; j < K; ++j) row[j] /= z;
    }
}

/// Attention weights softmax(q k^T / sqrt(dh)) for one head: q [L,dh], k [K,dh].
inline RowMat attention_weights(const RowMat& q, const RowMat& k) {
    RowMat s = (q * k.transpose()) / std::sqrt(static_cast<double>(q.cols()));
    softmax_rows(s.data(), static_cast<std::size_t>(s.rows()), static_cast<std::size_t>(s.cols()));
    return s;
}

/// Multi-head scaled dot-product attention. q [N,L,C], k and v [N,K,C];
/// head h uses columns [h*C/heads, (h+1)*C/heads).
inline Var multi_head_attention(const Var& q, const Var& k, const Var& v, std::size_t heads) {
    const auto& Q = q.value();
    const auto& Kt = k.value();
    const auto& V = v.value();
    require_rank(Q, 3, "attention queries");
    require_rank(Kt, 3, "attention keys");
    const std::size_t N = Q.dim(0), L = Q.dim(1), C = Q.dim(2), K = Kt.dim(1);
    if (heads == 0 || C % heads) throw ShapeError("attention: head count must divide the projection width");
    if (Kt.dim(0) != N || Kt.dim(2) != C) throw ShapeError("attention: key shape " + shape_str(Kt.shape()));
    V.require_same_shape(Kt, "attention values");
    const std::size_t dh = C / heads;
    using Stride = Eigen::OuterStride<>;
    using CSlice = Eigen::Map<const RowMat, 0, Stride>;
    using Slice = Eigen::Map<RowMat, 0, Stride>;
    const auto L_ = static_cast<Eigen::Index>(L), K_ = static_cast<Eigen::Index>(K), d_ = static_cast<Eigen::Index>(dh);
    const Stride st(static_cast<Eigen::Index>(C));
    Tensor out({N, L, C});
    std::vector<RowMat> probs(N * heads);
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t h = 0; h < heads; ++h) {
            CSlice qh(Q.ptr() + n * L * C + h * dh, L_, d_, st);
            CSlice kh(Kt.ptr() + n * K * C + h * dh, K_, d_, st);
            CSlice vh(V.ptr() + n * K * C + h * dh, K_, d_, st);
            probs[n * heads + h] = attention_weights(qh, kh);
            Slice(out.ptr() + n * L * C + h * dh, L_, d_, st).noalias() = probs[n * heads + h] * vh;
        }
    return make_op(std::move(out), {q, k, v}, [=, probs = std::move(probs)](Node& self) {
        const auto& Q = self.pval(0);
        const auto& Kt = self.pval(1);
        const auto& V = self.pval(2);
        auto* gq = self.pgrad(0);
        auto* gk = self.pgrad(1);
        auto* gv = self.pgrad(2);
        const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
        for (std::size_t n = 0; n < N; ++n)
            for (std::size_t h = 0; h < heads; ++h) {
                const RowMat& P = probs[n * heads + h];
                CSlice go(self.grad.ptr() + n * L * C + h * dh, L_, d_, st);
                CSlice qh(Q.ptr() + n * L * C + h * dh, L_, d_, st);
                CSlice kh(Kt.ptr() + n * K * C + h * dh, K_, d_, st);
                CSlice vh(V.ptr() + n * K * C + h * dh, K_, d_, st);
                if (gv) Slice(gv->ptr() + n * K * C + h * dh, K_, d_, st).noalias() += P.transpose() * go;
                if (!gq && !gk) continue;
                RowMat dP = go * vh.transpose();
                // softmax backward: dS = P .* (dP - rowsum(dP .* P))
                const Eigen::VectorXd rs = (dP.array() * P.array()).rowwise().sum();
                RowMat dS = (P.array() * (dP.colwise() - rs).array()).matrix() * inv;
                if (gq) Slice(gq->ptr() + n * L * C + h * dh, L_, d_, st).noalias() += dS * kh;
                if (gk) Slice(gk->ptr() + n * K * C + h * dh, K_, d_, st).noalias() += dS.transpose() * qh;
            }
    });
}

/// x + tanh(alpha) * delta with a scalar gate alpha [1].
inline Var gated_add(const Var& x, const Var& delta, const Var& alpha) {
    x.value().require_same_shape(delta.value(), "gated_add");
    require_shape(alpha.value(), {1}, "gated_add gate");
    const double g = std::tanh(alpha.value()[0]);
    Tensor out = x.value();
    // A closed gate passes x through untouched, signed zeros included.
    if (g != 0.0)
        for (std::size_t i = 0; i < out.size(); ++i) out[i] += g * delta.value()[i];
    return make_op(std::move(out), {x, delta, alpha}, [g](Node& self) {
        if (auto* gx = self.pgrad(0)) *gx += self.grad;
        if (auto* gd = self.pgrad(1))
            for (std::size_t i = 0; i < gd->size(); ++i) (*gd)[i] += g * self.grad[i];
        if (auto* ga = self.pgrad(2)) {
            double s = 0;
            const auto& d = self.pval(1);
            for (std::size_t i = 0; i < d.size(); ++i) s += self.grad[i] * d[i];
            (*ga)[0] += (1.0 - g * g) * s;
        }
    });
}

// ------------------------------------------------------------------ graph ops

/// Constant sparse matrix applied on the left: rows[i] = {(j, a_ij)}.
struct SparseRows {
    std::size_t n = 0;
    std::vector<std::vector<std::pair<std::size_t, double>>> rows;
};

/// A x for x [n, F]. A must be symmetric (the backward pass uses A^T = A).
inline Var sparse_left_multiply(const SparseRows& A, const Var& x) {
    const auto& X = x.value();
    require_rank(X, 2, "sparse_left_multiply");
    if (X.dim(0) != A.n) throw ShapeError("sparse_left_multiply: row count mismatch");
    const std::size_t F = X.dim(1);
    Tensor out({A.n, F});
    for (std::size_t i = 0; i < A.n; ++i)
        for (const auto& [j, a] : A.rows[i])
            for (std::size_t f = 0; f < F; ++f) out[i * F + f] += a * X[j * F + f];
    return make_op(std::move(out), {x}, [A, F](Node& self) {
        auto* g = self.pgrad(0);
        if (!g) return;
        for (std::size_t i = 0; i < A.n; ++i)
            for (const auto& [j, a] : A.rows[i])
                for (std::size_t f = 0; f < F; ++f) (*g)[j * F + f] += a * self.grad[i * F + f];
    });
}

/// Row k of the output is the mean of the rows of x [n, D] listed in sets[k].
inline Var index_mean(const Var& x, const std::vector<std::vector<std::size_t>>& sets) {
    const auto& X = x.value();
    require_rank(X, 2, "index_mean");
    const std::size_t D = X.dim(1);
    Tensor out({sets.size(), D});
    for (std::size_t k = 0; k < sets.size(); ++k) {
        if (sets[k].empty()) throw ShapeError("index_mean: empty index set");
        const double w = 1.0 / static_cast<double>(sets[k].size());
        for (std::size_t j : sets[k]) {
            if (j >= X.dim(0)) throw ShapeError("index_mean: index out of range");
            for (std::size_t d = 0; d < D; ++d) out[k * D + d] += w * X[j * D + d];
        }
    }
    return make_op(std::move(out), {x}, [sets, D](Node& self) {
        auto* g = self.pgrad(0);
        if (!g) return;
        for (std::size_t k = 0; k < sets.size(); ++k) {
            const double w = 1.0 / static_cast<double>(sets[k].size());
            for (std::size_t j : sets[k])
                for (std::size_t d = 0; d < D; ++d) (*g)[j * D + d] += w * self.grad[k * D + d];
        }
    });
}

/// Repeats a row vector r [D] into [K, D].
inline Var repeat_rows(const Var& r, std::size_t K) {
    const auto& R = r.value();
    require_rank(R, 1, "repeat_rows");
    const std::size_t D = R.size();
    Tensor out({K, D});
    for (std::size_t k = 0; k < K; ++k) std::copy_n(R.ptr(), D, out.ptr() + k * D);
    return make_op(std::move(out), {r}, [K, D](Node& self) {
        auto* g = self.pgrad(0);
        if (!g) return;
        for (std::size_t k = 0; k < K; ++k)
            for (std::size_t d = 0; d < D; ++d) (*g)[d] += self.grad[k * D + d];
    });
}

}  // namespace gif::ag

#endif  // GIF_AUTOGRAD_HPP
