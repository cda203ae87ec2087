#ifndef GIF_DIFFUSION_HPP
#define GIF_DIFFUSION_HPP

// DDPM over normalized IR maps: noise schedules, the training step
// (noise-prediction MSE plus an L1 term on the reconstructed map at low
// noise levels), AdamW with an EMA shadow, and ancestral sampling.

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <string>
#include <vector>

#include "gif/autograd.hpp"
#include "gif/condnet.hpp"
#include "gif/error.hpp"
#include "gif/rng.hpp"
#include "gif/tensor.hpp"

namespace gif::diff {

using ag::Var;

// ------------------------------------------------------------------ labels

/// Y in [0,1] -> 2Y - 1.
inline Tensor normalize_label(const Tensor& y) {
    Tensor out = y;
    for (auto& v : out.vec()) {
        if (!(v >= 0.0 && v <= 1.0)) throw DataError("label value outside [0,1]: " + std::to_string(v));
        v = 2.0 * v - 1.0;
    }
    return out;
}

/// (Y~ + 1) / 2; values must lie in [-1,1].
inline Tensor denormalize_label(const Tensor& yn) {
    Tensor out = yn;
    for (auto& v : out.vec()) {
        if (!(v >= -1.0 && v <= 1.0)) throw DataError("normalized label outside [-1,1]: " + std::to_string(v));
        v = (v + 1.0) / 2.0;
    }
    return out;
}

// ------------------------------------------------------------------ schedules

enum class ScheduleKind { cosine, linear };

inline std::string to_string(ScheduleKind k) { return k == ScheduleKind::cosine ? "cosine" : "linear"; }
inline ScheduleKind schedule_kind_from(const std::string& s) {
    if (s == "cosine") return ScheduleKind::cosine;
    if (s == "linear") return ScheduleKind::linear;
    throw ConfigError("unknown schedule '" + s + "' (expected cosine or linear)");
}

/// Tables indexed by t in 0..T; entry 0 is the clean boundary (alpha_bar = 1).
struct NoiseSchedule {
    int T = 0;
    ScheduleKind kind = ScheduleKind::cosine;
    std::vector<double> beta, alpha, alpha_bar, posterior_var;

    /// Steps t < floor(0.15 T) also get the reconstruction term.
    int aux_cutoff(double fraction = 0.15) const { return static_cast<int>(std::floor(fraction * T)); }

    static NoiseSchedule from_betas(const std::vector<double>& betas, ScheduleKind kind) {
        NoiseSchedule s;
        s.T = static_cast<int>(betas.size());
        s.kind = kind;
        s.beta.assign(1, 0.0);
        s.alpha.assign(1, 1.0);
        s.alpha_bar.assign(1, 1.0);
        s.posterior_var.assign(1, 0.0);
        for (double b : betas) {
            if (!(b > 0 && b < 1)) throw ConfigError("schedule betas must lie in (0,1)");
            s.beta.push_back(b);
            s.alpha.push_back(1.0 - b);
            s.alpha_bar.push_back(s.alpha_bar.back() * (1.0 - b));
        }
        for (int t = 1; t <= s.T; ++t)
            s.posterior_var.push_back((1.0 - s.alpha_bar[t - 1]) / (1.0 - s.alpha_bar[t]) * s.beta[t]);
        return s;
    }
};

inline constexpr double kCosineOffset = 0.008;

/// cos^2(((t/T) + s) / (1 + s) * pi/2), the unnormalized cosine curve.
inline double cosine_curve(double t, int T) {
    const double c = std::cos((t / T + kCosineOffset) / (1.0 + kCosineOffset) * std::numbers::pi / 2.0);
    return c * c;
}

inline NoiseSchedule make_schedule(int T, ScheduleKind kind) {
    if (T < 2) throw ConfigError("schedule needs T >= 2, got " + std::to_string(T));
    std::vector<double> betas(static_cast<std::size_t>(T));
    for (int t = 1; t <= T; ++t) {
        double b;
        if (kind == ScheduleKind::cosine)
            b = std::min(1.0 - cosine_curve(t, T) / cosine_curve(t - 1, T), 0.999);
        else
            b = 1e-4 + (0.02 - 1e-4) * (t - 1) / (T - 1);
        betas[static_cast<std::size_t>(t - 1)] = b;
    }
    return NoiseSchedule::from_betas(betas, kind);
}

/// sqrt(abar) y + sqrt(1 - abar) eps.
inline Tensor forward_noise_ab(const Tensor& y, const Tensor& eps, double alpha_bar) {
    y.require_same_shape(eps, "forward_noise");
    const double a = std::sqrt(alpha_bar), b = std::sqrt(1.0 - alpha_bar);
    Tensor out = Tensor::zeros_like(y);
    for (std::size_t i = 0; i < y.size(); ++i) out[i] = a * y[i] + b * eps[i];
    return out;
}

inline Tensor forward_noise(const Tensor& y, int t, const Tensor& eps, const NoiseSchedule& s) {
    if (t < 0 || t > s.T) throw ConfigError("timestep " + std::to_string(t) + " outside [0," + std::to_string(s.T) + "]");
    return forward_noise_ab(y, eps, s.alpha_bar[static_cast<std::size_t>(t)]);
}

/// (x_t - sqrt(1 - abar) eps) / sqrt(abar), before clamping.
inline double predict_x0(double x_t, double eps, double alpha_bar) {
    return (x_t - std::sqrt(1.0 - alpha_bar) * eps) / std::sqrt(alpha_bar);
}

// ------------------------------------------------------------------ loss

struct LossTerms {
    double total = 0, mse = 0, aux = 0;
};

/// MSE(eps_hat, eps) + w * mean_n 1[t_n < cutoff] mean|clamp(x0_hat) - y0|.
/// All image tensors are [N,1,H,W].
inline Var diffusion_loss(const Var& eps_hat, const Tensor& eps, const Tensor& x_t, const Tensor& y0,
                          const std::vector<int>& t, const NoiseSchedule& s, double aux_weight, double aux_fraction,
                          LossTerms* terms = nullptr) {
    const auto& E = eps_hat.value();
    E.require_same_shape(eps, "diffusion_loss eps");
    E.require_same_shape(x_t, "diffusion_loss x_t");
    E.require_same_shape(y0, "diffusion_loss y0");
    const std::size_t N = E.dim(0), P = E.size() / N;
    if (t.size() != N) throw ShapeError("diffusion_loss: one timestep per item required");
    const int cutoff = s.aux_cutoff(aux_fraction);
    // d loss / d eps_hat, filled alongside the forward value.
    Tensor dE = Tensor::zeros_like(E);
    LossTerms lt;
    const double total_n = static_cast<double>(E.size());
    for (std::size_t i = 0; i < E.size(); ++i) {
        const double d = E[i] - eps[i];
        lt.mse += d * d;
        dE[i] = 2.0 * d / total_n;
    }
    lt.mse /= total_n;
    for (std::size_t n = 0; n < N; ++n) {
        if (t[n] >= cutoff) continue;
        const double ab = s.alpha_bar[static_cast<std::size_t>(t[n])];
        const double dx0 = -std::sqrt(1.0 - ab) / std::sqrt(ab);
        double acc = 0;
        for (std::size_t i = n * P; i < (n + 1) * P; ++i) {
            const double x0 = predict_x0(x_t[i], E[i], ab);
            const double c = std::clamp(x0, -1.0, 1.0);
            const double r = c - y0[i];
            acc += std::abs(r);
            if (x0 > -1.0 && x0 < 1.0 && r != 0.0)
                dE[i] += aux_weight * (r > 0 ? 1.0 : -1.0) * dx0 / static_cast<double>(P * N);
        }
        lt.aux += acc / static_cast<double>(P);
    }
    lt.aux /= static_cast<double>(N);
    lt.total = lt.mse + aux_weight * lt.aux;
    if (terms) *terms = lt;
    return ag::make_op(Tensor({1}, lt.total), {eps_hat}, [dE = std::move(dE)](ag::Node& self) {
        if (auto* g = self.pgrad(0))
            for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[0] * dE[i];
    });
}

// ------------------------------------------------------------------ optimization

enum class LrSchedule { constant, cosine };

inline std::string to_string(LrSchedule k) { return k == LrSchedule::constant ? "constant" : "cosine"; }
inline LrSchedule lr_schedule_from(const std::string& s) {
    if (s == "constant") return LrSchedule::constant;
    if (s == "cosine") return LrSchedule::cosine;
    throw ConfigError("unknown lr schedule '" + s + "' (expected constant or cosine)");
}

struct TrainConfig {
    double lr = 2e-4;
    double adam_beta1 = 0.9, adam_beta2 = 0.999, adam_eps = 1e-8;
    double weight_decay = 0.0;
    double ema_decay = 0.999;
    double aux_weight = 0.1;
    double aux_fraction = 0.15;
    double cfg_drop = 0.1;
    double grad_clip = 1.0;  // global-norm clip, 0 disables
    std::size_t batch = 8;
    std::size_t steps = 1000;
    LrSchedule lr_schedule = LrSchedule::constant;

    void validate() const {
        if (!(lr > 0)) throw ConfigError("learning rate must be positive");
        if (!(adam_beta1 >= 0 && adam_beta1 < 1 && adam_beta2 >= 0 && adam_beta2 < 1)) throw ConfigError("Adam betas must lie in [0,1)");
        if (!(adam_eps > 0) || !(weight_decay >= 0)) throw ConfigError("Adam eps must be positive, weight decay nonnegative");
        if (!(ema_decay >= 0 && ema_decay <= 1)) throw ConfigError("EMA decay must lie in [0,1]");
        if (!(cfg_drop >= 0 && cfg_drop <= 1)) throw ConfigError("condition dropout must lie in [0,1]");
        if (!(aux_weight >= 0) || !(aux_fraction >= 0 && aux_fraction <= 1)) throw ConfigError("aux weight/fraction out of range");
        if (!(grad_clip >= 0)) throw ConfigError("grad_clip must be nonnegative");
        if (batch == 0) throw ConfigError("batch size must be positive");
    }

    double lr_at(std::size_t step) const {
        if (lr_schedule == LrSchedule::constant || steps == 0) return lr;
        const double f = std::min(1.0, static_cast<double>(step) / static_cast<double>(steps));
        return lr * 0.5 * (1.0 + std::cos(std::numbers::pi * f));
    }
};

/// Adam with decoupled weight decay. Moments live in parameter order.
class AdamW {
public:
    AdamW() = default;
    explicit AdamW(const nn::ParamStore& ps) {
        for (const auto& p : ps.all()) {
            m_.push_back(Tensor::zeros_like(p.var.value()));
            v_.push_back(Tensor::zeros_like(p.var.value()));
        }
    }

    void update(nn::ParamStore& ps, const TrainConfig& c, double lr) {
        ++t_;
        const double bc1 = 1.0 - std::pow(c.adam_beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(c.adam_beta2, static_cast<double>(t_));
        auto& all = ps.all();
        for (std::size_t k = 0; k < all.size(); ++k) {
            auto& node = *all[k].var.node();
            if (node.grad.empty()) continue;
            auto& w = node.value;
            for (std::size_t i = 0; i < w.size(); ++i) {
                const double g = node.grad[i];
                m_[k][i] = c.adam_beta1 * m_[k][i] + (1.0 - c.adam_beta1) * g;
                v_[k][i] = c.adam_beta2 * v_[k][i] + (1.0 - c.adam_beta2) * g * g;
                const double mh = m_[k][i] / bc1, vh = v_[k][i] / bc2;
                w[i] -= lr * (mh / (std::sqrt(vh) + c.adam_eps) + c.weight_decay * w[i]);
            }
        }
    }

    std::uint64_t steps() const noexcept { return t_; }
    std::vector<Tensor>& first_moments() noexcept { return m_; }
    std::vector<Tensor>& second_moments() noexcept { return v_; }
    const std::vector<Tensor>& first_moments() const noexcept { return m_; }
    const std::vector<Tensor>& second_moments() const noexcept { return v_; }
    void set_steps(std::uint64_t t) noexcept { t_ = t; }

private:
    std::vector<Tensor> m_, v_;
    std::uint64_t t_ = 0;
};

/// Exponential moving average of the parameters.
class Ema {
public:
    Ema() = default;
    explicit Ema(const nn::ParamStore& ps) : shadow_(ps.values()) {}

    void update(const nn::ParamStore& ps, double decay) {
        const auto& all = ps.all();
        for (std::size_t k = 0; k < all.size(); ++k) {
            const auto& w = all[k].var.value();
            for (std::size_t i = 0; i < w.size(); ++i) shadow_[k][i] = decay * shadow_[k][i] + (1.0 - decay) * w[i];
        }
    }

    const std::vector<Tensor>& values() const noexcept { return shadow_; }
    std::vector<Tensor>& values() noexcept { return shadow_; }

private:
    std::vector<Tensor> shadow_;
};

inline double grad_norm(const nn::ParamStore& ps) {
    double s = 0;
    for (const auto& p : ps.all())
        for (double g : p.var.grad().vec()) s += g * g;
    return std::sqrt(s);
}

inline void scale_grads(nn::ParamStore& ps, double f) {
    for (auto& p : ps.all())
        for (double& g : p.var.node()->grad.vec()) g *= f;
}

// ------------------------------------------------------------------ training step

/// One training example: feature stack [Cf,H,W], label Y [H,W] in [0,1],
/// and the prepared graph (nullptr when the design has none).
struct TrainItem {
    Tensor features;
    Tensor label;
    const nn::GraphInput* graph = nullptr;
};

/// Batch positions for `step`: consecutive slices of per-epoch permutations.
inline std::vector<std::size_t> batch_indices(std::size_t n, std::size_t batch, std::uint64_t step, const Rng& order) {
    if (n == 0) throw DataError("empty training set");
    std::vector<std::size_t> out;
    std::uint64_t cached_epoch = UINT64_MAX;
    std::vector<std::size_t> perm(n);
    for (std::size_t j = 0; j < batch; ++j) {
        const std::uint64_t g = step * batch + j, epoch = g / n;
        if (epoch != cached_epoch) {
            std::iota(perm.begin(), perm.end(), 0);
            Rng r = order.split(epoch);
            for (std::size_t i = n; i > 1; --i) std::swap(perm[i - 1], perm[r.below(i)]);
            cached_epoch = epoch;
        }
        out.push_back(perm[g % n]);
    }
    return out;
}

struct StepStats {
    std::uint64_t step = 0;
    LossTerms loss;
    double lr = 0, grad_norm = 0;
};

/// Everything a run mutates, so a checkpoint of it resumes bit-exactly.
struct TrainerState {
    AdamW opt;
    Ema ema;
    std::uint64_t step = 0;
};

/// Tensors that the sampler and the trainer build from a list of items.
struct Batch {
    Tensor features;  // [N,Cf,H,W]
    Tensor labels;    // [N,1,H,W], normalized to [-1,1]
    std::vector<const nn::GraphInput*> graphs;
};

inline Batch make_batch(const std::vector<TrainItem>& items, const std::vector<std::size_t>& idx) {
    Batch b;
    std::vector<Tensor> f, y;
    for (std::size_t i : idx) {
        f.push_back(items.at(i).features);
        Tensor yn = normalize_label(items[i].label);
        yn.reshape({1, items[i].label.dim(0), items[i].label.dim(1)});
        y.push_back(std::move(yn));
        b.graphs.push_back(items[i].graph);
    }
    b.features = stack(f);
    b.labels = stack(y);
    return b;
}

/// One optimizer step. All randomness comes from `rng`, which callers derive
/// from the step index so that a resumed run draws the same values.
inline StepStats training_step(nn::Denoiser& model, TrainerState& st, const Batch& batch, const TrainConfig& cfg,
                               const NoiseSchedule& sched, Rng rng) {
    const std::size_t N = batch.labels.dim(0);
    Rng rt = rng.split("t"), re = rng.split("eps"), rd = rng.split("drop");
    std::vector<int> t(N);
    for (auto& v : t) v = 1 + static_cast<int>(rt.below(static_cast<std::uint64_t>(sched.T)));
    Tensor eps = Tensor::zeros_like(batch.labels);
    for (auto& v : eps.vec()) v = re.normal();
    std::vector<bool> drop(N);
    for (std::size_t n = 0; n < N; ++n) drop[n] = cfg.cfg_drop > 0 && rd.bernoulli(cfg.cfg_drop);

    Tensor x_t = Tensor::zeros_like(batch.labels);
    const std::size_t P = x_t.size() / N;
    for (std::size_t n = 0; n < N; ++n) {
        const double ab = sched.alpha_bar[static_cast<std::size_t>(t[n])];
        const double a = std::sqrt(ab), b = std::sqrt(1.0 - ab);
        for (std::size_t i = n * P; i < (n + 1) * P; ++i) x_t[i] = a * batch.labels[i] + b * eps[i];
    }

    model.params().zero_grad();
    StepStats out;
    out.step = st.step;
    {
        const Var eps_hat = model.forward(x_t, t, {batch.features, batch.graphs, drop});
        const Var loss = diffusion_loss(eps_hat, eps, x_t, batch.labels, t, sched, cfg.aux_weight, cfg.aux_fraction, &out.loss);
        if (!std::isfinite(out.loss.total)) {
            std::string ts;
            for (int v : t) ts += (ts.empty() ? "" : ",") + std::to_string(v);
            throw NumericError("non-finite loss at step " + std::to_string(st.step) + " (mse " + std::to_string(out.loss.mse) +
                               ", aux " + std::to_string(out.loss.aux) + ", t = [" + ts + "])");
        }
        ag::backward(loss);
    }
    out.grad_norm = grad_norm(model.params());
    if (!std::isfinite(out.grad_norm)) throw NumericError("non-finite gradient at step " + std::to_string(st.step));
    if (cfg.grad_clip > 0 && out.grad_norm > cfg.grad_clip) scale_grads(model.params(), cfg.grad_clip / out.grad_norm);
    out.lr = cfg.lr_at(st.step);
    st.opt.update(model.params(), cfg, out.lr);
    st.ema.update(model.params(), cfg.ema_decay);
    ++st.step;
    return out;
}

// ------------------------------------------------------------------ sampling

struct SamplerOptions {
    // Clamp the implied x0 to [-1,1] and step with the posterior mean
    // written in terms of x0. Off: the plain noise-prediction update.
    bool clip_denoised = false;
};

/// Ancestral DDPM sampling. `eps_fn(x_t, t)` predicts noise for a batch
/// [N,1,H,W] at the shared timestep t. Item n draws x_T and then one noise
/// map per step (T in total, the last one unused) from streams[n].
/// Returns Y in [0,1] of shape [N,1,H,W].
template <class EpsFn>
Tensor sample(EpsFn&& eps_fn, std::size_t H, std::size_t W, const NoiseSchedule& s, std::vector<Rng> streams,
              const SamplerOptions& opt = {}, Tensor* x_T_out = nullptr) {
    const std::size_t N = streams.size(), P = H * W;
    if (N == 0) throw ConfigError("sample: no items");
    Tensor x({N, 1, H, W});
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t i = 0; i < P; ++i) x[n * P + i] = streams[n].normal();
    if (x_T_out) *x_T_out = x;
    for (int t = s.T; t >= 1; --t) {
        const Tensor eps = eps_fn(x, t);
        x.require_same_shape(eps, "sample");
        const auto ti = static_cast<std::size_t>(t);
        const double ab = s.alpha_bar[ti], ab_prev = s.alpha_bar[ti - 1];
        const double c1 = 1.0 / std::sqrt(s.alpha[ti]);
        const double c2 = s.beta[ti] / std::sqrt(1.0 - ab);
        const double m0 = std::sqrt(ab_prev) * s.beta[ti] / (1.0 - ab);
        const double mt = std::sqrt(s.alpha[ti]) * (1.0 - ab_prev) / (1.0 - ab);
        const double sigma = std::sqrt(s.posterior_var[ti]);
        for (std::size_t n = 0; n < N; ++n)
            for (std::size_t i = 0; i < P; ++i) {
                const double z = streams[n].normal();
                const std::size_t k = n * P + i;
                const double mean = opt.clip_denoised
                                        ? m0 * std::clamp(predict_x0(x[k], eps[k], ab), -1.0, 1.0) + mt * x[k]
                                        : c1 * (x[k] - c2 * eps[k]);
                x[k] = mean + (t > 1 ? sigma * z : 0.0);
            }
        if (!x.all_finite()) throw NumericError("sampler diverged at t = " + std::to_string(t));
    }
    for (auto& v : x.vec()) v = std::clamp((v + 1.0) / 2.0, 0.0, 1.0);
    return x;
}

}  // namespace gif::diff

#endif  // GIF_DIFFUSION_HPP
