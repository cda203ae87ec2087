#ifndef GIF_METRICS_HPP
#define GIF_METRICS_HPP

// Map-quality metrics on [H,W] maps with values in [0,1].

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gif/error.hpp"
#include "gif/tensor.hpp"

namespace gif::metrics {

inline void require_pair(const Tensor& pred, const Tensor& truth, const char* what) {
    if (pred.shape() != truth.shape())
        throw ShapeError(std::string(what) + ": shapes " + shape_str(pred.shape()) + " and " + shape_str(truth.shape()) + " differ");
    if (pred.empty()) throw ShapeError(std::string(what) + ": empty maps");
}

inline double mae(const Tensor& pred, const Tensor& truth) {
    require_pair(pred, truth, "mae");
    double s = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) s += std::abs(pred[i] - truth[i]);
    return s / static_cast<double>(pred.size());
}

inline double mse(const Tensor& pred, const Tensor& truth) {
    require_pair(pred, truth, "mse");
    double s = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) s += (pred[i] - truth[i]) * (pred[i] - truth[i]);
    return s / static_cast<double>(pred.size());
}

inline double rmse(const Tensor& pred, const Tensor& truth) { return std::sqrt(mse(pred, truth)); }

/// MAE divided by the largest ground-truth drop.
inline double nmae(const Tensor& pred, const Tensor& truth) {
    require_pair(pred, truth, "nmae");
    const double peak = truth.max();
    if (!(peak > 0.0)) throw DataError("nmae: ground truth has no positive drop");
    return mae(pred, truth) / peak;
}

/// Identical maps give +infinity.
inline double psnr(const Tensor& pred, const Tensor& truth) {
    const double m = mse(pred, truth);
    if (m == 0.0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(1.0 / m);
}

struct SsimOptions {
    std::size_t window = 11;
    double sigma = 1.5;
    double c1 = 0.01 * 0.01;
    double c2 = 0.03 * 0.03;
};

/// Normalized 1-D Gaussian taps.
inline std::vector<double> gaussian_taps(std::size_t n, double sigma) {
    std::vector<double> g(n);
    const double c = (static_cast<double>(n) - 1.0) / 2.0;
    for (std::size_t i = 0; i < n; ++i) g[i] = std::exp(-(i - c) * (i - c) / (2.0 * sigma * sigma));
    const double s = std::accumulate(g.begin(), g.end(), 0.0);
    for (auto& v : g) v /= s;
    return g;
}

/// Single-scale SSIM averaged over windows that fit entirely inside the map.
inline double ssim(const Tensor& pred, const Tensor& truth, const SsimOptions& opt = {}) {
    require_pair(pred, truth, "ssim");
    if (pred.rank() != 2) throw ShapeError("ssim needs [H,W] maps");
    const std::size_t H = pred.dim(0), W = pred.dim(1), n = opt.window;
    if (H < n || W < n) throw ShapeError("ssim: map " + shape_str(pred.shape()) + " smaller than the window");
    const auto g = gaussian_taps(n, opt.sigma);
    const std::size_t oh = H - n + 1, ow = W - n + 1;

    // Row pass then column pass on the five moment images.
    const std::size_t K = 5;
    std::vector<double> src(K * H * W);
    for (std::size_t i = 0; i < H * W; ++i) {
        const double a = pred[i], b = truth[i];
        src[i] = a;
        src[H * W + i] = b;
        src[2 * H * W + i] = a * a;
        src[3 * H * W + i] = b * b;
        src[4 * H * W + i] = a * b;
    }
    std::vector<double> rows(K * H * ow, 0.0), out(K * oh * ow, 0.0);
    for (std::size_t k = 0; k < K; ++k)
        for (std::size_t y = 0; y < H; ++y)
            for (std::size_t x = 0; x < ow; ++x) {
                double s = 0.0;
                for (std::size_t j = 0; j < n; ++j) s += g[j] * src[(k * H + y) * W + x + j];
                rows[(k * H + y) * ow + x] = s;
            }
    for (std::size_t k = 0; k < K; ++k)
        for (std::size_t y = 0; y < oh; ++y)
            for (std::size_t x = 0; x < ow; ++x) {
                double s = 0.0;
                for (std::size_t i = 0; i < n; ++i) s += g[i] * rows[(k * H + y + i) * ow + x];
                out[(k * oh + y) * ow + x] = s;
            }
    const std::size_t P = oh * ow;
    double total = 0.0;
    for (std::size_t i = 0; i < P; ++i) {
        const double mx = out[i], my = out[P + i];
        const double vx = out[2 * P + i] - mx * mx, vy = out[3 * P + i] - my * my, cxy = out[4 * P + i] - mx * my;
        total += ((2 * mx * my + opt.c1) * (2 * cxy + opt.c2)) / ((mx * mx + my * my + opt.c1) * (vx + vy + opt.c2));
    }
    return total / static_cast<double>(P);
}

struct Correlation {
    double value = 0.0;
    bool constant_input = false;  // undefined correlation, value left at 0
};

inline Correlation pearson_of(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size() || a.empty()) throw ShapeError("correlation needs two equal, non-empty sequences");
    const double n = static_cast<double>(a.size());
    const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
    const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
    double sab = 0, saa = 0, sbb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        sab += (a[i] - ma) * (b[i] - mb);
        saa += (a[i] - ma) * (a[i] - ma);
        sbb += (b[i] - mb) * (b[i] - mb);
    }
    auto constant = [](const std::vector<double>& v) { return std::all_of(v.begin(), v.end(), [&](double x) { return x == v[0]; }); };
    if (constant(a) || constant(b) || saa == 0.0 || sbb == 0.0) return {0.0, true};
    return {std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0), false};
}

/// 1-based ranks; ties share the mean of their positions.
inline std::vector<double> average_ranks(const std::vector<double>& v) {
    std::vector<std::size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < idx.size();) {
        std::size_t j = i;
        while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
        const double rank = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
        for (std::size_t k = i; k <= j; ++k) r[idx[k]] = rank;
        i = j + 1;
    }
    return r;
}

inline Correlation spearman_of(const std::vector<double>& a, const std::vector<double>& b) {
    return pearson_of(average_ranks(a), average_ranks(b));
}

inline Correlation pearson(const Tensor& pred, const Tensor& truth) {
    require_pair(pred, truth, "pearson");
    return pearson_of(pred.vec(), truth.vec());
}

inline Correlation spearman(const Tensor& pred, const Tensor& truth) {
    require_pair(pred, truth, "spearman");
    return spearman_of(pred.vec(), truth.vec());
}

// ------------------------------------------------------------------ report

struct SampleMetrics {
    std::string id;
    double mae = 0, rmse = 0, nmae = 0, psnr_db = 0, ssim = 0, pearson = 0, spearman = 0;
    bool pearson_undefined = false, spearman_undefined = false;
};

struct EvalSample {
    std::string id;
    Tensor pred;   // [H,W] in [0,1]
    Tensor truth;  // [H,W] in [0,1]
};

struct EvalReport {
    std::vector<SampleMetrics> samples;
    SampleMetrics mean;  // unweighted means; psnr is +inf if any sample is +inf
    nlohmann::json config;

    std::size_t count() const noexcept { return samples.size(); }
};

inline SampleMetrics evaluate_one(const EvalSample& s) {
    if (s.pred.rank() != 2) throw ShapeError("evaluate: sample " + s.id + " is not an [H,W] map");
    SampleMetrics m;
    m.id = s.id;
    m.mae = mae(s.pred, s.truth);
    m.rmse = rmse(s.pred, s.truth);
    m.nmae = nmae(s.pred, s.truth);
    m.psnr_db = psnr(s.pred, s.truth);
    m.ssim = ssim(s.pred, s.truth);
    const auto p = pearson(s.pred, s.truth), r = spearman(s.pred, s.truth);
    m.pearson = p.value;
    m.pearson_undefined = p.constant_input;
    m.spearman = r.value;
    m.spearman_undefined = r.constant_input;
    return m;
}

inline EvalReport evaluate_all(const std::vector<EvalSample>& samples, nlohmann::json config = nlohmann::json::object()) {
    if (samples.empty()) throw DataError("evaluate_all: no samples");
    EvalReport rep;
    rep.config = std::move(config);
    for (const auto& s : samples) rep.samples.push_back(evaluate_one(s));
    const double n = static_cast<double>(rep.samples.size());
    auto& a = rep.mean;
    a.id = "mean";
    for (const auto& m : rep.samples) {
        a.mae += m.mae / n;
        a.rmse += m.rmse / n;
        a.nmae += m.nmae / n;
        a.psnr_db += m.psnr_db / n;
        a.ssim += m.ssim / n;
        a.pearson += m.pearson / n;
        a.spearman += m.spearman / n;
        a.pearson_undefined = a.pearson_undefined || m.pearson_undefined;
        a.spearman_undefined = a.spearman_undefined || m.spearman_undefined;
    }
    return rep;
}

// JSON has no infinity; the sentinel is the string "inf".
inline nlohmann::json number_or_inf(double v) {
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    return v;
}

inline nlohmann::json to_json(const SampleMetrics& m) {
    return {{"id", m.id},
            {"mae", m.mae},
            {"rmse", m.rmse},
            {"nmae", m.nmae},
            {"psnr_db", number_or_inf(m.psnr_db)},
            {"ssim", m.ssim},
            {"pearson", m.pearson},
            {"spearman", m.spearman},
            {"pearson_undefined", m.pearson_undefined},
            {"spearman_undefined", m.spearman_undefined}};
}

inline nlohmann::json to_json(const EvalReport& r) {
    nlohmann::json j;
    j["count"] = r.count();
    j["mean"] = to_json(r.mean);
    j["samples"] = nlohmann::json::array();
    for (const auto& m : r.samples) j["samples"].push_back(to_json(m));
    j["config"] = r.config;
    return j;
}

inline std::string csv_header() { return "id,mae,rmse,nmae,psnr_db,ssim,pearson,spearman"; }

inline std::string csv_row(const SampleMetrics& m) {
    auto num = [](double v) {
        if (std::isinf(v)) return std::string(v > 0 ? "inf" : "-inf");
        char buf[32];
        std::snprintf(buf, sizeof buf, "%.17g", v);
        return std::string(buf);
    };
    return m.id + "," + num(m.mae) + "," + num(m.rmse) + "," + num(m.nmae) + "," + num(m.psnr_db) + "," + num(m.ssim) +
           "," + num(m.pearson) + "," + num(m.spearman);
}

inline void write_report(const std::filesystem::path& json_path, const std::filesystem::path& csv_path, const EvalReport& r) {
    std::ofstream js(json_path, std::ios::trunc);
    if (!js) throw DataError("cannot open " + json_path.string() + " for writing");
    js << to_json(r).dump(2) << '\n';
    std::ofstream cs(csv_path, std::ios::trunc);
    if (!cs) throw DataError("cannot open " + csv_path.string() + " for writing");
    cs << csv_header() << '\n';
    for (const auto& m : r.samples) cs << csv_row(m) << '\n';
}

}  // namespace gif::metrics

#endif  // GIF_METRICS_HPP
