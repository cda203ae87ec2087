#ifndef GIF_TENSOR_HPP
#define GIF_TENSOR_HPP

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "gif/error.hpp"

namespace gif {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ']';
    return os.str();
}

/// Dense row-major array of doubles with shape metadata.
///
/// Every map in the pipeline (features, labels, activations, parameters) is a
/// Tensor. The element count always equals the product of the shape.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Shape shape, double fill = 0.0)
        : shape_(std::move(shape)), data_(shape_size(shape_), fill) {
        check_dims();
    }

    Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
        check_dims();
        if (shape_size(shape_) != data_.size())
            throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                             " does not match shape " + shape_str(shape_));
    }

    static Tensor zeros_like(const Tensor& t) { return Tensor(t.shape()); }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t dim(std::size_t i) const { return shape_.at(i); }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    std::span<double> data() noexcept { return data_; }
    std::span<const double> data() const noexcept { return data_; }
    std::vector<double>& vec() noexcept { return data_; }
    const std::vector<double>& vec() const noexcept { return data_; }
    double* ptr() noexcept { return data_.data(); }
    const double* ptr() const noexcept { return data_.data(); }

    double& operator[](std::size_t i) noexcept { return data_[i]; }
    double operator[](std::size_t i) const noexcept { return data_[i]; }

    // 2-D accessors, row-major.
    double& at(std::size_t r, std::size_t c) { return data_[r * shape_[rank() - 1] + c]; }
    double at(std::size_t r, std::size_t c) const { return data_[r * shape_[rank() - 1] + c]; }

    // 3-D accessors for channel-major maps [C,H,W].
    double& at(std::size_t ch, std::size_t r, std::size_t c) {
        return data_[(ch * shape_[1] + r) * shape_[2] + c];
    }
    double at(std::size_t ch, std::size_t r, std::size_t c) const {
        return data_[(ch * shape_[1] + r) * shape_[2] + c];
    }

    Tensor reshaped(Shape s) const {
        if (shape_size(s) != size())
            throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(s));
        return Tensor(std::move(s), data_);
    }

    void reshape(Shape s) {
        if (shape_size(s) != size())
            throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(s));
        shape_ = std::move(s);
    }

    void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

    bool all_finite() const noexcept {
        return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
    }

    double sum() const noexcept {
        double s = 0.0;
        for (double v : data_) s += v;
        return s;
    }
    double min() const { return *std::min_element(data_.begin(), data_.end()); }
    double max() const { return *std::max_element(data_.begin(), data_.end()); }

    /// Copy of channel `c` of a [C,H,W] tensor as [H,W].
    Tensor channel(std::size_t c) const {
        if (rank() != 3) throw ShapeError("channel() needs a rank-3 tensor");
        const std::size_t plane = shape_[1] * shape_[2];
        std::vector<double> out(data_.begin() + static_cast<std::ptrdiff_t>(c * plane),
                                data_.begin() + static_cast<std::ptrdiff_t>((c + 1) * plane));
        return Tensor({shape_[1], shape_[2]}, std::move(out));
    }

    Tensor& operator+=(const Tensor& o) {
        require_same_shape(o, "+=");
        for (std::size_t i = 0; i < size(); ++i) data_[i] += o.data_[i];
        return *this;
    }
    Tensor& operator-=(const Tensor& o) {
        require_same_shape(o, "-=");
        for (std::size_t i = 0; i < size(); ++i) data_[i] -= o.data_[i];
        return *this;
    }
    Tensor& operator*=(double s) {
        for (double& v : data_) v *= s;
        return *this;
    }

    friend Tensor operator+(Tensor a, const Tensor& b) { return a += b; }
    friend Tensor operator-(Tensor a, const Tensor& b) { return a -= b; }
    friend Tensor operator*(Tensor a, double s) { return a *= s; }
    friend Tensor operator*(double s, Tensor a) { return a *= s; }

    bool operator==(const Tensor& o) const = default;

    void require_same_shape(const Tensor& o, const char* what) const {
        if (shape_ != o.shape_)
            throw ShapeError(std::string(what) + ": shape mismatch " + shape_str(shape_) + " vs " +
                             shape_str(o.shape_));
    }

private:
    void check_dims() const {
        for (std::size_t d : shape_)
            if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + shape_str(shape_));
    }

    Shape shape_;
    std::vector<double> data_;
};

/// Stack equally shaped tensors along a new leading axis.
inline Tensor stack(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ShapeError("stack of zero tensors");
    Shape s = parts.front().shape();
    std::vector<double> out;
    out.reserve(parts.size() * parts.front().size());
    for (const auto& p : parts) {
        parts.front().require_same_shape(p, "stack");
        out.insert(out.end(), p.vec().begin(), p.vec().end());
    }
    s.insert(s.begin(), parts.size());
    return Tensor(std::move(s), std::move(out));
}

}  // namespace gif

#endif  // GIF_TENSOR_HPP
