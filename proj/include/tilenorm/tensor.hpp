#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace tilenorm {

//! Raised when tensor extents do not agree with what an operation needs.
class ShapeError : public std::invalid_argument {
  public:
    using std::invalid_argument::invalid_argument;
};

//! Raised when a NaN or infinity shows up where a finite value is required.
class NonFiniteError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

using Shape = std::vector<std::size_t>;

inline std::size_t shape_volume(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_string(const Shape& shape) {
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ", ";
        os << shape[i];
    }
    os << ')';
    return os.str();
}

/*!
 * Dense row-major array of doubles; the last axis is the fastest.
 *
 * A default-constructed tensor is empty (rank 0, no data) and is used as a
 * "not set" marker by caches.
 */
class Tensor {
  public:
    Tensor() = default;

    explicit Tensor(Shape shape, double fill = 0.0) : shape_(std::move(shape)) {
        for (auto e : shape_)
            if (e == 0) throw ShapeError("tensor extents must be positive, got " + shape_string(shape_));
        data_.assign(shape_volume(shape_), fill);
    }

    Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
        for (auto e : shape_)
            if (e == 0) throw ShapeError("tensor extents must be positive, got " + shape_string(shape_));
        if (data_.size() != shape_volume(shape_))
            throw ShapeError("data length " + std::to_string(data_.size()) + " does not match shape " +
                             shape_string(shape_));
    }

    const Shape& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }
    std::size_t dim(std::size_t axis) const { return shape_.at(axis); }

    std::span<double> data() { return data_; }
    std::span<const double> data() const { return data_; }
    double* ptr() { return data_.data(); }
    const double* ptr() const { return data_.data(); }
    std::vector<double>& vec() { return data_; }
    const std::vector<double>& vec() const { return data_; }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    template <class... I>
    std::size_t offset(I... idx) const {
        static_assert(sizeof...(I) > 0);
        const std::size_t ix[] = {static_cast<std::size_t>(idx)...};
        std::size_t off = 0;
        for (std::size_t a = 0; a < sizeof...(I); ++a) off = off * shape_[a] + ix[a];
        return off;
    }

    template <class... I>
    double& at(I... idx) {
        return data_[offset(idx...)];
    }
    template <class... I>
    double at(I... idx) const {
        return data_[offset(idx...)];
    }

    Tensor reshaped(Shape shape) const {
        if (shape_volume(shape) != size())
            throw ShapeError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
        return Tensor(std::move(shape), data_);
    }

    void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

    bool all_finite() const {
        return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
    }

    friend bool operator==(const Tensor& a, const Tensor& b) {
        return a.shape_ == b.shape_ && a.data_ == b.data_;
    }

  private:
    Shape shape_;
    std::vector<double> data_;
};

inline void require_finite(const Tensor& t, const char* what) {
    if (!t.all_finite()) throw NonFiniteError(std::string(what) + " contains non-finite values");
}

inline void require_rank(const Tensor& t, std::size_t rank, const char* what) {
    if (t.rank() != rank)
        throw ShapeError(std::string(what) + ": expected rank " + std::to_string(rank) + ", got shape " +
                         shape_string(t.shape()));
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw ShapeError("max_abs_diff: " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

inline double dot(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw ShapeError("dot: length mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

using Extent3 = std::array<std::size_t, 3>;

//! Per-axis box: a start corner and an extent for the three spatial axes.
struct Box3 {
    std::array<std::size_t, 3> start{};
    std::array<std::size_t, 3> extent{};

    std::size_t volume() const { return extent[0] * extent[1] * extent[2]; }
};

/*!
 * Copy the spatial box `box` out of a [C, D, H, W] tensor. Parts of the box
 * that fall past the high end of the source are zero-filled; `out_extent`
 * (when non-zero) sets the result's spatial size.
 */
inline Tensor crop(const Tensor& src, const Box3& box, std::array<std::size_t, 3> out_extent = {}) {
    require_rank(src, 4, "crop");
    for (int a = 0; a < 3; ++a)
        if (out_extent[a] == 0) out_extent[a] = box.extent[a];
    const std::size_t C = src.dim(0), D = src.dim(1), H = src.dim(2), W = src.dim(3);
    Tensor out({C, out_extent[0], out_extent[1], out_extent[2]});
    const std::size_t ez = std::min(box.extent[0], out_extent[0]);
    const std::size_t ey = std::min(box.extent[1], out_extent[1]);
    const std::size_t ex = std::min(box.extent[2], out_extent[2]);
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t z = 0; z < ez && box.start[0] + z < D; ++z)
            for (std::size_t y = 0; y < ey && box.start[1] + y < H; ++y) {
                const std::size_t sx0 = box.start[2];
                if (sx0 >= W) continue;
                const std::size_t n = std::min(ex, W - sx0);
                const double* s = src.ptr() + src.offset(c, box.start[0] + z, box.start[1] + y, sx0);
                double* d = out.ptr() + out.offset(c, z, y, std::size_t{0});
                std::copy(s, s + n, d);
            }
    return out;
}

//! Write `src` (box-local [C, d, h, w]) region `src_box` into `dst` at `dst_start`.
inline void paste(Tensor& dst, const std::array<std::size_t, 3>& dst_start, const Tensor& src, const Box3& src_box) {
    require_rank(dst, 4, "paste");
    require_rank(src, 4, "paste");
    if (dst.dim(0) != src.dim(0)) throw ShapeError("paste: channel mismatch");
    for (int a = 0; a < 3; ++a) {
        if (src_box.start[a] + src_box.extent[a] > src.dim(a + 1) ||
            dst_start[a] + src_box.extent[a] > dst.dim(a + 1))
            throw ShapeError("paste: box out of range");
    }
    for (std::size_t c = 0; c < src.dim(0); ++c)
        for (std::size_t z = 0; z < src_box.extent[0]; ++z)
            for (std::size_t y = 0; y < src_box.extent[1]; ++y) {
                const double* s =
                    src.ptr() + src.offset(c, src_box.start[0] + z, src_box.start[1] + y, src_box.start[2]);
                double* d = dst.ptr() + dst.offset(c, dst_start[0] + z, dst_start[1] + y, dst_start[2]);
                std::copy(s, s + src_box.extent[2], d);
            }
}

//! Add a leading batch axis of extent 1.
inline Tensor unsqueeze0(const Tensor& t) {
    Shape s = t.shape();
    s.insert(s.begin(), 1);
    return t.reshaped(std::move(s));
}

//! Drop a leading batch axis of extent 1.
inline Tensor squeeze0(const Tensor& t) {
    if (t.rank() == 0 || t.dim(0) != 1) throw ShapeError("squeeze0: leading extent must be 1");
    Shape s(t.shape().begin() + 1, t.shape().end());
    return t.reshaped(std::move(s));
}

}  // namespace tilenorm
