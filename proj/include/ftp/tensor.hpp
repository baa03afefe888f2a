#ifndef FTP_TENSOR_HPP
#define FTP_TENSOR_HPP

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

/**
 * @file tensor.hpp
 *
 * @brief Dense float64 tensors in row-major order, the error types shared by
 * the whole library, and the raw (non-differentiable) kernels.
 */

namespace ftp {

using Shape = std::vector<std::size_t>;

/// Thrown when operand shapes do not conform.
struct ShapeError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

/// Thrown for out-of-range or duplicate row indices.
struct IndexError : std::out_of_range {
    using std::out_of_range::out_of_range;
};

/// Thrown for invalid scalar arguments and configurations.
struct ArgumentError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

/// Thrown when a caller breaks an API contract (e.g. backward from a non-scalar).
struct ContractError : std::logic_error {
    using std::logic_error::logic_error;
};

/// Thrown when training produces a non-finite loss or gradient.
struct TrainingError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline std::string to_string(const Shape& shape) {
    std::ostringstream out;
    out << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) {
            out << 'x';
        }
        out << shape[i];
    }
    out << ']';
    return out.str();
}

inline std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Shape shape, double fill = 0.0) : shape_(std::move(shape)) {
        check_shape(shape_);
        data_.assign(shape_numel(shape_), fill);
    }

    Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
        check_shape(shape_);
        if (shape_numel(shape_) != data_.size()) {
            throw ShapeError("tensor shape " + to_string(shape_) + " does not hold " + std::to_string(data_.size()) +
                             " elements");
        }
    }

    /// Builds a 2-D tensor from nested rows; all rows must have the same length.
    static Tensor from_rows(std::initializer_list<std::initializer_list<double>> rows) {
        const std::size_t n = rows.size();
        const std::size_t c = n ? rows.begin()->size() : 0;
        std::vector<double> data;
        data.reserve(n * c);
        for (const auto& row : rows) {
            if (row.size() != c) {
                throw ShapeError("ragged rows in Tensor::from_rows");
            }
            data.insert(data.end(), row.begin(), row.end());
        }
        return Tensor({n, c}, std::move(data));
    }

    static Tensor scalar(double v) { return Tensor({1}, std::vector<double>{v}); }

    const Shape& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t dim(std::size_t i) const { return shape_.at(i); }
    std::size_t numel() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    std::span<double> data() { return data_; }
    std::span<const double> data() const { return data_; }
    const std::vector<double>& vec() const { return data_; }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    double& operator()(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }

    double& operator()(std::size_t i, std::size_t j, std::size_t k) {
        return data_[(i * shape_[1] + j) * shape_[2] + k];
    }
    double operator()(std::size_t i, std::size_t j, std::size_t k) const {
        return data_[(i * shape_[1] + j) * shape_[2] + k];
    }

    std::span<double> row(std::size_t r) { return std::span<double>(data_).subspan(r * shape_[1], shape_[1]); }
    std::span<const double> row(std::size_t r) const {
        return std::span<const double>(data_).subspan(r * shape_[1], shape_[1]);
    }

    double item() const {
        if (data_.size() != 1) {
            throw ContractError("item() on tensor of shape " + to_string(shape_));
        }
        return data_[0];
    }

    Tensor reshaped(Shape shape) const {
        if (shape_numel(shape) != numel()) {
            throw ShapeError("cannot reshape " + to_string(shape_) + " to " + to_string(shape));
        }
        return Tensor(std::move(shape), data_);
    }

    bool all_finite() const {
        for (double v : data_) {
            if (!std::isfinite(v)) {
                return false;
            }
        }
        return true;
    }

    void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

    friend bool operator==(const Tensor&, const Tensor&) = default;

private:
    static void check_shape(const Shape& shape) {
        for (auto d : shape) {
            if (d == 0) {
                throw ShapeError("tensor dimensions must be positive, got " + to_string(shape));
            }
        }
    }

    Shape shape_;
    std::vector<double> data_;
};

inline void require_rank(const Tensor& t, std::size_t rank, const char* what) {
    if (t.rank() != rank) {
        throw ShapeError(std::string(what) + ": expected rank " + std::to_string(rank) + ", got " +
                         to_string(t.shape()));
    }
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(what) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                         to_string(b.shape()));
    }
}

/// Largest |a - b| / max(1, |b|) over all elements.
inline double max_rel_diff(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "max_rel_diff");
    double worst = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) {
        worst = std::max(worst, std::abs(a[i] - b[i]) / std::max(1.0, std::abs(b[i])));
    }
    return worst;
}

// ---------------------------------------------------------------------------
// Multiply-accumulate instrumentation. Counts are per thread.
// ---------------------------------------------------------------------------

namespace detail {
inline std::uint64_t& mac_counter() {
    thread_local std::uint64_t count = 0;
    return count;
}
}  // namespace detail

inline void add_macs(std::uint64_t n) { detail::mac_counter() += n; }
inline std::uint64_t mac_count() { return detail::mac_counter(); }

/// Reports the MACs recorded on this thread since construction.
class MacScope {
public:
    MacScope() : start_(mac_count()) {}
    std::uint64_t elapsed() const { return mac_count() - start_; }

private:
    std::uint64_t start_;
};

// ---------------------------------------------------------------------------
// Raw kernels. These never touch the MAC counter; the differentiable ops do.
// ---------------------------------------------------------------------------

namespace kernels {

/// C = A * B for row-major 2-D tensors.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
    require_rank(a, 2, "matmul");
    require_rank(b, 2, "matmul");
    if (a.dim(1) != b.dim(0)) {
        throw ShapeError("matmul: inner dimensions differ, " + to_string(a.shape()) + " x " + to_string(b.shape()));
    }
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor out({m, n});
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    double* pc = out.data().data();
    for (std::size_t i = 0; i < m; ++i) {
        double* crow = pc + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = pa[i * k + p];
            const double* brow = pb + p * n;
            for (std::size_t j = 0; j < n; ++j) {
                crow[j] += av * brow[j];
            }
        }
    }
    return out;
}

/// C = A * B^T.
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    require_rank(a, 2, "matmul_nt");
    require_rank(b, 2, "matmul_nt");
    if (a.dim(1) != b.dim(1)) {
        throw ShapeError("matmul_nt: inner dimensions differ, " + to_string(a.shape()) + " x " +
                         to_string(b.shape()) + "^T");
    }
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
    Tensor out({m, n});
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = pa + i * k;
        for (std::size_t j = 0; j < n; ++j) {
            const double* brow = pb + j * k;
            double acc = 0.0;
            for (std::size_t p = 0; p < k; ++p) {
                acc += arow[p] * brow[p];
            }
            out(i, j) = acc;
        }
    }
    return out;
}

/// C = A^T * B.
inline Tensor matmul_tn(const Tensor& a, const Tensor& b) {
    require_rank(a, 2, "matmul_tn");
    require_rank(b, 2, "matmul_tn");
    if (a.dim(0) != b.dim(0)) {
        throw ShapeError("matmul_tn: inner dimensions differ, " + to_string(a.shape()) + "^T x " +
                         to_string(b.shape()));
    }
    const std::size_t k = a.dim(0), m = a.dim(1), n = b.dim(1);
    Tensor out({m, n});
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    double* pc = out.data().data();
    for (std::size_t p = 0; p < k; ++p) {
        const double* brow = pb + p * n;
        for (std::size_t i = 0; i < m; ++i) {
            const double av = pa[p * m + i];
            double* crow = pc + i * n;
            for (std::size_t j = 0; j < n; ++j) {
                crow[j] += av * brow[j];
            }
        }
    }
    return out;
}

inline Tensor transpose(const Tensor& a) {
    require_rank(a, 2, "transpose");
    Tensor out({a.dim(1), a.dim(0)});
    for (std::size_t i = 0; i < a.dim(0); ++i) {
        for (std::size_t j = 0; j < a.dim(1); ++j) {
            out(j, i) = a(i, j);
        }
    }
    return out;
}

inline void axpy(double alpha, const Tensor& x, Tensor& y) {
    require_same_shape(x, y, "axpy");
    for (std::size_t i = 0; i < x.numel(); ++i) {
        y[i] += alpha * x[i];
    }
}

/// Row-wise softmax with max subtraction.
inline Tensor softmax_rows(const Tensor& x) {
    require_rank(x, 2, "softmax_rows");
    Tensor out(x.shape());
    for (std::size_t r = 0; r < x.dim(0); ++r) {
        auto in = x.row(r);
        auto o = out.row(r);
        double mx = in[0];
        for (double v : in) {
            mx = std::max(mx, v);
        }
        double total = 0.0;
        for (std::size_t c = 0; c < in.size(); ++c) {
            o[c] = std::exp(in[c] - mx);
            total += o[c];
        }
        for (double& v : o) {
            v /= total;
        }
    }
    return out;
}

/// Source coordinate and blend weights for one output position of an
/// align-corners=false bilinear resample along one axis.
struct AxisSample {
    std::size_t lo;
    std::size_t hi;
    double w_hi;
};

inline AxisSample axis_sample(std::size_t out_index, std::size_t in_size, double scale) {
    double src = (static_cast<double>(out_index) + 0.5) / scale - 0.5;
    if (src < 0.0) {
        src = 0.0;
    }
    auto lo = static_cast<std::size_t>(std::floor(src));
    if (lo > in_size - 1) {
        lo = in_size - 1;
    }
    const std::size_t hi = std::min(lo + 1, in_size - 1);
    double w = src - static_cast<double>(lo);
    if (hi == lo) {
        w = 0.0;
    }
    return {lo, hi, w};
}

/// Bilinear upsampling of an H x W x C map by an integer factor.
inline Tensor upsample_bilinear(const Tensor& x, std::size_t factor) {
    require_rank(x, 3, "upsample_bilinear");
    if (factor == 0) {
        throw ArgumentError("upsample_bilinear: factor must be >= 1");
    }
    const std::size_t h = x.dim(0), w = x.dim(1), c = x.dim(2);
    const std::size_t oh = h * factor, ow = w * factor;
    const auto f = static_cast<double>(factor);
    Tensor out({oh, ow, c});
    for (std::size_t oy = 0; oy < oh; ++oy) {
        const auto sy = axis_sample(oy, h, f);
        for (std::size_t ox = 0; ox < ow; ++ox) {
            const auto sx = axis_sample(ox, w, f);
            const double w00 = (1 - sy.w_hi) * (1 - sx.w_hi), w01 = (1 - sy.w_hi) * sx.w_hi;
            const double w10 = sy.w_hi * (1 - sx.w_hi), w11 = sy.w_hi * sx.w_hi;
            for (std::size_t ch = 0; ch < c; ++ch) {
                out(oy, ox, ch) = w00 * x(sy.lo, sx.lo, ch) + w01 * x(sy.lo, sx.hi, ch) +
                                  w10 * x(sy.hi, sx.lo, ch) + w11 * x(sy.hi, sx.hi, ch);
            }
        }
    }
    return out;
}

/// Adjoint of upsample_bilinear: maps an output-space gradient back to the input grid.
inline Tensor upsample_bilinear_adjoint(const Tensor& g, const Shape& in_shape, std::size_t factor) {
    const std::size_t h = in_shape[0], w = in_shape[1], c = in_shape[2];
    const std::size_t oh = h * factor, ow = w * factor;
    const auto f = static_cast<double>(factor);
    Tensor out(in_shape);
    for (std::size_t oy = 0; oy < oh; ++oy) {
        const auto sy = axis_sample(oy, h, f);
        for (std::size_t ox = 0; ox < ow; ++ox) {
            const auto sx = axis_sample(ox, w, f);
            const double w00 = (1 - sy.w_hi) * (1 - sx.w_hi), w01 = (1 - sy.w_hi) * sx.w_hi;
            const double w10 = sy.w_hi * (1 - sx.w_hi), w11 = sy.w_hi * sx.w_hi;
            for (std::size_t ch = 0; ch < c; ++ch) {
                const double gv = g(oy, ox, ch);
                out(sy.lo, sx.lo, ch) += w00 * gv;
                out(sy.lo, sx.hi, ch) += w01 * gv;
                out(sy.hi, sx.lo, ch) += w10 * gv;
                out(sy.hi, sx.hi, ch) += w11 * gv;
            }
        }
    }
    return out;
}

}  // namespace kernels

}  // namespace ftp

#endif
