// Dense row-major tensor with shape checking. Scalar type is selected
// globally per build path: float for training, double for the gradient
// checking suites.
#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace transdiff {

using Shape = std::vector<std::int64_t>;

[[noreturn]] inline void fail(const std::string& msg) {
    throw std::runtime_error(msg);
}

inline std::int64_t shape_numel(const Shape& shape) {
    std::int64_t n = 1;
    for (std::int64_t e : shape) {
        if (e <= 0) fail("tensor extents must be positive");
        n *= e;
    }
    return n;
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << "(";
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
    os << ")";
    return os.str();
}

template <class T>
class Tensor {
  public:
    Tensor() = default;

    explicit Tensor(Shape shape) : shape_(std::move(shape)), data_(shape_numel(shape_), T(0)) {}

    Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
        if (static_cast<std::int64_t>(data_.size()) != shape_numel(shape_))
            fail("tensor data length does not match shape " + shape_str(shape_));
    }

    static Tensor full(Shape shape, T value) {
        Tensor t(std::move(shape));
        std::fill(t.data_.begin(), t.data_.end(), value);
        return t;
    }

    static Tensor scalar(T value) { return Tensor({1}, {value}); }

    // 2-D convenience constructor: row-major initializer list.
    static Tensor matrix(std::initializer_list<std::initializer_list<T>> rows_init) {
        std::int64_t r = static_cast<std::int64_t>(rows_init.size());
        std::int64_t c = r ? static_cast<std::int64_t>(rows_init.begin()->size()) : 0;
        std::vector<T> data;
        data.reserve(static_cast<std::size_t>(r * c));
        for (const auto& row : rows_init) {
            if (static_cast<std::int64_t>(row.size()) != c) fail("ragged matrix initializer");
            data.insert(data.end(), row.begin(), row.end());
        }
        return Tensor({r, c}, std::move(data));
    }

    const Shape& shape() const { return shape_; }
    std::int64_t ndim() const { return static_cast<std::int64_t>(shape_.size()); }
    std::int64_t numel() const { return static_cast<std::int64_t>(data_.size()); }
    bool empty() const { return data_.empty(); }

    std::int64_t rows() const {
        require_2d();
        return shape_[0];
    }
    std::int64_t cols() const {
        require_2d();
        return shape_[1];
    }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }

    T& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
    const T& operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

    T& at(std::int64_t r, std::int64_t c) { return data_[static_cast<std::size_t>(r * cols() + c)]; }
    const T& at(std::int64_t r, std::int64_t c) const {
        return data_[static_cast<std::size_t>(r * cols() + c)];
    }

    Tensor reshaped(Shape shape) const {
        if (shape_numel(shape) != numel())
            fail("reshape " + shape_str(shape_) + " -> " + shape_str(shape) + " changes element count");
        return Tensor(std::move(shape), data_);
    }

    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

    bool all_finite() const {
        for (T v : data_)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }

    T* row_ptr(std::int64_t r) { return data_.data() + r * cols(); }
    const T* row_ptr(std::int64_t r) const { return data_.data() + r * cols(); }

  private:
    void require_2d() const {
        if (shape_.size() != 2) fail("expected a 2-D tensor, got " + shape_str(shape_));
    }

    Shape shape_;
    std::vector<T> data_;
};

template <class T>
using EigenMap = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <class T>
using ConstEigenMap =
    Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

template <class T>
EigenMap<T> as_matrix(Tensor<T>& t) {
    return EigenMap<T>(t.data(), t.rows(), t.cols());
}
template <class T>
ConstEigenMap<T> as_matrix(const Tensor<T>& t) {
    return ConstEigenMap<T>(t.data(), t.rows(), t.cols());
}

template <class T>
void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* what) {
    if (!a.same_shape(b))
        fail(std::string(what) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
             shape_str(b.shape()));
}

// ---- elementwise arithmetic (no autodiff; graph ops live in autograd.hpp) ----

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    check_same_shape(a, b, "add");
    Tensor<T> out(a.shape());
    for (std::int64_t i = 0; i < a.numel(); ++i) out[i] = a[i] + b[i];
    return out;
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    check_same_shape(a, b, "sub");
    Tensor<T> out(a.shape());
    for (std::int64_t i = 0; i < a.numel(); ++i) out[i] = a[i] - b[i];
    return out;
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    check_same_shape(a, b, "mul");
    Tensor<T> out(a.shape());
    for (std::int64_t i = 0; i < a.numel(); ++i) out[i] = a[i] * b[i];
    return out;
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T c) {
    Tensor<T> out(a.shape());
    for (std::int64_t i = 0; i < a.numel(); ++i) out[i] = a[i] * c;
    return out;
}

// out = a + b*c, fused so samplers control rounding explicitly
template <class T>
Tensor<T> axpy(const Tensor<T>& a, const Tensor<T>& b, T c) {
    check_same_shape(a, b, "axpy");
    Tensor<T> out(a.shape());
    for (std::int64_t i = 0; i < a.numel(); ++i) out[i] = a[i] + b[i] * c;
    return out;
}

template <class T>
T sum(const Tensor<T>& a) {
    T s = 0;
    for (std::int64_t i = 0; i < a.numel(); ++i) s += a[i];
    return s;
}

template <class T>
T mean(const Tensor<T>& a) {
    if (a.numel() == 0) fail("mean of empty tensor");
    return sum(a) / static_cast<T>(a.numel());
}

template <class T>
T max_abs(const Tensor<T>& a) {
    T m = 0;
    for (std::int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i]));
    return m;
}

template <class T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
    check_same_shape(a, b, "max_abs_diff");
    T m = 0;
    for (std::int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

template <class T>
bool bitwise_equal(const Tensor<T>& a, const Tensor<T>& b) {
    if (!a.same_shape(b)) return false;
    return std::memcmp(a.data(), b.data(), sizeof(T) * static_cast<std::size_t>(a.numel())) == 0;
}

// ---- matrix products (Eigen kernels behind the tensor contract) ----

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.cols() != b.rows())
        fail("matmul: inner extents differ " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor<T> out({a.rows(), b.cols()});
    as_matrix(out).noalias() = as_matrix(a) * as_matrix(b);
    return out;
}

// a * b^T
template <class T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.cols() != b.cols())
        fail("matmul_nt: inner extents differ " + shape_str(a.shape()) + " vs " +
             shape_str(b.shape()));
    Tensor<T> out({a.rows(), b.rows()});
    as_matrix(out).noalias() = as_matrix(a) * as_matrix(b).transpose();
    return out;
}

// a^T * b
template <class T>
Tensor<T> matmul_tn(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rows() != b.rows())
        fail("matmul_tn: inner extents differ " + shape_str(a.shape()) + " vs " +
             shape_str(b.shape()));
    Tensor<T> out({a.cols(), b.cols()});
    as_matrix(out).noalias() = as_matrix(a).transpose() * as_matrix(b);
    return out;
}

template <class T>
Tensor<T> transposed(const Tensor<T>& a) {
    Tensor<T> out({a.cols(), a.rows()});
    as_matrix(out) = as_matrix(a).transpose();
    return out;
}

template <class T>
void ensure_finite(const Tensor<T>& t, const char* what) {
    if (!t.all_finite()) fail(std::string(what) + ": non-finite values");
}

}  // namespace transdiff
