#pragma once

#include <algorithm>
#include <cstddef>
#include <new>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace introspect::lm {

/// Over-aligned allocator so vectorized kernels see the same alignment on every
/// run; results would otherwise depend on where the heap placed a buffer.
template <typename T, std::size_t Align = 64>
struct AlignedAllocator {
    using value_type = T;
    AlignedAllocator() = default;
    template <typename U>
    AlignedAllocator(const AlignedAllocator<U, Align>&) noexcept {}
    template <typename U>
    struct rebind {
        using other = AlignedAllocator<U, Align>;
    };
    T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), std::align_val_t{Align})); }
    void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, std::align_val_t{Align}); }
    friend bool operator==(const AlignedAllocator&, const AlignedAllocator&) { return true; }
};

template <typename Real>
using AlignedVector = std::vector<Real, AlignedAllocator<Real>>;

/// Dense row-major matrix. Vectors are stored as 1 x n matrices.
template <typename Real>
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, Real fill = Real(0))
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
    Matrix(std::size_t rows, std::size_t cols, const std::vector<Real>& data)
        : rows_(rows), cols_(cols), data_(data.begin(), data.end()) {
        if (data_.size() != rows_ * cols_) {
            throw std::invalid_argument("Matrix: data size does not match shape");
        }
    }

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    Real* data() { return data_.data(); }
    const Real* data() const { return data_.data(); }
    AlignedVector<Real>& storage() { return data_; }
    const AlignedVector<Real>& storage() const { return data_; }

    Real& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    Real operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

    std::span<Real> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
    std::span<const Real> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

    void fill(Real v) { std::fill(data_.begin(), data_.end(), v); }
    void resize(std::size_t rows, std::size_t cols) {
        rows_ = rows;
        cols_ = cols;
        data_.assign(rows * cols, Real(0));
    }

    bool same_shape(const Matrix& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

    friend bool operator==(const Matrix&, const Matrix&) = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    AlignedVector<Real> data_;
};

/// A named trainable tensor with its gradient accumulator.
template <typename Real>
struct Parameter {
    std::string name;
    Matrix<Real> value;
    Matrix<Real> grad;
    bool trainable = true;
    bool decay = true;  // subject to weight decay

    Parameter() = default;
    Parameter(std::string n, std::size_t rows, std::size_t cols, bool apply_decay = true)
        : name(std::move(n)), value(rows, cols), grad(rows, cols), decay(apply_decay) {}

    void zero_grad() { grad.fill(Real(0)); }
};

template <typename Dst, typename Src>
Matrix<Dst> cast_matrix(const Matrix<Src>& m) {
    Matrix<Dst> out(m.rows(), m.cols());
    for (std::size_t i = 0; i < m.size(); ++i) out.data()[i] = static_cast<Dst>(m.data()[i]);
    return out;
}

}  // namespace introspect::lm
