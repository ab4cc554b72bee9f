#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace smmini {

/// Dense row-major matrix of doubles.
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0) : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    double& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

    std::span<double> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
    std::span<const double> row(std::size_t r) const noexcept { return {data_.data() + r * cols_, cols_}; }

    std::span<double> values() noexcept { return data_; }
    std::span<const double> values() const noexcept { return data_; }

    void fill(double v);

    static Matrix identity(std::size_t n);

    friend bool operator==(const Matrix&, const Matrix&) = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

/// Y = X * W^T, X: n x in, W: out x in. This is the layout every linear layer uses.
Matrix matmul_nt(const Matrix& x, const Matrix& w);

/// Y = X * W, X: n x k, W: k x m.
Matrix matmul_nn(const Matrix& x, const Matrix& w);

/// Y = X^T * W, X: k x n, W: k x m. Used for weight gradients.
Matrix matmul_tn(const Matrix& x, const Matrix& w);

/// dst += alpha * src, shapes must match.
void add_scaled(Matrix& dst, const Matrix& src, double alpha);

/// True if every element compares equal bit-for-bit (distinguishes -0.0 and NaN payloads).
bool bitwise_equal(const Matrix& a, const Matrix& b) noexcept;
bool bitwise_equal(std::span<const double> a, std::span<const double> b) noexcept;

double max_abs_diff(const Matrix& a, const Matrix& b);

}  // namespace smmini
