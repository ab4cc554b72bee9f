#include "smmini/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <string>

#include "smmini/error.hpp"

namespace smmini {

namespace {

void require(bool ok, const char* what, const Matrix& a, const Matrix& b) {
    if (!ok) {
        throw Error(ErrorKind::shape, std::string(what) + ": " + std::to_string(a.rows()) + "x" +
                                          std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                                          std::to_string(b.cols()));
    }
}

}  // namespace

void Matrix::fill(double v) {
    std::fill(data_.begin(), data_.end(), v);
}

Matrix Matrix::identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) {
        m(i, i) = 1.0;
    }
    return m;
}

Matrix matmul_nt(const Matrix& x, const Matrix& w) {
    require(x.cols() == w.cols(), "matmul_nt", x, w);
    Matrix y(x.rows(), w.rows());
    const std::size_t k = x.cols();
    for (std::size_t i = 0; i < x.rows(); ++i) {
        const double* xi = x.row(i).data();
        double* yi = y.row(i).data();
        for (std::size_t o = 0; o < w.rows(); ++o) {
            const double* wo = w.row(o).data();
            double acc = 0.0;
            for (std::size_t j = 0; j < k; ++j) {
                acc += xi[j] * wo[j];
            }
            yi[o] = acc;
        }
    }
    return y;
}

Matrix matmul_nn(const Matrix& x, const Matrix& w) {
    require(x.cols() == w.rows(), "matmul_nn", x, w);
    Matrix y(x.rows(), w.cols());
    for (std::size_t i = 0; i < x.rows(); ++i) {
        double* yi = y.row(i).data();
        for (std::size_t j = 0; j < x.cols(); ++j) {
            const double xij = x(i, j);
            const double* wj = w.row(j).data();
            for (std::size_t c = 0; c < w.cols(); ++c) {
                yi[c] += xij * wj[c];
            }
        }
    }
    return y;
}

Matrix matmul_tn(const Matrix& x, const Matrix& w) {
    require(x.rows() == w.rows(), "matmul_tn", x, w);
    Matrix y(x.cols(), w.cols());
    for (std::size_t r = 0; r < x.rows(); ++r) {
        const double* wr = w.row(r).data();
        for (std::size_t i = 0; i < x.cols(); ++i) {
            const double xri = x(r, i);
            double* yi = y.row(i).data();
            for (std::size_t c = 0; c < w.cols(); ++c) {
                yi[c] += xri * wr[c];
            }
        }
    }
    return y;
}

void add_scaled(Matrix& dst, const Matrix& src, double alpha) {
    require(dst.rows() == src.rows() && dst.cols() == src.cols(), "add_scaled", dst, src);
    auto d = dst.values();
    auto s = src.values();
    for (std::size_t i = 0; i < d.size(); ++i) {
        d[i] += alpha * s[i];
    }
}

bool bitwise_equal(std::span<const double> a, std::span<const double> b) noexcept {
    return a.size() == b.size() && (a.empty() || std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0);
}

bool bitwise_equal(const Matrix& a, const Matrix& b) noexcept {
    return a.rows() == b.rows() && a.cols() == b.cols() && bitwise_equal(a.values(), b.values());
}

double max_abs_diff(const Matrix& a, const Matrix& b) {
    require(a.rows() == b.rows() && a.cols() == b.cols(), "max_abs_diff", a, b);
    double m = 0.0;
    auto av = a.values();
    auto bv = b.values();
    for (std::size_t i = 0; i < av.size(); ++i) {
        m = std::max(m, std::abs(av[i] - bv[i]));
    }
    return m;
}

}  // namespace smmini
