#pragma once

#include <cstddef>
#include <vector>

#include "momentflow/errors.hpp"

namespace momentflow {

using Vector = std::vector<double>;

/// Dense row-major real-64 matrix.
struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data;

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c, double fill = 0.0)
        : rows(r), cols(c), data(r * c, fill) {}

    double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

    std::size_t size() const { return data.size(); }
    bool empty() const { return data.empty(); }

    /// Pointer to the start of row r.
    double* row_ptr(std::size_t r) { return data.data() + r * cols; }
    const double* row_ptr(std::size_t r) const { return data.data() + r * cols; }

    Vector row(std::size_t r) const {
        return Vector(data.begin() + static_cast<std::ptrdiff_t>(r * cols),
                      data.begin() + static_cast<std::ptrdiff_t>((r + 1) * cols));
    }

    static Matrix identity(std::size_t n) {
        Matrix m(n, n);
        for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
        return m;
    }

    static Matrix diag(const Vector& d) {
        Matrix m(d.size(), d.size());
        for (std::size_t i = 0; i < d.size(); ++i) m(i, i) = d[i];
        return m;
    }
};

// Basic dense kernels. Everything below is plain loops over row-major
// storage; the propagation code shares them so that the analytic mean path
// and the plain forward pass are bit-identical.

Vector matvec(const Matrix& m, const Vector& x);
Matrix matmul(const Matrix& a, const Matrix& b);
Matrix transpose(const Matrix& m);
Matrix matadd(const Matrix& a, const Matrix& b);
Matrix matscale(const Matrix& m, double s);

/// a' M a for square M.
double quadratic_form(const Matrix& m, const Vector& a);

/// sum_i M[i,i] * d[i].
double weighted_trace(const Matrix& m, const Vector& d);

/// Kronecker product a (x) b.
Matrix kron(const Matrix& a, const Matrix& b);

double dot(const Vector& a, const Vector& b);

/// Largest |a-b| entry; matrices must have equal shape.
double max_abs_diff(const Matrix& a, const Matrix& b);

double frobenius_norm(const Matrix& m);

bool all_finite(const Vector& v);
bool all_finite(const Matrix& m);

/// Throws StructuralError unless m is square and symmetric within
/// `rel_tol` relative to its largest absolute entry.
void require_symmetric(const Matrix& m, double rel_tol, const char* what);

}  // namespace momentflow
