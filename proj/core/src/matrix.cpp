#include "momentflow/matrix.hpp"

#include <cmath>
#include <string>

namespace momentflow {

Vector matvec(const Matrix& m, const Vector& x) {
    if (m.cols != x.size())
        throw StructuralError("matvec: shape mismatch (" + std::to_string(m.rows) + "x" +
                              std::to_string(m.cols) + " vs len " + std::to_string(x.size()) + ")");
    Vector y(m.rows, 0.0);
    for (std::size_t r = 0; r < m.rows; ++r) {
        const double* mr = m.row_ptr(r);
        double acc = 0.0;
        for (std::size_t c = 0; c < m.cols; ++c) acc += mr[c] * x[c];
        y[r] = acc;
    }
    return y;
}

Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols != b.rows) throw StructuralError("matmul: inner dimensions differ");
    Matrix out(a.rows, b.cols);
    for (std::size_t i = 0; i < a.rows; ++i) {
        const double* ai = a.row_ptr(i);
        double* oi = out.row_ptr(i);
        for (std::size_t k = 0; k < a.cols; ++k) {
            const double aik = ai[k];
            if (aik == 0.0) continue;
            const double* bk = b.row_ptr(k);
            for (std::size_t j = 0; j < b.cols; ++j) oi[j] += aik * bk[j];
        }
    }
    return out;
}

Matrix transpose(const Matrix& m) {
    Matrix out(m.cols, m.rows);
    for (std::size_t r = 0; r < m.rows; ++r)
        for (std::size_t c = 0; c < m.cols; ++c) out(c, r) = m(r, c);
    return out;
}

Matrix matadd(const Matrix& a, const Matrix& b) {
    if (a.rows != b.rows || a.cols != b.cols) throw StructuralError("matadd: shape mismatch");
    Matrix out = a;
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += b.data[i];
    return out;
}

Matrix matscale(const Matrix& m, double s) {
    Matrix out = m;
    for (double& v : out.data) v *= s;
    return out;
}

double quadratic_form(const Matrix& m, const Vector& a) {
    if (m.rows != m.cols || m.rows != a.size())
        throw StructuralError("quadratic_form: shape mismatch");
    double acc = 0.0;
    for (std::size_t i = 0; i < m.rows; ++i) {
        const double* mi = m.row_ptr(i);
        double row_acc = 0.0;
        for (std::size_t j = 0; j < m.cols; ++j) row_acc += mi[j] * a[j];
        acc += a[i] * row_acc;
    }
    return acc;
}

double weighted_trace(const Matrix& m, const Vector& d) {
    if (m.rows != m.cols || m.rows != d.size())
        throw StructuralError("weighted_trace: shape mismatch");
    double acc = 0.0;
    for (std::size_t i = 0; i < m.rows; ++i) acc += m(i, i) * d[i];
    return acc;
}

Matrix kron(const Matrix& a, const Matrix& b) {
    Matrix out(a.rows * b.rows, a.cols * b.cols);
    for (std::size_t i = 0; i < a.rows; ++i)
        for (std::size_t j = 0; j < a.cols; ++j) {
            const double aij = a(i, j);
            for (std::size_t k = 0; k < b.rows; ++k)
                for (std::size_t l = 0; l < b.cols; ++l)
                    out(i * b.rows + k, j * b.cols + l) = aij * b(k, l);
        }
    return out;
}

double dot(const Vector& a, const Vector& b) {
    if (a.size() != b.size()) throw StructuralError("dot: length mismatch");
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
    return acc;
}

double max_abs_diff(const Matrix& a, const Matrix& b) {
    if (a.rows != b.rows || a.cols != b.cols) throw StructuralError("max_abs_diff: shape mismatch");
    double m = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i)
        m = std::max(m, std::fabs(a.data[i] - b.data[i]));
    return m;
}

double frobenius_norm(const Matrix& m) {
    double acc = 0.0;
    for (double v : m.data) acc += v * v;
    return std::sqrt(acc);
}

bool all_finite(const Vector& v) {
    for (double x : v)
        if (!std::isfinite(x)) return false;
    return true;
}

bool all_finite(const Matrix& m) { return all_finite(m.data); }

void require_symmetric(const Matrix& m, double rel_tol, const char* what) {
    if (m.rows != m.cols) throw StructuralError(std::string(what) + ": matrix not square");
    double scale = 0.0;
    for (double v : m.data) scale = std::max(scale, std::fabs(v));
    const double tol = rel_tol * std::max(scale, 1e-300);
    for (std::size_t i = 0; i < m.rows; ++i)
        for (std::size_t j = i + 1; j < m.cols; ++j)
            if (std::fabs(m(i, j) - m(j, i)) > tol)
                throw StructuralError(std::string(what) + ": matrix not symmetric");
}

}  // namespace momentflow
