#include "momentflow/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "momentflow/errors.hpp"

namespace momentflow {

EigenDecomposition sym_eig(const Matrix& m) {
    require_symmetric(m, 1e-10, "sym_eig");
    const std::size_t n = m.rows;
    Matrix a = m;
    // Work on the symmetrised copy so rotations stay exact.
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) {
            const double s = 0.5 * (a(i, j) + a(j, i));
            a(i, j) = s;
            a(j, i) = s;
        }
    Matrix v = Matrix::identity(n);

    // Cyclic Jacobi sweeps until all off-diagonal mass is annihilated.
    const int max_sweeps = 100;
    for (int sweep = 0; sweep < max_sweeps; ++sweep) {
        double off = 0.0;
        for (std::size_t p = 0; p < n; ++p)
            for (std::size_t q = p + 1; q < n; ++q) off += a(p, q) * a(p, q);
        if (off <= 1e-30 * std::max(1.0, frobenius_norm(a)) || off == 0.0) break;

        for (std::size_t p = 0; p + 1 < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                const double apq = a(p, q);
                if (apq == 0.0) continue;
                const double app = a(p, p);
                const double aqq = a(q, q);
                const double scale = std::fabs(app) + std::fabs(aqq);
                if (scale + std::fabs(apq) * 1e2 == scale && sweep > 3) {
                    a(p, q) = 0.0;
                    a(q, p) = 0.0;
                    continue;
                }
                const double theta = (aqq - app) / (2.0 * apq);
                const double t = (theta >= 0.0)
                                     ? 1.0 / (theta + std::sqrt(1.0 + theta * theta))
                                     : 1.0 / (theta - std::sqrt(1.0 + theta * theta));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double s = t * c;

                for (std::size_t k = 0; k < n; ++k) {
                    const double akp = a(k, p);
                    const double akq = a(k, q);
                    a(k, p) = c * akp - s * akq;
                    a(k, q) = s * akp + c * akq;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const double apk = a(p, k);
                    const double aqk = a(q, k);
                    a(p, k) = c * apk - s * aqk;
                    a(q, k) = s * apk + c * aqk;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const double vkp = v(k, p);
                    const double vkq = v(k, q);
                    v(k, p) = c * vkp - s * vkq;
                    v(k, q) = s * vkp + c * vkq;
                }
            }
        }
    }

    // Sort eigenvalues ascending, permuting eigenvector columns alongside.
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&](std::size_t i, std::size_t j) { return a(i, i) < a(j, j); });

    EigenDecomposition out;
    out.eigenvalues.resize(n);
    out.eigenvectors = Matrix(n, n);
    for (std::size_t j = 0; j < n; ++j) {
        out.eigenvalues[j] = a(order[j], order[j]);
        for (std::size_t i = 0; i < n; ++i) out.eigenvectors(i, j) = v(i, order[j]);
    }
    return out;
}

Matrix cholesky(const Matrix& m) {
    require_symmetric(m, 1e-8, "cholesky");
    const std::size_t n = m.rows;
    Matrix l(n, n);
    for (std::size_t j = 0; j < n; ++j) {
        double d = m(j, j);
        for (std::size_t k = 0; k < j; ++k) d -= l(j, k) * l(j, k);
        if (d <= 0.0)
            throw NumericalError("cholesky: non-positive pivot at index " + std::to_string(j), j);
        l(j, j) = std::sqrt(d);
        for (std::size_t i = j + 1; i < n; ++i) {
            double sum = m(i, j);
            for (std::size_t k = 0; k < j; ++k) sum -= l(i, k) * l(j, k);
            l(i, j) = sum / l(j, j);
        }
    }
    return l;
}

Vector cholesky_solve(const Matrix& m, const Vector& b) {
    const Matrix l = cholesky(m);
    const std::size_t n = l.rows;
    if (b.size() != n) throw StructuralError("cholesky_solve: rhs length mismatch");
    Vector y(n);
    for (std::size_t i = 0; i < n; ++i) {
        double acc = b[i];
        for (std::size_t k = 0; k < i; ++k) acc -= l(i, k) * y[k];
        y[i] = acc / l(i, i);
    }
    Vector x(n);
    for (std::size_t ii = n; ii-- > 0;) {
        double acc = y[ii];
        for (std::size_t k = ii + 1; k < n; ++k) acc -= l(k, ii) * x[k];
        x[ii] = acc / l(ii, ii);
    }
    return x;
}

Matrix spd_inverse(const Matrix& m) {
    const EigenDecomposition eig = sym_eig(m);
    const std::size_t n = m.rows;
    double max_ev = 0.0;
    for (double l : eig.eigenvalues) max_ev = std::max(max_ev, std::fabs(l));
    Vector inv(n);
    for (std::size_t i = 0; i < n; ++i) {
        double l = eig.eigenvalues[i];
        if (l < 0.0) l = 0.0;  // clamp fitting noise
        if (l <= 1e-300 || l < 1e-14 * max_ev)
            throw NumericalError("spd_inverse: singular matrix (eigenvalue " +
                                     std::to_string(eig.eigenvalues[i]) + ")",
                                 i);
        inv[i] = 1.0 / l;
    }
    // V diag(1/l) V', assembled symmetrically.
    Matrix out(n, n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i; j < n; ++j) {
            double acc = 0.0;
            for (std::size_t k = 0; k < n; ++k)
                acc += eig.eigenvectors(i, k) * inv[k] * eig.eigenvectors(j, k);
            out(i, j) = acc;
            out(j, i) = acc;
        }
    return out;
}

}  // namespace momentflow
