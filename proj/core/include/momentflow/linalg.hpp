#pragma once

#include "momentflow/matrix.hpp"

namespace momentflow {

struct EigenDecomposition {
    Vector eigenvalues;   // ascending
    Matrix eigenvectors;  // columns, orthonormal: m == V diag(l) V'
};

/// Symmetric eigendecomposition via cyclic Jacobi rotations.
///
/// Requires a square matrix symmetric within 1e-10 relative; throws
/// StructuralError otherwise. Reconstruction V diag(l) V' matches the input
/// within 1e-8 relative Frobenius.
EigenDecomposition sym_eig(const Matrix& m);

/// Cholesky factor L (lower triangular, L L' == m) of an SPD matrix.
/// Throws NumericalError carrying the pivot index when a pivot is <= 0.
Matrix cholesky(const Matrix& m);

/// Solve m x = b for symmetric positive definite m via Cholesky.
Vector cholesky_solve(const Matrix& m, const Vector& b);

/// (m)^-1 for SPD m, symmetric by construction (via eigendecomposition with
/// negative eigenvalues clamped to zero before inversion; a clamped-to-zero
/// eigenvalue makes the matrix singular and raises NumericalError).
Matrix spd_inverse(const Matrix& m);

}  // namespace momentflow
