#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "loda/errors.hpp"
#include "loda/matrix.hpp"

namespace loda {

/** Result of a symmetric eigendecomposition restricted to r directions. */
struct SymEigResult {
  std::vector<double> values;  ///< eigenvalues, descending
  Matrix vectors;              ///< D x r, orthonormal columns, one per value
};

namespace detail {

inline void check_finite(const Matrix& m, const std::string& what) {
  for (std::size_t i = 0; i < m.size(); ++i)
    if (!std::isfinite(m.data()[i]))
      throw NumericError("non-finite entry in " + what);
}

// Cyclic Jacobi sweeps on a symmetric matrix. A is overwritten with a
// (numerically) diagonal matrix, V accumulates the rotations so that
// A_in = V diag V^T. Deterministic: fixed sweep order, no pivot search.
inline void jacobi_diagonalize(Matrix& A, Matrix& V) {
  const std::size_t n = A.rows();
  V = Matrix::identity(n);
  if (n < 2) return;
  const double fro = frobenius_norm(A);
  const double stop = 1e-14 * (fro > 0.0 ? fro : 1.0);
  const int max_sweeps = 100;
  for (int sweep = 0; sweep < max_sweeps; ++sweep) {
    double off = 0.0;
    for (std::size_t p = 0; p + 1 < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) off += A(p, q) * A(p, q);
    if (std::sqrt(2.0 * off) <= stop) return;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        double apq = A(p, q);
        if (std::abs(apq) <= stop * 1e-2) continue;
        double theta = (A(q, q) - A(p, p)) / (2.0 * apq);
        double t;
        if (theta >= 0.0)
          t = 1.0 / (theta + std::sqrt(1.0 + theta * theta));
        else
          t = 1.0 / (theta - std::sqrt(1.0 + theta * theta));
        double c = 1.0 / std::sqrt(1.0 + t * t);
        double s = t * c;
        double app = A(p, p), aqq = A(q, q);
        A(p, p) = app - t * apq;
        A(q, q) = aqq + t * apq;
        A(p, q) = 0.0;
        A(q, p) = 0.0;
        for (std::size_t k = 0; k < n; ++k) {
          if (k == p || k == q) continue;
          double akp = A(k, p), akq = A(k, q);
          A(k, p) = c * akp - s * akq;
          A(p, k) = A(k, p);
          A(k, q) = s * akp + c * akq;
          A(q, k) = A(k, q);
        }
        for (std::size_t k = 0; k < n; ++k) {
          double vkp = V(k, p), vkq = V(k, q);
          V(k, p) = c * vkp - s * vkq;
          V(k, q) = s * vkp + c * vkq;
        }
      }
    }
  }
  throw NumericError("symmetric eigensolver did not converge");
}

// Columns are listed by descending eigenvalue; exact value ties keep the
// pre-sort index order so repeated eigenvalues come out the same every run.
inline std::vector<std::size_t> eig_order(const std::vector<double>& vals) {
  std::vector<std::size_t> idx(vals.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    if (vals[a] != vals[b]) return vals[a] > vals[b];
    return a < b;
  });
  return idx;
}

// Flips each column so its largest-magnitude entry is positive, removing
// the sign ambiguity of eigenvectors.
inline void fix_column_signs(Matrix& U) {
  for (std::size_t j = 0; j < U.cols(); ++j) {
    std::size_t arg = 0;
    double best = std::abs(U(0, j));
    for (std::size_t i = 1; i < U.rows(); ++i) {
      double a = std::abs(U(i, j));
      if (a > best) {
        best = a;
        arg = i;
      }
    }
    if (U(arg, j) < 0.0)
      for (std::size_t i = 0; i < U.rows(); ++i) U(i, j) = -U(i, j);
  }
}

}  // namespace detail

/**
 * @brief Top-r eigenpairs of a symmetric matrix.
 *
 * The input is symmetrized as (S + S^T)/2 before decomposition, so callers
 * may pass accumulations with round-off asymmetry. Eigenvalues come out
 * descending; exact ties keep index order, and each eigenvector is signed so
 * its largest-magnitude entry is positive. Pass r = S.rows() for the full
 * decomposition.
 */
inline SymEigResult sym_eig_topr(const Matrix& S, std::size_t r) {
  if (S.rows() != S.cols())
    throw ConfigError("sym_eig_topr: matrix must be square");
  const std::size_t n = S.rows();
  if (r < 1 || r > n)
    throw ConfigError("sym_eig_topr: rank " + std::to_string(r) +
                      " out of range for dimension " + std::to_string(n));
  detail::check_finite(S, "sym_eig_topr input");
  Matrix A = symmetrized(S);
  Matrix V;
  detail::jacobi_diagonalize(A, V);
  std::vector<double> diag(n);
  for (std::size_t i = 0; i < n; ++i) diag[i] = A(i, i);
  std::vector<std::size_t> order = detail::eig_order(diag);
  SymEigResult res;
  res.values.resize(r);
  res.vectors = Matrix(n, r);
  for (std::size_t j = 0; j < r; ++j) {
    res.values[j] = diag[order[j]];
    for (std::size_t i = 0; i < n; ++i) res.vectors(i, j) = V(i, order[j]);
  }
  detail::fix_column_signs(res.vectors);
  return res;
}

/**
 * @brief Cholesky factor L with S = L L^T, L lower triangular.
 *
 * Fails with the offending pivot index when S is not positive definite.
 */
inline Matrix cholesky_lower(const Matrix& S) {
  if (S.rows() != S.cols())
    throw ConfigError("cholesky_lower: matrix must be square");
  detail::check_finite(S, "cholesky_lower input");
  const std::size_t n = S.rows();
  Matrix L(n, n);
  for (std::size_t j = 0; j < n; ++j) {
    double d = S(j, j);
    for (std::size_t k = 0; k < j; ++k) d -= L(j, k) * L(j, k);
    if (d <= 0.0)
      throw NumericError("cholesky_lower: not positive definite at pivot " +
                         std::to_string(j));
    L(j, j) = std::sqrt(d);
    for (std::size_t i = j + 1; i < n; ++i) {
      double s = S(i, j);
      for (std::size_t k = 0; k < j; ++k) s -= L(i, k) * L(j, k);
      L(i, j) = s / L(j, j);
    }
  }
  return L;
}

/**
 * @brief Orthonormalizes the rows of M, preserving their span.
 *
 * Modified Gram-Schmidt with one re-orthogonalization pass. A row that
 * collapses during orthogonalization (rank-deficient input) raises an error
 * naming the row.
 */
inline Matrix thin_qr_rows(const Matrix& M) {
  if (M.rows() == 0 || M.cols() == 0)
    throw ConfigError("thin_qr_rows: empty input");
  if (M.rows() > M.cols())
    throw ConfigError("thin_qr_rows: more rows than columns");
  detail::check_finite(M, "thin_qr_rows input");
  const std::size_t r = M.rows(), d = M.cols();
  Matrix Q(r, d);
  for (std::size_t i = 0; i < r; ++i) {
    std::vector<double> v(M.row_ptr(i), M.row_ptr(i) + d);
    double orig = norm2(v);
    for (int pass = 0; pass < 2; ++pass) {
      for (std::size_t j = 0; j < i; ++j) {
        double proj = 0.0;
        for (std::size_t k = 0; k < d; ++k) proj += Q(j, k) * v[k];
        for (std::size_t k = 0; k < d; ++k) v[k] -= proj * Q(j, k);
      }
    }
    double n = norm2(v);
    if (orig == 0.0 || n <= 1e-10 * orig)
      throw NumericError("thin_qr_rows: rank-deficient row " +
                         std::to_string(i));
    for (std::size_t k = 0; k < d; ++k) Q(i, k) = v[k] / n;
  }
  return Q;
}

/** @brief Solves L X = B by forward substitution, L lower triangular. */
inline Matrix solve_lower(const Matrix& L, const Matrix& B) {
  if (L.rows() != L.cols()) throw ConfigError("solve_lower: L must be square");
  if (L.rows() != B.rows())
    throw ConfigError("solve_lower: dimension mismatch");
  const std::size_t n = L.rows(), m = B.cols();
  Matrix X(n, m);
  for (std::size_t i = 0; i < n; ++i) {
    if (L(i, i) == 0.0)
      throw NumericError("solve_lower: zero diagonal entry at row " +
                         std::to_string(i));
    for (std::size_t j = 0; j < m; ++j) {
      double s = B(i, j);
      for (std::size_t k = 0; k < i; ++k) s -= L(i, k) * X(k, j);
      X(i, j) = s / L(i, i);
    }
  }
  return X;
}

/** @brief Solves L^T X = B by back substitution, L lower triangular. */
inline Matrix solve_lower_transpose(const Matrix& L, const Matrix& B) {
  if (L.rows() != L.cols())
    throw ConfigError("solve_lower_transpose: L must be square");
  if (L.rows() != B.rows())
    throw ConfigError("solve_lower_transpose: dimension mismatch");
  const std::size_t n = L.rows(), m = B.cols();
  Matrix X(n, m);
  for (std::size_t ii = n; ii > 0; --ii) {
    std::size_t i = ii - 1;
    if (L(i, i) == 0.0)
      throw NumericError("solve_lower_transpose: zero diagonal entry at row " +
                         std::to_string(i));
    for (std::size_t j = 0; j < m; ++j) {
      double s = B(i, j);
      for (std::size_t k = i + 1; k < n; ++k) s -= L(k, i) * X(k, j);
      X(i, j) = s / L(i, i);
    }
  }
  return X;
}

}  // namespace loda
