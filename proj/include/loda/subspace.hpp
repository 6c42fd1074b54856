#pragma once

#include <string>
#include <vector>

#include "loda/errors.hpp"
#include "loda/format.hpp"
#include "loda/matrix.hpp"
#include "loda/numerics.hpp"
#include "loda/stats.hpp"

namespace loda {

enum class BasisKind { general, isolated, null_baseline, random_orthonormal };

inline std::string kind_name(BasisKind k) {
  switch (k) {
    case BasisKind::general: return "general";
    case BasisKind::isolated: return "isolated";
    case BasisKind::null_baseline: return "null_baseline";
    case BasisKind::random_orthonormal: return "random_orthonormal";
  }
  return "unknown";
}

struct SubspaceBases {
  BasisKind kind;
  Matrix U;                      // D x r, one basis vector per column
  std::vector<double> spectrum;  // descending, one value per column
};

// Directions most activated by past and present together: the top-r
// eigenvectors of the summed statistic.
inline SubspaceBases general_bases(const Matrix& S_past, const Matrix& S_new,
                                   std::size_t r) {
  if (!S_past.same_shape(S_new) || S_past.rows() != S_past.cols())
    throw ConfigError("general_bases: statistics must be square and same shape");
  Matrix sum = add(symmetrized(S_past), symmetrized(S_new));
  SymEigResult e = sym_eig_topr(sum, r);
  return SubspaceBases{BasisKind::general, e.vectors, e.values};
}

inline double default_jitter(const Matrix& S_past) {
  return 1e-6 * trace(S_past) / static_cast<double>(S_past.rows());
}

// Directions maximally activated by the new task relative to the past:
// whiten by the Cholesky factor of the (jittered) past statistic, take the
// top-r eigenvectors of the whitened new statistic, and map back. The
// spectrum holds the generalized eigenvalues, i.e. the per-direction
// new-to-past energy ratios.
inline SubspaceBases isolated_bases(const Matrix& S_past, const Matrix& S_new,
                                    std::size_t r, double jitter) {
  if (!S_past.same_shape(S_new) || S_past.rows() != S_past.cols())
    throw ConfigError("isolated_bases: statistics must be square and same shape");
  if (jitter < 0.0) throw ConfigError("isolated_bases: negative jitter");
  const std::size_t d = S_past.rows();
  Matrix past = symmetrized(S_past);
  for (std::size_t i = 0; i < d; ++i) past(i, i) += jitter;
  Matrix L = cholesky_lower(past);
  Matrix t1 = solve_lower(L, symmetrized(S_new));
  Matrix whitened = symmetrized(transpose(solve_lower(L, transpose(t1))));
  SymEigResult e = sym_eig_topr(whitened, r);
  Matrix U = solve_lower_transpose(L, e.vectors);
  return SubspaceBases{BasisKind::isolated, U, e.values};
}

inline SubspaceBases isolated_bases(const Matrix& S_past, const Matrix& S_new,
                                    std::size_t r) {
  return isolated_bases(S_past, S_new, r, default_jitter(S_past));
}

// Control baseline: the r least-activated directions of the past statistic.
inline SubspaceBases null_space_baseline(const Matrix& S_past, std::size_t r) {
  if (S_past.rows() != S_past.cols())
    throw ConfigError("null_space_baseline: matrix must be square");
  if (r > S_past.rows())
    throw ConfigError("null_space_baseline: rank exceeds dimension");
  SymEigResult full = sym_eig_topr(S_past, S_past.rows());
  const std::size_t d = S_past.rows();
  SubspaceBases out;
  out.kind = BasisKind::null_baseline;
  out.U = Matrix(d, r);
  out.spectrum.resize(r);
  for (std::size_t j = 0; j < r; ++j) {
    std::size_t src = d - r + j;
    out.spectrum[j] = full.values[src];
    for (std::size_t i = 0; i < d; ++i) out.U(i, j) = full.vectors(i, src);
  }
  return out;
}

inline double projection_energy(const Matrix& S, const Matrix& U) {
  return trace_energy(S, U);
}

// Energy the new task puts into span(U), normalized by total new energy,
// relative to the same quantity for the past.
inline double relative_energy(const Matrix& S_new, const Matrix& S_past,
                              const Matrix& U) {
  double tn = trace(S_new), tp = trace(S_past);
  if (tn <= 0.0 || tp <= 0.0)
    throw NumericError("relative_energy: undefined, zero total energy");
  double ep = projection_energy(S_past, U);
  if (ep <= 0.0)
    throw NumericError("relative_energy: undefined, no past energy in span");
  double en = projection_energy(S_new, U);
  return (en / tn) / (ep / tp);
}

inline double projection_magnitude(const Matrix& S, const Matrix& U) {
  double t = trace(S);
  if (t <= 0.0)
    throw NumericError("projection_magnitude: undefined, zero total energy");
  double e = projection_energy(S, U);
  return std::sqrt(std::max(0.0, e / t));
}

struct EnergyRow {
  std::size_t task;
  std::string kind;
  std::size_t rank;
  double projection_magnitude;
  double relative_energy;
};

inline std::string energy_csv(const std::vector<EnergyRow>& rows) {
  std::string out = "task,kind,rank,projection_magnitude,relative_energy\n";
  for (const auto& r : rows) {
    out += std::to_string(r.task) + "," + r.kind + "," + std::to_string(r.rank) +
           "," + format_double(r.projection_magnitude) + "," +
           format_double(r.relative_energy) + "\n";
  }
  return out;
}

inline std::vector<EnergyRow> parse_energy_csv(const std::string& text) {
  std::vector<EnergyRow> rows;
  std::istringstream is(text);
  std::string line;
  if (!std::getline(is, line) ||
      line != "task,kind,rank,projection_magnitude,relative_energy")
    throw IoError("energy csv: bad header");
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    auto f = split(line, ',');
    if (f.size() != 5)
      throw IoError("energy csv: wrong field count at line " +
                    std::to_string(lineno));
    bool ok1 = false, ok2 = false, ok3 = false, ok4 = false;
    EnergyRow r;
    r.task = static_cast<std::size_t>(parse_long(f[0], &ok1));
    r.kind = f[1];
    r.rank = static_cast<std::size_t>(parse_long(f[2], &ok2));
    r.projection_magnitude = parse_double(f[3], &ok3);
    r.relative_energy = parse_double(f[4], &ok4);
    if (!ok1 || !ok2 || !ok3 || !ok4)
      throw IoError("energy csv: bad field at line " + std::to_string(lineno));
    rows.push_back(r);
  }
  return rows;
}

}  // namespace loda
