#pragma once

#include <cstddef>
#include <sstream>
#include <string>
#include <vector>

#include "loda/adapter.hpp"
#include "loda/errors.hpp"
#include "loda/format.hpp"
#include "loda/matrix.hpp"

namespace loda {

// Per-unit rescaling of the general branch after a task is trained. Each
// row a_j of the down-projection carries two energies: e_new measured on
// the statistics of the task just learned, e_past on the accumulated
// statistics of everything before it. Shrinking the update by gamma_j
// trades interference against retention of the new fit; the quadratic
// balance lambda * e_new * (gamma - 1)^2 + e_past * gamma^2 is minimized
// in closed form at gamma = lambda * e_new / (lambda * e_new + e_past).
struct RescaleResult {
  std::vector<double> gammas;
  std::vector<double> e_new;
  std::vector<double> e_past;
  double lambda_used = 0.0;
};

inline double unit_energy(const Matrix& a_rows, std::size_t row,
                          const Matrix& s) {
  if (a_rows.cols() != s.rows() || s.rows() != s.cols())
    throw ConfigError("unit_energy: statistic width mismatch");
  const double* a = a_rows.row_ptr(row);
  double e = 0.0;
  for (std::size_t i = 0; i < s.rows(); ++i) {
    double si = 0.0;
    for (std::size_t j = 0; j < s.cols(); ++j) si += s(i, j) * a[j];
    e += a[i] * si;
  }
  return e < 0.0 ? 0.0 : e;
}

inline RescaleResult rescale_factors(const Matrix& a_general,
                                     const Matrix& s_new,
                                     const Matrix& s_past, double lambda) {
  if (lambda <= 0.0) throw ConfigError("rescale_factors: lambda must be > 0");
  RescaleResult r;
  r.lambda_used = lambda;
  std::size_t units = a_general.rows();
  r.gammas.resize(units);
  r.e_new.resize(units);
  r.e_past.resize(units);
  for (std::size_t j = 0; j < units; ++j) {
    double en = unit_energy(a_general, j, s_new);
    double ep = unit_energy(a_general, j, s_past);
    r.e_new[j] = en;
    r.e_past[j] = ep;
    double denom = lambda * en + ep;
    double g = denom <= 1e-12 ? 0.0 : lambda * en / denom;
    if (g < 0.0) g = 0.0;
    if (g > 1.0) g = 1.0;
    r.gammas[j] = g;
  }
  return r;
}

// The scalar objective the closed form minimizes, kept callable so the
// optimum can be checked against a grid scan.
inline double rescale_objective(double gamma, double e_new, double e_past,
                                double up_col_sqnorm, double lambda) {
  double dn = gamma - 1.0;
  return lambda * e_new * dn * dn * up_col_sqnorm +
         e_past * gamma * gamma * up_col_sqnorm;
}

inline Matrix integrate(const Matrix& w_prev, const DualLoRALayer& layer,
                        const RescaleResult& rescale) {
  if (!w_prev.same_shape(layer.W))
    throw ConfigError("integrate: backbone shape mismatch");
  return add(w_prev, effective_update(layer, rescale.gammas));
}

inline RescaleResult identity_rescale(std::size_t units) {
  RescaleResult r;
  r.lambda_used = 0.0;
  r.gammas.assign(units, 1.0);
  r.e_new.assign(units, 0.0);
  r.e_past.assign(units, 0.0);
  return r;
}

// Running average over per-task candidate backbones, the naive merge the
// closed form is compared against: theta_t = ((t-1) theta_{t-1} + cand) / t.
inline Matrix naive_merge_running_average(const Matrix& w_running,
                                          const Matrix& w_candidate,
                                          std::size_t task_index) {
  if (task_index < 1)
    throw ConfigError("naive_merge_running_average: task index starts at 1");
  if (!w_running.same_shape(w_candidate))
    throw ConfigError("naive_merge_running_average: shape mismatch");
  double t = static_cast<double>(task_index);
  Matrix out(w_running.rows(), w_running.cols());
  for (std::size_t i = 0; i < out.size(); ++i)
    out.data()[i] = ((t - 1.0) * w_running.data()[i] +
                     w_candidate.data()[i]) / t;
  return out;
}

struct GammaRow {
  std::size_t task = 0;
  std::size_t unit = 0;
  double e_new = 0.0;
  double e_past = 0.0;
  double gamma = 0.0;
};

inline std::string gamma_csv(const std::vector<GammaRow>& rows) {
  std::ostringstream os;
  os << "task,unit,e_new,e_past,gamma\n";
  for (const auto& r : rows)
    os << r.task << ',' << r.unit << ',' << format_double(r.e_new) << ','
       << format_double(r.e_past) << ',' << format_double(r.gamma) << '\n';
  return os.str();
}

inline std::vector<GammaRow> parse_gamma_csv(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  if (!std::getline(is, line) || line != "task,unit,e_new,e_past,gamma")
    throw IoError("gamma csv: bad header");
  std::vector<GammaRow> rows;
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    auto f = split(line, ',');
    if (f.size() != 5)
      throw IoError("gamma csv: wrong field count at line " +
                    std::to_string(lineno));
    bool ok1 = false, ok2 = false, ok3 = false, ok4 = false, ok5 = false;
    GammaRow r;
    r.task = static_cast<std::size_t>(parse_long(f[0], &ok1));
    r.unit = static_cast<std::size_t>(parse_long(f[1], &ok2));
    r.e_new = parse_double(f[2], &ok3);
    r.e_past = parse_double(f[3], &ok4);
    r.gamma = parse_double(f[4], &ok5);
    if (!ok1 || !ok2 || !ok3 || !ok4 || !ok5)
      throw IoError("gamma csv: bad field at line " + std::to_string(lineno));
    rows.push_back(r);
  }
  return rows;
}

}  // namespace loda
