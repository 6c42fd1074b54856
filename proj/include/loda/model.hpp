#pragma once

#include <algorithm>
#include <cmath>
#include <unordered_map>
#include <vector>

#include "loda/errors.hpp"
#include "loda/matrix.hpp"
#include "loda/rng.hpp"

namespace loda {

// Frozen random-projection feature map: X = relu(raw P^T) * scale. Built
// once per experiment; never trained, so feature statistics are stationary
// per task.
struct FeatureExtractor {
  Matrix P;  // D x d_raw
  double scale = 1.0;
};

// Rows of P decay geometrically from 1 down to spectral_floor, giving the
// feature second moment a steep, well-separated lower spectrum the way a
// trained backbone does. With equal row norms the weakest feature directions
// are near-degenerate and their eigenvectors are sampling artifacts, which
// poisons any diagnostic built on least-energy directions. The floor must
// stay moderate: pushing it toward zero starves the low-energy directions
// of absolute signal, and an adapter branch anchored there cannot learn.
inline FeatureExtractor make_extractor(std::size_t d_raw, std::size_t d_feat,
                                       std::uint64_t seed,
                                       double spectral_floor = 0.1) {
  FeatureExtractor fe;
  Rng rng(seed);
  fe.P = Matrix::gaussian(d_feat, d_raw, rng);
  for (std::size_t i = 0; i < d_feat; ++i) {
    double frac = d_feat > 1
        ? static_cast<double>(i) / static_cast<double>(d_feat - 1)
        : 0.0;
    double gain = std::pow(spectral_floor, frac);
    for (std::size_t j = 0; j < d_raw; ++j) fe.P(i, j) *= gain;
  }
  fe.scale = 1.0 / std::sqrt(static_cast<double>(d_raw));
  return fe;
}

inline Matrix extract(const FeatureExtractor& fe, const Matrix& raw) {
  if (raw.cols() != fe.P.cols())
    throw ConfigError("extract: raw width does not match projection");
  Matrix pre = matmul_nt(raw, fe.P);
  for (std::size_t i = 0; i < pre.size(); ++i) {
    double v = pre.data()[i];
    pre.data()[i] = v > 0.0 ? v * fe.scale : 0.0;
  }
  return pre;
}

// Prototype-per-class cosine classifier. Rows are registered incrementally
// as tasks introduce classes; the registry maps global class ids to rows.
struct CosineClassifier {
  Matrix prototypes;            // K x D'
  double temperature = 16.0;
  std::vector<long> class_ids;  // class_ids[row] = global id

  std::size_t count() const { return class_ids.size(); }
};

inline CosineClassifier make_classifier(std::size_t d_out, double temperature) {
  CosineClassifier clf;
  clf.prototypes = Matrix(0, d_out);
  clf.temperature = temperature;
  return clf;
}

inline std::size_t row_of(const CosineClassifier& clf, long class_id) {
  for (std::size_t i = 0; i < clf.class_ids.size(); ++i)
    if (clf.class_ids[i] == class_id) return i;
  throw ConfigError("classifier: unknown class id " + std::to_string(class_id));
}

// New classes start as random unit prototypes.
inline void add_classes(CosineClassifier& clf, const std::vector<long>& ids,
                        Rng& rng) {
  const std::size_t d = clf.prototypes.cols();
  Matrix grown(clf.count() + ids.size(), d);
  for (std::size_t i = 0; i < clf.count(); ++i)
    for (std::size_t j = 0; j < d; ++j) grown(i, j) = clf.prototypes(i, j);
  for (std::size_t n = 0; n < ids.size(); ++n) {
    for (long known : clf.class_ids)
      if (known == ids[n])
        throw ConfigError("classifier: class id " + std::to_string(ids[n]) +
                          " already registered");
    std::vector<double> v(d);
    double norm = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      v[j] = rng.normal();
      norm += v[j] * v[j];
    }
    norm = std::sqrt(norm);
    for (std::size_t j = 0; j < d; ++j)
      grown(clf.count() + n, j) = v[j] / norm;
  }
  for (std::size_t n = 0; n < ids.size(); ++n) clf.class_ids.push_back(ids[n]);
  clf.prototypes = grown;
}

// Scaled cosine logits over every registered class. A zero-norm feature row
// gets an all-zero logit row; a zero-norm prototype contributes zero logits.
inline Matrix logits(const CosineClassifier& clf, const Matrix& Y) {
  if (Y.cols() != clf.prototypes.cols())
    throw ConfigError("logits: feature width mismatch");
  const std::size_t n = Y.rows(), k = clf.count(), d = Y.cols();
  Matrix out(n, k);
  std::vector<double> pnorm(k);
  for (std::size_t c = 0; c < k; ++c) {
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j)
      s += clf.prototypes(c, j) * clf.prototypes(c, j);
    pnorm[c] = std::sqrt(s);
  }
  for (std::size_t i = 0; i < n; ++i) {
    const double* y = Y.row_ptr(i);
    double ny = 0.0;
    for (std::size_t j = 0; j < d; ++j) ny += y[j] * y[j];
    ny = std::sqrt(ny);
    if (ny <= 1e-12) continue;
    for (std::size_t c = 0; c < k; ++c) {
      if (pnorm[c] <= 1e-12) continue;
      double dp = 0.0;
      for (std::size_t j = 0; j < d; ++j) dp += y[j] * clf.prototypes(c, j);
      out(i, c) = clf.temperature * dp / (ny * pnorm[c]);
    }
  }
  return out;
}

struct LossGrads {
  double loss = 0.0;
  Matrix dY;  // N x D'
  Matrix dC;  // K x D', exactly zero outside the mask
};

// Mean cross entropy over the batch with the softmax restricted to the
// masked class set (training is scoped to the current task's classes).
inline LossGrads ce_loss_and_grads(const CosineClassifier& clf, const Matrix& Y,
                                   const std::vector<long>& labels,
                                   const std::vector<long>& mask) {
  const std::size_t n = Y.rows(), d = Y.cols();
  if (n == 0) throw ConfigError("ce_loss_and_grads: empty batch");
  if (labels.size() != n)
    throw ConfigError("ce_loss_and_grads: label count mismatch");
  if (mask.empty()) throw ConfigError("ce_loss_and_grads: empty class mask");
  if (d != clf.prototypes.cols())
    throw ConfigError("ce_loss_and_grads: feature width mismatch");
  const std::size_t m = mask.size();
  std::vector<std::size_t> rows(m);
  std::unordered_map<long, std::size_t> pos;
  for (std::size_t j = 0; j < m; ++j) {
    rows[j] = row_of(clf, mask[j]);
    pos[mask[j]] = j;
  }
  for (long lab : labels)
    if (!pos.count(lab))
      throw ConfigError("ce_loss_and_grads: label " + std::to_string(lab) +
                        " outside the class mask");
  std::vector<double> pnorm(m);
  for (std::size_t j = 0; j < m; ++j) {
    double s = 0.0;
    for (std::size_t c = 0; c < d; ++c)
      s += clf.prototypes(rows[j], c) * clf.prototypes(rows[j], c);
    pnorm[j] = std::sqrt(s);
  }
  LossGrads out;
  out.dY = Matrix(n, d);
  out.dC = Matrix(clf.count(), d);
  const double s = clf.temperature;
  std::vector<double> z(m), p(m), cosv(m);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double* y = Y.row_ptr(i);
    double ny = 0.0;
    for (std::size_t c = 0; c < d; ++c) ny += y[c] * y[c];
    ny = std::sqrt(ny);
    if (ny <= 1e-12) {
      total += std::log(static_cast<double>(m));
      continue;
    }
    for (std::size_t j = 0; j < m; ++j) {
      if (pnorm[j] <= 1e-12) {
        cosv[j] = 0.0;
        z[j] = 0.0;
        continue;
      }
      double dp = 0.0;
      const double* c = clf.prototypes.row_ptr(rows[j]);
      for (std::size_t q = 0; q < d; ++q) dp += y[q] * c[q];
      cosv[j] = dp / (ny * pnorm[j]);
      z[j] = s * cosv[j];
    }
    double zmax = z[0];
    for (std::size_t j = 1; j < m; ++j) zmax = std::max(zmax, z[j]);
    double denom = 0.0;
    for (std::size_t j = 0; j < m; ++j) {
      p[j] = std::exp(z[j] - zmax);
      denom += p[j];
    }
    for (std::size_t j = 0; j < m; ++j) p[j] /= denom;
    std::size_t lab = pos[labels[i]];
    total += -(z[lab] - zmax) + std::log(denom);
    for (std::size_t j = 0; j < m; ++j) {
      double q = p[j] - (j == lab ? 1.0 : 0.0);
      if (pnorm[j] <= 1e-12) continue;
      const double* c = clf.prototypes.row_ptr(rows[j]);
      double* dy = out.dY.row_ptr(i);
      double* dc = out.dC.row_ptr(rows[j]);
      for (std::size_t q2 = 0; q2 < d; ++q2) {
        double v = c[q2] / pnorm[j];
        double u = y[q2] / ny;
        dy[q2] += q * s * (v - cosv[j] * u) / ny;
        dc[q2] += q * s * (u - cosv[j] * v) / pnorm[j];
      }
    }
  }
  double inv = 1.0 / static_cast<double>(n);
  out.loss = total * inv;
  for (std::size_t i = 0; i < out.dY.size(); ++i) out.dY.data()[i] *= inv;
  for (std::size_t i = 0; i < out.dC.size(); ++i) out.dC.data()[i] *= inv;
  return out;
}

}  // namespace loda
