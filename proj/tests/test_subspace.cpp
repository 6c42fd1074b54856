#include "loda/subspace.hpp"

#include <gtest/gtest.h>

#include <cmath>

#include "loda/matrix.hpp"
#include "loda/rng.hpp"

namespace {

using loda::Matrix;

Matrix random_psd(std::size_t n, loda::Rng& rng) {
  Matrix a = Matrix::gaussian(n + 4, n, rng);
  return loda::matmul_tn(a, a);
}

Matrix random_rotation(std::size_t n, loda::Rng& rng) {
  return loda::transpose(loda::thin_qr_rows(Matrix::gaussian(n, n, rng)));
}

Matrix rotated(const Matrix& r, const Matrix& s) {
  return loda::matmul(loda::matmul(r, s), loda::transpose(r));
}

double trace_ratio(const Matrix& s_new, const Matrix& past_jittered,
                   const Matrix& u) {
  return loda::projection_energy(s_new, u) /
         loda::projection_energy(past_jittered, u);
}

TEST(GeneralBases, PicksDominantSharedDirection) {
  Matrix past = {{4.0, 0.0}, {0.0, 1e-3}};
  Matrix next = {{1e-3, 0.0}, {0.0, 2.0}};
  auto g = loda::general_bases(past, next, 1);
  EXPECT_EQ(g.kind, loda::BasisKind::general);
  EXPECT_NEAR(std::abs(g.U(0, 0)), 1.0, 1e-12);
  EXPECT_NEAR(g.U(1, 0), 0.0, 1e-12);
  EXPECT_NEAR(g.spectrum[0], 4.001, 1e-12);
}

TEST(IsolatedBases, PicksNewOnlyDirection) {
  Matrix past = {{4.0, 0.0}, {0.0, 1e-3}};
  Matrix next = {{1e-3, 0.0}, {0.0, 2.0}};
  auto iso = loda::isolated_bases(past, next, 1);
  EXPECT_EQ(iso.kind, loda::BasisKind::isolated);
  double c0 = std::abs(iso.U(0, 0)), c1 = std::abs(iso.U(1, 0));
  EXPECT_GT(c1, 1e3 * c0);
}

TEST(IsolatedBases, ProportionalStatisticsGiveFlatSpectrum) {
  loda::Rng rng(51);
  Matrix past = random_psd(5, rng);
  for (std::size_t i = 0; i < 5; ++i) past(i, i) += 0.1;
  Matrix next = loda::scaled(past, 2.5);
  auto iso = loda::isolated_bases(past, next, 3, 0.0);
  for (double v : iso.spectrum) EXPECT_NEAR(v, 2.5, 1e-9);
  auto again = loda::isolated_bases(past, next, 3, 0.0);
  EXPECT_TRUE(loda::bit_equal(iso.U, again.U));
}

TEST(IsolatedBases, GeneralizedEigenResidual) {
  loda::Rng rng(52);
  for (int trial = 0; trial < 20; ++trial) {
    std::size_t d = 3 + rng.uniform_index(8);
    std::size_t r = 1 + rng.uniform_index(std::min<std::size_t>(d, 4));
    Matrix past = random_psd(d, rng);
    Matrix next = random_psd(d, rng);
    double jitter = loda::default_jitter(past);
    auto iso = loda::isolated_bases(past, next, r, jitter);
    Matrix past_j = past;
    for (std::size_t i = 0; i < d; ++i) past_j(i, i) += jitter;
    Matrix su = loda::matmul(next, iso.U);
    Matrix pu = loda::matmul(past_j, iso.U);
    double bound = 1e-7 * (loda::frobenius_norm(next) + 1.0);
    for (std::size_t j = 0; j < r; ++j) {
      double res = 0.0;
      for (std::size_t i = 0; i < d; ++i) {
        double v = su(i, j) - iso.spectrum[j] * pu(i, j);
        res += v * v;
      }
      EXPECT_LE(std::sqrt(res), bound);
    }
  }
}

TEST(IsolatedBases, TraceRatioDominatesRandomCandidates) {
  loda::Rng rng(53);
  Matrix past = random_psd(8, rng);
  Matrix next = random_psd(8, rng);
  double jitter = loda::default_jitter(past);
  auto iso = loda::isolated_bases(past, next, 3, jitter);
  Matrix past_j = past;
  for (std::size_t i = 0; i < 8; ++i) past_j(i, i) += jitter;
  double best = trace_ratio(next, past_j, iso.U);
  for (int c = 0; c < 200; ++c) {
    Matrix v = loda::transpose(loda::thin_qr_rows(Matrix::gaussian(3, 8, rng)));
    EXPECT_GE(best, trace_ratio(next, past_j, v));
  }
}

TEST(NullBaseline, BottomDirection) {
  Matrix past = {{5.0, 0.0, 0.0}, {0.0, 3.0, 0.0}, {0.0, 0.0, 1.0}};
  auto nb = loda::null_space_baseline(past, 1);
  EXPECT_EQ(nb.kind, loda::BasisKind::null_baseline);
  EXPECT_NEAR(nb.U(2, 0), 1.0, 1e-12);
  EXPECT_NEAR(nb.spectrum[0], 1.0, 1e-12);
}

TEST(NullBaseline, OrthonormalDescendingSpectrum) {
  loda::Rng rng(54);
  Matrix past = random_psd(7, rng);
  auto nb = loda::null_space_baseline(past, 3);
  Matrix gram = loda::matmul_tn(nb.U, nb.U);
  EXPECT_LE(loda::max_abs_diff(gram, Matrix::identity(3)), 1e-10);
  for (std::size_t j = 0; j + 1 < 3; ++j)
    EXPECT_GE(nb.spectrum[j], nb.spectrum[j + 1]);
}

TEST(EnergySplit, ComplementAccountsForFullTrace) {
  loda::Rng rng(55);
  Matrix past = random_psd(6, rng);
  Matrix next = random_psd(6, rng);
  Matrix sum = loda::add(past, next);
  auto full = loda::sym_eig_topr(sum, 6);
  Matrix s = random_psd(6, rng);
  Matrix top(6, 2), rest(6, 4);
  for (std::size_t i = 0; i < 6; ++i) {
    for (std::size_t j = 0; j < 2; ++j) top(i, j) = full.vectors(i, j);
    for (std::size_t j = 2; j < 6; ++j) rest(i, j - 2) = full.vectors(i, j);
  }
  double total = loda::projection_energy(s, top) + loda::projection_energy(s, rest);
  EXPECT_NEAR(total, loda::trace(s), 1e-8 * loda::trace(s));
}

TEST(RelativeEnergy, MatchesHandComputedDiagonalCase) {
  Matrix past = {{8.0, 0.0}, {0.0, 2.0}};
  Matrix next = {{1.0, 0.0}, {0.0, 4.0}};
  Matrix e2 = {{0.0}, {1.0}};
  // new share: 4/5; past share: 2/10 -> ratio 4
  EXPECT_NEAR(loda::relative_energy(next, past, e2), 4.0, 1e-12);
  EXPECT_NEAR(loda::projection_magnitude(next, e2), std::sqrt(0.8), 1e-12);
}

TEST(RelativeEnergy, UndefinedCasesRejected) {
  Matrix z(2, 2);
  Matrix s = Matrix::identity(2);
  Matrix u = {{1.0}, {0.0}};
  EXPECT_THROW(loda::relative_energy(z, s, u), loda::NumericError);
  EXPECT_THROW(loda::relative_energy(s, z, u), loda::NumericError);
  Matrix past = {{0.0, 0.0}, {0.0, 1.0}};
  EXPECT_THROW(loda::relative_energy(s, past, u), loda::NumericError);
  EXPECT_THROW(loda::projection_magnitude(z, u), loda::NumericError);
}

TEST(Subspace, RotationEquivariance) {
  loda::Rng rng(56);
  Matrix past = random_psd(6, rng);
  Matrix next = random_psd(6, rng);
  Matrix rot = random_rotation(6, rng);
  auto g0 = loda::general_bases(past, next, 2);
  auto g1 = loda::general_bases(rotated(rot, past), rotated(rot, next), 2);
  Matrix proj0 = loda::matmul_nt(g0.U, g0.U);
  Matrix proj1 = loda::matmul_nt(g1.U, g1.U);
  EXPECT_LE(loda::max_abs_diff(rotated(rot, proj0), proj1), 1e-8);
  for (std::size_t j = 0; j < 2; ++j)
    EXPECT_NEAR(g0.spectrum[j], g1.spectrum[j], 1e-9 * std::abs(g0.spectrum[j]));

  auto i0 = loda::isolated_bases(past, next, 2, 0.0);
  auto i1 = loda::isolated_bases(rotated(rot, past), rotated(rot, next), 2, 0.0);
  for (std::size_t j = 0; j < 2; ++j)
    EXPECT_NEAR(i0.spectrum[j], i1.spectrum[j], 1e-9 * std::abs(i0.spectrum[j]));
}

TEST(EnergyCsv, RoundTrip) {
  std::vector<loda::EnergyRow> rows = {
      {2, "general", 4, 0.8123456789012345, 1.5},
      {2, "isolated", 4, 0.25, 3.75},
  };
  std::string text = loda::energy_csv(rows);
  auto back = loda::parse_energy_csv(text);
  ASSERT_EQ(back.size(), rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    EXPECT_EQ(back[i].task, rows[i].task);
    EXPECT_EQ(back[i].kind, rows[i].kind);
    EXPECT_EQ(back[i].rank, rows[i].rank);
    EXPECT_EQ(back[i].projection_magnitude, rows[i].projection_magnitude);
    EXPECT_EQ(back[i].relative_energy, rows[i].relative_energy);
  }
  EXPECT_EQ(loda::energy_csv(back), text);
  EXPECT_THROW(loda::parse_energy_csv("task,kind\n"), loda::IoError);
}

}  // namespace
