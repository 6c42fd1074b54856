#include "loda/model.hpp"

#include <gtest/gtest.h>

#include <cmath>

#include "loda/matrix.hpp"
#include "loda/rng.hpp"

namespace {

using loda::Matrix;

loda::CosineClassifier small_classifier(double temperature, loda::Rng& rng,
                                        std::size_t d, std::size_t k) {
  auto clf = loda::make_classifier(d, temperature);
  std::vector<long> ids;
  for (std::size_t i = 0; i < k; ++i) ids.push_back(static_cast<long>(i));
  loda::add_classes(clf, ids, rng);
  return clf;
}

TEST(Extractor, RectifiesAndScales) {
  loda::FeatureExtractor fe;
  fe.P = {{1.0, 0.0}, {-1.0, 0.0}};
  fe.scale = 2.0;
  Matrix raw = {{1.0, 5.0}};
  Matrix x = loda::extract(fe, raw);
  Matrix expect = {{2.0, 0.0}};
  EXPECT_LE(loda::max_abs_diff(x, expect), 0.0);
  EXPECT_THROW(loda::extract(fe, Matrix::identity(3)), loda::ConfigError);
}

TEST(Extractor, DeterministicPerSeed) {
  auto a = loda::make_extractor(8, 6, 42);
  auto b = loda::make_extractor(8, 6, 42);
  EXPECT_TRUE(loda::bit_equal(a.P, b.P));
  auto c = loda::make_extractor(8, 6, 43);
  EXPECT_FALSE(loda::bit_equal(a.P, c.P));
}

TEST(Classifier, RegistryAndDuplicateRejection) {
  loda::Rng rng(71);
  auto clf = loda::make_classifier(4, 16.0);
  loda::add_classes(clf, {10, 11}, rng);
  EXPECT_EQ(loda::row_of(clf, 11), 1u);
  EXPECT_THROW(loda::row_of(clf, 99), loda::ConfigError);
  EXPECT_THROW(loda::add_classes(clf, {11}, rng), loda::ConfigError);
  for (std::size_t i = 0; i < 2; ++i) {
    double norm = 0.0;
    for (std::size_t j = 0; j < 4; ++j)
      norm += clf.prototypes(i, j) * clf.prototypes(i, j);
    EXPECT_NEAR(norm, 1.0, 1e-12);
  }
}

TEST(Logits, ScaleInvariantInFeatures) {
  loda::Rng rng(72);
  auto clf = small_classifier(16.0, rng, 5, 3);
  Matrix y = Matrix::gaussian(4, 5, rng);
  Matrix l1 = loda::logits(clf, y);
  Matrix l2 = loda::logits(clf, loda::scaled(y, 7.5));
  EXPECT_LE(loda::max_abs_diff(l1, l2), 1e-10);
}

TEST(Logits, ZeroNormRowGivesZeroLogits) {
  loda::Rng rng(73);
  auto clf = small_classifier(16.0, rng, 5, 3);
  Matrix y(2, 5);
  y(1, 2) = 1.0;
  Matrix l = loda::logits(clf, y);
  for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(l(0, c), 0.0);
  double row1 = 0.0;
  for (std::size_t c = 0; c < 3; ++c) row1 += std::abs(l(1, c));
  EXPECT_GT(row1, 0.0);
}

TEST(Loss, PerfectPredictionsApproachZero) {
  auto clf = loda::make_classifier(3, 100.0);
  loda::Rng rng(74);
  loda::add_classes(clf, {0, 1, 2}, rng);
  clf.prototypes = Matrix::identity(3);
  Matrix y = Matrix::identity(3);
  auto lg = loda::ce_loss_and_grads(clf, y, {0, 1, 2}, {0, 1, 2});
  EXPECT_LE(lg.loss, 1e-12);
}

TEST(Loss, EquidistantPrototypesGiveLogTwo) {
  auto clf = loda::make_classifier(2, 16.0);
  loda::Rng rng(75);
  loda::add_classes(clf, {0, 1}, rng);
  clf.prototypes = Matrix::identity(2);
  Matrix y = {{1.0, 1.0}};
  auto lg = loda::ce_loss_and_grads(clf, y, {0}, {0, 1});
  EXPECT_NEAR(lg.loss, std::log(2.0), 1e-12);
}

TEST(Loss, MeanOverBatch) {
  loda::Rng rng(76);
  auto clf = small_classifier(16.0, rng, 4, 3);
  Matrix one = Matrix::gaussian(1, 4, rng);
  Matrix twice(2, 4);
  for (std::size_t j = 0; j < 4; ++j) {
    twice(0, j) = one(0, j);
    twice(1, j) = one(0, j);
  }
  auto a = loda::ce_loss_and_grads(clf, one, {1}, {0, 1, 2});
  auto b = loda::ce_loss_and_grads(clf, twice, {1, 1}, {0, 1, 2});
  EXPECT_NEAR(a.loss, b.loss, 1e-15);
}

TEST(Loss, MaskScopesSoftmaxAndPrototypeGradients) {
  loda::Rng rng(77);
  auto clf = small_classifier(16.0, rng, 4, 5);
  Matrix y = Matrix::gaussian(3, 4, rng);
  auto lg = loda::ce_loss_and_grads(clf, y, {0, 1, 1}, {0, 1});
  for (std::size_t c = 2; c < 5; ++c)
    for (std::size_t j = 0; j < 4; ++j) EXPECT_EQ(lg.dC(c, j), 0.0);
  EXPECT_THROW(loda::ce_loss_and_grads(clf, y, {0, 1, 4}, {0, 1}),
               loda::ConfigError);
  EXPECT_THROW(loda::ce_loss_and_grads(clf, Matrix(0, 4), {}, {0, 1}),
               loda::ConfigError);
}

TEST(Loss, ZeroNormFeatureRowContributesUniformLossAndNoGradient) {
  loda::Rng rng(78);
  auto clf = small_classifier(16.0, rng, 4, 3);
  Matrix y(1, 4);
  auto lg = loda::ce_loss_and_grads(clf, y, {2}, {0, 1, 2});
  EXPECT_NEAR(lg.loss, std::log(3.0), 1e-12);
  EXPECT_EQ(loda::frobenius_norm(lg.dY), 0.0);
  EXPECT_EQ(loda::frobenius_norm(lg.dC), 0.0);
}

TEST(Loss, GradientsMatchFiniteDifferences) {
  loda::Rng rng(79);
  auto clf = small_classifier(16.0, rng, 4, 4);
  Matrix y = Matrix::gaussian(5, 4, rng);
  std::vector<long> labels = {0, 2, 1, 3, 2};
  std::vector<long> mask = {0, 1, 2, 3};
  auto lg = loda::ce_loss_and_grads(clf, y, labels, mask);
  const double h = 1e-6;
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 4; ++j) {
      double keep = y(i, j);
      y(i, j) = keep + h;
      double up = loda::ce_loss_and_grads(clf, y, labels, mask).loss;
      y(i, j) = keep - h;
      double dn = loda::ce_loss_and_grads(clf, y, labels, mask).loss;
      y(i, j) = keep;
      double num = (up - dn) / (2.0 * h);
      EXPECT_NEAR(lg.dY(i, j), num, 1e-6 * std::max(1.0, std::abs(num)));
    }
  for (std::size_t c = 0; c < 4; ++c)
    for (std::size_t j = 0; j < 4; ++j) {
      double keep = clf.prototypes(c, j);
      clf.prototypes(c, j) = keep + h;
      double up = loda::ce_loss_and_grads(clf, y, labels, mask).loss;
      clf.prototypes(c, j) = keep - h;
      double dn = loda::ce_loss_and_grads(clf, y, labels, mask).loss;
      clf.prototypes(c, j) = keep;
      double num = (up - dn) / (2.0 * h);
      EXPECT_NEAR(lg.dC(c, j), num, 1e-6 * std::max(1.0, std::abs(num)));
    }
}

}  // namespace
