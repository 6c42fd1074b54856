#include "loda/trainer.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "loda/adapter.hpp"
#include "loda/matrix.hpp"
#include "loda/model.hpp"
#include "loda/rng.hpp"

namespace {

using loda::Matrix;

// coupled two-parameter quadratic: subset {0} drives 0.5 (t0 + t1)^2,
// subset {1} drives 0.5 (t0 - t1)^2
loda::GradFn coupled_quadratic() {
  return [](const std::vector<double>& t,
            const std::vector<std::size_t>& subset) -> loda::EvalResult {
    loda::EvalResult e;
    e.grad.resize(2);
    if (subset.at(0) == 0) {
      double s = t[0] + t[1];
      e.loss = 0.5 * s * s;
      e.grad[0] = s;
      e.grad[1] = s;
    } else {
      double d = t[0] - t[1];
      e.loss = 0.5 * d * d;
      e.grad[0] = d;
      e.grad[1] = -d;
    }
    return e;
  };
}

struct GlueProblem {
  loda::DualLoRALayer layer;
  loda::CosineClassifier clf;
  Matrix features;
  std::vector<long> labels;
  loda::TrainProblem problem;
};

// two linearly separable classes through a fixed layer
GlueProblem make_glue(std::uint64_t seed, bool train_down = false) {
  GlueProblem g;
  loda::Rng rng(seed);
  g.layer = loda::make_layer(Matrix::gaussian(4, 6, rng), 2, 0.5, true, true);
  g.layer.general.A = loda::thin_qr_rows(Matrix::gaussian(2, 6, rng));
  g.layer.isolated.A = loda::thin_qr_rows(Matrix::gaussian(2, 6, rng));
  g.clf = loda::make_classifier(4, 16.0);
  loda::add_classes(g.clf, {0, 1}, rng);
  g.features = Matrix(24, 6);
  g.labels.resize(24);
  for (std::size_t i = 0; i < 24; ++i) {
    long lab = static_cast<long>(i % 2);
    g.labels[i] = lab;
    for (std::size_t j = 0; j < 6; ++j)
      g.features(i, j) = 0.3 * rng.normal() + (lab == 0 ? 1.0 : -1.0) *
                         (j < 3 ? 1.0 : -0.5);
  }
  g.problem.layer = &g.layer;
  g.problem.clf = &g.clf;
  g.problem.features = &g.features;
  g.problem.labels = g.labels;
  g.problem.mask = {0, 1};
  g.problem.train_isolated_down = train_down;
  return g;
}

TEST(ParamSet, FlattenUnflattenIdentity) {
  loda::Rng rng(81);
  Matrix a = Matrix::gaussian(3, 4, rng);
  Matrix b = Matrix::gaussian(2, 5, rng);
  loda::ParamSet ps;
  ps.add(a);
  ps.add_row(b, 1);
  EXPECT_EQ(ps.size(), 12u + 5u);
  auto theta = ps.flatten();
  std::vector<double> moved = theta;
  for (double& v : moved) v += 1.0;
  ps.unflatten(moved);
  EXPECT_EQ(a(0, 0), theta[0] + 1.0);
  EXPECT_EQ(b(1, 4), theta[16] + 1.0);
  ps.unflatten(theta);
  auto again = ps.flatten();
  EXPECT_EQ(again, theta);
  EXPECT_THROW(ps.unflatten(std::vector<double>(3)), loda::ConfigError);
}

TEST(SplitLabelDisjoint, RoutesAllSamplesDisjointly) {
  loda::Rng rng(82);
  std::vector<long> labels;
  std::vector<std::size_t> batch;
  for (std::size_t i = 0; i < 16; ++i) {
    labels.push_back(static_cast<long>(i % 4));
    batch.push_back(i);
  }
  auto sp = loda::split_label_disjoint(batch, labels, rng);
  EXPECT_FALSE(sp.degenerate);
  EXPECT_EQ(sp.first.size() + sp.second.size(), 16u);
  std::set<long> c1, c2;
  for (auto i : sp.first) c1.insert(labels[i]);
  for (auto i : sp.second) c2.insert(labels[i]);
  EXPECT_EQ(c1.size(), 2u);
  EXPECT_EQ(c2.size(), 2u);
  for (long c : c1) EXPECT_EQ(c2.count(c), 0u);
}

TEST(SplitLabelDisjoint, OddClassCountFavorsFirstSide) {
  loda::Rng rng(83);
  std::vector<long> labels = {0, 1, 2, 0, 1, 2};
  std::vector<std::size_t> batch = {0, 1, 2, 3, 4, 5};
  auto sp = loda::split_label_disjoint(batch, labels, rng);
  std::set<long> c1, c2;
  for (auto i : sp.first) c1.insert(labels[i]);
  for (auto i : sp.second) c2.insert(labels[i]);
  EXPECT_EQ(c1.size(), 2u);
  EXPECT_EQ(c2.size(), 1u);
}

TEST(SplitLabelDisjoint, SingleClassIsDegenerate) {
  loda::Rng rng(84);
  std::vector<long> labels = {7, 7, 7};
  std::vector<std::size_t> batch = {0, 1, 2};
  auto sp = loda::split_label_disjoint(batch, labels, rng);
  EXPECT_TRUE(sp.degenerate);
  EXPECT_EQ(sp.first.size(), 3u);
  EXPECT_TRUE(sp.second.empty());
}

TEST(GaoStep, MatchesHandComputedQuadratic) {
  auto fn = coupled_quadratic();
  std::vector<double> theta = {1.0, 0.25};
  double eta = 0.1, rho = 0.05;
  std::vector<std::size_t> b1 = {0}, b2 = {1};

  // phase 1: perturb against subset {1}, descend on subset {0}
  double d = theta[0] - theta[1];
  double n2 = 2.0 * d * d;
  double p0 = theta[0] - rho * d / n2;
  double p1 = theta[1] + rho * d / n2;
  double s = p0 + p1;
  double t0 = theta[0] - eta * s;
  double t1 = theta[1] - eta * s;
  // phase 2: perturb against subset {0}, descend on subset {1}
  double s2 = t0 + t1;
  double m2 = 2.0 * s2 * s2;
  double q0 = t0 - rho * s2 / m2;
  double q1 = t1 - rho * s2 / m2;
  double d2 = q0 - q1;
  double e0 = t0 - eta * d2;
  double e1 = t1 + eta * d2;

  auto out = loda::gao_step(theta, b1, b2, eta, rho, fn);
  EXPECT_NEAR(out[0], e0, 1e-12);
  EXPECT_NEAR(out[1], e1, 1e-12);
}

TEST(GaoStep, RhoZeroBitEqualsTwoSgdSteps) {
  auto fn = coupled_quadratic();
  std::vector<double> theta = {0.8, -0.3};
  std::vector<std::size_t> b1 = {0}, b2 = {1};
  auto gao = loda::gao_step(theta, b1, b2, 0.07, 0.0, fn);
  auto sgd = loda::sgd_step(loda::sgd_step(theta, b1, 0.07, fn), b2, 0.07, fn);
  ASSERT_EQ(gao.size(), sgd.size());
  for (std::size_t i = 0; i < gao.size(); ++i) EXPECT_EQ(gao[i], sgd[i]);
}

TEST(GaoStep, SkipsPerturbationOnVanishingGradient) {
  // subset {1} has identically zero gradient; the perturbation must be
  // skipped so the step equals plain descent on subset {0}
  loda::GradFn fn = [](const std::vector<double>& t,
                       const std::vector<std::size_t>& subset) {
    loda::EvalResult e;
    e.grad.resize(1);
    if (subset.at(0) == 0) {
      e.loss = 0.5 * t[0] * t[0];
      e.grad[0] = t[0];
    }
    return e;
  };
  std::vector<double> theta = {2.0};
  auto out = loda::gao_step(theta, {0}, {1}, 0.1, 0.5, fn);
  auto plain = loda::sgd_step(loda::sgd_step(theta, {0}, 0.1, fn), {1}, 0.1, fn);
  EXPECT_EQ(out[0], plain[0]);
  EXPECT_THROW(loda::gao_step(theta, {}, {1}, 0.1, 0.5, fn),
               loda::ConfigError);
}

TEST(GaoStep, RejectsNonFiniteGradient) {
  loda::GradFn fn = [](const std::vector<double>&,
                       const std::vector<std::size_t>&) {
    loda::EvalResult e;
    e.grad = {std::nan("")};
    return e;
  };
  std::vector<double> theta = {1.0};
  EXPECT_THROW(loda::gao_step(theta, {0}, {1}, 0.1, 0.5, fn),
               loda::NumericError);
  EXPECT_THROW(loda::sgd_step(theta, {0}, 0.1, fn), loda::NumericError);
}

TEST(TrainConfig, Validation) {
  loda::TrainConfig cfg;
  cfg.eta = 0.0;
  EXPECT_THROW(loda::validate(cfg), loda::ConfigError);
  cfg.eta = 0.1;
  cfg.batch_size = 1;
  cfg.optimizer = loda::Optimizer::gao;
  EXPECT_THROW(loda::validate(cfg), loda::ConfigError);
  cfg.optimizer = loda::Optimizer::sgd;
  EXPECT_NO_THROW(loda::validate(cfg));
  cfg.rho_max = -0.1;
  EXPECT_THROW(loda::validate(cfg), loda::ConfigError);
}

TEST(TrainTask, ZeroEpochsLeavesParametersUntouched) {
  auto g = make_glue(91);
  auto ps = g.problem.params();
  auto before = ps.flatten();
  loda::TrainConfig cfg;
  cfg.epochs = 0;
  cfg.seed = 5;
  auto log = loda::train_task(ps, g.problem.labels, cfg, g.problem.grad_fn());
  EXPECT_TRUE(log.steps.empty());
  EXPECT_EQ(ps.flatten(), before);
}

TEST(TrainTask, LossDecreasesOnSeparableProblem) {
  for (auto opt : {loda::Optimizer::gao, loda::Optimizer::sgd}) {
    auto g = make_glue(92);
    auto ps = g.problem.params();
    auto fn = g.problem.grad_fn();
    auto theta0 = ps.flatten();
    std::vector<std::size_t> all(g.labels.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    double loss0 = fn(theta0, all).loss;
    loda::TrainConfig cfg;
    cfg.epochs = 8;
    cfg.batch_size = 8;
    cfg.eta = 0.05;
    cfg.optimizer = opt;
    cfg.seed = 7;
    loda::train_task(ps, g.problem.labels, cfg, fn);
    double loss1 = fn(ps.flatten(), all).loss;
    EXPECT_LT(loss1, 0.8 * loss0);
  }
}

TEST(TrainTask, DeterministicAcrossRuns) {
  auto run = [](loda::Optimizer opt) {
    auto g = make_glue(93);
    auto ps = g.problem.params();
    loda::TrainConfig cfg;
    cfg.epochs = 4;
    cfg.batch_size = 8;
    cfg.optimizer = opt;
    cfg.seed = 11;
    loda::train_task(ps, g.problem.labels, cfg, g.problem.grad_fn());
    return ps.flatten();
  };
  for (auto opt : {loda::Optimizer::gao, loda::Optimizer::sgd}) {
    auto a = run(opt), b = run(opt);
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i], b[i]);
  }
}

TEST(TrainTask, FrozenTensorsUntouched) {
  auto g = make_glue(94);
  auto frozen = loda::frozen_checksum(g.layer);
  auto ps = g.problem.params();
  loda::TrainConfig cfg;
  cfg.epochs = 5;
  cfg.batch_size = 8;
  cfg.seed = 3;
  loda::train_task(ps, g.problem.labels, cfg, g.problem.grad_fn());
  EXPECT_EQ(loda::frozen_checksum(g.layer), frozen);
}

TEST(TrainTask, BaselineModeTrainsIsolatedDown) {
  auto g = make_glue(95, true);
  Matrix a_before = g.layer.isolated.A;
  auto ps = g.problem.params();
  loda::TrainConfig cfg;
  cfg.epochs = 5;
  cfg.batch_size = 8;
  cfg.optimizer = loda::Optimizer::sgd;
  cfg.seed = 3;
  loda::train_task(ps, g.problem.labels, cfg, g.problem.grad_fn());
  EXPECT_FALSE(loda::bit_equal(a_before, g.layer.isolated.A));
}

TEST(TrainTask, ScheduleAnnealsFromEtaTowardZero) {
  auto g = make_glue(96);
  auto ps = g.problem.params();
  loda::TrainConfig cfg;
  cfg.epochs = 6;
  cfg.batch_size = 8;
  cfg.eta = 0.04;
  cfg.seed = 13;
  auto log = loda::train_task(ps, g.problem.labels, cfg, g.problem.grad_fn());
  ASSERT_FALSE(log.steps.empty());
  EXPECT_DOUBLE_EQ(log.steps.front().eta, cfg.eta);
  for (std::size_t i = 1; i < log.steps.size(); ++i)
    EXPECT_LE(log.steps[i].eta, log.steps[i - 1].eta + 1e-15);
  EXPECT_LT(log.steps.back().eta, 0.1 * cfg.eta);
  for (const auto& s : log.steps) {
    EXPECT_GE(s.rho, 0.0);
    EXPECT_LE(s.rho, cfg.rho_max);
  }
  EXPECT_EQ(log.epoch_loss.size(), cfg.epochs);
}

TEST(TrainTask, SingleClassDataFallsBackToPlainDescent) {
  auto g = make_glue(97);
  // relabel every sample to one class; mask shrinks accordingly
  g.problem.labels.assign(g.labels.size(), 0);
  g.problem.mask = {0};
  auto ps = g.problem.params();
  loda::TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 8;
  cfg.seed = 17;
  auto log =
      loda::train_task(ps, g.problem.labels, cfg, g.problem.grad_fn());
  for (const auto& s : log.steps) EXPECT_EQ(s.grad_cosine, 0.0);
}

}  // namespace
