#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "loda/adapter.hpp"
#include "loda/errors.hpp"
#include "loda/matrix.hpp"
#include "loda/model.hpp"
#include "loda/rng.hpp"

namespace loda {

enum class Optimizer { gao, sgd };
enum class Schedule { cosine, constant };

struct TrainConfig {
  double eta = 0.1;
  std::size_t epochs = 30;
  std::size_t batch_size = 32;
  double rho_max = 0.5;
  double w_g = 0.5;
  std::uint64_t seed = 1;
  Optimizer optimizer = Optimizer::gao;
  Schedule schedule = Schedule::cosine;
  bool rho_resample_between_phases = false;
};

inline void validate(const TrainConfig& cfg) {
  if (!(cfg.eta > 0.0)) throw ConfigError("train config: eta must be positive");
  if (cfg.rho_max < 0.0)
    throw ConfigError("train config: rho_max must be nonnegative");
  if (cfg.batch_size < 1) throw ConfigError("train config: batch_size < 1");
  if (cfg.optimizer == Optimizer::gao && cfg.batch_size < 2)
    throw ConfigError("train config: the two-phase optimizer needs batch_size >= 2");
}

// Flat view over the trainable tensors. flatten/unflatten copy between the
// tensors and one contiguous parameter vector; entry order is fixed at
// construction, so flatten(unflatten(theta)) == theta exactly.
class ParamSet {
 public:
  void add(Matrix& m) { entries_.push_back({m.data(), m.size()}); }
  void add_row(Matrix& m, std::size_t row) {
    entries_.push_back({m.row_ptr(row), m.cols()});
  }

  std::size_t size() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.size;
    return n;
  }

  std::vector<double> flatten() const {
    std::vector<double> theta;
    theta.reserve(size());
    for (const auto& e : entries_)
      theta.insert(theta.end(), e.data, e.data + e.size);
    return theta;
  }

  void unflatten(const std::vector<double>& theta) {
    if (theta.size() != size())
      throw ConfigError("param set: vector length mismatch");
    std::size_t at = 0;
    for (const auto& e : entries_) {
      std::copy(theta.begin() + at, theta.begin() + at + e.size, e.data);
      at += e.size;
    }
  }

 private:
  struct Entry {
    double* data;
    std::size_t size;
  };
  std::vector<Entry> entries_;
};

struct EvalResult {
  double loss = 0.0;
  std::vector<double> grad;
};

// Evaluates loss and gradient at an arbitrary parameter point over a subset
// of sample indices.
using GradFn = std::function<EvalResult(const std::vector<double>&,
                                        const std::vector<std::size_t>&)>;

struct LabelSplit {
  std::vector<std::size_t> first;
  std::vector<std::size_t> second;
  bool degenerate = false;  // fewer than two labels in the batch
};

// Partitions a batch into two label-disjoint subsets: the batch's classes
// are shuffled and the first ceil(K/2) go to one side, the rest to the
// other. A single-class batch cannot be split and is flagged degenerate.
inline LabelSplit split_label_disjoint(const std::vector<std::size_t>& batch,
                                       const std::vector<long>& labels,
                                       Rng& rng) {
  std::vector<long> classes;
  for (std::size_t idx : batch) {
    long lab = labels.at(idx);
    if (std::find(classes.begin(), classes.end(), lab) == classes.end())
      classes.push_back(lab);
  }
  std::sort(classes.begin(), classes.end());
  LabelSplit out;
  if (classes.size() < 2) {
    out.first = batch;
    out.degenerate = true;
    return out;
  }
  rng.shuffle(classes);
  std::size_t take = (classes.size() + 1) / 2;
  std::vector<long> side1(classes.begin(), classes.begin() + take);
  std::sort(side1.begin(), side1.end());
  for (std::size_t idx : batch) {
    bool in_first = std::binary_search(side1.begin(), side1.end(), labels[idx]);
    (in_first ? out.first : out.second).push_back(idx);
  }
  return out;
}

namespace detail {

inline void check_grad_finite(const EvalResult& e, std::size_t expect,
                              const char* stage) {
  if (e.grad.size() != expect)
    throw ConfigError(std::string("gradient length mismatch in ") + stage);
  if (!std::isfinite(e.loss))
    throw NumericError(std::string("non-finite loss in ") + stage);
  for (double g : e.grad)
    if (!std::isfinite(g))
      throw NumericError(std::string("non-finite gradient in ") + stage);
}

inline double squared_norm(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return s;
}

inline double cosine(const std::vector<double>& a,
                     const std::vector<double>& b) {
  double na = squared_norm(a), nb = squared_norm(b);
  if (na <= 0.0 || nb <= 0.0) return 0.0;
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) d += a[i] * b[i];
  return d / std::sqrt(na * nb);
}

}  // namespace detail

// One plain gradient step on the given subset.
inline std::vector<double> sgd_step(const std::vector<double>& theta,
                                    const std::vector<std::size_t>& subset,
                                    double eta, const GradFn& grad_fn) {
  EvalResult e = grad_fn(theta, subset);
  detail::check_grad_finite(e, theta.size(), "sgd_step");
  std::vector<double> out = theta;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= eta * e.grad[i];
  return out;
}

// Two-phase step with cross-subset perturbations. Each phase perturbs the
// parameters against the opposite subset's normalized gradient before taking
// the descent step:
//   theta+  = theta  - eta grad(theta  - rho g2/||g2||^2, B1)
//   theta++ = theta+ - eta grad(theta+ - rho g1/||g1||^2, B2)
// The perturbation is skipped when the opposite gradient is numerically
// zero (||g||^2 <= 1e-12) or rho is zero, which makes the rho = 0 case
// bit-equivalent to two sequential plain steps.
inline std::vector<double> gao_step(const std::vector<double>& theta,
                                    const std::vector<std::size_t>& b1,
                                    const std::vector<std::size_t>& b2,
                                    double eta, double rho1, double rho2,
                                    const GradFn& grad_fn) {
  if (b1.empty() || b2.empty())
    throw ConfigError("gao_step: both subsets must be non-empty");
  auto phase = [&](const std::vector<double>& at,
                   const std::vector<std::size_t>& against,
                   const std::vector<std::size_t>& descend, double rho) {
    std::vector<double> point = at;
    if (rho != 0.0) {
      EvalResult opp = grad_fn(at, against);
      detail::check_grad_finite(opp, at.size(), "gao_step perturbation");
      double n2 = detail::squared_norm(opp.grad);
      if (n2 > 1e-12) {
        double c = rho / n2;
        for (std::size_t i = 0; i < point.size(); ++i)
          point[i] -= c * opp.grad[i];
      }
    }
    EvalResult outer = grad_fn(point, descend);
    detail::check_grad_finite(outer, at.size(), "gao_step descent");
    std::vector<double> next = at;
    for (std::size_t i = 0; i < next.size(); ++i)
      next[i] -= eta * outer.grad[i];
    return next;
  };
  std::vector<double> mid = phase(theta, b2, b1, rho1);
  return phase(mid, b1, b2, rho2);
}

inline std::vector<double> gao_step(const std::vector<double>& theta,
                                    const std::vector<std::size_t>& b1,
                                    const std::vector<std::size_t>& b2,
                                    double eta, double rho,
                                    const GradFn& grad_fn) {
  return gao_step(theta, b1, b2, eta, rho, rho, grad_fn);
}

struct StepRecord {
  std::size_t epoch;
  std::size_t step;
  double loss;
  double grad_cosine;
  double eta;
  double rho;
};

struct TrainLog {
  std::vector<StepRecord> steps;
  std::vector<double> epoch_loss;
  std::vector<double> epoch_grad_cosine;

  double final_epoch_grad_cosine() const {
    return epoch_grad_cosine.empty() ? 0.0 : epoch_grad_cosine.back();
  }
};

// Minibatch training loop over one task. Batches are drawn from a seeded
// shuffle each epoch; every optimizer step advances the cosine annealing of
// eta toward zero by one tick. The shuffle, the label split, and the rho
// draw each consume their own derived random stream, so the batch sequence
// is identical for both optimizers under the same seed.
inline TrainLog train_task(ParamSet& params, const std::vector<long>& labels,
                           const TrainConfig& cfg, const GradFn& grad_fn) {
  validate(cfg);
  const std::size_t n = labels.size();
  if (n == 0) throw ConfigError("train_task: empty dataset");
  Rng shuffle_rng(mix_seed(cfg.seed, 101));
  Rng split_rng(mix_seed(cfg.seed, 202));
  Rng rho_rng(mix_seed(cfg.seed, 303));
  std::vector<double> theta = params.flatten();
  TrainLog log;
  const std::size_t steps_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
  const std::size_t total_ticks = cfg.epochs * steps_per_epoch;
  std::size_t tick = 0;
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    shuffle_rng.shuffle(order);
    double loss_sum = 0.0, cos_sum = 0.0;
    std::size_t steps = 0;
    for (std::size_t start = 0; start < n; start += cfg.batch_size) {
      std::size_t stop = std::min(n, start + cfg.batch_size);
      std::vector<std::size_t> batch(order.begin() + start,
                                     order.begin() + stop);
      double eta = cfg.eta;
      if (cfg.schedule == Schedule::cosine)
        eta = 0.5 * cfg.eta *
              (1.0 + std::cos(3.14159265358979323846 * static_cast<double>(tick) /
                              static_cast<double>(total_ticks)));
      LabelSplit sp = split_label_disjoint(batch, labels, split_rng);
      double rho = 0.0;
      double step_loss, step_cos = 0.0;
      if (cfg.optimizer == Optimizer::gao) {
        rho = rho_rng.uniform(0.0, cfg.rho_max);
        double rho2 = cfg.rho_resample_between_phases
                          ? rho_rng.uniform(0.0, cfg.rho_max)
                          : rho;
        if (sp.degenerate) {
          EvalResult whole = grad_fn(theta, batch);
          detail::check_grad_finite(whole, theta.size(), "train_task");
          step_loss = whole.loss;
          theta = sgd_step(theta, batch, eta, grad_fn);
        } else {
          EvalResult g1 = grad_fn(theta, sp.first);
          EvalResult g2 = grad_fn(theta, sp.second);
          detail::check_grad_finite(g1, theta.size(), "train_task");
          detail::check_grad_finite(g2, theta.size(), "train_task");
          double n1 = static_cast<double>(sp.first.size());
          double n2 = static_cast<double>(sp.second.size());
          step_loss = (n1 * g1.loss + n2 * g2.loss) / (n1 + n2);
          step_cos = detail::cosine(g1.grad, g2.grad);
          theta = gao_step(theta, sp.first, sp.second, eta, rho, rho2, grad_fn);
        }
      } else {
        EvalResult whole = grad_fn(theta, batch);
        detail::check_grad_finite(whole, theta.size(), "train_task");
        step_loss = whole.loss;
        if (!sp.degenerate) {
          EvalResult g1 = grad_fn(theta, sp.first);
          EvalResult g2 = grad_fn(theta, sp.second);
          step_cos = detail::cosine(g1.grad, g2.grad);
        }
        std::vector<double> next = theta;
        for (std::size_t i = 0; i < next.size(); ++i)
          next[i] -= eta * whole.grad[i];
        theta = next;
      }
      log.steps.push_back({epoch, steps, step_loss, step_cos, eta, rho});
      loss_sum += step_loss;
      cos_sum += step_cos;
      ++steps;
      ++tick;
    }
    log.epoch_loss.push_back(loss_sum / static_cast<double>(steps));
    log.epoch_grad_cosine.push_back(cos_sum / static_cast<double>(steps));
  }
  params.unflatten(theta);
  return log;
}

// Composite evaluation for the adapted layer plus classifier on one task's
// training features. Builds the parameter view (up projections, optionally
// the isolated down projection, current-task prototypes) and the matching
// gradient closure for the training loop.
struct TrainProblem {
  DualLoRALayer* layer = nullptr;
  CosineClassifier* clf = nullptr;
  const Matrix* features = nullptr;
  std::vector<long> labels;
  std::vector<long> mask;
  bool train_isolated_down = false;

  ParamSet params() const {
    ParamSet ps;
    if (layer->general_enabled) ps.add(layer->general.B);
    if (layer->isolated_enabled) ps.add(layer->isolated.B);
    if (train_isolated_down && layer->isolated_enabled)
      ps.add(layer->isolated.A);
    for (long id : mask) ps.add_row(clf->prototypes, row_of(*clf, id));
    return ps;
  }

  GradFn grad_fn() const {
    return [this](const std::vector<double>& theta,
                  const std::vector<std::size_t>& subset) -> EvalResult {
      ParamSet ps = params();
      ps.unflatten(theta);
      Matrix xs(subset.size(), features->cols());
      std::vector<long> labs(subset.size());
      for (std::size_t i = 0; i < subset.size(); ++i) {
        const double* src = features->row_ptr(subset[i]);
        std::copy(src, src + features->cols(), xs.row_ptr(i));
        labs[i] = labels.at(subset[i]);
      }
      Matrix y = forward(*layer, xs);
      LossGrads lg = ce_loss_and_grads(*clf, y, labs, mask);
      UpGradients ug = grad_up(*layer, xs, lg.dY);
      EvalResult out;
      out.loss = lg.loss;
      out.grad.reserve(theta.size());
      auto append = [&](const Matrix& m) {
        out.grad.insert(out.grad.end(), m.data(), m.data() + m.size());
      };
      if (layer->general_enabled) append(ug.dB_general);
      if (layer->isolated_enabled) append(ug.dB_isolated);
      if (train_isolated_down && layer->isolated_enabled) {
        Matrix gtx = matmul_tn(lg.dY, xs);
        Matrix da = matmul_tn(layer->isolated.B, gtx);
        append(da);
      }
      for (long id : mask) {
        std::size_t row = row_of(*clf, id);
        out.grad.insert(out.grad.end(), lg.dC.row_ptr(row),
                        lg.dC.row_ptr(row) + lg.dC.cols());
      }
      return out;
    };
  }
};

}  // namespace loda
