#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "loda/errors.hpp"
#include "loda/format.hpp"
#include "loda/matrix.hpp"
#include "loda/numerics.hpp"
#include "loda/rng.hpp"

namespace loda {

// Synthetic stream of classification tasks with controllable overlap. A
// fixed orthonormal frame is split into one block shared by every task and
// one private block per task. Each class mean mixes a shared direction
// with a private one, weighted kappa against 1 - kappa, so kappa = 1 puts
// all tasks in the same subspace and kappa = 0 makes the mean geometry of
// different tasks mutually orthogonal. Shared directions concentrate
// around one anchor direction of the block: every task re-activates the
// same dominant directions, the way tasks drawn from a common pretrained
// feature space do. On top of the anchor, each class loads one axis of
// the shared block picked by its global id modulo d_shared (weight
// mode_gain). The pool of axes is smaller than the class count, so later
// tasks re-use axes that earlier classes already depend on: sequential
// training competes for the same shared directions instead of settling
// into disjoint corners, the way fine-tuning on a common backbone does.
// Each task also drifts off the anchor along its own direction of the
// shared block (strength task_drift), and classes scatter around the
// drifted task anchor (strength shared_spread). Samples are the mean plus
// isotropic Gaussian noise.
struct StreamConfig {
  std::size_t tasks = 5;
  std::size_t classes_per_task = 4;
  std::size_t train_per_class = 100;
  std::size_t test_per_class = 50;
  std::size_t d_raw = 32;
  std::size_t d_shared = 8;
  std::size_t d_private = 4;
  double sigma = 0.3;
  double kappa = 0.6;
  double mean_scale = 0.8;
  double task_drift = 0.0;
  double shared_spread = 0.5;
  double mode_gain = 2.0;
  std::uint64_t seed = 1;
};

inline void validate(const StreamConfig& cfg) {
  if (cfg.tasks < 1) throw ConfigError("stream: need at least one task");
  if (cfg.classes_per_task < 1)
    throw ConfigError("stream: need at least one class per task");
  if (cfg.train_per_class < 1 || cfg.test_per_class < 1)
    throw ConfigError("stream: need train and test samples per class");
  if (cfg.d_shared < 1 || cfg.d_private < 1)
    throw ConfigError("stream: shared and private blocks must be nonempty");
  if (cfg.d_shared + cfg.tasks * cfg.d_private > cfg.d_raw)
    throw ConfigError(
        "stream: d_shared + tasks * d_private exceeds the raw dimension");
  if (cfg.sigma < 0.0) throw ConfigError("stream: sigma must be >= 0");
  if (cfg.kappa < 0.0 || cfg.kappa > 1.0)
    throw ConfigError("stream: kappa must lie in [0, 1]");
  if (cfg.mean_scale <= 0.0)
    throw ConfigError("stream: mean_scale must be > 0");
  if (cfg.task_drift < 0.0)
    throw ConfigError("stream: task_drift must be >= 0");
  if (cfg.shared_spread < 0.0)
    throw ConfigError("stream: shared_spread must be >= 0");
  if (cfg.mode_gain < 0.0)
    throw ConfigError("stream: mode_gain must be >= 0");
}

struct LabeledSet {
  Matrix x;
  std::vector<long> labels;
};

struct TaskDataset {
  std::size_t task_id = 0;
  std::vector<long> class_ids;
  Matrix class_means;  // one row per class; filled by the generator only
  LabeledSet train;
  LabeledSet test;
};

struct Stream {
  std::size_t dim = 0;
  std::vector<TaskDataset> tasks;
};

namespace detail {

inline void normalize_in_place(std::vector<double>& v) {
  double n = 0.0;
  for (double x : v) n += x * x;
  n = std::sqrt(n);
  if (n <= 0.0) throw NumericError("stream: degenerate direction draw");
  for (double& x : v) x /= n;
}

}  // namespace detail

inline Stream generate_stream(const StreamConfig& cfg) {
  validate(cfg);
  std::size_t frame_rows = cfg.d_shared + cfg.tasks * cfg.d_private;
  Rng frame_rng(mix_seed(cfg.seed, 7));
  Matrix frame = thin_qr_rows(Matrix::gaussian(frame_rows, cfg.d_raw,
                                               frame_rng));
  std::vector<double> anchor(cfg.d_shared);
  for (double& v : anchor) v = frame_rng.normal();
  detail::normalize_in_place(anchor);

  Stream stream;
  stream.dim = cfg.d_raw;
  for (std::size_t t = 1; t <= cfg.tasks; ++t) {
    Rng rng(mix_seed(cfg.seed, 1000 + t));
    TaskDataset task;
    task.task_id = t;
    task.class_means = Matrix(cfg.classes_per_task, cfg.d_raw);
    task.train.x = Matrix(cfg.classes_per_task * cfg.train_per_class,
                          cfg.d_raw);
    task.test.x = Matrix(cfg.classes_per_task * cfg.test_per_class,
                         cfg.d_raw);
    std::size_t private_base = cfg.d_shared + (t - 1) * cfg.d_private;

    // the task's drift direction lies in the shared block, orthogonal to
    // the anchor; with d_shared = 1 no such direction exists and the task
    // anchor stays put
    std::vector<double> drift(cfg.d_shared);
    for (double& v : drift) v = rng.normal();
    double along = 0.0;
    for (std::size_t i = 0; i < cfg.d_shared; ++i)
      along += drift[i] * anchor[i];
    double drift_norm2 = 0.0;
    for (std::size_t i = 0; i < cfg.d_shared; ++i) {
      drift[i] -= along * anchor[i];
      drift_norm2 += drift[i] * drift[i];
    }
    std::vector<double> task_anchor(anchor);
    if (drift_norm2 > 1e-24) {
      double inv = cfg.task_drift / std::sqrt(drift_norm2);
      for (std::size_t i = 0; i < cfg.d_shared; ++i)
        task_anchor[i] += inv * drift[i];
      detail::normalize_in_place(task_anchor);
    }

    for (std::size_t c = 0; c < cfg.classes_per_task; ++c) {
      long class_id = static_cast<long>((t - 1) * cfg.classes_per_task + c);
      task.class_ids.push_back(class_id);

      // draw order per class is fixed and independent of kappa: shared
      // direction, private direction, train noise, test noise
      std::vector<double> z(cfg.d_shared), w(cfg.d_private);
      for (double& v : z) v = rng.normal();
      for (double& v : w) v = rng.normal();
      for (std::size_t i = 0; i < cfg.d_shared; ++i)
        z[i] = task_anchor[i] + cfg.shared_spread * z[i];
      z[static_cast<std::size_t>(class_id) % cfg.d_shared] += cfg.mode_gain;
      detail::normalize_in_place(z);
      detail::normalize_in_place(w);

      double* mean = task.class_means.row_ptr(c);
      for (std::size_t i = 0; i < cfg.d_shared; ++i)
        for (std::size_t j = 0; j < cfg.d_raw; ++j)
          mean[j] += cfg.kappa * z[i] * frame(i, j);
      for (std::size_t i = 0; i < cfg.d_private; ++i)
        for (std::size_t j = 0; j < cfg.d_raw; ++j)
          mean[j] += (1.0 - cfg.kappa) * w[i] * frame(private_base + i, j);
      double norm = 0.0;
      for (std::size_t j = 0; j < cfg.d_raw; ++j) norm += mean[j] * mean[j];
      norm = std::sqrt(norm);
      if (norm <= 0.0) throw NumericError("stream: zero class mean");
      for (std::size_t j = 0; j < cfg.d_raw; ++j)
        mean[j] *= cfg.mean_scale / norm;

      for (std::size_t s = 0; s < cfg.train_per_class; ++s) {
        std::size_t row = c * cfg.train_per_class + s;
        task.train.labels.push_back(class_id);
        double* x = task.train.x.row_ptr(row);
        for (std::size_t j = 0; j < cfg.d_raw; ++j)
          x[j] = mean[j] + cfg.sigma * rng.normal();
      }
      for (std::size_t s = 0; s < cfg.test_per_class; ++s) {
        std::size_t row = c * cfg.test_per_class + s;
        task.test.labels.push_back(class_id);
        double* x = task.test.x.row_ptr(row);
        for (std::size_t j = 0; j < cfg.d_raw; ++j)
          x[j] = mean[j] + cfg.sigma * rng.normal();
      }
    }
    stream.tasks.push_back(std::move(task));
  }
  return stream;
}

inline std::string stream_csv(const Stream& stream) {
  std::ostringstream os;
  os << "task_id,class_id,split";
  for (std::size_t j = 0; j < stream.dim; ++j) os << ",f" << j;
  os << '\n';
  auto emit = [&](const TaskDataset& task, const LabeledSet& set,
                  const char* split) {
    for (std::size_t i = 0; i < set.x.rows(); ++i) {
      os << task.task_id << ',' << set.labels[i] << ',' << split;
      for (std::size_t j = 0; j < stream.dim; ++j)
        os << ',' << format_double(set.x(i, j));
      os << '\n';
    }
  };
  for (const auto& task : stream.tasks) {
    emit(task, task.train, "train");
    emit(task, task.test, "test");
  }
  return os.str();
}

inline Stream parse_stream_csv(const std::string& text) {
  Stream stream;
  if (text.empty()) return stream;
  std::istringstream is(text);
  std::string line;
  if (!std::getline(is, line)) return stream;
  auto head = split(line, ',');
  if (head.size() < 4 || head[0] != "task_id" || head[1] != "class_id" ||
      head[2] != "split")
    throw IoError("stream csv: bad header");
  std::size_t dim = head.size() - 3;
  for (std::size_t j = 0; j < dim; ++j)
    if (head[3 + j] != "f" + std::to_string(j))
      throw IoError("stream csv: bad header");
  stream.dim = dim;

  struct Pending {
    std::vector<double> train_flat, test_flat;
    std::vector<long> train_labels, test_labels;
  };
  std::map<std::size_t, Pending> by_task;
  std::map<long, std::size_t> class_owner;
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    auto f = split(line, ',');
    if (f.size() != 3 + dim)
      throw IoError("stream csv: wrong field count at line " +
                    std::to_string(lineno));
    bool ok1 = false, ok2 = false;
    long task_id = parse_long(f[0], &ok1);
    long class_id = parse_long(f[1], &ok2);
    if (!ok1 || task_id < 1)
      throw IoError("stream csv: bad task id at line " +
                    std::to_string(lineno));
    if (!ok2)
      throw IoError("stream csv: bad class id at line " +
                    std::to_string(lineno));
    bool is_train = f[2] == "train";
    if (!is_train && f[2] != "test")
      throw IoError("stream csv: unknown split at line " +
                    std::to_string(lineno));
    auto owner = class_owner.find(class_id);
    if (owner == class_owner.end()) {
      class_owner[class_id] = static_cast<std::size_t>(task_id);
    } else if (owner->second != static_cast<std::size_t>(task_id)) {
      throw IoError("stream csv: class " + std::to_string(class_id) +
                    " appears in more than one task");
    }
    auto& p = by_task[static_cast<std::size_t>(task_id)];
    auto& flat = is_train ? p.train_flat : p.test_flat;
    auto& labels = is_train ? p.train_labels : p.test_labels;
    labels.push_back(class_id);
    for (std::size_t j = 0; j < dim; ++j) {
      bool okf = false;
      flat.push_back(parse_double(f[3 + j], &okf));
      if (!okf)
        throw IoError("stream csv: bad feature at line " +
                      std::to_string(lineno));
    }
  }

  for (auto& [task_id, p] : by_task) {
    TaskDataset task;
    task.task_id = task_id;
    auto build = [&](std::vector<double>& flat, std::vector<long>& labels,
                     LabeledSet& set) {
      set.x = Matrix(labels.size(), dim);
      std::copy(flat.begin(), flat.end(), set.x.data());
      set.labels = std::move(labels);
    };
    build(p.train_flat, p.train_labels, task.train);
    build(p.test_flat, p.test_labels, task.test);
    std::vector<long> ids = task.train.labels;
    ids.insert(ids.end(), task.test.labels.begin(), task.test.labels.end());
    std::sort(ids.begin(), ids.end());
    ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
    task.class_ids = std::move(ids);
    stream.tasks.push_back(std::move(task));
  }
  return stream;
}

inline void save_stream(const std::string& path, const Stream& stream) {
  write_text_file(path, stream_csv(stream));
}

inline Stream load_stream(const std::string& path) {
  return parse_stream_csv(read_text_file(path));
}

}  // namespace loda
