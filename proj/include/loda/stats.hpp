#pragma once

#include <cstdio>
#include <sstream>
#include <string>
#include <vector>

#include "loda/errors.hpp"
#include "loda/format.hpp"
#include "loda/matrix.hpp"

namespace loda {

// Uncentered second-moment accumulator S = sum_n x_n x_n^T over feature rows.
// Rows are folded in one at a time so that splitting a batch never changes
// the summation order: accumulate(X1); accumulate(X2) is bit-identical to
// accumulate(concat(X1, X2)).
struct SecondMoment {
  explicit SecondMoment(std::size_t dim) : S(dim, dim), samples(0) {}

  Matrix S;
  std::size_t samples;

  std::size_t dim() const { return S.rows(); }
};

inline void accumulate(SecondMoment& m, const Matrix& X) {
  if (X.cols() != m.dim())
    throw ConfigError("accumulate: feature width " + std::to_string(X.cols()) +
                      " does not match statistic dimension " +
                      std::to_string(m.dim()));
  const std::size_t d = m.dim();
  for (std::size_t n = 0; n < X.rows(); ++n) {
    const double* x = X.row_ptr(n);
    for (std::size_t i = 0; i < d; ++i) {
      double xi = x[i];
      if (xi == 0.0) continue;
      double* srow = m.S.row_ptr(i);
      for (std::size_t j = 0; j < d; ++j) srow[j] += xi * x[j];
    }
  }
  m.samples += X.rows();
}

// tr(U^T S U), the energy of S captured by the columns of U.
inline double trace_energy(const Matrix& S, const Matrix& U) {
  if (S.rows() != S.cols() || S.rows() != U.rows())
    throw ConfigError("trace_energy: dimension mismatch");
  double t = 0.0;
  for (std::size_t j = 0; j < U.cols(); ++j) {
    for (std::size_t i = 0; i < S.rows(); ++i) {
      double su = 0.0;
      for (std::size_t k = 0; k < S.cols(); ++k) su += S(i, k) * U(k, j);
      t += U(i, j) * su;
    }
  }
  return t;
}

enum class RetentionMode { cumulative_only, per_task };

// Running store of finished-task statistics. In cumulative_only mode the
// memory footprint is one D x D matrix regardless of how many tasks have
// been folded in; per_task mode additionally retains each task's statistic.
// One store serves one adapted layer; configurations with several adapted
// layers hold a list of stores, one per layer.
class SecondMomentStore {
 public:
  SecondMomentStore(std::size_t dim, RetentionMode mode)
      : mode_(mode), cumulative_(dim, dim), total_samples_(0) {}

  std::size_t dim() const { return cumulative_.rows(); }
  RetentionMode mode() const { return mode_; }
  std::size_t task_count() const { return task_count_; }
  std::size_t total_samples() const { return total_samples_; }

  // Sum of statistics over all finished tasks.
  const Matrix& cumulative_past() const { return cumulative_; }

  const Matrix& per_task(std::size_t t) const {
    if (mode_ != RetentionMode::per_task)
      throw ConfigError("per-task statistics were not retained");
    if (t >= retained_.size())
      throw ConfigError("per_task: task index " + std::to_string(t) +
                        " out of range");
    return retained_[t];
  }
  std::size_t per_task_samples(std::size_t t) const {
    if (mode_ != RetentionMode::per_task)
      throw ConfigError("per-task statistics were not retained");
    return retained_samples_.at(t);
  }

  friend void finish_task(SecondMomentStore& store, const SecondMoment& m);
  friend std::string serialize_store(const SecondMomentStore& store);
  friend SecondMomentStore parse_store(const std::string& text);

 private:
  RetentionMode mode_;
  Matrix cumulative_;
  std::vector<Matrix> retained_;
  std::vector<std::size_t> retained_samples_;
  std::size_t task_count_ = 0;
  std::size_t total_samples_;
};

inline void finish_task(SecondMomentStore& store, const SecondMoment& m) {
  if (m.dim() != store.dim())
    throw ConfigError("finish_task: statistic dimension mismatch");
  axpy(store.cumulative_, 1.0, m.S);
  store.total_samples_ += m.samples;
  store.task_count_ += 1;
  if (store.mode_ == RetentionMode::per_task) {
    store.retained_.push_back(m.S);
    store.retained_samples_.push_back(m.samples);
  }
}

namespace detail {

// Fixed-width matrix block: every entry occupies exactly 25 characters, so
// serialized size depends only on shape, never on the values inside.
inline void write_matrix_fixed(std::ostream& os, const Matrix& m) {
  char buf[32];
  for (std::size_t i = 0; i < m.rows(); ++i) {
    for (std::size_t j = 0; j < m.cols(); ++j) {
      std::snprintf(buf, sizeof(buf), "%24.17g", m(i, j));
      os << buf << (j + 1 < m.cols() ? " " : "\n");
    }
  }
}

inline std::string fixed_count(std::size_t v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%020zu", v);
  return std::string(buf);
}

}  // namespace detail

inline std::string serialize_store(const SecondMomentStore& store) {
  std::ostringstream os;
  os << "loda-stats v1\n";
  os << "dim " << detail::fixed_count(store.dim()) << '\n';
  os << "mode "
     << (store.mode_ == RetentionMode::cumulative_only ? "cumulative_only"
                                                       : "per_task")
     << '\n';
  os << "tasks " << detail::fixed_count(store.task_count_) << '\n';
  os << "samples " << detail::fixed_count(store.total_samples_) << '\n';
  os << "cumulative\n";
  detail::write_matrix_fixed(os, store.cumulative_);
  if (store.mode_ == RetentionMode::per_task) {
    for (std::size_t t = 0; t < store.retained_.size(); ++t) {
      os << "task " << detail::fixed_count(t) << " samples "
         << detail::fixed_count(store.retained_samples_[t]) << '\n';
      detail::write_matrix_fixed(os, store.retained_[t]);
    }
  }
  return os.str();
}

inline SecondMomentStore parse_store(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  auto next_line = [&](const char* what) {
    if (!std::getline(is, line))
      throw IoError(std::string("statistics file truncated before ") + what);
    return line;
  };
  if (next_line("header") != "loda-stats v1")
    throw IoError("statistics file: unrecognized header");
  auto field = [&](const char* key) {
    next_line(key);
    auto parts = split(line, ' ');
    if (parts.size() < 2 || parts[0] != key)
      throw IoError(std::string("statistics file: expected field ") + key);
    bool ok = false;
    long v = parse_long(parts[1], &ok);
    if (!ok || v < 0)
      throw IoError(std::string("statistics file: bad value for ") + key);
    return static_cast<std::size_t>(v);
  };
  std::size_t dim = field("dim");
  next_line("mode");
  auto mode_parts = split(line, ' ');
  if (mode_parts.size() != 2 || mode_parts[0] != "mode")
    throw IoError("statistics file: expected mode field");
  RetentionMode mode;
  if (mode_parts[1] == "cumulative_only")
    mode = RetentionMode::cumulative_only;
  else if (mode_parts[1] == "per_task")
    mode = RetentionMode::per_task;
  else
    throw IoError("statistics file: unknown mode " + mode_parts[1]);
  std::size_t tasks = field("tasks");
  std::size_t samples = field("samples");
  if (next_line("cumulative block") != "cumulative")
    throw IoError("statistics file: expected cumulative block");
  SecondMomentStore store(dim, mode);
  store.cumulative_ = read_matrix_block(is, dim, dim, "cumulative statistic");
  store.task_count_ = tasks;
  store.total_samples_ = samples;
  if (mode == RetentionMode::per_task) {
    for (std::size_t t = 0; t < tasks; ++t) {
      next_line("per-task header");
      auto parts = split(line, ' ');
      if (parts.size() != 4 || parts[0] != "task" || parts[2] != "samples")
        throw IoError("statistics file: bad per-task header");
      bool ok = false;
      long cnt = parse_long(parts[3], &ok);
      if (!ok || cnt < 0)
        throw IoError("statistics file: bad per-task sample count");
      store.retained_.push_back(
          read_matrix_block(is, dim, dim, "per-task statistic"));
      store.retained_samples_.push_back(static_cast<std::size_t>(cnt));
    }
  }
  return store;
}

inline void save_store(const SecondMomentStore& store, const std::string& path) {
  write_text_file(path, serialize_store(store));
}

inline SecondMomentStore load_store(const std::string& path) {
  return parse_store(read_text_file(path));
}

inline std::size_t store_byte_size(const SecondMomentStore& store) {
  return serialize_store(store).size();
}

}  // namespace loda
