#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "loda/adapter.hpp"
#include "loda/errors.hpp"
#include "loda/format.hpp"
#include "loda/matrix.hpp"
#include "loda/model.hpp"
#include "loda/numerics.hpp"
#include "loda/recalib.hpp"
#include "loda/rng.hpp"
#include "loda/stats.hpp"
#include "loda/stream.hpp"
#include "loda/subspace.hpp"
#include "loda/trainer.hpp"

namespace loda {

enum class Preset {
  baseline_single_lora,
  general_only,
  isolated_only,
  dual_no_gao,
  full_loda,
};

enum class IsolationMethod { loda_isolated, null_baseline, random_orthonormal };
enum class MergeMethod { closed_form, identity, running_average };

inline const char* preset_name(Preset p) {
  switch (p) {
    case Preset::baseline_single_lora: return "baseline_single_lora";
    case Preset::general_only: return "general_only";
    case Preset::isolated_only: return "isolated_only";
    case Preset::dual_no_gao: return "dual_no_gao";
    case Preset::full_loda: return "full_loda";
  }
  return "?";
}

inline Preset parse_preset(const std::string& name) {
  for (Preset p : {Preset::baseline_single_lora, Preset::general_only,
                   Preset::isolated_only, Preset::dual_no_gao,
                   Preset::full_loda})
    if (name == preset_name(p)) return p;
  throw ConfigError("unknown preset '" + name +
                    "'; valid: baseline_single_lora, general_only, "
                    "isolated_only, dual_no_gao, full_loda");
}

inline const char* isolation_name(IsolationMethod m) {
  switch (m) {
    case IsolationMethod::loda_isolated: return "loda_isolated";
    case IsolationMethod::null_baseline: return "null_baseline";
    case IsolationMethod::random_orthonormal: return "random_orthonormal";
  }
  return "?";
}

inline IsolationMethod parse_isolation(const std::string& name) {
  for (IsolationMethod m :
       {IsolationMethod::loda_isolated, IsolationMethod::null_baseline,
        IsolationMethod::random_orthonormal})
    if (name == isolation_name(m)) return m;
  throw ConfigError("unknown isolation method '" + name +
                    "'; valid: loda_isolated, null_baseline, "
                    "random_orthonormal");
}

inline const char* merge_name(MergeMethod m) {
  switch (m) {
    case MergeMethod::closed_form: return "closed_form";
    case MergeMethod::identity: return "identity";
    case MergeMethod::running_average: return "running_average";
  }
  return "?";
}

inline MergeMethod parse_merge(const std::string& name) {
  for (MergeMethod m : {MergeMethod::closed_form, MergeMethod::identity,
                        MergeMethod::running_average})
    if (name == merge_name(m)) return m;
  throw ConfigError("unknown merge method '" + name +
                    "'; valid: closed_form, identity, running_average");
}

inline const char* optimizer_name(Optimizer o) {
  return o == Optimizer::gao ? "gao" : "sgd";
}

inline Optimizer parse_optimizer(const std::string& name) {
  if (name == "gao") return Optimizer::gao;
  if (name == "sgd") return Optimizer::sgd;
  throw ConfigError("unknown optimizer '" + name + "'; valid: gao, sgd");
}

inline const char* schedule_name(Schedule s) {
  return s == Schedule::cosine ? "cosine" : "constant";
}

inline Schedule parse_schedule(const std::string& name) {
  if (name == "cosine") return Schedule::cosine;
  if (name == "constant") return Schedule::constant;
  throw ConfigError("unknown schedule '" + name +
                    "'; valid: cosine, constant");
}

struct ExperimentConfig {
  StreamConfig stream;
  std::string ingest_path;  // when set, load the stream from this CSV

  std::size_t feature_dim = 32;  // extractor output width, adapter input
  std::size_t output_dim = 32;   // adapted layer output width
  std::size_t rank = 4;
  double w_g = 0.5;
  double lambda = 3.0;
  double temperature = 16.0;

  TrainConfig train;
  Preset preset = Preset::full_loda;
  IsolationMethod isolation = IsolationMethod::loda_isolated;
  MergeMethod merge = MergeMethod::closed_form;
  bool general_enabled = true;
  bool isolated_enabled = true;
  bool train_isolated_down = false;

  std::size_t interp_steps = 0;
  bool oracle_eval = false;  // plumbing check: predictions leak the labels
  std::uint64_t seed = 1;
  std::string outdir;  // consumed by the CLI, not part of the experiment
};

// Expands the named preset into concrete branch, optimizer, and merge
// flags. Callers may still override individual fields afterwards; the
// runner executes whatever flags it is handed. baseline_single_lora is the
// naive sequential baseline: one free-subspace adapter (trainable A and B,
// plain SGD) carried across all sessions, so new-task training rewrites
// whatever the same low-rank pair encoded before.
inline void apply_preset(ExperimentConfig& cfg) {
  switch (cfg.preset) {
    case Preset::baseline_single_lora:
      cfg.general_enabled = false;
      cfg.isolated_enabled = true;
      cfg.train_isolated_down = true;
      cfg.train.optimizer = Optimizer::sgd;
      cfg.merge = MergeMethod::identity;
      break;
    case Preset::general_only:
      cfg.general_enabled = true;
      cfg.isolated_enabled = false;
      cfg.train_isolated_down = false;
      cfg.train.optimizer = Optimizer::sgd;
      cfg.merge = MergeMethod::closed_form;
      break;
    case Preset::isolated_only:
      cfg.general_enabled = false;
      cfg.isolated_enabled = true;
      cfg.train_isolated_down = false;
      cfg.train.optimizer = Optimizer::sgd;
      cfg.merge = MergeMethod::identity;
      break;
    case Preset::dual_no_gao:
      cfg.general_enabled = true;
      cfg.isolated_enabled = true;
      cfg.train_isolated_down = false;
      cfg.train.optimizer = Optimizer::sgd;
      cfg.merge = MergeMethod::closed_form;
      break;
    case Preset::full_loda:
      cfg.general_enabled = true;
      cfg.isolated_enabled = true;
      cfg.train_isolated_down = false;
      cfg.train.optimizer = Optimizer::gao;
      cfg.merge = MergeMethod::closed_form;
      break;
  }
}

inline void validate_experiment(const ExperimentConfig& cfg) {
  if (cfg.feature_dim < 1 || cfg.output_dim < 1)
    throw ConfigError("experiment: model dimensions must be positive");
  if (cfg.rank < 1 ||
      cfg.rank > std::min(cfg.feature_dim, cfg.output_dim))
    throw ConfigError("experiment: rank must lie in [1, min(dims)]");
  if (cfg.w_g <= 0.0 || cfg.w_g > 1.0)
    throw ConfigError("experiment: w_g must lie in (0, 1]");
  if (cfg.lambda <= 0.0) throw ConfigError("experiment: lambda must be > 0");
  if (cfg.temperature <= 0.0)
    throw ConfigError("experiment: temperature must be > 0");
  if (!cfg.general_enabled && !cfg.isolated_enabled)
    throw ConfigError("experiment: at least one branch must be enabled");
  if (cfg.train_isolated_down && !cfg.isolated_enabled)
    throw ConfigError(
        "experiment: train_isolated_down needs the isolated branch");
  validate(cfg.train);
  if (cfg.ingest_path.empty()) validate(cfg.stream);
}

inline nlohmann::ordered_json config_json(const ExperimentConfig& cfg) {
  nlohmann::ordered_json j;
  j["preset"] = preset_name(cfg.preset);
  j["isolation"] = isolation_name(cfg.isolation);
  j["merge"] = merge_name(cfg.merge);
  j["general_enabled"] = cfg.general_enabled;
  j["isolated_enabled"] = cfg.isolated_enabled;
  j["train_isolated_down"] = cfg.train_isolated_down;
  j["feature_dim"] = cfg.feature_dim;
  j["output_dim"] = cfg.output_dim;
  j["rank"] = cfg.rank;
  j["w_g"] = cfg.w_g;
  j["lambda"] = cfg.lambda;
  j["temperature"] = cfg.temperature;
  j["interp_steps"] = cfg.interp_steps;
  j["oracle_eval"] = cfg.oracle_eval;
  j["seed"] = cfg.seed;
  j["train"] = {
      {"eta", cfg.train.eta},
      {"epochs", cfg.train.epochs},
      {"batch_size", cfg.train.batch_size},
      {"rho_max", cfg.train.rho_max},
      {"optimizer", optimizer_name(cfg.train.optimizer)},
      {"schedule", schedule_name(cfg.train.schedule)},
      {"rho_resample_between_phases", cfg.train.rho_resample_between_phases},
  };
  if (!cfg.ingest_path.empty()) {
    j["ingest_path"] = cfg.ingest_path;
  } else {
    j["stream"] = {
        {"tasks", cfg.stream.tasks},
        {"classes_per_task", cfg.stream.classes_per_task},
        {"train_per_class", cfg.stream.train_per_class},
        {"test_per_class", cfg.stream.test_per_class},
        {"d_raw", cfg.stream.d_raw},
        {"d_shared", cfg.stream.d_shared},
        {"d_private", cfg.stream.d_private},
        {"sigma", cfg.stream.sigma},
        {"kappa", cfg.stream.kappa},
        {"mean_scale", cfg.stream.mean_scale},
        {"task_drift", cfg.stream.task_drift},
        {"shared_spread", cfg.stream.shared_spread},
        {"mode_gain", cfg.stream.mode_gain},
        {"seed", cfg.stream.seed},
    };
  }
  return j;
}

inline std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

inline std::string config_fingerprint(const ExperimentConfig& cfg) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(fnv1a(config_json(cfg).dump())));
  return std::string(buf);
}

// Parses the same shape config_json emits. Unknown keys are rejected so
// typos in config files fail loudly instead of silently using defaults.
inline ExperimentConfig parse_config_json(const std::string& text) {
  auto j = nlohmann::json::parse(text, nullptr, false);
  if (j.is_discarded() || !j.is_object())
    throw ConfigError("config file is not a JSON object");
  ExperimentConfig cfg;
  try {
    for (const auto& [key, value] : j.items()) {
      if (key == "schema_version") {
        if (value.get<int>() != 1)
          throw ConfigError("config file: unsupported schema_version");
      } else if (key == "preset") {
        cfg.preset = parse_preset(value.get<std::string>());
        apply_preset(cfg);
      } else {
        continue;
      }
    }
    for (const auto& [key, value] : j.items()) {
      if (key == "schema_version" || key == "preset") {
      } else if (key == "isolation") {
        cfg.isolation = parse_isolation(value.get<std::string>());
      } else if (key == "merge") {
        cfg.merge = parse_merge(value.get<std::string>());
      } else if (key == "general_enabled") {
        cfg.general_enabled = value.get<bool>();
      } else if (key == "isolated_enabled") {
        cfg.isolated_enabled = value.get<bool>();
      } else if (key == "train_isolated_down") {
        cfg.train_isolated_down = value.get<bool>();
      } else if (key == "feature_dim") {
        cfg.feature_dim = value.get<std::size_t>();
      } else if (key == "output_dim") {
        cfg.output_dim = value.get<std::size_t>();
      } else if (key == "rank") {
        cfg.rank = value.get<std::size_t>();
      } else if (key == "w_g") {
        cfg.w_g = value.get<double>();
      } else if (key == "lambda") {
        cfg.lambda = value.get<double>();
      } else if (key == "temperature") {
        cfg.temperature = value.get<double>();
      } else if (key == "interp_steps") {
        cfg.interp_steps = value.get<std::size_t>();
      } else if (key == "oracle_eval") {
        cfg.oracle_eval = value.get<bool>();
      } else if (key == "seed") {
        cfg.seed = value.get<std::uint64_t>();
      } else if (key == "ingest_path") {
        cfg.ingest_path = value.get<std::string>();
      } else if (key == "train") {
        for (const auto& [tk, tv] : value.items()) {
          if (tk == "eta") cfg.train.eta = tv.get<double>();
          else if (tk == "epochs") cfg.train.epochs = tv.get<std::size_t>();
          else if (tk == "batch_size")
            cfg.train.batch_size = tv.get<std::size_t>();
          else if (tk == "rho_max") cfg.train.rho_max = tv.get<double>();
          else if (tk == "optimizer")
            cfg.train.optimizer = parse_optimizer(tv.get<std::string>());
          else if (tk == "schedule")
            cfg.train.schedule = parse_schedule(tv.get<std::string>());
          else if (tk == "rho_resample_between_phases")
            cfg.train.rho_resample_between_phases = tv.get<bool>();
          else
            throw ConfigError("config file: unknown train key '" + tk + "'");
        }
      } else if (key == "stream") {
        for (const auto& [sk, sv] : value.items()) {
          if (sk == "tasks") cfg.stream.tasks = sv.get<std::size_t>();
          else if (sk == "classes_per_task")
            cfg.stream.classes_per_task = sv.get<std::size_t>();
          else if (sk == "train_per_class")
            cfg.stream.train_per_class = sv.get<std::size_t>();
          else if (sk == "test_per_class")
            cfg.stream.test_per_class = sv.get<std::size_t>();
          else if (sk == "d_raw") cfg.stream.d_raw = sv.get<std::size_t>();
          else if (sk == "d_shared")
            cfg.stream.d_shared = sv.get<std::size_t>();
          else if (sk == "d_private")
            cfg.stream.d_private = sv.get<std::size_t>();
          else if (sk == "sigma") cfg.stream.sigma = sv.get<double>();
          else if (sk == "kappa") cfg.stream.kappa = sv.get<double>();
          else if (sk == "mean_scale")
            cfg.stream.mean_scale = sv.get<double>();
          else if (sk == "task_drift")
            cfg.stream.task_drift = sv.get<double>();
          else if (sk == "shared_spread")
            cfg.stream.shared_spread = sv.get<double>();
          else if (sk == "mode_gain")
            cfg.stream.mode_gain = sv.get<double>();
          else if (sk == "seed") cfg.stream.seed = sv.get<std::uint64_t>();
          else
            throw ConfigError("config file: unknown stream key '" + sk +
                              "'");
        }
      } else {
        throw ConfigError("config file: unknown key '" + key + "'");
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config file: ") + e.what());
  }
  return cfg;
}

struct SessionEval {
  std::size_t session = 0;
  std::vector<double> accuracy;  // percent, task i's test set, i = 1..t
  std::vector<std::size_t> n_correct;
  std::vector<std::size_t> n_test;
  double all_accuracy = 0.0;  // over the union of seen test sets
  std::size_t all_correct = 0;
  std::size_t all_test = 0;
};

struct TrainLogRow {
  std::size_t task = 0;
  std::size_t epoch = 0;
  std::size_t step = 0;
  double loss = 0.0;
  double grad_cosine = 0.0;
  double eta = 0.0;
  double rho = 0.0;
};

struct InterpRow {
  std::size_t session = 0;
  double alpha = 0.0;
  double accuracy_past = 0.0;
  double accuracy_new = 0.0;
};

struct MetricsReport {
  ExperimentConfig config;
  std::vector<SessionEval> sessions;
  double a_last = 0.0;
  double a_avg = 0.0;
  std::vector<EnergyRow> energy;
  std::vector<GammaRow> gammas;
  std::vector<TrainLogRow> train_log;
  std::vector<InterpRow> interp;
  double wall_seconds = 0.0;  // stdout diagnostics only, never in files
};

namespace detail {

template <class F>
auto run_stage(std::size_t task, const char* name, F&& f) -> decltype(f()) {
  auto tag = [&](const char* what) {
    return "task " + std::to_string(task) + ", " + name + ": " + what;
  };
  try {
    return f();
  } catch (const ConfigError& e) {
    throw ConfigError(tag(e.what()));
  } catch (const NumericError& e) {
    throw NumericError(tag(e.what()));
  } catch (const IoError& e) {
    throw IoError(tag(e.what()));
  }
}

inline Matrix random_orthonormal_basis(std::size_t dim, std::size_t rank,
                                       std::uint64_t seed) {
  Rng rng(seed);
  return transpose(thin_qr_rows(Matrix::gaussian(rank, dim, rng)));
}

}  // namespace detail

struct EvalCounts {
  std::size_t correct = 0;
  std::size_t total = 0;
};

inline EvalCounts evaluate_set(const Matrix& w, const FeatureExtractor& fe,
                               const CosineClassifier& clf,
                               const LabeledSet& set, bool oracle_eval) {
  if (set.x.rows() == 0) throw ConfigError("evaluate: empty test set");
  EvalCounts out;
  out.total = set.x.rows();
  if (oracle_eval) {
    out.correct = out.total;
    return out;
  }
  Matrix f = extract(fe, set.x);
  Matrix y = matmul_nt(f, w);
  Matrix lg = logits(clf, y);
  for (std::size_t i = 0; i < lg.rows(); ++i) {
    std::size_t arg = 0;
    for (std::size_t k = 1; k < lg.cols(); ++k)
      if (lg(i, k) > lg(i, arg)) arg = k;
    if (clf.class_ids[arg] == set.labels[i]) ++out.correct;
  }
  return out;
}

inline double percent(std::size_t correct, std::size_t total) {
  return 100.0 * static_cast<double>(correct) / static_cast<double>(total);
}

inline void append_energy_rows(std::vector<EnergyRow>& rows, std::size_t task,
                               const Matrix& s_new, const Matrix& s_past,
                               std::size_t rank, std::size_t dim,
                               std::uint64_t seed) {
  auto add = [&](const SubspaceBases& b) {
    rows.push_back({task, kind_name(b.kind), rank,
                    projection_magnitude(s_new, b.U),
                    relative_energy(s_new, s_past, b.U)});
  };
  add(general_bases(s_past, s_new, rank));
  add(isolated_bases(s_past, s_new, rank));
  add(null_space_baseline(s_past, rank));
  SubspaceBases rnd;
  rnd.kind = BasisKind::random_orthonormal;
  rnd.U = detail::random_orthonormal_basis(dim, rank,
                                           mix_seed(seed, 800 + task));
  add(rnd);
}

inline MetricsReport run_experiment(const ExperimentConfig& cfg_in) {
  ExperimentConfig cfg = cfg_in;
  validate_experiment(cfg);

  MetricsReport report;
  report.config = cfg;

  Stream stream = cfg.ingest_path.empty() ? generate_stream(cfg.stream)
                                          : load_stream(cfg.ingest_path);
  if (stream.tasks.empty()) throw ConfigError("experiment: stream is empty");

  FeatureExtractor fe =
      make_extractor(stream.dim, cfg.feature_dim, mix_seed(cfg.seed, 11));
  CosineClassifier clf = make_classifier(cfg.output_dim, cfg.temperature);
  Rng proto_rng(mix_seed(cfg.seed, 12));
  Rng backbone_rng(mix_seed(cfg.seed, 10));
  // stand-in for a pretrained backbone: fixed random linear layer
  Matrix w = scaled(Matrix::gaussian(cfg.output_dim, cfg.feature_dim,
                                     backbone_rng),
                    1.0 / std::sqrt(static_cast<double>(cfg.feature_dim)));
  SecondMomentStore store(cfg.feature_dim, RetentionMode::cumulative_only);

  // The naive sequential baseline trains one free adapter across every
  // session instead of anchoring a fresh pair per task; its state persists
  // here and each session's integration replaces the previous adapter
  // contribution on top of the untouched backbone.
  const bool sequential_adapter =
      cfg.train_isolated_down && !cfg.general_enabled;
  const Matrix w_frozen = w;
  Matrix seq_a, seq_b;

  for (std::size_t t = 1; t <= stream.tasks.size(); ++t) {
    const TaskDataset& task = stream.tasks[t - 1];
    bool have_past = store.task_count() > 0;

    Matrix x_t = detail::run_stage(t, "statistics",
                                   [&] { return extract(fe, task.train.x); });
    SecondMoment moment(cfg.feature_dim);
    detail::run_stage(t, "statistics", [&] { accumulate(moment, x_t); });
    const Matrix& s_past = store.cumulative_past();
    const Matrix& s_new = moment.S;

    // with a general branch in play the isolated branch waits for a past
    // to isolate from; a lone isolated branch starts immediately
    bool iso_active =
        cfg.isolated_enabled && (have_past || !cfg.general_enabled);

    SubspaceBases gen, iso;
    detail::run_stage(t, "decomposition", [&] {
      if (cfg.general_enabled) gen = general_bases(s_past, s_new, cfg.rank);
      if (iso_active && !cfg.train_isolated_down) {
        if (!have_past) {
          iso = general_bases(Matrix(cfg.feature_dim, cfg.feature_dim),
                              s_new, cfg.rank);
        } else if (cfg.isolation == IsolationMethod::loda_isolated) {
          iso = isolated_bases(s_past, s_new, cfg.rank);
        } else if (cfg.isolation == IsolationMethod::null_baseline) {
          iso = null_space_baseline(s_past, cfg.rank);
        } else {
          iso.kind = BasisKind::random_orthonormal;
          iso.U = detail::random_orthonormal_basis(
              cfg.feature_dim, cfg.rank, mix_seed(cfg.seed, 700 + t));
        }
      }
      if (have_past)
        append_energy_rows(report.energy, t, s_new, s_past, cfg.rank,
                           cfg.feature_dim, cfg.seed);
    });

    detail::run_stage(t, "registration",
                      [&] { add_classes(clf, task.class_ids, proto_rng); });

    DualLoRALayer layer =
        make_layer(w, cfg.rank, cfg.w_g, cfg.general_enabled, iso_active);
    detail::run_stage(t, "anchoring", [&] {
      if (cfg.general_enabled) anchor_general(layer, gen);
      if (iso_active) {
        if (cfg.train_isolated_down) {
          if (sequential_adapter && seq_a.size() > 0) {
            layer.isolated.A = seq_a;
            layer.isolated.B = seq_b;
          } else {
            Rng rng(mix_seed(cfg.seed, 600 + t));
            layer.isolated.A = scaled(
                Matrix::gaussian(cfg.rank, cfg.feature_dim, rng),
                1.0 / std::sqrt(static_cast<double>(cfg.feature_dim)));
          }
        } else {
          anchor_isolated(layer, iso);
        }
      }
    });

    TrainProblem problem;
    problem.layer = &layer;
    problem.clf = &clf;
    problem.features = &x_t;
    problem.labels = task.train.labels;
    problem.mask = task.class_ids;
    problem.train_isolated_down = cfg.train_isolated_down;
    TrainConfig tc = cfg.train;
    tc.seed = mix_seed(cfg.seed, 500 + t);
    TrainLog tlog = detail::run_stage(t, "training", [&] {
      ParamSet ps = problem.params();
      return train_task(ps, problem.labels, tc, problem.grad_fn());
    });
    for (const auto& s : tlog.steps)
      report.train_log.push_back(
          {t, s.epoch, s.step, s.loss, s.grad_cosine, s.eta, s.rho});

    if (cfg.interp_steps > 0 && have_past && cfg.general_enabled) {
      detail::run_stage(t, "interpolation", [&] {
        Matrix delta =
            scaled(matmul(layer.general.B, layer.general.A), cfg.w_g);
        for (std::size_t k = 0; k <= cfg.interp_steps; ++k) {
          double alpha = static_cast<double>(k) /
                         static_cast<double>(cfg.interp_steps);
          Matrix wa = w;
          axpy(wa, alpha, delta);
          EvalCounts past;
          for (std::size_t i = 0; i + 1 < t; ++i) {
            EvalCounts c = evaluate_set(wa, fe, clf, stream.tasks[i].test,
                                        cfg.oracle_eval);
            past.correct += c.correct;
            past.total += c.total;
          }
          EvalCounts fresh =
              evaluate_set(wa, fe, clf, task.test, cfg.oracle_eval);
          report.interp.push_back({t, alpha,
                                   percent(past.correct, past.total),
                                   percent(fresh.correct, fresh.total)});
        }
      });
    }

    RescaleResult rescale = identity_rescale(cfg.rank);
    if (cfg.general_enabled && cfg.merge == MergeMethod::closed_form &&
        have_past) {
      rescale = detail::run_stage(t, "recalibration", [&] {
        return rescale_factors(layer.general.A, s_new, s_past, cfg.lambda);
      });
      for (std::size_t j = 0; j < rescale.gammas.size(); ++j)
        report.gammas.push_back(
            {t, j, rescale.e_new[j], rescale.e_past[j], rescale.gammas[j]});
    }

    if (sequential_adapter) {
      seq_a = layer.isolated.A;
      seq_b = layer.isolated.B;
    }

    detail::run_stage(t, "integration", [&] {
      Matrix candidate =
          integrate(sequential_adapter ? w_frozen : w, layer, rescale);
      w = cfg.merge == MergeMethod::running_average
              ? naive_merge_running_average(w, candidate, t)
              : std::move(candidate);
    });

    detail::run_stage(t, "statistics", [&] { finish_task(store, moment); });

    SessionEval ev;
    ev.session = t;
    detail::run_stage(t, "evaluation", [&] {
      for (std::size_t i = 0; i < t; ++i) {
        EvalCounts c = evaluate_set(w, fe, clf, stream.tasks[i].test,
                                    cfg.oracle_eval);
        ev.accuracy.push_back(percent(c.correct, c.total));
        ev.n_correct.push_back(c.correct);
        ev.n_test.push_back(c.total);
        ev.all_correct += c.correct;
        ev.all_test += c.total;
      }
      ev.all_accuracy = percent(ev.all_correct, ev.all_test);
    });
    report.sessions.push_back(std::move(ev));
  }

  report.a_last = report.sessions.back().all_accuracy;
  double acc = 0.0;
  for (const auto& s : report.sessions) acc += s.all_accuracy;
  report.a_avg = acc / static_cast<double>(report.sessions.size());
  return report;
}

// Energy-only pass: statistics and subspace diagnostics per task, no model.
inline std::vector<EnergyRow> diagnose_energies(const ExperimentConfig& cfg) {
  validate_experiment(cfg);
  Stream stream = cfg.ingest_path.empty() ? generate_stream(cfg.stream)
                                          : load_stream(cfg.ingest_path);
  if (stream.tasks.empty()) throw ConfigError("experiment: stream is empty");
  FeatureExtractor fe =
      make_extractor(stream.dim, cfg.feature_dim, mix_seed(cfg.seed, 11));
  SecondMomentStore store(cfg.feature_dim, RetentionMode::cumulative_only);
  std::vector<EnergyRow> rows;
  for (std::size_t t = 1; t <= stream.tasks.size(); ++t) {
    const TaskDataset& task = stream.tasks[t - 1];
    Matrix x_t = detail::run_stage(t, "statistics",
                                   [&] { return extract(fe, task.train.x); });
    SecondMoment moment(cfg.feature_dim);
    detail::run_stage(t, "statistics", [&] { accumulate(moment, x_t); });
    if (store.task_count() > 0)
      detail::run_stage(t, "diagnostics", [&] {
        append_energy_rows(rows, t, moment.S, store.cumulative_past(),
                           cfg.rank, cfg.feature_dim, cfg.seed);
      });
    detail::run_stage(t, "statistics", [&] { finish_task(store, moment); });
  }
  return rows;
}

inline std::string accuracy_csv(const std::vector<SessionEval>& sessions) {
  std::ostringstream os;
  os << "session,task,accuracy,n_correct,n_test\n";
  for (const auto& s : sessions) {
    for (std::size_t i = 0; i < s.accuracy.size(); ++i)
      os << s.session << ',' << (i + 1) << ','
         << format_double(s.accuracy[i]) << ',' << s.n_correct[i] << ','
         << s.n_test[i] << '\n';
    os << s.session << ",all," << format_double(s.all_accuracy) << ','
       << s.all_correct << ',' << s.all_test << '\n';
  }
  return os.str();
}

struct RecomputedMetrics {
  double a_last = 0.0;
  double a_avg = 0.0;
};

// Recomputes the two headline metrics from the raw counts in an emitted
// accuracy CSV, independent of the accuracy column.
inline RecomputedMetrics recompute_from_accuracy_csv(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  if (!std::getline(is, line) || line != "session,task,accuracy,n_correct,n_test")
    throw IoError("accuracy csv: bad header");
  std::vector<std::pair<std::size_t, double>> all_rows;
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    auto f = split(line, ',');
    if (f.size() != 5)
      throw IoError("accuracy csv: wrong field count at line " +
                    std::to_string(lineno));
    if (f[1] != "all") continue;
    bool ok1 = false, ok2 = false, ok3 = false;
    std::size_t session =
        static_cast<std::size_t>(parse_long(f[0], &ok1));
    long correct = parse_long(f[3], &ok2);
    long total = parse_long(f[4], &ok3);
    if (!ok1 || !ok2 || !ok3 || total <= 0)
      throw IoError("accuracy csv: bad field at line " +
                    std::to_string(lineno));
    all_rows.emplace_back(session, percent(static_cast<std::size_t>(correct),
                                           static_cast<std::size_t>(total)));
  }
  if (all_rows.empty()) throw IoError("accuracy csv: no session rows");
  RecomputedMetrics m;
  m.a_last = all_rows.back().second;
  for (const auto& [session, acc] : all_rows) m.a_avg += acc;
  m.a_avg /= static_cast<double>(all_rows.size());
  return m;
}

inline std::string train_log_csv(const std::vector<TrainLogRow>& rows) {
  std::ostringstream os;
  os << "task,epoch,step,loss,grad_cosine,eta,rho\n";
  for (const auto& r : rows)
    os << r.task << ',' << r.epoch << ',' << r.step << ','
       << format_double(r.loss) << ',' << format_double(r.grad_cosine) << ','
       << format_double(r.eta) << ',' << format_double(r.rho) << '\n';
  return os.str();
}

inline std::string interp_csv(const std::vector<InterpRow>& rows) {
  std::ostringstream os;
  os << "session,alpha,accuracy_past,accuracy_new\n";
  for (const auto& r : rows)
    os << r.session << ',' << format_double(r.alpha) << ','
       << format_double(r.accuracy_past) << ','
       << format_double(r.accuracy_new) << '\n';
  return os.str();
}

inline std::string report_json_text(const MetricsReport& r) {
  nlohmann::ordered_json j;
  j["schema_version"] = 1;
  j["config"] = config_json(r.config);
  j["config_fingerprint"] = config_fingerprint(r.config);
  nlohmann::ordered_json sessions = nlohmann::ordered_json::array();
  for (const auto& s : r.sessions) {
    nlohmann::ordered_json e;
    e["session"] = s.session;
    e["task_accuracy"] = s.accuracy;
    e["n_correct"] = s.n_correct;
    e["n_test"] = s.n_test;
    e["all_seen_accuracy"] = s.all_accuracy;
    sessions.push_back(std::move(e));
  }
  j["sessions"] = std::move(sessions);
  j["a_last"] = r.a_last;
  j["a_avg"] = r.a_avg;
  return j.dump(2) + "\n";
}

inline void emit_report(const MetricsReport& report, const std::string& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create output directory: " + dir);
  write_text_file(dir + "/report.json", report_json_text(report));
  write_text_file(dir + "/accuracy.csv", accuracy_csv(report.sessions));
  write_text_file(dir + "/energy.csv", energy_csv(report.energy));
  write_text_file(dir + "/gamma.csv", gamma_csv(report.gammas));
  write_text_file(dir + "/train_log.csv", train_log_csv(report.train_log));
  if (report.config.interp_steps > 0)
    write_text_file(dir + "/interp_trace.csv", interp_csv(report.interp));
}

inline std::vector<std::pair<std::string, MetricsReport>> run_ablation(
    const ExperimentConfig& base) {
  std::vector<std::pair<std::string, MetricsReport>> out;
  for (Preset p : {Preset::baseline_single_lora, Preset::general_only,
                   Preset::isolated_only, Preset::dual_no_gao,
                   Preset::full_loda}) {
    ExperimentConfig cfg = base;
    cfg.preset = p;
    apply_preset(cfg);
    out.emplace_back(preset_name(p), run_experiment(cfg));
  }
  return out;
}

}  // namespace loda
