// Command-line front end for the continual-learning subspace toolkit.
//
// Subcommands:
//   run              one experiment; writes report files into --outdir
//   ablate           all five presets on one config; per-preset subdirectories
//   generate-stream  synthetic task stream to a CSV file
//   diagnose         statistics/subspace energy pass only; energy CSV
//
// Exit codes: 0 success, 2 configuration error, 3 numerical failure,
// 4 I/O error, 1 anything else.

#include <chrono>
#include <cstdio>
#include <exception>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "loda/runner.hpp"

namespace {

struct CommonFlags {
  std::optional<std::uint64_t> seed;
  std::optional<std::uint64_t> stream_seed;
  std::string config_path;
  // stream
  std::optional<std::size_t> tasks, classes_per_task, train_per_class,
      test_per_class, d_raw, d_shared, d_private;
  std::optional<double> sigma, kappa, mean_scale, task_drift, shared_spread,
      mode_gain;
  std::string ingest;
  // model / optimization
  std::optional<std::size_t> feature_dim, output_dim, rank, epochs, batch_size,
      interp_steps;
  std::optional<double> w_g, lambda, temperature, eta, rho_max;
  std::string preset, isolation, merge, optimizer;
  bool oracle_eval = false;
};

void add_common_flags(CLI::App* cmd, CommonFlags& f, bool needs_seed) {
  auto* seed_opt =
      cmd->add_option("--seed", f.seed,
                      "master seed; also seeds the stream unless "
                      "--stream-seed is given");
  if (needs_seed) seed_opt->required();
  cmd->add_option("--stream-seed", f.stream_seed,
                  "stream seed, when it should differ from --seed");
  cmd->add_option("--config", f.config_path,
                  "JSON config file; explicit flags override its fields");
  cmd->add_option("--tasks", f.tasks, "number of tasks in the stream");
  cmd->add_option("--classes-per-task", f.classes_per_task,
                  "classes per task");
  cmd->add_option("--train-per-class", f.train_per_class,
                  "training samples per class");
  cmd->add_option("--test-per-class", f.test_per_class,
                  "test samples per class");
  cmd->add_option("--d-raw", f.d_raw, "raw input dimension");
  cmd->add_option("--d-shared", f.d_shared, "shared subspace width");
  cmd->add_option("--d-private", f.d_private, "per-task private width");
  cmd->add_option("--sigma", f.sigma, "sample noise level");
  cmd->add_option("--kappa", f.kappa, "shared/private mixing in [0,1]");
  cmd->add_option("--mean-scale", f.mean_scale, "class-mean norm");
  cmd->add_option("--task-drift", f.task_drift,
                  "per-task drift of the shared anchor");
  cmd->add_option("--shared-spread", f.shared_spread,
                  "class scatter around the task anchor");
  cmd->add_option("--mode-gain", f.mode_gain,
                  "weight of the class's re-used shared axis");
  cmd->add_option("--ingest", f.ingest,
                  "load the stream from this CSV instead of generating");
  cmd->add_option("--feature-dim", f.feature_dim, "extractor output width");
  cmd->add_option("--output-dim", f.output_dim, "adapted layer output width");
  cmd->add_option("--rank", f.rank, "adapter rank");
  cmd->add_option("--w-g", f.w_g, "general-branch weight in (0,1]");
  cmd->add_option("--lambda", f.lambda, "recalibration strength");
  cmd->add_option("--temperature", f.temperature, "classifier temperature");
  cmd->add_option("--eta", f.eta, "learning rate");
  cmd->add_option("--epochs", f.epochs, "training epochs per task");
  cmd->add_option("--batch-size", f.batch_size, "minibatch size");
  cmd->add_option("--rho-max", f.rho_max, "gradient-alignment cap");
  cmd->add_option("--preset", f.preset,
                  "baseline_single_lora | general_only | isolated_only | "
                  "dual_no_gao | full_loda");
  cmd->add_option("--isolation", f.isolation,
                  "loda_isolated | null_baseline | random_orthonormal");
  cmd->add_option("--merge", f.merge,
                  "closed_form | identity | running_average");
  cmd->add_option("--optimizer", f.optimizer, "gao | sgd");
  cmd->add_option("--interp-steps", f.interp_steps,
                  "alpha grid size for the interpolation trace");
  cmd->add_flag("--oracle-eval", f.oracle_eval,
                "plumbing check: predictions leak the labels");
}

loda::ExperimentConfig build_config(const CommonFlags& f) {
  loda::ExperimentConfig cfg;
  if (!f.config_path.empty())
    cfg = loda::parse_config_json(loda::read_text_file(f.config_path));
  if (f.seed) {
    cfg.seed = *f.seed;
    cfg.stream.seed = *f.seed;
  }
  if (f.stream_seed) cfg.stream.seed = *f.stream_seed;
  if (f.tasks) cfg.stream.tasks = *f.tasks;
  if (f.classes_per_task) cfg.stream.classes_per_task = *f.classes_per_task;
  if (f.train_per_class) cfg.stream.train_per_class = *f.train_per_class;
  if (f.test_per_class) cfg.stream.test_per_class = *f.test_per_class;
  if (f.d_raw) cfg.stream.d_raw = *f.d_raw;
  if (f.d_shared) cfg.stream.d_shared = *f.d_shared;
  if (f.d_private) cfg.stream.d_private = *f.d_private;
  if (f.sigma) cfg.stream.sigma = *f.sigma;
  if (f.kappa) cfg.stream.kappa = *f.kappa;
  if (f.mean_scale) cfg.stream.mean_scale = *f.mean_scale;
  if (f.task_drift) cfg.stream.task_drift = *f.task_drift;
  if (f.shared_spread) cfg.stream.shared_spread = *f.shared_spread;
  if (f.mode_gain) cfg.stream.mode_gain = *f.mode_gain;
  if (!f.ingest.empty()) cfg.ingest_path = f.ingest;
  if (f.feature_dim) cfg.feature_dim = *f.feature_dim;
  if (f.output_dim) cfg.output_dim = *f.output_dim;
  if (f.rank) cfg.rank = *f.rank;
  if (f.w_g) cfg.w_g = *f.w_g;
  if (f.lambda) cfg.lambda = *f.lambda;
  if (f.temperature) cfg.temperature = *f.temperature;
  if (f.eta) cfg.train.eta = *f.eta;
  if (f.epochs) cfg.train.epochs = *f.epochs;
  if (f.batch_size) cfg.train.batch_size = *f.batch_size;
  if (f.rho_max) cfg.train.rho_max = *f.rho_max;
  if (f.interp_steps) cfg.interp_steps = *f.interp_steps;
  if (f.oracle_eval) cfg.oracle_eval = true;
  if (!f.preset.empty()) {
    cfg.preset = loda::parse_preset(f.preset);
    loda::apply_preset(cfg);
  }
  // branch/optimizer overrides apply after preset expansion
  if (!f.isolation.empty()) cfg.isolation = loda::parse_isolation(f.isolation);
  if (!f.merge.empty()) cfg.merge = loda::parse_merge(f.merge);
  if (!f.optimizer.empty()) {
    if (f.optimizer == "gao")
      cfg.train.optimizer = loda::Optimizer::gao;
    else if (f.optimizer == "sgd")
      cfg.train.optimizer = loda::Optimizer::sgd;
    else
      throw loda::ConfigError("unknown optimizer '" + f.optimizer +
                              "'; valid: gao, sgd");
  }
  return cfg;
}

void print_session_table(const loda::MetricsReport& rep) {
  std::printf("session | per-task accuracy%*s| all-seen\n", 30, "");
  for (const auto& s : rep.sessions) {
    std::string row;
    for (double a : s.accuracy) {
      char buf[16];
      std::snprintf(buf, sizeof buf, "%6.2f", a);
      row += buf;
    }
    std::printf("  s%-4zu | %-46s | %7.2f\n", s.session, row.c_str(),
                s.all_accuracy);
  }
  std::printf("A_last %.2f  A_avg %.2f\n", rep.a_last, rep.a_avg);
}

int cmd_run(const CommonFlags& flags, const std::string& outdir) {
  loda::ExperimentConfig cfg = build_config(flags);
  cfg.outdir = outdir;
  auto t0 = std::chrono::steady_clock::now();
  loda::MetricsReport rep = loda::run_experiment(cfg);
  rep.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
          .count();
  loda::emit_report(rep, outdir);
  print_session_table(rep);
  std::printf("wall %.3fs; report files in %s\n", rep.wall_seconds,
              outdir.c_str());
  return 0;
}

int cmd_ablate(const CommonFlags& flags, const std::string& outdir) {
  loda::ExperimentConfig base = build_config(flags);
  auto t0 = std::chrono::steady_clock::now();
  auto results = loda::run_ablation(base);
  double wall =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
          .count();
  std::printf("%-22s %8s %8s\n", "preset", "A_last", "A_avg");
  for (auto& [name, rep] : results) {
    loda::emit_report(rep, outdir + "/" + name);
    std::printf("%-22s %8.2f %8.2f\n", name.c_str(), rep.a_last, rep.a_avg);
  }
  std::printf("wall %.3fs; per-preset reports in %s/<preset>/\n", wall,
              outdir.c_str());
  return 0;
}

int cmd_generate_stream(const CommonFlags& flags, const std::string& out) {
  loda::ExperimentConfig cfg = build_config(flags);
  loda::Stream stream = loda::generate_stream(cfg.stream);
  loda::write_text_file(out, loda::stream_csv(stream));
  std::size_t rows = 0;
  for (const auto& t : stream.tasks)
    rows += t.train.labels.size() + t.test.labels.size();
  std::printf("wrote %zu tasks, %zu sample rows to %s\n", stream.tasks.size(),
              rows, out.c_str());
  return 0;
}

int cmd_diagnose(const CommonFlags& flags, const std::string& out) {
  loda::ExperimentConfig cfg = build_config(flags);
  auto rows = loda::diagnose_energies(cfg);
  loda::write_text_file(out, loda::energy_csv(rows));
  std::printf("wrote %zu energy rows to %s\n", rows.size(), out.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"continual-learning subspace toolkit"};
  app.require_subcommand(1);

  CommonFlags run_flags, ablate_flags, gen_flags, diag_flags;
  std::string run_outdir, ablate_outdir, gen_out, diag_out;

  CLI::App* run = app.add_subcommand("run", "run one experiment");
  add_common_flags(run, run_flags, /*needs_seed=*/true);
  run->add_option("--outdir", run_outdir, "directory for report files")
      ->required();

  CLI::App* ablate =
      app.add_subcommand("ablate", "run all five presets on one config");
  add_common_flags(ablate, ablate_flags, /*needs_seed=*/true);
  ablate->add_option("--outdir", ablate_outdir,
                     "directory for per-preset report subdirectories")
      ->required();

  CLI::App* gen = app.add_subcommand("generate-stream",
                                     "write a synthetic task stream as CSV");
  add_common_flags(gen, gen_flags, /*needs_seed=*/true);
  gen->add_option("--out", gen_out, "output CSV path")->required();

  CLI::App* diag = app.add_subcommand(
      "diagnose", "statistics and subspace energy pass, no training");
  add_common_flags(diag, diag_flags, /*needs_seed=*/true);
  diag->add_option("--out", diag_out, "output energy CSV path")->required();

  try {
    app.parse(argc, argv);
    if (run->parsed()) return cmd_run(run_flags, run_outdir);
    if (ablate->parsed()) return cmd_ablate(ablate_flags, ablate_outdir);
    if (gen->parsed()) return cmd_generate_stream(gen_flags, gen_out);
    if (diag->parsed()) return cmd_diagnose(diag_flags, diag_out);
    return 1;
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  } catch (const loda::ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const loda::NumericError& e) {
    std::fprintf(stderr, "numerical failure: %s\n", e.what());
    return 3;
  } catch (const loda::IoError& e) {
    std::fprintf(stderr, "i/o error: %s\n", e.what());
    return 4;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}
