// convexlab: solve-and-check oracles, gradient audits, training runs, and
// report aggregation for the toy sequence-loss lab.
//
// Exit codes: 0 success, 1 check failure, 2 input/config error,
// 3 numerical non-convergence.

#include <cstdint>
#include <exception>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"

#include "convexlab/cli.hpp"

int main(int argc, char** argv) {
  CLI::App app{"toy sequence-loss lab: oracles, gradient checks, training, reports"};
  app.require_subcommand(1);

  convexlab::OracleArgs oracle_args;
  double oracle_k = 0.0;
  CLI::App* oracle = app.add_subcommand(
      "oracle", "solve one distribution's optimum and check its shape");
  oracle->add_option("--dist", oracle_args.dist_path, "distribution CSV (label,prob)")
      ->required();
  CLI::Option* fam_opt =
      oracle->add_option("--family", oracle_args.family,
                         "loss family: log, exp, power, convex, convex_exp")
          ->required();
  CLI::Option* k_opt = oracle->add_option("--k", oracle_k, "exponent for exp/power families");
  oracle->add_option("--tol", oracle_args.tol, "property-check tolerance (default 1e-6)");
  oracle->add_option("--seq-len", oracle_args.seq_len,
                     "sequence length scaling the inner log (default 1)");

  std::uint64_t gc_seed = 0;
  double gc_tol = 1e-4;
  CLI::App* gradcheck = app.add_subcommand(
      "gradcheck", "finite-difference audit of every loss family on both model classes");
  gradcheck->add_option("--seed", gc_seed, "master seed (default 0)");
  gradcheck->add_option("--tol", gc_tol, "max relative error allowed (default 1e-4)");

  std::string train_config;
  std::size_t jobs = 1;
  CLI::App* train = app.add_subcommand("train", "run a training config and persist run records");
  train->add_option("--config", train_config, "experiment config JSON")->required();
  train->add_option("--jobs", jobs, "parallel runs (default 1)")
      ->check(CLI::Range(std::size_t{1}, std::size_t{256}));

  std::string report_dir;
  CLI::App* report = app.add_subcommand(
      "report", "aggregate run records into summary.csv and per-k series files");
  report->add_option("--dir", report_dir, "results directory (CONVEXLAB_RESULTS_DIR overrides)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : convexlab::kExitInput;
  }

  try {
    if (oracle->parsed()) {
      if (k_opt->count() > 0) oracle_args.k = oracle_k;
      (void)fam_opt;
      return convexlab::cmd_oracle(oracle_args);
    }
    if (gradcheck->parsed()) return convexlab::cmd_gradcheck(gc_seed, gc_tol);
    if (train->parsed()) return convexlab::cmd_train(train_config, jobs);
    if (report->parsed()) {
      const char* env = std::getenv("CONVEXLAB_RESULTS_DIR");
      std::string dir = (env != nullptr && *env != '\0') ? env : report_dir;
      if (dir.empty()) {
        std::cerr << "report: pass --dir or set CONVEXLAB_RESULTS_DIR\n";
        return convexlab::kExitInput;
      }
      return convexlab::cmd_report(dir);
    }
  } catch (const convexlab::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return convexlab::kExitInput;
  } catch (const convexlab::TrainAbort& e) {
    std::cerr << "error: " << e.what() << "\n";
    return convexlab::kExitNoConverge;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return convexlab::kExitInput;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return convexlab::kExitFail;
  }
  return convexlab::kExitInput;
}
