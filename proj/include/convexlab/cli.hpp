#pragma once

// Command implementations behind the `convexlab` binary: oracle (solve one
// distribution and check the optimum's shape), gradcheck (finite-difference
// audit of every loss family on both model classes), train (run a config),
// and report (aggregate persisted run records into plot-ready CSV).
// Exit codes: 0 success, 2 input/config error, 3 numerical non-convergence.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <limits>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "convexlab/autodiff.hpp"
#include "convexlab/config.hpp"
#include "convexlab/distribution.hpp"
#include "convexlab/loss.hpp"
#include "convexlab/serialize.hpp"
#include "convexlab/simplex_oracle.hpp"
#include "convexlab/trainer.hpp"

namespace convexlab {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFail = 1;
inline constexpr int kExitInput = 2;
inline constexpr int kExitNoConverge = 3;

// Exact and detached-weight gradients must match to this tolerance; the
// detached loss -w*g is constructed so both paths compute w * dg/dtheta.
inline constexpr double kDetachedAgreementTol = 1e-10;

namespace detail {

inline LossFamily parse_family_flags(const std::string& name, std::optional<double> k) {
  auto need_k = [&]() {
    if (!k) throw std::invalid_argument("family '" + name + "' requires --k");
    return *k;
  };
  auto no_k = [&]() {
    if (k) throw std::invalid_argument("family '" + name + "' takes no --k");
  };
  if (name == "log") {
    no_k();
    return LossFamily::log_loss();
  }
  if (name == "exp") return LossFamily::exp_composed(need_k());
  if (name == "power") return LossFamily::power_composed(need_k());
  if (name == "convex" || name == "convex_identity") {
    no_k();
    return LossFamily::pure_convex(ConvexVariant::kIdentity);
  }
  if (name == "convex_exp") {
    no_k();
    return LossFamily::pure_convex(ConvexVariant::kExp);
  }
  throw std::invalid_argument(
      "unknown family '" + name + "' (expected log, exp, power, convex, convex_exp)");
}

inline Json solve_to_json(const OracleResult& res) {
  return Json{{"probs", res.p_f.probs},
              {"labels", res.p_f.labels},
              {"loss", res.loss_value},
              {"iterations", res.iterations},
              {"kkt_residual", res.kkt_residual},
              {"converged", res.converged}};
}

inline Json properties_to_json(const PropertyReport& rep) {
  Json j{{"ordering_ok", rep.ordering_ok},
         {"crossing_index", rep.crossing_index},
         {"crossing_ok", rep.crossing_ok},
         {"crossing_ties", rep.crossing_ties},
         {"entropy_baseline", rep.entropy_baseline},
         {"entropy_optimum", rep.entropy_optimum},
         {"entropy_ok", rep.entropy_ok},
         {"prefix_mass_ok", rep.prefix_mass_ok},
         {"tolerance", rep.tolerance},
         {"all_pass", rep.all_pass()}};
  j["onehot"] = rep.onehot ? Json(*rep.onehot) : Json(nullptr);
  j["gap_monotone_ok"] = rep.gap_monotone_ok ? Json(*rep.gap_monotone_ok) : Json(nullptr);
  return j;
}

// Work-stealing loop shared by the seed-parallel train path; mirrors the
// sweep pool so scheduling never affects results.
template <class Fn>
void parallel_for(std::size_t n, std::size_t jobs, Fn&& fn) {
  std::atomic<std::size_t> next{0};
  std::mutex err_mu;
  std::exception_ptr first_error;
  auto worker = [&]() {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= n) return;
      try {
        fn(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(err_mu);
        if (!first_error) first_error = std::current_exception();
        return;
      }
    }
  };
  const std::size_t nthreads = std::max<std::size_t>(1, std::min(jobs, n));
  if (nthreads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    pool.reserve(nthreads);
    for (std::size_t i = 0; i < nthreads; ++i) pool.emplace_back(worker);
    for (std::thread& th : pool) th.join();
  }
  if (first_error) std::rethrow_exception(first_error);
}

}  // namespace detail

struct OracleArgs {
  std::string dist_path;
  std::string family = "log";
  std::optional<double> k;
  double tol = 1e-6;
  double seq_len = 1.0;
};

inline int cmd_oracle(const OracleArgs& args, std::ostream& out = std::cout,
                      std::ostream& err = std::cerr) {
  FiniteDistribution data;
  LossFamily fam = LossFamily::log_loss();
  try {
    fam = detail::parse_family_flags(args.family, args.k);
    data = load_distribution_csv(args.dist_path).sorted();
    data.validate(true);
    if (!(args.tol > 0.0)) throw std::invalid_argument("--tol must be > 0");
    if (!(args.seq_len > 0.0)) throw std::invalid_argument("--seq-len must be > 0");
  } catch (const std::exception& e) {
    err << "oracle: " << e.what() << "\n";
    return kExitInput;
  }

  SolveOptions opt;
  opt.seq_len = args.seq_len;
  const OracleResult baseline = solve_optimal(data, LossFamily::log_loss(), opt);
  const OracleResult optimum = solve_optimal(data, fam, opt);
  if (!baseline.converged || !optimum.converged) {
    err << "oracle: solver did not converge (kkt_residual "
        << format_real(baseline.converged ? optimum.kkt_residual : baseline.kkt_residual)
        << " after " << (baseline.converged ? optimum.iterations : baseline.iterations)
        << " iterations)\n";
    return kExitNoConverge;
  }

  PropertyReport report;
  try {
    report = check_optimum_properties(data, baseline.p_f, optimum.p_f, args.tol, fam,
                                      args.seq_len);
  } catch (const std::invalid_argument& e) {
    err << "oracle: " << e.what() << "\n";
    return kExitInput;
  }

  Json j{{"family", fam.name()},
         {"tol", args.tol},
         {"seq_len", args.seq_len},
         {"baseline", detail::solve_to_json(baseline)},
         {"optimum", detail::solve_to_json(optimum)},
         {"properties", detail::properties_to_json(report)}};
  if (fam.uses_k()) j["k"] = fam.k();
  out << j.dump(2) << "\n";
  return report.all_pass() ? kExitOk : kExitFail;
}

namespace detail {

template <class M>
BatchGroups gradcheck_batch(const M& model) {
  // Fixed tiny batch spanning both contexts; sequences exercise repeated
  // and distinct tokens.
  const int v = static_cast<int>(model.vocab_size());
  const std::size_t t = model.seq_len();
  auto seq = [&](int a, int b) {
    std::vector<int> s(t, 0);
    s[0] = a % v;
    if (t > 1) s[1] = b % v;
    return s;
  };
  BatchGroups groups;
  groups[{0, seq(0, 1)}] = 2;
  groups[{0, seq(1, 2)}] = 1;
  groups[{model.num_contexts() > 1 ? 1u : 0u, seq(2, 0)}] = 1;
  return groups;
}

template <class M>
std::vector<std::vector<double>> batch_gradients(const M& model, const BatchGroups& groups,
                                                 std::size_t batch_n, const LossFamily& fam,
                                                 GradPath path) {
  ad::Graph g;
  std::vector<ad::NodeRef> leaves = model.make_leaves(g);
  ad::NodeRef loss =
      build_batch_loss(model, g, std::span<const ad::NodeRef>(leaves), groups, batch_n, fam,
                       /*eps_ls=*/0.0, path, /*step=*/1);
  g.backward(loss);
  std::vector<std::vector<double>> grads;
  grads.reserve(leaves.size());
  for (ad::NodeRef leaf : leaves) grads.push_back(g.grad(leaf));
  return grads;
}

}  // namespace detail

inline int cmd_gradcheck(std::uint64_t seed, double tol, std::ostream& out = std::cout) {
  struct Case {
    const char* label;
    LossFamily fam;
  };
  const std::vector<Case> cases = {
      {"log", LossFamily::log_loss()},
      {"exp", LossFamily::exp_composed(0.5)},
      {"power", LossFamily::power_composed(0.5)},
      {"convex_identity", LossFamily::pure_convex(ConvexVariant::kIdentity)},
      {"convex_exp", LossFamily::pure_convex(ConvexVariant::kExp)},
  };

  bool all_ok = true;
  std::size_t case_index = 0;
  auto run_class = [&](const std::string& model_class, auto make_model) {
    for (const Case& c : cases) {
      auto model = make_model(derive_seed(seed, case_index++));
      const auto groups = detail::gradcheck_batch(model);
      constexpr std::size_t kBatchN = 4;

      ad::Graph g;
      std::vector<ad::NodeRef> leaves = model.make_leaves(g);
      ad::NodeRef loss = detail::build_batch_loss(model, g,
                                                  std::span<const ad::NodeRef>(leaves), groups,
                                                  kBatchN, c.fam, 0.0, GradPath::kExact, 1);
      const ad::FiniteDiffReport rep = ad::finite_diff_check(g, loss, /*eps=*/1e-4, tol);
      out << "gradcheck family=" << c.label << " model=" << model_class
          << " max_rel_err=" << format_real(rep.max_rel_err) << " worst=" << rep.worst_param
          << "[" << rep.worst_coord << "] status=" << (rep.pass ? "pass" : "fail") << "\n";
      all_ok = all_ok && rep.pass;

      const auto exact = detail::batch_gradients(model, groups, kBatchN, c.fam, GradPath::kExact);
      const auto detached =
          detail::batch_gradients(model, groups, kBatchN, c.fam, GradPath::kDetachedWeight);
      double worst = 0.0;
      for (std::size_t p = 0; p < exact.size(); ++p)
        for (std::size_t i = 0; i < exact[p].size(); ++i) {
          const double a = exact[p][i], b = detached[p][i];
          const double rel = std::abs(a - b) / std::max({1e-8, std::abs(a), std::abs(b)});
          worst = std::max(worst, rel);
        }
      const bool agree = worst <= kDetachedAgreementTol;
      out << "gradcheck family=" << c.label << " model=" << model_class
          << " detached_vs_exact=" << format_real(worst)
          << " status=" << (agree ? "pass" : "fail") << "\n";
      all_ok = all_ok && agree;
    }
  };

  const Vocab vocab("abc");
  const ModelConfig cfg{2, vocab, 2, 3, 4};
  run_class("ar", [&](std::uint64_t s) { return ArModel(cfg, s); });
  run_class("nar", [&](std::uint64_t s) { return NarModel(cfg, s); });

  out << "gradcheck overall=" << (all_ok ? "pass" : "fail") << "\n";
  return all_ok ? kExitOk : kExitNoConverge;
}

namespace detail {

struct RecordRow {
  std::string config_hash;
  std::string model_class;
  double k = 0.0;
  std::uint64_t seed = 0;
  std::string phase;
  double kl_nats = 0.0;
  double entropy_nats = 0.0;
  double output_nll = 0.0;
  double mixture_rate = 0.0;
  double greedy_match = 0.0;
  double beam5_match = 0.0;
  double exact_match = 0.0;
  double wall_ms = 0.0;
};

// One row per record: the final phase's metrics averaged over contexts,
// match flags as fractions, wall time summed over phases.
inline RecordRow summarize_record(const RunRecord& rec) {
  if (rec.phases.empty()) throw ConfigError("run record " + run_record_filename(rec) +
                                            " has no phases");
  const PhaseResult& last = rec.phases.back();
  if (last.metrics.empty())
    throw ConfigError("run record " + run_record_filename(rec) + " has no metrics");

  RecordRow row;
  row.config_hash = rec.config_hash;
  row.model_class = rec.model_class;
  row.k = rec.k;
  row.seed = rec.seed;
  row.phase = last.name;
  const double n = static_cast<double>(last.metrics.size());
  bool beam5_present = true;
  for (const MetricsBundle& m : last.metrics) {
    row.kl_nats += m.kl_nats / n;
    row.entropy_nats += m.entropy_nats / n;
    row.output_nll += m.output_nll / n;
    row.mixture_rate += m.mixture_rate / n;
    row.greedy_match += (m.greedy_match ? 1.0 : 0.0) / n;
    row.exact_match += (m.exact_match ? 1.0 : 0.0) / n;
    bool found = false;
    for (const BeamMatch& b : m.beam_match)
      if (b.width == 5) {
        row.beam5_match += (b.match ? 1.0 : 0.0) / n;
        found = true;
        break;
      }
    beam5_present = beam5_present && found;
  }
  if (!beam5_present) row.beam5_match = std::numeric_limits<double>::quiet_NaN();
  for (const PhaseResult& p : rec.phases) row.wall_ms += p.wall_ms;
  return row;
}

inline std::string summary_row_csv(const RecordRow& r) {
  std::string s;
  s += r.config_hash;
  s += ',' + r.model_class;
  s += ',' + format_real(r.k);
  s += ',' + std::to_string(r.seed);
  s += ',' + r.phase;
  s += ',' + format_real(r.kl_nats);
  s += ',' + format_real(r.entropy_nats);
  s += ',' + format_real(r.output_nll);
  s += ',' + format_real(r.mixture_rate);
  s += ',' + format_real(r.greedy_match);
  s += ',' + format_real(r.beam5_match);
  s += ',' + format_real(r.exact_match);
  s += ',' + format_real(r.wall_ms);
  return s;
}

inline constexpr const char* kSummaryHeader =
    "config_hash,model_class,k,seed,phase,kl_nats,entropy_nats,output_nll,mixture_rate,"
    "greedy_match,beam5_match,exact_match,wall_ms";

}  // namespace detail

inline int cmd_train(const std::string& config_path, std::size_t jobs,
                     std::ostream& out = std::cout) {
  ExperimentConfig cfg = load_experiment_config(config_path);
  if (const char* env = std::getenv("CONVEXLAB_RESULTS_DIR"); env != nullptr && *env != '\0')
    cfg.out_dir = env;
  const ModelConfig model_cfg = make_model_config(cfg.task, cfg.embed_dim, cfg.hidden_dim);

  std::vector<RunRecord> records;
  if (!cfg.k_sweep.empty()) {
    const PhasePlan plan = make_phase_plan(cfg, cfg.finetune_family.k());
    SweepSpec sweep;
    sweep.k_values = cfg.k_sweep;
    sweep.seeds = cfg.seeds;
    sweep.dataset_size = cfg.dataset_size;
    sweep.jobs = jobs;
    records = sweep_k(plan, cfg.task, cfg.model_class, model_cfg, sweep,
                      [&](double k) { return config_hash(cfg, k); });
  } else {
    const double k_eff = cfg.finetune_family.uses_k() ? cfg.finetune_family.k() : 0.0;
    const PhasePlan plan = make_phase_plan(cfg, k_eff);
    const std::string hash = config_hash(cfg, k_eff);
    records.resize(cfg.seeds.size());
    detail::parallel_for(cfg.seeds.size(), jobs, [&](std::size_t i) {
      const std::uint64_t seed = cfg.seeds[i];
      const Dataset data = sample_dataset(cfg.task, cfg.dataset_size, derive_seed(seed, 3));
      records[i] = run_two_phase(plan, cfg.task, data, seed, cfg.model_class, model_cfg, hash);
    });
  }

  for (const RunRecord& rec : records) {
    write_run_record(cfg.out_dir, rec);
    const detail::RecordRow row = detail::summarize_record(rec);
    out << "run config=" << row.config_hash << " model=" << row.model_class
        << " k=" << format_real(row.k) << " seed=" << row.seed << " phase=" << row.phase
        << " kl_nats=" << format_real(row.kl_nats)
        << " entropy_nats=" << format_real(row.entropy_nats)
        << " output_nll=" << format_real(row.output_nll)
        << " mixture_rate=" << format_real(row.mixture_rate)
        << " wall_ms=" << format_real(row.wall_ms) << "\n";
  }
  return kExitOk;
}

inline int cmd_report(const std::string& results_dir, std::ostream& out = std::cout,
                      std::ostream& err = std::cerr) {
  const std::filesystem::path dir(results_dir);
  const std::vector<std::filesystem::path> paths = list_run_records(dir);
  if (paths.empty()) {
    err << "report: no run records found in " << results_dir << "\n";
    return kExitInput;
  }

  std::vector<detail::RecordRow> rows;
  rows.reserve(paths.size());
  for (const auto& p : paths) rows.push_back(detail::summarize_record(read_run_record(p)));

  {
    std::ofstream csv(dir / "summary.csv");
    if (!csv) throw std::runtime_error("cannot write summary.csv");
    csv << detail::kSummaryHeader << "\n";
    for (const detail::RecordRow& r : rows) csv << detail::summary_row_csv(r) << "\n";
  }

  // Per-k aggregates of the per-run summaries, one file per metric.
  const std::vector<std::pair<std::string, double detail::RecordRow::*>> series = {
      {"output_nll", &detail::RecordRow::output_nll},
      {"entropy_nats", &detail::RecordRow::entropy_nats},
      {"kl_nats", &detail::RecordRow::kl_nats},
      {"mixture_rate", &detail::RecordRow::mixture_rate},
  };
  for (const auto& [metric, member] : series) {
    std::map<double, std::vector<double>> by_k;
    for (const detail::RecordRow& r : rows) by_k[r.k].push_back(r.*member);
    std::ofstream csv(dir / ("series_" + metric + ".csv"));
    if (!csv) throw std::runtime_error("cannot write series_" + metric + ".csv");
    csv << "k,mean,std,count\n";
    for (const auto& [k, vals] : by_k) {
      double mean = 0.0;
      for (double v : vals) mean += v;
      mean /= static_cast<double>(vals.size());
      double var = 0.0;
      if (vals.size() > 1) {
        for (double v : vals) var += (v - mean) * (v - mean);
        var /= static_cast<double>(vals.size() - 1);
      }
      csv << format_real(k) << ',' << format_real(mean) << ',' << format_real(std::sqrt(var))
          << ',' << vals.size() << "\n";
    }
  }

  out << "report: wrote summary.csv (" << rows.size() << " rows) and " << series.size()
      << " series files to " << results_dir << "\n";
  return kExitOk;
}

}  // namespace convexlab
