#pragma once

// Seeded, deterministic training of the toy models under any loss family:
// Adam with betas (0.9, 0.98), linear warmup into inverse-sqrt decay,
// global-norm gradient clipping, minibatches drawn with replacement (or the
// full dataset when the batch is at least as large), and batches grouped by
// distinct (context, sequence) so repeated draws cost one graph build.
//
// The per-sequence loss differentiates through the full composition
// ("exact" path). The detached-weight path multiplies the plain
// log-probability by the loss weight held constant; its gradients must
// match the exact path and it exists for that cross-check only. Label
// smoothing always uses the detached weight.
//
// run_two_phase executes the standard recipe (log-loss pretrain, then the
// configured family) and evaluates exact metrics after each phase; sweep_k
// fans that out over exponent values and seeds with isolated RNG streams.

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <exception>
#include <functional>
#include <map>
#include <mutex>
#include <span>
#include <stdexcept>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "convexlab/autodiff.hpp"
#include "convexlab/decode_metrics.hpp"
#include "convexlab/loss.hpp"
#include "convexlab/rng.hpp"
#include "convexlab/seq_models.hpp"
#include "convexlab/synth_tasks.hpp"

namespace convexlab {

inline constexpr double kAdamBeta1 = 0.9;
inline constexpr double kAdamBeta2 = 0.98;
inline constexpr double kAdamEps = 1e-8;

class TrainAbort : public std::runtime_error {
 public:
  TrainAbort(const std::string& msg, std::size_t step)
      : std::runtime_error(msg), step_(step) {}
  std::size_t step() const { return step_; }

 private:
  std::size_t step_;
};

struct OptimizerCfg {
  double lr = 5e-3;
  std::size_t steps = 2000;
  std::size_t batch_size = 64;
  std::size_t warmup_steps = 100;
  double label_smoothing = 0.0;
  bool allow_pure_convex = false;
  double grad_clip = 5.0;

  void validate() const {
    if (!(lr > 0.0)) throw std::invalid_argument("optimizer: lr must be positive");
    if (steps < 1) throw std::invalid_argument("optimizer: steps must be >= 1");
    if (batch_size < 1) throw std::invalid_argument("optimizer: batch_size must be >= 1");
    if (!(label_smoothing >= 0.0) || !(label_smoothing < 1.0))
      throw std::invalid_argument("optimizer: label_smoothing must lie in [0, 1)");
    if (!(grad_clip >= 0.0)) throw std::invalid_argument("optimizer: grad_clip must be >= 0");
  }
};

enum class GradPath { kExact, kDetachedWeight };

// Linear warmup, then inverse-sqrt decay; both factors meet at warmup_steps.
inline double lr_at(const OptimizerCfg& cfg, std::size_t step /*1-based*/) {
  if (cfg.warmup_steps == 0) return cfg.lr;
  const double w = static_cast<double>(cfg.warmup_steps);
  const double t = static_cast<double>(step);
  return cfg.lr * std::min(t / w, std::sqrt(w / t));
}

inline const char* kPowerWeightAbortMessage =
    "power composition weight is infinite: a training sequence reached probability 1 with "
    "exponent k < 1; lower the smoothing target, raise k, or stop fine-tuning";

namespace detail {

using BatchGroups = std::map<std::pair<std::size_t, std::vector<int>>, std::size_t>;

template <class M>
ad::NodeRef build_batch_loss(const M& model, ad::Graph& g, std::span<const ad::NodeRef> leaves,
                             const BatchGroups& groups, std::size_t batch_n,
                             const LossFamily& fam, double eps_ls, GradPath path,
                             std::size_t step) {
  const double t_len = static_cast<double>(model.seq_len());
  const double vocab = static_cast<double>(model.vocab_size());
  ad::NodeRef batch_loss;
  bool first = true;
  for (const auto& [key, count] : groups) {
    const auto& [context, seq] = key;
    const SeqGraphOut seq_out = build_sequence(model, g, leaves, context, seq);
    ad::NodeRef g_node = g.mul(seq_out.total_logprob, g.constant_scalar(1.0 / t_len));
    const double g_val = g.scalar_value(g_node);

    if (fam.kind() == LossKind::kPowerComposed && fam.k() < 1.0 && g_val == 0.0)
      throw TrainAbort(std::string(kPowerWeightAbortMessage) + " (step " +
                           std::to_string(step) + ")",
                       step);

    ad::NodeRef loss;
    if (path == GradPath::kExact) {
      switch (fam.kind()) {
        case LossKind::kLog:
          loss = g.mul(g_node, g.constant_scalar(-1.0));
          break;
        case LossKind::kExpComposed:
          loss = g.mul(g.exp(g.mul(g_node, g.constant_scalar(fam.k()))),
                       g.constant_scalar(-1.0));
          break;
        case LossKind::kPowerComposed:
          loss = g.pow(g.mul(g_node, g.constant_scalar(-1.0)), fam.k());
          break;
        case LossKind::kPureConvex: {
          ad::NodeRef p_node = g.exp(seq_out.total_logprob);
          if (fam.variant() == ConvexVariant::kExp) p_node = g.exp(p_node);
          loss = g.mul(p_node, g.constant_scalar(-1.0));
          break;
        }
      }
    } else {
      // Weight frozen at the current value; gradient flows only through g.
      const double w = weight_from_g(fam, g_val, t_len);
      if (!std::isfinite(w))
        throw TrainAbort(std::string(kPowerWeightAbortMessage) + " (step " +
                             std::to_string(step) + ")",
                         step);
      loss = g.mul(g_node, g.constant_scalar(-w));
    }

    if (eps_ls > 0.0) {
      const double w = weight_from_g(fam, g_val, t_len);
      if (!std::isfinite(w))
        throw TrainAbort(std::string(kPowerWeightAbortMessage) + " (step " +
                             std::to_string(step) + ")",
                         step);
      ad::NodeRef smooth =
          g.mul(seq_out.sum_all_logprobs, g.constant_scalar(-1.0 / (t_len * vocab)));
      loss = g.add(g.mul(loss, g.constant_scalar(1.0 - eps_ls)),
                   g.mul(smooth, g.constant_scalar(eps_ls * w)));
    }

    ad::NodeRef term =
        g.mul(loss, g.constant_scalar(static_cast<double>(count) / static_cast<double>(batch_n)));
    batch_loss = first ? term : g.add(batch_loss, term);
    first = false;
  }
  return batch_loss;
}

}  // namespace detail

// Minimizes the mean per-sequence loss over the dataset; mutates the model
// in place and returns the per-step loss curve. Deterministic for a fixed
// batch_seed.
template <class M>
std::vector<double> train_phase(M& model, const Dataset& data, const LossFamily& fam,
                                const OptimizerCfg& cfg, std::uint64_t batch_seed,
                                GradPath path = GradPath::kExact) {
  cfg.validate();
  if (data.items.empty()) throw std::invalid_argument("train_phase: dataset is empty");
  if (fam.kind() == LossKind::kPureConvex && !cfg.allow_pure_convex)
    throw std::invalid_argument(
        "train_phase: training directly on a pure convex loss stalls from random init; set "
        "allow_pure_convex to run it anyway");

  SplitMix64 rng(batch_seed);
  const std::size_t n = data.size();
  const bool full_batch = cfg.batch_size >= n;

  std::vector<std::vector<double>> m1, m2;
  for (const ParamTensor& p : model.params()) {
    m1.emplace_back(p.t.v.size(), 0.0);
    m2.emplace_back(p.t.v.size(), 0.0);
  }

  std::vector<double> curve;
  curve.reserve(cfg.steps);
  for (std::size_t step = 1; step <= cfg.steps; ++step) {
    detail::BatchGroups groups;
    if (full_batch) {
      for (const Example& e : data.items) ++groups[{e.context, e.seq}];
    } else {
      for (std::size_t i = 0; i < cfg.batch_size; ++i) {
        const Example& e = data.items[rng.index(n)];
        ++groups[{e.context, e.seq}];
      }
    }
    const std::size_t batch_n = full_batch ? n : cfg.batch_size;

    ad::Graph g;
    const std::vector<ad::NodeRef> leaves = model.make_leaves(g);
    const ad::NodeRef loss = detail::build_batch_loss(model, g, leaves, groups, batch_n, fam,
                                                      cfg.label_smoothing, path, step);
    const double loss_value = g.scalar_value(loss);
    if (!std::isfinite(loss_value))
      throw TrainAbort("training loss became non-finite at step " + std::to_string(step), step);
    curve.push_back(loss_value);

    g.backward(loss);

    double sq = 0.0;
    for (const ad::NodeRef leaf : leaves)
      for (double gv : g.grad(leaf)) sq += gv * gv;
    const double norm = std::sqrt(sq);
    if (!std::isfinite(norm))
      throw TrainAbort("gradient became non-finite at step " + std::to_string(step), step);
    const double scale = (cfg.grad_clip > 0.0 && norm > cfg.grad_clip) ? cfg.grad_clip / norm : 1.0;

    const double lr = lr_at(cfg, step);
    const double bc1 = 1.0 - std::pow(kAdamBeta1, static_cast<double>(step));
    const double bc2 = 1.0 - std::pow(kAdamBeta2, static_cast<double>(step));
    for (std::size_t pi = 0; pi < leaves.size(); ++pi) {
      const std::vector<double>& gr = g.grad(leaves[pi]);
      std::vector<double>& theta = model.params()[pi].t.v;
      for (std::size_t c = 0; c < theta.size(); ++c) {
        const double gv = gr[c] * scale;
        m1[pi][c] = kAdamBeta1 * m1[pi][c] + (1.0 - kAdamBeta1) * gv;
        m2[pi][c] = kAdamBeta2 * m2[pi][c] + (1.0 - kAdamBeta2) * gv * gv;
        const double mh = m1[pi][c] / bc1;
        const double vh = m2[pi][c] / bc2;
        theta[c] -= lr * mh / (std::sqrt(vh) + kAdamEps);
      }
    }
  }
  return curve;
}

struct PhasePlan {
  OptimizerCfg pretrain;
  OptimizerCfg finetune;
  LossFamily finetune_family = LossFamily::log_loss();
  std::vector<std::size_t> beam_widths = {1, 5};
  double argmax_tie_tol = 1e-12;  // data modes within this of the max count as argmax
};

struct PhaseResult {
  std::string name;  // "pretrain" or "finetune"
  std::vector<double> loss_curve;
  std::vector<MetricsBundle> metrics;  // one per context
  double wall_ms = 0.0;
};

struct RunRecord {
  std::string config_hash;
  std::uint64_t seed = 0;
  std::string model_class;
  std::string family;  // fine-tune family name
  double k = 0.0;      // fine-tune exponent; 0 when the family has none
  std::vector<PhaseResult> phases;
};

inline ModelConfig make_model_config(const SynthTask& task, std::size_t embed_dim,
                                     std::size_t hidden_dim) {
  return ModelConfig{task.num_contexts(), task.vocab, task.seq_len, embed_dim, hidden_dim};
}

namespace detail {

template <class M>
std::vector<MetricsBundle> eval_all_contexts(const M& model, const SynthTask& task,
                                             std::span<const std::size_t> beam_widths,
                                             double argmax_tie_tol) {
  std::vector<MetricsBundle> out;
  out.reserve(task.num_contexts());
  for (std::size_t c = 0; c < task.num_contexts(); ++c)
    out.push_back(eval_metrics(model, task, c, beam_widths, argmax_tie_tol));
  return out;
}

template <class M>
RunRecord run_two_phase_impl(const PhasePlan& plan, const SynthTask& task, const Dataset& data,
                             std::uint64_t seed, const ModelConfig& model_cfg,
                             const std::string& config_hash) {
  using Clock = std::chrono::steady_clock;
  M model(model_cfg, derive_seed(seed, 0));

  RunRecord rec;
  rec.config_hash = config_hash;
  rec.seed = seed;
  rec.model_class = model.model_class();
  rec.family = plan.finetune_family.name();
  rec.k = plan.finetune_family.uses_k() ? plan.finetune_family.k() : 0.0;

  {
    const auto t0 = Clock::now();
    PhaseResult phase;
    phase.name = "pretrain";
    phase.loss_curve =
        train_phase(model, data, LossFamily::log_loss(), plan.pretrain, derive_seed(seed, 1));
    phase.metrics = eval_all_contexts(model, task, plan.beam_widths, plan.argmax_tie_tol);
    phase.wall_ms = std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
    rec.phases.push_back(std::move(phase));
  }
  {
    const auto t0 = Clock::now();
    PhaseResult phase;
    phase.name = "finetune";
    phase.loss_curve =
        train_phase(model, data, plan.finetune_family, plan.finetune, derive_seed(seed, 2));
    phase.metrics = eval_all_contexts(model, task, plan.beam_widths, plan.argmax_tie_tol);
    phase.wall_ms = std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
    rec.phases.push_back(std::move(phase));
  }
  return rec;
}

}  // namespace detail

inline RunRecord run_two_phase(const PhasePlan& plan, const SynthTask& task, const Dataset& data,
                               std::uint64_t seed, const std::string& model_class,
                               const ModelConfig& model_cfg, const std::string& config_hash) {
  if (model_class == ArModel::kClassName)
    return detail::run_two_phase_impl<ArModel>(plan, task, data, seed, model_cfg, config_hash);
  if (model_class == NarModel::kClassName)
    return detail::run_two_phase_impl<NarModel>(plan, task, data, seed, model_cfg, config_hash);
  throw std::invalid_argument("run_two_phase: unknown model class '" + model_class + "'");
}

struct SweepSpec {
  std::vector<double> k_values;
  std::vector<std::uint64_t> seeds;
  std::size_t dataset_size = 4096;
  std::size_t jobs = 1;
};

inline LossFamily family_with_k(const LossFamily& base, double k) {
  switch (base.kind()) {
    case LossKind::kExpComposed:
      return LossFamily::exp_composed(k);
    case LossKind::kPowerComposed:
      return LossFamily::power_composed(k);
    default:
      throw std::invalid_argument("family_with_k: family '" + base.name() +
                                  "' has no exponent to sweep");
  }
}

// Full cross-product of k values and seeds. Each run derives every RNG
// stream from its own seed, so results are independent of scheduling;
// records come back ordered by (k, seed).
inline std::vector<RunRecord> sweep_k(
    const PhasePlan& base_plan, const SynthTask& task, const std::string& model_class,
    const ModelConfig& model_cfg, const SweepSpec& sweep,
    const std::function<std::string(double)>& hash_for_k) {
  if (sweep.k_values.empty()) throw std::invalid_argument("sweep_k: no k values");
  if (sweep.seeds.empty()) throw std::invalid_argument("sweep_k: no seeds");

  struct Job {
    double k;
    std::uint64_t seed;
  };
  std::vector<Job> jobs;
  for (double k : sweep.k_values)
    for (std::uint64_t s : sweep.seeds) jobs.push_back({k, s});

  std::vector<RunRecord> records(jobs.size());
  std::atomic<std::size_t> next{0};
  std::mutex err_mu;
  std::exception_ptr first_error;

  auto worker = [&]() {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= jobs.size()) return;
      try {
        PhasePlan plan = base_plan;
        plan.finetune_family = family_with_k(base_plan.finetune_family, jobs[i].k);
        const Dataset data =
            sample_dataset(task, sweep.dataset_size, derive_seed(jobs[i].seed, 3));
        records[i] = run_two_phase(plan, task, data, jobs[i].seed, model_class, model_cfg,
                                   hash_for_k(jobs[i].k));
      } catch (...) {
        std::lock_guard<std::mutex> lock(err_mu);
        if (!first_error) first_error = std::current_exception();
        return;
      }
    }
  };

  const std::size_t nthreads = std::max<std::size_t>(1, std::min(sweep.jobs, jobs.size()));
  if (nthreads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    pool.reserve(nthreads);
    for (std::size_t i = 0; i < nthreads; ++i) pool.emplace_back(worker);
    for (std::thread& th : pool) th.join();
  }
  if (first_error) std::rethrow_exception(first_error);
  return records;
}

}  // namespace convexlab
