#pragma once

// Experiment configuration: a strict JSON schema (unknown keys are errors,
// named in the message), defaults filled during parsing, and a canonical
// normalized form whose FNV-1a hash identifies the run configuration.
// seeds, k_sweep, and out_dir never enter the hash; the effective fine-tune
// exponent does, so every point of a sweep gets its own record filename.

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <initializer_list>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "convexlab/loss.hpp"
#include "convexlab/serialize.hpp"
#include "convexlab/synth_tasks.hpp"
#include "convexlab/trainer.hpp"

namespace convexlab {

class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

struct ExperimentConfig {
  SynthTask task;
  Json task_norm;  // normalized task subtree, part of the hash

  std::string model_class;  // "ar" | "nar"
  std::size_t embed_dim = 8;
  std::size_t hidden_dim = 32;

  OptimizerCfg pretrain;
  OptimizerCfg finetune;
  LossFamily finetune_family = LossFamily::log_loss();

  std::size_t dataset_size = 4096;
  std::vector<std::uint64_t> seeds;
  std::vector<double> k_sweep;  // empty: single run per seed at finetune's k
  std::string out_dir;
  std::vector<std::size_t> beam_widths = {1, 5};
  double argmax_tie_tol = 1e-12;
};

inline std::string fnv1a_hex(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return std::string(buf);
}

namespace detail {

inline void check_keys(const Json& obj, const std::string& where,
                       std::initializer_list<const char*> required,
                       std::initializer_list<const char*> optional) {
  if (!obj.is_object()) throw ConfigError("config: '" + where + "' must be an object");
  std::set<std::string> known;
  for (const char* k : required) known.insert(k);
  for (const char* k : optional) known.insert(k);
  for (const auto& [key, value] : obj.items())
    if (!known.count(key)) throw ConfigError("unknown config key: " + where + "." + key);
  for (const char* k : required)
    if (!obj.contains(k)) throw ConfigError("missing config key: " + where + "." + k);
}

template <class T>
T get_field(const Json& obj, const std::string& where, const char* key) {
  try {
    return obj.at(key).get<T>();
  } catch (const Json::exception&) {
    throw ConfigError("config key has the wrong type: " + where + "." + std::string(key));
  }
}

template <class T>
T get_field_or(const Json& obj, const std::string& where, const char* key, T fallback) {
  if (!obj.contains(key)) return fallback;
  return get_field<T>(obj, where, key);
}

inline OptimizerCfg parse_optimizer(const Json& j, const std::string& where,
                                    const OptimizerCfg& defaults,
                                    bool allow_family_keys) {
  if (allow_family_keys)
    check_keys(j, where, {},
               {"family", "k", "lr", "steps", "batch_size", "warmup_steps", "label_smoothing",
                "allow_pure_convex", "grad_clip"});
  else
    check_keys(j, where, {},
               {"lr", "steps", "batch_size", "warmup_steps", "label_smoothing",
                "allow_pure_convex", "grad_clip"});
  OptimizerCfg cfg = defaults;
  cfg.lr = get_field_or(j, where, "lr", defaults.lr);
  cfg.steps = get_field_or(j, where, "steps", defaults.steps);
  cfg.batch_size = get_field_or(j, where, "batch_size", defaults.batch_size);
  cfg.warmup_steps = get_field_or(j, where, "warmup_steps", defaults.warmup_steps);
  cfg.label_smoothing = get_field_or(j, where, "label_smoothing", defaults.label_smoothing);
  cfg.allow_pure_convex = get_field_or(j, where, "allow_pure_convex", false);
  cfg.grad_clip = get_field_or(j, where, "grad_clip", defaults.grad_clip);
  try {
    cfg.validate();
  } catch (const std::exception& e) {
    throw ConfigError("config: " + where + ": " + e.what());
  }
  return cfg;
}

inline Json optimizer_norm(const OptimizerCfg& cfg) {
  return Json{{"lr", cfg.lr},
              {"steps", cfg.steps},
              {"batch_size", cfg.batch_size},
              {"warmup_steps", cfg.warmup_steps},
              {"label_smoothing", cfg.label_smoothing},
              {"allow_pure_convex", cfg.allow_pure_convex},
              {"grad_clip", cfg.grad_clip}};
}

inline LossFamily parse_family(const Json& j, const std::string& where) {
  const std::string fam = get_field<std::string>(j, where, "family");
  const bool has_k = j.contains("k");
  auto need_k = [&]() {
    if (!has_k) throw ConfigError("missing config key: " + where + ".k");
    return get_field<double>(j, where, "k");
  };
  try {
    if (fam == "log") {
      if (has_k) throw ConfigError("config key " + where + ".k is only valid for exp/power");
      return LossFamily::log_loss();
    }
    if (fam == "exp") return LossFamily::exp_composed(need_k());
    if (fam == "power") return LossFamily::power_composed(need_k());
    if (fam == "convex_identity" || fam == "convex_exp") {
      if (has_k) throw ConfigError("config key " + where + ".k is only valid for exp/power");
      return LossFamily::pure_convex(fam == "convex_exp" ? ConvexVariant::kExp
                                                         : ConvexVariant::kIdentity);
    }
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError("config: " + where + ": " + e.what());
  }
  throw ConfigError("config: " + where + ".family must be one of log, exp, power, "
                    "convex_identity, convex_exp");
}

}  // namespace detail

inline ExperimentConfig parse_experiment_config(const Json& j) {
  detail::check_keys(j, "config",
                     {"task", "model", "pretrain", "finetune", "dataset_size", "seeds", "out_dir"},
                     {"k_sweep", "beam_widths", "tolerances"});
  ExperimentConfig cfg;

  const Json& tj = j.at("task");
  const std::string task_type = detail::get_field<std::string>(tj, "task", "type");
  try {
    if (task_type == "generated") {
      detail::check_keys(tj, "task", {"type", "vocab", "seq_len", "num_contexts"},
                         {"support_size", "geometric_ratio", "task_seed"});
      const Vocab vocab(detail::get_field<std::string>(tj, "task", "vocab"));
      const std::size_t seq_len = detail::get_field<std::size_t>(tj, "task", "seq_len");
      GenerateOptions gen;
      gen.num_contexts = detail::get_field<std::size_t>(tj, "task", "num_contexts");
      gen.support_size = detail::get_field_or<std::size_t>(tj, "task", "support_size", 4);
      gen.geometric_ratio = detail::get_field_or<double>(tj, "task", "geometric_ratio", 0.75);
      gen.seed = detail::get_field_or<std::uint64_t>(tj, "task", "task_seed", 0);
      cfg.task = generate_task(vocab, seq_len, gen);
      cfg.task_norm = Json{{"type", "generated"},
                           {"vocab", vocab.symbols()},
                           {"seq_len", seq_len},
                           {"num_contexts", gen.num_contexts},
                           {"support_size", gen.support_size},
                           {"geometric_ratio", gen.geometric_ratio},
                           {"task_seed", gen.seed}};
    } else if (task_type == "explicit") {
      detail::check_keys(tj, "task", {"type", "vocab", "seq_len", "contexts"}, {});
      const Vocab vocab(detail::get_field<std::string>(tj, "task", "vocab"));
      const std::size_t seq_len = detail::get_field<std::size_t>(tj, "task", "seq_len");
      std::vector<std::vector<std::pair<std::string, double>>> per_context;
      const Json& contexts = tj.at("contexts");
      if (!contexts.is_array() || contexts.empty())
        throw ConfigError("config: task.contexts must be a non-empty array");
      for (const Json& ctx : contexts) {
        if (!ctx.is_object()) throw ConfigError("config: each task context must be an object");
        std::vector<std::pair<std::string, double>> atoms;
        for (const auto& [label, p] : ctx.items()) {
          if (!p.is_number()) throw ConfigError("config: atom probabilities must be numbers");
          atoms.emplace_back(label, p.get<double>());
        }
        per_context.push_back(std::move(atoms));
      }
      cfg.task = make_explicit_task(vocab, seq_len, per_context);
      Json norm_contexts = Json::array();
      for (const FiniteDistribution& d : cfg.task.contexts) {
        Json atoms = Json::object();
        for (std::size_t i = 0; i < d.size(); ++i) atoms[d.labels[i]] = d.probs[i];
        norm_contexts.push_back(atoms);
      }
      cfg.task_norm = Json{{"type", "explicit"},
                           {"vocab", vocab.symbols()},
                           {"seq_len", seq_len},
                           {"contexts", norm_contexts}};
    } else {
      throw ConfigError("config: task.type must be 'generated' or 'explicit'");
    }
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError("config: task: " + std::string(e.what()));
  }

  const Json& mj = j.at("model");
  detail::check_keys(mj, "model", {"class"}, {"embed_dim", "hidden_dim"});
  cfg.model_class = detail::get_field<std::string>(mj, "model", "class");
  if (cfg.model_class != "ar" && cfg.model_class != "nar")
    throw ConfigError("config: model.class must be 'ar' or 'nar'");
  cfg.embed_dim = detail::get_field_or<std::size_t>(mj, "model", "embed_dim", 8);
  cfg.hidden_dim = detail::get_field_or<std::size_t>(mj, "model", "hidden_dim", 32);
  if (cfg.embed_dim < 1 || cfg.hidden_dim < 1)
    throw ConfigError("config: model dims must be >= 1");

  OptimizerCfg pre_defaults;
  pre_defaults.lr = 5e-3;
  pre_defaults.steps = 2000;
  pre_defaults.batch_size = 64;
  pre_defaults.warmup_steps = 100;
  pre_defaults.label_smoothing = 0.1;
  cfg.pretrain = detail::parse_optimizer(j.at("pretrain"), "pretrain", pre_defaults, false);

  OptimizerCfg fin_defaults;
  fin_defaults.lr = 1e-3;
  fin_defaults.steps = 500;
  fin_defaults.batch_size = 64;
  fin_defaults.warmup_steps = 100;
  fin_defaults.label_smoothing = 0.0;
  cfg.finetune = detail::parse_optimizer(j.at("finetune"), "finetune", fin_defaults, true);
  cfg.finetune_family = detail::parse_family(j.at("finetune"), "finetune");
  if (cfg.finetune_family.kind() == LossKind::kPureConvex && !cfg.finetune.allow_pure_convex)
    throw ConfigError(
        "config: finetune.allow_pure_convex must be true to fine-tune a pure convex family");

  cfg.dataset_size = detail::get_field<std::size_t>(j, "config", "dataset_size");
  if (cfg.dataset_size < 1) throw ConfigError("config: dataset_size must be >= 1");

  cfg.seeds = detail::get_field<std::vector<std::uint64_t>>(j, "config", "seeds");
  if (cfg.seeds.empty()) throw ConfigError("config: seeds must be a non-empty list");

  if (j.contains("k_sweep")) {
    cfg.k_sweep = detail::get_field<std::vector<double>>(j, "config", "k_sweep");
    if (cfg.k_sweep.empty()) throw ConfigError("config: k_sweep must be non-empty when present");
    if (!cfg.finetune_family.uses_k())
      throw ConfigError("config: k_sweep requires an exp or power fine-tune family");
  }

  cfg.out_dir = detail::get_field<std::string>(j, "config", "out_dir");
  if (cfg.out_dir.empty()) throw ConfigError("config: out_dir must be non-empty");

  if (j.contains("beam_widths")) {
    cfg.beam_widths = detail::get_field<std::vector<std::size_t>>(j, "config", "beam_widths");
    if (cfg.beam_widths.empty())
      throw ConfigError("config: beam_widths must be non-empty when present");
    for (std::size_t w : cfg.beam_widths)
      if (w < 1) throw ConfigError("config: beam widths must be >= 1");
  }

  if (j.contains("tolerances")) {
    const Json& tol = j.at("tolerances");
    detail::check_keys(tol, "tolerances", {}, {"argmax_tie"});
    cfg.argmax_tie_tol = detail::get_field_or<double>(tol, "tolerances", "argmax_tie", 1e-12);
    if (!(cfg.argmax_tie_tol >= 0.0))
      throw ConfigError("config: tolerances.argmax_tie must be >= 0");
  }

  return cfg;
}

inline ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path.string());
  Json j;
  try {
    in >> j;
  } catch (const Json::exception& e) {
    throw ConfigError("config parse error in " + path.string() + ": " + e.what());
  }
  return parse_experiment_config(j);
}

// Canonical form of everything that determines a run's result except the
// seed: sorted-key dump of task, model, both phases, and the effective
// fine-tune exponent.
inline Json normalized_config_json(const ExperimentConfig& cfg, double k_effective) {
  Json finetune = detail::optimizer_norm(cfg.finetune);
  finetune["family"] = cfg.finetune_family.name();
  if (cfg.finetune_family.uses_k()) finetune["k"] = k_effective;
  return Json{{"task", cfg.task_norm},
              {"model", Json{{"class", cfg.model_class},
                             {"embed_dim", cfg.embed_dim},
                             {"hidden_dim", cfg.hidden_dim}}},
              {"pretrain", detail::optimizer_norm(cfg.pretrain)},
              {"finetune", finetune},
              {"dataset_size", cfg.dataset_size},
              {"beam_widths", cfg.beam_widths},
              {"argmax_tie_tol", cfg.argmax_tie_tol}};
}

inline std::string config_hash(const ExperimentConfig& cfg, double k_effective) {
  return fnv1a_hex(normalized_config_json(cfg, k_effective).dump());
}

inline PhasePlan make_phase_plan(const ExperimentConfig& cfg, double k_effective) {
  PhasePlan plan;
  plan.pretrain = cfg.pretrain;
  plan.finetune = cfg.finetune;
  plan.finetune_family = cfg.finetune_family.uses_k()
                             ? family_with_k(cfg.finetune_family, k_effective)
                             : cfg.finetune_family;
  plan.beam_widths = cfg.beam_widths;
  plan.argmax_tie_tol = cfg.argmax_tie_tol;
  return plan;
}

}  // namespace convexlab
