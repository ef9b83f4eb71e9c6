#pragma once

// JSON and CSV persistence: run records (one file per run, named
// <confighash>-<seed>.json), model checkpoints (shapes + flat arrays), and
// task/dataset round-trips. All emitters are pure functions of their
// inputs; doubles serialize with round-trip precision, and JSON object keys
// are emitted in sorted order, so reruns produce byte-identical files
// (wall-clock fields aside).

#include <filesystem>
#include <fstream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "convexlab/decode_metrics.hpp"
#include "convexlab/distribution.hpp"
#include "convexlab/seq_models.hpp"
#include "convexlab/synth_tasks.hpp"
#include "convexlab/trainer.hpp"

namespace convexlab {

using Json = nlohmann::json;

inline Json metrics_to_json(const MetricsBundle& b) {
  Json beams = Json::array();
  for (const BeamMatch& bm : b.beam_match)
    beams.push_back(Json{{"width", bm.width}, {"match", bm.match}});
  return Json{{"kl_nats", b.kl_nats},
              {"kl_clamped", b.kl_clamped},
              {"entropy_nats", b.entropy_nats},
              {"output_nll", b.output_nll},
              {"greedy_match", b.greedy_match},
              {"beam_match", beams},
              {"exact_match", b.exact_match},
              {"mixture_rate", b.mixture_rate},
              {"top_n_mass", b.top_n_mass}};
}

inline MetricsBundle metrics_from_json(const Json& j) {
  MetricsBundle b;
  b.kl_nats = j.at("kl_nats").get<double>();
  b.kl_clamped = j.at("kl_clamped").get<bool>();
  b.entropy_nats = j.at("entropy_nats").get<double>();
  b.output_nll = j.at("output_nll").get<double>();
  b.greedy_match = j.at("greedy_match").get<bool>();
  for (const Json& bm : j.at("beam_match"))
    b.beam_match.push_back({bm.at("width").get<std::size_t>(), bm.at("match").get<bool>()});
  b.exact_match = j.at("exact_match").get<bool>();
  b.mixture_rate = j.at("mixture_rate").get<double>();
  b.top_n_mass = j.at("top_n_mass").get<std::vector<double>>();
  return b;
}

inline Json run_record_to_json(const RunRecord& rec) {
  Json phases = Json::array();
  for (const PhaseResult& p : rec.phases) {
    Json metrics = Json::array();
    for (const MetricsBundle& m : p.metrics) metrics.push_back(metrics_to_json(m));
    phases.push_back(Json{{"name", p.name},
                          {"loss_curve", p.loss_curve},
                          {"metrics", metrics},
                          {"wall_ms", p.wall_ms}});
  }
  return Json{{"config_hash", rec.config_hash}, {"seed", rec.seed},
              {"model_class", rec.model_class}, {"family", rec.family},
              {"k", rec.k},                     {"phases", phases}};
}

inline RunRecord run_record_from_json(const Json& j) {
  RunRecord rec;
  rec.config_hash = j.at("config_hash").get<std::string>();
  rec.seed = j.at("seed").get<std::uint64_t>();
  rec.model_class = j.at("model_class").get<std::string>();
  rec.family = j.at("family").get<std::string>();
  rec.k = j.at("k").get<double>();
  for (const Json& pj : j.at("phases")) {
    PhaseResult p;
    p.name = pj.at("name").get<std::string>();
    p.loss_curve = pj.at("loss_curve").get<std::vector<double>>();
    for (const Json& mj : pj.at("metrics")) p.metrics.push_back(metrics_from_json(mj));
    p.wall_ms = pj.at("wall_ms").get<double>();
    rec.phases.push_back(std::move(p));
  }
  return rec;
}

inline std::string run_record_filename(const RunRecord& rec) {
  return rec.config_hash + "-" + std::to_string(rec.seed) + ".json";
}

inline std::filesystem::path write_run_record(const std::filesystem::path& dir,
                                              const RunRecord& rec) {
  std::filesystem::create_directories(dir);
  const std::filesystem::path path = dir / run_record_filename(rec);
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << run_record_to_json(rec).dump(2) << "\n";
  return path;
}

inline RunRecord read_run_record(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open run record: " + path.string());
  Json j;
  in >> j;
  return run_record_from_json(j);
}

// All record files in a directory, sorted by filename for deterministic
// aggregation order.
inline std::vector<std::filesystem::path> list_run_records(const std::filesystem::path& dir) {
  std::vector<std::filesystem::path> out;
  if (!std::filesystem::is_directory(dir)) return out;
  for (const auto& entry : std::filesystem::directory_iterator(dir))
    if (entry.is_regular_file() && entry.path().extension() == ".json")
      out.push_back(entry.path());
  std::sort(out.begin(), out.end());
  return out;
}

// --- Model checkpoints. ----------------------------------------------------

template <class M>
Json model_to_json(const M& model, std::uint64_t seed, const std::string& config_hash) {
  Json params = Json::array();
  for (const ParamTensor& p : model.params())
    params.push_back(Json{{"name", p.name}, {"shape", p.t.shape}, {"values", p.t.v}});
  const ModelConfig& cfg = model.config();
  return Json{{"model_class", model.model_class()},
              {"config_hash", config_hash},
              {"seed", seed},
              {"vocab", cfg.vocab.symbols()},
              {"seq_len", cfg.seq_len},
              {"num_contexts", cfg.num_contexts},
              {"embed_dim", cfg.embed_dim},
              {"hidden_dim", cfg.hidden_dim},
              {"params", params}};
}

// Loads parameter values into an already-constructed model; names and
// shapes must match exactly.
template <class M>
void load_params_from_json(M& model, const Json& j) {
  if (j.at("model_class").get<std::string>() != model.model_class())
    throw std::invalid_argument("checkpoint: model class mismatch");
  const Json& params = j.at("params");
  if (params.size() != model.params().size())
    throw std::invalid_argument("checkpoint: parameter count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    ParamTensor& p = model.params()[i];
    const Json& pj = params[i];
    if (pj.at("name").get<std::string>() != p.name)
      throw std::invalid_argument("checkpoint: parameter name mismatch at index " +
                                  std::to_string(i));
    if (pj.at("shape").get<std::vector<std::size_t>>() != p.t.shape)
      throw std::invalid_argument("checkpoint: shape mismatch for " + p.name);
    p.t.v = pj.at("values").get<std::vector<double>>();
    if (p.t.v.size() != ad::shape_size(p.t.shape))
      throw std::invalid_argument("checkpoint: value count mismatch for " + p.name);
  }
}

// --- Tasks and datasets. -----------------------------------------------------

inline Json task_to_json(const SynthTask& task) {
  Json contexts = Json::array();
  for (const FiniteDistribution& d : task.contexts) {
    Json atoms = Json::object();
    for (std::size_t i = 0; i < d.size(); ++i) atoms[d.labels[i]] = d.probs[i];
    contexts.push_back(atoms);
  }
  return Json{{"vocab", task.vocab.symbols()}, {"seq_len", task.seq_len}, {"contexts", contexts}};
}

inline SynthTask task_from_json(const Json& j) {
  const Vocab vocab(j.at("vocab").get<std::string>());
  const std::size_t seq_len = j.at("seq_len").get<std::size_t>();
  std::vector<std::vector<std::pair<std::string, double>>> per_context;
  for (const Json& ctx : j.at("contexts")) {
    std::vector<std::pair<std::string, double>> atoms;
    for (const auto& [label, p] : ctx.items()) atoms.emplace_back(label, p.get<double>());
    per_context.push_back(std::move(atoms));
  }
  return make_explicit_task(vocab, seq_len, per_context);
}

inline Json dataset_to_json(const Dataset& data, const Vocab& vocab) {
  Json items = Json::array();
  for (const Example& e : data.items)
    items.push_back(Json{{"context", e.context}, {"sequence", vocab.decode(e.seq)}});
  return Json{{"items", items}};
}

inline void dataset_to_csv(const Dataset& data, const Vocab& vocab,
                           const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "context,sequence\n";
  for (const Example& e : data.items) out << e.context << "," << vocab.decode(e.seq) << "\n";
}

}  // namespace convexlab
