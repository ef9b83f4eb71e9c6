#pragma once

// Two toy sequence models over a small character vocabulary, each usable in
// two modes that must agree: plain-loop evaluation (step_logprobs) and a
// differentiable graph build (build_step / build_sequence) for training.
//
//   ArModel:  next-token factorized. Each step sees the context embedding
//             plus one-hot encodings of the emitted prefix through a shared
//             tanh layer, then a per-position output head.
//   NarModel: position factorized. Each position's logits depend only on
//             the context embedding; the emitted prefix carries no signal,
//             so the model can only represent products of per-position
//             marginals.
//
// Both expose the same stepping interface (context, prefix) -> log-prob row,
// so decoding and exhaustive enumeration are written once, generically.

#include <cmath>
#include <concepts>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "convexlab/autodiff.hpp"
#include "convexlab/distribution.hpp"
#include "convexlab/loss.hpp"
#include "convexlab/rng.hpp"

namespace convexlab {

class Vocab {
 public:
  explicit Vocab(std::string symbols) : symbols_(std::move(symbols)) {
    if (symbols_.size() < 2 || symbols_.size() > 8)
      throw std::invalid_argument("vocab: size must lie in [2, 8]");
    for (std::size_t i = 0; i < symbols_.size(); ++i)
      for (std::size_t j = i + 1; j < symbols_.size(); ++j)
        if (symbols_[i] == symbols_[j])
          throw std::invalid_argument("vocab: duplicate symbol '" +
                                      std::string(1, symbols_[i]) + "'");
  }

  static Vocab standard(std::size_t n) {
    const std::string all = "abcdefgh";
    if (n < 2 || n > all.size())
      throw std::invalid_argument("vocab: size must lie in [2, 8]");
    return Vocab(all.substr(0, n));
  }

  std::size_t size() const { return symbols_.size(); }
  char symbol(std::size_t i) const { return symbols_.at(i); }
  const std::string& symbols() const { return symbols_; }

  int index(char c) const {
    const std::size_t pos = symbols_.find(c);
    if (pos == std::string::npos)
      throw std::invalid_argument("vocab: unknown symbol '" + std::string(1, c) + "'");
    return static_cast<int>(pos);
  }

  std::vector<int> encode(std::string_view s) const {
    std::vector<int> out;
    out.reserve(s.size());
    for (char c : s) out.push_back(index(c));
    return out;
  }

  std::string decode(std::span<const int> toks) const {
    std::string out;
    out.reserve(toks.size());
    for (int t : toks) out += symbol(static_cast<std::size_t>(t));
    return out;
  }

 private:
  std::string symbols_;
};

struct ModelConfig {
  std::size_t num_contexts = 1;
  Vocab vocab = Vocab::standard(2);
  std::size_t seq_len = 2;
  std::size_t embed_dim = 8;
  std::size_t hidden_dim = 32;

  void validate() const {
    if (num_contexts < 1) throw std::invalid_argument("model config: num_contexts must be >= 1");
    if (seq_len < 1 || seq_len > 64)
      throw std::invalid_argument("model config: seq_len must lie in [1, 64]");
    if (embed_dim < 1 || hidden_dim < 1)
      throw std::invalid_argument("model config: dims must be >= 1");
  }
};

struct ParamTensor {
  std::string name;
  ad::Tensor t;
};

struct SeqGraphOut {
  ad::NodeRef total_logprob;     // scalar: log-prob of the whole sequence
  ad::NodeRef sum_all_logprobs;  // scalar: sum of every entry of every step row
};

namespace detail {

// Identical arithmetic to the graph's log_softmax primitive, so the two
// model modes agree bit for bit.
inline void log_softmax_inplace(std::vector<double>& x) {
  double mx = x[0];
  for (std::size_t j = 1; j < x.size(); ++j) mx = std::max(mx, x[j]);
  double z = 0.0;
  for (double v : x) z += std::exp(v - mx);
  const double lz = std::log(z);
  for (double& v : x) v = v - mx - lz;
}

inline void init_uniform(std::vector<ParamTensor>& params, std::uint64_t seed) {
  SplitMix64 rng(seed);
  for (ParamTensor& p : params)
    for (double& v : p.t.v) v = rng.symmetric(0.1);
}

inline void check_context_prefix(const ModelConfig& cfg, std::size_t context,
                                 std::span<const int> prefix) {
  if (context >= cfg.num_contexts)
    throw std::invalid_argument("model: context id out of range");
  if (prefix.size() >= cfg.seq_len)
    throw std::invalid_argument("model: prefix length must be < seq_len");
  for (int t : prefix)
    if (t < 0 || static_cast<std::size_t>(t) >= cfg.vocab.size())
      throw std::invalid_argument("model: prefix token out of range");
}

inline void check_sequence(const ModelConfig& cfg, std::span<const int> seq) {
  if (seq.size() != cfg.seq_len)
    throw std::invalid_argument("model: sequence length mismatch");
  for (int t : seq)
    if (t < 0 || static_cast<std::size_t>(t) >= cfg.vocab.size())
      throw std::invalid_argument("model: sequence token out of range");
}

}  // namespace detail

class ArModel {
 public:
  static constexpr const char* kClassName = "ar";

  ArModel(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    const std::size_t c = cfg_.num_contexts, v = cfg_.vocab.size();
    const std::size_t d = cfg_.embed_dim, h = cfg_.hidden_dim, t = cfg_.seq_len;
    const std::size_t in_dim = d + t * v;
    params_.push_back({"context_embed", ad::Tensor::zeros({c, d})});
    params_.push_back({"w_in", ad::Tensor::zeros({in_dim, h})});
    params_.push_back({"b_in", ad::Tensor::zeros({h})});
    for (std::size_t s = 0; s < t; ++s) {
      params_.push_back({"w_out_" + std::to_string(s), ad::Tensor::zeros({h, v})});
      params_.push_back({"b_out_" + std::to_string(s), ad::Tensor::zeros({v})});
    }
    detail::init_uniform(params_, seed);
  }

  const ModelConfig& config() const { return cfg_; }
  const Vocab& vocab() const { return cfg_.vocab; }
  std::size_t vocab_size() const { return cfg_.vocab.size(); }
  std::size_t seq_len() const { return cfg_.seq_len; }
  std::size_t num_contexts() const { return cfg_.num_contexts; }
  std::string model_class() const { return kClassName; }

  std::vector<ParamTensor>& params() { return params_; }
  const std::vector<ParamTensor>& params() const { return params_; }

  ParamTensor& param(std::string_view name) {
    for (ParamTensor& p : params_)
      if (p.name == name) return p;
    throw std::invalid_argument("model: no parameter named " + std::string(name));
  }

  std::vector<double> step_logprobs(std::size_t context, std::span<const int> prefix) const {
    detail::check_context_prefix(cfg_, context, prefix);
    const std::size_t v = cfg_.vocab.size(), d = cfg_.embed_dim, h = cfg_.hidden_dim;
    const std::size_t in_dim = d + cfg_.seq_len * v;
    const std::size_t step = prefix.size();

    std::vector<double> x(in_dim, 0.0);
    const std::vector<double>& emb = params_[0].t.v;
    for (std::size_t i = 0; i < d; ++i) x[i] = emb[context * d + i];
    for (std::size_t s = 0; s < step; ++s)
      x[d + s * v + static_cast<std::size_t>(prefix[s])] = 1.0;

    const std::vector<double>& w_in = params_[1].t.v;
    const std::vector<double>& b_in = params_[2].t.v;
    std::vector<double> hid(h, 0.0);
    for (std::size_t i = 0; i < in_dim; ++i) {
      if (x[i] == 0.0) continue;
      for (std::size_t j = 0; j < h; ++j) hid[j] += x[i] * w_in[i * h + j];
    }
    for (std::size_t j = 0; j < h; ++j) hid[j] = std::tanh(hid[j] + b_in[j]);

    const std::vector<double>& w_out = params_[3 + 2 * step].t.v;
    const std::vector<double>& b_out = params_[4 + 2 * step].t.v;
    std::vector<double> logits(v, 0.0);
    for (std::size_t j = 0; j < h; ++j) {
      if (hid[j] == 0.0) continue;
      for (std::size_t col = 0; col < v; ++col) logits[col] += hid[j] * w_out[j * v + col];
    }
    for (std::size_t col = 0; col < v; ++col) logits[col] += b_out[col];
    detail::log_softmax_inplace(logits);
    return logits;
  }

  std::vector<ad::NodeRef> make_leaves(ad::Graph& g) const {
    std::vector<ad::NodeRef> out;
    out.reserve(params_.size());
    for (const ParamTensor& p : params_) out.push_back(g.parameter(p.name, p.t));
    return out;
  }

  ad::NodeRef build_step(ad::Graph& g, std::span<const ad::NodeRef> leaves, std::size_t context,
                         std::span<const int> prefix) const {
    detail::check_context_prefix(cfg_, context, prefix);
    const std::size_t v = cfg_.vocab.size();
    const std::size_t step = prefix.size();

    std::vector<double> onehot_ctx(cfg_.num_contexts, 0.0);
    onehot_ctx[context] = 1.0;
    ad::NodeRef emb =
        g.matmul(g.constant(ad::Tensor({cfg_.num_contexts}, std::move(onehot_ctx))), leaves[0]);

    std::vector<double> pfx(cfg_.seq_len * v, 0.0);
    for (std::size_t s = 0; s < step; ++s)
      pfx[s * v + static_cast<std::size_t>(prefix[s])] = 1.0;
    ad::NodeRef x = g.concat({emb, g.constant(ad::Tensor({cfg_.seq_len * v}, std::move(pfx)))}, 0);

    ad::NodeRef hid = g.tanh(g.add(g.matmul(x, leaves[1]), leaves[2]));
    ad::NodeRef logits =
        g.add(g.matmul(hid, leaves[3 + 2 * step]), leaves[4 + 2 * step]);
    return g.log_softmax(logits);
  }

 private:
  ModelConfig cfg_;
  std::vector<ParamTensor> params_;
};

class NarModel {
 public:
  static constexpr const char* kClassName = "nar";

  NarModel(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    const std::size_t c = cfg_.num_contexts, v = cfg_.vocab.size();
    const std::size_t d = cfg_.embed_dim, t = cfg_.seq_len;
    params_.push_back({"context_embed", ad::Tensor::zeros({c, d})});
    for (std::size_t s = 0; s < t; ++s) {
      params_.push_back({"w_pos_" + std::to_string(s), ad::Tensor::zeros({d, v})});
      params_.push_back({"b_pos_" + std::to_string(s), ad::Tensor::zeros({v})});
    }
    detail::init_uniform(params_, seed);
  }

  const ModelConfig& config() const { return cfg_; }
  const Vocab& vocab() const { return cfg_.vocab; }
  std::size_t vocab_size() const { return cfg_.vocab.size(); }
  std::size_t seq_len() const { return cfg_.seq_len; }
  std::size_t num_contexts() const { return cfg_.num_contexts; }
  std::string model_class() const { return kClassName; }

  std::vector<ParamTensor>& params() { return params_; }
  const std::vector<ParamTensor>& params() const { return params_; }

  ParamTensor& param(std::string_view name) {
    for (ParamTensor& p : params_)
      if (p.name == name) return p;
    throw std::invalid_argument("model: no parameter named " + std::string(name));
  }

  // Only prefix.size() matters: the position picks the head.
  std::vector<double> step_logprobs(std::size_t context, std::span<const int> prefix) const {
    detail::check_context_prefix(cfg_, context, prefix);
    const std::size_t v = cfg_.vocab.size(), d = cfg_.embed_dim;
    const std::size_t step = prefix.size();

    const std::vector<double>& emb = params_[0].t.v;
    const std::vector<double>& w = params_[1 + 2 * step].t.v;
    const std::vector<double>& b = params_[2 + 2 * step].t.v;
    std::vector<double> logits(v, 0.0);
    for (std::size_t i = 0; i < d; ++i) {
      const double e = emb[context * d + i];
      if (e == 0.0) continue;
      for (std::size_t col = 0; col < v; ++col) logits[col] += e * w[i * v + col];
    }
    for (std::size_t col = 0; col < v; ++col) logits[col] += b[col];
    detail::log_softmax_inplace(logits);
    return logits;
  }

  std::vector<ad::NodeRef> make_leaves(ad::Graph& g) const {
    std::vector<ad::NodeRef> out;
    out.reserve(params_.size());
    for (const ParamTensor& p : params_) out.push_back(g.parameter(p.name, p.t));
    return out;
  }

  ad::NodeRef build_step(ad::Graph& g, std::span<const ad::NodeRef> leaves, std::size_t context,
                         std::span<const int> prefix) const {
    detail::check_context_prefix(cfg_, context, prefix);
    const std::size_t step = prefix.size();
    std::vector<double> onehot_ctx(cfg_.num_contexts, 0.0);
    onehot_ctx[context] = 1.0;
    ad::NodeRef emb =
        g.matmul(g.constant(ad::Tensor({cfg_.num_contexts}, std::move(onehot_ctx))), leaves[0]);
    ad::NodeRef logits = g.add(g.matmul(emb, leaves[1 + 2 * step]), leaves[2 + 2 * step]);
    return g.log_softmax(logits);
  }

 private:
  ModelConfig cfg_;
  std::vector<ParamTensor> params_;
};

template <class M>
concept StepModel = requires(const M& m, std::size_t c, std::span<const int> pfx) {
  { m.vocab_size() } -> std::convertible_to<std::size_t>;
  { m.seq_len() } -> std::convertible_to<std::size_t>;
  { m.num_contexts() } -> std::convertible_to<std::size_t>;
  { m.step_logprobs(c, pfx) } -> std::convertible_to<std::vector<double>>;
  { m.vocab() } -> std::convertible_to<const Vocab&>;
};

static_assert(StepModel<ArModel>);
static_assert(StepModel<NarModel>);

template <StepModel M>
SequenceLogProb sequence_logprob(const M& m, std::size_t context, std::span<const int> seq) {
  detail::check_sequence(m.config(), seq);
  std::vector<double> per_token;
  per_token.reserve(seq.size());
  for (std::size_t t = 0; t < seq.size(); ++t) {
    const std::vector<double> row = m.step_logprobs(context, seq.subspan(0, t));
    per_token.push_back(row[static_cast<std::size_t>(seq[t])]);
  }
  return SequenceLogProb(std::move(per_token));
}

// Builds the differentiable log-prob of one sequence plus the sum over all
// step rows (the label-smoothing ingredient), sharing leaves across steps.
template <class M>
SeqGraphOut build_sequence(const M& m, ad::Graph& g, std::span<const ad::NodeRef> leaves,
                           std::size_t context, std::span<const int> seq) {
  detail::check_sequence(m.config(), seq);
  SeqGraphOut out;
  for (std::size_t t = 0; t < seq.size(); ++t) {
    ad::NodeRef row = m.build_step(g, leaves, context, seq.subspan(0, t));
    ad::NodeRef picked = g.gather(row, {static_cast<std::size_t>(seq[t])});
    ad::NodeRef row_sum = g.sum(row, 0);
    if (t == 0) {
      out.total_logprob = picked;
      out.sum_all_logprobs = row_sum;
    } else {
      out.total_logprob = g.add(out.total_logprob, picked);
      out.sum_all_logprobs = g.add(out.sum_all_logprobs, row_sum);
    }
  }
  return out;
}

// Exact model distribution over all V^T sequences for one context, in
// lexicographic token order. Feasible only for small V^T.
template <StepModel M>
FiniteDistribution enumerate_distribution(const M& m, std::size_t context) {
  const std::size_t v = m.vocab_size(), t = m.seq_len();
  std::size_t total = 1;
  for (std::size_t i = 0; i < t; ++i) {
    total *= v;
    if (total > 32768)
      throw std::invalid_argument("enumerate_distribution: V^T exceeds 32768");
  }

  FiniteDistribution d;
  d.probs.reserve(total);
  d.labels.reserve(total);
  std::vector<int> seq;
  seq.reserve(t);
  auto rec = [&](auto&& self, double logp) -> void {
    if (seq.size() == t) {
      d.probs.push_back(std::exp(logp));
      d.labels.push_back(m.vocab().decode(seq));
      return;
    }
    const std::vector<double> row = m.step_logprobs(context, seq);
    for (std::size_t tok = 0; tok < v; ++tok) {
      seq.push_back(static_cast<int>(tok));
      self(self, logp + row[tok]);
      seq.pop_back();
    }
  };
  rec(rec, 0.0);
  d.sorted_desc = false;
  return d;
}

}  // namespace convexlab
