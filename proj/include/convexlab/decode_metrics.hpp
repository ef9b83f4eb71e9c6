#pragma once

// Decoding and exact evaluation for the toy models. Everything here is
// deterministic: every tie, anywhere, breaks toward the lowest vocabulary
// index (lexicographic on token indices), and fixed-length sequences mean
// no length penalty.
//
// eval_metrics computes the quantities the experiments track, exactly, by
// enumerating the model distribution: forward KL from the data, model
// entropy, the negative log-probability of the model's own native decode
// (greedy for step-factorized models, positionwise argmax for
// position-factorized ones), decode-vs-data-mode agreement flags, whether
// the native decode is a mode mixture, and the model mass on the data's
// top-n modes.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "convexlab/distribution.hpp"
#include "convexlab/seq_models.hpp"
#include "convexlab/synth_tasks.hpp"

namespace convexlab {

struct DecodeResult {
  std::vector<int> sequence;
  double model_logprob = 0.0;
  std::string method;          // "greedy" | "beam" | "exact" | "positionwise"
  std::size_t beam_width = 0;  // nonzero only for beam decodes
};

namespace detail {

inline std::size_t first_argmax(std::span<const double> row) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < row.size(); ++i)
    if (row[i] > row[best]) best = i;
  return best;
}

inline std::size_t sequence_space(std::size_t v, std::size_t t, std::size_t cap) {
  std::size_t total = 1;
  for (std::size_t i = 0; i < t; ++i) {
    total *= v;
    if (total > cap) return cap + 1;
  }
  return total;
}

}  // namespace detail

template <StepModel M>
DecodeResult greedy_decode(const M& m, std::size_t context) {
  DecodeResult out;
  out.method = "greedy";
  for (std::size_t t = 0; t < m.seq_len(); ++t) {
    const std::vector<double> row = m.step_logprobs(context, out.sequence);
    const std::size_t tok = detail::first_argmax(row);
    out.model_logprob += row[tok];
    out.sequence.push_back(static_cast<int>(tok));
  }
  return out;
}

template <StepModel M>
DecodeResult beam_decode(const M& m, std::size_t context, std::size_t width) {
  if (width < 1) throw std::invalid_argument("beam_decode: width must be >= 1");
  const std::size_t space = detail::sequence_space(m.vocab_size(), m.seq_len(), 1u << 20);
  if (width > space)
    throw std::invalid_argument("beam_decode: width exceeds the sequence space");

  struct Beam {
    std::vector<int> toks;
    double lp = 0.0;
  };
  std::vector<Beam> beams{{}};
  for (std::size_t t = 0; t < m.seq_len(); ++t) {
    std::vector<Beam> next;
    next.reserve(beams.size() * m.vocab_size());
    for (const Beam& b : beams) {
      const std::vector<double> row = m.step_logprobs(context, b.toks);
      for (std::size_t tok = 0; tok < row.size(); ++tok) {
        Beam child = b;
        child.toks.push_back(static_cast<int>(tok));
        child.lp = b.lp + row[tok];
        next.push_back(std::move(child));
      }
    }
    std::sort(next.begin(), next.end(), [](const Beam& a, const Beam& b) {
      if (a.lp != b.lp) return a.lp > b.lp;
      return a.toks < b.toks;
    });
    if (next.size() > width) next.resize(width);
    beams = std::move(next);
  }
  DecodeResult out;
  out.method = "beam";
  out.beam_width = width;
  out.sequence = beams.front().toks;
  out.model_logprob = beams.front().lp;
  return out;
}

// True mode of the enumerated model distribution, ties to the
// lexicographically first sequence. Log-probs accumulate left to right,
// matching beam_decode exactly at full width.
template <StepModel M>
DecodeResult exact_argmax(const M& m, std::size_t context) {
  const std::size_t space = detail::sequence_space(m.vocab_size(), m.seq_len(), 32768);
  if (space > 32768) throw std::invalid_argument("exact_argmax: V^T exceeds 32768");

  DecodeResult out;
  out.method = "exact";
  double best = -std::numeric_limits<double>::infinity();
  std::vector<int> seq;
  auto rec = [&](auto&& self, double lp) -> void {
    if (seq.size() == m.seq_len()) {
      if (lp > best) {
        best = lp;
        out.sequence = seq;
      }
      return;
    }
    const std::vector<double> row = m.step_logprobs(context, seq);
    for (std::size_t tok = 0; tok < row.size(); ++tok) {
      seq.push_back(static_cast<int>(tok));
      self(self, lp + row[tok]);
      seq.pop_back();
    }
  };
  rec(rec, 0.0);
  out.model_logprob = best;
  return out;
}

// Positionwise argmax. For a position-factorized model this is the global
// mode; the prefix fed to each step is a placeholder of the right length.
template <StepModel M>
DecodeResult positionwise_argmax(const M& m, std::size_t context) {
  DecodeResult out;
  out.method = "positionwise";
  std::vector<int> placeholder;
  for (std::size_t t = 0; t < m.seq_len(); ++t) {
    const std::vector<double> row = m.step_logprobs(context, placeholder);
    const std::size_t tok = detail::first_argmax(row);
    out.model_logprob += row[tok];
    out.sequence.push_back(static_cast<int>(tok));
    placeholder.push_back(0);
  }
  return out;
}

struct BeamMatch {
  std::size_t width = 0;
  bool match = false;
};

struct MetricsBundle {
  double kl_nats = 0.0;
  bool kl_clamped = false;
  double entropy_nats = 0.0;
  double output_nll = 0.0;            // -log p_model(native decode)
  bool greedy_match = false;          // greedy decode hits the data mode
  std::vector<BeamMatch> beam_match;  // one entry per requested width
  bool exact_match = false;           // model mode equals the data mode
  double mixture_rate = 0.0;          // 1 when the native decode is off-support
  std::vector<double> top_n_mass;     // model mass on the data's top-n modes
};

namespace detail {

// Data modes tied (within tie_tol) with the maximum probability, as token
// sequences. Membership is the tie-robust version of "equals the data
// argmax".
inline std::vector<std::vector<int>> data_argmax_set(const SynthTask& task, std::size_t context,
                                                     double tie_tol) {
  const FiniteDistribution& d = task.contexts.at(context);
  double mx = 0.0;
  for (double p : d.probs) mx = std::max(mx, p);
  std::vector<std::vector<int>> out;
  for (std::size_t i = 0; i < d.size(); ++i)
    if (d.probs[i] >= mx - tie_tol) out.push_back(task.vocab.encode(d.labels[i]));
  return out;
}

inline bool contains_seq(const std::vector<std::vector<int>>& set, const std::vector<int>& seq) {
  for (const std::vector<int>& s : set)
    if (s == seq) return true;
  return false;
}

}  // namespace detail

template <StepModel M>
MetricsBundle eval_metrics(const M& m, const SynthTask& task, std::size_t context,
                           std::span<const std::size_t> beam_widths,
                           double argmax_tie_tol = 1e-12) {
  if (context >= task.num_contexts())
    throw std::invalid_argument("eval_metrics: context id out of range");
  const FiniteDistribution& data = task.contexts[context];

  const FiniteDistribution model_dist = enumerate_distribution(m, context);
  const std::vector<double> q_support = probs_at_labels(model_dist, task.vocab, data.labels);

  MetricsBundle b;
  const KlResult kl = kl_nats(std::span<const double>(data.probs),
                              std::span<const double>(q_support));
  b.kl_nats = kl.nats;
  b.kl_clamped = kl.clamped;
  b.entropy_nats = entropy_nats(model_dist);

  const DecodeResult native =
      m.model_class() == "nar" ? positionwise_argmax(m, context) : greedy_decode(m, context);
  b.output_nll = -native.model_logprob;

  const std::vector<std::vector<int>> data_modes =
      detail::data_argmax_set(task, context, argmax_tie_tol);
  const DecodeResult greedy = greedy_decode(m, context);
  b.greedy_match = detail::contains_seq(data_modes, greedy.sequence);
  const std::size_t space = detail::sequence_space(m.vocab_size(), m.seq_len(), 32768);
  for (std::size_t w : beam_widths) {
    const DecodeResult beam = beam_decode(m, context, std::min(w, space));
    b.beam_match.push_back({w, detail::contains_seq(data_modes, beam.sequence)});
  }
  const DecodeResult exact = exact_argmax(m, context);
  b.exact_match = detail::contains_seq(data_modes, exact.sequence);

  // Mixture: the native decode has (near-)zero data probability.
  const std::string native_label = task.vocab.decode(native.sequence);
  double native_data_prob = 0.0;
  for (std::size_t i = 0; i < data.size(); ++i)
    if (data.labels[i] == native_label) native_data_prob = data.probs[i];
  b.mixture_rate = native_data_prob < 1e-12 ? 1.0 : 0.0;

  double mass = 0.0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    mass += q_support[i];
    b.top_n_mass.push_back(mass);
  }
  return b;
}

}  // namespace convexlab
