#pragma once

// Synthetic sequence tasks: a small vocabulary, a fixed length T, and for
// each context id a data distribution over a sparse set of length-T strings.
//
// Generated tasks always place a "cross-mode" context at id 0: a support
// whose per-position marginals have their argmax product outside the
// support. A position-factorized model fitting such a context in the
// forward-KL sense puts its modal mass on a sequence the data never
// produces. Remaining contexts get random supports with a geometric
// probability profile and rank-preserving jitter. Explicit tasks take the
// given atoms verbatim (ties allowed).
//
// product_fit() and nar_lower_bound() are closed-form references for what a
// position-factorized fit can achieve: the product of the data's
// per-position marginals, and its forward KL from the data (the mean over
// contexts of sum-of-marginal-entropies minus joint entropy).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "convexlab/distribution.hpp"
#include "convexlab/rng.hpp"
#include "convexlab/seq_models.hpp"

namespace convexlab {

struct SynthTask {
  Vocab vocab = Vocab::standard(2);
  std::size_t seq_len = 2;
  std::vector<FiniteDistribution> contexts;  // context id == index; labels are length-T strings

  std::size_t num_contexts() const { return contexts.size(); }

  void validate() const {
    if (seq_len < 1) throw std::invalid_argument("task: seq_len must be >= 1");
    if (contexts.empty()) throw std::invalid_argument("task: no contexts");
    for (const FiniteDistribution& d : contexts) {
      d.validate(/*require_positive=*/true);
      if (d.labels.size() != d.probs.size())
        throw std::invalid_argument("task: every atom needs a label");
      std::set<std::string> seen;
      for (const std::string& s : d.labels) {
        if (s.size() != seq_len)
          throw std::invalid_argument("task: atom '" + s + "' does not have length " +
                                      std::to_string(seq_len));
        for (char c : s) vocab.index(c);  // throws on unknown symbols
        if (!seen.insert(s).second)
          throw std::invalid_argument("task: duplicate atom '" + s + "'");
      }
    }
  }
};

struct Example {
  std::size_t context = 0;
  std::vector<int> seq;
};

struct Dataset {
  std::vector<Example> items;
  std::size_t size() const { return items.size(); }
};

namespace detail {

inline FiniteDistribution sorted_atoms(std::vector<std::pair<std::string, double>> atoms) {
  std::stable_sort(atoms.begin(), atoms.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  FiniteDistribution d;
  for (auto& [label, p] : atoms) {
    d.labels.push_back(std::move(label));
    d.probs.push_back(p);
  }
  d.sorted_desc = true;
  return d;
}

// The cross-mode support adapted to the vocabulary and length. Probabilities
// are fixed; only the symbols change. Returns atoms in descending order.
inline FiniteDistribution cross_mode_context(const Vocab& v, std::size_t seq_len) {
  const std::size_t n = v.size();
  auto sym = [&](std::size_t i) { return std::string(1, v.symbol(i)); };
  if (seq_len == 2) {
    if (n >= 6) {
      // First-position symbols 0..2, second-position symbols 3..5. The
      // marginal argmax pair (0, 5) has data probability zero.
      return sorted_atoms({{sym(0) + sym(3), 0.20},
                           {sym(0) + sym(4), 0.19},
                           {sym(1) + sym(5), 0.31},
                           {sym(2) + sym(5), 0.30}});
    }
    if (n >= 3) {
      // Shared symbols, same weights: the marginal argmax pair (0, 0) is
      // again outside the support.
      return sorted_atoms({{sym(0) + sym(1), 0.20},
                           {sym(0) + sym(2), 0.19},
                           {sym(1) + sym(0), 0.31},
                           {sym(2) + sym(0), 0.30}});
    }
    throw std::invalid_argument(
        "cross_mode_context: with 2 symbols and length 2 every marginal-argmax pair lies in any "
        "support that realizes it; use length >= 3 or a larger vocabulary");
  }
  if (seq_len >= 3) {
    // Parity-style support over the first two symbols, padded with symbol 0;
    // every position's marginal argmax is symbol 0, and the all-zero string
    // is outside the support.
    const std::string pad(seq_len - 3, v.symbol(0));
    const std::string a = sym(0), b = sym(1);
    return sorted_atoms({{a + a + b + pad, 0.35}, {a + b + a + pad, 0.33}, {b + a + a + pad, 0.32}});
  }
  throw std::invalid_argument("cross_mode_context: length must be >= 2");
}

}  // namespace detail

struct GenerateOptions {
  std::size_t num_contexts = 1;   // context 0 is the cross-mode one
  std::size_t support_size = 4;   // atoms in each random context
  double geometric_ratio = 0.75;
  std::uint64_t seed = 0;
};

inline SynthTask generate_task(const Vocab& vocab, std::size_t seq_len,
                               const GenerateOptions& opt = {}) {
  if (opt.num_contexts < 1) throw std::invalid_argument("generate_task: need >= 1 context");
  if (!(opt.geometric_ratio > 0.0) || !(opt.geometric_ratio < 1.0))
    throw std::invalid_argument("generate_task: geometric ratio must lie in (0, 1)");
  if (opt.support_size < 2) throw std::invalid_argument("generate_task: support_size must be >= 2");

  std::size_t space = 1;
  bool space_capped = false;
  for (std::size_t i = 0; i < seq_len; ++i) {
    space *= vocab.size();
    if (space > 65536) {
      space_capped = true;
      break;
    }
  }
  if (!space_capped && opt.support_size > space)
    throw std::invalid_argument("generate_task: support_size exceeds V^T");

  SynthTask task{vocab, seq_len, {}};
  task.contexts.push_back(detail::cross_mode_context(vocab, seq_len));

  for (std::size_t c = 1; c < opt.num_contexts; ++c) {
    SplitMix64 rng(derive_seed(opt.seed, c));
    std::set<std::string> support;
    while (support.size() < opt.support_size) {
      std::string s;
      for (std::size_t t = 0; t < seq_len; ++t) s += vocab.symbol(rng.index(vocab.size()));
      support.insert(s);
    }
    // Geometric profile with rank-preserving jitter, then normalize.
    const double jitter = std::min(0.01, (1.0 - opt.geometric_ratio) / 4.0);
    std::vector<std::pair<std::string, double>> atoms;
    double base = 1.0, z = 0.0;
    for (const std::string& s : support) {
      const double p = base * (1.0 + rng.symmetric(jitter));
      atoms.emplace_back(s, p);
      z += p;
      base *= opt.geometric_ratio;
    }
    for (auto& [s, p] : atoms) p /= z;
    task.contexts.push_back(detail::sorted_atoms(std::move(atoms)));
  }

  // Generated contexts must keep their atoms clearly separated.
  for (const FiniteDistribution& d : task.contexts)
    if (d.min_gap() < 1e-6)
      throw std::logic_error("generate_task: adjacent atom probabilities closer than 1e-6");

  task.validate();
  return task;
}

// A task from explicit atoms, one vector per context. Ties are allowed.
inline SynthTask make_explicit_task(
    const Vocab& vocab, std::size_t seq_len,
    const std::vector<std::vector<std::pair<std::string, double>>>& per_context) {
  SynthTask task{vocab, seq_len, {}};
  for (const auto& atoms : per_context) {
    if (atoms.empty()) throw std::invalid_argument("explicit task: empty context");
    task.contexts.push_back(detail::sorted_atoms(atoms));
  }
  task.validate();
  return task;
}

inline Dataset sample_dataset(const SynthTask& task, std::size_t n, std::uint64_t seed) {
  SplitMix64 rng(seed);
  Dataset out;
  out.items.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t c = rng.index(task.num_contexts());
    const FiniteDistribution& d = task.contexts[c];
    const std::size_t a = rng.categorical(d.probs);
    out.items.push_back({c, task.vocab.encode(d.labels[a])});
  }
  return out;
}

// Per-position marginals of one context's data distribution.
inline std::vector<std::vector<double>> position_marginals(const SynthTask& task,
                                                           std::size_t context) {
  const FiniteDistribution& d = task.contexts.at(context);
  std::vector<std::vector<double>> marg(task.seq_len,
                                        std::vector<double>(task.vocab.size(), 0.0));
  for (std::size_t a = 0; a < d.size(); ++a)
    for (std::size_t t = 0; t < task.seq_len; ++t)
      marg[t][static_cast<std::size_t>(task.vocab.index(d.labels[a][t]))] += d.probs[a];
  return marg;
}

// Lexicographic index of a length-T string over the vocabulary.
inline std::size_t lex_index(const Vocab& v, const std::string& label) {
  std::size_t idx = 0;
  for (char c : label) idx = idx * v.size() + static_cast<std::size_t>(v.index(c));
  return idx;
}

// The product of per-position marginals over all V^T sequences, in
// lexicographic order: the exact forward-KL optimum among factorized
// distributions.
inline FiniteDistribution product_fit(const SynthTask& task, std::size_t context) {
  std::size_t total = 1;
  for (std::size_t i = 0; i < task.seq_len; ++i) {
    total *= task.vocab.size();
    if (total > 32768) throw std::invalid_argument("product_fit: V^T exceeds 32768");
  }
  const std::vector<std::vector<double>> marg = position_marginals(task, context);

  FiniteDistribution out;
  out.probs.reserve(total);
  out.labels.reserve(total);
  std::vector<int> seq;
  auto rec = [&](auto&& self, double p) -> void {
    if (seq.size() == task.seq_len) {
      out.probs.push_back(p);
      out.labels.push_back(task.vocab.decode(seq));
      return;
    }
    const std::vector<double>& m = marg[seq.size()];
    for (std::size_t tok = 0; tok < task.vocab.size(); ++tok) {
      seq.push_back(static_cast<int>(tok));
      self(self, p * m[tok]);
      seq.pop_back();
    }
  };
  rec(rec, 1.0);
  out.sorted_desc = false;
  return out;
}

// Forward KL from the data to its best factorized fit, averaged over
// contexts: mean_c [ sum_t H(position marginal) - H(joint) ]. This is the
// exact floor on KL(data || model) for any position-factorized model.
inline double nar_lower_bound(const SynthTask& task) {
  double acc = 0.0;
  for (std::size_t c = 0; c < task.num_contexts(); ++c) {
    const std::vector<std::vector<double>> marg = position_marginals(task, c);
    double h_sum = 0.0;
    for (const std::vector<double>& m : marg) h_sum += entropy_nats(std::span<const double>(m));
    acc += h_sum - entropy_nats(task.contexts[c]);
  }
  return acc / static_cast<double>(task.num_contexts());
}

// Model probabilities at the given support labels, taken from a full
// lexicographic distribution over V^T sequences.
inline std::vector<double> probs_at_labels(const FiniteDistribution& full_lex, const Vocab& vocab,
                                           const std::vector<std::string>& labels) {
  std::vector<double> out;
  out.reserve(labels.size());
  for (const std::string& s : labels) {
    const std::size_t idx = lex_index(vocab, s);
    if (idx >= full_lex.size())
      throw std::invalid_argument("probs_at_labels: label outside the enumerated space");
    out.push_back(full_lex.probs[idx]);
  }
  return out;
}

}  // namespace convexlab
