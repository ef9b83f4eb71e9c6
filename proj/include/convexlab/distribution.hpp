#pragma once

// Finite distributions over labeled atoms, plus the entropy/divergence
// arithmetic shared by the solver, the metrics, and the synthetic tasks.
// All quantities are in nats.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace convexlab {

inline constexpr double kSumTolerance = 1e-10;
// Minimum gap between distinct atom masses required wherever the theory
// assumes all-distinct probabilities.
inline constexpr double kDistinctGap = 1e-9;
// Probabilities below this are clamped (with a flag) instead of producing
// infinite divergences.
inline constexpr double kProbFloor = 1e-300;

// Formats a double with 17 significant digits (round-trip exact).
inline std::string format_real(double x) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", x);
  return buf;
}

struct FiniteDistribution {
  std::vector<double> probs;
  std::vector<std::string> labels;  // empty or one label per atom
  bool sorted_desc = false;

  std::size_t size() const { return probs.size(); }

  // require_positive: data distributions live on (0, 1]; solver outputs may
  // carry exact zeros.
  void validate(bool require_positive = true) const {
    if (probs.empty()) throw std::invalid_argument("distribution: no atoms");
    if (!labels.empty() && labels.size() != probs.size())
      throw std::invalid_argument("distribution: label/prob count mismatch");
    double sum = 0.0;
    for (double p : probs) {
      if (!(p >= 0.0) || p > 1.0)
        throw std::invalid_argument("distribution: prob outside [0, 1]");
      if (require_positive && p <= 0.0)
        throw std::invalid_argument("distribution: prob must be positive");
      sum += p;
    }
    if (std::abs(sum - 1.0) > kSumTolerance)
      throw std::invalid_argument("distribution: probs sum to " +
                                  format_real(sum) + ", not 1");
    if (sorted_desc) {
      for (std::size_t i = 1; i < probs.size(); ++i)
        if (probs[i] > probs[i - 1])
          throw std::invalid_argument("distribution: marked sorted but not");
    }
  }

  FiniteDistribution sorted() const {
    std::vector<std::size_t> order(probs.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return probs[a] > probs[b];
    });
    FiniteDistribution out;
    out.probs.reserve(probs.size());
    if (!labels.empty()) out.labels.reserve(labels.size());
    for (std::size_t i : order) {
      out.probs.push_back(probs[i]);
      if (!labels.empty()) out.labels.push_back(labels[i]);
    }
    out.sorted_desc = true;
    return out;
  }

  // Smallest gap between consecutive masses after sorting.
  double min_gap() const {
    FiniteDistribution s = sorted_desc ? *this : sorted();
    double gap = std::numeric_limits<double>::infinity();
    for (std::size_t i = 1; i < s.probs.size(); ++i)
      gap = std::min(gap, s.probs[i - 1] - s.probs[i]);
    return gap;
  }
};

inline double entropy_nats(std::span<const double> probs) {
  double h = 0.0;
  for (double p : probs)
    if (p > 0.0) h -= p * std::log(p);
  return h;
}

inline double entropy_nats(const FiniteDistribution& d) {
  return entropy_nats(std::span<const double>(d.probs));
}

struct KlResult {
  double nats = 0.0;
  bool clamped = false;  // some q fell below kProbFloor
};

// KL(p || q) over the support of p; q is clamped at kProbFloor.
inline KlResult kl_nats(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size())
    throw std::invalid_argument("kl: size mismatch");
  KlResult r;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] <= 0.0) continue;
    double qi = q[i];
    if (qi < kProbFloor) {
      qi = kProbFloor;
      r.clamped = true;
    }
    r.nats += p[i] * (std::log(p[i]) - std::log(qi));
  }
  return r;
}

// CSV form: one "label,prob" line per atom; an optional "label,prob" header
// is tolerated. Probabilities print with 17 significant digits.
inline FiniteDistribution load_distribution_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("cannot open distribution file: " + path);
  FiniteDistribution d;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    const auto comma = line.find(',');
    if (comma == std::string::npos)
      throw std::invalid_argument(path + ":" + std::to_string(lineno) +
                                  ": expected label,prob");
    std::string label = line.substr(0, comma);
    std::string value = line.substr(comma + 1);
    if (lineno == 1 && label == "label" && value == "prob") continue;
    std::size_t used = 0;
    double p = 0.0;
    try {
      p = std::stod(value, &used);
    } catch (const std::exception&) {
      throw std::invalid_argument(path + ":" + std::to_string(lineno) +
                                  ": bad probability '" + value + "'");
    }
    if (used != value.size())
      throw std::invalid_argument(path + ":" + std::to_string(lineno) +
                                  ": bad probability '" + value + "'");
    d.labels.push_back(std::move(label));
    d.probs.push_back(p);
  }
  if (d.probs.empty())
    throw std::invalid_argument(path + ": no atoms");
  return d;
}

inline void save_distribution_csv(const FiniteDistribution& d, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "label,prob\n";
  for (std::size_t i = 0; i < d.probs.size(); ++i) {
    const std::string label = d.labels.empty() ? std::to_string(i) : d.labels[i];
    out << label << ',' << format_real(d.probs[i]) << '\n';
  }
}

}  // namespace convexlab
