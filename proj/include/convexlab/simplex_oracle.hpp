#pragma once

// Optimal output distributions over a finite sample space: for data weights
// w and a loss family with composed transform phi, minimize
//
//   L(q) = -sum_i w_i phi(q_i)   over the probability simplex.
//
// solve_optimal runs exponentiated-gradient ascent (mirror descent with the
// entropy regularizer); brute_force_optimal and the closed forms provide
// independent cross-checks; check_optimum_properties checks the ordering,
// one-hot, crossing, monotone-difference, entropy, and prefix-mass properties
// of a solved distribution against the baseline.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <stdexcept>
#include <vector>

#include "convexlab/distribution.hpp"
#include "convexlab/loss.hpp"
#include "convexlab/rng.hpp"

namespace convexlab {

inline constexpr double kOneHotThreshold = 1.0 - 1e-6;

struct SolveOptions {
  double tol = 1e-9;            // KKT residual target
  std::size_t max_iters = 200000;
  std::uint64_t seed = 0;       // uniform-plus-jitter initialization
  double seq_len = 1.0;         // scales the inner log, as in the sequence losses
  double init_jitter = 0.01;
};

struct OracleResult {
  FiniteDistribution p_f;
  double loss_value = 0.0;
  std::size_t iterations = 0;
  double kkt_residual = std::numeric_limits<double>::infinity();
  bool converged = false;
};

namespace detail {

inline double composed_loss_of(const std::vector<double>& w, const std::vector<double>& p,
                               const LossFamily& fam, double seq_len) {
  double s = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    if (p[i] > 0.0) {
      s += w[i] * fam.composed(p[i], seq_len);
    } else {
      // phi(0) is -inf for the log-inner families; such points carry
      // infinite loss and are never optimal for them.
      const double v = fam.composed_at_zero_limit();
      if (std::isinf(v)) return std::numeric_limits<double>::infinity();
      s += w[i] * v;
    }
  }
  return -s;
}

}  // namespace detail

// Exponentiated-gradient solve. Deterministic for a fixed seed; stays in the
// open simplex for the concave families and lets losers decay to exact zero
// for the convex ones.
inline OracleResult solve_optimal(const FiniteDistribution& p_data, const LossFamily& fam,
                                  const SolveOptions& opt = {}) {
  p_data.validate(/*require_positive=*/true);
  const std::vector<double>& w = p_data.probs;
  const std::size_t n = w.size();
  if (n < 2) throw std::invalid_argument("solve_optimal: need at least 2 atoms");

  SplitMix64 rng(opt.seed);
  std::vector<double> p(n);
  double z = 0.0;
  for (double& pi : p) {
    pi = 1.0 + opt.init_jitter * rng.uniform();
    z += pi;
  }
  for (double& pi : p) pi /= z;

  constexpr double kActiveFloor = 1e-12;
  constexpr double kMaxExponentSpread = 50.0;
  std::vector<double> grad(n, 0.0);

  OracleResult res;
  std::size_t it = 0;
  for (; it < opt.max_iters; ++it) {
    double lam_num = 0.0, lam_den = 0.0;
    double gmax_all = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < n; ++i) {
      grad[i] = p[i] > 0.0 ? w[i] * fam.composed_dp(p[i], opt.seq_len) : 0.0;
      if (!std::isfinite(grad[i])) grad[i] = 1e300;
      if (p[i] > 0.0) gmax_all = std::max(gmax_all, grad[i]);
      if (p[i] > kActiveFloor) {
        lam_num += p[i] * grad[i];
        lam_den += p[i];
      }
    }
    const double lam = lam_num / lam_den;

    double resid = 0.0;
    double curvature = 0.0;
    double gmin_active = std::numeric_limits<double>::infinity();
    double gmax_active = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < n; ++i) {
      if (p[i] <= kActiveFloor) continue;
      resid = std::max(resid, std::abs(grad[i] - lam));
      // Curvature in the mirror geometry: the entropy map contributes a 1/p
      // metric, so the step bound is w |phi''| p, not the Euclidean w |phi''|.
      curvature =
          std::max(curvature, w[i] * std::abs(fam.composed_d2p(p[i], opt.seq_len)) * p[i]);
      gmin_active = std::min(gmin_active, grad[i]);
      gmax_active = std::max(gmax_active, grad[i]);
    }
    res.kkt_residual = resid;
    if (resid < opt.tol) {
      res.converged = true;
      break;
    }

    // Step 0.5/L from the curvature on the current iterate, capped so the
    // multiplicative update never overflows.
    double eta = 0.5 / std::max(curvature, 1e-12);
    const double spread = gmax_active - gmin_active;
    if (spread > 0.0 && eta * spread > kMaxExponentSpread)
      eta = kMaxExponentSpread / spread;

    z = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      p[i] = p[i] > 0.0 ? p[i] * std::exp(eta * (grad[i] - gmax_all)) : 0.0;
      z += p[i];
    }
    for (double& pi : p) pi /= z;
  }
  res.iterations = it;
  res.loss_value = detail::composed_loss_of(w, p, fam, opt.seq_len);
  res.p_f.probs = std::move(p);
  res.p_f.labels = p_data.labels;
  return res;
}

// Closed forms used as sanity anchors:
//   Log                      -> q = w
//   PureConvex (any variant) -> one-hot on argmax w
//   ExpComposed, c = k/T < 1 -> q_i proportional to w_i^(1/(1-c));
//                   c >= 1   -> one-hot on argmax w
// PowerComposed has no closed form; nullopt.
inline std::optional<std::vector<double>> closed_form_optimal(const FiniteDistribution& p_data,
                                                              const LossFamily& fam,
                                                              double seq_len = 1.0) {
  p_data.validate(true);
  const std::vector<double>& w = p_data.probs;
  switch (fam.kind()) {
    case LossKind::kLog:
      return w;
    case LossKind::kPureConvex: {
      std::vector<double> q(w.size(), 0.0);
      q[static_cast<std::size_t>(std::max_element(w.begin(), w.end()) - w.begin())] = 1.0;
      return q;
    }
    case LossKind::kExpComposed: {
      const double c = fam.k() / seq_len;
      if (c >= 1.0) {
        std::vector<double> q(w.size(), 0.0);
        q[static_cast<std::size_t>(std::max_element(w.begin(), w.end()) - w.begin())] = 1.0;
        return q;
      }
      std::vector<double> q(w.size());
      double z = 0.0;
      for (std::size_t i = 0; i < w.size(); ++i) {
        q[i] = std::pow(w[i], 1.0 / (1.0 - c));
        z += q[i];
      }
      for (double& qi : q) qi /= z;
      return q;
    }
    case LossKind::kPowerComposed:
      return std::nullopt;
  }
  return std::nullopt;
}

// Exhaustive lattice search over the simplex at the given resolution,
// followed by deterministic pairwise mass-transfer refinement. Ground truth
// for solve_optimal within L_inf 2/resolution.
inline OracleResult brute_force_optimal(const FiniteDistribution& p_data, const LossFamily& fam,
                                        std::size_t resolution, double seq_len = 1.0) {
  p_data.validate(true);
  const std::vector<double>& w = p_data.probs;
  const std::size_t n = w.size();
  if (n < 2 || n > 5)
    throw std::invalid_argument("brute_force_optimal: support size must lie in [2, 5]");
  if (resolution < 2 || resolution > 400)
    throw std::invalid_argument("brute_force_optimal: resolution must lie in [2, 400]");

  // phi at every lattice level, computed once.
  std::vector<double> phi(resolution + 1);
  phi[0] = fam.composed_at_zero_limit();
  for (std::size_t j = 1; j <= resolution; ++j)
    phi[j] = fam.composed(static_cast<double>(j) / static_cast<double>(resolution), seq_len);

  std::vector<std::size_t> parts(n, 0), best_parts(n, 0);
  double best = std::numeric_limits<double>::infinity();
  std::size_t evals = 0;

  // Depth-first over compositions of `resolution`, accumulating the partial
  // objective; the final coordinate is implied.
  auto rec = [&](auto&& self, std::size_t idx, std::size_t remaining, double partial) -> void {
    if (idx + 1 == n) {
      parts[idx] = remaining;
      const double obj = partial + (std::isinf(phi[remaining]) && phi[remaining] < 0.0
                                        ? -std::numeric_limits<double>::infinity()
                                        : w[idx] * phi[remaining]);
      ++evals;
      const double loss = -obj;
      if (loss < best) {
        best = loss;
        best_parts = parts;
      }
      return;
    }
    for (std::size_t j = 0; j <= remaining; ++j) {
      parts[idx] = j;
      double contrib;
      if (std::isinf(phi[j]) && phi[j] < 0.0) {
        contrib = -std::numeric_limits<double>::infinity();
      } else {
        contrib = w[idx] * phi[j];
      }
      self(self, idx + 1, remaining - j, partial + contrib);
    }
  };
  rec(rec, 0, resolution, 0.0);

  std::vector<double> p(n);
  for (std::size_t i = 0; i < n; ++i)
    p[i] = static_cast<double>(best_parts[i]) / static_cast<double>(resolution);

  // Local refinement: move mass between coordinate pairs with a halving step
  // until no transfer improves the loss.
  double best_loss = detail::composed_loss_of(w, p, fam, seq_len);
  for (double delta = 1.0 / static_cast<double>(resolution); delta >= 1e-7; delta *= 0.5) {
    bool improved = true;
    while (improved) {
      improved = false;
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
          if (i == j || p[j] < delta) continue;
          std::vector<double> q = p;
          q[i] += delta;
          q[j] -= delta;
          const double l = detail::composed_loss_of(w, q, fam, seq_len);
          if (l < best_loss) {
            best_loss = l;
            p = std::move(q);
            improved = true;
          }
        }
      }
    }
  }

  OracleResult res;
  res.p_f.probs = std::move(p);
  res.p_f.labels = p_data.labels;
  res.loss_value = best_loss;
  res.iterations = evals;
  res.converged = true;
  res.kkt_residual = 0.0;
  return res;
}

// Report of the ordering/crossing/entropy checks for a sharpened optimum
// p_f against the baseline optimum p_base, both on the support of p_data
// (which must be strictly descending). Indices are 1-based.
struct PropertyReport {
  bool ordering_ok = false;                // p_f sorted like the data
  std::optional<bool> onehot;              // set only when the composition is convex
  std::size_t crossing_index = 0;          // first atom where p_f <= p_base (+tol)
  bool crossing_ok = false;                // boosted before the crossing, cut after
  bool crossing_ties = false;              // passed with |p_f - p_base| <= tol somewhere
  std::optional<bool> gap_monotone_ok;     // pre-crossing boosts non-increasing; unset
                                           // for the families that bypass the inner log
  double entropy_baseline = 0.0;
  double entropy_optimum = 0.0;
  bool entropy_ok = false;                 // sharpening never raises entropy
  bool prefix_mass_ok = false;             // p_f dominates p_base on every top-n prefix
  double tolerance = 0.0;

  bool all_pass() const {
    return ordering_ok && (!onehot || *onehot) && crossing_ok &&
           (!gap_monotone_ok || *gap_monotone_ok) && entropy_ok && prefix_mass_ok;
  }
};

inline PropertyReport check_optimum_properties(const FiniteDistribution& p_data,
                                               const FiniteDistribution& p_base,
                                               const FiniteDistribution& p_f, double tol,
                                               const std::optional<LossFamily>& family = std::nullopt,
                                               double seq_len = 1.0) {
  const std::size_t n = p_data.size();
  if (p_base.size() != n || p_f.size() != n)
    throw std::invalid_argument("check_optimum_properties: support size mismatch");
  if (!p_data.labels.empty() && !p_f.labels.empty() && p_data.labels != p_f.labels)
    throw std::invalid_argument("check_optimum_properties: support labels differ");
  if (!p_data.labels.empty() && !p_base.labels.empty() && p_data.labels != p_base.labels)
    throw std::invalid_argument("check_optimum_properties: support labels differ");
  p_data.validate(true);
  p_base.validate(false);
  p_f.validate(false);
  for (std::size_t i = 1; i < n; ++i) {
    const double gap = p_data.probs[i - 1] - p_data.probs[i];
    if (gap < kDistinctGap)
      throw std::invalid_argument(
          "check_optimum_properties: data probabilities must be strictly descending with gaps >= "
          "1e-9 (all-distinct requirement)");
  }

  PropertyReport rep;
  rep.tolerance = tol;
  const std::vector<double>& g = p_base.probs;
  const std::vector<double>& f = p_f.probs;

  rep.ordering_ok = true;
  for (std::size_t i = 1; i < n; ++i)
    if (f[i] > f[i - 1] + tol) rep.ordering_ok = false;

  bool onehot_applicable = false;
  bool gap_monotone_applicable = true;  // default callers pair log-inner baselines
  if (family) {
    gap_monotone_applicable = family->kind() != LossKind::kPureConvex;
    onehot_applicable = family->kind() == LossKind::kPureConvex ||
                        (family->kind() == LossKind::kExpComposed && family->k() / seq_len >= 1.0);
  }
  if (onehot_applicable) rep.onehot = f[0] > kOneHotThreshold;

  // Crossing index: smallest i with p_f(x_i) <= p_base(x_i) + tol. One always
  // exists since both sides sum to 1.
  std::size_t m = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (f[i] <= g[i] + tol) {
      m = i + 1;
      break;
    }
  }
  if (m == 0) throw std::logic_error("check_optimum_properties: no crossing index found");
  rep.crossing_index = m;
  rep.crossing_ok = true;
  for (std::size_t i = 0; i + 1 < m; ++i)
    if (f[i] < g[i] - tol) rep.crossing_ok = false;
  for (std::size_t i = m - 1; i < n; ++i)
    if (f[i] > g[i] + tol) rep.crossing_ok = false;
  for (std::size_t i = 0; i < n; ++i)
    if (std::abs(f[i] - g[i]) <= tol) rep.crossing_ties = true;

  if (gap_monotone_applicable) {
    bool ok = true;
    for (std::size_t i = 0; i + 1 < m; ++i) {
      const double d = f[i] - g[i];
      if (d < -tol) ok = false;
      if (i > 0 && d > (f[i - 1] - g[i - 1]) + tol) ok = false;
    }
    rep.gap_monotone_ok = ok;
  }

  rep.entropy_baseline = entropy_nats(p_base);
  rep.entropy_optimum = entropy_nats(p_f);
  rep.entropy_ok = rep.entropy_optimum <= rep.entropy_baseline + tol;

  rep.prefix_mass_ok = true;
  double pref_f = 0.0, pref_g = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    pref_f += f[i];
    pref_g += g[i];
    if (pref_f < pref_g - tol) rep.prefix_mass_ok = false;
  }
  return rep;
}

}  // namespace convexlab
