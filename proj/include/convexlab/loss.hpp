#pragma once

// Loss families built by composing an increasing convex outer transform with
// the length-normalized sequence log-probability g = log p(x) / T:
//
//   Log            loss = -g                       weight = 1
//   ExpComposed    loss = -exp(k g) = -p^(k/T)     weight = k exp(k g), k > 0
//   PowerComposed  loss = (-g)^k                   weight = k (-g)^(k-1), 0 < k <= 1
//   PureConvex     loss = -f(p), f increasing convex applied to p directly
//                  (Identity: f(p) = p; Exp: f(p) = e^p)
//
// Everything is computed from log-space inputs; p itself only appears through
// exp(total), never as a product of token probabilities.
//
// `weight` is defined uniformly as -d(loss)/d(g): multiplying the
// length-normalized log-loss by this constant reproduces the composed
// gradient exactly. For PureConvex that convention gives T * p * f'(p).

#include <cmath>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace convexlab {

enum class LossKind { kLog, kExpComposed, kPowerComposed, kPureConvex };
enum class ConvexVariant { kIdentity, kExp };

class LossFamily {
 public:
  static LossFamily log_loss() { return LossFamily(LossKind::kLog, 0.0, ConvexVariant::kIdentity); }

  static LossFamily exp_composed(double k) {
    if (!(k > 0.0) || !std::isfinite(k))
      throw std::invalid_argument("exp_composed: k must be positive");
    return LossFamily(LossKind::kExpComposed, k, ConvexVariant::kIdentity);
  }

  static LossFamily power_composed(double k) {
    if (!(k > 0.0) || !(k <= 1.0))
      throw std::invalid_argument("power_composed: k must lie in (0, 1]");
    return LossFamily(LossKind::kPowerComposed, k, ConvexVariant::kIdentity);
  }

  static LossFamily pure_convex(ConvexVariant v = ConvexVariant::kIdentity) {
    return LossFamily(LossKind::kPureConvex, 0.0, v);
  }

  LossKind kind() const { return kind_; }
  double k() const { return k_; }
  ConvexVariant variant() const { return variant_; }
  bool uses_k() const {
    return kind_ == LossKind::kExpComposed || kind_ == LossKind::kPowerComposed;
  }

  std::string name() const {
    switch (kind_) {
      case LossKind::kLog: return "log";
      case LossKind::kExpComposed: return "exp";
      case LossKind::kPowerComposed: return "power";
      case LossKind::kPureConvex:
        return variant_ == ConvexVariant::kIdentity ? "convex_identity" : "convex_exp";
    }
    return "?";
  }

  // --- Probability-domain view, used by the simplex solver. ---------------
  // composed(p) is the function whose data-weighted sum the optimal
  // distribution maximizes; seq_len scales the inner log the same way the
  // sequence losses do.

  double composed(double p, double seq_len = 1.0) const {
    switch (kind_) {
      case LossKind::kLog:
        return std::log(p) / seq_len;
      case LossKind::kExpComposed:
        return std::pow(p, k_ / seq_len);
      case LossKind::kPowerComposed: {
        const double u = -std::log(p) / seq_len;
        return -std::pow(u, k_);
      }
      case LossKind::kPureConvex:
        return variant_ == ConvexVariant::kIdentity ? p : std::exp(p);
    }
    return 0.0;
  }

  double composed_dp(double p, double seq_len = 1.0) const {
    switch (kind_) {
      case LossKind::kLog:
        return 1.0 / (seq_len * p);
      case LossKind::kExpComposed: {
        const double c = k_ / seq_len;
        return c * std::pow(p, c - 1.0);
      }
      case LossKind::kPowerComposed: {
        const double u = -std::log(p) / seq_len;
        return k_ * std::pow(u, k_ - 1.0) / (seq_len * p);
      }
      case LossKind::kPureConvex:
        return variant_ == ConvexVariant::kIdentity ? 1.0 : std::exp(p);
    }
    return 0.0;
  }

  // Limit of composed(p) as p -> 0+; -infinity for the log-inner families.
  double composed_at_zero_limit() const {
    switch (kind_) {
      case LossKind::kLog:
      case LossKind::kPowerComposed:
        return -std::numeric_limits<double>::infinity();
      case LossKind::kExpComposed:
        return 0.0;
      case LossKind::kPureConvex:
        return variant_ == ConvexVariant::kIdentity ? 0.0 : 1.0;
    }
    return 0.0;
  }

  double composed_d2p(double p, double seq_len = 1.0) const {
    switch (kind_) {
      case LossKind::kLog:
        return -1.0 / (seq_len * p * p);
      case LossKind::kExpComposed: {
        const double c = k_ / seq_len;
        return c * (c - 1.0) * std::pow(p, c - 2.0);
      }
      case LossKind::kPowerComposed: {
        const double u = -std::log(p) / seq_len;
        // d/dp [ k u^(k-1) / (T p) ]
        return -(k_ / (seq_len * p * p)) *
               ((k_ - 1.0) * std::pow(u, k_ - 2.0) / seq_len + std::pow(u, k_ - 1.0));
      }
      case LossKind::kPureConvex:
        return variant_ == ConvexVariant::kIdentity ? 0.0 : std::exp(p);
    }
    return 0.0;
  }

 private:
  LossFamily(LossKind kind, double k, ConvexVariant v) : kind_(kind), k_(k), variant_(v) {}
  LossKind kind_;
  double k_;
  ConvexVariant variant_;
};

// Log-probabilities of one sequence: per-token values (each <= 0), their
// count T, and the total.
struct SequenceLogProb {
  std::vector<double> token_logprobs;
  std::size_t seq_len = 0;
  double total = 0.0;

  explicit SequenceLogProb(std::vector<double> logprobs)
      : token_logprobs(std::move(logprobs)) {
    if (token_logprobs.empty())
      throw std::invalid_argument("sequence_logprob: empty sequence");
    seq_len = token_logprobs.size();
    for (double lp : token_logprobs) {
      if (!(lp <= 0.0))
        throw std::invalid_argument("sequence_logprob: token logprob above 0");
      total += lp;
    }
  }
};

struct LossEval {
  double loss = 0.0;
  double weight = 0.0;  // +infinity sentinel marks the power-form singularity
  double g_value = 0.0;
};

inline double eval_g(const SequenceLogProb& s) {
  return s.total / static_cast<double>(s.seq_len);
}

// Scalar loss as a function of g (and T for the pure convex families).
inline double loss_from_g(const LossFamily& f, double g, double seq_len) {
  switch (f.kind()) {
    case LossKind::kLog:
      return -g;
    case LossKind::kExpComposed:
      return -std::exp(f.k() * g);
    case LossKind::kPowerComposed:
      return std::pow(-g, f.k());
    case LossKind::kPureConvex: {
      const double p = std::exp(seq_len * g);
      return -(f.variant() == ConvexVariant::kIdentity ? p : std::exp(p));
    }
  }
  return 0.0;
}

inline double weight_from_g(const LossFamily& f, double g, double seq_len) {
  switch (f.kind()) {
    case LossKind::kLog:
      return 1.0;
    case LossKind::kExpComposed:
      return f.k() * std::exp(f.k() * g);
    case LossKind::kPowerComposed:
      if (g == 0.0 && f.k() < 1.0)
        return std::numeric_limits<double>::infinity();
      return f.k() * std::pow(-g, f.k() - 1.0);
    case LossKind::kPureConvex: {
      const double p = std::exp(seq_len * g);
      const double fprime = f.variant() == ConvexVariant::kIdentity ? 1.0 : std::exp(p);
      return seq_len * p * fprime;
    }
  }
  return 0.0;
}

inline LossEval eval_loss(const LossFamily& f, const SequenceLogProb& s) {
  const double g = eval_g(s);
  const double t = static_cast<double>(s.seq_len);
  return LossEval{loss_from_g(f, g, t), weight_from_g(f, g, t), g};
}

inline double eval_weight(const LossFamily& f, const SequenceLogProb& s) {
  return weight_from_g(f, eval_g(s), static_cast<double>(s.seq_len));
}

// Smoothed objective: (1 - eps) * loss + eps * weight * smoothing_loss.
// The weight multiplies the smoothing term as a detached constant.
inline double eval_smoothed_loss(const LossFamily& f, const SequenceLogProb& s,
                                 double smoothing_loss, double eps_ls) {
  if (!(eps_ls >= 0.0) || !(eps_ls <= 1.0))
    throw std::invalid_argument("eval_smoothed_loss: eps_ls outside [0, 1]");
  const LossEval e = eval_loss(f, s);
  if (eps_ls > 0.0 && std::isinf(e.weight))
    throw std::domain_error(
        "eval_smoothed_loss: smoothing weight is infinite at p = 1 for the power form");
  return (1.0 - eps_ls) * e.loss + eps_ls * e.weight * smoothing_loss;
}

// g'''(x) g'(x) - g''(x)^2 for g = log, evaluated from the derivative
// expressions; equals 1/x^4, strictly positive on (0, 1).
inline double check_g_condition(double x) {
  if (!(x > 0.0) || !(x < 1.0))
    throw std::domain_error("check_g_condition: x must lie in (0, 1)");
  const double g1 = 1.0 / x;
  const double g2 = -1.0 / (x * x);
  const double g3 = 2.0 / (x * x * x);
  return g3 * g1 - g2 * g2;
}

struct GradScalePoint {
  int seq_len;
  double scale;  // f'(p) * p with f = identity, i.e. per_token_p^T
};

// Gradient scale of the pure convex loss as sequence length grows: with
// f(p) = p the log-prob gradient is multiplied by f'(p) p = p, and a sequence
// of T tokens each at per_token_p has p = per_token_p^T.
inline std::vector<GradScalePoint> grad_vanishing_profile(double per_token_p,
                                                          std::span<const int> seq_lens) {
  if (!(per_token_p > 0.0) || !(per_token_p < 1.0))
    throw std::domain_error("grad_vanishing_profile: per-token prob must lie in (0, 1)");
  std::vector<GradScalePoint> out;
  out.reserve(seq_lens.size());
  for (int t : seq_lens) {
    if (t < 1) throw std::invalid_argument("grad_vanishing_profile: T must be >= 1");
    out.push_back({t, std::pow(per_token_p, t)});
  }
  return out;
}

}  // namespace convexlab
