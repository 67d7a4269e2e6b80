#pragma once

// Loss algebra over length-normalized sequence log-probabilities: NLL, odds,
// odds-ratio loss, probability-ratio baseline, combined objective with the
// linear lambda ramp, and per-step diagnostics. All log-space, with a
// log1mexp branch split at ln 2.

#include <cmath>

#include "pointlm/autograd.hpp"
#include "pointlm/errors.hpp"

namespace pointlm {

// log(1 - e^a) for a < 0.
inline double log1mexp(double a) {
  if (a >= 0) throw NumericError("log1mexp: argument must be negative");
  static const double kLn2 = std::log(2.0);
  return a > -kLn2 ? std::log(-std::expm1(a)) : std::log1p(-std::exp(a));
}

inline double softplus(double x) {
  return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

inline double sigmoid(double x) {
  return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

inline double nll_loss(double avg_logprob_pos) {
  if (avg_logprob_pos > 0)
    throw NumericError("nll_loss: log-probability cannot exceed 0");
  return -avg_logprob_pos;
}

// log[P/(1-P)] with P = exp(avg_logprob).
inline double log_odds(double avg_logprob) {
  if (avg_logprob >= 0)
    throw NumericError("log_odds: degenerate probability 1");
  return avg_logprob - log1mexp(avg_logprob);
}

struct OrLossResult {
  double loss = 0;
  double log_odds_ratio = 0;
};

// -log sigmoid(log_odds(pos) - log_odds(neg)), via softplus(-z).
inline OrLossResult odds_ratio_loss(double avg_logprob_pos,
                                    double avg_logprob_neg) {
  const double z = log_odds(avg_logprob_pos) - log_odds(avg_logprob_neg);
  return {softplus(-z), z};
}

// -[log P(y+|x) - log P(y-|x)]; the ablation baseline. May be negative.
inline double probability_ratio_loss(double avg_logprob_pos,
                                     double avg_logprob_neg) {
  if (avg_logprob_pos > 0 || avg_logprob_neg > 0)
    throw NumericError("probability_ratio_loss: log-probs cannot exceed 0");
  return -(avg_logprob_pos - avg_logprob_neg);
}

struct LossBreakdown {
  double nll = 0;
  double or_loss = 0;
  double lambda = 0;
  double total = 0;
  double log_odds_ratio = 0;
  double reward_margin = 0;
};

inline LossBreakdown combined_loss(double nll, double or_loss, double lambda) {
  if (lambda < 0) throw NumericError("combined_loss: lambda must be >= 0");
  LossBreakdown b;
  b.nll = nll;
  b.or_loss = or_loss;
  b.lambda = lambda;
  b.total = lambda == 0 ? nll : nll + lambda * or_loss;
  return b;
}

struct LambdaSchedule {
  double lambda_max = 0.3;
  int total_steps = 0;
};

inline double lambda_at(const LambdaSchedule& s, int step) {
  if (step < 0) throw NumericError("lambda_at: negative step");
  if (s.total_steps <= 0) return s.lambda_max;
  const double frac =
      std::min(1.0, static_cast<double>(step) / s.total_steps);
  return frac * s.lambda_max;
}

struct Diagnostics {
  double log_odds_ratio = 0;
  double reward_margin = 0;
};

inline Diagnostics diagnostics(double avg_logprob_pos, double avg_logprob_neg) {
  Diagnostics d;
  d.log_odds_ratio =
      log_odds(avg_logprob_pos) - log_odds(avg_logprob_neg);
  d.reward_margin = avg_logprob_pos - avg_logprob_neg;
  return d;
}

// --- differentiable graph nodes over scalar avg-logprob tensors ---

// d/da log_odds(a) = 1/(1 - e^a) = exp(-log1mexp(a)).
inline Tensor log_odds_node(Graph& g, const Tensor& avg_logprob) {
  const double a = avg_logprob->v[0];
  if (a >= 0) throw NumericError("log_odds: degenerate probability 1");
  const double lme = log1mexp(a);
  return g.unary_scalar(avg_logprob, a - lme, std::exp(-lme));
}

inline Tensor odds_ratio_loss_node(Graph& g, const Tensor& lp_pos,
                                   const Tensor& lp_neg) {
  Tensor z = g.sub(log_odds_node(g, lp_pos), log_odds_node(g, lp_neg));
  const double zv = z->v[0];
  // softplus(-z), d/dz = sigmoid(z) - 1
  return g.unary_scalar(z, softplus(-zv), sigmoid(zv) - 1.0);
}

inline Tensor probability_ratio_loss_node(Graph& g, const Tensor& lp_pos,
                                          const Tensor& lp_neg) {
  return g.sub(lp_neg, lp_pos);
}

}  // namespace pointlm
