#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <vector>

#include "imtsp/params.hpp"
#include "imtsp/policy.hpp"
#include "imtsp/problem.hpp"
#include "imtsp/surrogate.hpp"
#include "imtsp/tape.hpp"
#include "imtsp/tsp_solver.hpp"

namespace imtsp {

enum class EstimatorKind { reinforce, control_variate };

inline const char* to_string(EstimatorKind k) { return k == EstimatorKind::reinforce ? "reinforce" : "cv"; }

/// Gradient estimator selection.
///
/// With kind == control_variate the θ-gradient of one sample is
///   (L + ζ·L′)·∂log P/∂θ − ζ·∂s(P(θ);γ)/∂θ
/// where L′ = s(P;γ) enters the first term as a constant. ζ = −1 gives the
/// learned-baseline-plus-pathwise form used for training. With
/// pathwise_term off the second term is dropped.
struct EstimatorConfig {
  EstimatorKind kind = EstimatorKind::control_variate;
  bool pathwise_term = true;
  double zeta = -1.0;
  /// Multiplies the score ∂log P/∂θ. Always 1 outside fault-injection
  /// checks, which set it to −1 to prove the oracles catch a sign error.
  double score_sign = 1.0;

  friend bool operator==(const EstimatorConfig&, const EstimatorConfig&) = default;
};

/// Everything a per-sample estimate depends on besides the parameters.
struct ModelConfig {
  PolicyConfig policy;
  SurrogateConfig surrogate;
  EstimatorConfig estimator;
  SolverConfig solver;
};

struct EstimatorOutput {
  GradientSample grad_theta;
  std::optional<GradientSample> grad_gamma;
  GradientSample score;  // ∂log P(a)/∂θ of the sampled allocation
  double L = 0.0;
  double L_prime = 0.0;
  double log_prob = 0.0;
  std::vector<std::size_t> choices;

  /// L·score, the plain log-derivative estimate for the same draw.
  GradientSample reinforce_grad() const { return L * score; }
};

/// The θ-gradient tape of one sample, kept so the γ-gradient can reuse it.
struct SampleContext {
  std::unique_ptr<Tape> tape;
  const ParamStore* theta = nullptr;
  Var probs;
  Var prediction;
  GradientSample score;
  GradientSample grad_theta;
  double L = 0.0;
  double L_prime = 0.0;
};

struct ThetaGradResult {
  EstimatorOutput output;
  SampleContext context;
};

namespace detail {

struct PolicyPass {
  std::unique_ptr<Tape> tape;
  PolicyOutput out;
};

inline PolicyPass policy_pass(const Instance& inst, const ParamStore& theta, const PolicyConfig& cfg) {
  PolicyPass p;
  p.tape = std::make_unique<Tape>();
  p.out = run_policy(*p.tape, inst, theta, cfg);
  return p;
}

inline double solve_L(const std::vector<std::size_t>& choices, const Instance& inst, const SolverConfig& solver) {
  return evaluate_allocation(allocation_from_choices(choices, inst), inst, solver).objective.L;
}

/// θ-gradient of the control-variate estimator for fixed choices and L,
/// recorded on the policy pass's tape.
inline ThetaGradResult cv_theta_grad(PolicyPass& pass, const std::vector<std::size_t>& choices, double L,
                                     const ParamStore& theta, const ParamStore& gamma, const ModelConfig& cfg) {
  Tape& tape = *pass.tape;
  const Var probs = pass.out.scores.probs;
  const Var lp = log_prob(probs, choices);
  const Var s = surrogate_predict(probs, gamma, cfg.surrogate);
  const double zeta = cfg.estimator.zeta;

  ThetaGradResult r;
  EstimatorOutput& o = r.output;
  o.choices = choices;
  o.L = L;
  o.L_prime = s.item();
  o.log_prob = lp.item();
  o.score = cfg.estimator.score_sign * tape.backward(lp, theta);
  o.grad_theta = (L + zeta * o.L_prime) * o.score;
  if (cfg.estimator.pathwise_term) o.grad_theta += (-zeta) * tape.backward(s, theta);

  SampleContext& c = r.context;
  c.theta = &theta;
  c.probs = probs;
  c.prediction = s;
  c.score = o.score;
  c.grad_theta = o.grad_theta;
  c.L = L;
  c.L_prime = o.L_prime;
  c.tape = std::move(pass.tape);
  return r;
}

}  // namespace detail

// =============================================================================
// Per-sample estimators
// =============================================================================

/// Plain log-derivative estimate: sample a ~ P(θ), solve the M tours, and
/// return L(a)·∂log P(a)/∂θ.
inline EstimatorOutput reinforce_grad(const Instance& inst, const ParamStore& theta, Rng& rng,
                                      const ModelConfig& cfg) {
  auto pass = detail::policy_pass(inst, theta, cfg.policy);
  const Var probs = pass.out.scores.probs;
  const SampledAllocation sample = sample_allocation(probs.value(), inst, rng);
  EstimatorOutput o;
  o.choices = sample.choices;
  o.L = evaluate_allocation(sample.allocation, inst, cfg.solver).objective.L;
  const Var lp = log_prob(probs, sample.choices);
  o.log_prob = lp.item();
  o.score = cfg.estimator.score_sign * pass.tape->backward(lp, theta);
  o.grad_theta = o.L * o.score;
  return o;
}

/// Control-variate θ-gradient for one sampled allocation. The returned
/// context keeps the tape alive for surrogate_gamma_grad. `theta` must stay
/// alive and unmodified while the context is used.
inline ThetaGradResult imtsp_theta_grad(const Instance& inst, const ParamStore& theta, const ParamStore& gamma,
                                        Rng& rng, const ModelConfig& cfg) {
  auto pass = detail::policy_pass(inst, theta, cfg.policy);
  const SampledAllocation sample = sample_allocation(pass.out.scores.probs.value(), inst, rng);
  const double L = detail::solve_L(sample.choices, inst, cfg.solver);
  return detail::cv_theta_grad(pass, sample.choices, L, theta, gamma, cfg);
}

/// ∂/∂γ ‖g_θ‖² for the sample held by `ctx`.
///
/// With g = (L + ζL′)σ − ζ Jᵀ∇ₚs (σ the score, J = ∂P/∂θ):
///   ∂‖g‖²/∂γ = 2ζ(g·σ)·∂s/∂γ − 2ζ·∂/∂γ⟨∇ₚs, J g⟩.
/// J g is a forward-mode product through the policy tape; the second term
/// is the γ-gradient of the surrogate's directional derivative along J g.
inline GradientSample surrogate_gamma_grad(const SampleContext& ctx, const ParamStore& theta,
                                           const ParamStore& gamma, const ModelConfig& cfg) {
  if (!ctx.tape) throw ArgumentError("surrogate_gamma_grad: the sample's θ-gradient tape is missing");
  if (ctx.theta != &theta) throw ArgumentError("surrogate_gamma_grad: θ differs from the one the tape recorded");
  const double zeta = cfg.estimator.zeta;
  const Tensor& P = ctx.probs.value();
  Tensor direction(P.shape(), 0.0);
  if (cfg.estimator.pathwise_term) {
    const Var outs[] = {ctx.probs};
    direction = ctx.tape->jvp(theta, ctx.grad_theta.values, outs)[0];
  }
  Tape tape;
  const DirectionalPrediction d = surrogate_directional(tape, P, direction, gamma, cfg.surrogate);
  const double score_weight = 2.0 * zeta * ctx.grad_theta.dot(ctx.score);
  Var objective = scale(d.value, score_weight);
  if (cfg.estimator.pathwise_term) objective = objective + scale(d.directional, -2.0 * zeta);
  return tape.backward(objective, gamma);
}

/// One full estimator draw according to cfg.estimator.kind; grad_gamma is
/// filled for the control-variate estimator only.
inline EstimatorOutput estimate(const Instance& inst, const ParamStore& theta, const ParamStore* gamma, Rng& rng,
                                const ModelConfig& cfg) {
  if (cfg.estimator.kind == EstimatorKind::reinforce) return reinforce_grad(inst, theta, rng, cfg);
  if (!gamma) throw ArgumentError("estimate: the control-variate estimator needs surrogate parameters");
  ThetaGradResult r = imtsp_theta_grad(inst, theta, *gamma, rng, cfg);
  r.output.grad_gamma = surrogate_gamma_grad(r.context, theta, *gamma, cfg);
  return std::move(r.output);
}

// =============================================================================
// Control-variate algebra
// =============================================================================

/// h + ζ(c − E[c]), elementwise.
inline std::vector<double> cv_combine(std::span<const double> h, std::span<const double> c,
                                      std::span<const double> c_mean, double zeta) {
  if (h.size() != c.size() || h.size() != c_mean.size())
    throw ShapeError("cv_combine: lengths " + std::to_string(h.size()) + ", " + std::to_string(c.size()) + ", " +
                     std::to_string(c_mean.size()));
  std::vector<double> out(h.size());
  for (std::size_t i = 0; i < h.size(); ++i) out[i] = h[i] + zeta * (c[i] - c_mean[i]);
  return out;
}

struct ZetaEstimate {
  double zeta_star = 0.0;
  double corr = 0.0;
};

/// ζ* = −Cov(h, c)/Var(c) from paired samples. For vector-valued samples
/// the covariances and variances are summed over components (the scalar ζ
/// minimising total variance).
inline ZetaEstimate optimal_zeta(std::span<const std::vector<double>> h, std::span<const std::vector<double>> c) {
  if (h.size() != c.size()) throw ShapeError("optimal_zeta: sample counts differ");
  if (h.size() < 2) throw ArgumentError("optimal_zeta: need at least two samples");
  const std::size_t n = h.size(), dim = h[0].size();
  double cov = 0.0, var_h = 0.0, var_c = 0.0;
  for (std::size_t k = 0; k < dim; ++k) {
    double mh = 0.0, mc = 0.0;
    for (std::size_t s = 0; s < n; ++s) {
      if (h[s].size() != dim || c[s].size() != dim) throw ShapeError("optimal_zeta: ragged samples");
      mh += h[s][k];
      mc += c[s][k];
    }
    mh /= static_cast<double>(n);
    mc /= static_cast<double>(n);
    for (std::size_t s = 0; s < n; ++s) {
      const double dh = h[s][k] - mh, dc = c[s][k] - mc;
      cov += dh * dc;
      var_h += dh * dh;
      var_c += dc * dc;
    }
  }
  if (!(var_c > 0.0)) throw ArgumentError("optimal_zeta: control variate has zero variance");
  ZetaEstimate z;
  z.zeta_star = -cov / var_c;
  z.corr = var_h > 0.0 ? cov / std::sqrt(var_h * var_c) : 0.0;
  return z;
}

inline ZetaEstimate optimal_zeta(std::span<const double> h, std::span<const double> c) {
  if (h.size() != c.size()) throw ShapeError("optimal_zeta: sample counts differ");
  std::vector<std::vector<double>> hv, cv;
  for (std::size_t i = 0; i < h.size(); ++i) {
    hv.push_back({h[i]});
    cv.push_back({c[i]});
  }
  return optimal_zeta(hv, cv);
}

// =============================================================================
// Variance instrumentation
// =============================================================================

/// Σ_i ln(Var_i + eps) over parameters i, unbiased sample variance.
inline double batch_variance_metric(std::span<const GradientSample> samples, double eps) {
  if (samples.size() < 2) throw ArgumentError("batch_variance_metric: need at least two samples");
  const std::size_t n = samples.size(), dim = samples[0].size();
  double total = 0.0;
  for (std::size_t k = 0; k < dim; ++k) {
    double mean = 0.0;
    for (const auto& s : samples) mean += s.values[k];
    mean /= static_cast<double>(n);
    double ss = 0.0;
    for (const auto& s : samples) ss += (s.values[k] - mean) * (s.values[k] - mean);
    total += std::log(ss / static_cast<double>(n - 1) + eps);
  }
  return total;
}

/// Means of consecutive groups of `minibatch_size` samples (a trailing
/// partial group is dropped).
inline std::vector<GradientSample> minibatch_means(std::span<const GradientSample> samples,
                                                   std::size_t minibatch_size) {
  if (minibatch_size < 1) throw ArgumentError("minibatch_means: minibatch_size must be >= 1");
  std::vector<GradientSample> out;
  for (std::size_t start = 0; start + minibatch_size <= samples.size(); start += minibatch_size) {
    GradientSample m = samples[start];
    for (std::size_t i = 1; i < minibatch_size; ++i) m += samples[start + i];
    m *= 1.0 / static_cast<double>(minibatch_size);
    out.push_back(std::move(m));
  }
  return out;
}

// =============================================================================
// Exact expectations by enumerating every allocation (tiny instances)
// =============================================================================

inline constexpr std::size_t kEnumerationLimit = 4096;

/// Calls fn(choices, probability) for every allocation of the free cities.
inline void for_each_allocation(const Tensor& P, const std::function<void(const std::vector<std::size_t>&, double)>& fn) {
  const std::size_t rows = P.rows(), M = P.cols();
  double count = 1.0;
  for (std::size_t r = 0; r < rows; ++r) count *= static_cast<double>(M);
  if (count > static_cast<double>(kEnumerationLimit))
    throw ArgumentError("for_each_allocation: " + format_double(count) + " allocations exceed the limit");
  std::vector<std::size_t> choices(rows, 0);
  while (true) {
    double prob = 1.0;
    for (std::size_t r = 0; r < rows; ++r) prob *= P.at(r, choices[r]);
    fn(choices, prob);
    std::size_t r = rows;
    while (r > 0 && ++choices[r - 1] == M) choices[--r] = 0;
    if (r == 0) break;
  }
}

/// Exhaustive expectations of the estimators over a ~ P(θ).
struct ExactExpectation {
  GradientSample reinforce;      // E[L·σ]
  GradientSample baseline_only;  // E[(L + ζL′)·σ]
  GradientSample full;           // E[g] with the pathwise term
  GradientSample pathwise;       // ∂s(P(θ);γ)/∂θ
  std::optional<GradientSample> gamma;  // E[∂‖g‖²/∂γ] for the configured estimator
  double expected_L = 0.0;
  std::size_t allocations = 0;
};

inline ExactExpectation enumerate_expectation(const Instance& inst, const ParamStore& theta, const ParamStore* gamma,
                                              const ModelConfig& cfg) {
  auto base = detail::policy_pass(inst, theta, cfg.policy);
  const Tensor P = base.out.scores.probs.value();
  ExactExpectation e;
  e.reinforce = theta.zero_gradient();
  e.baseline_only = theta.zero_gradient();
  e.full = theta.zero_gradient();
  e.pathwise = theta.zero_gradient();
  if (gamma) {
    Tape tape;
    auto out = run_policy(tape, inst, theta, cfg.policy);
    e.pathwise = tape.backward(surrogate_predict(out.scores.probs, *gamma, cfg.surrogate), theta);
    if (cfg.estimator.kind == EstimatorKind::control_variate) e.gamma = gamma->zero_gradient();
  }
  for_each_allocation(P, [&](const std::vector<std::size_t>& choices, double prob) {
    const double L = detail::solve_L(choices, inst, cfg.solver);
    e.expected_L += prob * L;
    ++e.allocations;
    auto pass = detail::policy_pass(inst, theta, cfg.policy);
    const GradientSample score =
        cfg.estimator.score_sign * pass.tape->backward(log_prob(pass.out.scores.probs, choices), theta);
    e.reinforce += (prob * L) * score;
    if (!gamma) return;
    ModelConfig c = cfg;
    c.estimator.pathwise_term = false;
    auto p1 = detail::policy_pass(inst, theta, cfg.policy);
    e.baseline_only += prob * detail::cv_theta_grad(p1, choices, L, theta, *gamma, c).output.grad_theta;
    c.estimator.pathwise_term = true;
    auto p2 = detail::policy_pass(inst, theta, cfg.policy);
    auto full = detail::cv_theta_grad(p2, choices, L, theta, *gamma, c);
    e.full += prob * full.output.grad_theta;
    if (e.gamma) {
      if (cfg.estimator.pathwise_term) {
        *e.gamma += prob * surrogate_gamma_grad(full.context, theta, *gamma, cfg);
      } else {
        auto p3 = detail::policy_pass(inst, theta, cfg.policy);
        auto r = detail::cv_theta_grad(p3, choices, L, theta, *gamma, cfg);
        *e.gamma += prob * surrogate_gamma_grad(r.context, theta, *gamma, cfg);
      }
    }
  });
  return e;
}

}  // namespace imtsp
