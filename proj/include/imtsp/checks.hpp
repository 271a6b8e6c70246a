#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "imtsp/estimators.hpp"
#include "imtsp/gradcheck.hpp"

namespace imtsp {

/// Outcome of one gradient or estimator check.
struct CheckResult {
  std::string name;
  bool passed = false;
  double error = 0.0;      // max relative error (finite differences) or max absolute deviation (identities)
  double tolerance = 0.0;
  std::string detail;
};

enum class Fault { none, score_sign };

inline const char* to_string(Fault f) { return f == Fault::none ? "none" : "score-sign"; }

inline constexpr double kGradEps = 1e-5;
inline constexpr double kGradTol = 1e-4;
inline constexpr double kIdentityTol = 1e-10;

/// Small network sizes used by the checks; the checked code paths are the
/// same as at full size.
inline ModelConfig check_model() {
  ModelConfig m;
  m.policy.embed_dim = 8;
  m.policy.key_dim = 4;
  m.policy.value_dim = 4;
  m.policy.alloc_key_dim = 4;
  m.surrogate.hidden_dim = 8;
  return m;
}

namespace detail {

inline CheckResult fd_result(const std::string& name, const FiniteDiffReport& r) {
  CheckResult c{name, r.passed, r.max_rel_error, kGradTol, ""};
  if (r.non_finite) c.detail = "non-finite difference";
  if (r.non_smooth) c.detail = "non-smooth point";
  if (!r.passed && c.detail.empty()) c.detail = "worst component " + std::to_string(r.worst_index);
  return c;
}

inline CheckResult identity_result(const std::string& name, const GradientSample& a, const GradientSample& b,
                                   double tol = kIdentityTol) {
  double worst = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) worst = std::max(worst, std::abs(a.values[k] - b.values[k]));
  return {name, worst <= tol, worst, tol, ""};
}

inline Tensor random_row_stochastic(std::size_t rows, std::size_t cols, Rng& rng) {
  Tensor P({rows, cols});
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < cols; ++c) s += (P.at(r, c) = rng.uniform(0.05, 1.0));
    for (std::size_t c = 0; c < cols; ++c) P.at(r, c) /= s;
  }
  return P;
}

}  // namespace detail

/// Finite-difference checks of the differentiable network operations:
/// policy forward (θ), surrogate forward (γ and P) and log_prob (θ).
inline std::vector<CheckResult> network_gradient_checks(std::uint64_t seed) {
  const ModelConfig cfg = check_model();
  Rng rng(derive_seed(seed, 0xC4EC));
  const Instance inst = generate_instance(6, 2, derive_seed(seed, 1));
  const ParamStore theta = init_policy(cfg.policy, inst.num_agents, rng);
  const ParamStore gamma = init_surrogate(cfg.surrogate, inst.num_free(), inst.num_agents, rng);

  Tensor weights({inst.num_free(), inst.num_agents});
  for (double& w : weights.vec()) w = rng.uniform(-1.0, 1.0);
  std::vector<std::size_t> choices;
  for (std::size_t r = 0; r < inst.num_free(); ++r) choices.push_back(rng.below(inst.num_agents));
  ParamStore probs;
  probs.add("P", detail::random_row_stochastic(inst.num_free(), inst.num_agents, rng));

  std::vector<CheckResult> out;
  out.push_back(detail::fd_result(
      "policy_forward", finite_diff_check(
                            [&](Tape& t, const ParamStore& p) {
                              return sum(multiply(run_policy(t, inst, p, cfg.policy).scores.probs, t.constant(weights)));
                            },
                            theta, kGradEps, kGradTol)));
  out.push_back(detail::fd_result(
      "surrogate_forward_gamma",
      finite_diff_check([&](Tape& t, const ParamStore& g) { return surrogate_predict(t.constant(probs.at("P")), g, cfg.surrogate); },
                        gamma, kGradEps, kGradTol)));
  out.push_back(detail::fd_result(
      "surrogate_forward_probs",
      finite_diff_check([&](Tape& t, const ParamStore& p) { return surrogate_predict(t.param(p, "P"), gamma, cfg.surrogate); },
                        probs, kGradEps, kGradTol)));
  out.push_back(detail::fd_result(
      "log_prob", finite_diff_check(
                      [&](Tape& t, const ParamStore& p) {
                        return log_prob(run_policy(t, inst, p, cfg.policy).scores.probs, choices);
                      },
                      theta, kGradEps, kGradTol)));
  return out;
}

/// Estimator checks on a 2-free-city / 2-agent instance, using exhaustive
/// enumeration and an independently recorded score.
inline std::vector<CheckResult> estimator_checks(std::uint64_t seed, Fault fault = Fault::none) {
  ModelConfig cfg = check_model();
  if (fault == Fault::score_sign) cfg.estimator.score_sign = -1.0;
  Rng rng(derive_seed(seed, 0xE57));
  const Instance inst = generate_instance(3, 2, derive_seed(seed, 2));
  const ParamStore theta = init_policy(cfg.policy, inst.num_agents, rng);
  const ParamStore gamma = init_surrogate(cfg.surrogate, inst.num_free(), inst.num_agents, rng);
  std::vector<CheckResult> out;

  // The estimator's score against ∂log P(a)/∂θ recorded on a fresh tape.
  {
    Rng draw(derive_seed(seed, 3));
    const EstimatorOutput o = reinforce_grad(inst, theta, draw, cfg);
    Tape t;
    const GradientSample ref = t.backward(log_prob(run_policy(t, inst, theta, cfg.policy).scores.probs, o.choices), theta);
    out.push_back(detail::identity_result("estimator_score", o.score, ref, 1e-12));
  }

  // E[∂log P/∂θ] = 0.
  {
    Tape t;
    const Tensor P = run_policy(t, inst, theta, cfg.policy).scores.probs.value();
    GradientSample mean = theta.zero_gradient();
    for_each_allocation(P, [&](const std::vector<std::size_t>& choices, double prob) {
      Tape s;
      mean += prob * s.backward(log_prob(run_policy(s, inst, theta, cfg.policy).scores.probs, choices), theta);
    });
    out.push_back(detail::identity_result("score_mean_zero", mean, theta.zero_gradient()));
  }

  const ExactExpectation e = enumerate_expectation(inst, theta, &gamma, cfg);
  out.push_back(detail::identity_result("baseline_unbiased", e.baseline_only, e.reinforce));
  GradientSample offset = e.reinforce;
  offset += (-cfg.estimator.zeta) * e.pathwise;
  out.push_back(detail::identity_result("pathwise_offset", e.full, offset));

  // ∂‖g‖²/∂γ against central differences with the sample frozen.
  {
    Rng draw(derive_seed(seed, 4));
    auto r = imtsp_theta_grad(inst, theta, gamma, draw, cfg);
    const GradientSample analytic = surrogate_gamma_grad(r.context, theta, gamma, cfg);
    const auto choices = r.output.choices;
    const double L = r.output.L;
    auto norm2 = [&](const ParamStore& g) {
      auto pass = detail::policy_pass(inst, theta, cfg.policy);
      return detail::cv_theta_grad(pass, choices, L, theta, g, cfg).output.grad_theta.squared_norm();
    };
    constexpr double tol = 1e-3;
    ParamStore g = gamma;
    double worst = 0.0;
    for (std::size_t k = 0; k < g.size(); ++k) {
      const double saved = g.flat_ref(k);
      g.flat_ref(k) = saved + kGradEps;
      const double plus = norm2(g);
      g.flat_ref(k) = saved - kGradEps;
      const double minus = norm2(g);
      g.flat_ref(k) = saved;
      const double numeric = (plus - minus) / (2.0 * kGradEps);
      const double a = analytic.values[k];
      worst = std::max(worst, std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8}));
    }
    out.push_back({"surrogate_gamma_grad", worst < tol, worst, tol, ""});
  }
  return out;
}

/// Every check, as run by `imtsp gradcheck`.
inline std::vector<CheckResult> all_checks(std::uint64_t seed, Fault fault = Fault::none) {
  auto out = network_gradient_checks(seed);
  auto more = estimator_checks(seed, fault);
  out.insert(out.end(), more.begin(), more.end());
  return out;
}

}  // namespace imtsp
