#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "imtsp/estimators.hpp"

namespace imtsp::testing {

/// Narrow policy and surrogate so enumeration and finite differences stay cheap.
inline ModelConfig tiny_model() {
  ModelConfig m;
  m.policy.embed_dim = 8;
  m.policy.key_dim = 4;
  m.policy.value_dim = 4;
  m.policy.alloc_key_dim = 4;
  m.surrogate.hidden_dim = 8;
  return m;
}

struct TinySetup {
  Instance instance;
  ParamStore theta{ParamRole::policy};
  ParamStore gamma{ParamRole::surrogate};
};

inline TinySetup tiny_setup(std::size_t n, std::size_t m, std::uint64_t seed, const ModelConfig& cfg = tiny_model()) {
  TinySetup s;
  s.instance = generate_instance(n, m, seed);
  Rng rng(derive_seed(seed, 77));
  s.theta = init_policy(cfg.policy, m, rng);
  s.gamma = init_surrogate(cfg.surrogate, n - 1, m, rng);
  return s;
}

/// Policy whose raw scores are pushed far into the clip's flat region, so
/// every ∂P/∂θ is exactly zero.
inline void saturate(ParamStore& theta) {
  for (double& v : theta.at("allocation.query").vec()) v *= 1e9;
}

inline double max_abs_diff(const GradientSample& a, const GradientSample& b) {
  double m = 0;
  for (std::size_t k = 0; k < a.size(); ++k) m = std::max(m, std::abs(a.values[k] - b.values[k]));
  return m;
}

}  // namespace imtsp::testing
