#pragma once

#include <cstddef>
#include <string>
#include <utility>

#include "imtsp/params.hpp"
#include "imtsp/rng.hpp"
#include "imtsp/tape.hpp"

namespace imtsp {

/// How the N_free×M allocation matrix becomes the network input.
enum class InputReduction {
  flatten,      // row-major, N_free·M inputs; ties γ to one (N, M)
  column_mean,  // per-agent column means, M inputs; size-agnostic in N
};

inline const char* to_string(InputReduction r) { return r == InputReduction::flatten ? "flatten" : "column_mean"; }

/// Dense tanh network s(P; γ) predicting the min-max length.
struct SurrogateConfig {
  std::size_t hidden_dim = 256;
  std::size_t layers = 3;
  InputReduction input_reduction = InputReduction::flatten;

  void validate() const {
    if (layers < 1) throw ArgumentError("SurrogateConfig: layers must be >= 1");
    if (hidden_dim < 1) throw ArgumentError("SurrogateConfig: hidden_dim must be >= 1");
  }
  std::size_t input_dim(std::size_t num_free, std::size_t num_agents) const {
    return input_reduction == InputReduction::flatten ? num_free * num_agents : num_agents;
  }
  friend bool operator==(const SurrogateConfig&, const SurrogateConfig&) = default;
};

inline std::string layer_name(std::size_t l, const char* part) {
  return "layer" + std::to_string(l) + "." + part;
}

inline ParamStore init_surrogate(const SurrogateConfig& cfg, std::size_t num_free, std::size_t num_agents, Rng& rng) {
  cfg.validate();
  ParamStore g(ParamRole::surrogate);
  std::size_t in = cfg.input_dim(num_free, num_agents);
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    const std::size_t out = l + 1 == cfg.layers ? 1 : cfg.hidden_dim;
    g.add(layer_name(l, "weight"), glorot(out, in, rng));
    g.add(layer_name(l, "bias"), Tensor({1, out}));
    in = out;
  }
  return g;
}

namespace detail {

inline void check_surrogate_input(const Tensor& P, const ParamStore& gamma, const SurrogateConfig& cfg) {
  const std::size_t expected = gamma.at(layer_name(0, "weight")).cols();
  const std::size_t got = cfg.input_dim(P.rows(), P.cols());
  if (expected != got)
    throw ShapeError("surrogate: network expects " + std::to_string(expected) + " inputs, allocation matrix " +
                     shape_string(P.shape()) + " gives " + std::to_string(got));
}

/// Linear map from P to the network input (so tangents use the same map).
inline Var reduce_input(Var P, const SurrogateConfig& cfg) {
  if (cfg.input_reduction == InputReduction::flatten) return reshape(P, {1, P.value().size()});
  return mean_rows(P);
}

}  // namespace detail

/// Scalar prediction L′, differentiable in both P and γ.
inline Var surrogate_predict(Var probs, const ParamStore& gamma, const SurrogateConfig& cfg) {
  detail::check_surrogate_input(probs.value(), gamma, cfg);
  Tape& tape = *probs.tape;
  Var x = detail::reduce_input(probs, cfg);
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    x = add(matmul(x, tape.param(gamma, layer_name(l, "weight")), true), tape.param(gamma, layer_name(l, "bias")));
    if (l + 1 < cfg.layers) x = tanh(x);
  }
  return x;
}

/// Prediction and its directional derivative along `direction` in P-space,
/// both recorded as functions of γ (P and the direction are constants).
/// Differentiating the second output with respect to γ gives the mixed
/// second derivative ∂/∂γ [⟨∂s/∂P, direction⟩] without any second-order
/// machinery in the tape.
struct DirectionalPrediction {
  Var value;
  Var directional;
};

inline DirectionalPrediction surrogate_directional(Tape& tape, const Tensor& probs, const Tensor& direction,
                                                   const ParamStore& gamma, const SurrogateConfig& cfg) {
  detail::check_surrogate_input(probs, gamma, cfg);
  if (probs.shape() != direction.shape())
    throw ShapeError("surrogate_directional: direction " + shape_string(direction.shape()) + " vs matrix " +
                     shape_string(probs.shape()));
  Var x = detail::reduce_input(tape.constant(probs), cfg);
  Var dx = detail::reduce_input(tape.constant(direction), cfg);
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    Var W = tape.param(gamma, layer_name(l, "weight"));
    Var z = add(matmul(x, W, true), tape.param(gamma, layer_name(l, "bias")));
    Var dz = matmul(dx, W, true);
    if (l + 1 < cfg.layers) {
      x = tanh(z);
      dx = multiply(shift(scale(multiply(x, x), -1.0), 1.0), dz);  // (1 − tanh²)·ż
    } else {
      x = z;
      dx = dz;
    }
  }
  return {x, dx};
}

}  // namespace imtsp
