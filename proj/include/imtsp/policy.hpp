#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "imtsp/params.hpp"
#include "imtsp/problem.hpp"
#include "imtsp/rng.hpp"
#include "imtsp/tape.hpp"

namespace imtsp {

/// Architecture of the allocation network.
///
/// City embedding: a linear projection of coordinates followed by
/// `message_iterations` rounds of message passing over the complete city
/// graph (edge feature = Euclidean distance). Messages are
/// tanh(W_self f_i + W_nbr f_k + w_edge e_ik + b), aggregated by mean, and
/// the update is tanh(U_self f_i + U_agg l_i + b). The graph feature is the
/// mean over non-depot cities; the context is [graph; depot].
///
/// Agent embedding: one attention layer. Keys and values come from the
/// non-depot city features; every agent owns its own query projection of
/// the context, which is what makes the agent embeddings distinct.
///
/// Allocation: scaled dot products between projected cities and projected
/// agents, clipped by clip_alpha·tanh, then a softmax over agents per city.
struct PolicyConfig {
  std::size_t embed_dim = 64;
  std::size_t key_dim = 16;
  std::size_t value_dim = 16;
  std::size_t alloc_key_dim = 16;
  double clip_alpha = 10.0;
  std::size_t message_iterations = 2;

  void validate() const {
    if (embed_dim < 1 || key_dim < 1 || value_dim < 1 || alloc_key_dim < 1)
      throw ArgumentError("PolicyConfig: all dimensions must be >= 1");
    if (!(clip_alpha > 0.0)) throw ArgumentError("PolicyConfig: clip_alpha must be > 0");
  }
  friend bool operator==(const PolicyConfig&, const PolicyConfig&) = default;
};

/// Init gain of the embedding and the attention/allocation projections.
inline constexpr double kProjectionGain = 3.0;

/// Policy parameters for `num_agents` agents (the query projection is per
/// agent, so θ is tied to M but not to N).
inline ParamStore init_policy(const PolicyConfig& cfg, std::size_t num_agents, Rng& rng) {
  cfg.validate();
  if (num_agents < 1) throw ArgumentError("init_policy: num_agents must be >= 1");
  const std::size_t D = cfg.embed_dim;
  ParamStore p(ParamRole::policy);
  p.add("embed.weight", glorot(D, 2, rng, kProjectionGain));
  p.add("embed.bias", Tensor({1, D}));
  p.add("message.self", glorot(D, D, rng));
  p.add("message.neighbor", glorot(D, D, rng));
  p.add("message.edge", glorot(1, D, rng));
  p.add("message.bias", Tensor({1, D}));
  p.add("update.self", glorot(D, D, rng));
  p.add("update.aggregate", glorot(D, D, rng));
  p.add("update.bias", Tensor({1, D}));
  p.add("attention.key", glorot(cfg.key_dim, D, rng, kProjectionGain));
  p.add("attention.value", glorot(cfg.value_dim, D, rng));
  // One key_dim×2D query block per agent, stacked row-wise.
  Tensor q({num_agents * cfg.key_dim, 2 * D});
  for (std::size_t j = 0; j < num_agents; ++j) {
    Tensor block = glorot(cfg.key_dim, 2 * D, rng, kProjectionGain);
    std::copy(block.vec().begin(), block.vec().end(),
              q.vec().begin() + static_cast<std::ptrdiff_t>(j * block.size()));
  }
  p.add("attention.query", std::move(q));
  p.add("allocation.key", glorot(cfg.alloc_key_dim, D, rng, kProjectionGain));
  p.add("allocation.query", glorot(cfg.alloc_key_dim, cfg.value_dim, rng, kProjectionGain));
  return p;
}

inline std::size_t policy_num_agents(const ParamStore& theta, const PolicyConfig& cfg) {
  return theta.at("attention.query").rows() / cfg.key_dim;
}

/// Intermediate quantities of one policy evaluation, all on the same tape.
struct EmbeddingState {
  Var city_features;   // N×D
  Var free_features;   // N_free×D
  Var graph_feature;   // 1×D
  Var context;         // 1×2D, [graph; depot]
  Var attention;       // M×N_free attention weights
  Var values;          // N_free×value_dim
  Var agent_embeddings;  // M×value_dim
};

struct AllocationScores {
  Var raw;    // u′, N_free×M
  Var clipped;  // β = α·tanh(u′)
  Var probs;  // P, rows sum to one
};

struct PolicyOutput {
  EmbeddingState embedding;
  AllocationScores scores;
};

/// City, graph and context features.
inline EmbeddingState embed_cities(Tape& tape, const Instance& inst, const ParamStore& theta,
                                   const PolicyConfig& cfg) {
  const std::size_t N = inst.num_cities();
  // Coordinates relative to the depot, so features are translation invariant.
  const Point d = inst.cities[inst.depot];
  Tensor coords({N, 2});
  for (std::size_t i = 0; i < N; ++i) {
    coords.at(i, 0) = inst.cities[i].x - d.x;
    coords.at(i, 1) = inst.cities[i].y - d.y;
  }
  Var F = add(matmul(tape.constant(std::move(coords)), tape.param(theta, "embed.weight"), true),
              tape.param(theta, "embed.bias"));

  if (cfg.message_iterations > 0) {
    // Ordered pairs (i, k), k ≠ i, grouped by receiver i.
    std::vector<std::size_t> recv, send;
    Tensor edges({N * (N - 1), 1});
    Tensor average({N, N * (N - 1)});
    for (std::size_t i = 0, p = 0; i < N; ++i)
      for (std::size_t k = 0; k < N; ++k) {
        if (k == i) continue;
        recv.push_back(i);
        send.push_back(k);
        edges[p] = inst.dist(i, k);
        average.at(i, p) = 1.0 / static_cast<double>(N - 1);
        ++p;
      }
    Var E = tape.constant(std::move(edges));
    Var avg = tape.constant(std::move(average));
    Var w_self = tape.param(theta, "message.self");
    Var w_nbr = tape.param(theta, "message.neighbor");
    Var w_edge = tape.param(theta, "message.edge");
    Var b_msg = tape.param(theta, "message.bias");
    Var u_self = tape.param(theta, "update.self");
    Var u_agg = tape.param(theta, "update.aggregate");
    Var b_upd = tape.param(theta, "update.bias");
    Var edge_term = matmul(E, w_edge);
    for (std::size_t t = 0; t < cfg.message_iterations; ++t) {
      Var pre = gather_rows(matmul(F, w_self, true), recv) + gather_rows(matmul(F, w_nbr, true), send);
      Var messages = tanh(add(pre + edge_term, b_msg));
      Var aggregated = matmul(avg, messages);
      F = tanh(add(matmul(F, u_self, true) + matmul(aggregated, u_agg, true), b_upd));
    }
  }

  EmbeddingState s;
  s.city_features = F;
  s.free_features = gather_rows(F, inst.free_cities());
  s.graph_feature = mean_rows(s.free_features);
  s.context = concat(s.graph_feature, gather_rows(F, {inst.depot}), 1);
  return s;
}

/// Attention layer producing one embedding per agent.
inline void embed_agents(EmbeddingState& s, const ParamStore& theta, const PolicyConfig& cfg) {
  Tape& tape = *s.context.tape;
  const std::size_t M = policy_num_agents(theta, cfg);
  Var keys = matmul(s.free_features, tape.param(theta, "attention.key"), true);
  s.values = matmul(s.free_features, tape.param(theta, "attention.value"), true);
  Var queries = reshape(matmul(s.context, tape.param(theta, "attention.query"), true), {M, cfg.key_dim});
  Var logits = scale(matmul(queries, keys, true), 1.0 / std::sqrt(static_cast<double>(cfg.key_dim)));
  s.attention = softmax_rows(logits);
  s.agent_embeddings = matmul(s.attention, s.values);
}

/// β = α·tanh(u′) on arbitrary raw scores; exposed for direct testing.
inline Var clip_scores(Var raw, double alpha) { return scale(tanh(raw), alpha); }

/// City-to-agent probability matrix.
inline AllocationScores allocation_probs(const EmbeddingState& s, const ParamStore& theta,
                                         const PolicyConfig& cfg) {
  Tape& tape = *s.context.tape;
  Var city_keys = matmul(s.free_features, tape.param(theta, "allocation.key"), true);
  Var agent_queries = matmul(s.agent_embeddings, tape.param(theta, "allocation.query"), true);
  AllocationScores a;
  a.raw = scale(matmul(city_keys, agent_queries, true), 1.0 / std::sqrt(static_cast<double>(cfg.alloc_key_dim)));
  a.clipped = clip_scores(a.raw, cfg.clip_alpha);
  a.probs = softmax_rows(a.clipped);
  return a;
}

inline PolicyOutput run_policy(Tape& tape, const Instance& inst, const ParamStore& theta, const PolicyConfig& cfg) {
  if (policy_num_agents(theta, cfg) != inst.num_agents)
    throw ArgumentError("policy: parameters are for " + std::to_string(policy_num_agents(theta, cfg)) +
                        " agents, instance has " + std::to_string(inst.num_agents));
  PolicyOutput out;
  out.embedding = embed_cities(tape, inst, theta, cfg);
  embed_agents(out.embedding, theta, cfg);
  out.scores = allocation_probs(out.embedding, theta, cfg);
  return out;
}

// =============================================================================
// Sampling and likelihood
// =============================================================================

/// An allocation drawn from P, with the row choices it came from.
struct SampledAllocation {
  Allocation allocation;
  std::vector<std::size_t> choices;  // agent per free-city row
  double log_prob = 0.0;
};

inline Allocation allocation_from_choices(const std::vector<std::size_t>& choices, const Instance& inst) {
  Allocation a;
  a.groups.resize(inst.num_agents);
  const auto free = inst.free_cities();
  if (choices.size() != free.size())
    throw ArgumentError("allocation_from_choices: expected " + std::to_string(free.size()) + " choices");
  for (std::size_t r = 0; r < choices.size(); ++r) {
    if (choices[r] >= inst.num_agents) throw ArgumentError("allocation_from_choices: agent out of range");
    a.groups[choices[r]].push_back(free[r]);
  }
  return a;
}

inline void check_row_stochastic(const Tensor& P, double tol = 1e-9) {
  for (std::size_t r = 0; r < P.rows(); ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < P.cols(); ++c) {
      if (P.at(r, c) < 0.0) throw ArgumentError("allocation matrix: negative entry in row " + std::to_string(r));
      s += P.at(r, c);
    }
    if (std::abs(s - 1.0) > tol)
      throw ArgumentError("allocation matrix: row " + std::to_string(r) + " sums to " + format_double(s));
  }
}

/// Draws every row independently from its categorical distribution.
inline SampledAllocation sample_allocation(const Tensor& P, const Instance& inst, Rng& rng) {
  check_row_stochastic(P);
  if (P.rows() != inst.num_free() || P.cols() != inst.num_agents)
    throw ShapeError("sample_allocation: matrix " + shape_string(P.shape()) + " does not fit the instance");
  SampledAllocation s;
  for (std::size_t r = 0; r < P.rows(); ++r) {
    const double u = rng.uniform();
    double acc = 0.0;
    std::size_t pick = P.cols() - 1;
    for (std::size_t c = 0; c < P.cols(); ++c) {
      acc += P.at(r, c);
      if (u < acc && P.at(r, c) > 0.0) {
        pick = c;
        break;
      }
    }
    while (P.at(r, pick) <= 0.0 && pick > 0) --pick;
    s.choices.push_back(pick);
    s.log_prob += std::log(P.at(r, pick));
  }
  s.allocation = allocation_from_choices(s.choices, inst);
  return s;
}

/// Argmax per row (lowest agent on ties).
inline std::vector<std::size_t> greedy_choices(const Tensor& P) {
  std::vector<std::size_t> out;
  for (std::size_t r = 0; r < P.rows(); ++r) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < P.cols(); ++c)
      if (P.at(r, c) > P.at(r, best)) best = c;
    out.push_back(best);
  }
  return out;
}

/// Σ_rows log P[row, choice], differentiable through P.
inline Var log_prob(Var probs, const std::vector<std::size_t>& choices) {
  const Tensor& P = probs.value();
  if (choices.size() != P.rows())
    throw ShapeError("log_prob: " + std::to_string(choices.size()) + " choices for matrix " +
                     shape_string(P.shape()));
  std::vector<std::size_t> flat;
  for (std::size_t r = 0; r < choices.size(); ++r) {
    if (choices[r] >= P.cols()) throw ArgumentError("log_prob: agent index out of range");
    if (!(P.at(r, choices[r]) > 0.0))
      throw NumericError("log_prob: zero-probability cell (" + std::to_string(r) + ", " +
                         std::to_string(choices[r]) + ")");
    flat.push_back(r * P.cols() + choices[r]);
  }
  return sum(log(gather(probs, std::move(flat))));
}

}  // namespace imtsp
