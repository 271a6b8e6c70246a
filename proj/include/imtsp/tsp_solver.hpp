#pragma once

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <limits>
#include <optional>
#include <vector>

#include "imtsp/problem.hpp"

namespace imtsp {

/// Configuration of the lower-level single-agent solver: nearest-neighbour
/// construction followed by first-improvement 2-opt.
struct SolverConfig {
  std::size_t max_2opt_passes = 1000;
  std::optional<double> time_budget_ms;
  /// Carried for reproducibility bookkeeping; the heuristic itself is fully
  /// deterministic and consumes no randomness.
  std::uint64_t rng_seed = 0;
};

namespace detail {

inline void validate_group(const std::vector<std::size_t>& group, const Instance& inst) {
  std::vector<char> seen(inst.num_cities(), 0);
  for (std::size_t c : group) {
    if (c >= inst.num_cities()) throw ArgumentError("tsp: city index " + std::to_string(c) + " out of range");
    if (c == inst.depot) throw ArgumentError("tsp: group contains the depot");
    if (seen[c]++) throw ArgumentError("tsp: city " + std::to_string(c) + " repeated in group");
  }
}

/// Distance matrix over [depot, sorted group...].
struct LocalGraph {
  std::vector<std::size_t> nodes;
  std::vector<double> d;
  std::size_t n = 0;

  LocalGraph(std::vector<std::size_t> group, const Instance& inst) {
    std::sort(group.begin(), group.end());
    nodes.push_back(inst.depot);
    nodes.insert(nodes.end(), group.begin(), group.end());
    n = nodes.size();
    d.resize(n * n);
    for (std::size_t a = 0; a < n; ++a)
      for (std::size_t b = 0; b < n; ++b) d[a * n + b] = inst.dist(nodes[a], nodes[b]);
  }
  double operator()(std::size_t a, std::size_t b) const { return d[a * n + b]; }

  double length(const std::vector<std::size_t>& local_order) const {
    double len = 0.0;
    for (std::size_t k = 0; k + 1 < local_order.size(); ++k) len += (*this)(local_order[k], local_order[k + 1]);
    return len;
  }

  Tour to_tour(const std::vector<std::size_t>& local_order) const {
    Tour t;
    for (std::size_t v : local_order) t.order.push_back(nodes[v]);
    return t;
  }
};

}  // namespace detail

/// Heuristic tour over depot ∪ group. Deterministic for a fixed config; the
/// result does not depend on the order of `group`.
inline Tour solve_tsp(const std::vector<std::size_t>& group, const Instance& inst, const SolverConfig& cfg = {}) {
  detail::validate_group(group, inst);
  if (group.empty()) return Tour{{inst.depot, inst.depot}};
  const detail::LocalGraph g(group, inst);
  const std::size_t k = group.size();

  // Nearest neighbour from the depot; local indices follow global order, so
  // the first strict minimum is the lowest city index.
  std::vector<std::size_t> t{0};
  std::vector<char> used(g.n, 0);
  used[0] = 1;
  for (std::size_t step = 0; step < k; ++step) {
    const std::size_t cur = t.back();
    std::size_t best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t v = 1; v < g.n; ++v)
      if (!used[v] && g(cur, v) < best_d) {
        best_d = g(cur, v);
        best = v;
      }
    used[best] = 1;
    t.push_back(best);
  }
  t.push_back(0);

  using clock = std::chrono::steady_clock;
  const auto start = clock::now();
  auto expired = [&] {
    if (!cfg.time_budget_ms) return false;
    return std::chrono::duration<double, std::milli>(clock::now() - start).count() >= *cfg.time_budget_ms;
  };

  // First-improvement 2-opt: reverse t[i..j] when it shortens the tour.
  for (std::size_t pass = 0; pass < cfg.max_2opt_passes; ++pass) {
    bool improved = false;
    for (std::size_t i = 1; i < k; ++i)
      for (std::size_t j = i + 1; j <= k; ++j) {
        const double delta = g(t[i - 1], t[j]) + g(t[i], t[j + 1]) - g(t[i - 1], t[i]) - g(t[j], t[j + 1]);
        if (delta < -1e-12) {
          std::reverse(t.begin() + static_cast<std::ptrdiff_t>(i), t.begin() + static_cast<std::ptrdiff_t>(j + 1));
          improved = true;
        }
      }
    if (!improved || expired()) break;
  }
  return g.to_tour(t);
}

inline constexpr std::size_t kBruteForceTspLimit = 10;

/// Exact tour by enumerating every visiting order. Among optimal orders the
/// lexicographically smallest (by city index) is returned.
inline Tour brute_force_tsp(const std::vector<std::size_t>& group, const Instance& inst) {
  detail::validate_group(group, inst);
  if (group.size() > kBruteForceTspLimit)
    throw ArgumentError("brute_force_tsp: refusing " + std::to_string(group.size()) + " cities (limit " +
                        std::to_string(kBruteForceTspLimit) + ")");
  if (group.empty()) return Tour{{inst.depot, inst.depot}};
  const detail::LocalGraph g(group, inst);
  std::vector<std::size_t> perm(group.size());
  for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i + 1;
  std::vector<std::size_t> best;
  double best_len = std::numeric_limits<double>::infinity();
  do {
    double len = g(0, perm.front()) + g(perm.back(), 0);
    for (std::size_t i = 0; i + 1 < perm.size(); ++i) len += g(perm[i], perm[i + 1]);
    if (len < best_len - 1e-12) {
      best_len = len;
      best = perm;
    }
  } while (std::next_permutation(perm.begin(), perm.end()));
  std::vector<std::size_t> order{0};
  order.insert(order.end(), best.begin(), best.end());
  order.push_back(0);
  return g.to_tour(order);
}

/// Tours and their min-max length for an allocation, solved agent by agent.
struct MtspEvaluation {
  std::vector<Tour> tours;
  std::vector<double> lengths;
  MinMax objective;
};

inline MtspEvaluation evaluate_allocation(const Allocation& alloc, const Instance& inst,
                                          const SolverConfig& cfg = {}) {
  validate(alloc, inst);
  MtspEvaluation ev;
  for (const auto& group : alloc.groups) {
    ev.tours.push_back(solve_tsp(group, inst, cfg));
    ev.lengths.push_back(tour_length(ev.tours.back(), inst));
  }
  ev.objective = minmax_of_lengths(ev.lengths);
  return ev;
}

}  // namespace imtsp
