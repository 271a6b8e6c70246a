#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <numbers>
#include <vector>

#include "imtsp/problem.hpp"
#include "imtsp/rng.hpp"
#include "imtsp/tsp_solver.hpp"

namespace imtsp {

struct BaselineConfig {
  double time_budget_ms = 10000.0;
  std::size_t improvement_rounds = 1000;
  /// Extra sweeps started at random angles drawn from rng_seed; the best
  /// result over all sweeps is kept.
  std::size_t restarts = 0;
  std::uint64_t rng_seed = 0;
  SolverConfig solver;

  void validate() const {
    if (!(time_budget_ms > 0.0)) throw ArgumentError("BaselineConfig: time budget must be > 0");
  }
};

struct MtspSolution {
  Allocation allocation;
  std::vector<Tour> tours;
  std::vector<double> lengths;
  double L = 0.0;
};

namespace detail {

inline MtspSolution solve_groups(Allocation alloc, const Instance& inst, const SolverConfig& solver) {
  MtspSolution s;
  auto ev = evaluate_allocation(alloc, inst, solver);
  s.allocation = std::move(alloc);
  s.tours = std::move(ev.tours);
  s.lengths = std::move(ev.lengths);
  s.L = ev.objective.L;
  return s;
}

/// Angular sweep around the depot into M contiguous sectors of near-equal
/// city counts, starting just after `start_angle`.
inline Allocation sweep_partition(const Instance& inst, double start_angle) {
  const auto free = inst.free_cities();
  const Point d = inst.cities[inst.depot];
  std::vector<std::pair<double, std::size_t>> polar;
  for (std::size_t c : free) {
    double a = std::atan2(inst.cities[c].y - d.y, inst.cities[c].x - d.x) - start_angle;
    a = std::fmod(a, 2.0 * std::numbers::pi);
    if (a < 0.0) a += 2.0 * std::numbers::pi;
    polar.emplace_back(a, c);
  }
  std::sort(polar.begin(), polar.end());
  const std::size_t M = inst.num_agents, n = polar.size();
  Allocation alloc;
  alloc.groups.resize(M);
  for (std::size_t j = 0, k = 0; j < M; ++j) {
    const std::size_t take = n / M + (j < n % M ? 1 : 0);
    for (std::size_t t = 0; t < take; ++t) alloc.groups[j].push_back(polar[k++].second);
  }
  return alloc;
}

/// Start angle in the middle of the widest empty angular gap.
inline double widest_gap_angle(const Instance& inst) {
  const Point d = inst.cities[inst.depot];
  std::vector<double> angles;
  for (std::size_t c : inst.free_cities()) angles.push_back(std::atan2(inst.cities[c].y - d.y, inst.cities[c].x - d.x));
  std::sort(angles.begin(), angles.end());
  double best_gap = -1.0, best_angle = 0.0;
  for (std::size_t i = 0; i < angles.size(); ++i) {
    const double a = angles[i];
    const double b = i + 1 < angles.size() ? angles[i + 1] : angles[0] + 2.0 * std::numbers::pi;
    if (b - a > best_gap) {
      best_gap = b - a;
      best_angle = a + (b - a) / 2.0;
    }
  }
  return best_angle;
}

}  // namespace detail

/// Relocation local search: repeatedly move the single city out of the
/// longest tour that most reduces the maximum tour length. Only strictly
/// improving moves are accepted, so L never increases.
inline MtspSolution relocate_improve(MtspSolution s, const Instance& inst, const BaselineConfig& cfg) {
  using clock = std::chrono::steady_clock;
  const auto start = clock::now();
  const std::size_t M = inst.num_agents;
  for (std::size_t round = 0; round < cfg.improvement_rounds; ++round) {
    if (std::chrono::duration<double, std::milli>(clock::now() - start).count() >= cfg.time_budget_ms) break;
    const std::size_t worst = minmax_of_lengths(s.lengths).argmax_agent;
    const auto& donor = s.allocation.groups[worst];
    double best_L = s.L;
    std::size_t best_city = 0, best_target = 0;
    Tour best_donor, best_recv;
    double best_donor_len = 0.0, best_recv_len = 0.0;
    for (std::size_t ci = 0; ci < donor.size(); ++ci) {
      std::vector<std::size_t> reduced = donor;
      reduced.erase(reduced.begin() + static_cast<std::ptrdiff_t>(ci));
      const Tour donor_tour = solve_tsp(reduced, inst, cfg.solver);
      const double donor_len = tour_length(donor_tour, inst);
      for (std::size_t t = 0; t < M; ++t) {
        if (t == worst) continue;
        std::vector<std::size_t> grown = s.allocation.groups[t];
        grown.push_back(donor[ci]);
        const Tour recv_tour = solve_tsp(grown, inst, cfg.solver);
        const double recv_len = tour_length(recv_tour, inst);
        double L = std::max(donor_len, recv_len);
        for (std::size_t o = 0; o < M; ++o)
          if (o != worst && o != t) L = std::max(L, s.lengths[o]);
        if (L < best_L - 1e-12) {
          best_L = L;
          best_city = ci;
          best_target = t;
          best_donor = donor_tour;
          best_recv = recv_tour;
          best_donor_len = donor_len;
          best_recv_len = recv_len;
        }
      }
    }
    if (!(best_L < s.L - 1e-12)) break;
    const std::size_t city = donor[best_city];
    auto& from = s.allocation.groups[worst];
    from.erase(from.begin() + static_cast<std::ptrdiff_t>(best_city));
    s.allocation.groups[best_target].push_back(city);
    s.tours[worst] = best_donor;
    s.tours[best_target] = best_recv;
    s.lengths[worst] = best_donor_len;
    s.lengths[best_target] = best_recv_len;
    s.L = minmax_of_lengths(s.lengths).L;
  }
  return s;
}

/// Whole-problem min-max heuristic: sweep partition, per-group tours, then
/// relocation from the longest tour. Deterministic for a fixed config.
inline MtspSolution solve_mtsp_classic(const Instance& inst, const BaselineConfig& cfg = {}) {
  validate(inst);
  cfg.validate();
  auto run = [&](double angle) {
    return relocate_improve(detail::solve_groups(detail::sweep_partition(inst, angle), inst, cfg.solver), inst, cfg);
  };
  MtspSolution best = run(detail::widest_gap_angle(inst));
  Rng rng(cfg.rng_seed);
  for (std::size_t r = 0; r < cfg.restarts; ++r) {
    MtspSolution cand = run(rng.uniform(0.0, 2.0 * std::numbers::pi));
    if (cand.L < best.L - 1e-12) best = std::move(cand);
  }
  return best;
}

inline constexpr std::size_t kBruteForceMtspMaxFree = 8;
inline constexpr std::size_t kBruteForceMtspMaxAgents = 3;

/// Exact min-max optimum by enumerating every allocation and every visiting
/// order (each group's optimal order is memoised by subset).
inline MtspSolution brute_force_mtsp(const Instance& inst) {
  validate(inst);
  const auto free = inst.free_cities();
  const std::size_t n = free.size(), M = inst.num_agents;
  if (n > kBruteForceMtspMaxFree || M > kBruteForceMtspMaxAgents)
    throw ArgumentError("brute_force_mtsp: refusing " + std::to_string(n) + " free cities / " + std::to_string(M) +
                        " agents (limits 8 / 3)");
  std::map<std::uint32_t, std::pair<double, Tour>> memo;
  auto best_tour = [&](std::uint32_t mask) -> const std::pair<double, Tour>& {
    auto it = memo.find(mask);
    if (it != memo.end()) return it->second;
    std::vector<std::size_t> group;
    for (std::size_t r = 0; r < n; ++r)
      if (mask & (1u << r)) group.push_back(free[r]);
    Tour t = brute_force_tsp(group, inst);
    const double len = tour_length(t, inst);
    return memo.emplace(mask, std::pair{len, std::move(t)}).first->second;
  };

  std::vector<std::size_t> choices(n, 0), best_choices;
  double best_L = std::numeric_limits<double>::infinity();
  while (true) {
    std::vector<std::uint32_t> masks(M, 0);
    for (std::size_t r = 0; r < n; ++r) masks[choices[r]] |= 1u << r;
    double L = 0.0;
    for (std::uint32_t mask : masks) L = std::max(L, best_tour(mask).first);
    if (L < best_L - 1e-12) {
      best_L = L;
      best_choices = choices;
    }
    std::size_t r = n;
    while (r > 0 && ++choices[r - 1] == M) choices[--r] = 0;
    if (r == 0) break;
  }

  MtspSolution s;
  s.allocation.groups.resize(M);
  std::vector<std::uint32_t> masks(M, 0);
  for (std::size_t r = 0; r < n; ++r) {
    s.allocation.groups[best_choices[r]].push_back(free[r]);
    masks[best_choices[r]] |= 1u << r;
  }
  for (std::uint32_t mask : masks) {
    const auto& [len, tour] = best_tour(mask);
    s.tours.push_back(tour);
    s.lengths.push_back(len);
  }
  s.L = best_L;
  return s;
}

}  // namespace imtsp
