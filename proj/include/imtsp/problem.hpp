#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "imtsp/rng.hpp"
#include "imtsp/tensor.hpp"

namespace imtsp {

struct Point {
  double x = 0.0;
  double y = 0.0;
  friend bool operator==(const Point&, const Point&) = default;
};

inline double distance(const Point& a, const Point& b) { return std::hypot(a.x - b.x, a.y - b.y); }

/// A Min-Max MTSP instance: N cities (depot included), M agents.
struct Instance {
  std::vector<Point> cities;
  std::size_t depot = 0;
  std::size_t num_agents = 1;
  std::uint64_t seed = 0;

  std::size_t num_cities() const { return cities.size(); }
  std::size_t num_free() const { return cities.size() - 1; }

  /// Non-depot city indices in ascending order; row i of an allocation
  /// matrix refers to free_cities()[i].
  std::vector<std::size_t> free_cities() const {
    std::vector<std::size_t> out;
    out.reserve(num_free());
    for (std::size_t i = 0; i < cities.size(); ++i)
      if (i != depot) out.push_back(i);
    return out;
  }

  double dist(std::size_t i, std::size_t j) const { return distance(cities[i], cities[j]); }

  friend bool operator==(const Instance&, const Instance&) = default;
};

/// Visiting order starting and ending at the depot.
struct Tour {
  std::vector<std::size_t> order;
  friend bool operator==(const Tour&, const Tour&) = default;
};

/// Partition of the non-depot cities among agents; groups may be empty.
struct Allocation {
  std::vector<std::vector<std::size_t>> groups;
  friend bool operator==(const Allocation&, const Allocation&) = default;
};

struct MinMax {
  double L = 0.0;
  std::size_t argmax_agent = 0;
};

inline void validate(const Instance& inst) {
  if (inst.cities.size() < 2) throw ArgumentError("instance: need at least one non-depot city");
  if (inst.num_agents < 1) throw ArgumentError("instance: need at least one agent");
  if (inst.depot >= inst.cities.size()) throw ArgumentError("instance: depot index out of range");
  for (const Point& p : inst.cities)
    if (!(p.x >= 0.0 && p.x <= 1.0 && p.y >= 0.0 && p.y <= 1.0))
      throw ArgumentError("instance: coordinates must lie in the unit square");
}

/// n i.i.d. uniform points in [0,1]²; the depot is city 0.
inline Instance generate_instance(std::size_t n, std::size_t m, std::uint64_t seed) {
  if (n < 2) throw ArgumentError("generate_instance: n must be >= 2, got " + std::to_string(n));
  if (m < 1) throw ArgumentError("generate_instance: m must be >= 1, got " + std::to_string(m));
  Rng rng(seed);
  Instance inst;
  inst.num_agents = m;
  inst.seed = seed;
  inst.cities.resize(n);
  for (Point& p : inst.cities) {
    p.x = rng.uniform();
    p.y = rng.uniform();
  }
  return inst;
}

inline void validate(const Tour& tour, const Instance& inst) {
  const auto& o = tour.order;
  if (o.size() < 2 || o.front() != inst.depot || o.back() != inst.depot)
    throw ArgumentError("tour: must start and end at the depot");
  std::vector<char> seen(inst.num_cities(), 0);
  for (std::size_t k = 1; k + 1 < o.size(); ++k) {
    if (o[k] >= inst.num_cities()) throw ArgumentError("tour: city index out of range");
    if (o[k] == inst.depot) throw ArgumentError("tour: depot inside the tour");
    if (seen[o[k]]++) throw ArgumentError("tour: city " + std::to_string(o[k]) + " visited twice");
  }
}

/// Euclidean length including the return leg.
inline double tour_length(const Tour& tour, const Instance& inst) {
  validate(tour, inst);
  double len = 0.0;
  for (std::size_t k = 0; k + 1 < tour.order.size(); ++k) len += inst.dist(tour.order[k], tour.order[k + 1]);
  return len;
}

/// Longest tour, ties broken toward the lowest agent index.
inline MinMax minmax_of_lengths(const std::vector<double>& lengths) {
  if (lengths.empty()) throw ArgumentError("minmax: no tours");
  MinMax r{lengths[0], 0};
  for (std::size_t j = 1; j < lengths.size(); ++j)
    if (lengths[j] > r.L) r = {lengths[j], j};
  return r;
}

inline MinMax minmax_objective(const std::vector<Tour>& tours, const Instance& inst) {
  if (tours.size() != inst.num_agents)
    throw ArgumentError("minmax_objective: expected " + std::to_string(inst.num_agents) + " tours, got " +
                        std::to_string(tours.size()));
  std::vector<double> lengths;
  for (const Tour& t : tours) lengths.push_back(tour_length(t, inst));
  return minmax_of_lengths(lengths);
}

inline void validate(const Allocation& alloc, const Instance& inst) {
  if (alloc.groups.size() != inst.num_agents)
    throw ArgumentError("allocation: expected " + std::to_string(inst.num_agents) + " groups");
  std::vector<char> seen(inst.num_cities(), 0);
  std::size_t total = 0;
  for (const auto& g : alloc.groups)
    for (std::size_t c : g) {
      if (c >= inst.num_cities() || c == inst.depot) throw ArgumentError("allocation: invalid city index");
      if (seen[c]++) throw ArgumentError("allocation: city " + std::to_string(c) + " in two groups");
      ++total;
    }
  if (total != inst.num_free()) throw ArgumentError("allocation: not every city is allocated");
}

// =============================================================================
// Instance files
//
//   {"n": N, "m": M, "depot": 0, "cities": [[x, y], ...], "seed": S}
//
// Coordinates are written with 17 significant digits so a write/read round
// trip reproduces every double exactly.
// =============================================================================

inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string instance_to_json(const Instance& inst) {
  std::ostringstream os;
  os << "{\"n\": " << inst.num_cities() << ", \"m\": " << inst.num_agents << ", \"depot\": " << inst.depot
     << ", \"cities\": [";
  for (std::size_t i = 0; i < inst.cities.size(); ++i)
    os << (i ? ", " : "") << '[' << format_double(inst.cities[i].x) << ", " << format_double(inst.cities[i].y)
       << ']';
  os << "], \"seed\": " << inst.seed << "}\n";
  return os.str();
}

inline Instance instance_from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ArgumentError(std::string("instance file: ") + e.what());
  }
  Instance inst;
  try {
    inst.num_agents = j.at("m").get<std::size_t>();
    inst.depot = j.at("depot").get<std::size_t>();
    inst.seed = j.value("seed", std::uint64_t{0});
    for (const auto& c : j.at("cities")) inst.cities.push_back({c.at(0).get<double>(), c.at(1).get<double>()});
    if (j.at("n").get<std::size_t>() != inst.cities.size())
      throw ArgumentError("instance file: n does not match the number of cities");
  } catch (const nlohmann::json::exception& e) {
    throw ArgumentError(std::string("instance file: ") + e.what());
  }
  validate(inst);
  return inst;
}

inline Instance load_instance(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::ios_base::failure("cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return instance_from_json(ss.str());
}

inline void save_instance(const Instance& inst, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::ios_base::failure("cannot write " + path);
  out << instance_to_json(inst);
  if (!out) throw std::ios_base::failure("write failed for " + path);
}

}  // namespace imtsp
