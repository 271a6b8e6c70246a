#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "imtsp/estimators.hpp"
#include "imtsp/parallel.hpp"
#include "imtsp/policy.hpp"
#include "imtsp/problem.hpp"
#include "imtsp/surrogate.hpp"
#include "imtsp/tsp_solver.hpp"

namespace imtsp {

enum class Optimizer { sgd, adam };
enum class Decode { greedy, sample };

inline const char* to_string(Optimizer o) { return o == Optimizer::sgd ? "sgd" : "adam"; }
inline const char* to_string(Decode d) { return d == Decode::greedy ? "greedy" : "sample"; }

struct TrainConfig {
  std::size_t n_cities = 20;
  std::size_t m_agents = 3;
  std::size_t batch_size = 32;
  /// Gradient variance is measured across the means of consecutive
  /// minibatches of this many samples within one batch.
  std::size_t minibatch_size = 4;
  std::size_t iterations = 200;
  double lr_theta = 1e-3;
  double lr_gamma = 1e-3;
  std::uint64_t seed = 1;
  ModelConfig model;
  Optimizer optimizer = Optimizer::sgd;
  /// Validation every this many iterations (0 disables).
  std::size_t eval_every = 0;
  /// Early stop after this many validations without improvement (0 disables).
  std::size_t patience = 0;
  /// Size of the training pool; validation uses a disjoint pool a tenth as
  /// large.
  std::size_t train_instances = 3200;
  std::size_t threads = 1;
  double variance_eps = 1e-12;
  /// Replace sampling by the exhaustive expectation over allocations
  /// (zero-variance gradients; tiny instances only).
  bool exact_expectation = false;

  std::size_t validation_instances() const { return std::max<std::size_t>(1, train_instances / 10); }

  void validate() const {
    if (n_cities < 2) throw ArgumentError("TrainConfig: n_cities must be >= 2");
    if (m_agents < 1 || batch_size < 1 || minibatch_size < 1 || train_instances < 1 || threads < 1)
      throw ArgumentError("TrainConfig: counts must be positive");
    if (lr_theta < 0.0 || lr_gamma < 0.0 || !std::isfinite(lr_theta) || !std::isfinite(lr_gamma))
      throw ArgumentError("TrainConfig: learning rates must be finite and non-negative");
    if (!(variance_eps > 0.0)) throw ArgumentError("TrainConfig: variance_eps must be > 0");
    model.policy.validate();
    model.surrogate.validate();
  }
};

/// Adam moments for one parameter store.
struct AdamState {
  std::vector<double> m, v;
  std::uint64_t steps = 0;
  friend bool operator==(const AdamState&, const AdamState&) = default;
};

struct TrainState {
  ParamStore theta{ParamRole::policy};
  ParamStore gamma{ParamRole::surrogate};
  std::size_t iteration = 0;
  Rng rng{0};
  AdamState adam_theta, adam_gamma;
  double best_validation = std::numeric_limits<double>::infinity();
  std::size_t validations_since_best = 0;
};

struct StepMetrics {
  std::size_t iteration = 0;
  double mean_L = 0.0;
  double mean_L_prime = std::numeric_limits<double>::quiet_NaN();
  double var_metric_cv = std::numeric_limits<double>::quiet_NaN();
  double var_metric_reinforce = std::numeric_limits<double>::quiet_NaN();
  double wall_ms = 0.0;
  double val_L = std::numeric_limits<double>::quiet_NaN();
};

inline TrainState init_train_state(const TrainConfig& cfg) {
  cfg.validate();
  TrainState s;
  Rng init(derive_seed(cfg.seed, 0x1417));
  s.theta = init_policy(cfg.model.policy, cfg.m_agents, init);
  s.gamma = init_surrogate(cfg.model.surrogate, cfg.n_cities - 1, cfg.m_agents, init);
  s.rng = Rng(derive_seed(cfg.seed, 0x57E9));
  return s;
}

// =============================================================================
// Data pools: training and validation seeds occupy disjoint ranges
// =============================================================================

inline std::uint64_t data_seed_base(const TrainConfig& cfg) { return derive_seed(cfg.seed, 0xDA7A); }

inline std::uint64_t training_seed(const TrainConfig& cfg, std::size_t i) {
  return data_seed_base(cfg) + (i % cfg.train_instances);
}

inline std::uint64_t validation_seed(const TrainConfig& cfg, std::size_t j) {
  return data_seed_base(cfg) + cfg.train_instances + (j % cfg.validation_instances());
}

inline std::vector<Instance> training_batch(const TrainConfig& cfg, std::size_t iteration) {
  std::vector<Instance> batch;
  for (std::size_t b = 0; b < cfg.batch_size; ++b)
    batch.push_back(generate_instance(cfg.n_cities, cfg.m_agents, training_seed(cfg, iteration * cfg.batch_size + b)));
  return batch;
}

inline std::vector<Instance> validation_set(const TrainConfig& cfg) {
  std::vector<Instance> out;
  for (std::size_t j = 0; j < cfg.validation_instances(); ++j)
    out.push_back(generate_instance(cfg.n_cities, cfg.m_agents, validation_seed(cfg, j)));
  return out;
}

// =============================================================================
// Optimiser
// =============================================================================

inline void apply_update(ParamStore& params, const GradientSample& grad, double lr, Optimizer opt, AdamState& adam) {
  if (opt == Optimizer::sgd) {
    params.axpy(-lr, grad);
    return;
  }
  constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  if (adam.m.empty()) {
    adam.m.assign(params.size(), 0.0);
    adam.v.assign(params.size(), 0.0);
  }
  ++adam.steps;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(adam.steps));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(adam.steps));
  GradientSample step(params.layout());
  for (std::size_t k = 0; k < params.size(); ++k) {
    const double g = grad.values[k];
    adam.m[k] = b1 * adam.m[k] + (1.0 - b1) * g;
    adam.v[k] = b2 * adam.v[k] + (1.0 - b2) * g * g;
    step.values[k] = (adam.m[k] / c1) / (std::sqrt(adam.v[k] / c2) + eps);
  }
  params.axpy(-lr, step);
}

// =============================================================================
// One iteration of the bilevel update
// =============================================================================

namespace detail {

inline GradientSample mean_of(const std::vector<GradientSample>& v) {
  GradientSample m = v.front();
  for (std::size_t i = 1; i < v.size(); ++i) m += v[i];
  m *= 1.0 / static_cast<double>(v.size());
  return m;
}

inline double variance_metric_or_nan(const std::vector<GradientSample>& samples, std::size_t minibatch, double eps) {
  const auto groups = minibatch_means(samples, minibatch);
  if (groups.size() < 2) return std::numeric_limits<double>::quiet_NaN();
  return batch_variance_metric(groups, eps);
}

}  // namespace detail

/// θ ← θ − α₁·mean ∂U_θ/∂θ and (control variate only) γ ← γ − α₂·mean ∂U_γ/∂γ
/// over the batch. Per-sample randomness comes from the state's generator,
/// one draw per step, so the update is independent of the thread count.
inline StepMetrics train_step(const std::vector<Instance>& batch, TrainState& state, const TrainConfig& cfg) {
  const auto start = std::chrono::steady_clock::now();
  if (batch.empty()) throw ArgumentError("train_step: empty batch");
  const std::size_t num_free = state.gamma.count() ? state.gamma.at(layer_name(0, "weight")).cols() : 0;
  for (const Instance& inst : batch) {
    if (inst.num_agents != policy_num_agents(state.theta, cfg.model.policy))
      throw ArgumentError("train_step: instance agent count does not match the policy");
    if (cfg.model.estimator.kind == EstimatorKind::control_variate &&
        cfg.model.surrogate.input_dim(inst.num_free(), inst.num_agents) != num_free)
      throw ArgumentError("train_step: instance size does not match the surrogate");
  }
  const bool cv = cfg.model.estimator.kind == EstimatorKind::control_variate;
  const std::uint64_t step_seed = state.rng.next_u64();
  const std::size_t B = batch.size();
  std::vector<GradientSample> g_theta(B), g_reinforce(B), g_gamma(B);
  std::vector<double> Ls(B), Lps(B);

  parallel_for(B, cfg.threads, [&](std::size_t b) {
    if (cfg.exact_expectation) {
      auto e = enumerate_expectation(batch[b], state.theta, cv ? &state.gamma : nullptr, cfg.model);
      g_reinforce[b] = e.reinforce;
      Ls[b] = e.expected_L;
      if (cv) {
        g_theta[b] = cfg.model.estimator.pathwise_term ? e.full : e.baseline_only;
        g_gamma[b] = *e.gamma;
      } else {
        g_theta[b] = e.reinforce;
      }
      return;
    }
    Rng rng(derive_seed(step_seed, b));
    EstimatorOutput o = estimate(batch[b], state.theta, cv ? &state.gamma : nullptr, rng, cfg.model);
    Ls[b] = o.L;
    Lps[b] = o.L_prime;
    g_reinforce[b] = o.reinforce_grad();
    g_theta[b] = std::move(o.grad_theta);
    if (o.grad_gamma) g_gamma[b] = std::move(*o.grad_gamma);
  });

  StepMetrics m;
  for (std::size_t b = 0; b < B; ++b) m.mean_L += Ls[b] / static_cast<double>(B);
  if (cv && !cfg.exact_expectation) {
    m.mean_L_prime = 0.0;
    for (std::size_t b = 0; b < B; ++b) m.mean_L_prime += Lps[b] / static_cast<double>(B);
  }
  if (!cfg.exact_expectation) {
    if (cv) m.var_metric_cv = detail::variance_metric_or_nan(g_theta, cfg.minibatch_size, cfg.variance_eps);
    m.var_metric_reinforce = detail::variance_metric_or_nan(g_reinforce, cfg.minibatch_size, cfg.variance_eps);
  }

  const GradientSample mean_theta = detail::mean_of(g_theta);
  if (!mean_theta.all_finite()) throw NumericError("train_step: non-finite θ-gradient");
  apply_update(state.theta, mean_theta, cfg.lr_theta, cfg.optimizer, state.adam_theta);
  if (cv) {
    const GradientSample mean_gamma = detail::mean_of(g_gamma);
    if (!mean_gamma.all_finite()) throw NumericError("train_step: non-finite γ-gradient");
    apply_update(state.gamma, mean_gamma, cfg.lr_gamma, cfg.optimizer, state.adam_gamma);
  }
  m.iteration = ++state.iteration;
  m.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
  return m;
}

// =============================================================================
// Evaluation
// =============================================================================

struct EvalReport {
  std::vector<double> L;
  std::vector<double> runtime_ms;
  double mean = 0.0;
  double max = 0.0;
  double min = 0.0;
  double wall_ms = 0.0;
};

namespace detail {

inline void summarize(EvalReport& r) {
  if (r.L.empty()) return;
  r.mean = 0.0;
  r.max = -std::numeric_limits<double>::infinity();
  r.min = std::numeric_limits<double>::infinity();
  for (double v : r.L) {
    r.mean += v / static_cast<double>(r.L.size());
    r.max = std::max(r.max, v);
    r.min = std::min(r.min, v);
  }
}

template <class Fn>
EvalReport evaluate_each(const std::vector<Instance>& instances, std::size_t threads, Fn&& solve_one) {
  if (instances.empty()) throw ArgumentError("evaluate: no instances");
  const auto start = std::chrono::steady_clock::now();
  EvalReport r;
  r.L.resize(instances.size());
  r.runtime_ms.resize(instances.size());
  parallel_for(instances.size(), threads, [&](std::size_t i) {
    const auto t0 = std::chrono::steady_clock::now();
    r.L[i] = solve_one(i);
    r.runtime_ms[i] = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  });
  summarize(r);
  r.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
  return r;
}

}  // namespace detail

/// Allocation chosen by the policy for one instance.
inline std::vector<std::size_t> policy_choices(const Instance& inst, const ParamStore& theta, const PolicyConfig& cfg,
                                               Decode decode, Rng& rng) {
  Tape tape;
  const Tensor P = run_policy(tape, inst, theta, cfg).scores.probs.value();
  return decode == Decode::greedy ? greedy_choices(P) : sample_allocation(P, inst, rng).choices;
}

/// Policy allocation + per-agent tours. Needs θ only, never γ.
inline EvalReport evaluate_policy(const ParamStore& theta, const PolicyConfig& cfg,
                                  const std::vector<Instance>& instances, const SolverConfig& solver,
                                  Decode decode = Decode::sample, std::uint64_t seed = 0, std::size_t threads = 1) {
  const std::size_t M = policy_num_agents(theta, cfg);
  for (const Instance& inst : instances)
    if (inst.num_agents != M)
      throw ArgumentError("evaluate: checkpoint is for " + std::to_string(M) + " agents, instance has " +
                          std::to_string(inst.num_agents));
  return detail::evaluate_each(instances, threads, [&](std::size_t i) {
    Rng rng(derive_seed(seed, i));
    const auto choices = policy_choices(instances[i], theta, cfg, decode, rng);
    return detail::solve_L(choices, instances[i], solver);
  });
}

/// Uniform random allocation + per-agent tours.
inline EvalReport evaluate_random(const std::vector<Instance>& instances, const SolverConfig& solver,
                                  std::uint64_t seed = 0, std::size_t threads = 1) {
  return detail::evaluate_each(instances, threads, [&](std::size_t i) {
    Rng rng(derive_seed(seed, i, 0xAA));
    std::vector<std::size_t> choices;
    for (std::size_t r = 0; r < instances[i].num_free(); ++r) choices.push_back(rng.below(instances[i].num_agents));
    return detail::solve_L(choices, instances[i], solver);
  });
}

// =============================================================================
// Checkpoints (canonical JSON; doubles round-trip exactly)
// =============================================================================

inline constexpr int kCheckpointVersion = 1;

struct Checkpoint {
  int version = kCheckpointVersion;
  TrainConfig config;
  TrainState state;
};

inline nlohmann::json params_to_json(const ParamStore& p) {
  nlohmann::json entries = nlohmann::json::array();
  for (std::size_t i = 0; i < p.count(); ++i)
    entries.push_back({{"name", p.name(i)}, {"shape", p.tensor(i).shape()}, {"data", p.tensor(i).vec()}});
  return {{"role", to_string(p.role())}, {"entries", entries}};
}

inline ParamStore params_from_json(const nlohmann::json& j) {
  ParamStore p(j.at("role").get<std::string>() == "policy" ? ParamRole::policy : ParamRole::surrogate);
  for (const auto& e : j.at("entries"))
    p.add(e.at("name").get<std::string>(), Tensor(e.at("shape").get<Shape>(), e.at("data").get<std::vector<double>>()));
  return p;
}

inline nlohmann::json config_to_json(const TrainConfig& c) {
  const auto& m = c.model;
  nlohmann::json solver = {{"max_2opt_passes", m.solver.max_2opt_passes}, {"rng_seed", m.solver.rng_seed}};
  solver["time_budget_ms"] = m.solver.time_budget_ms ? nlohmann::json(*m.solver.time_budget_ms) : nlohmann::json();
  return {
      {"n_cities", c.n_cities},
      {"m_agents", c.m_agents},
      {"batch_size", c.batch_size},
      {"minibatch_size", c.minibatch_size},
      {"iterations", c.iterations},
      {"lr_theta", c.lr_theta},
      {"lr_gamma", c.lr_gamma},
      {"seed", c.seed},
      {"optimizer", to_string(c.optimizer)},
      {"eval_every", c.eval_every},
      {"patience", c.patience},
      {"train_instances", c.train_instances},
      {"threads", c.threads},
      {"variance_eps", c.variance_eps},
      {"exact_expectation", c.exact_expectation},
      {"policy",
       {{"embed_dim", m.policy.embed_dim},
        {"key_dim", m.policy.key_dim},
        {"value_dim", m.policy.value_dim},
        {"alloc_key_dim", m.policy.alloc_key_dim},
        {"clip_alpha", m.policy.clip_alpha},
        {"message_iterations", m.policy.message_iterations}}},
      {"surrogate",
       {{"hidden_dim", m.surrogate.hidden_dim},
        {"layers", m.surrogate.layers},
        {"input_reduction", to_string(m.surrogate.input_reduction)}}},
      {"estimator",
       {{"kind", to_string(m.estimator.kind)},
        {"pathwise_term", m.estimator.pathwise_term},
        {"zeta", m.estimator.zeta}}},
      {"solver", solver},
  };
}

inline TrainConfig config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.n_cities = j.at("n_cities");
  c.m_agents = j.at("m_agents");
  c.batch_size = j.at("batch_size");
  c.minibatch_size = j.at("minibatch_size");
  c.iterations = j.at("iterations");
  c.lr_theta = j.at("lr_theta");
  c.lr_gamma = j.at("lr_gamma");
  c.seed = j.at("seed");
  c.optimizer = j.at("optimizer").get<std::string>() == "adam" ? Optimizer::adam : Optimizer::sgd;
  c.eval_every = j.at("eval_every");
  c.patience = j.at("patience");
  c.train_instances = j.at("train_instances");
  c.threads = j.at("threads");
  c.variance_eps = j.at("variance_eps");
  c.exact_expectation = j.at("exact_expectation");
  const auto& p = j.at("policy");
  c.model.policy.embed_dim = p.at("embed_dim");
  c.model.policy.key_dim = p.at("key_dim");
  c.model.policy.value_dim = p.at("value_dim");
  c.model.policy.alloc_key_dim = p.at("alloc_key_dim");
  c.model.policy.clip_alpha = p.at("clip_alpha");
  c.model.policy.message_iterations = p.at("message_iterations");
  const auto& s = j.at("surrogate");
  c.model.surrogate.hidden_dim = s.at("hidden_dim");
  c.model.surrogate.layers = s.at("layers");
  c.model.surrogate.input_reduction =
      s.at("input_reduction").get<std::string>() == "flatten" ? InputReduction::flatten : InputReduction::column_mean;
  const auto& e = j.at("estimator");
  c.model.estimator.kind = e.at("kind").get<std::string>() == "reinforce" ? EstimatorKind::reinforce
                                                                           : EstimatorKind::control_variate;
  c.model.estimator.pathwise_term = e.at("pathwise_term");
  c.model.estimator.zeta = e.at("zeta");
  const auto& sv = j.at("solver");
  c.model.solver.max_2opt_passes = sv.at("max_2opt_passes");
  c.model.solver.rng_seed = sv.at("rng_seed");
  if (!sv.at("time_budget_ms").is_null()) c.model.solver.time_budget_ms = sv.at("time_budget_ms").get<double>();
  return c;
}

inline nlohmann::json checkpoint_to_json(const Checkpoint& ck) {
  const auto& s = ck.state;
  auto adam = [](const AdamState& a) { return nlohmann::json{{"m", a.m}, {"v", a.v}, {"steps", a.steps}}; };
  nlohmann::json best = std::isfinite(s.best_validation) ? nlohmann::json(s.best_validation) : nlohmann::json();
  return {
      {"format", "imtsp-checkpoint"},
      {"version", ck.version},
      {"n", ck.config.n_cities},
      {"m", ck.config.m_agents},
      {"iteration", s.iteration},
      {"config", config_to_json(ck.config)},
      {"rng", {{"seed", s.rng.seed()}, {"state", s.rng.state()}}},
      {"theta", params_to_json(s.theta)},
      {"gamma", params_to_json(s.gamma)},
      {"optimizer", {{"theta", adam(s.adam_theta)}, {"gamma", adam(s.adam_gamma)}}},
      {"early_stop", {{"best_validation", best}, {"validations_since_best", s.validations_since_best}}},
  };
}

inline Checkpoint checkpoint_from_json(const nlohmann::json& j) {
  try {
    if (j.at("format").get<std::string>() != "imtsp-checkpoint") throw ArgumentError("checkpoint: unknown format");
    Checkpoint ck;
    ck.version = j.at("version");
    if (ck.version != kCheckpointVersion)
      throw ArgumentError("checkpoint: unsupported version " + std::to_string(ck.version));
    ck.config = config_from_json(j.at("config"));
    auto& s = ck.state;
    s.iteration = j.at("iteration");
    s.rng = Rng::from_state(j.at("rng").at("seed"), j.at("rng").at("state").get<Rng::State>());
    s.theta = params_from_json(j.at("theta"));
    s.gamma = params_from_json(j.at("gamma"));
    auto adam = [](const nlohmann::json& a) {
      AdamState st;
      st.m = a.at("m").get<std::vector<double>>();
      st.v = a.at("v").get<std::vector<double>>();
      st.steps = a.at("steps");
      return st;
    };
    s.adam_theta = adam(j.at("optimizer").at("theta"));
    s.adam_gamma = adam(j.at("optimizer").at("gamma"));
    const auto& es = j.at("early_stop");
    s.best_validation = es.at("best_validation").is_null() ? std::numeric_limits<double>::infinity()
                                                            : es.at("best_validation").get<double>();
    s.validations_since_best = es.at("validations_since_best");
    return ck;
  } catch (const nlohmann::json::exception& e) {
    throw ArgumentError(std::string("checkpoint: ") + e.what());
  }
}

inline void save_checkpoint(const Checkpoint& ck, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::ios_base::failure("cannot write " + path);
  out << checkpoint_to_json(ck).dump(1) << '\n';
  if (!out) throw std::ios_base::failure("write failed for " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::ios_base::failure("cannot open " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::parse_error& e) {
    throw ArgumentError(std::string("checkpoint: ") + e.what());
  }
  return checkpoint_from_json(j);
}

// =============================================================================
// Metrics CSV
//
//   iteration,mean_L,mean_L_prime,var_metric_cv,var_metric_reinforce,wall_ms,val_L
//
// Values that do not apply to a run (e.g. mean_L_prime for REINFORCE, val_L
// between validations) are left empty.
// =============================================================================

inline constexpr const char* kMetricsHeader =
    "iteration,mean_L,mean_L_prime,var_metric_cv,var_metric_reinforce,wall_ms,val_L";

inline std::string csv_number(double v) { return std::isfinite(v) ? format_double(v) : std::string(); }

inline std::string metrics_row(const StepMetrics& m) {
  std::ostringstream os;
  os << m.iteration << ',' << csv_number(m.mean_L) << ',' << csv_number(m.mean_L_prime) << ','
     << csv_number(m.var_metric_cv) << ',' << csv_number(m.var_metric_reinforce) << ',' << csv_number(m.wall_ms)
     << ',' << csv_number(m.val_L);
  return os.str();
}

// =============================================================================
// Training loop
// =============================================================================

struct TrainOutputs {
  std::optional<std::string> checkpoint_path;
  std::optional<std::string> metrics_path;
};

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<StepMetrics> metrics;
  bool stopped_early = false;
};

/// Runs train_step until `config.iterations` steps have been taken in total
/// (counting any iterations already in `resume_from`), with periodic sampled
/// validation and optional early stopping.
inline TrainResult train(const TrainConfig& config, const TrainOutputs& outputs = {},
                         std::optional<Checkpoint> resume_from = std::nullopt) {
  config.validate();
  TrainResult result;
  Checkpoint& ck = result.checkpoint;
  ck.config = config;
  if (resume_from) {
    const TrainConfig& prev = resume_from->config;
    if (prev.n_cities != config.n_cities || prev.m_agents != config.m_agents ||
        !(prev.model.policy == config.model.policy) || !(prev.model.surrogate == config.model.surrogate))
      throw ArgumentError("train: checkpoint architecture or problem size differs from the config");
    ck.state = std::move(resume_from->state);
  } else {
    ck.state = init_train_state(config);
  }
  TrainState& state = ck.state;

  std::ofstream csv;
  if (outputs.metrics_path) {
    const bool append = resume_from && std::filesystem::exists(*outputs.metrics_path);
    csv.open(*outputs.metrics_path, append ? std::ios::app : std::ios::trunc);
    if (!csv) throw std::ios_base::failure("cannot write " + *outputs.metrics_path);
    if (!append) csv << kMetricsHeader << '\n';
  }

  const std::vector<Instance> validation = config.eval_every ? validation_set(config) : std::vector<Instance>{};
  while (state.iteration < config.iterations) {
    StepMetrics m = train_step(training_batch(config, state.iteration), state, config);
    bool stop = false;
    if (config.eval_every && state.iteration % config.eval_every == 0) {
      m.val_L = evaluate_policy(state.theta, config.model.policy, validation, config.model.solver, Decode::sample, 0,
                                config.threads)
                    .mean;
      if (m.val_L < state.best_validation - 1e-12) {
        state.best_validation = m.val_L;
        state.validations_since_best = 0;
      } else if (config.patience && ++state.validations_since_best >= config.patience) {
        stop = true;
      }
    }
    if (csv.is_open()) {
      csv << metrics_row(m) << '\n';
      csv.flush();
    }
    result.metrics.push_back(m);
    if (stop) {
      result.stopped_early = true;
      break;
    }
  }
  if (outputs.checkpoint_path) save_checkpoint(ck, *outputs.checkpoint_path);
  return result;
}

/// Trailing moving average; window 1 is the identity.
inline std::vector<double> moving_average(const std::vector<double>& v, std::size_t window) {
  if (window < 1) throw ArgumentError("moving_average: window must be >= 1");
  std::vector<double> out;
  double acc = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    acc += v[i];
    if (i >= window) acc -= v[i - window];
    out.push_back(acc / static_cast<double>(std::min(i + 1, window)));
  }
  return out;
}

}  // namespace imtsp
