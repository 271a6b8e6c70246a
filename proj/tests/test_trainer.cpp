#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>

#include <gtest/gtest.h>

#include "imtsp/trainer.hpp"
#include "support.hpp"

using namespace imtsp;
using namespace imtsp::testing;

namespace {

TrainConfig small_config() {
  TrainConfig c;
  c.model = tiny_model();
  c.n_cities = 7;
  c.m_agents = 2;
  c.batch_size = 4;
  c.minibatch_size = 2;
  c.iterations = 3;
  c.train_instances = 40;
  c.seed = 11;
  return c;
}

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("imtsp_trainer_" + name)).string();
}

std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream in(path);
  std::vector<std::string> out;
  for (std::string line; std::getline(in, line);) out.push_back(line);
  return out;
}

}  // namespace

TEST(TrainConfig, Validation) {
  TrainConfig c = small_config();
  EXPECT_NO_THROW(c.validate());
  c.batch_size = 0;
  EXPECT_THROW(c.validate(), ArgumentError);
  c = small_config();
  c.lr_theta = -1.0;
  EXPECT_THROW(c.validate(), ArgumentError);
}

TEST(TrainStep, ZeroLearningRatesLeaveParametersUnchanged) {
  TrainConfig c = small_config();
  c.lr_theta = 0.0;
  c.lr_gamma = 0.0;
  TrainState s = init_train_state(c);
  const ParamStore theta = s.theta, gamma = s.gamma;
  train_step(training_batch(c, 0), s, c);
  EXPECT_EQ(s.theta, theta);
  EXPECT_EQ(s.gamma, gamma);
  EXPECT_EQ(s.iteration, 1u);
}

TEST(TrainStep, MetricsShape) {
  TrainConfig c = small_config();
  TrainState s = init_train_state(c);
  const StepMetrics m = train_step(training_batch(c, 0), s, c);
  EXPECT_EQ(m.iteration, 1u);
  EXPECT_GT(m.mean_L, 0.0);
  EXPECT_TRUE(std::isfinite(m.mean_L_prime));
  EXPECT_TRUE(std::isfinite(m.var_metric_cv));
  EXPECT_TRUE(std::isfinite(m.var_metric_reinforce));
  EXPECT_TRUE(std::isnan(m.val_L));

  c.model.estimator.kind = EstimatorKind::reinforce;
  TrainState r = init_train_state(c);
  const ParamStore gamma = r.gamma;
  const StepMetrics mr = train_step(training_batch(c, 0), r, c);
  EXPECT_TRUE(std::isnan(mr.mean_L_prime));
  EXPECT_TRUE(std::isnan(mr.var_metric_cv));
  EXPECT_TRUE(std::isfinite(mr.var_metric_reinforce));
  EXPECT_EQ(r.gamma, gamma);
}

TEST(TrainStep, RejectsMismatchedBatch) {
  TrainConfig c = small_config();
  TrainState s = init_train_state(c);
  EXPECT_THROW(train_step({generate_instance(7, 3, 1)}, s, c), ArgumentError);
  EXPECT_THROW(train_step({generate_instance(9, 2, 1)}, s, c), ArgumentError);
}

TEST(TrainStep, ThreadCountDoesNotChangeResult) {
  TrainConfig c = small_config();
  TrainState a = init_train_state(c), b = init_train_state(c);
  train_step(training_batch(c, 0), a, c);
  c.threads = 3;
  train_step(training_batch(c, 0), b, c);
  EXPECT_EQ(a.theta, b.theta);
  EXPECT_EQ(a.gamma, b.gamma);
}

TEST(TrainStep, ExactExpectationStepDescends) {
  // With the exact gradient and a small step, E[L] must go down.
  TrainConfig c = small_config();
  c.n_cities = 5;
  c.batch_size = 1;
  c.lr_theta = 1e-3;
  c.exact_expectation = true;
  c.model.estimator.kind = EstimatorKind::reinforce;
  TrainState s = init_train_state(c);
  const Instance inst = generate_instance(5, 2, 3);
  auto expected_L = [&](const ParamStore& theta) {
    Tape t;
    const Tensor P = run_policy(t, inst, theta, c.model.policy).scores.probs.value();
    double e = 0;
    for_each_allocation(P, [&](const std::vector<std::size_t>& ch, double p) {
      e += p * detail::solve_L(ch, inst, c.model.solver);
    });
    return e;
  };
  const double before = expected_L(s.theta);
  train_step({inst}, s, c);
  EXPECT_LT(expected_L(s.theta), before);
}

TEST(Seeds, TrainingAndValidationDisjoint) {
  const TrainConfig c = small_config();
  std::set<std::uint64_t> train, val;
  for (std::size_t i = 0; i < c.train_instances; ++i) train.insert(training_seed(c, i));
  for (std::size_t j = 0; j < c.validation_instances(); ++j) val.insert(validation_seed(c, j));
  for (std::uint64_t v : val) EXPECT_FALSE(train.count(v));
  EXPECT_EQ(training_seed(c, 0), training_seed(c, c.train_instances));
  EXPECT_EQ(training_batch(c, 1).front(), generate_instance(c.n_cities, c.m_agents, training_seed(c, c.batch_size)));
}

TEST(Train, ZeroIterationsReturnsInitialisation) {
  TrainConfig c = small_config();
  c.iterations = 0;
  const TrainResult r = train(c);
  const TrainState init = init_train_state(c);
  EXPECT_TRUE(r.metrics.empty());
  EXPECT_EQ(r.checkpoint.state.theta, init.theta);
  EXPECT_EQ(r.checkpoint.state.gamma, init.gamma);
  EXPECT_EQ(r.checkpoint.state.iteration, 0u);
}

TEST(Train, DeterministicForFixedSeed) {
  const TrainConfig c = small_config();
  const TrainResult a = train(c), b = train(c);
  EXPECT_EQ(a.checkpoint.state.theta, b.checkpoint.state.theta);
  EXPECT_EQ(a.checkpoint.state.gamma, b.checkpoint.state.gamma);
  ASSERT_EQ(a.metrics.size(), b.metrics.size());
  for (std::size_t i = 0; i < a.metrics.size(); ++i) EXPECT_EQ(a.metrics[i].mean_L, b.metrics[i].mean_L);
}

TEST(Train, DifferentSeedsDiffer) {
  TrainConfig c = small_config();
  const TrainResult a = train(c);
  c.seed = 12;
  EXPECT_NE(a.checkpoint.state.theta, train(c).checkpoint.state.theta);
}

TEST(Train, ResumeMatchesUninterruptedRunBitwise) {
  for (Optimizer opt : {Optimizer::sgd, Optimizer::adam}) {
    TrainConfig c = small_config();
    c.optimizer = opt;
    c.iterations = 4;
    const TrainResult full = train(c);

    TrainConfig half = c;
    half.iterations = 2;
    const std::string path = temp_path("resume.json");
    train(half, {path, std::nullopt});
    const TrainResult resumed = train(c, {}, load_checkpoint(path));
    std::filesystem::remove(path);

    EXPECT_EQ(resumed.checkpoint.state.theta, full.checkpoint.state.theta) << to_string(opt);
    EXPECT_EQ(resumed.checkpoint.state.gamma, full.checkpoint.state.gamma);
    EXPECT_EQ(resumed.checkpoint.state.adam_theta, full.checkpoint.state.adam_theta);
    EXPECT_EQ(resumed.checkpoint.state.rng.state(), full.checkpoint.state.rng.state());
    ASSERT_EQ(resumed.metrics.size(), 2u);
    EXPECT_EQ(resumed.metrics.back().mean_L, full.metrics.back().mean_L);
  }
}

TEST(Train, ResumeRejectsDifferentArchitecture) {
  TrainConfig c = small_config();
  c.iterations = 1;
  const TrainResult r = train(c);
  TrainConfig other = c;
  other.iterations = 2;
  other.model.policy.embed_dim = 6;
  EXPECT_THROW(train(other, {}, r.checkpoint), ArgumentError);
}

TEST(Train, MetricsCsvOneRowPerIteration) {
  TrainConfig c = small_config();
  c.eval_every = 2;
  c.iterations = 4;
  const std::string path = temp_path("metrics.csv");
  train(c, {std::nullopt, path});
  const auto lines = read_lines(path);
  ASSERT_EQ(lines.size(), 5u);
  EXPECT_EQ(lines[0], kMetricsHeader);
  EXPECT_EQ(lines[1].substr(0, 2), "1,");
  // val_L only on validation iterations.
  EXPECT_EQ(lines[1].back(), ',');
  EXPECT_NE(lines[2].back(), ',');

  // Resuming appends.
  TrainConfig more = c;
  more.iterations = 5;
  const std::string ck = temp_path("metrics_ck.json");
  train(c, {ck, std::nullopt});
  train(more, {std::nullopt, path}, load_checkpoint(ck));
  const auto after = read_lines(path);
  ASSERT_EQ(after.size(), 6u);
  EXPECT_EQ(after[5].substr(0, 2), "5,");
  std::filesystem::remove(path);
  std::filesystem::remove(ck);
}

TEST(Train, EarlyStoppingWithPatience) {
  TrainConfig c = small_config();
  c.lr_theta = 0.0;
  c.lr_gamma = 0.0;
  c.iterations = 20;
  c.eval_every = 1;
  c.patience = 2;
  // Frozen policy: validation never improves after the first evaluation.
  const TrainResult r = train(c);
  EXPECT_TRUE(r.stopped_early);
  EXPECT_EQ(r.metrics.size(), 3u);
}

TEST(Checkpoint, JsonRoundTripIsExact) {
  TrainConfig c = small_config();
  c.optimizer = Optimizer::adam;
  c.model.solver.time_budget_ms = 50.0;
  c.model.estimator.pathwise_term = false;
  c.model.estimator.zeta = -0.25;
  const TrainResult r = train(c);
  const std::string path = temp_path("roundtrip.json");
  save_checkpoint(r.checkpoint, path);
  const Checkpoint back = load_checkpoint(path);
  std::filesystem::remove(path);
  EXPECT_EQ(back.state.theta, r.checkpoint.state.theta);
  EXPECT_EQ(back.state.gamma, r.checkpoint.state.gamma);
  EXPECT_EQ(back.state.adam_theta, r.checkpoint.state.adam_theta);
  EXPECT_EQ(back.state.adam_gamma, r.checkpoint.state.adam_gamma);
  EXPECT_EQ(back.state.iteration, r.checkpoint.state.iteration);
  EXPECT_EQ(back.state.rng.state(), r.checkpoint.state.rng.state());
  EXPECT_EQ(checkpoint_to_json(back), checkpoint_to_json(r.checkpoint));
  EXPECT_EQ(back.config.model.estimator.zeta, -0.25);
  EXPECT_EQ(back.config.model.solver.time_budget_ms, 50.0);
}

TEST(Checkpoint, Errors) {
  EXPECT_THROW(load_checkpoint(temp_path("does_not_exist.json")), std::ios_base::failure);
  const std::string path = temp_path("garbage.json");
  {
    std::ofstream(path) << "{ not json";
  }
  EXPECT_THROW(load_checkpoint(path), ArgumentError);
  {
    std::ofstream(path) << R"({"format": "something-else"})";
  }
  EXPECT_THROW(load_checkpoint(path), ArgumentError);
  std::filesystem::remove(path);
  auto j = checkpoint_to_json(train(small_config()).checkpoint);
  j["version"] = 99;
  EXPECT_THROW(checkpoint_from_json(j), ArgumentError);
}

TEST(Evaluate, SingleAgentEqualsTsp) {
  TrainConfig c = small_config();
  c.m_agents = 1;
  const TrainState s = init_train_state(c);
  std::vector<Instance> inst{generate_instance(7, 1, 5), generate_instance(7, 1, 6)};
  const EvalReport r = evaluate_policy(s.theta, c.model.policy, inst, c.model.solver);
  ASSERT_EQ(r.L.size(), 2u);
  for (std::size_t i = 0; i < inst.size(); ++i)
    EXPECT_NEAR(r.L[i], tour_length(solve_tsp(inst[i].free_cities(), inst[i]), inst[i]), 1e-12);
}

TEST(Evaluate, DuplicatesGiveIdenticalResults) {
  const TrainConfig c = small_config();
  const TrainState s = init_train_state(c);
  const Instance one = generate_instance(7, 2, 8);
  const EvalReport r = evaluate_policy(s.theta, c.model.policy, {one, one, one}, c.model.solver, Decode::greedy);
  EXPECT_EQ(r.L[0], r.L[1]);
  EXPECT_EQ(r.L[1], r.L[2]);
  EXPECT_EQ(r.mean, r.L[0]);
  const EvalReport rs = evaluate_random({one, one}, c.model.solver, 4);
  EXPECT_NE(rs.L[0], 0.0);
}

TEST(Evaluate, DoesNotMutateParameters) {
  const TrainConfig c = small_config();
  const TrainState s = init_train_state(c);
  const ParamStore before = s.theta;
  evaluate_policy(s.theta, c.model.policy, {generate_instance(7, 2, 9)}, c.model.solver, Decode::sample, 3);
  EXPECT_EQ(s.theta, before);
}

TEST(Evaluate, Errors) {
  const TrainConfig c = small_config();
  const TrainState s = init_train_state(c);
  EXPECT_THROW(evaluate_policy(s.theta, c.model.policy, {}, c.model.solver), ArgumentError);
  EXPECT_THROW(evaluate_policy(s.theta, c.model.policy, {generate_instance(7, 3, 1)}, c.model.solver),
               ArgumentError);
}

TEST(Evaluate, SummaryStatistics) {
  EvalReport r;
  r.L = {1.0, 3.0, 2.0};
  r.runtime_ms = {0.0, 0.0, 0.0};
  detail::summarize(r);
  EXPECT_DOUBLE_EQ(r.mean, 2.0);
  EXPECT_EQ(r.max, 3.0);
  EXPECT_EQ(r.min, 1.0);
}

TEST(MovingAverage, Examples) {
  EXPECT_EQ(moving_average({1, 2, 3, 4}, 1), (std::vector<double>{1, 2, 3, 4}));
  EXPECT_EQ(moving_average({1, 2, 3, 4}, 2), (std::vector<double>{1, 1.5, 2.5, 3.5}));
  EXPECT_THROW(moving_average({1}, 0), ArgumentError);
}
