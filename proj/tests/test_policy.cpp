#include <cmath>

#include <gtest/gtest.h>

#include "imtsp/estimators.hpp"
#include "imtsp/gradcheck.hpp"
#include "imtsp/policy.hpp"

using namespace imtsp;

namespace {

PolicyConfig small_config() {
  PolicyConfig c;
  c.embed_dim = 8;
  c.key_dim = 4;
  c.value_dim = 4;
  c.alloc_key_dim = 4;
  return c;
}

ParamStore small_policy(std::size_t m, std::uint64_t seed, const PolicyConfig& cfg = small_config()) {
  Rng rng(seed);
  return init_policy(cfg, m, rng);
}

Instance from_points(std::vector<Point> pts, std::size_t m) {
  Instance inst;
  inst.cities = std::move(pts);
  inst.num_agents = m;
  return inst;
}

double row_sum(const Tensor& P, std::size_t r) {
  double s = 0;
  for (std::size_t c = 0; c < P.cols(); ++c) s += P.at(r, c);
  return s;
}

}  // namespace

TEST(PolicyConfig, Validation) {
  PolicyConfig c;
  c.embed_dim = 0;
  EXPECT_THROW(c.validate(), ArgumentError);
  c = PolicyConfig{};
  c.clip_alpha = 0;
  EXPECT_THROW(c.validate(), ArgumentError);
}

TEST(Policy, DefaultArchitectureShapes) {
  Rng rng(1);
  const PolicyConfig cfg;
  const ParamStore theta = init_policy(cfg, 3, rng);
  EXPECT_EQ(policy_num_agents(theta, cfg), 3u);
  const Instance inst = generate_instance(20, 3, 2);
  Tape t;
  const auto out = run_policy(t, inst, theta, cfg);
  EXPECT_EQ(out.embedding.city_features.shape(), (Shape{20, 64}));
  EXPECT_EQ(out.embedding.graph_feature.shape(), (Shape{1, 64}));
  EXPECT_EQ(out.embedding.context.shape(), (Shape{1, 128}));
  EXPECT_EQ(out.embedding.attention.shape(), (Shape{3, 19}));
  EXPECT_EQ(out.scores.probs.shape(), (Shape{19, 3}));
}

TEST(Policy, AgentCountMismatchRejected) {
  const ParamStore theta = small_policy(2, 1);
  EXPECT_THROW(
      {
        Tape t;
        run_policy(t, generate_instance(6, 3, 1), theta, small_config());
      },
      ArgumentError);
}

TEST(EmbedCities, ContextIsGraphThenDepot) {
  const ParamStore theta = small_policy(2, 3);
  Tape t;
  const auto s = embed_cities(t, generate_instance(7, 2, 4), theta, small_config());
  const Tensor& fc = s.context.value();
  const Tensor& fg = s.graph_feature.value();
  const Tensor& F = s.city_features.value();
  for (std::size_t k = 0; k < 8; ++k) {
    EXPECT_EQ(fc[k], fg[k]);
    EXPECT_EQ(fc[8 + k], F.at(0, k));
  }
}

TEST(EmbedCities, CoincidentCitiesShareFeatures) {
  const Instance inst = from_points({{0.1, 0.1}, {0.7, 0.3}, {0.4, 0.9}, {0.7, 0.3}, {0.2, 0.6}}, 2);
  Tape t;
  const Tensor F = embed_cities(t, inst, small_policy(2, 5), small_config()).city_features.value();
  for (std::size_t k = 0; k < F.cols(); ++k) EXPECT_NEAR(F.at(1, k), F.at(3, k), 1e-15);
}

TEST(EmbedCities, NoMessageRoundsIsCoordinateProjection) {
  PolicyConfig cfg = small_config();
  cfg.message_iterations = 0;
  const ParamStore theta = small_policy(2, 6, cfg);
  const Instance inst = generate_instance(5, 2, 7);
  Tape t;
  const Tensor F = embed_cities(t, inst, theta, cfg).city_features.value();
  const Tensor& W = theta.at("embed.weight");
  const Tensor& b = theta.at("embed.bias");
  const Point d = inst.cities[0];
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t k = 0; k < cfg.embed_dim; ++k) {
      const double expected =
          W.at(k, 0) * (inst.cities[i].x - d.x) + W.at(k, 1) * (inst.cities[i].y - d.y) + b.at(0, k);
      EXPECT_NEAR(F.at(i, k), expected, 1e-15);
    }
}

TEST(EmbedCities, PermutingFreeCitiesPermutesFeatures) {
  const Instance a = generate_instance(7, 2, 8);
  Instance b = a;
  const std::vector<std::size_t> perm{0, 3, 1, 6, 2, 5, 4};
  for (std::size_t i = 0; i < 7; ++i) b.cities[i] = a.cities[perm[i]];
  const ParamStore theta = small_policy(2, 9);
  Tape ta, tb;
  const auto sa = embed_cities(ta, a, theta, small_config());
  const auto sb = embed_cities(tb, b, theta, small_config());
  for (std::size_t k = 0; k < 8; ++k) EXPECT_NEAR(sa.graph_feature.value()[k], sb.graph_feature.value()[k], 1e-14);
  for (std::size_t i = 0; i < 7; ++i)
    for (std::size_t k = 0; k < 8; ++k)
      EXPECT_NEAR(sb.city_features.value().at(i, k), sa.city_features.value().at(perm[i], k), 1e-14);
}

TEST(EmbedAgents, AttentionRowsSumToOne) {
  Tape t;
  const auto out = run_policy(t, generate_instance(9, 3, 10), small_policy(3, 11), small_config());
  const Tensor& W = out.embedding.attention.value();
  for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(row_sum(W, j), 1.0, 1e-14);
}

TEST(EmbedAgents, EqualScoresGiveMeanOfValues) {
  ParamStore theta = small_policy(2, 12);
  for (double& v : theta.at("attention.query").vec()) v = 0.0;
  Tape t;
  const auto out = run_policy(t, generate_instance(6, 2, 13), theta, small_config());
  const Tensor& V = out.embedding.values.value();
  const Tensor& H = out.embedding.agent_embeddings.value();
  for (std::size_t j = 0; j < 2; ++j)
    for (std::size_t k = 0; k < V.cols(); ++k) {
      double mean = 0;
      for (std::size_t i = 0; i < V.rows(); ++i) mean += V.at(i, k) / V.rows();
      EXPECT_NEAR(H.at(j, k), mean, 1e-15);
    }
}

TEST(EmbedAgents, SingleCityEmbeddingIsItsValue) {
  Tape t;
  const auto out = run_policy(t, generate_instance(2, 3, 14), small_policy(3, 15), small_config());
  const Tensor& V = out.embedding.values.value();
  const Tensor& H = out.embedding.agent_embeddings.value();
  for (std::size_t j = 0; j < 3; ++j)
    for (std::size_t k = 0; k < V.cols(); ++k) EXPECT_NEAR(H.at(j, k), V.at(0, k), 1e-15);
}

TEST(AllocationProbs, RowStochasticAndClipped) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    ParamStore theta = small_policy(3, seed);
    Rng rng(seed);
    for (std::size_t k = 0; k < theta.size(); ++k) theta.flat_ref(k) = rng.uniform(-3, 3);
    Tape t;
    const auto out = run_policy(t, generate_instance(12, 3, seed), theta, small_config());
    const Tensor& P = out.scores.probs.value();
    EXPECT_NO_THROW(check_row_stochastic(P, 1e-9));
    for (std::size_t r = 0; r < P.rows(); ++r) EXPECT_NEAR(row_sum(P, r), 1.0, 1e-9);
    for (double b : out.scores.clipped.value().vec()) EXPECT_LE(std::abs(b), 10.0);
  }
}

TEST(AllocationProbs, EqualScoresGiveUniformRows) {
  ParamStore theta = small_policy(2, 16);
  for (double& v : theta.at("allocation.query").vec()) v = 0.0;
  Tape t;
  const Tensor P = run_policy(t, generate_instance(6, 2, 17), theta, small_config()).scores.probs.value();
  for (std::size_t r = 0; r < P.rows(); ++r) {
    EXPECT_DOUBLE_EQ(P.at(r, 0), 0.5);
    EXPECT_DOUBLE_EQ(P.at(r, 1), 0.5);
  }
}

TEST(AllocationProbs, ClipSaturatesAtAlpha) {
  Tape t;
  const Tensor b = clip_scores(t.constant(Tensor::row({1e3, -1e3, 0.0})), 10.0).value();
  EXPECT_DOUBLE_EQ(b[0], 10.0);
  EXPECT_DOUBLE_EQ(b[1], -10.0);
  EXPECT_DOUBLE_EQ(b[2], 0.0);
}

TEST(AllocationProbs, SaturatedPairProbabilities) {
  Tape t;
  const Tensor P = softmax_rows(t.constant(Tensor::row({10.0, -10.0}))).value();
  const double e = std::exp(-20.0);
  EXPECT_NEAR(P[0], 1.0 / (1.0 + e), 1e-16);
  EXPECT_NEAR(P[1], e / (1.0 + e), 1e-24);
}

TEST(AllocationProbs, RelabellingAgentsPermutesColumnsAtSymmetricInit) {
  // With identical per-agent query blocks every agent is interchangeable, so
  // swapping blocks leaves P unchanged and equals P with columns swapped.
  ParamStore theta = small_policy(2, 18);
  Tensor& q = theta.at("attention.query");
  const std::size_t block = q.size() / 2;
  for (std::size_t k = 0; k < block; ++k) q[block + k] = q[k];
  Tape t;
  const Tensor P = run_policy(t, generate_instance(7, 2, 19), theta, small_config()).scores.probs.value();
  for (std::size_t r = 0; r < P.rows(); ++r) EXPECT_NEAR(P.at(r, 0), P.at(r, 1), 1e-15);
}

TEST(AllocationProbs, SwappingAgentParametersSwapsColumns) {
  ParamStore theta = small_policy(3, 20);
  ParamStore swapped = theta;
  Tensor& q = swapped.at("attention.query");
  const Tensor& q0 = theta.at("attention.query");
  const std::size_t block = q.size() / 3;
  for (std::size_t k = 0; k < block; ++k) {
    q[k] = q0[block + k];
    q[block + k] = q0[k];
  }
  const Instance inst = generate_instance(8, 3, 21);
  Tape ta, tb;
  const Tensor Pa = run_policy(ta, inst, theta, small_config()).scores.probs.value();
  const Tensor Pb = run_policy(tb, inst, swapped, small_config()).scores.probs.value();
  for (std::size_t r = 0; r < Pa.rows(); ++r) {
    EXPECT_NEAR(Pa.at(r, 0), Pb.at(r, 1), 1e-15);
    EXPECT_NEAR(Pa.at(r, 1), Pb.at(r, 0), 1e-15);
    EXPECT_NEAR(Pa.at(r, 2), Pb.at(r, 2), 1e-15);
  }
}

TEST(SampleAllocation, DegenerateRowAlwaysChosen) {
  const Instance inst = generate_instance(3, 2, 1);
  const Tensor P = Tensor::matrix(2, 2, {1.0, 0.0, 0.3, 0.7});
  Rng rng(2);
  for (int i = 0; i < 200; ++i) {
    const auto s = sample_allocation(P, inst, rng);
    EXPECT_EQ(s.choices[0], 0u);
    EXPECT_NO_THROW(validate(s.allocation, inst));
  }
}

TEST(SampleAllocation, UniformRowsLogProb) {
  const Instance inst = generate_instance(4, 2, 1);
  const Tensor P({3, 2}, 0.5);
  Rng rng(3);
  const auto s = sample_allocation(P, inst, rng);
  EXPECT_NEAR(s.log_prob, 3 * std::log(0.5), 1e-15);
}

TEST(SampleAllocation, UnnormalisedRowRejected) {
  const Instance inst = generate_instance(3, 2, 1);
  Rng rng(4);
  EXPECT_THROW(sample_allocation(Tensor::matrix(2, 2, {0.5, 0.6, 0.5, 0.5}), inst, rng), ArgumentError);
  EXPECT_THROW(sample_allocation(Tensor::matrix(1, 2, {0.5, 0.5}), inst, rng), ShapeError);
}

TEST(SampleAllocation, FrequenciesMatchProbabilities) {
  const Instance inst = generate_instance(3, 3, 1);
  const Tensor P = Tensor::matrix(2, 3, {0.2, 0.5, 0.3, 0.05, 0.05, 0.9});
  Rng rng(5);
  const int n = 100000;
  std::vector<int> counts(6, 0);
  for (int i = 0; i < n; ++i) {
    const auto s = sample_allocation(P, inst, rng);
    for (std::size_t r = 0; r < 2; ++r) ++counts[r * 3 + s.choices[r]];
  }
  for (std::size_t k = 0; k < 6; ++k) {
    const double p = P[k];
    const double se = std::sqrt(p * (1 - p) / n);
    EXPECT_NEAR(static_cast<double>(counts[k]) / n, p, 3 * se) << "cell " << k;
  }
}

TEST(SampleAllocation, AllocationMatchesChoices) {
  const Instance inst = generate_instance(6, 2, 1);
  const auto alloc = allocation_from_choices({1, 0, 1, 1, 0}, inst);
  EXPECT_EQ(alloc.groups[0], (std::vector<std::size_t>{2, 5}));
  EXPECT_EQ(alloc.groups[1], (std::vector<std::size_t>{1, 3, 4}));
}

TEST(LogProb, DeterministicMatchIsZero) {
  Tape t;
  Var P = t.constant(Tensor::matrix(2, 2, {1.0, 0.0, 0.0, 1.0}));
  EXPECT_EQ(log_prob(P, {0, 1}).item(), 0.0);
}

TEST(LogProb, UniformTwoByTwo) {
  Tape t;
  Var P = t.constant(Tensor({2, 2}, 0.5));
  EXPECT_NEAR(log_prob(P, {1, 0}).item(), 2 * std::log(0.5), 1e-15);
}

TEST(LogProb, ZeroProbabilityCellRejected) {
  Tape t;
  Var P = t.constant(Tensor::matrix(2, 2, {1.0, 0.0, 0.5, 0.5}));
  EXPECT_THROW(log_prob(P, {1, 0}), NumericError);
}

TEST(LogProb, GradientMatchesFiniteDifferences) {
  const PolicyConfig cfg = small_config();
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    const Instance inst = generate_instance(6, 2, seed);
    const ParamStore theta = small_policy(2, seed);
    const std::vector<std::size_t> choices{0, 1, 1, 0, 1};
    const auto report = finite_diff_check(
        [&](Tape& t, const ParamStore& p) { return log_prob(run_policy(t, inst, p, cfg).scores.probs, choices); },
        theta, 1e-5, 1e-4);
    EXPECT_TRUE(report.passed) << "seed " << seed << " rel " << report.max_rel_error;
  }
}

TEST(Score, ExpectationIsZeroByEnumeration) {
  const PolicyConfig cfg = small_config();
  const Instance inst = generate_instance(5, 2, 22);
  const ParamStore theta = small_policy(2, 23);
  Tape t0;
  const Tensor P = run_policy(t0, inst, theta, cfg).scores.probs.value();
  GradientSample expected = theta.zero_gradient();
  for_each_allocation(P, [&](const std::vector<std::size_t>& choices, double prob) {
    Tape t;
    expected += prob * t.backward(log_prob(run_policy(t, inst, theta, cfg).scores.probs, choices), theta);
  });
  for (double v : expected.values) EXPECT_NEAR(v, 0.0, 1e-10);
}

TEST(GreedyChoices, ArgmaxLowestIndexOnTies) {
  EXPECT_EQ(greedy_choices(Tensor::matrix(3, 2, {0.3, 0.7, 0.5, 0.5, 0.9, 0.1})),
            (std::vector<std::size_t>{1, 0, 0}));
}
