#include <cmath>

#include <gtest/gtest.h>

#include "oracles.h"
#include "pema/errors.h"
#include "pema/knn_lm.h"
#include "pema/random.h"

namespace pema {
namespace {

ExternalMemory random_memory(std::size_t n, std::size_t d, std::size_t v, Rng& rng,
                             bool coarse = false) {
  ExternalMemory m;
  m.d = d;
  m.v = v;
  for (std::size_t i = 0; i < n; ++i) {
    ContextRecord r;
    for (std::size_t j = 0; j < d; ++j) {
      // Coarse grids produce many exact distance ties.
      r.representation.push_back(coarse ? static_cast<float>(rng.below(3))
                                        : static_cast<float>(rng.normal()));
    }
    r.target = static_cast<TokenId>(rng.below(v));
    r.sentence_id = static_cast<std::uint32_t>(i);
    r.position = 1;
    r.sentence_len = 1;
    m.records.push_back(std::move(r));
  }
  return m;
}

ExternalMemory line_memory(std::vector<std::pair<float, TokenId>> points) {
  ExternalMemory m;
  m.d = 1;
  m.v = 8;
  for (auto [x, y] : points) m.records.push_back(ContextRecord{{x}, y, 0, 1, 1});
  return m;
}

std::vector<double> random_query(std::size_t d, Rng& rng) {
  std::vector<double> q(d);
  for (double& x : q) x = rng.normal();
  return q;
}

TEST(KnnSearchTest, ExactMatchComesFirstAtDistanceZero) {
  Rng rng(1);
  const auto m = random_memory(100, 8, 10, rng);
  const std::vector<double> q(m.records[37].representation.begin(),
                              m.records[37].representation.end());
  const auto nn = knn_search(m, q, 3);
  ASSERT_EQ(nn.size(), 3u);
  EXPECT_EQ(nn[0].index, 37u);
  EXPECT_EQ(nn[0].distance, 0.0);
}

TEST(KnnSearchTest, OversizedKReturnsWholeMemorySorted) {
  Rng rng(2);
  const auto m = random_memory(30, 4, 5, rng);
  const auto q = random_query(4, rng);
  const auto nn = knn_search(m, q, 100);
  const auto oracle = testing::exhaustive_knn(m, q, 100);
  ASSERT_EQ(nn.size(), 30u);
  for (std::size_t i = 0; i < nn.size(); ++i) {
    EXPECT_EQ(nn[i].index, oracle[i].index);
    EXPECT_EQ(nn[i].distance, oracle[i].distance);
  }
}

TEST(KnnSearchTest, MatchesExhaustiveOracleOnAThousandRecords) {
  Rng rng(3);
  const auto m = random_memory(1000, 16, 20, rng);
  for (int trial = 0; trial < 20; ++trial) {
    const auto q = random_query(16, rng);
    const auto nn = knn_search(m, q, 16);
    const auto oracle = testing::exhaustive_knn(m, q, 16);
    ASSERT_EQ(nn.size(), oracle.size());
    for (std::size_t i = 0; i < nn.size(); ++i) {
      EXPECT_EQ(nn[i].index, oracle[i].index);
      EXPECT_EQ(nn[i].distance, oracle[i].distance);
    }
  }
}

TEST(KnnSearchTest, TiesGoToTheLowerIndex) {
  Rng rng(4);
  const auto m = random_memory(500, 3, 4, rng, true);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> q(3);
    for (double& x : q) x = static_cast<double>(rng.below(3));
    const auto nn = knn_search(m, q, 25);
    const auto oracle = testing::exhaustive_knn(m, q, 25);
    for (std::size_t i = 0; i < nn.size(); ++i) {
      EXPECT_EQ(nn[i].index, oracle[i].index);
      if (i > 0 && nn[i].distance == nn[i - 1].distance) EXPECT_GT(nn[i].index, nn[i - 1].index);
    }
  }
}

TEST(KnnSearchTest, Errors) {
  Rng rng(5);
  const auto m = random_memory(10, 4, 5, rng);
  EXPECT_THROW(knn_search(m, std::vector<double>(3), 2), DimensionError);
  EXPECT_THROW(knn_search(m, std::vector<double>(4), 0), ConfigError);
  ExternalMemory empty;
  empty.d = 4;
  empty.v = 5;
  EXPECT_THROW(knn_search(empty, std::vector<double>(4), 2), InputError);
  KNNConfig bad;
  bad.tau = 0.0;
  EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(KnnDistTest, SingleRecordIsOneHot) {
  const auto m = line_memory({{0.5f, 6}});
  const auto p = knn_dist(m, std::vector<double>{3.0}, {});
  EXPECT_EQ(p[6], 1.0);
  for (TokenId t = 0; t < 8; ++t) {
    if (t != 6) EXPECT_EQ(p[t], 0.0);
  }
}

TEST(KnnDistTest, EquidistantNeighborsSplitEvenly) {
  const auto m = line_memory({{-1.0f, 4}, {1.0f, 5}});
  const auto p = knn_dist(m, std::vector<double>{0.0}, {2, 1.0});
  EXPECT_DOUBLE_EQ(p[4], 0.5);
  EXPECT_DOUBLE_EQ(p[5], 0.5);
}

TEST(KnnDistTest, ThreeNeighborHandComputation) {
  // Squared distances 0, 1, 4 from the query at zero; the fourth record is
  // outside k = 3.
  const auto m = line_memory({{0.0f, 4}, {1.0f, 5}, {-2.0f, 4}, {3.0f, 7}});
  const double tau = 2.0;
  const auto p = knn_dist(m, std::vector<double>{0.0}, {3, tau});
  const double w0 = 1.0;
  const double w1 = std::exp(-1.0 / tau);
  const double w2 = std::exp(-4.0 / tau);
  const double z = w0 + w1 + w2;
  EXPECT_NEAR(p[4], (w0 + w2) / z, 1e-15);
  EXPECT_NEAR(p[5], w1 / z, 1e-15);
  EXPECT_EQ(p[7], 0.0);
}

TEST(KnnDistTest, MatchesOracleDistribution) {
  Rng rng(6);
  const auto m = random_memory(400, 8, 12, rng);
  for (double tau : {0.5, 1.0, 10.0}) {
    const auto q = random_query(8, rng);
    const auto p = knn_dist(m, q, {16, tau});
    const auto want = testing::exhaustive_knn_dist(m, q, 16, tau);
    for (std::size_t t = 0; t < 12; ++t) EXPECT_NEAR(p[t], want[t], 1e-12);
  }
}

TEST(KnnDistProperty, NormalizedWithSupportInRetrievedTargets) {
  Rng rng(7);
  const auto m = random_memory(300, 6, 30, rng);
  for (int trial = 0; trial < 50; ++trial) {
    const auto q = random_query(6, rng);
    const std::size_t k = 1 + rng.below(20);
    const auto p = knn_dist(m, q, {k, 0.3 + rng.uniform()});
    std::vector<bool> allowed(30, false);
    for (const auto& n : knn_search(m, q, k)) allowed[m.records[n.index].target] = true;
    double sum = 0.0;
    for (TokenId t = 0; t < 30; ++t) {
      if (!allowed[t]) EXPECT_EQ(p[t], 0.0);
      sum += p[t];
    }
    EXPECT_NEAR(sum, 1.0, 1e-12);
  }
}

TEST(KnnDistProperty, SmallTemperatureIsOneHotAtNearest) {
  Rng rng(8);
  const auto m = random_memory(300, 6, 30, rng);
  for (int trial = 0; trial < 20; ++trial) {
    const auto q = random_query(6, rng);
    const auto nn = knn_search(m, q, 16);
    if (nn[1].distance - nn[0].distance < 1e-3) continue;
    const auto p = knn_dist(m, q, {16, 1e-6});
    EXPECT_NEAR(p[m.records[nn[0].index].target], 1.0, 1e-12);
  }
}

TEST(KnnIndexTest, IndexAndSourceAgreeWithFreeFunctions) {
  Rng rng(9);
  const auto m = random_memory(200, 8, 10, rng);
  const KnnIndex index(m);
  EXPECT_EQ(index.size(), 200u);
  EXPECT_EQ(index.dim(), 8u);
  const KNNConfig cfg{8, 0.7};
  const KnnSource source(m, cfg);
  for (int trial = 0; trial < 10; ++trial) {
    const auto q = random_query(8, rng);
    EXPECT_EQ(index.search(q, 8), knn_search(m, q, 8));
    EXPECT_EQ(source.distribution(q), knn_dist(m, q, cfg));
  }
}

TEST(KnnInterpolationTest, ConstantLambdaIsTheConvexMixture) {
  Rng rng(10);
  const auto m = random_memory(100, 4, 6, rng);
  const auto q = random_query(4, rng);
  const auto p_knn = knn_dist(m, q, {});
  const auto p_lm = softmax(random_query(6, rng));
  const auto mixed = interpolate(p_knn, p_lm, 0.25);
  for (TokenId t = 0; t < 6; ++t) EXPECT_NEAR(mixed[t], 0.25 * p_knn[t] + 0.75 * p_lm[t], 1e-15);
}

}  // namespace
}  // namespace pema
