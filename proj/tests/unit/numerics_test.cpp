#include <cmath>
#include <numeric>

#include <gtest/gtest.h>

#include "oracles.h"
#include "pema/errors.h"
#include "pema/numerics.h"
#include "pema/random.h"

namespace pema {
namespace {

TEST(MatmulTest, IdentityLeavesMatrixUnchanged) {
  const Matrix m{{1, 2}, {3, 4}};
  EXPECT_EQ(matmul(Matrix::identity(2), m), m);
}

TEST(MatmulTest, OrthogonalRowGivesZero) {
  const Matrix out = matmul(Matrix{{1, 0}}, Matrix{{0}, {5}});
  ASSERT_EQ(out.rows(), 1u);
  ASSERT_EQ(out.cols(), 1u);
  EXPECT_EQ(out(0, 0), 0.0);
}

TEST(MatmulTest, MatchesNaiveTripleLoopExactly) {
  Rng rng(17);
  for (int trial = 0; trial < 20; ++trial) {
    const Matrix a = testing::random_matrix(3, 4, rng);
    const Matrix b = testing::random_matrix(4, 2, rng);
    EXPECT_EQ(matmul(a, b), testing::naive_matmul(a, b));
  }
}

TEST(MatmulTest, LargeProductMatchesNaiveExactly) {
  // Big enough to take the parallel path.
  Rng rng(4);
  const Matrix a = testing::random_matrix(70, 90, rng);
  const Matrix b = testing::random_matrix(90, 60, rng);
  EXPECT_EQ(matmul(a, b), testing::naive_matmul(a, b));
}

TEST(MatmulTest, ShapeMismatchNamesBothShapes) {
  try {
    matmul(Matrix(2, 3), Matrix(2, 3));
    FAIL() << "expected a dimension error";
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("2x3"), std::string::npos) << msg;
  }
}

TEST(MatmulTest, AssociativeOnRandomInstances) {
  Rng rng(99);
  for (int trial = 0; trial < 50; ++trial) {
    const Matrix a = testing::random_matrix(8, 8, rng);
    const Matrix b = testing::random_matrix(8, 8, rng);
    const Matrix c = testing::random_matrix(8, 8, rng);
    const Matrix left = matmul(matmul(a, b), c);
    const Matrix right = matmul(a, matmul(b, c));
    for (std::size_t i = 0; i < left.size(); ++i) {
      const double scale = std::max(1.0, std::abs(left.data()[i]));
      EXPECT_LE(std::abs(left.data()[i] - right.data()[i]) / scale, 1e-9);
    }
  }
}

TEST(MatvecTest, TransposedAgreesWithExplicitTranspose) {
  Rng rng(3);
  const Matrix m = testing::random_matrix(5, 7, rng);
  std::vector<double> x(5);
  for (double& v : x) v = rng.normal();
  Matrix t(7, 5);
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 7; ++j) t(j, i) = m(i, j);
  const auto a = matvec_transposed(m, x);
  const auto b = matvec(t, x);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-12);
}

TEST(SoftmaxTest, EqualLogitsSplitEvenly) {
  const auto p = softmax(std::vector<double>{0.0, 0.0});
  EXPECT_DOUBLE_EQ(p[0], 0.5);
  EXPECT_DOUBLE_EQ(p[1], 0.5);
}

TEST(SoftmaxTest, ClosedFormQuarterThreeQuarters) {
  const auto p = softmax(std::vector<double>{0.0, std::log(3.0)});
  EXPECT_NEAR(p[0], 0.25, 1e-15);
  EXPECT_NEAR(p[1], 0.75, 1e-15);
}

TEST(SoftmaxTest, RejectsNonFiniteLogits) {
  EXPECT_THROW(softmax(std::vector<double>{0.0, NAN}), NumericInputError);
  EXPECT_THROW(softmax(std::vector<double>{INFINITY, 0.0}), NumericInputError);
}

TEST(SoftmaxProperty, SumsToOneAndIsShiftInvariant) {
  Rng rng(1234);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 1 + rng.below(80);
    std::vector<double> logits(n);
    for (double& l : logits) l = rng.normal(0.0, 10.0);
    const auto p = softmax(logits);
    double sum = 0.0;
    for (double x : p.probs()) {
      EXPECT_GT(x, 0.0);
      sum += x;
    }
    EXPECT_NEAR(sum, 1.0, 1e-12);

    const double shift = (rng.uniform() * 2.0 - 1.0) * 1e3;
    std::vector<double> shifted = logits;
    for (double& l : shifted) l += shift;
    const auto q = softmax(shifted);
    for (std::size_t i = 0; i < n; ++i) EXPECT_NEAR(p[i], q[i], 1e-12);
  }
}

TEST(CrossEntropyTest, HandValues) {
  EXPECT_EQ(cross_entropy(TokenDistribution({0.0, 1.0, 0.0}), 1), 0.0);
  EXPECT_NEAR(cross_entropy(TokenDistribution({0.5, 0.5}), 0), 0.6931471805599453, 1e-15);
  EXPECT_NEAR(cross_entropy(TokenDistribution::uniform(20), 7), 2.995732273553991, 1e-12);
}

TEST(CrossEntropyTest, ZeroProbabilityIsFloored) {
  const double loss = cross_entropy(TokenDistribution({1.0, 0.0}), 1);
  EXPECT_TRUE(std::isfinite(loss));
  EXPECT_NEAR(loss, -std::log(1e-300), 1e-9);
}

TEST(CrossEntropyTest, TargetOutOfRange) {
  EXPECT_THROW(cross_entropy(TokenDistribution::uniform(4), 4), IndexError);
}

TEST(MseTest, HandValues) {
  EXPECT_EQ(mse(std::vector<double>{1, 2}, std::vector<double>{1, 2}), 0.0);
  EXPECT_EQ(mse(std::vector<double>{1, 0}, std::vector<double>{0, 0}), 1.0);
  EXPECT_EQ(mse(std::vector<double>{1, 2}, std::vector<double>{-1, 0}), 8.0);
  EXPECT_THROW(mse(std::vector<double>{1}, std::vector<double>{1, 2}), DimensionError);
}

TEST(TokenDistributionTest, ValidatesInput) {
  EXPECT_THROW(TokenDistribution({0.5, 0.6}), NumericInputError);
  EXPECT_THROW(TokenDistribution({1.5, -0.5}), NumericInputError);
  EXPECT_EQ(TokenDistribution({0.25, 0.5, 0.25}).argmax(), 1u);
  EXPECT_EQ(TokenDistribution({0.5, 0.5}).argmax(), 0u);
}

TEST(AdamTest, ZeroGradientsAreAFixedPoint) {
  Rng rng(8);
  Matrix p = testing::random_matrix(3, 4, rng);
  const Matrix before = p;
  AdamState state({}, 3, 4);
  for (int i = 0; i < 5; ++i) adam_step(p, Matrix(3, 4), state);
  EXPECT_EQ(p, before);
  EXPECT_EQ(state.step, 5u);
}

TEST(AdamTest, FirstStepClosedForm) {
  Matrix p(1, 1, 0.0);
  AdamState state({1e-3, 0.9, 0.999, 1e-8}, 1, 1);
  adam_step(p, Matrix(1, 1, 1.0), state);
  EXPECT_NEAR(p(0, 0), -1e-3 / (1.0 + 1e-8), 1e-18);
  EXPECT_EQ(state.step, 1u);
}

TEST(AdamTest, SecondStepMatchesHandComputation) {
  Matrix p(1, 1, 0.0);
  AdamState state({1e-3, 0.9, 0.999, 1e-8}, 1, 1);
  adam_step(p, Matrix(1, 1, 1.0), state);
  adam_step(p, Matrix(1, 1, -2.0), state);
  const double m = 0.9 * 0.1 + 0.1 * -2.0;
  const double v = 0.999 * 0.001 + 0.001 * 4.0;
  const double mh = m / (1 - 0.81);
  const double vh = v / (1 - 0.999 * 0.999);
  const double expected = -1e-3 / (1.0 + 1e-8) - 1e-3 * mh / (std::sqrt(vh) + 1e-8);
  EXPECT_NEAR(p(0, 0), expected, 1e-15);
}

TEST(AdamTest, DeterministicAndShapeChecked) {
  Rng rng(5);
  const Matrix g = testing::random_matrix(2, 2, rng);
  Matrix p1(2, 2, 0.5);
  Matrix p2(2, 2, 0.5);
  AdamState s1({}, 2, 2);
  AdamState s2({}, 2, 2);
  adam_step(p1, g, s1);
  adam_step(p2, g, s2);
  EXPECT_EQ(p1, p2);
  EXPECT_THROW(adam_step(p1, Matrix(3, 2), s1), DimensionError);
}

TEST(ChecksumTest, SensitiveToFloatImageOnly) {
  const std::vector<double> a{1.0, 2.0, 3.0};
  std::vector<double> b = a;
  EXPECT_EQ(float32_checksum(a), float32_checksum(b));
  b[1] = 2.0 + 1e-12;  // rounds to the same float
  EXPECT_EQ(float32_checksum(a), float32_checksum(b));
  b[1] = 2.5;
  EXPECT_NE(float32_checksum(a), float32_checksum(b));
}

TEST(MatrixTest, RoundToFloatIsIdempotent) {
  Rng rng(2);
  Matrix m = testing::random_matrix(4, 4, rng);
  m.round_to_float();
  const Matrix once = m;
  m.round_to_float();
  EXPECT_EQ(m, once);
  for (double x : m.data()) EXPECT_EQ(x, static_cast<double>(static_cast<float>(x)));
}

}  // namespace
}  // namespace pema
