#include <algorithm>

#include <gtest/gtest.h>

#include "oracles.h"
#include "pema/decoding.h"
#include "pema/errors.h"
#include "pema/random.h"

namespace pema {
namespace {

using testing::small_plm;
using testing::small_task;

std::vector<double> lambdas(GUSchedule s, std::size_t n) {
  std::vector<double> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(s.next());
  return out;
}

AdapterWeights random_adapter(std::uint64_t seed) {
  Rng rng(seed);
  AdapterWeights w;
  w.v = 68;
  w.a = testing::random_matrix(4, 16, rng, 0.5);
  w.b_rct = testing::random_matrix(16, 4, rng, 0.5);
  w.b_pd = testing::random_matrix(16, 4, rng, 2.0);
  return w;
}

// Greedy loop written against the plain encoder: most probable content token,
// EOS only when strictly more probable.
std::vector<TokenId> oracle_greedy(const ToyPLM& plm, std::span<const TokenId> source,
                                   std::size_t max_length) {
  auto c = assemble_prompt(default_vocab(), PromptTemplate{}, source).tokens;
  std::vector<TokenId> out;
  while (out.size() < max_length) {
    const auto p = plm.encode(c).next_token;
    TokenId best = kFirstContentId;
    for (TokenId t = kFirstContentId; t < p.size(); ++t) {
      if (p[t] > p[best]) best = t;
    }
    if (p[kEos] > p[best]) break;
    out.push_back(best);
    c.push_back(best);
  }
  return out;
}

TEST(GUScheduleTest, NinetyOverThree) {
  const auto l = lambdas(GUSchedule(0.9, 3), 6);
  const std::vector<double> want{0.81, 0.36, 0.09, 0.0, 0.0, 0.0};
  for (std::size_t i = 0; i < want.size(); ++i) EXPECT_NEAR(l[i], want[i], 1e-12) << i;
}

TEST(GUScheduleTest, SeventyOverSevenFourthToken) {
  EXPECT_NEAR(lambdas(GUSchedule(0.7, 7), 4)[3], 0.16, 1e-12);
}

TEST(GUScheduleTest, ZeroMaxIsAlwaysZero) {
  for (double l : lambdas(GUSchedule(0.0, 5), 10)) EXPECT_EQ(l, 0.0);
}

TEST(GUScheduleTest, DecrementFirstHookShiftsTheSequence) {
  GUSchedule s(0.9, 3);
  s.set_decrement_first(true);
  const auto l = lambdas(s, 4);
  const std::vector<double> want{0.36, 0.09, 0.0, 0.0};
  for (std::size_t i = 0; i < want.size(); ++i) EXPECT_NEAR(l[i], want[i], 1e-12) << i;
}

TEST(GUScheduleTest, Errors) {
  EXPECT_THROW(GUSchedule(0.5, 0), ConfigError);
  EXPECT_THROW(GUSchedule(1.5, 3), ConfigError);
  EXPECT_THROW(GUSchedule(-0.1, 3), ConfigError);
}

TEST(GUScheduleProperty, NonIncreasingAndZeroAfterSourceLength) {
  Rng rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    const double lmax = rng.uniform();
    const std::size_t sl = 1 + rng.below(30);
    GUSchedule s(lmax, sl);
    EXPECT_NEAR(s.step_size(), lmax / static_cast<double>(sl), 1e-15);
    const auto l = lambdas(s, sl + 5);
    EXPECT_DOUBLE_EQ(l.front(), lmax * lmax);
    for (std::size_t i = 1; i < l.size(); ++i) EXPECT_LE(l[i], l[i - 1]);
    for (std::size_t i = sl; i < l.size(); ++i) EXPECT_EQ(l[i], 0.0) << sl << " " << i;
    for (double x : l) {
      EXPECT_GE(x, 0.0);
      EXPECT_LE(x, lmax * lmax);
    }
  }
}

TEST(InterpolateTest, Endpoints) {
  const TokenDistribution a({0.7, 0.2, 0.1});
  const TokenDistribution b({0.1, 0.3, 0.6});
  EXPECT_EQ(interpolate(a, b, 0.0), b);
  EXPECT_EQ(interpolate(a, b, 1.0), a);
  const auto half = interpolate(TokenDistribution({1.0, 0.0}), TokenDistribution({0.0, 1.0}), 0.5);
  EXPECT_EQ(half[0], 0.5);
  EXPECT_EQ(half[1], 0.5);
}

TEST(InterpolateTest, Errors) {
  const TokenDistribution a({0.5, 0.5});
  EXPECT_THROW(interpolate(a, a, 1.1), ConfigError);
  EXPECT_THROW(interpolate(a, a, -0.1), ConfigError);
  EXPECT_THROW(interpolate(a, TokenDistribution({1.0, 0.0, 0.0}), 0.5), DimensionError);
}

TEST(InterpolateProperty, BoundedAndNormalized) {
  Rng rng(4);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 2 + rng.below(20);
    std::vector<double> la(n), lb(n);
    for (double& x : la) x = rng.normal(0.0, 3.0);
    for (double& x : lb) x = rng.normal(0.0, 3.0);
    const auto a = softmax(la);
    const auto b = softmax(lb);
    const double lambda = rng.uniform();
    const auto p = interpolate(a, b, lambda);
    double sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      EXPECT_GE(p[i], std::min(a[i], b[i]) - 1e-15);
      EXPECT_LE(p[i], std::max(a[i], b[i]) + 1e-15);
      sum += p[i];
    }
    EXPECT_NEAR(sum, 1.0, 1e-12);
  }
}

TEST(ChooseTokenTest, ReservedIdsAndTies) {
  std::vector<double> p(8, 0.0);
  p[kPad] = 0.4;  // never emitted
  p[5] = 0.3;
  p[6] = 0.3;
  EXPECT_EQ(choose_token(TokenDistribution(p)), 5u);
  const std::vector<double> q{0.0, 0.1, 0.2, 0.1, 0.2, 0.2, 0.1, 0.1};
  EXPECT_EQ(choose_token(TokenDistribution(q)), 4u);  // EOS only wins strictly
  std::vector<double> e(8, 0.0);
  e[kEos] = 0.5;
  e[4] = 0.5 - 1e-9;
  e[7] = 1e-9;
  EXPECT_EQ(choose_token(TokenDistribution(e)), kEos);
}

TEST(DecodeTest, LambdaZeroReproducesPlainGreedy) {
  LocalEncoder enc(small_plm());
  const auto w = random_adapter(5);
  const PemaSource src(w, small_plm().head());
  DecodeConfig cfg;
  cfg.mode = LambdaMode::kConstant;
  cfg.lambda_max = 0.0;
  for (std::size_t i = 0; i < 20; ++i) {
    const auto& s = small_task()[i].source;
    const auto with = decode(enc, &src, default_vocab(), PromptTemplate{}, s, cfg);
    const auto without = decode(enc, nullptr, default_vocab(), PromptTemplate{}, s, cfg);
    EXPECT_EQ(with, without);
    EXPECT_EQ(with, oracle_greedy(small_plm(), s, cfg.max_length));
  }
}

TEST(DecodeTest, UniformAdapterAtFullWeightRepeatsFirstContentToken) {
  LocalEncoder enc(small_plm());
  AdapterWeights w = random_adapter(6);
  w.b_pd = Matrix(16, 4);
  const PemaSource src(w, small_plm().head());
  DecodeConfig cfg;
  cfg.mode = LambdaMode::kConstant;
  cfg.lambda_max = 1.0;
  cfg.max_length = 6;
  const auto out = decode(enc, &src, default_vocab(), PromptTemplate{}, small_task()[0].source, cfg);
  EXPECT_EQ(out, std::vector<TokenId>(6, TokenId{4}));
}

TEST(DecodeTest, GuTraceMatchesSchedule) {
  LocalEncoder enc(small_plm());
  const auto w = random_adapter(7);
  const PemaSource src(w, small_plm().head());
  DecodeConfig cfg;
  cfg.lambda_max = 0.9;
  cfg.max_length = 8;
  const std::vector<TokenId> source = tokenize(default_vocab(), "we go home");
  DecodeTrace trace;
  const auto out = decode(enc, &src, default_vocab(), PromptTemplate{}, source, cfg, &trace);
  ASSERT_GE(trace.lambdas.size(), out.size());
  const auto want = lambdas(GUSchedule(0.9, 3), trace.lambdas.size());
  for (std::size_t i = 0; i < want.size(); ++i) EXPECT_NEAR(trace.lambdas[i], want[i], 1e-12);
  ASSERT_GE(trace.lambdas.size(), 3u);
  EXPECT_NEAR(trace.lambdas[0], 0.81, 1e-12);
  EXPECT_NEAR(trace.lambdas[1], 0.36, 1e-12);
  EXPECT_NEAR(trace.lambdas[2], 0.09, 1e-12);
}

TEST(DecodeTest, ConstantModeUsesLambdaMaxThroughout) {
  LocalEncoder enc(small_plm());
  const auto w = random_adapter(8);
  const PemaSource src(w, small_plm().head());
  DecodeConfig cfg;
  cfg.mode = LambdaMode::kConstant;
  cfg.lambda_max = 0.4;
  DecodeTrace trace;
  decode(enc, &src, default_vocab(), PromptTemplate{}, small_task()[1].source, cfg, &trace);
  ASSERT_FALSE(trace.lambdas.empty());
  for (double l : trace.lambdas) EXPECT_EQ(l, 0.4);
}

TEST(DecodeTest, RespectsMaxLengthAndRejectsEmptySource) {
  LocalEncoder enc(small_plm());
  DecodeConfig cfg;
  cfg.max_length = 2;
  for (const auto& p : small_task()) {
    EXPECT_LE(decode(enc, nullptr, default_vocab(), PromptTemplate{}, p.source, cfg).size(), 2u);
  }
  EXPECT_THROW(decode(enc, nullptr, default_vocab(), PromptTemplate{}, {}, cfg), InputError);
  cfg.lambda_max = 2.0;
  EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(DecodeAllTest, DeterministicAndMatchesSingleDecodes) {
  LocalEncoder enc(small_plm());
  const auto w = random_adapter(9);
  const PemaSource src(w, small_plm().head());
  DecodeConfig cfg;
  std::vector<std::vector<TokenId>> sources;
  for (const auto& p : small_task()) sources.push_back(p.source);
  const auto all = decode_all(small_plm(), &src, default_vocab(), PromptTemplate{}, sources, cfg);
  EXPECT_EQ(all, decode_all(small_plm(), &src, default_vocab(), PromptTemplate{}, sources, cfg));
  ASSERT_EQ(all.size(), sources.size());
  for (std::size_t i = 0; i < sources.size(); ++i) {
    EXPECT_EQ(all[i], decode(enc, &src, default_vocab(), PromptTemplate{}, sources[i], cfg));
  }
}

TEST(LambdaModeTest, Names) {
  EXPECT_EQ(parse_lambda_mode("gu"), LambdaMode::kGradualUnrolling);
  EXPECT_EQ(parse_lambda_mode("const"), LambdaMode::kConstant);
  EXPECT_THROW(parse_lambda_mode("cosine"), ConfigError);
  EXPECT_EQ(parse_lambda_mode(lambda_mode_name(LambdaMode::kConstant)), LambdaMode::kConstant);
}

}  // namespace
}  // namespace pema
