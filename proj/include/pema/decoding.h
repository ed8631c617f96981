#ifndef PEMA_DECODING_H
#define PEMA_DECODING_H

#include <cstddef>
#include <span>
#include <string_view>
#include <vector>

#include "pema/adapter.h"
#include "pema/corpus.h"
#include "pema/numerics.h"
#include "pema/toy_plm.h"

namespace pema {

// Gradual Unrolling. CS starts at lambda_max and drops by SS = lambda_max / SL
// per emitted token, clamped at zero; each token is interpolated with CS^2.
class GUSchedule {
 public:
  GUSchedule(double lambda_max, std::size_t source_length);

  double lambda_max() const { return lambda_max_; }
  std::size_t source_length() const { return source_length_; }
  double step_size() const { return lambda_max_ / static_cast<double>(source_length_); }
  double current_step() const;

  // lambda for the current token, then advance CS.
  double next();

  // Sensitivity hook: decrement CS before the first use instead of after.
  void set_decrement_first(bool on) { decrement_first_ = on; }

 private:
  double lambda_max_;
  std::size_t source_length_;
  std::size_t emitted_ = 0;
  bool decrement_first_ = false;
};

// lambda * p_adapt + (1 - lambda) * p_lm.
TokenDistribution interpolate(const TokenDistribution& p_adapt, const TokenDistribution& p_lm,
                              double lambda);

enum class LambdaMode { kConstant, kGradualUnrolling };

LambdaMode parse_lambda_mode(std::string_view name);
std::string_view lambda_mode_name(LambdaMode mode);

struct DecodeConfig {
  LambdaMode mode = LambdaMode::kGradualUnrolling;
  double lambda_max = 0.8;
  std::size_t max_length = 32;
  TokenId eos = kEos;
  bool decrement_first = false;  // test hook, see GUSchedule

  void validate() const;
};

// The distribution interpolated against P_LM: the adapter or the kNN-LM.
class NextTokenSource {
 public:
  virtual ~NextTokenSource() = default;
  virtual TokenDistribution distribution(std::span<const double> representation) const = 0;
};

class PemaSource final : public NextTokenSource {
 public:
  PemaSource(const AdapterWeights& adapter, const Matrix& head) : adapter_(adapter), head_(head) {}
  TokenDistribution distribution(std::span<const double> representation) const override {
    return pema_dist(adapter_, representation, head_);
  }

 private:
  const AdapterWeights& adapter_;
  const Matrix& head_;
};

// Greedy choice over the interpolated distribution: the most probable content
// token (lowest id on ties), or EOS when it is strictly more probable than
// every content token. PAD, BOS and UNK are never emitted.
TokenId choose_token(const TokenDistribution& dist, TokenId eos = kEos);

struct DecodeTrace {
  std::vector<double> lambdas;
};

// Greedy generation from assemble_prompt(source). `source` may be null for
// plain PLM decoding. Returns the emitted tokens without the EOS.
std::vector<TokenId> decode(ContextEncoder& encoder, const NextTokenSource* adapt_source,
                            const Vocab& vocab, const PromptTemplate& tmpl,
                            std::span<const TokenId> source, const DecodeConfig& config,
                            DecodeTrace* trace = nullptr);

// decode() over many sources with a local PLM; sentences run in OpenMP
// workers and results keep input order.
std::vector<std::vector<TokenId>> decode_all(const ToyPLM& plm,
                                             const NextTokenSource* adapt_source,
                                             const Vocab& vocab, const PromptTemplate& tmpl,
                                             std::span<const std::vector<TokenId>> sources,
                                             const DecodeConfig& config);

}  // namespace pema

#endif  // PEMA_DECODING_H
