#include "pema/decoding.h"

#include <algorithm>
#include <cstdint>

#include "pema/errors.h"

namespace pema {

namespace {

void check_lambda(double lambda, std::string_view what) {
  if (!(lambda >= 0.0 && lambda <= 1.0)) {
    throw ConfigError(std::string(what) + " must lie in [0, 1], got " + std::to_string(lambda));
  }
}

}  // namespace

GUSchedule::GUSchedule(double lambda_max, std::size_t source_length)
    : lambda_max_(lambda_max), source_length_(source_length) {
  check_lambda(lambda_max, "lambda_max");
  if (source_length == 0) throw ConfigError("Gradual Unrolling needs a source length of at least 1");
}

double GUSchedule::current_step() const {
  const std::size_t t = emitted_ + (decrement_first_ ? 1 : 0);
  if (t >= source_length_) return 0.0;
  if (t == 0) return lambda_max_;
  // lambda_max - t * SS, written so that t == SL lands exactly on zero.
  return lambda_max_ * static_cast<double>(source_length_ - t) /
         static_cast<double>(source_length_);
}

double GUSchedule::next() {
  const double cs = current_step();
  ++emitted_;
  return cs * cs;
}

TokenDistribution interpolate(const TokenDistribution& p_adapt, const TokenDistribution& p_lm,
                              double lambda) {
  check_lambda(lambda, "lambda");
  if (p_adapt.size() != p_lm.size()) {
    throw DimensionError("cannot interpolate distributions of sizes " +
                         std::to_string(p_adapt.size()) + " and " + std::to_string(p_lm.size()));
  }
  std::vector<double> out(p_lm.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = lambda * p_adapt[i] + (1.0 - lambda) * p_lm[i];
  }
  return TokenDistribution(std::move(out));
}

LambdaMode parse_lambda_mode(std::string_view name) {
  if (name == "gu") return LambdaMode::kGradualUnrolling;
  if (name == "const") return LambdaMode::kConstant;
  throw ConfigError("unknown interpolation mode '" + std::string(name) + "' (expected gu or const)");
}

std::string_view lambda_mode_name(LambdaMode mode) {
  return mode == LambdaMode::kGradualUnrolling ? "gu" : "const";
}

void DecodeConfig::validate() const {
  check_lambda(lambda_max, "lambda_max");
  if (max_length == 0) throw ConfigError("max output length must be positive");
}

TokenId choose_token(const TokenDistribution& dist, TokenId eos) {
  if (dist.size() <= kFirstContentId) throw DimensionError("distribution has no content tokens");
  std::size_t best = kFirstContentId;
  for (std::size_t i = kFirstContentId + 1; i < dist.size(); ++i) {
    if (dist[i] > dist[best]) best = i;
  }
  if (eos < dist.size() && dist[eos] > dist[best]) return eos;
  return static_cast<TokenId>(best);
}

std::vector<TokenId> decode(ContextEncoder& encoder, const NextTokenSource* adapt_source,
                            const Vocab& vocab, const PromptTemplate& tmpl,
                            std::span<const TokenId> source, const DecodeConfig& config,
                            DecodeTrace* trace) {
  config.validate();
  auto prompt = assemble_prompt(vocab, tmpl, source);
  GUSchedule schedule(config.lambda_max, prompt.source_length);
  schedule.set_decrement_first(config.decrement_first);

  std::vector<TokenId> context = std::move(prompt.tokens);
  std::vector<TokenId> output;
  while (output.size() < config.max_length) {
    const double lambda =
        config.mode == LambdaMode::kGradualUnrolling ? schedule.next() : config.lambda_max;
    if (trace) trace->lambdas.push_back(lambda);
    EncodeResult enc = encoder.encode(context);
    TokenId next;
    if (adapt_source == nullptr) {
      next = choose_token(enc.next_token, config.eos);
    } else {
      const auto p_adapt = adapt_source->distribution(enc.representation);
      next = choose_token(interpolate(p_adapt, enc.next_token, lambda), config.eos);
    }
    if (next == config.eos) break;
    output.push_back(next);
    context.push_back(next);
  }
  return output;
}

std::vector<std::vector<TokenId>> decode_all(const ToyPLM& plm,
                                             const NextTokenSource* adapt_source,
                                             const Vocab& vocab, const PromptTemplate& tmpl,
                                             std::span<const std::vector<TokenId>> sources,
                                             const DecodeConfig& config) {
  config.validate();
  for (const auto& s : sources) {
    if (s.empty()) throw InputError("cannot decode an empty source");
  }
  std::vector<std::vector<TokenId>> out(sources.size());
  const auto n = static_cast<std::int64_t>(sources.size());
#pragma omp parallel for schedule(dynamic, 4)
  for (std::int64_t i = 0; i < n; ++i) {
    LocalEncoder encoder(plm);
    const auto idx = static_cast<std::size_t>(i);
    out[idx] = decode(encoder, adapt_source, vocab, tmpl, sources[idx], config);
  }
  return out;
}

}  // namespace pema
