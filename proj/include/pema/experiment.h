#ifndef PEMA_EXPERIMENT_H
#define PEMA_EXPERIMENT_H

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "pema/adapter.h"
#include "pema/corpus.h"
#include "pema/decoding.h"
#include "pema/evaluation.h"
#include "pema/external_memory.h"
#include "pema/knn_lm.h"
#include "pema/toy_plm.h"

namespace pema {

// Owner-side pretraining data: a formalize majority and a cipher minority
// under one shared prompt template. The naive PLM therefore leans towards
// formalize on an ambiguous source, and the cipher behaviour has to be
// switched on by the adapter.
struct PretrainConfig {
  std::size_t formalize_pairs = 1600;
  std::size_t cipher_pairs = 400;
  std::uint64_t seed = 5;
  CorpusOptions corpus{};
};

std::vector<ParallelPair> pretraining_corpus(const Vocab& vocab, const PretrainConfig& config);

struct EvalResult {
  BleuScore bleu;
  double perplexity = 0.0;  // generated continuations scored by the PLM
  std::vector<std::vector<TokenId>> hypotheses;
};

// Greedy decoding of every eval source, BLEU against the single reference,
// and prompt-conditioned perplexity of the output (plus EOS when the decoder
// stopped on it) under the PLM itself.
EvalResult evaluate(const ToyPLM& plm, const NextTokenSource* source, const Vocab& vocab,
                    const PromptTemplate& tmpl, std::span<const ParallelPair> eval,
                    const DecodeConfig& config);

enum class SweepAxis { kLambdaMax, kKappa };

SweepAxis parse_sweep_axis(std::string_view name);
std::string_view sweep_axis_name(SweepAxis axis);

struct SweepRow {
  double value = 0.0;
  std::vector<double> metrics;  // aligned with SweepReport::metric_names
};

struct SweepReport {
  SweepAxis axis = SweepAxis::kKappa;
  std::vector<std::string> metric_names;
  std::vector<SweepRow> rows;  // ascending by value
};

// Sorted copy; throws ConfigError when empty or a value is outside [0, 1].
std::vector<double> checked_grid(std::span<const double> grid);

// Phase 1 once, then phase 2 per cell with seed = base seed + cell index.
// Columns: bleu, ppl, l_rct, l_pd.
SweepReport sweep_kappa(const ToyPLM& plm, const ExternalMemory& memory, const Vocab& vocab,
                        const PromptTemplate& tmpl, std::span<const ParallelPair> eval,
                        std::span<const double> grid, const TrainConfig& train,
                        const DecodeConfig& decode);

// One adapter, every cell decoded with GU and with a constant lambda.
// Columns: bleu_gu, ppl_gu, bleu_const, ppl_const.
SweepReport sweep_lambda(const ToyPLM& plm, const AdapterWeights& adapter, const Vocab& vocab,
                         const PromptTemplate& tmpl, std::span<const ParallelPair> eval,
                         std::span<const double> grid, const DecodeConfig& decode);

// `header` lines are the resolved run configuration; they open the table as
// "# key = value" lines and the CSV as comment lines.
void write_table(std::ostream& out, const SweepReport& report,
                 std::span<const std::string> header);
void write_csv(std::ostream& out, const SweepReport& report, std::span<const std::string> header);

struct LatencyRow {
  Method method = Method::kNaive;
  std::string stage;  // "train-step" or "decode-token"
  double mean_ms = 0.0;
  double variance_ms2 = 0.0;
  std::uint64_t flops = 0;  // analytic, per token
};

struct LatencyOptions {
  std::size_t trials = 10;
  std::size_t batch = 64;  // tokens per training step
  KNNConfig knn{};
  std::uint64_t seed = 123;
};

// Wall-clock timings over `trials` runs. Training compares one full
// fine-tuning step of the PLM against one adapter step on the same batch of
// positions; decoding times a single next-token distribution per method.
std::vector<LatencyRow> bench_latency(const ToyPLM& plm, const ExternalMemory& memory,
                                      const AdapterWeights& adapter, const Vocab& vocab,
                                      const PromptTemplate& tmpl,
                                      std::span<const ParallelPair> pairs,
                                      const LatencyOptions& options);

void write_latency_table(std::ostream& out, std::span<const LatencyRow> rows,
                         std::span<const std::string> header);

}  // namespace pema

#endif  // PEMA_EXPERIMENT_H
