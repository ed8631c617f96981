#ifndef PEMA_EVALUATION_H
#define PEMA_EVALUATION_H

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

#include "pema/corpus.h"
#include "pema/numerics.h"
#include "pema/toy_plm.h"

namespace pema {

using Sentence = std::vector<std::string>;

inline constexpr double kBleuEpsilon = 1e-9;

struct BleuScore {
  double score = 0.0;  // [0, 100]
  std::array<double, 4> precisions{};
  double brevity_penalty = 0.0;
  std::size_t hypothesis_length = 0;
  std::size_t reference_length = 0;
};

// Corpus BLEU-4 with clipped n-gram counts, closest-reference brevity
// penalty, and add-epsilon smoothing: a zero match count for order n gives
// precision epsilon / total_n.
BleuScore bleu(std::span<const Sentence> hypotheses,
               std::span<const std::vector<Sentence>> references);

std::vector<Sentence> to_sentences(const Vocab& vocab,
                                   std::span<const std::vector<TokenId>> sequences);

// A next-token model: context in, distribution out.
using NextTokenModel = std::function<TokenDistribution(std::span<const TokenId>)>;

NextTokenModel plm_scorer(const ToyPLM& plm);

struct ScoredSequence {
  std::vector<TokenId> context;       // conditioning prefix, not scored
  std::vector<TokenId> continuation;  // every token here is scored
};

// exp(mean negative log-likelihood per scored token).
double perplexity(const NextTokenModel& model, std::span<const ScoredSequence> sequences);
// Plain sequences, each scored after a lone BOS.
double perplexity(const NextTokenModel& model, std::span<const std::vector<TokenId>> sequences);

enum class Method { kNaive, kAdapter, kKnn };

Method parse_method(std::string_view name);
std::string_view method_name(Method method);

struct ModelDims {
  std::uint64_t d = 64;
  std::uint64_t r = 16;
  std::uint64_t v = 68;
  std::uint64_t context = 8;
  std::uint64_t hidden = 128;
  std::uint64_t memory_records = 0;
};

// Analytic per-token FLOPs; a multiply-add counts as 2.
struct FlopsReport {
  ModelDims dims;
  Method method = Method::kNaive;
  std::uint64_t plm_forward = 0;     // window mixing + w1 + w2 + head
  std::uint64_t adapter_delta = 0;   // A then B_pd: 4 d r
  std::uint64_t knn_delta = 0;       // brute-force scan: 3 d N
  std::uint64_t total = 0;           // plm_forward plus the method's delta
  std::uint64_t plm_train_step = 0;      // 3 x plm_forward
  std::uint64_t adapter_train_step = 0;  // 16 d r + 4 v d
};

FlopsReport flops_per_token(const ModelDims& dims, Method method);

struct PatternReport {
  std::size_t slang = 0;
  std::size_t all_capital = 0;
  std::size_t redundant = 0;
  std::size_t non_capital_start = 0;

  friend bool operator==(const PatternReport&, const PatternReport&) = default;
};

using SlangDictionary = std::unordered_set<std::string>;

// One term per line; matching is case-insensitive. Throws InputError when
// the file cannot be read.
SlangDictionary load_slang_dictionary(const std::string& path);

// Each string is one sentence. Words are whitespace-split with surrounding
// punctuation stripped.
//   all-capital: >= 2 letters, all uppercase
//   redundant: each word equal (case-sensitive) to the word before it
//   non-capital start: first letter of the sentence is lowercase
//   slang: words present in the dictionary (0 without one)
PatternReport count_informal_patterns(std::span<const std::string> sentences,
                                      const SlangDictionary* slang = nullptr);

}  // namespace pema

#endif  // PEMA_EVALUATION_H
