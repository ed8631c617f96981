#ifndef PEMA_CORPUS_H
#define PEMA_CORPUS_H

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "pema/numerics.h"

namespace pema {

inline constexpr TokenId kPad = 0;
inline constexpr TokenId kBos = 1;
inline constexpr TokenId kEos = 2;
inline constexpr TokenId kUnk = 3;
inline constexpr TokenId kFirstContentId = 4;

// Closed whitespace vocabulary. Ids 0-3 are PAD, BOS, EOS, UNK.
class Vocab {
 public:
  // `content` must be distinct and must not repeat a reserved spelling.
  explicit Vocab(std::vector<std::string> content);

  std::size_t size() const { return tokens_.size(); }
  std::size_t content_size() const { return tokens_.size() - kFirstContentId; }

  std::optional<TokenId> find(std::string_view token) const;
  TokenId lookup(std::string_view token) const;  // UNK when absent
  const std::string& token(TokenId id) const;
  const std::vector<std::string>& tokens() const { return tokens_; }

  friend bool operator==(const Vocab& a, const Vocab& b) { return a.tokens_ == b.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> ids_;
};

// 64 content tokens: prompt words, plain words, formal capitalizations,
// informal contractions and all-caps forms, and the foreign cipher words.
const Vocab& default_vocab();

std::vector<TokenId> tokenize(const Vocab& vocab, std::string_view text);
std::string detokenize(const Vocab& vocab, std::span<const TokenId> ids);

struct ParallelPair {
  std::uint32_t id = 0;
  std::vector<TokenId> source;
  std::vector<TokenId> target;

  friend bool operator==(const ParallelPair&, const ParallelPair&) = default;
};

enum class Task { kCipher, kFormalize };

Task parse_task(std::string_view name);
std::string_view task_name(Task task);

// Seeded permutation of the content vocabulary used by the cipher task. Each
// plain word is paired with one foreign word and the pairing is applied in
// both directions; every other token maps to itself.
class CipherKey {
 public:
  CipherKey(const Vocab& vocab, std::uint64_t key_seed);
  // Explicit permutation over all vocabulary ids (reserved ids must be fixed).
  explicit CipherKey(std::vector<TokenId> permutation);

  TokenId map(TokenId id) const { return forward_.at(id); }
  TokenId unmap(TokenId id) const { return inverse_.at(id); }

  // Reverse word order, then map every token.
  std::vector<TokenId> encode(std::span<const TokenId> source) const;
  std::vector<TokenId> decode(std::span<const TokenId> target) const;

  const std::vector<TokenId>& permutation() const { return forward_; }

 private:
  std::vector<TokenId> forward_;
  std::vector<TokenId> inverse_;
};

inline constexpr std::uint64_t kDefaultCipherKey = 0x70656d61;

struct CorpusOptions {
  std::uint64_t cipher_key = kDefaultCipherKey;
};

// Deterministic synthetic corpus; a pure function of its arguments.
std::vector<ParallelPair> gen_parallel(Task task, std::size_t n, std::uint64_t seed,
                                       const Vocab& vocab, const CorpusOptions& options = {});

// The formalize rewrite: expand contractions, lowercase all-caps words,
// capitalize the sentence start.
std::vector<TokenId> formalize(const Vocab& vocab, std::span<const TokenId> source);

struct CorpusSplit {
  std::vector<ParallelPair> train;
  std::vector<ParallelPair> valid;
  std::vector<ParallelPair> test;
};

// 80/10/10 by position in pair-id order.
CorpusSplit split_corpus(std::span<const ParallelPair> pairs);

// One pair per line, "source<TAB>target".
void write_corpus(const std::string& path, const Vocab& vocab,
                  std::span<const ParallelPair> pairs);
std::vector<ParallelPair> read_corpus(const std::string& path, const Vocab& vocab);

struct PromptTemplate {
  std::string instruction = "rewrite";
  std::string source_cue = "in:";
  std::string target_cue = "out:";
};

struct Prompt {
  std::vector<TokenId> tokens;       // BOS + instruction + cue + source + cue
  std::size_t source_length = 0;     // SL for the unrolling schedule
};

Prompt assemble_prompt(const Vocab& vocab, const PromptTemplate& tmpl,
                       std::span<const TokenId> source);

// The same prompt as text, e.g. "<bos> rewrite in: we go out:".
std::string render_prompt(const Vocab& vocab, const PromptTemplate& tmpl,
                          std::span<const TokenId> source);

}  // namespace pema

#endif  // PEMA_CORPUS_H
