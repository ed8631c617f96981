#include "pema/corpus.h"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <sstream>

#include "pema/errors.h"
#include "pema/random.h"

namespace pema {

namespace {

const std::vector<std::string> kReserved = {"<pad>", "<bos>", "<eos>", "<unk>"};

const std::vector<std::string> kPromptWords = {"rewrite", "in:", "out:"};
const std::vector<std::string> kPronouns = {"i", "you", "we", "they"};
const std::vector<std::string> kVerbs = {"go", "see", "like", "want", "eat", "have"};
const std::vector<std::string> kAux = {"will", "can", "do"};
const std::vector<std::string> kDeterminers = {"the", "a"};
const std::vector<std::string> kNouns = {"dog", "cat", "home", "food"};
const std::vector<std::string> kAdverbs = {"now", "here"};
const std::vector<std::string> kCapitalized = {"I", "You", "We", "They"};
const std::vector<std::string> kContractions = {"wont", "cant", "dont"};
const std::vector<std::string> kAllCaps = {"WONT", "CANT", "DONT", "GO",   "SEE",
                                           "LIKE", "WANT", "NOW",  "HOME", "FOOD"};
const std::vector<std::string> kForeign = {"ak", "bo", "ce", "di", "ef", "gu", "hi", "jo",
                                           "ku", "le", "mo", "nu", "op", "qi", "ru", "sa",
                                           "tu", "uv", "wa", "xe", "yo", "zu"};

// Plain words, in the order they are paired with foreign words.
std::vector<std::string> plain_words() {
  std::vector<std::string> out;
  for (const auto* group : {&kPronouns, &kVerbs, &kAux, &kDeterminers, &kNouns, &kAdverbs}) {
    out.insert(out.end(), group->begin(), group->end());
  }
  out.push_back("not");
  return out;
}

std::string lower(std::string_view s) {
  std::string out(s);
  for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

bool is_all_caps(std::string_view s) {
  int letters = 0;
  for (char c : s) {
    if (std::isalpha(static_cast<unsigned char>(c))) {
      if (!std::isupper(static_cast<unsigned char>(c))) return false;
      ++letters;
    }
  }
  return letters >= 2;
}

const std::string& pick(Rng& rng, const std::vector<std::string>& words) {
  return words[rng.below(words.size())];
}

TokenId require(const Vocab& vocab, std::string_view word) {
  const auto id = vocab.find(word);
  if (!id) {
    throw ConfigError("vocabulary lacks the corpus word '" + std::string(word) + "'");
  }
  return *id;
}

std::vector<std::string> cipher_sentence(Rng& rng) {
  std::vector<std::string> words{pick(rng, kPronouns)};
  switch (rng.below(4)) {
    case 0:
      words.push_back(pick(rng, kVerbs));
      words.push_back(pick(rng, kNouns));
      break;
    case 1:
      words.push_back(pick(rng, kVerbs));
      words.push_back(pick(rng, kDeterminers));
      words.push_back(pick(rng, kNouns));
      break;
    case 2:
      words.push_back(pick(rng, kVerbs));
      words.push_back(pick(rng, kNouns));
      words.push_back(pick(rng, kAdverbs));
      break;
    default:
      words.push_back(pick(rng, kAux));
      words.push_back(pick(rng, kVerbs));
      words.push_back(pick(rng, kNouns));
      break;
  }
  return words;
}

std::vector<std::string> informal_sentence(Rng& rng) {
  std::vector<std::string> words{pick(rng, kPronouns)};
  switch (rng.below(4)) {
    case 0:
      break;
    case 1:
      words.push_back(pick(rng, kAux));
      break;
    case 2:
      words.push_back(pick(rng, kContractions));
      break;
    default:
      words.push_back(pick(rng, kAux));
      words.push_back("not");
      break;
  }
  words.push_back(pick(rng, kVerbs));
  if (words.size() <= 2 && rng.below(2) == 0) words.push_back(pick(rng, kDeterminers));
  words.push_back(pick(rng, kNouns));
  if (words.size() <= 4 && rng.below(3) == 0) words.push_back(pick(rng, kAdverbs));
  for (auto& w : words) {
    std::string upper = w;
    for (char& c : upper) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
    const bool has_caps = std::find(kAllCaps.begin(), kAllCaps.end(), upper) != kAllCaps.end();
    if (has_caps && rng.below(10) < 3) w = upper;
  }
  return words;
}

}  // namespace

Vocab::Vocab(std::vector<std::string> content) {
  tokens_ = kReserved;
  tokens_.insert(tokens_.end(), content.begin(), content.end());
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    const auto& t = tokens_[i];
    if (t.empty() || t.find_first_of(" \t\n\r") != std::string::npos) {
      throw ConfigError("vocabulary token '" + t + "' is empty or contains whitespace");
    }
    if (!ids_.emplace(t, static_cast<TokenId>(i)).second) {
      throw ConfigError("duplicate vocabulary token '" + t + "'");
    }
  }
}

std::optional<TokenId> Vocab::find(std::string_view token) const {
  const auto it = ids_.find(std::string(token));
  if (it == ids_.end()) return std::nullopt;
  return it->second;
}

TokenId Vocab::lookup(std::string_view token) const { return find(token).value_or(kUnk); }

const std::string& Vocab::token(TokenId id) const {
  if (id >= tokens_.size()) {
    throw IndexError("token id " + std::to_string(id) + " outside vocabulary of size " +
                     std::to_string(tokens_.size()));
  }
  return tokens_[id];
}

const Vocab& default_vocab() {
  static const Vocab vocab = [] {
    std::vector<std::string> content = kPromptWords;
    for (const auto& w : plain_words()) content.push_back(w);
    for (const auto* group : {&kCapitalized, &kContractions, &kAllCaps, &kForeign}) {
      content.insert(content.end(), group->begin(), group->end());
    }
    return Vocab(std::move(content));
  }();
  return vocab;
}

std::vector<TokenId> tokenize(const Vocab& vocab, std::string_view text) {
  std::vector<TokenId> ids;
  std::istringstream is{std::string(text)};
  std::string word;
  while (is >> word) ids.push_back(vocab.lookup(word));
  return ids;
}

std::string detokenize(const Vocab& vocab, std::span<const TokenId> ids) {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i > 0) out += ' ';
    out += vocab.token(ids[i]);
  }
  return out;
}

Task parse_task(std::string_view name) {
  if (name == "cipher") return Task::kCipher;
  if (name == "formalize") return Task::kFormalize;
  throw ConfigError("unknown task '" + std::string(name) + "' (expected cipher or formalize)");
}

std::string_view task_name(Task task) {
  return task == Task::kCipher ? "cipher" : "formalize";
}

CipherKey::CipherKey(const Vocab& vocab, std::uint64_t key_seed) {
  forward_.resize(vocab.size());
  for (std::size_t i = 0; i < forward_.size(); ++i) forward_[i] = static_cast<TokenId>(i);

  std::vector<TokenId> plain;
  for (const auto& w : plain_words()) plain.push_back(require(vocab, w));
  std::vector<TokenId> foreign;
  for (const auto& w : kForeign) foreign.push_back(require(vocab, w));

  Rng rng(key_seed);
  rng.shuffle(std::span<TokenId>(foreign));
  for (std::size_t i = 0; i < plain.size(); ++i) {
    forward_[plain[i]] = foreign[i];
    forward_[foreign[i]] = plain[i];
  }
  inverse_.resize(forward_.size());
  for (std::size_t i = 0; i < forward_.size(); ++i) inverse_[forward_[i]] = static_cast<TokenId>(i);
}

CipherKey::CipherKey(std::vector<TokenId> permutation) : forward_(std::move(permutation)) {
  inverse_.assign(forward_.size(), 0);
  std::vector<bool> seen(forward_.size(), false);
  for (std::size_t i = 0; i < forward_.size(); ++i) {
    const TokenId t = forward_[i];
    if (t >= forward_.size() || seen[t]) throw ConfigError("cipher key is not a permutation");
    if (i < kFirstContentId && t != i) throw ConfigError("cipher key must fix reserved ids");
    seen[t] = true;
    inverse_[t] = static_cast<TokenId>(i);
  }
}

std::vector<TokenId> CipherKey::encode(std::span<const TokenId> source) const {
  std::vector<TokenId> out;
  out.reserve(source.size());
  for (auto it = source.rbegin(); it != source.rend(); ++it) out.push_back(map(*it));
  return out;
}

std::vector<TokenId> CipherKey::decode(std::span<const TokenId> target) const {
  std::vector<TokenId> out;
  out.reserve(target.size());
  for (auto it = target.rbegin(); it != target.rend(); ++it) out.push_back(unmap(*it));
  return out;
}

std::vector<TokenId> formalize(const Vocab& vocab, std::span<const TokenId> source) {
  std::vector<std::string> words;
  for (TokenId id : source) {
    const std::string& w = vocab.token(id);
    const std::string lw = lower(w);
    if (lw == "wont") {
      words.insert(words.end(), {"will", "not"});
    } else if (lw == "cant") {
      words.insert(words.end(), {"can", "not"});
    } else if (lw == "dont") {
      words.insert(words.end(), {"do", "not"});
    } else if (is_all_caps(w) && vocab.find(lw)) {
      words.push_back(lw);
    } else {
      words.push_back(w);
    }
  }
  if (!words.empty()) {
    std::string cap = words.front();
    cap[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(cap[0])));
    if (vocab.find(cap)) words.front() = cap;
  }
  std::vector<TokenId> out;
  out.reserve(words.size());
  for (const auto& w : words) out.push_back(vocab.lookup(w));
  return out;
}

std::vector<ParallelPair> gen_parallel(Task task, std::size_t n, std::uint64_t seed,
                                       const Vocab& vocab, const CorpusOptions& options) {
  if (n == 0) throw InputError("corpus size must be at least 1");
  Rng rng(seed);
  std::optional<CipherKey> key;
  if (task == Task::kCipher) key.emplace(vocab, options.cipher_key);

  std::vector<ParallelPair> pairs;
  pairs.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    ParallelPair pair;
    pair.id = static_cast<std::uint32_t>(i);
    const auto words = task == Task::kCipher ? cipher_sentence(rng) : informal_sentence(rng);
    for (const auto& w : words) pair.source.push_back(require(vocab, w));
    pair.target = task == Task::kCipher ? key->encode(pair.source) : formalize(vocab, pair.source);
    pairs.push_back(std::move(pair));
  }
  return pairs;
}

CorpusSplit split_corpus(std::span<const ParallelPair> pairs) {
  CorpusSplit split;
  const std::size_t n = pairs.size();
  const std::size_t n_train = n * 8 / 10;
  const std::size_t n_valid = n / 10;
  for (std::size_t i = 0; i < n; ++i) {
    if (i < n_train) {
      split.train.push_back(pairs[i]);
    } else if (i < n_train + n_valid) {
      split.valid.push_back(pairs[i]);
    } else {
      split.test.push_back(pairs[i]);
    }
  }
  return split;
}

void write_corpus(const std::string& path, const Vocab& vocab,
                  std::span<const ParallelPair> pairs) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InputError("cannot open '" + path + "' for writing");
  for (const auto& p : pairs) {
    out << detokenize(vocab, p.source) << '\t' << detokenize(vocab, p.target) << '\n';
  }
  if (!out) throw InputError("write to '" + path + "' failed");
}

std::vector<ParallelPair> read_corpus(const std::string& path, const Vocab& vocab) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open corpus '" + path + "'");
  std::vector<ParallelPair> pairs;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) {
      throw InputError(path + ":" + std::to_string(line_no) + ": missing tab separator");
    }
    ParallelPair pair;
    pair.id = static_cast<std::uint32_t>(pairs.size());
    pair.source = tokenize(vocab, std::string_view(line).substr(0, tab));
    pair.target = tokenize(vocab, std::string_view(line).substr(tab + 1));
    if (pair.source.empty()) {
      throw InputError(path + ":" + std::to_string(line_no) + ": empty source");
    }
    pairs.push_back(std::move(pair));
  }
  return pairs;
}

Prompt assemble_prompt(const Vocab& vocab, const PromptTemplate& tmpl,
                       std::span<const TokenId> source) {
  if (source.empty()) throw InputError("cannot build a prompt for an empty source");
  Prompt prompt;
  prompt.tokens.push_back(kBos);
  for (const auto& part : {tmpl.instruction, tmpl.source_cue}) {
    const auto ids = tokenize(vocab, part);
    prompt.tokens.insert(prompt.tokens.end(), ids.begin(), ids.end());
  }
  prompt.tokens.insert(prompt.tokens.end(), source.begin(), source.end());
  const auto cue = tokenize(vocab, tmpl.target_cue);
  prompt.tokens.insert(prompt.tokens.end(), cue.begin(), cue.end());
  prompt.source_length = source.size();
  return prompt;
}

std::string render_prompt(const Vocab& vocab, const PromptTemplate& tmpl,
                          std::span<const TokenId> source) {
  if (source.empty()) throw InputError("cannot build a prompt for an empty source");
  std::string out = vocab.token(kBos);
  for (const auto& part : {tmpl.instruction, tmpl.source_cue}) {
    if (!tokenize(vocab, part).empty()) out += " " + part;
  }
  out += " " + detokenize(vocab, source);
  if (!tokenize(vocab, tmpl.target_cue).empty()) out += " " + tmpl.target_cue;
  return out;
}

}  // namespace pema
