#include "pema/evaluation.h"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <map>
#include <sstream>

#include "pema/errors.h"

namespace pema {

namespace {

using NGramCounts = std::map<std::vector<std::string>, std::size_t>;

NGramCounts count_ngrams(const Sentence& s, std::size_t n) {
  NGramCounts counts;
  if (s.size() < n) return counts;
  for (std::size_t i = 0; i + n <= s.size(); ++i) {
    ++counts[std::vector<std::string>(s.begin() + static_cast<std::ptrdiff_t>(i),
                                      s.begin() + static_cast<std::ptrdiff_t>(i + n))];
  }
  return counts;
}

std::string strip_punct(std::string_view w) {
  std::size_t b = 0;
  std::size_t e = w.size();
  while (b < e && std::ispunct(static_cast<unsigned char>(w[b]))) ++b;
  while (e > b && std::ispunct(static_cast<unsigned char>(w[e - 1]))) --e;
  return std::string(w.substr(b, e - b));
}

std::string to_lower(std::string s) {
  for (char& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

}  // namespace

BleuScore bleu(std::span<const Sentence> hypotheses,
               std::span<const std::vector<Sentence>> references) {
  if (hypotheses.size() != references.size()) {
    throw InputError("BLEU needs one reference list per hypothesis (" +
                     std::to_string(hypotheses.size()) + " vs " +
                     std::to_string(references.size()) + ")");
  }
  std::array<std::size_t, 4> matches{};
  std::array<std::size_t, 4> totals{};
  BleuScore out;
  for (std::size_t s = 0; s < hypotheses.size(); ++s) {
    const Sentence& hyp = hypotheses[s];
    const auto& refs = references[s];
    if (refs.empty()) throw InputError("BLEU reference list is empty");

    // Closest reference length, shorter on ties.
    std::size_t best_len = refs.front().size();
    for (const auto& r : refs) {
      const auto diff = [&](std::size_t len) {
        return len > hyp.size() ? len - hyp.size() : hyp.size() - len;
      };
      if (diff(r.size()) < diff(best_len) ||
          (diff(r.size()) == diff(best_len) && r.size() < best_len)) {
        best_len = r.size();
      }
    }
    out.hypothesis_length += hyp.size();
    out.reference_length += best_len;

    for (std::size_t n = 1; n <= 4; ++n) {
      const auto hyp_counts = count_ngrams(hyp, n);
      NGramCounts max_ref;
      for (const auto& r : refs) {
        for (const auto& [gram, c] : count_ngrams(r, n)) max_ref[gram] = std::max(max_ref[gram], c);
      }
      for (const auto& [gram, c] : hyp_counts) {
        const auto it = max_ref.find(gram);
        if (it != max_ref.end()) matches[n - 1] += std::min(c, it->second);
      }
      totals[n - 1] += hyp.size() >= n ? hyp.size() - n + 1 : 0;
    }
  }

  if (out.hypothesis_length == 0) return out;

  double log_sum = 0.0;
  for (std::size_t n = 0; n < 4; ++n) {
    const double total = totals[n] == 0 ? 1.0 : static_cast<double>(totals[n]);
    out.precisions[n] = matches[n] == 0 ? kBleuEpsilon / total
                                        : static_cast<double>(matches[n]) / total;
    log_sum += std::log(out.precisions[n]);
  }
  const double c = static_cast<double>(out.hypothesis_length);
  const double r = static_cast<double>(out.reference_length);
  out.brevity_penalty = c >= r ? 1.0 : std::exp(1.0 - r / c);
  out.score = 100.0 * out.brevity_penalty * std::exp(log_sum / 4.0);
  out.score = std::clamp(out.score, 0.0, 100.0);
  return out;
}

std::vector<Sentence> to_sentences(const Vocab& vocab,
                                   std::span<const std::vector<TokenId>> sequences) {
  std::vector<Sentence> out;
  out.reserve(sequences.size());
  for (const auto& seq : sequences) {
    Sentence s;
    for (TokenId t : seq) s.push_back(vocab.token(t));
    out.push_back(std::move(s));
  }
  return out;
}

NextTokenModel plm_scorer(const ToyPLM& plm) {
  return [&plm](std::span<const TokenId> context) { return plm.encode(context).next_token; };
}

double perplexity(const NextTokenModel& model, std::span<const ScoredSequence> sequences) {
  if (sequences.empty()) throw InputError("perplexity of an empty set of sequences");
  double nll = 0.0;
  std::size_t count = 0;
  for (const auto& seq : sequences) {
    std::vector<TokenId> context = seq.context;
    for (TokenId t : seq.continuation) {
      nll += cross_entropy(model(context), t);
      context.push_back(t);
      ++count;
    }
  }
  if (count == 0) throw InputError("perplexity needs at least one scored token");
  return std::exp(nll / static_cast<double>(count));
}

double perplexity(const NextTokenModel& model, std::span<const std::vector<TokenId>> sequences) {
  std::vector<ScoredSequence> scored;
  scored.reserve(sequences.size());
  for (const auto& s : sequences) scored.push_back({{kBos}, s});
  return perplexity(model, scored);
}

Method parse_method(std::string_view name) {
  if (name == "naive") return Method::kNaive;
  if (name == "adapter" || name == "pema") return Method::kAdapter;
  if (name == "knn") return Method::kKnn;
  throw ConfigError("unknown method '" + std::string(name) + "' (expected naive, adapter or knn)");
}

std::string_view method_name(Method method) {
  switch (method) {
    case Method::kNaive:
      return "naive";
    case Method::kAdapter:
      return "adapter";
    default:
      return "knn";
  }
}

FlopsReport flops_per_token(const ModelDims& dims, Method method) {
  FlopsReport r;
  r.dims = dims;
  r.method = method;
  const std::uint64_t window = dims.context * dims.d;
  r.plm_forward = window + 2 * dims.hidden * window + 2 * dims.d * dims.hidden + 2 * dims.v * dims.d;
  r.adapter_delta = 4 * dims.d * dims.r;
  r.knn_delta = 3 * dims.d * dims.memory_records;
  r.total = r.plm_forward;
  if (method == Method::kAdapter) r.total += r.adapter_delta;
  if (method == Method::kKnn) r.total += r.knn_delta;
  r.plm_train_step = 3 * r.plm_forward;
  r.adapter_train_step = 16 * dims.d * dims.r + 4 * dims.v * dims.d;
  return r;
}

SlangDictionary load_slang_dictionary(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot read slang dictionary '" + path + "'");
  SlangDictionary dict;
  std::string line;
  while (std::getline(in, line)) {
    std::istringstream is(line);
    std::string term;
    if (is >> term) dict.insert(to_lower(term));
  }
  return dict;
}

PatternReport count_informal_patterns(std::span<const std::string> sentences,
                                      const SlangDictionary* slang) {
  PatternReport report;
  for (const auto& sentence : sentences) {
    std::istringstream is(sentence);
    std::string raw;
    std::string previous;
    bool have_previous = false;
    while (is >> raw) {
      const std::string word = strip_punct(raw);
      if (word.empty()) continue;
      int letters = 0;
      bool all_upper = true;
      for (char c : word) {
        if (std::isalpha(static_cast<unsigned char>(c))) {
          ++letters;
          if (!std::isupper(static_cast<unsigned char>(c))) all_upper = false;
        }
      }
      if (letters >= 2 && all_upper) ++report.all_capital;
      if (have_previous && word == previous) ++report.redundant;
      if (slang && slang->contains(to_lower(word))) ++report.slang;
      previous = word;
      have_previous = true;
    }
    const auto first = std::find_if(sentence.begin(), sentence.end(),
                                    [](char c) { return std::isalpha(static_cast<unsigned char>(c)); });
    if (first != sentence.end() && std::islower(static_cast<unsigned char>(*first))) {
      ++report.non_capital_start;
    }
  }
  return report;
}

}  // namespace pema
