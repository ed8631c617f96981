#include "pema/experiment.h"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <iomanip>
#include <ostream>
#include <sstream>

#include "pema/errors.h"
#include "pema/log.h"

namespace pema {

namespace {

template <typename F>
double time_ms(F&& f) {
  const auto t0 = std::chrono::steady_clock::now();
  f();
  const auto t1 = std::chrono::steady_clock::now();
  return std::chrono::duration<double, std::milli>(t1 - t0).count();
}

void mean_variance(const std::vector<double>& xs, double& mean, double& var) {
  mean = 0.0;
  for (double x : xs) mean += x;
  mean /= static_cast<double>(xs.size());
  var = 0.0;
  for (double x : xs) var += (x - mean) * (x - mean);
  var /= static_cast<double>(xs.size() - 1);
}

std::string format_value(double v) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(4) << v;
  return os.str();
}

}  // namespace

std::vector<ParallelPair> pretraining_corpus(const Vocab& vocab, const PretrainConfig& config) {
  std::vector<ParallelPair> out;
  if (config.formalize_pairs > 0) {
    out = gen_parallel(Task::kFormalize, config.formalize_pairs, config.seed, vocab, config.corpus);
  }
  if (config.cipher_pairs > 0) {
    auto cipher = gen_parallel(Task::kCipher, config.cipher_pairs, config.seed + 1, vocab,
                               config.corpus);
    out.insert(out.end(), cipher.begin(), cipher.end());
  }
  if (out.empty()) throw InputError("pretraining corpus is empty");
  for (std::size_t i = 0; i < out.size(); ++i) out[i].id = static_cast<std::uint32_t>(i);
  return out;
}

EvalResult evaluate(const ToyPLM& plm, const NextTokenSource* source, const Vocab& vocab,
                    const PromptTemplate& tmpl, std::span<const ParallelPair> eval,
                    const DecodeConfig& config) {
  if (eval.empty()) throw InputError("evaluation set is empty");
  std::vector<std::vector<TokenId>> sources;
  sources.reserve(eval.size());
  for (const auto& p : eval) sources.push_back(p.source);

  EvalResult result;
  result.hypotheses = decode_all(plm, source, vocab, tmpl, sources, config);

  std::vector<std::vector<TokenId>> refs;
  std::vector<ScoredSequence> scored;
  for (std::size_t i = 0; i < eval.size(); ++i) {
    refs.push_back(eval[i].target);
    ScoredSequence s{assemble_prompt(vocab, tmpl, eval[i].source).tokens, result.hypotheses[i]};
    if (s.continuation.size() < config.max_length) s.continuation.push_back(config.eos);
    scored.push_back(std::move(s));
  }
  const auto hyp_sentences = to_sentences(vocab, result.hypotheses);
  const auto ref_sentences = to_sentences(vocab, refs);
  std::vector<std::vector<Sentence>> ref_lists;
  ref_lists.reserve(ref_sentences.size());
  for (const auto& r : ref_sentences) ref_lists.push_back({r});
  result.bleu = bleu(hyp_sentences, ref_lists);
  result.perplexity = perplexity(plm_scorer(plm), scored);
  return result;
}

SweepAxis parse_sweep_axis(std::string_view name) {
  if (name == "kappa") return SweepAxis::kKappa;
  if (name == "lambda-max" || name == "lambda_max") return SweepAxis::kLambdaMax;
  throw ConfigError("unknown sweep axis '" + std::string(name) + "' (expected kappa or lambda-max)");
}

std::string_view sweep_axis_name(SweepAxis axis) {
  return axis == SweepAxis::kKappa ? "kappa" : "lambda-max";
}

std::vector<double> checked_grid(std::span<const double> grid) {
  if (grid.empty()) throw ConfigError("sweep grid is empty");
  for (double v : grid) {
    if (!(v >= 0.0 && v <= 1.0)) {
      throw ConfigError("sweep grid value " + std::to_string(v) + " is outside [0, 1]");
    }
  }
  std::vector<double> out(grid.begin(), grid.end());
  std::sort(out.begin(), out.end());
  return out;
}

SweepReport sweep_kappa(const ToyPLM& plm, const ExternalMemory& memory, const Vocab& vocab,
                        const PromptTemplate& tmpl, std::span<const ParallelPair> eval,
                        std::span<const double> grid, const TrainConfig& train,
                        const DecodeConfig& decode) {
  const auto values = checked_grid(grid);
  SweepReport report;
  report.axis = SweepAxis::kKappa;
  report.metric_names = {"bleu", "ppl", "l_rct", "l_pd"};

  const auto phase1 = train_phase1(memory, train);
  for (std::size_t cell = 0; cell < values.size(); ++cell) {
    TrainConfig cfg = train;
    cfg.kappa = values[cell];
    cfg.seed = train.seed + cell;
    const auto phase2 = train_phase2(memory, phase1.b_rct, plm.head(), cfg);
    const PemaSource src(phase2.weights, plm.head());
    const auto res = evaluate(plm, &src, vocab, tmpl, eval, decode);
    const auto& last = phase2.report.epochs.back();
    report.rows.push_back({values[cell], {res.bleu.score, res.perplexity, last.rct, last.pd}});
    log::info("kappa " + format_value(values[cell]) + ": bleu " + format_value(res.bleu.score));
  }
  return report;
}

SweepReport sweep_lambda(const ToyPLM& plm, const AdapterWeights& adapter, const Vocab& vocab,
                         const PromptTemplate& tmpl, std::span<const ParallelPair> eval,
                         std::span<const double> grid, const DecodeConfig& decode) {
  const auto values = checked_grid(grid);
  SweepReport report;
  report.axis = SweepAxis::kLambdaMax;
  report.metric_names = {"bleu_gu", "ppl_gu", "bleu_const", "ppl_const"};
  const PemaSource src(adapter, plm.head());
  for (double lm : values) {
    DecodeConfig gu = decode;
    gu.lambda_max = lm;
    gu.mode = LambdaMode::kGradualUnrolling;
    DecodeConfig flat = gu;
    flat.mode = LambdaMode::kConstant;
    const auto a = evaluate(plm, &src, vocab, tmpl, eval, gu);
    const auto b = evaluate(plm, &src, vocab, tmpl, eval, flat);
    report.rows.push_back({lm, {a.bleu.score, a.perplexity, b.bleu.score, b.perplexity}});
    log::info("lambda_max " + format_value(lm) + ": bleu gu " + format_value(a.bleu.score) +
              ", const " + format_value(b.bleu.score));
  }
  return report;
}

void write_table(std::ostream& out, const SweepReport& report,
                 std::span<const std::string> header) {
  for (const auto& h : header) out << "# " << h << '\n';
  constexpr int kWidth = 12;
  out << std::left << std::setw(kWidth) << sweep_axis_name(report.axis);
  for (const auto& m : report.metric_names) out << std::right << std::setw(kWidth) << m;
  out << '\n';
  for (const auto& row : report.rows) {
    out << std::left << std::setw(kWidth) << format_value(row.value);
    for (double v : row.metrics) out << std::right << std::setw(kWidth) << format_value(v);
    out << '\n';
  }
}

void write_csv(std::ostream& out, const SweepReport& report, std::span<const std::string> header) {
  for (const auto& h : header) out << "# " << h << '\n';
  out << sweep_axis_name(report.axis);
  for (const auto& m : report.metric_names) out << ',' << m;
  out << '\n';
  // Shortest representation that round-trips.
  const auto put = [&out](double x) {
    char buf[32];
    const auto res = std::to_chars(buf, buf + sizeof buf, x);
    out.write(buf, res.ptr - buf);
  };
  for (const auto& row : report.rows) {
    put(row.value);
    for (double v : row.metrics) {
      out << ',';
      put(v);
    }
    out << '\n';
  }
}

std::vector<LatencyRow> bench_latency(const ToyPLM& plm, const ExternalMemory& memory,
                                      const AdapterWeights& adapter, const Vocab& vocab,
                                      const PromptTemplate& tmpl,
                                      std::span<const ParallelPair> pairs,
                                      const LatencyOptions& options) {
  if (options.trials < 2) throw ConfigError("latency benchmark needs at least 2 trials");
  if (options.batch == 0) throw ConfigError("latency benchmark batch must be positive");
  if (memory.records.empty()) throw InputError("latency benchmark needs a non-empty memory");
  if (pairs.empty()) throw InputError("latency benchmark needs at least one pair");

  const auto& cfg = plm.config();
  ModelDims dims{cfg.d, adapter.r(), cfg.v, cfg.context, cfg.hidden, memory.records.size()};
  const auto naive_flops = flops_per_token(dims, Method::kNaive);
  const auto adapter_flops = flops_per_token(dims, Method::kAdapter);
  const auto knn_flops = flops_per_token(dims, Method::kKnn);

  // Both training steps see the same target positions.
  auto examples = plm_training_examples(vocab, tmpl, pairs, cfg.context);
  const std::size_t batch = std::min({options.batch, examples.size(), memory.records.size()});
  examples.resize(batch);
  const std::span<const ContextRecord> records(memory.records.data(), batch);

  std::vector<double> plm_train;
  std::vector<double> adapter_train;
  PLMTrainer trainer(cfg, plm.params(), {1, batch, 1e-4});
  AdapterWeights w = adapter;
  AdamState sa({}, w.a.rows(), w.a.cols());
  AdamState sr({}, w.b_rct.rows(), w.b_rct.cols());
  AdamState sp({}, w.b_pd.rows(), w.b_pd.cols());
  for (std::size_t t = 0; t < options.trials; ++t) {
    plm_train.push_back(time_ms([&] { trainer.step(examples); }));
    adapter_train.push_back(time_ms([&] {
      auto g = adapter_grads(w, records, plm.head(), 0.3);
      adam_step(w.a, g.a, sa);
      adam_step(w.b_rct, g.b_rct, sr);
      adam_step(w.b_pd, g.b_pd, sp);
    }));
  }

  const KnnIndex index(memory);
  const auto prompt = assemble_prompt(vocab, tmpl, pairs.front().source).tokens;
  std::vector<double> naive_tok;
  std::vector<double> adapter_tok;
  std::vector<double> knn_tok;
  double sink = 0.0;
  for (std::size_t t = 0; t < options.trials; ++t) {
    naive_tok.push_back(time_ms([&] { sink += plm.encode(prompt).next_token[kEos]; }));
    adapter_tok.push_back(time_ms([&] {
      const auto enc = plm.encode(prompt);
      sink += pema_dist(adapter, enc.representation, plm.head())[kEos];
    }));
    knn_tok.push_back(time_ms([&] {
      const auto enc = plm.encode(prompt);
      sink += index.distribution(enc.representation, options.knn)[kEos];
    }));
  }
  log::debug("latency sink " + std::to_string(sink));

  std::vector<LatencyRow> rows;
  const auto add = [&](Method m, std::string stage, const std::vector<double>& xs,
                       std::uint64_t flops) {
    LatencyRow row{m, std::move(stage), 0.0, 0.0, flops};
    mean_variance(xs, row.mean_ms, row.variance_ms2);
    rows.push_back(row);
  };
  add(Method::kNaive, "train-step", plm_train, naive_flops.plm_train_step * batch);
  add(Method::kAdapter, "train-step", adapter_train, adapter_flops.adapter_train_step * batch);
  add(Method::kNaive, "decode-token", naive_tok, naive_flops.total);
  add(Method::kAdapter, "decode-token", adapter_tok, adapter_flops.total);
  add(Method::kKnn, "decode-token", knn_tok, knn_flops.total);
  return rows;
}

void write_latency_table(std::ostream& out, std::span<const LatencyRow> rows,
                         std::span<const std::string> header) {
  for (const auto& h : header) out << "# " << h << '\n';
  out << std::left << std::setw(10) << "method" << std::setw(14) << "stage" << std::right
      << std::setw(12) << "mean_ms" << std::setw(14) << "var_ms2" << std::setw(14) << "flops"
      << '\n';
  for (const auto& r : rows) {
    out << std::left << std::setw(10) << method_name(r.method) << std::setw(14) << r.stage
        << std::right << std::setw(12) << format_value(r.mean_ms) << std::setw(14)
        << std::scientific << std::setprecision(3) << r.variance_ms2 << std::defaultfloat
        << std::setw(14) << r.flops << '\n';
  }
}

}  // namespace pema
