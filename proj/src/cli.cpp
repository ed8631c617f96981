#include "pema/cli.h"

#include <algorithm>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "pema/adapter.h"
#include "pema/corpus.h"
#include "pema/decoding.h"
#include "pema/errors.h"
#include "pema/evaluation.h"
#include "pema/experiment.h"
#include "pema/external_memory.h"
#include "pema/knn_lm.h"
#include "pema/log.h"
#include "pema/protocol.h"
#include "pema/toy_plm.h"

namespace pema {

namespace {

struct RunConfig {
  // paths
  std::vector<std::string> corpus;
  std::string plm;
  std::string memory;
  std::string adapter;
  std::string output;
  std::string report;
  std::string csv;
  std::string slang;
  std::string split = "auto";

  // corpus
  std::string task = "cipher";
  std::size_t n = 2000;
  std::uint64_t cipher_key = kDefaultCipherKey;

  // PLM
  std::size_t d = 64;
  std::size_t context = 8;
  std::size_t hidden = 128;
  std::size_t plm_epochs = PLMTrainOptions{}.epochs;
  std::size_t plm_batch = PLMTrainOptions{}.batch_size;
  double plm_lr = PLMTrainOptions{}.lr;

  // memory and adapter
  std::string mode = "predicted";
  std::size_t rank = 16;
  double kappa = 0.3;
  double lr = 1e-3;
  std::size_t batch_tokens = 4096;
  std::size_t phase1_epochs = 200;
  std::size_t phase2_epochs = 200;
  std::size_t max_steps = 0;
  bool freeze_brct = false;

  // decoding
  std::string lambda_mode = "gu";
  double lambda_max = 0.8;
  std::size_t max_length = 32;
  std::size_t k = 16;
  double tau = 1.0;
  std::string method = "adapter";

  // sweep and bench
  std::string axis = "kappa";
  std::string grid = "0.0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9";
  std::size_t trials = 10;

  // network
  std::string bind = "127.0.0.1";
  std::string host = "127.0.0.1";
  std::uint16_t port = protocol::kDefaultPort;

  std::uint64_t seed = 123;
  std::string log_level = "info";
};

std::string require(const std::string& value, std::string_view flag) {
  if (value.empty()) throw ConfigError("missing required --" + std::string(flag));
  return value;
}

std::vector<std::string> config_lines(const CLI::App& app, const std::string& subcommand) {
  std::vector<std::string> lines{"subcommand=" + subcommand};
  std::istringstream is(app.config_to_str(true, false));
  std::string line;
  while (std::getline(is, line)) {
    if (!line.empty()) lines.push_back(line);
  }
  return lines;
}

std::vector<ParallelPair> select_split(std::vector<ParallelPair> pairs, std::string split,
                                       std::string_view fallback) {
  if (split == "auto") split = std::string(fallback);
  if (split == "all") return pairs;
  auto parts = split_corpus(pairs);
  if (split == "train") return parts.train;
  if (split == "valid") return parts.valid;
  if (split == "test") return parts.test;
  throw ConfigError("unknown split '" + split + "' (expected all, train, valid or test)");
}

std::vector<ParallelPair> load_pairs(const RunConfig& cfg, const Vocab& vocab,
                                     std::string_view fallback_split) {
  if (cfg.corpus.empty()) throw ConfigError("missing required --corpus");
  if (cfg.corpus.size() > 1) throw ConfigError("this subcommand takes a single --corpus");
  auto pairs = select_split(read_corpus(cfg.corpus.front(), vocab), cfg.split, fallback_split);
  if (pairs.empty()) throw InputError("selected corpus split is empty");
  return pairs;
}

PLMConfig plm_config(const RunConfig& cfg, const Vocab& vocab) {
  PLMConfig c;
  c.d = cfg.d;
  c.v = vocab.size();
  c.context = cfg.context;
  c.hidden = cfg.hidden;
  c.seed = cfg.seed;
  if (c.d == 0 || c.context == 0 || c.hidden == 0) throw ConfigError("PLM dimensions must be positive");
  return c;
}

TrainConfig train_config(const RunConfig& cfg) {
  TrainConfig t;
  t.rank = cfg.rank;
  t.kappa = cfg.kappa;
  t.adam.lr = cfg.lr;
  t.batch_tokens = cfg.batch_tokens;
  t.phase1_epochs = cfg.phase1_epochs;
  t.phase2_epochs = cfg.phase2_epochs;
  t.max_steps = cfg.max_steps;
  t.seed = cfg.seed;
  t.freeze_brct_in_phase2 = cfg.freeze_brct;
  t.validate();
  return t;
}

DecodeConfig decode_config(const RunConfig& cfg) {
  DecodeConfig d;
  d.mode = parse_lambda_mode(cfg.lambda_mode);
  d.lambda_max = cfg.lambda_max;
  d.max_length = cfg.max_length;
  d.validate();
  return d;
}

KNNConfig knn_config(const RunConfig& cfg) {
  KNNConfig k{cfg.k, cfg.tau};
  k.validate();
  return k;
}

std::vector<double> parse_grid(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(item, &used));
      if (item.find_first_not_of(" \t", used) != std::string::npos) throw std::invalid_argument(item);
    } catch (const std::logic_error&) {
      throw ConfigError("bad grid value '" + item + "'");
    }
  }
  return checked_grid(out);
}

// Writes to `path`, or to `fallback` when the path is empty.
template <typename F>
void emit(const std::string& path, std::ostream& fallback, F&& write) {
  if (path.empty()) {
    write(fallback);
    return;
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw InputError("cannot write '" + path + "'");
  write(f);
  if (!f) throw InputError("write to '" + path + "' failed");
}

void write_header(std::ostream& os, std::span<const std::string> header) {
  for (const auto& h : header) os << "# " << h << '\n';
}

ToyPLM load_plm(const RunConfig& cfg, const Vocab& vocab) {
  return ToyPLM::load(require(cfg.plm, "plm"), vocab.size());
}

AdapterWeights load_adapter(const RunConfig& cfg, const ToyPLM& plm) {
  auto w = AdapterWeights::load(require(cfg.adapter, "adapter"));
  if (w.d() != plm.config().d || w.v != plm.config().v) {
    throw DimensionError("adapter (d=" + std::to_string(w.d()) + ", v=" + std::to_string(w.v) +
                         ") does not fit the PLM (d=" + std::to_string(plm.config().d) +
                         ", v=" + std::to_string(plm.config().v) + ")");
  }
  return w;
}

void write_hypotheses(const RunConfig& cfg, std::ostream& out, const Vocab& vocab,
                      const std::vector<std::vector<TokenId>>& hyps) {
  emit(cfg.output, out, [&](std::ostream& os) {
    for (const auto& h : hyps) os << detokenize(vocab, h) << '\n';
  });
}

void write_eval_report(std::ostream& os, std::span<const std::string> header, Method method,
                       const EvalResult& res) {
  write_header(os, header);
  os << std::setprecision(10);
  os << "method " << method_name(method) << '\n';
  os << "sentences " << res.hypotheses.size() << '\n';
  os << "bleu " << res.bleu.score << '\n';
  os << "bleu_precisions " << res.bleu.precisions[0] << ' ' << res.bleu.precisions[1] << ' '
     << res.bleu.precisions[2] << ' ' << res.bleu.precisions[3] << '\n';
  os << "bleu_brevity_penalty " << res.bleu.brevity_penalty << '\n';
  os << "bleu_smoothing add-epsilon " << kBleuEpsilon << '\n';
  os << "perplexity " << res.perplexity << '\n';
  os << "perplexity_scorer toy-plm\n";
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  RunConfig cfg;
  CLI::App app{"Plug-in external memory adaptation toolkit", "pema"};
  app.set_config("--config", "", "key=value file; command-line flags take precedence");
  app.require_subcommand(1, 1);
  app.fallthrough();

  app.add_option("--corpus", cfg.corpus, "corpus file (repeatable for train-plm)");
  app.add_option("--plm", cfg.plm, "toy PLM file");
  app.add_option("--memory", cfg.memory, "external memory file");
  app.add_option("--adapter", cfg.adapter, "adapter file");
  app.add_option("--output", cfg.output, "output file (corpus or hypotheses)");
  app.add_option("--report", cfg.report, "report file; stdout when absent");
  app.add_option("--csv", cfg.csv, "CSV copy of a sweep report");
  app.add_option("--slang", cfg.slang, "slang dictionary, one term per line");
  app.add_option("--split", cfg.split, "auto|all|train|valid|test")->capture_default_str();
  app.add_option("--task", cfg.task, "cipher|formalize")->capture_default_str();
  app.add_option("--n", cfg.n, "pairs to generate")->capture_default_str();
  app.add_option("--cipher-key", cfg.cipher_key, "cipher permutation seed")->capture_default_str();
  app.add_option("--d", cfg.d, "representation width")->capture_default_str();
  app.add_option("--context", cfg.context, "PLM window K")->capture_default_str();
  app.add_option("--hidden", cfg.hidden, "PLM hidden width")->capture_default_str();
  app.add_option("--plm-epochs", cfg.plm_epochs)->capture_default_str();
  app.add_option("--plm-batch", cfg.plm_batch)->capture_default_str();
  app.add_option("--plm-lr", cfg.plm_lr)->capture_default_str();
  app.add_option("--mode", cfg.mode, "memory build mode: predicted|teacher")->capture_default_str();
  app.add_option("--rank", cfg.rank, "adapter rank r")->capture_default_str();
  app.add_option("--kappa", cfg.kappa, "reconstruction weight")->capture_default_str();
  app.add_option("--lr", cfg.lr, "adapter Adam learning rate")->capture_default_str();
  app.add_option("--batch-tokens", cfg.batch_tokens)->capture_default_str();
  app.add_option("--phase1-epochs", cfg.phase1_epochs)->capture_default_str();
  app.add_option("--phase2-epochs", cfg.phase2_epochs)->capture_default_str();
  app.add_option("--max-steps", cfg.max_steps, "per phase; 0 = no cap")->capture_default_str();
  app.add_flag("--freeze-brct", cfg.freeze_brct, "hold B_rct fixed in phase 2");
  app.add_option("--lambda-mode", cfg.lambda_mode, "gu|const")->capture_default_str();
  app.add_option("--lambda-max", cfg.lambda_max)->capture_default_str();
  app.add_option("--max-length", cfg.max_length)->capture_default_str();
  app.add_option("--k", cfg.k, "kNN neighbours")->capture_default_str();
  app.add_option("--tau", cfg.tau, "kNN temperature")->capture_default_str();
  app.add_option("--method", cfg.method, "naive|adapter|knn")->capture_default_str();
  app.add_option("--axis", cfg.axis, "kappa|lambda-max")->capture_default_str();
  app.add_option("--grid", cfg.grid, "comma-separated sweep values")->capture_default_str();
  app.add_option("--trials", cfg.trials)->capture_default_str();
  app.add_option("--bind", cfg.bind)->capture_default_str();
  app.add_option("--host", cfg.host)->capture_default_str();
  app.add_option("--port", cfg.port)->capture_default_str();
  app.add_option("--seed", cfg.seed)->capture_default_str();
  app.add_option("--log-level", cfg.log_level, "debug|info|warning|error")->capture_default_str();

  const std::vector<std::pair<std::string, std::string>> commands = {
      {"gen-corpus", "write a synthetic parallel corpus"},
      {"train-plm", "train and freeze the toy PLM"},
      {"build-memory", "build the external memory from a frozen PLM"},
      {"train-adapter", "two-phase adapter training"},
      {"decode", "greedy decoding, PLM alone or with the adapter"},
      {"knn-decode", "greedy decoding with the kNN-LM"},
      {"eval", "decode and score BLEU and perplexity"},
      {"sweep", "kappa or lambda-max sweep"},
      {"bench", "latency of training steps and decoding"},
      {"serve", "run the PLM owner service"},
      {"client-build", "build the external memory through the owner service"},
  };
  for (const auto& [name, help] : commands) app.add_subcommand(name, help);

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUserError;
  }

  const std::string sub = app.get_subcommands().front()->get_name();
  try {
    const std::string& lvl = cfg.log_level;
    if (lvl == "debug") log::set_level(log::Level::kDebug);
    else if (lvl == "info") log::set_level(log::Level::kInfo);
    else if (lvl == "warning") log::set_level(log::Level::kWarning);
    else if (lvl == "error") log::set_level(log::Level::kError);
    else throw ConfigError("unknown log level '" + lvl + "'");

    const auto header = config_lines(app, sub);
    for (const auto& h : header) log::debug("config " + h);
    const Vocab& vocab = default_vocab();
    const PromptTemplate tmpl;
    CorpusOptions corpus_options;
    corpus_options.cipher_key = cfg.cipher_key;

    if (sub == "gen-corpus") {
      const auto pairs = gen_parallel(parse_task(cfg.task), cfg.n, cfg.seed, vocab, corpus_options);
      write_corpus(require(cfg.output, "output"), vocab, pairs);
      log::info("wrote " + std::to_string(pairs.size()) + " pairs to " + cfg.output);

    } else if (sub == "train-plm") {
      if (cfg.corpus.empty()) throw ConfigError("missing required --corpus");
      std::vector<ParallelPair> pairs;
      for (const auto& path : cfg.corpus) {
        auto more = select_split(read_corpus(path, vocab), cfg.split, "all");
        pairs.insert(pairs.end(), more.begin(), more.end());
      }
      if (pairs.empty()) throw InputError("training corpus is empty");
      PLMTrainOptions opts{cfg.plm_epochs, cfg.plm_batch, cfg.plm_lr};
      if (opts.epochs == 0 || opts.batch_size == 0 || !(opts.lr > 0.0)) {
        throw ConfigError("PLM training options must be positive");
      }
      const auto plm = train_plm(vocab, tmpl, pairs, plm_config(cfg, vocab), opts);
      plm.save(require(cfg.plm, "plm"));
      log::info("saved PLM to " + cfg.plm);

    } else if (sub == "build-memory") {
      const auto plm = load_plm(cfg, vocab);
      const auto pairs = load_pairs(cfg, vocab, "train");
      const auto memory = build_memory(plm, vocab, tmpl, pairs, parse_build_mode(cfg.mode));
      write_memory(memory, require(cfg.memory, "memory"));
      log::info("wrote " + std::to_string(memory.records.size()) + " records to " + cfg.memory);

    } else if (sub == "train-adapter") {
      const auto plm = load_plm(cfg, vocab);
      const auto memory = read_memory(require(cfg.memory, "memory"), plm.config().d);
      const auto train = train_config(cfg);
      const auto p1 = train_phase1(memory, train);
      const auto p2 = train_phase2(memory, p1.b_rct, plm.head(), train);
      p2.weights.save(require(cfg.adapter, "adapter"));
      log::info("adapter trained in " + std::to_string(p1.report.wall_seconds + p2.report.wall_seconds) +
                " s");
      emit(cfg.report, out, [&](std::ostream& os) {
        write_header(os, header);
        os << std::setprecision(10);
        os << "phase epoch l_rct l_pd l_total\n";
        for (const auto& e : p1.report.epochs) {
          os << "1 " << e.epoch << ' ' << e.rct << ' ' << e.pd << ' ' << e.total << '\n';
        }
        for (const auto& e : p2.report.epochs) {
          os << "2 " << e.epoch << ' ' << e.rct << ' ' << e.pd << ' ' << e.total << '\n';
        }
        os << "checksum " << std::hex << p2.weights.checksum() << std::dec << '\n';
      });

    } else if (sub == "decode" || sub == "knn-decode") {
      const auto plm = load_plm(cfg, vocab);
      const auto pairs = load_pairs(cfg, vocab, "test");
      std::vector<std::vector<TokenId>> sources;
      for (const auto& p : pairs) sources.push_back(p.source);
      const auto dc = decode_config(cfg);
      std::vector<std::vector<TokenId>> hyps;
      if (sub == "knn-decode") {
        const auto memory = read_memory(require(cfg.memory, "memory"), plm.config().d);
        const KnnSource src(memory, knn_config(cfg));
        hyps = decode_all(plm, &src, vocab, tmpl, sources, dc);
      } else if (cfg.adapter.empty()) {
        hyps = decode_all(plm, nullptr, vocab, tmpl, sources, dc);
      } else {
        const auto adapter = load_adapter(cfg, plm);
        const PemaSource src(adapter, plm.head());
        hyps = decode_all(plm, &src, vocab, tmpl, sources, dc);
      }
      write_hypotheses(cfg, out, vocab, hyps);

    } else if (sub == "eval") {
      const auto plm = load_plm(cfg, vocab);
      const auto pairs = load_pairs(cfg, vocab, "test");
      const auto dc = decode_config(cfg);
      const Method method = parse_method(cfg.method);
      EvalResult res;
      if (method == Method::kNaive) {
        res = evaluate(plm, nullptr, vocab, tmpl, pairs, dc);
      } else if (method == Method::kAdapter) {
        const auto adapter = load_adapter(cfg, plm);
        const PemaSource src(adapter, plm.head());
        res = evaluate(plm, &src, vocab, tmpl, pairs, dc);
      } else {
        const auto memory = read_memory(require(cfg.memory, "memory"), plm.config().d);
        const KnnSource src(memory, knn_config(cfg));
        res = evaluate(plm, &src, vocab, tmpl, pairs, dc);
      }
      emit(cfg.report, out, [&](std::ostream& os) {
        write_eval_report(os, header, method, res);
        std::vector<std::string> text;
        for (const auto& h : res.hypotheses) text.push_back(detokenize(vocab, h));
        SlangDictionary dict;
        if (!cfg.slang.empty()) dict = load_slang_dictionary(cfg.slang);
        const auto patterns = count_informal_patterns(text, cfg.slang.empty() ? nullptr : &dict);
        os << "patterns_slang " << patterns.slang << '\n';
        os << "patterns_all_capital " << patterns.all_capital << '\n';
        os << "patterns_redundant " << patterns.redundant << '\n';
        os << "patterns_non_capital_start " << patterns.non_capital_start << '\n';
      });
      if (!cfg.output.empty()) write_hypotheses(cfg, out, vocab, res.hypotheses);

    } else if (sub == "sweep") {
      const auto plm = load_plm(cfg, vocab);
      const auto pairs = load_pairs(cfg, vocab, "test");
      const auto grid = parse_grid(cfg.grid);
      const auto dc = decode_config(cfg);
      SweepReport report;
      if (parse_sweep_axis(cfg.axis) == SweepAxis::kKappa) {
        const auto memory = read_memory(require(cfg.memory, "memory"), plm.config().d);
        report = sweep_kappa(plm, memory, vocab, tmpl, pairs, grid, train_config(cfg), dc);
      } else {
        AdapterWeights adapter;
        if (!cfg.adapter.empty()) {
          adapter = load_adapter(cfg, plm);
        } else {
          const auto memory = read_memory(require(cfg.memory, "memory"), plm.config().d);
          const auto train = train_config(cfg);
          const auto p1 = train_phase1(memory, train);
          adapter = train_phase2(memory, p1.b_rct, plm.head(), train).weights;
        }
        report = sweep_lambda(plm, adapter, vocab, tmpl, pairs, grid, dc);
      }
      emit(cfg.report, out, [&](std::ostream& os) { write_table(os, report, header); });
      if (!cfg.csv.empty()) {
        emit(cfg.csv, out, [&](std::ostream& os) { write_csv(os, report, header); });
      }

    } else if (sub == "bench") {
      const auto plm = load_plm(cfg, vocab);
      const auto memory = read_memory(require(cfg.memory, "memory"), plm.config().d);
      const auto adapter = load_adapter(cfg, plm);
      const auto pairs = load_pairs(cfg, vocab, "train");
      LatencyOptions opts;
      opts.trials = cfg.trials;
      opts.knn = knn_config(cfg);
      opts.seed = cfg.seed;
      const auto rows = bench_latency(plm, memory, adapter, vocab, tmpl, pairs, opts);
      emit(cfg.report, out, [&](std::ostream& os) { write_latency_table(os, rows, header); });

    } else if (sub == "serve") {
      const auto plm = load_plm(cfg, vocab);
      protocol::Server server(plm, {cfg.bind, cfg.port});
      server.run();

    } else if (sub == "client-build") {
      protocol::Client client(cfg.host, cfg.port);
      const auto& session = client.hello();
      if (session.v != vocab.size()) {
        throw ProtocolError("owner vocabulary size " + std::to_string(session.v) +
                            " differs from the local vocabulary");
      }
      const auto pairs = load_pairs(cfg, vocab, "train");
      const auto memory =
          protocol::remote_build_memory(client, vocab, tmpl, pairs, parse_build_mode(cfg.mode));
      write_memory(memory, require(cfg.memory, "memory"));
      log::info("wrote " + std::to_string(memory.records.size()) + " records to " + cfg.memory);
    }
    return kExitOk;
  } catch (const UserError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUserError;
  } catch (const TransportError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUserError;
  } catch (const ProtocolError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUserError;
  } catch (const std::exception& e) {
    err << "internal error: " << e.what() << '\n';
    return kExitInternal;
  }
}

}  // namespace pema
