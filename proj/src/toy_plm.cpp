#include "pema/toy_plm.h"

#include <cmath>
#include <numeric>

#include "pema/binary_io.h"
#include "pema/errors.h"
#include "pema/random.h"

namespace pema {

namespace {

constexpr std::string_view kMagic = "TPLM";
constexpr std::uint16_t kVersion = 1;
constexpr std::uint32_t kMaxDim = 1u << 16;

struct Activations {
  std::vector<double> x;       // K*d
  std::vector<double> hidden;  // tanh output
  std::vector<double> f;       // representation, unit L2 norm
  double norm = 0.0;           // norm of f before normalization
};

constexpr double kNormEpsilon = 1e-12;

void forward(const PLMConfig& cfg, const PLMParams& p, std::span<const TokenId> window,
             Activations& act) {
  const std::size_t d = cfg.d;
  const std::size_t k = cfg.context;
  act.x.assign(k * d, 0.0);
  // window is oldest first; slot 0 is the most recent token.
  for (std::size_t slot = 0; slot < k; ++slot) {
    const TokenId tok = window[k - 1 - slot];
    const auto e = p.embeddings.row(tok);
    const auto m = p.position.row(slot);
    for (std::size_t j = 0; j < d; ++j) act.x[slot * d + j] = m[j] * e[j];
  }
  act.hidden = matvec(p.w1, act.x);
  for (std::size_t i = 0; i < act.hidden.size(); ++i) {
    act.hidden[i] = std::tanh(act.hidden[i] + p.b1(i, 0));
  }
  act.f = matvec(p.w2, act.hidden);
  double sq = 0.0;
  for (std::size_t i = 0; i < act.f.size(); ++i) {
    act.f[i] += p.b2(i, 0);
    sq += act.f[i] * act.f[i];
  }
  act.norm = std::sqrt(sq + kNormEpsilon);
  for (double& v : act.f) v /= act.norm;
}

PLMParams zero_like(const PLMParams& p) {
  PLMParams z;
  auto src = p.blocks();
  auto dst = z.blocks();
  for (std::size_t i = 0; i < src.size(); ++i) *dst[i] = Matrix(src[i]->rows(), src[i]->cols());
  return z;
}

void check_config(const PLMConfig& c) {
  if (c.d < 4) throw ConfigError("toy PLM needs d >= 4");
  if (c.context < 1) throw ConfigError("toy PLM needs a context window of at least 1");
  if (c.v <= kFirstContentId) throw ConfigError("toy PLM vocabulary is too small");
  if (c.hidden < 1) throw ConfigError("toy PLM needs a hidden width of at least 1");
}

}  // namespace

std::vector<Matrix*> PLMParams::blocks() {
  return {&embeddings, &position, &w1, &b1, &w2, &b2, &head};
}

std::vector<const Matrix*> PLMParams::blocks() const {
  return {&embeddings, &position, &w1, &b1, &w2, &b2, &head};
}

ToyPLM ToyPLM::initialize(const PLMConfig& config) {
  check_config(config);
  const std::size_t d = config.d;
  const std::size_t k = config.context;
  Rng rng(config.seed);
  PLMParams p;
  p.embeddings = Matrix(config.v, d);
  for (double& x : p.embeddings.data()) x = rng.normal(0.0, 1.0);
  p.position = Matrix(k, d, 1.0);
  p.w1 = Matrix(config.hidden, k * d);
  const double s1 = 1.0 / std::sqrt(static_cast<double>(k * d));
  for (double& x : p.w1.data()) x = rng.normal(0.0, s1);
  p.b1 = Matrix(config.hidden, 1);
  p.w2 = Matrix(d, config.hidden);
  const double s2 = 1.0 / std::sqrt(static_cast<double>(config.hidden));
  for (double& x : p.w2.data()) x = rng.normal(0.0, s2);
  p.b2 = Matrix(d, 1);
  p.head = Matrix(config.v, d);
  const double sh = 1.0 / std::sqrt(static_cast<double>(d));
  for (double& x : p.head.data()) x = rng.normal(0.0, sh);
  return ToyPLM(config, std::move(p));
}

PLMParams& ToyPLM::mutable_params() {
  if (frozen_) throw ContractError("toy PLM weights are frozen");
  return params_;
}

void ToyPLM::freeze() {
  if (frozen_) return;
  for (Matrix* m : params_.blocks()) m->round_to_float();
  frozen_ = true;
}

std::vector<TokenId> context_window(std::span<const TokenId> context, std::size_t k) {
  std::vector<TokenId> window(k, kPad);
  const std::size_t n = std::min(k, context.size());
  for (std::size_t i = 0; i < n; ++i) window[k - n + i] = context[context.size() - n + i];
  return window;
}

std::vector<double> ToyPLM::representation(std::span<const TokenId> context) const {
  if (!frozen_) throw ContractError("encode requires frozen weights");
  if (context.empty()) throw InputError("cannot encode an empty context");
  for (TokenId t : context) {
    if (t >= config_.v) throw IndexError("context token " + std::to_string(t) + " out of range");
  }
  Activations act;
  forward(config_, params_, context_window(context, config_.context), act);
  return std::move(act.f);
}

EncodeResult ToyPLM::encode(std::span<const TokenId> context) const {
  EncodeResult out;
  out.representation = representation(context);
  const auto logits = matvec(params_.head, out.representation);
  out.next_token = softmax(logits);
  out.predicted = out.next_token.argmax();
  return out;
}

std::uint64_t ToyPLM::checksum() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const Matrix* m : params_.blocks()) h = float32_checksum(m->data(), h);
  return h;
}

std::uint64_t ToyPLM::head_checksum() const { return float32_checksum(params_.head.data()); }

void ToyPLM::save(const std::string& path) const {
  binio::Writer w(path);
  w.magic(kMagic);
  w.u16(kVersion);
  w.u32(static_cast<std::uint32_t>(config_.d));
  w.u32(static_cast<std::uint32_t>(config_.v));
  w.u32(static_cast<std::uint32_t>(config_.context));
  w.u32(static_cast<std::uint32_t>(config_.hidden));
  for (const Matrix* m : params_.blocks()) w.f32_block(m->data());
  w.finish(path);
}

ToyPLM ToyPLM::load(const std::string& path, std::optional<std::size_t> expected_vocab) {
  binio::Reader r(path);
  r.expect_magic(kMagic, "TPLM magic");
  const auto version = r.u16("TPLM version");
  if (version != kVersion) {
    throw FormatError("unsupported TPLM version " + std::to_string(version), r.offset() - 2);
  }
  PLMConfig cfg;
  const std::uint64_t dims_at = r.offset();
  const auto d = r.u32("d");
  const auto v = r.u32("v");
  const auto k = r.u32("K");
  const auto hidden = r.u32("hidden");
  if (d < 4 || k < 1 || hidden < 1 || v <= kFirstContentId || d > kMaxDim || v > kMaxDim ||
      k > 4096 || hidden > kMaxDim) {
    throw FormatError("implausible TPLM dimensions", dims_at);
  }
  if (expected_vocab && *expected_vocab != v) {
    throw FormatError("TPLM vocabulary size " + std::to_string(v) + " does not match vocab of " +
                          std::to_string(*expected_vocab),
                      dims_at + 4);
  }
  cfg.d = d;
  cfg.v = v;
  cfg.context = k;
  cfg.hidden = hidden;

  PLMParams p;
  p.embeddings = Matrix(v, d);
  p.position = Matrix(k, d);
  p.w1 = Matrix(hidden, static_cast<std::size_t>(k) * d);
  p.b1 = Matrix(hidden, 1);
  p.w2 = Matrix(d, hidden);
  p.b2 = Matrix(d, 1);
  p.head = Matrix(v, d);
  for (Matrix* m : p.blocks()) r.f32_block(m->data(), "TPLM parameter block");
  if (!r.at_end()) throw FormatError("trailing bytes after TPLM parameters", r.offset());
  for (const Matrix* m : p.blocks()) {
    if (!m->all_finite()) throw FormatError("non-finite TPLM weight", r.offset());
  }
  ToyPLM plm(cfg, std::move(p));
  plm.frozen_ = true;
  return plm;
}

std::vector<WindowExample> plm_training_examples(const Vocab& vocab, const PromptTemplate& tmpl,
                                                 std::span<const ParallelPair> pairs,
                                                 std::size_t context) {
  std::vector<WindowExample> out;
  for (const auto& pair : pairs) {
    if (pair.target.empty()) continue;
    auto seq = assemble_prompt(vocab, tmpl, pair.source).tokens;
    for (std::size_t i = 0; i <= pair.target.size(); ++i) {
      const TokenId next = i < pair.target.size() ? pair.target[i] : kEos;
      out.push_back({context_window(seq, context), next});
      seq.push_back(next);
    }
  }
  return out;
}

PLMTrainer::PLMTrainer(PLMConfig config, PLMParams params, const PLMTrainOptions& options)
    : config_(config), params_(std::move(params)), options_(options) {
  AdamOptions adam;
  adam.lr = options.lr;
  for (const Matrix* m : params_.blocks()) adam_.emplace_back(adam, m->rows(), m->cols());
}

PLMTrainer::PLMTrainer(const PLMConfig& config, const PLMTrainOptions& options)
    : PLMTrainer(config, ToyPLM::initialize(config).params(), options) {}

double PLMTrainer::mean_loss(std::span<const WindowExample> examples) const {
  if (examples.empty()) return 0.0;
  Activations act;
  double total = 0.0;
  for (const auto& ex : examples) {
    forward(config_, params_, ex.window, act);
    total += cross_entropy(softmax(matvec(params_.head, act.f)), ex.next);
  }
  return total / static_cast<double>(examples.size());
}

double PLMTrainer::step(std::span<const WindowExample> batch) {
  if (batch.empty()) throw InputError("empty training batch");
  const std::size_t d = config_.d;
  const std::size_t k = config_.context;
  const double scale = 1.0 / static_cast<double>(batch.size());
  PLMParams grad = zero_like(params_);
  Activations act;
  double loss = 0.0;

  for (const auto& ex : batch) {
    forward(config_, params_, ex.window, act);
    const auto dist = softmax(matvec(params_.head, act.f));
    loss += cross_entropy(dist, ex.next);

    std::vector<double> g_logits(dist.probs().begin(), dist.probs().end());
    g_logits[ex.next] -= 1.0;
    for (double& g : g_logits) g *= scale;

    add_outer(grad.head, 1.0, g_logits, act.f);
    auto g_f = matvec_transposed(params_.head, g_logits);
    double dot = 0.0;
    for (std::size_t i = 0; i < d; ++i) dot += g_f[i] * act.f[i];
    for (std::size_t i = 0; i < d; ++i) g_f[i] = (g_f[i] - act.f[i] * dot) / act.norm;
    add_outer(grad.w2, 1.0, g_f, act.hidden);
    for (std::size_t i = 0; i < d; ++i) grad.b2(i, 0) += g_f[i];
    auto g_a = matvec_transposed(params_.w2, g_f);
    for (std::size_t i = 0; i < g_a.size(); ++i) {
      g_a[i] *= 1.0 - act.hidden[i] * act.hidden[i];
      grad.b1(i, 0) += g_a[i];
    }
    add_outer(grad.w1, 1.0, g_a, act.x);
    const auto g_x = matvec_transposed(params_.w1, g_a);
    for (std::size_t slot = 0; slot < k; ++slot) {
      const TokenId tok = ex.window[k - 1 - slot];
      const auto e = params_.embeddings.row(tok);
      const auto m = params_.position.row(slot);
      auto ge = grad.embeddings.row(tok);
      auto gm = grad.position.row(slot);
      for (std::size_t j = 0; j < d; ++j) {
        gm[j] += g_x[slot * d + j] * e[j];
        ge[j] += g_x[slot * d + j] * m[j];
      }
    }
  }

  auto params = params_.blocks();
  auto grads = grad.blocks();
  for (std::size_t i = 0; i < params.size(); ++i) adam_step(*params[i], *grads[i], adam_[i]);
  return loss * scale;
}

ToyPLM PLMTrainer::finish() && {
  ToyPLM plm = ToyPLM::initialize(config_);
  plm.mutable_params() = std::move(params_);
  plm.freeze();
  return plm;
}

ToyPLM train_plm(const Vocab& vocab, const PromptTemplate& tmpl,
                 std::span<const ParallelPair> corpus, const PLMConfig& config,
                 const PLMTrainOptions& options) {
  if (corpus.empty()) throw InputError("cannot train the toy PLM on an empty corpus");
  if (config.v != vocab.size()) {
    throw ConfigError("PLM vocabulary size " + std::to_string(config.v) +
                      " does not match vocab of " + std::to_string(vocab.size()));
  }
  auto examples = plm_training_examples(vocab, tmpl, corpus, config.context);
  if (examples.empty()) throw InputError("corpus has no target tokens to train on");

  PLMTrainer trainer(config, options);
  Rng rng(config.seed ^ 0x9e3779b97f4a7c15ULL);
  std::vector<std::size_t> order(examples.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::vector<WindowExample> batch;
  for (std::size_t epoch = 0; epoch < options.epochs; ++epoch) {
    rng.shuffle(std::span<std::size_t>(order));
    for (std::size_t start = 0; start < order.size(); start += options.batch_size) {
      batch.clear();
      const std::size_t end = std::min(order.size(), start + options.batch_size);
      for (std::size_t i = start; i < end; ++i) batch.push_back(examples[order[i]]);
      trainer.step(batch);
    }
  }
  return std::move(trainer).finish();
}

}  // namespace pema
