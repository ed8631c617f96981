#ifndef PEMA_TOY_PLM_H
#define PEMA_TOY_PLM_H

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "pema/corpus.h"
#include "pema/numerics.h"

namespace pema {

struct PLMConfig {
  std::size_t d = 64;        // representation width
  std::size_t v = 68;        // vocabulary size
  std::size_t context = 8;   // K, tokens visible to the model
  std::size_t hidden = 128;
  std::uint64_t seed = 123;
};

// Parameter blocks in file order.
struct PLMParams {
  Matrix embeddings;  // v x d
  Matrix position;    // K x d, elementwise weights per window slot
  Matrix w1;          // hidden x (K*d)
  Matrix b1;          // hidden x 1
  Matrix w2;          // d x hidden
  Matrix b2;          // d x 1
  Matrix head;        // v x d, the LM head W_hd

  std::vector<Matrix*> blocks();
  std::vector<const Matrix*> blocks() const;
};

struct EncodeResult {
  std::vector<double> representation;  // f(c)
  TokenDistribution next_token;        // P_LM
  TokenId predicted = 0;               // argmax, lowest id on ties
};

// Anything that maps a context to (f, P_LM, w_hat): the local model or a
// remote owner service.
class ContextEncoder {
 public:
  virtual ~ContextEncoder() = default;
  virtual EncodeResult encode(std::span<const TokenId> context) = 0;
  virtual std::size_t representation_size() const = 0;
  virtual std::size_t vocab_size() const = 0;
};

// Small causal LM over a fixed window:
//   x = concat_k(position[k] * embeddings[c_{-k}]),  k = 0 is the last token
//   u = w2 * tanh(w1 x + b1) + b2
//   f = u / |u|
//   P_LM = softmax(head * f)
class ToyPLM {
 public:
  static ToyPLM initialize(const PLMConfig& config);

  const PLMConfig& config() const { return config_; }
  const PLMParams& params() const { return params_; }
  const Matrix& head() const { return params_.head; }

  // Throws ContractError once frozen.
  PLMParams& mutable_params();

  // Rounds every weight to float32 (the storage precision) and locks them.
  void freeze();
  bool frozen() const { return frozen_; }

  // Requires frozen weights and a non-empty context.
  EncodeResult encode(std::span<const TokenId> context) const;
  std::vector<double> representation(std::span<const TokenId> context) const;

  std::uint64_t checksum() const;
  std::uint64_t head_checksum() const;

  // TPLM format. Loaded models are frozen. `expected_vocab` rejects a file
  // whose header v differs.
  void save(const std::string& path) const;
  static ToyPLM load(const std::string& path,
                     std::optional<std::size_t> expected_vocab = std::nullopt);

 private:
  ToyPLM(PLMConfig config, PLMParams params) : config_(config), params_(std::move(params)) {}

  PLMConfig config_;
  PLMParams params_;
  bool frozen_ = false;
};

class LocalEncoder final : public ContextEncoder {
 public:
  explicit LocalEncoder(const ToyPLM& plm) : plm_(plm) {}
  EncodeResult encode(std::span<const TokenId> context) override { return plm_.encode(context); }
  std::size_t representation_size() const override { return plm_.config().d; }
  std::size_t vocab_size() const override { return plm_.config().v; }

 private:
  const ToyPLM& plm_;
};

// One next-token training example: the K-token window (PAD-filled on the
// left) and the token that follows it.
struct WindowExample {
  std::vector<TokenId> window;  // oldest first, length K
  TokenId next = 0;
};

std::vector<TokenId> context_window(std::span<const TokenId> context, std::size_t k);

// Examples for every target position and the closing EOS of each pair.
std::vector<WindowExample> plm_training_examples(const Vocab& vocab, const PromptTemplate& tmpl,
                                                 std::span<const ParallelPair> pairs,
                                                 std::size_t context);

struct PLMTrainOptions {
  std::size_t epochs = 20;
  std::size_t batch_size = 32;
  double lr = 3e-3;
};

// Full fine-tuning of every block with Adam.
class PLMTrainer {
 public:
  PLMTrainer(PLMConfig config, PLMParams params, const PLMTrainOptions& options);
  explicit PLMTrainer(const PLMConfig& config, const PLMTrainOptions& options = {});

  // One Adam update on the mean cross-entropy of the batch; returns that loss.
  double step(std::span<const WindowExample> batch);
  double mean_loss(std::span<const WindowExample> examples) const;

  ToyPLM finish() &&;
  const PLMParams& params() const { return params_; }

 private:
  PLMConfig config_;
  PLMParams params_;
  PLMTrainOptions options_;
  std::vector<AdamState> adam_;
};

// Trains next-token prediction on prompt-conditioned targets and returns
// frozen weights. Deterministic for a given config seed.
ToyPLM train_plm(const Vocab& vocab, const PromptTemplate& tmpl,
                 std::span<const ParallelPair> corpus, const PLMConfig& config,
                 const PLMTrainOptions& options = {});

}  // namespace pema

#endif  // PEMA_TOY_PLM_H
