#ifndef PEMA_ADAPTER_H
#define PEMA_ADAPTER_H

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "pema/external_memory.h"
#include "pema/numerics.h"

namespace pema {

// The three adapter matrices. A is the shared down-projection; B_rct
// reconstructs f(c) and B_pd produces the representation fed to the
// frozen LM head.
struct AdapterWeights {
  Matrix a;      // r x d
  Matrix b_rct;  // d x r
  Matrix b_pd;   // d x r
  std::size_t v = 0;  // vocabulary size of the head it was trained against

  std::size_t d() const { return a.cols(); }
  std::size_t r() const { return a.rows(); }

  // Checks shapes and finiteness; `allow_full_rank` admits r == d for tests.
  void validate(bool allow_full_rank = false) const;
  std::uint64_t checksum() const;

  // PADP format: "PADP" u16 version, u32 d, u32 r, u32 v, then A, B_rct,
  // B_pd as little-endian f32 blocks.
  void save(const std::string& path) const;
  static AdapterWeights load(const std::string& path);

  friend bool operator==(const AdapterWeights&, const AdapterWeights&) = default;
};

struct AdapterOutputs {
  std::vector<double> z;      // A f
  std::vector<double> h_rct;  // B_rct z
  std::vector<double> h_pd;   // B_pd z
};

AdapterOutputs adapter_forward(const AdapterWeights& w, std::span<const double> f);

// softmax(W_hd B_pd A f). B_rct is not consulted.
TokenDistribution pema_dist(const AdapterWeights& w, std::span<const double> f,
                            const Matrix& head);

struct AdapterLosses {
  double rct = 0.0;
  double pd = 0.0;
  double total = 0.0;
};

// Sums over tokens, means over the distinct sentences present in `batch`.
AdapterLosses adapter_losses(const AdapterWeights& w, std::span<const ContextRecord> batch,
                             const Matrix& head, double kappa);

struct AdapterGradients {
  Matrix a;
  Matrix b_rct;
  Matrix b_pd;
  AdapterLosses losses;
};

// Exact gradients of kappa * L_rct + (1 - kappa) * L_pd with the head frozen.
AdapterGradients adapter_grads(const AdapterWeights& w, std::span<const ContextRecord> batch,
                               const Matrix& head, double kappa);

struct TrainConfig {
  std::size_t rank = 16;
  double kappa = 0.3;
  AdamOptions adam{};
  std::size_t batch_tokens = 4096;
  std::size_t phase1_epochs = 200;
  std::size_t phase2_epochs = 200;
  std::size_t max_steps = 0;  // per phase; 0 means no cap
  std::uint64_t seed = 123;
  bool freeze_brct_in_phase2 = false;

  void validate() const;
};

struct EpochLosses {
  std::size_t epoch = 0;
  double rct = 0.0;
  double pd = 0.0;
  double total = 0.0;
};

struct TrainReport {
  double kappa = 0.0;
  std::vector<EpochLosses> epochs;
  std::size_t steps = 0;
  std::uint64_t checksum = 0;
  double wall_seconds = 0.0;
};

struct Phase1Result {
  Matrix b_rct;
  TrainReport report;
};

// Reconstruction-only training of a fresh (A, B_rct). The phase-1 A is
// discarded; only B_rct is returned, rounded to float32.
Phase1Result train_phase1(const ExternalMemory& memory, const TrainConfig& config);

struct Phase2Result {
  AdapterWeights weights;
  TrainReport report;
};

// Joint training from the phase-1 B_rct, a freshly drawn A and a zero B_pd.
// Final weights are rounded to float32 so they match their saved form.
Phase2Result train_phase2(const ExternalMemory& memory, const Matrix& b_rct, const Matrix& head,
                          const TrainConfig& config);

// Groups records by sentence, preserving first-appearance order.
std::vector<std::vector<std::size_t>> sentence_groups(std::span<const ContextRecord> records);

}  // namespace pema

#endif  // PEMA_ADAPTER_H
