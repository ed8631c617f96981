#ifndef PEMA_KNN_LM_H
#define PEMA_KNN_LM_H

#include <cstddef>
#include <span>
#include <vector>

#include "pema/decoding.h"
#include "pema/external_memory.h"

namespace pema {

struct KNNConfig {
  std::size_t k = 16;
  double tau = 1.0;  // temperature over negative squared distances

  void validate() const;
};

struct Neighbor {
  std::size_t index = 0;
  double distance = 0.0;  // squared L2

  friend bool operator==(const Neighbor&, const Neighbor&) = default;
};

// Exact brute-force index over an external memory. Representations are packed
// once into a contiguous float array for the distance kernel.
class KnnIndex {
 public:
  explicit KnnIndex(const ExternalMemory& memory);

  std::size_t size() const { return targets_.size(); }
  std::size_t dim() const { return dim_; }

  // Top-k by squared distance, ascending, ties to the lower record index.
  // k beyond the memory size returns every record.
  std::vector<Neighbor> search(std::span<const double> query, std::size_t k) const;

  // P_kNN(y) proportional to the sum of exp(-dist / tau) over retrieved
  // neighbors whose target is y.
  TokenDistribution distribution(std::span<const double> query, const KNNConfig& config) const;

 private:
  std::size_t dim_;
  std::size_t vocab_;
  std::vector<float> packed_;
  std::vector<TokenId> targets_;
};

std::vector<Neighbor> knn_search(const ExternalMemory& memory, std::span<const double> query,
                                 std::size_t k);
TokenDistribution knn_dist(const ExternalMemory& memory, std::span<const double> query,
                           const KNNConfig& config);

class KnnSource final : public NextTokenSource {
 public:
  KnnSource(const ExternalMemory& memory, const KNNConfig& config)
      : index_(memory), config_(config) {
    config_.validate();
  }
  TokenDistribution distribution(std::span<const double> representation) const override {
    return index_.distribution(representation, config_);
  }

 private:
  KnnIndex index_;
  KNNConfig config_;
};

}  // namespace pema

#endif  // PEMA_KNN_LM_H
