#include "pema/knn_lm.h"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "pema/errors.h"
#include "pema/kernels.h"

namespace pema {

void KNNConfig::validate() const {
  if (k < 1) throw ConfigError("kNN needs k >= 1");
  if (!(tau > 0.0) || !std::isfinite(tau)) throw ConfigError("kNN temperature must be positive");
}

KnnIndex::KnnIndex(const ExternalMemory& memory) : dim_(memory.d), vocab_(memory.v) {
  if (memory.records.empty()) throw InputError("kNN search over an empty memory");
  packed_.reserve(memory.records.size() * dim_);
  targets_.reserve(memory.records.size());
  for (const auto& rec : memory.records) {
    if (rec.representation.size() != dim_) {
      throw DimensionError("memory record of width " + std::to_string(rec.representation.size()) +
                           " in a memory of width " + std::to_string(dim_));
    }
    if (rec.target >= vocab_) throw IndexError("memory target outside the vocabulary");
    packed_.insert(packed_.end(), rec.representation.begin(), rec.representation.end());
    targets_.push_back(rec.target);
  }
}

std::vector<Neighbor> KnnIndex::search(std::span<const double> query, std::size_t k) const {
  if (query.size() != dim_) {
    throw DimensionError("query width " + std::to_string(query.size()) +
                         " does not match memory width " + std::to_string(dim_));
  }
  if (k < 1) throw ConfigError("kNN needs k >= 1");
  std::vector<double> dist(targets_.size());
  kernels::squared_distances(packed_, query, dist);

  std::vector<std::size_t> order(dist.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const std::size_t take = std::min(k, order.size());
  const auto closer = [&](std::size_t a, std::size_t b) {
    return dist[a] < dist[b] || (dist[a] == dist[b] && a < b);
  };
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(take), order.end(),
                    closer);

  std::vector<Neighbor> out(take);
  for (std::size_t i = 0; i < take; ++i) out[i] = {order[i], dist[order[i]]};
  return out;
}

TokenDistribution KnnIndex::distribution(std::span<const double> query,
                                         const KNNConfig& config) const {
  config.validate();
  const auto neighbors = search(query, config.k);
  const double nearest = neighbors.front().distance;
  std::vector<double> probs(vocab_, 0.0);
  double total = 0.0;
  for (const auto& nb : neighbors) {
    const double w = std::exp(-(nb.distance - nearest) / config.tau);
    probs[targets_[nb.index]] += w;
    total += w;
  }
  for (double& p : probs) p /= total;
  return TokenDistribution(std::move(probs));
}

std::vector<Neighbor> knn_search(const ExternalMemory& memory, std::span<const double> query,
                                 std::size_t k) {
  return KnnIndex(memory).search(query, k);
}

TokenDistribution knn_dist(const ExternalMemory& memory, std::span<const double> query,
                           const KNNConfig& config) {
  return KnnIndex(memory).distribution(query, config);
}

}  // namespace pema
