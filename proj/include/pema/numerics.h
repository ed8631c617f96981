#ifndef PEMA_NUMERICS_H
#define PEMA_NUMERICS_H

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace pema {

using TokenId = std::uint32_t;

// Dense row-major matrix of doubles. Training math is 64-bit throughout;
// files store 32-bit.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);
  Matrix(std::initializer_list<std::initializer_list<double>> rows);

  static Matrix identity(std::size_t n);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const {
    return {data_.data() + r * cols_, cols_};
  }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }

  void fill(double value);
  bool all_finite() const;
  std::string shape_string() const;

  // Rounds every entry to the nearest 32-bit float, the storage precision.
  void round_to_float();

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

// Deterministic product: each output entry accumulates left to right over k.
Matrix matmul(const Matrix& a, const Matrix& b);

// y = m * x.
std::vector<double> matvec(const Matrix& m, std::span<const double> x);
// y = m^T * x.
std::vector<double> matvec_transposed(const Matrix& m, std::span<const double> x);
// m += alpha * u v^T.
void add_outer(Matrix& m, double alpha, std::span<const double> u, std::span<const double> v);

// Normalized next-token probabilities over a vocabulary.
class TokenDistribution {
 public:
  TokenDistribution() = default;
  // Takes probabilities that already sum to one (checked to 1e-9).
  explicit TokenDistribution(std::vector<double> probs);

  static TokenDistribution uniform(std::size_t v);

  std::size_t size() const { return probs_.size(); }
  double operator[](std::size_t i) const { return probs_[i]; }
  std::span<const double> probs() const { return probs_; }

  // Highest-probability token, lowest id on ties.
  TokenId argmax() const;

  friend bool operator==(const TokenDistribution&, const TokenDistribution&) = default;

 private:
  struct Unchecked {};
  TokenDistribution(std::vector<double> probs, Unchecked) : probs_(std::move(probs)) {}
  friend TokenDistribution softmax(std::span<const double> logits);

  std::vector<double> probs_;
};

// Max-subtracted softmax. Throws NumericInputError on non-finite logits.
TokenDistribution softmax(std::span<const double> logits);

inline constexpr double kProbabilityFloor = 1e-300;

// -ln max(dist[target], 1e-300).
double cross_entropy(const TokenDistribution& dist, TokenId target);

// Sum of squared componentwise differences.
double mse(std::span<const double> x, std::span<const double> y);

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  AdamOptions options;
  std::uint64_t step = 0;
  Matrix m;
  Matrix v;

  AdamState() = default;
  AdamState(const AdamOptions& opts, std::size_t rows, std::size_t cols)
      : options(opts), m(rows, cols), v(rows, cols) {}
};

// One bias-corrected Adam update of `params` in place.
void adam_step(Matrix& params, const Matrix& grads, AdamState& state);

// FNV-1a 64 over the little-endian float32 image of the values.
std::uint64_t float32_checksum(std::span<const double> values,
                               std::uint64_t seed = 0xcbf29ce484222325ULL);

}  // namespace pema

#endif  // PEMA_NUMERICS_H
