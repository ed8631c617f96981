#include "pema/numerics.h"

#include <algorithm>
#include <bit>
#include <cmath>
#include <sstream>

#include "pema/errors.h"
#include "pema/kernels.h"

namespace pema {

Matrix::Matrix(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows * cols) {
    throw DimensionError("matrix data length " + std::to_string(data_.size()) +
                         " does not match shape " + shape_string());
  }
}

Matrix::Matrix(std::initializer_list<std::initializer_list<double>> rows) {
  rows_ = rows.size();
  cols_ = rows_ == 0 ? 0 : rows.begin()->size();
  data_.reserve(rows_ * cols_);
  for (const auto& r : rows) {
    if (r.size() != cols_) throw DimensionError("ragged matrix literal");
    data_.insert(data_.end(), r.begin(), r.end());
  }
}

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

void Matrix::fill(double value) { std::fill(data_.begin(), data_.end(), value); }

bool Matrix::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double x) { return std::isfinite(x); });
}

std::string Matrix::shape_string() const {
  std::ostringstream os;
  os << rows_ << "x" << cols_;
  return os.str();
}

void Matrix::round_to_float() {
  for (double& x : data_) x = static_cast<double>(static_cast<float>(x));
}

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul shape mismatch: " + a.shape_string() + " x " +
                         b.shape_string());
  }
  Matrix out(a.rows(), b.cols());
  kernels::matmul(a.data(), b.data(), out.data(), a.rows(), a.cols(), b.cols());
  return out;
}

std::vector<double> matvec(const Matrix& m, std::span<const double> x) {
  if (m.cols() != x.size()) {
    throw DimensionError("matvec shape mismatch: " + m.shape_string() + " x " +
                         std::to_string(x.size()));
  }
  std::vector<double> y(m.rows());
  for (std::size_t i = 0; i < m.rows(); ++i) {
    const auto r = m.row(i);
    double acc = 0.0;
    for (std::size_t j = 0; j < r.size(); ++j) acc += r[j] * x[j];
    y[i] = acc;
  }
  return y;
}

std::vector<double> matvec_transposed(const Matrix& m, std::span<const double> x) {
  if (m.rows() != x.size()) {
    throw DimensionError("matvec_transposed shape mismatch: " + m.shape_string() +
                         "^T x " + std::to_string(x.size()));
  }
  std::vector<double> y(m.cols(), 0.0);
  for (std::size_t i = 0; i < m.rows(); ++i) {
    const auto r = m.row(i);
    const double xi = x[i];
    for (std::size_t j = 0; j < r.size(); ++j) y[j] += r[j] * xi;
  }
  return y;
}

void add_outer(Matrix& m, double alpha, std::span<const double> u, std::span<const double> v) {
  if (m.rows() != u.size() || m.cols() != v.size()) {
    throw DimensionError("outer product " + std::to_string(u.size()) + "x" +
                         std::to_string(v.size()) + " into " + m.shape_string());
  }
  for (std::size_t i = 0; i < u.size(); ++i) {
    const double s = alpha * u[i];
    if (s == 0.0) continue;
    auto r = m.row(i);
    for (std::size_t j = 0; j < v.size(); ++j) r[j] += s * v[j];
  }
}

TokenDistribution::TokenDistribution(std::vector<double> probs) : probs_(std::move(probs)) {
  double sum = 0.0;
  for (double p : probs_) {
    if (!(p >= 0.0) || !std::isfinite(p)) {
      throw NumericInputError("probability entries must be finite and non-negative");
    }
    sum += p;
  }
  if (probs_.empty() || std::abs(sum - 1.0) > 1e-9) {
    throw NumericInputError("probabilities sum to " + std::to_string(sum) + ", expected 1");
  }
}

TokenDistribution TokenDistribution::uniform(std::size_t v) {
  return TokenDistribution(std::vector<double>(v, 1.0 / static_cast<double>(v)), Unchecked{});
}

TokenId TokenDistribution::argmax() const {
  std::size_t best = 0;
  for (std::size_t i = 1; i < probs_.size(); ++i) {
    if (probs_[i] > probs_[best]) best = i;
  }
  return static_cast<TokenId>(best);
}

TokenDistribution softmax(std::span<const double> logits) {
  if (logits.empty()) throw NumericInputError("softmax of an empty vector");
  double max_logit = logits[0];
  for (double x : logits) {
    if (!std::isfinite(x)) throw NumericInputError("softmax input contains a non-finite logit");
    max_logit = std::max(max_logit, x);
  }
  std::vector<double> probs(logits.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    probs[i] = std::exp(logits[i] - max_logit);
    sum += probs[i];
  }
  for (double& p : probs) p /= sum;
  return TokenDistribution(std::move(probs), TokenDistribution::Unchecked{});
}

double cross_entropy(const TokenDistribution& dist, TokenId target) {
  if (target >= dist.size()) {
    throw IndexError("target token " + std::to_string(target) + " outside vocabulary of size " +
                     std::to_string(dist.size()));
  }
  return -std::log(std::max(dist[target], kProbabilityFloor));
}

double mse(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) {
    throw DimensionError("mse length mismatch: " + std::to_string(x.size()) + " vs " +
                         std::to_string(y.size()));
  }
  double acc = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double diff = x[i] - y[i];
    acc += diff * diff;
  }
  return acc;
}

void adam_step(Matrix& params, const Matrix& grads, AdamState& state) {
  if (params.rows() != grads.rows() || params.cols() != grads.cols() ||
      state.m.rows() != params.rows() || state.m.cols() != params.cols()) {
    throw DimensionError("adam_step shape mismatch: params " + params.shape_string() +
                         ", grads " + grads.shape_string() + ", moments " +
                         state.m.shape_string());
  }
  const AdamOptions& o = state.options;
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(o.beta1, t);
  const double c2 = 1.0 - std::pow(o.beta2, t);

  auto p = params.data();
  auto g = grads.data();
  auto m = state.m.data();
  auto v = state.v.data();
  for (std::size_t i = 0; i < p.size(); ++i) {
    m[i] = o.beta1 * m[i] + (1.0 - o.beta1) * g[i];
    v[i] = o.beta2 * v[i] + (1.0 - o.beta2) * g[i] * g[i];
    const double m_hat = m[i] / c1;
    const double v_hat = v[i] / c2;
    p[i] -= o.lr * m_hat / (std::sqrt(v_hat) + o.eps);
  }
}

std::uint64_t float32_checksum(std::span<const double> values, std::uint64_t seed) {
  std::uint64_t h = seed;
  for (double x : values) {
    auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(x));
    for (int b = 0; b < 4; ++b) {
      h ^= (bits >> (8 * b)) & 0xffu;
      h *= 0x100000001b3ULL;
    }
  }
  return h;
}

}  // namespace pema
