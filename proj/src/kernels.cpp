#include "pema/kernels.h"

#include <cstdint>

#if defined(_OPENMP)
#include <omp.h>
#endif

namespace pema::kernels {

namespace {

constexpr std::size_t kParallelWorkThreshold = 1 << 15;

}  // namespace

namespace serial {

void matmul(std::span<const double> a, std::span<const double> b, std::span<double> out,
            std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += a[i * k + p] * b[p * n + j];
      out[i * n + j] = acc;
    }
  }
}

void squared_distances(std::span<const float> points, std::span<const double> query,
                       std::span<double> out) {
  const std::size_t dim = query.size();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const float* p = points.data() + i * dim;
    double acc = 0.0;
    for (std::size_t j = 0; j < dim; ++j) {
      const double diff = static_cast<double>(p[j]) - query[j];
      acc += diff * diff;
    }
    out[i] = acc;
  }
}

}  // namespace serial

namespace omp {

void matmul(std::span<const double> a, std::span<const double> b, std::span<double> out,
            std::size_t m, std::size_t k, std::size_t n) {
  const auto rows = static_cast<std::int64_t>(m);
#pragma omp parallel for schedule(static)
  for (std::int64_t i = 0; i < rows; ++i) {
    const auto r = static_cast<std::size_t>(i);
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += a[r * k + p] * b[p * n + j];
      out[r * n + j] = acc;
    }
  }
}

void squared_distances(std::span<const float> points, std::span<const double> query,
                       std::span<double> out) {
  const std::size_t dim = query.size();
  const auto count = static_cast<std::int64_t>(out.size());
#pragma omp parallel for schedule(static)
  for (std::int64_t i = 0; i < count; ++i) {
    const float* p = points.data() + static_cast<std::size_t>(i) * dim;
    double acc = 0.0;
    for (std::size_t j = 0; j < dim; ++j) {
      const double diff = static_cast<double>(p[j]) - query[j];
      acc += diff * diff;
    }
    out[static_cast<std::size_t>(i)] = acc;
  }
}

}  // namespace omp

bool openmp_enabled() {
#if defined(_OPENMP)
  return true;
#else
  return false;
#endif
}

int max_threads() {
#if defined(_OPENMP)
  return omp_get_max_threads();
#else
  return 1;
#endif
}

void matmul(std::span<const double> a, std::span<const double> b, std::span<double> out,
            std::size_t m, std::size_t k, std::size_t n) {
  if (m * k * n >= kParallelWorkThreshold && m > 1) {
    omp::matmul(a, b, out, m, k, n);
  } else {
    serial::matmul(a, b, out, m, k, n);
  }
}

void squared_distances(std::span<const float> points, std::span<const double> query,
                       std::span<double> out) {
  if (points.size() >= kParallelWorkThreshold) {
    omp::squared_distances(points, query, out);
  } else {
    serial::squared_distances(points, query, out);
  }
}

}  // namespace pema::kernels
