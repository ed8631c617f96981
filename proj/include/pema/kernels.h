#ifndef PEMA_KERNELS_H
#define PEMA_KERNELS_H

#include <cstddef>
#include <span>

// Data-parallel inner loops. Each kernel has a serial reference and an
// OpenMP variant. The parallel variants split only over independent output
// entries, so each output is accumulated in exactly the serial order and
// the two are bit-identical.

namespace pema::kernels {

namespace serial {

// out[m x n] = a[m x k] * b[k x n], row-major.
void matmul(std::span<const double> a, std::span<const double> b, std::span<double> out,
            std::size_t m, std::size_t k, std::size_t n);

// out[i] = sum_j (points[i*dim + j] - query[j])^2, accumulated over j in order.
void squared_distances(std::span<const float> points, std::span<const double> query,
                       std::span<double> out);

}  // namespace serial

namespace omp {

void matmul(std::span<const double> a, std::span<const double> b, std::span<double> out,
            std::size_t m, std::size_t k, std::size_t n);

void squared_distances(std::span<const float> points, std::span<const double> query,
                       std::span<double> out);

}  // namespace omp

// True when the OpenMP variants were compiled with OpenMP enabled.
bool openmp_enabled();
int max_threads();

// Dispatch: OpenMP above a work threshold, serial below it.
void matmul(std::span<const double> a, std::span<const double> b, std::span<double> out,
            std::size_t m, std::size_t k, std::size_t n);
void squared_distances(std::span<const float> points, std::span<const double> query,
                       std::span<double> out);

}  // namespace pema::kernels

#endif  // PEMA_KERNELS_H
