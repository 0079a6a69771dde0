// Inner-loop kernels. Each kernel has a serial reference and an OpenMP
// variant; the dispatchers pick the parallel path only above a size threshold
// and both paths produce bit-identical results (each output element is owned
// by exactly one thread and its reduction order is fixed).

#pragma once

#include <cstdint>

#include "gm/tensor.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace gm {

inline bool& parallel_enabled() {
  static bool on = true;
  return on;
}

inline void set_parallel(bool on) { parallel_enabled() = on; }

// Below this many multiply-adds the parallel launch costs more than it saves.
inline constexpr std::int64_t kParallelFlopThreshold = 1 << 16;

// C += A * B  (m x k) * (k x n)
template <typename R>
void matmul_acc_serial(const R* a, const R* b, R* c, std::int64_t m,
                       std::int64_t k, std::int64_t n) {
  for (std::int64_t i = 0; i < m; ++i) {
    for (std::int64_t p = 0; p < k; ++p) {
      R av = a[i * k + p];
      if (av == R(0)) continue;
      const R* brow = b + p * n;
      R* crow = c + i * n;
      for (std::int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template <typename R>
void matmul_acc_omp(const R* a, const R* b, R* c, std::int64_t m,
                    std::int64_t k, std::int64_t n) {
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
  for (std::int64_t i = 0; i < m; ++i) {
    for (std::int64_t p = 0; p < k; ++p) {
      R av = a[i * k + p];
      if (av == R(0)) continue;
      const R* brow = b + p * n;
      R* crow = c + i * n;
      for (std::int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template <typename R>
void matmul_acc(const R* a, const R* b, R* c, std::int64_t m, std::int64_t k,
                std::int64_t n) {
  if (parallel_enabled() && m * k * n >= kParallelFlopThreshold && m > 1) {
    matmul_acc_omp(a, b, c, m, k, n);
  } else {
    matmul_acc_serial(a, b, c, m, k, n);
  }
}

template <typename R>
Tensor<R> matmul(const Tensor<R>& a, const Tensor<R>& b) {
  if (a.cols() != b.rows()) {
    throw InputError("matmul: inner dimensions differ, " + a.shape_str() + " * " +
                     b.shape_str());
  }
  Tensor<R> c({a.rows(), b.cols()});
  matmul_acc(a.data(), b.data(), c.data(), a.rows(), a.cols(), b.cols());
  return c;
}

// y = a*x + y over flat vectors.
template <typename R>
void axpy(R alpha, const std::vector<R>& x, std::vector<R>& y) {
  const std::int64_t n = static_cast<std::int64_t>(x.size());
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (parallel_enabled() && n > (1 << 16))
#endif
  for (std::int64_t i = 0; i < n; ++i) y[static_cast<std::size_t>(i)] += alpha * x[static_cast<std::size_t>(i)];
}

inline int max_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

}  // namespace gm
