// Compares the serial reference matmul against the OpenMP kernel and checks
// that both produce bit-identical output.

#include <chrono>
#include <cstdio>
#include <cstring>
#include <functional>
#include <vector>

#include "gm/common.hpp"
#include "gm/kernels.hpp"
#include "gm/tensor.hpp"

namespace {

using Clock = std::chrono::steady_clock;

double time_ms(const std::function<void()>& f, int reps) {
  f();  // warm up
  auto t0 = Clock::now();
  for (int i = 0; i < reps; ++i) f();
  auto t1 = Clock::now();
  return std::chrono::duration<double, std::milli>(t1 - t0).count() / reps;
}

}  // namespace

int main() {
  std::printf("threads available: %d\n", gm::max_threads());
  std::printf("%8s %12s %12s %9s %10s\n", "size", "serial(ms)", "openmp(ms)", "speedup",
              "identical");
  for (std::int64_t n : {64, 128, 256, 512, 768}) {
    gm::Rng rng(static_cast<std::uint64_t>(n));
    gm::Tensor<double> a({n, n}), b({n, n});
    for (std::int64_t i = 0; i < a.numel(); ++i) a[i] = rng.normal();
    for (std::int64_t i = 0; i < b.numel(); ++i) b[i] = rng.normal();

    gm::Tensor<double> serial_out({n, n});
    gm::Tensor<double> omp_out({n, n});
    const int reps = n <= 256 ? 10 : 3;
    double ts = time_ms(
        [&] {
          std::fill(serial_out.vec().begin(), serial_out.vec().end(), 0.0);
          gm::matmul_acc_serial(a.data(), b.data(), serial_out.data(), n, n, n);
        },
        reps);
    double tp = time_ms(
        [&] {
          std::fill(omp_out.vec().begin(), omp_out.vec().end(), 0.0);
          gm::matmul_acc_omp(a.data(), b.data(), omp_out.data(), n, n, n);
        },
        reps);
    const bool same = std::memcmp(serial_out.data(), omp_out.data(),
                                  sizeof(double) * static_cast<std::size_t>(
                                                       serial_out.numel())) == 0;
    std::printf("%8lld %12.3f %12.3f %8.2fx %10s\n", static_cast<long long>(n), ts, tp,
                ts / tp, same ? "yes" : "NO");
    if (!same) return 1;
  }
  return 0;
}
