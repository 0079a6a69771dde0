#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "gm/kernels.hpp"
#include "gm/tensor.hpp"

using gm::Tensor;
using T = Tensor<double>;

TEST_CASE("tensor: shape/data consistency is enforced") {
  CHECK_THROWS_AS(T({2, 2}, {1.0, 2.0, 3.0}), gm::InputError);
  CHECK_THROWS_AS(T({0, 2}), gm::InputError);
  T t({2, 3});
  CHECK(t.numel() == 6);
  CHECK(t.rows() == 2);
  CHECK(t.cols() == 3);
}

TEST_CASE("matmul: small hand case") {
  T a({2, 2}, {1, 2, 3, 4});
  T b({2, 2}, {5, 6, 7, 8});
  T c = gm::matmul(a, b);
  CHECK(c.at(0, 0) == 19);
  CHECK(c.at(0, 1) == 22);
  CHECK(c.at(1, 0) == 43);
  CHECK(c.at(1, 1) == 50);
  CHECK_THROWS_AS(gm::matmul(a, T({3, 2})), gm::InputError);
}

TEST_CASE("matmul: serial and OpenMP kernels agree bit-for-bit") {
  gm::Rng rng(11);
  const std::int64_t m = 57, k = 43, n = 61;
  T a({m, k}), b({k, n});
  for (std::int64_t i = 0; i < a.numel(); ++i) a[i] = rng.normal();
  for (std::int64_t i = 0; i < b.numel(); ++i) b[i] = rng.normal();

  T serial({m, n}), parallel({m, n});
  gm::matmul_acc_serial(a.data(), b.data(), serial.data(), m, k, n);
  gm::matmul_acc_omp(a.data(), b.data(), parallel.data(), m, k, n);
  CHECK(serial.vec() == parallel.vec());
}

TEST_CASE("matmul: dispatcher result does not depend on the parallel toggle") {
  gm::Rng rng(12);
  T a({40, 40}), b({40, 40});
  for (std::int64_t i = 0; i < a.numel(); ++i) a[i] = rng.normal();
  for (std::int64_t i = 0; i < b.numel(); ++i) b[i] = rng.normal();

  gm::set_parallel(false);
  T c1 = gm::matmul(a, b);
  gm::set_parallel(true);
  T c2 = gm::matmul(a, b);
  CHECK(c1.vec() == c2.vec());
}

TEST_CASE("float tensors work for the fast profile") {
  Tensor<float> a({2, 2}, {1.f, 2.f, 3.f, 4.f});
  Tensor<float> c = gm::matmul(a, a);
  CHECK(c.at(0, 0) == 7.f);
}
