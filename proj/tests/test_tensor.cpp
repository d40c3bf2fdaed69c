#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "prompthash/rng.hpp"
#include "prompthash/tensor.hpp"

using namespace prompthash;

TEST_CASE("tensor shape and indexing") {
  Tensor<float> t({2, 3, 4});
  CHECK(t.rank() == 3);
  CHECK(t.numel() == 24);
  CHECK(t.dim(1) == 3);
  for (std::size_t i = 0; i < t.numel(); ++i) CHECK(t[i] == 0.0f);
  t.at3(1, 2, 3) = 7.0f;
  CHECK(t[1 * 12 + 2 * 4 + 3] == 7.0f);
}

TEST_CASE("tensor scalar and full") {
  auto s = Tensor<double>::scalar(2.5);
  CHECK(s.rank() == 0);
  CHECK(s.numel() == 1);
  CHECK(s[0] == 2.5);
  auto f = Tensor<int>::full({3}, 9);
  CHECK(f[2] == 9);
}

TEST_CASE("tensor cast") {
  Tensor<float> t({2});
  t[0] = 1.5f;
  t[1] = -2.0f;
  auto d = t.cast<double>();
  CHECK(d[0] == doctest::Approx(1.5));
  CHECK(d[1] == doctest::Approx(-2.0));
}

TEST_CASE("shape mismatch raises") {
  Tensor<float> a({2, 3});
  Tensor<float> b({3, 2});
  CHECK_THROWS_AS(require_same_shape(a, b, "test"), ShapeError);
}

TEST_CASE("rng determinism and moments") {
  RngStream r1(42), r2(42);
  for (int i = 0; i < 100; ++i) CHECK(r1.uniform() == r2.uniform());
  RngStream r3(7);
  double sum = 0.0, sq = 0.0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    const double z = r3.normal();
    sum += z;
    sq += z * z;
  }
  CHECK(std::fabs(sum / n) < 0.05);
  CHECK(std::fabs(sq / n - 1.0) < 0.05);
}

TEST_CASE("rng mix gives distinct substreams") {
  CHECK(RngStream::mix(1, 2) != RngStream::mix(2, 1));
  CHECK(RngStream::mix(0, 0) != RngStream::mix(0, 1));
}
