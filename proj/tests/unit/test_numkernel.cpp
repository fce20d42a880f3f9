#include <doctest.h>

#include <cmath>

#include "stagescope/error.hpp"
#include "stagescope/numkernel.hpp"
#include "support.hpp"

using namespace stagescope;

TEST_CASE("matmul") {
  const Matrix a(2, 2, {1, 2, 3, 4});
  CHECK(matmul(a, Matrix(2, 1, {1, 1})) == Matrix(2, 1, {3, 7}));
  CHECK(matmul(Matrix::identity(2), a) == a);
  CHECK(matmul(a, Matrix(2, 3)) == Matrix(2, 3));
  CHECK_THROWS_AS(matmul(a, Matrix(3, 1)), ShapeError);
  CHECK_THROWS_AS(Matrix(2, 2, std::vector<float>{1, 2, 3}), ShapeError);
}

TEST_CASE("matmul agrees with a naive triple loop") {
  const Matrix a = testing::random_matrix(7, 5, 1), b = testing::random_matrix(5, 9, 2);
  const Matrix c = matmul(a, b);
  for (std::size_t i = 0; i < 7; ++i) {
    for (std::size_t j = 0; j < 9; ++j) {
      double s = 0;
      for (std::size_t k = 0; k < 5; ++k) s += double(a(i, k)) * b(k, j);
      CHECK(c(i, j) == doctest::Approx(s).epsilon(1e-5));
    }
  }
}

TEST_CASE("linear is x times w transposed plus bias") {
  const Matrix x(1, 2, {1, 2});
  const Matrix w(3, 2, {1, 0, 0, 1, 1, 1});
  const std::vector<float> b{10, 20, 30};
  CHECK(linear(x, w, b) == Matrix(1, 3, {11, 22, 33}));
  CHECK(linear(x, w) == Matrix(1, 3, {1, 2, 3}));
}

TEST_CASE("softmax rows") {
  const Matrix s = softmax_rows(Matrix(3, 2, {0, 0, 0, std::log(3.0f), 1000, 1000}));
  CHECK(s(0, 0) == doctest::Approx(0.5));
  CHECK(s(1, 0) == doctest::Approx(0.25));
  CHECK(s(1, 1) == doctest::Approx(0.75));
  CHECK(s(2, 0) == doctest::Approx(0.5));
  CHECK(s.all_finite());

  Matrix big = testing::random_matrix(20, 50, 3, 1e4f);
  softmax_rows_inplace(big);
  for (std::size_t r = 0; r < big.rows(); ++r) {
    double sum = 0;
    for (float v : big.row(r)) {
      CHECK(v >= 0.0f);
      sum += v;
    }
    CHECK(std::abs(sum - 1.0) < 1e-6);
  }
}

TEST_CASE("layer norm") {
  const std::vector<float> ones{1, 1}, zeros{0, 0};
  const auto c = layer_norm(std::vector<float>{4, 4}, ones, zeros, 1e-5);
  CHECK(c[0] == 0.0f);
  CHECK(c[1] == 0.0f);
  const auto y = layer_norm(std::vector<float>{1, 3}, ones, zeros, 1e-12);
  CHECK(y[0] == doctest::Approx(-1.0).epsilon(1e-6));
  CHECK(y[1] == doctest::Approx(1.0).epsilon(1e-6));
  const auto shifted = layer_norm(std::vector<float>{1, 3}, ones, std::vector<float>{5, -2}, 1e-12);
  CHECK(shifted[0] == doctest::Approx(y[0] + 5));
  CHECK(shifted[1] == doctest::Approx(y[1] - 2));
  CHECK_THROWS_AS(layer_norm(std::vector<float>{1, 2, 3}, ones, zeros, 1e-5), ShapeError);

  const auto v = testing::random_vector(64, 4);
  std::vector<float> x(v.begin(), v.end()), g(64, 1.0f), b(64, 0.0f);
  const auto n = layer_norm(x, g, b, 1e-12);
  double mean = 0, var = 0;
  for (float e : n) mean += e;
  mean /= 64;
  for (float e : n) var += (e - mean) * (e - mean);
  var /= 64;
  CHECK(std::abs(mean) < 1e-6);
  CHECK(std::abs(var - 1.0) < 1e-4);
}

TEST_CASE("gelu tanh form") {
  CHECK(gelu(0.0f) == 0.0f);
  CHECK(std::abs(gelu(10.0f) - 10.0f) < 1e-6);
  // 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))) at x = 1
  const double expect = 0.5 * (1 + std::tanh(std::sqrt(2 / M_PI) * 1.044715));
  CHECK(gelu(1.0f) == doctest::Approx(expect).epsilon(1e-7));
  CHECK(gelu(1.0f) == doctest::Approx(0.8412).epsilon(1e-4));
  std::vector<float> xs{-1, 0, 1};
  gelu_inplace(xs);
  CHECK(xs[2] == gelu(1.0f));
}

namespace {

// Two-pass central moments, written independently of the library.
void brute_moments(const std::vector<double>& v, double& skew, double& kurt) {
  double mean = 0;
  for (double x : v) mean += x;
  mean /= v.size();
  double m2 = 0, m3 = 0, m4 = 0;
  for (double x : v) {
    const double d = x - mean;
    m2 += d * d;
    m3 += d * d * d;
    m4 += d * d * d * d;
  }
  m2 /= v.size();
  m3 /= v.size();
  m4 /= v.size();
  skew = m3 / std::pow(m2, 1.5);
  kurt = m4 / (m2 * m2) - 3;
}

}  // namespace

TEST_CASE("moments") {
  const std::vector<double> alt{-1, 1, -1, 1};
  const Moments m = moments(alt);
  CHECK(m.skew == doctest::Approx(0.0));
  CHECK(m.excess_kurtosis == doctest::Approx(-2.0));
  CHECK(m.variance == doctest::Approx(1.0));

  const Moments c = moments(std::vector<double>{3, 3, 3});
  CHECK(c.variance == 0.0);
  CHECK_FALSE(c.shape_defined());
  CHECK_THROWS_AS(moments(std::vector<double>{1}), ValidationError);

  for (unsigned seed = 0; seed < 20; ++seed) {
    const std::size_t n = 10 + seed * 50;
    auto v = testing::random_vector(n, seed);
    for (double& x : v) x = std::exp(x);  // skewed
    double skew = 0, kurt = 0;
    brute_moments(v, skew, kurt);
    const Moments got = moments(v);
    CHECK(std::abs(got.skew - skew) <= 1e-10 * std::abs(skew));
    CHECK(std::abs(got.excess_kurtosis - kurt) <= 1e-10 * std::abs(kurt));
    for (double& x : v) x = -x;
    CHECK(std::abs(moments(v).skew + got.skew) <= 1e-12);
  }
}

TEST_CASE("cosine") {
  const std::vector<float> u{1, 2, 3}, neg{-1, -2, -3};
  CHECK(cosine(u, u) == doctest::Approx(1.0));
  CHECK(cosine(u, neg) == doctest::Approx(-1.0));
  CHECK(cosine(std::vector<float>{1, 0}, std::vector<float>{1, 1}) == doctest::Approx(std::sqrt(0.5)));
  CHECK_FALSE(is_defined(cosine(std::vector<float>{0, 0}, std::vector<float>{0, 0})));
  CHECK_FALSE(is_defined(cosine(std::vector<float>{0, 0}, std::vector<float>{1, 0})));
}

TEST_CASE("argmax ties go to the lowest index") {
  CHECK(argmax(std::vector<float>{1, 3, 3, 2}) == 1);
  CHECK(argmax(std::vector<float>{5}) == 0);
}
