#pragma once

// Dense numeric kernel: row-major float matrices, products, softmax,
// layer norm, GELU, and the distribution statistics used by the analyses.
// Model tensors are stored in 32-bit floats; statistics accumulate in
// 64-bit.

#include <cstddef>
#include <limits>
#include <span>
#include <vector>

namespace stagescope {

// Returned by statistics that are undefined for the given input (zero
// variance, zero vectors). Test with is_defined().
inline constexpr double kUndefined = std::numeric_limits<double>::quiet_NaN();

inline bool is_defined(double v) { return v == v; }

class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, float fill = 0.0f);
  // Takes ownership of row-major `data`; throws ShapeError unless
  // data.size() == rows * cols.
  Matrix(std::size_t rows, std::size_t cols, std::vector<float> data);

  static Matrix identity(std::size_t n);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  float& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  float operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<float> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const float> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<float> data() { return data_; }
  std::span<const float> data() const { return data_; }

  Matrix transposed() const;
  bool all_finite() const;

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<float> data_;
};

// a · b. Throws ShapeError when a.cols() != b.rows().
Matrix matmul(const Matrix& a, const Matrix& b);

// x · wᵀ + bias, the linear-layer product for weights stored as
// (output × input). `bias` may be empty.
Matrix linear(const Matrix& x, const Matrix& w, std::span<const float> bias = {});

// Numerically stable softmax of every row.
Matrix softmax_rows(const Matrix& m);
void softmax_rows_inplace(Matrix& m);
std::vector<double> softmax(std::span<const float> logits);

// ((x - mean) / sqrt(var + eps)) * gamma + beta with population variance.
std::vector<float> layer_norm(std::span<const float> x, std::span<const float> gamma,
                              std::span<const float> beta, double eps);
// Row-wise layer norm into `out` (same shape as x).
void layer_norm_rows(const Matrix& x, std::span<const float> gamma, std::span<const float> beta,
                     double eps, Matrix& out);

// tanh approximation, as used by GPT-2.
float gelu(float x);
std::vector<float> gelu(std::span<const float> x);
void gelu_inplace(std::span<float> x);

struct Moments {
  double mean = 0.0;
  double variance = 0.0;  // population
  double skew = kUndefined;
  double excess_kurtosis = kUndefined;

  bool shape_defined() const { return is_defined(skew) && is_defined(excess_kurtosis); }
};

// Central moments. Throws ValidationError for fewer than two values;
// skew and kurtosis are kUndefined when the variance is zero.
Moments moments(std::span<const double> v);
Moments moments(std::span<const float> v);

// dot(u, v) / (|u| |v|). kUndefined when either vector is zero.
double cosine(std::span<const float> u, std::span<const float> v);
double cosine(std::span<const double> u, std::span<const double> v);

double dot(std::span<const float> u, std::span<const float> v);
double l2_norm(std::span<const float> v);

// Lowest index among maximal entries.
std::size_t argmax(std::span<const float> v);

}  // namespace stagescope
