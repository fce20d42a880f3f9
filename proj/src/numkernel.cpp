#include "stagescope/numkernel.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <string>

#include "stagescope/error.hpp"

namespace stagescope {

namespace {

using RowMajor = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMajor>;
using MutMap = Eigen::Map<RowMajor>;

ConstMap view(const Matrix& m) {
  return ConstMap(m.data().data(), static_cast<Eigen::Index>(m.rows()),
                  static_cast<Eigen::Index>(m.cols()));
}

MutMap view(Matrix& m) {
  return MutMap(m.data().data(), static_cast<Eigen::Index>(m.rows()),
                static_cast<Eigen::Index>(m.cols()));
}

std::string dims(const Matrix& m) {
  return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

}  // namespace

Matrix::Matrix(std::size_t rows, std::size_t cols, float fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<float> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows * cols) {
    throw ShapeError("matrix data length " + std::to_string(data_.size()) + " does not match " +
                     std::to_string(rows) + "x" + std::to_string(cols));
  }
}

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0f;
  return m;
}

Matrix Matrix::transposed() const {
  Matrix t(cols_, rows_);
  for (std::size_t r = 0; r < rows_; ++r)
    for (std::size_t c = 0; c < cols_; ++c) t(c, r) = (*this)(r, c);
  return t;
}

bool Matrix::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](float v) { return std::isfinite(v); });
}

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul dimension mismatch: " + dims(a) + " * " + dims(b));
  }
  Matrix out(a.rows(), b.cols());
  if (a.rows() == 0 || b.cols() == 0) return out;
  if (a.cols() == 0) return out;
  view(out).noalias() = view(a) * view(b);
  return out;
}

Matrix linear(const Matrix& x, const Matrix& w, std::span<const float> bias) {
  if (x.cols() != w.cols()) {
    throw ShapeError("linear dimension mismatch: input " + dims(x) + ", weight " + dims(w));
  }
  if (!bias.empty() && bias.size() != w.rows()) {
    throw ShapeError("linear bias length " + std::to_string(bias.size()) + " for weight " +
                     dims(w));
  }
  Matrix out(x.rows(), w.rows());
  if (x.rows() == 0 || w.rows() == 0) return out;
  view(out).noalias() = view(x) * view(w).transpose();
  if (!bias.empty()) {
    for (std::size_t r = 0; r < out.rows(); ++r) {
      auto row = out.row(r);
      for (std::size_t c = 0; c < row.size(); ++c) row[c] += bias[c];
    }
  }
  return out;
}

void softmax_rows_inplace(Matrix& m) {
  for (std::size_t r = 0; r < m.rows(); ++r) {
    auto row = m.row(r);
    if (row.empty()) continue;
    const float mx = *std::max_element(row.begin(), row.end());
    double sum = 0.0;
    for (float& v : row) {
      v = std::exp(v - mx);
      sum += v;
    }
    const double inv = 1.0 / sum;
    for (float& v : row) v = static_cast<float>(v * inv);
  }
}

Matrix softmax_rows(const Matrix& m) {
  Matrix out = m;
  softmax_rows_inplace(out);
  return out;
}

std::vector<double> softmax(std::span<const float> logits) {
  std::vector<double> p(logits.size());
  if (logits.empty()) return p;
  const double mx = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    p[i] = std::exp(static_cast<double>(logits[i]) - mx);
    sum += p[i];
  }
  for (double& v : p) v /= sum;
  return p;
}

std::vector<float> layer_norm(std::span<const float> x, std::span<const float> gamma,
                              std::span<const float> beta, double eps) {
  if (gamma.size() != x.size() || beta.size() != x.size()) {
    throw ShapeError("layer_norm length mismatch: x " + std::to_string(x.size()) + ", gamma " +
                     std::to_string(gamma.size()) + ", beta " + std::to_string(beta.size()));
  }
  std::vector<float> out(x.size());
  if (x.empty()) return out;
  double mean = 0.0;
  for (float v : x) mean += v;
  mean /= static_cast<double>(x.size());
  double var = 0.0;
  for (float v : x) var += (v - mean) * (v - mean);
  var /= static_cast<double>(x.size());
  const double inv = 1.0 / std::sqrt(var + eps);
  for (std::size_t i = 0; i < x.size(); ++i) {
    out[i] = static_cast<float>((x[i] - mean) * inv * gamma[i] + beta[i]);
  }
  return out;
}

void layer_norm_rows(const Matrix& x, std::span<const float> gamma, std::span<const float> beta,
                     double eps, Matrix& out) {
  if (out.rows() != x.rows() || out.cols() != x.cols()) out = Matrix(x.rows(), x.cols());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto normed = layer_norm(x.row(r), gamma, beta, eps);
    std::copy(normed.begin(), normed.end(), out.row(r).begin());
  }
}

float gelu(float x) {
  constexpr double kSqrt2OverPi = 0.7978845608028654;
  const double xd = x;
  return static_cast<float>(0.5 * xd * (1.0 + std::tanh(kSqrt2OverPi * (xd + 0.044715 * xd * xd * xd))));
}

std::vector<float> gelu(std::span<const float> x) {
  std::vector<float> out(x.begin(), x.end());
  gelu_inplace(out);
  return out;
}

void gelu_inplace(std::span<float> x) {
  for (float& v : x) v = gelu(v);
}

Moments moments(std::span<const double> v) {
  if (v.size() < 2) {
    throw ValidationError("moments need at least 2 values, got " + std::to_string(v.size()));
  }
  const double n = static_cast<double>(v.size());
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= n;
  double m2 = 0.0, m3 = 0.0, m4 = 0.0;
  for (double x : v) {
    const double d = x - mean;
    const double d2 = d * d;
    m2 += d2;
    m3 += d2 * d;
    m4 += d2 * d2;
  }
  m2 /= n;
  m3 /= n;
  m4 /= n;
  Moments out;
  out.mean = mean;
  out.variance = m2;
  if (m2 > 0.0) {
    out.skew = m3 / std::pow(m2, 1.5);
    out.excess_kurtosis = m4 / (m2 * m2) - 3.0;
  }
  return out;
}

Moments moments(std::span<const float> v) {
  std::vector<double> wide(v.begin(), v.end());
  return moments(std::span<const double>(wide));
}

namespace {

template <typename T>
double cosine_impl(std::span<const T> u, std::span<const T> v) {
  if (u.size() != v.size()) {
    throw ShapeError("cosine length mismatch: " + std::to_string(u.size()) + " vs " +
                     std::to_string(v.size()));
  }
  double uv = 0.0, uu = 0.0, vv = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    uv += static_cast<double>(u[i]) * v[i];
    uu += static_cast<double>(u[i]) * u[i];
    vv += static_cast<double>(v[i]) * v[i];
  }
  if (uu == 0.0 || vv == 0.0) return kUndefined;
  return std::clamp(uv / (std::sqrt(uu) * std::sqrt(vv)), -1.0, 1.0);
}

}  // namespace

double cosine(std::span<const float> u, std::span<const float> v) { return cosine_impl(u, v); }
double cosine(std::span<const double> u, std::span<const double> v) { return cosine_impl(u, v); }

double dot(std::span<const float> u, std::span<const float> v) {
  if (u.size() != v.size()) throw ShapeError("dot length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) s += static_cast<double>(u[i]) * v[i];
  return s;
}

double l2_norm(std::span<const float> v) { return std::sqrt(dot(v, v)); }

std::size_t argmax(std::span<const float> v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = i;
  return best;
}

}  // namespace stagescope
