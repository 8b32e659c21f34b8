// SPDX-License-Identifier: Apache-2.0
#include "kvshare/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace kvshare {

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

Tensor::Tensor(Shape shape, double fill)
    : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_numel(shape_) != data_.size()) {
    throw DimensionError("tensor shape " + shape_to_string(shape_) + " does not hold " +
                         std::to_string(data_.size()) + " elements");
  }
}

Tensor Tensor::vector(std::vector<double> values) {
  Shape shape{values.size()};
  return Tensor(std::move(shape), std::move(values));
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> values) {
  return Tensor({rows, cols}, std::move(values));
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= shape_.size()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for " +
                         shape_to_string(shape_));
  }
  return shape_[axis];
}

std::size_t Tensor::offset(std::initializer_list<std::size_t> index) const {
  if (index.size() != shape_.size()) {
    throw DimensionError("index rank does not match " + shape_to_string(shape_));
  }
  std::size_t off = 0;
  std::size_t axis = 0;
  for (auto i : index) {
    if (i >= shape_[axis]) throw DimensionError("index out of range for " + shape_to_string(shape_));
    off = off * shape_[axis] + i;
    ++axis;
  }
  return off;
}

double& Tensor::at(std::initializer_list<std::size_t> index) { return data_[offset(index)]; }
double Tensor::at(std::initializer_list<std::size_t> index) const { return data_[offset(index)]; }

double Tensor::item() const {
  if (data_.size() != 1) {
    throw DimensionError("item() needs a single element, got " + shape_to_string(shape_));
  }
  return data_[0];
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_numel(shape) != data_.size()) {
    throw DimensionError("cannot reshape " + shape_to_string(shape_) + " to " +
                         shape_to_string(shape));
  }
  return Tensor(std::move(shape), data_);
}

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("max_abs_diff shape mismatch " + shape_to_string(a.shape()) + " vs " +
                         shape_to_string(b.shape()));
  }
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

double l2_norm(const Tensor& t) {
  double s = 0.0;
  for (double v : t.data()) s += v * v;
  return std::sqrt(s);
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul shape mismatch " + shape_to_string(a.shape()) + " x " +
                         shape_to_string(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor c({m, n});
  auto A = a.data();
  auto B = b.data();
  auto C = c.data();
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = &C[i * n];
    for (std::size_t p = 0; p < k; ++p) {
      const double av = A[i * k + p];
      if (av == 0.0) continue;
      const double* brow = &B[p * n];
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
  return c;
}

Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) throw DimensionError("transpose needs a matrix, got " + shape_to_string(a.shape()));
  const std::size_t m = a.dim(0), n = a.dim(1);
  Tensor t({n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) t[j * m + i] = a[i * n + j];
  return t;
}

Tensor softmax_causal(const Tensor& scores, double scale) {
  if (scores.rank() != 2 || scores.dim(0) != scores.dim(1)) {
    throw DimensionError("softmax_causal needs a square matrix, got " +
                         shape_to_string(scores.shape()));
  }
  if (!(scale > 0.0)) throw std::invalid_argument("softmax_causal scale must be positive");
  const std::size_t s = scores.dim(0);
  Tensor out({s, s});
  for (std::size_t r = 0; r < s; ++r) {
    double mx = -INFINITY;
    for (std::size_t c = 0; c <= r; ++c) mx = std::max(mx, scale * scores[r * s + c]);
    double denom = 0.0;
    for (std::size_t c = 0; c <= r; ++c) {
      const double e = std::exp(scale * scores[r * s + c] - mx);
      out[r * s + c] = e;
      denom += e;
    }
    for (std::size_t c = 0; c <= r; ++c) out[r * s + c] /= denom;
  }
  return out;
}

Tensor rmsnorm(const Tensor& x, const Tensor& gain) {
  if (x.rank() == 0 || gain.rank() != 1 || x.shape().back() != gain.size()) {
    throw DimensionError("rmsnorm gain " + shape_to_string(gain.shape()) +
                         " does not match last axis of " + shape_to_string(x.shape()));
  }
  const std::size_t d = gain.size();
  const std::size_t rows = x.size() / d;
  Tensor out(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    double ms = 0.0;
    for (std::size_t c = 0; c < d; ++c) ms += x[r * d + c] * x[r * d + c];
    const double inv = 1.0 / std::sqrt(ms / static_cast<double>(d) + kRmsNormEpsilon);
    for (std::size_t c = 0; c < d; ++c) out[r * d + c] = x[r * d + c] * inv * gain[c];
  }
  return out;
}

double sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

double silu(double z) { return z * sigmoid(z); }

Tensor swiglu(const Tensor& x) {
  if (x.rank() == 0 || x.shape().back() % 2 != 0) {
    throw DimensionError("swiglu needs an even last extent, got " + shape_to_string(x.shape()));
  }
  const std::size_t two_h = x.shape().back();
  const std::size_t h = two_h / 2;
  const std::size_t rows = x.size() / two_h;
  Shape out_shape = x.shape();
  out_shape.back() = h;
  Tensor out(out_shape);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < h; ++c)
      out[r * h + c] = silu(x[r * two_h + c]) * x[r * two_h + h + c];
  return out;
}

}  // namespace kvshare
