#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace saliency {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream oss;
  oss << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) oss << 'x';
    oss << shape[i];
  }
  oss << ')';
  return oss.str();
}

// Dense row-major array of doubles. Spatial tensors are laid out channel
// first: (K, H, W).
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0)
      : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

  Tensor(Shape shape, std::vector<double> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != shape_numel(shape_)) {
      throw std::invalid_argument("Tensor: data length " +
                                  std::to_string(data_.size()) +
                                  " does not match shape " + shape_str(shape_));
    }
  }

  static Tensor zeros_like(const Tensor& t) { return Tensor(t.shape()); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  const std::vector<double>& values() const noexcept { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  // (k, y, x) access for rank-3 tensors.
  double& at(std::size_t k, std::size_t y, std::size_t x) {
    return data_[(k * shape_[1] + y) * shape_[2] + x];
  }
  double at(std::size_t k, std::size_t y, std::size_t x) const {
    return data_[(k * shape_[1] + y) * shape_[2] + x];
  }

  // Start of row y in channel k of a rank-3 tensor.
  double* row(std::size_t k, std::size_t y) {
    return data_.data() + (k * shape_[1] + y) * shape_[2];
  }
  const double* row(std::size_t k, std::size_t y) const {
    return data_.data() + (k * shape_[1] + y) * shape_[2];
  }

  // Same storage, new shape.
  Tensor reshaped(Shape shape) const {
    if (shape_numel(shape) != data_.size()) {
      throw std::invalid_argument("reshape " + shape_str(shape_) + " -> " +
                                  shape_str(shape));
    }
    return Tensor(std::move(shape), data_);
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(),
                       [](double v) { return std::isfinite(v); });
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

inline void require_same_shape(const Tensor& a, const Tensor& b,
                               const char* what) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument(std::string(what) + ": shape mismatch " +
                                shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
  }
}

enum class BinaryOp { Add, Mul };

inline Tensor elementwise(const Tensor& a, const Tensor& b, BinaryOp op) {
  require_same_shape(a, b, "elementwise");
  Tensor out(a.shape());
  auto o = out.data();
  auto x = a.data();
  auto y = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) {
    o[i] = op == BinaryOp::Add ? x[i] + y[i] : x[i] * y[i];
  }
  return out;
}

struct Norms {
  double l2 = 0.0;
  double maxabs = 0.0;
  double sum = 0.0;
  double possum = 0.0;
};

inline Norms norms(std::span<const double> v) {
  Norms n;
  double sq = 0.0;
  for (double x : v) {
    sq += x * x;
    n.maxabs = std::max(n.maxabs, std::abs(x));
    n.sum += x;
    n.possum += std::max(x, 0.0);
  }
  n.l2 = std::sqrt(sq);
  return n;
}

inline Norms norms(const Tensor& t) { return norms(t.data()); }

inline double l2_norm(std::span<const double> v) {
  double sq = 0.0;
  for (double x : v) sq += x * x;
  return std::sqrt(sq);
}

inline double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

// Column u of the result holds the N x N zero-padded patch centred on spatial
// location u = y * W + x. Rows are ordered channel-major, then kernel row,
// then kernel column: row = (k * N + i) * N + j.
inline Tensor unfold_patches(const Tensor& input, std::size_t kernel) {
  if (input.rank() != 3) {
    throw std::invalid_argument("unfold_patches: expected a K x H x W tensor, got " +
                                shape_str(input.shape()));
  }
  if (kernel == 0 || kernel % 2 == 0) {
    throw std::invalid_argument("unfold_patches: kernel must be odd, got " +
                                std::to_string(kernel));
  }
  const std::size_t K = input.dim(0), H = input.dim(1), W = input.dim(2);
  const std::size_t HW = H * W;
  const auto pad = static_cast<std::ptrdiff_t>(kernel / 2);
  Tensor out({K * kernel * kernel, HW});
  auto o = out.data();
  for (std::size_t k = 0; k < K; ++k) {
    for (std::size_t i = 0; i < kernel; ++i) {
      for (std::size_t j = 0; j < kernel; ++j) {
        const std::size_t row = (k * kernel + i) * kernel + j;
        double* dst = o.data() + row * HW;
        const auto dy = static_cast<std::ptrdiff_t>(i) - pad;
        const auto dx = static_cast<std::ptrdiff_t>(j) - pad;
        for (std::size_t y = 0; y < H; ++y) {
          const auto sy = static_cast<std::ptrdiff_t>(y) + dy;
          if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(H)) continue;
          for (std::size_t x = 0; x < W; ++x) {
            const auto sx = static_cast<std::ptrdiff_t>(x) + dx;
            if (sx < 0 || sx >= static_cast<std::ptrdiff_t>(W)) continue;
            dst[y * W + x] = input.at(k, static_cast<std::size_t>(sy),
                                      static_cast<std::size_t>(sx));
          }
        }
      }
    }
  }
  return out;
}

// Row-major (M x K) * (K x N).
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw std::invalid_argument("matmul: incompatible shapes " +
                                shape_str(a.shape()) + " and " +
                                shape_str(b.shape()));
  }
  const std::size_t M = a.dim(0), K = a.dim(1), N = b.dim(1);
  Tensor out({M, N});
  auto o = out.data();
  auto x = a.data();
  auto y = b.data();
  for (std::size_t m = 0; m < M; ++m) {
    double* orow = o.data() + m * N;
    for (std::size_t k = 0; k < K; ++k) {
      const double s = x[m * K + k];
      if (s == 0.0) continue;
      const double* brow = y.data() + k * N;
      for (std::size_t n = 0; n < N; ++n) orow[n] += s * brow[n];
    }
  }
  return out;
}

}  // namespace saliency
