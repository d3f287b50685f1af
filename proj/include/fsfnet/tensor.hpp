#pragma once

#include <cmath>
#include <cstdint>
#include <sstream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace fsfnet {

/// Extents of a rank-4 array. Feature maps are laid out NHWC
/// (batch, height, width, channels) with channels contiguous;
/// convolution kernels reuse the same struct as (out_c, in_c, k_h, k_w).
struct Shape {
  int n = 0;
  int h = 0;
  int w = 0;
  int c = 0;

  std::int64_t numel() const {
    return static_cast<std::int64_t>(n) * h * w * c;
  }
  bool operator==(const Shape&) const = default;

  std::string str() const {
    std::ostringstream os;
    os << n << "x" << h << "x" << w << "x" << c;
    return os.str();
  }
};

[[noreturn]] inline void fail(const std::string& msg) {
  throw std::invalid_argument(msg);
}

/// Dense rank-4 array of floats or doubles. Value semantics; all extents >= 1
/// once constructed with a concrete shape.
template <typename T>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape s, T fill = T(0)) : shape_(s) {
    if (s.n < 1 || s.h < 1 || s.w < 1 || s.c < 1) {
      fail("Tensor: all extents must be >= 1, got " + s.str());
    }
    data_.assign(static_cast<std::size_t>(s.numel()), fill);
  }

  static Tensor zeros(Shape s) { return Tensor(s); }

  const Shape& shape() const { return shape_; }
  std::int64_t numel() const { return static_cast<std::int64_t>(data_.size()); }
  bool empty() const { return data_.empty(); }

  T& at(int n, int y, int x, int c) {
    return data_[idx(n, y, x, c)];
  }
  const T& at(int n, int y, int x, int c) const {
    return data_[idx(n, y, x, c)];
  }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::span<T> flat() { return {data_.data(), data_.size()}; }
  std::span<const T> flat() const { return {data_.data(), data_.size()}; }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  bool all_finite() const {
    for (T v : data_) {
      if (!std::isfinite(static_cast<double>(v))) return false;
    }
    return true;
  }

  bool same_values(const Tensor& o) const {
    return shape_ == o.shape_ && data_ == o.data_;
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out(shape_);
    for (std::int64_t i = 0; i < numel(); ++i) {
      out.data()[i] = static_cast<U>(data_[i]);
    }
    return out;
  }

 private:
  std::size_t idx(int n, int y, int x, int c) const {
    return ((static_cast<std::size_t>(n) * shape_.h + y) * shape_.w + x) *
               shape_.c + c;
  }

  Shape shape_;
  std::vector<T> data_;
};

/// Per-pixel integer class labels, shape (batch, height, width).
/// The reserved value 255 marks pixels excluded from loss and metrics.
struct LabelMap {
  int n = 0;
  int h = 0;
  int w = 0;
  std::vector<std::int32_t> labels;

  LabelMap() = default;
  LabelMap(int n_, int h_, int w_, std::int32_t fill = 0)
      : n(n_), h(h_), w(w_),
        labels(static_cast<std::size_t>(n_) * h_ * w_, fill) {
    if (n_ < 1 || h_ < 1 || w_ < 1) {
      fail("LabelMap: extents must be >= 1");
    }
  }

  std::int32_t& at(int ni, int y, int x) {
    return labels[(static_cast<std::size_t>(ni) * h + y) * w + x];
  }
  std::int32_t at(int ni, int y, int x) const {
    return labels[(static_cast<std::size_t>(ni) * h + y) * w + x];
  }
  std::int64_t numel() const { return static_cast<std::int64_t>(labels.size()); }
  bool operator==(const LabelMap&) const = default;
};

inline constexpr int kIgnoreLabel = 255;

}  // namespace fsfnet
