#pragma once

#include <cstdint>
#include <ostream>
#include <span>
#include <vector>

namespace convplan {

/// Extents of an NCHW tensor.
struct TensorShape {
  std::int64_t n = 1;
  std::int64_t c = 1;
  std::int64_t h = 1;
  std::int64_t w = 1;

  std::int64_t count() const { return n * c * h * w; }
  bool valid() const { return n >= 1 && c >= 1 && h >= 1 && w >= 1; }
  friend bool operator==(const TensorShape&, const TensorShape&) = default;
};

std::ostream& operator<<(std::ostream& os, const TensorShape& s);

/// Dense row-major NCHW tensor of doubles.
class Tensor4 {
 public:
  Tensor4() = default;
  explicit Tensor4(TensorShape shape, double fill = 0.0);

  const TensorShape& shape() const { return shape_; }
  std::int64_t size() const { return static_cast<std::int64_t>(values_.size()); }

  std::int64_t offset(std::int64_t n, std::int64_t c, std::int64_t h,
                      std::int64_t w) const {
    return ((n * shape_.c + c) * shape_.h + h) * shape_.w + w;
  }
  double& operator()(std::int64_t n, std::int64_t c, std::int64_t h,
                     std::int64_t w) {
    return values_[static_cast<std::size_t>(offset(n, c, h, w))];
  }
  double operator()(std::int64_t n, std::int64_t c, std::int64_t h,
                    std::int64_t w) const {
    return values_[static_cast<std::size_t>(offset(n, c, h, w))];
  }

  std::span<double> values() { return values_; }
  std::span<const double> values() const { return values_; }

  Tensor4& operator+=(const Tensor4& other);

 private:
  TensorShape shape_{};
  std::vector<double> values_;
};

/// max |a - b| / max |b|; 0 when both are identically zero.
double max_relative_error(const Tensor4& actual, const Tensor4& expected);
double max_relative_error(std::span<const double> actual,
                          std::span<const double> expected);

}  // namespace convplan
