#include "convplan/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "convplan/error.hpp"

namespace convplan {

std::ostream& operator<<(std::ostream& os, const TensorShape& s) {
  return os << s.n << "x" << s.c << "x" << s.h << "x" << s.w;
}

Tensor4::Tensor4(TensorShape shape, double fill)
    : shape_(shape), values_(static_cast<std::size_t>(shape.count()), fill) {}

Tensor4& Tensor4::operator+=(const Tensor4& other) {
  if (!(other.shape_ == shape_)) {
    throw GraphError("tensor add: shape mismatch");
  }
  for (std::size_t i = 0; i < values_.size(); ++i) values_[i] += other.values_[i];
  return *this;
}

double max_relative_error(std::span<const double> actual,
                          std::span<const double> expected) {
  if (actual.size() != expected.size()) {
    return std::numeric_limits<double>::infinity();
  }
  double diff = 0.0;
  double scale = 0.0;
  for (std::size_t i = 0; i < actual.size(); ++i) {
    const double d = std::abs(actual[i] - expected[i]);
    if (std::isnan(d)) return std::numeric_limits<double>::infinity();
    diff = std::max(diff, d);
    scale = std::max(scale, std::abs(expected[i]));
  }
  if (diff == 0.0) return 0.0;
  if (scale == 0.0) return std::numeric_limits<double>::infinity();
  return diff / scale;
}

double max_relative_error(const Tensor4& actual, const Tensor4& expected) {
  if (!(actual.shape() == expected.shape())) {
    return std::numeric_limits<double>::infinity();
  }
  return max_relative_error(actual.values(), expected.values());
}

}  // namespace convplan
