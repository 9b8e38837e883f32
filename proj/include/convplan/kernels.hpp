#pragma once

#include <cstdint>
#include <vector>

#include "convplan/dist.hpp"
#include "convplan/netgraph.hpp"
#include "convplan/tensor.hpp"

// Direct reference kernels. Every kernel has a whole-tensor form (the serial
// oracle) and a patch form (one rank's local compute); both share one code
// path and one accumulation order, so a rank's owned outputs are bitwise
// identical to the serial result wherever the sum does not cross ranks.
namespace convplan::kernels {

/// Read-only window onto part of a global tensor. `box` gives the global
/// indices the data covers; `global_h`/`global_w` are the full spatial
/// extents. Reads outside the global extents are padding; reads inside the
/// global extents but outside `box` throw IndexError.
class Patch {
 public:
  explicit Patch(const Tensor4& whole);
  Patch(const Tensor4& data, Box box, std::int64_t global_h, std::int64_t global_w);

  const Box& box() const { return box_; }
  std::int64_t global_h() const { return global_h_; }
  std::int64_t global_w() const { return global_w_; }
  const Tensor4& data() const { return *data_; }

  bool in_global(std::int64_t h, std::int64_t w) const {
    return h >= 0 && h < global_h_ && w >= 0 && w < global_w_;
  }
  /// `k` is the sample offset within the patch; h, w are global.
  double at(std::int64_t k, std::int64_t c, std::int64_t h, std::int64_t w) const {
    if (!box_.h.contains(h) || !box_.w.contains(w)) throw_missing(h, w);
    return (*data_)(k, c, h - box_.h.begin, w - box_.w.begin);
  }

 private:
  [[noreturn]] void throw_missing(std::int64_t h, std::int64_t w) const;

  const Tensor4* data_;
  Box box_;
  std::int64_t global_h_;
  std::int64_t global_w_;
};

// Convolution. Weights have shape F x C x K x K.
Tensor4 conv_fp(const Tensor4& x, const Tensor4& w, const ConvParams& conv);
/// Output rows/columns [out_h, out_w) of the samples in the patch.
Tensor4 conv_fp(const Patch& x, const Tensor4& w, const ConvParams& conv,
                Range out_h, Range out_w);

Tensor4 conv_bp_weights(const Tensor4& x, const Tensor4& dy, const ConvParams& conv);
/// Partial dL/dw summed over the outputs in `dy.box()` only.
Tensor4 conv_bp_weights(const Patch& x, const Patch& dy, const ConvParams& conv);

Tensor4 conv_bp_data(const Tensor4& dy, const Tensor4& w, const ConvParams& conv,
                     const TensorShape& x_shape);
/// dL/dx for input rows/columns [in_h, in_w).
Tensor4 conv_bp_data(const Patch& dy, const Tensor4& w, const ConvParams& conv,
                     Range in_h, Range in_w);

// Pooling. For max pooling `argmax` holds, per output, the flat global
// spatial index h * W + w of the selected input (first maximum in window
// scan order); it is empty for average pooling. Average pooling divides by
// the full window area, padding included.
struct PoolForward {
  Tensor4 y;
  Tensor4 argmax;
};

PoolForward pool_fp(const Tensor4& x, const PoolParams& pool);
PoolForward pool_fp(const Patch& x, const PoolParams& pool, Range out_h, Range out_w);

Tensor4 pool_bp(const Tensor4& dy, const Tensor4& argmax, const PoolParams& pool,
                const TensorShape& x_shape);
/// `argmax` is ignored for average pooling. `x_w` is the global input width.
Tensor4 pool_bp(const Patch& dy, const Patch& argmax, const PoolParams& pool,
                Range in_h, Range in_w, std::int64_t x_w);

Tensor4 relu_fp(const Tensor4& x);
Tensor4 relu_bp(const Tensor4& x, const Tensor4& dy);

// Batch normalization with externally supplied statistics.
struct ChannelSums {
  std::vector<double> sum;
  std::vector<double> sumsq;
  std::int64_t count = 0;  // elements per channel
};

struct ChannelMoments {
  std::vector<double> mean;
  std::vector<double> var;
};

ChannelSums bn_sums(const Tensor4& x);
/// mean = sum / count, var = sumsq / count - mean^2 (floored at 0).
ChannelMoments bn_moments(const ChannelSums& s);

Tensor4 bn_fp(const Tensor4& x, const ChannelMoments& m, const std::vector<double>& gamma,
              const std::vector<double>& beta, double epsilon);

/// Per-channel sums of dy and dy * xhat; these are also the local dL/dbeta
/// and dL/dgamma contributions.
struct BnGradSums {
  std::vector<double> dy;
  std::vector<double> dy_xhat;
};

BnGradSums bn_grad_sums(const Tensor4& x, const Tensor4& dy, const ChannelMoments& m,
                        double epsilon);

/// dx = gamma / sqrt(var + eps) * (dy - sum_dy / n - xhat * sum_dy_xhat / n),
/// with sums and n taken over the whole statistics group.
Tensor4 bn_bp_data(const Tensor4& x, const Tensor4& dy, const ChannelMoments& m,
                   const std::vector<double>& gamma, double epsilon,
                   const BnGradSums& group, std::int64_t group_count);

}  // namespace convplan::kernels
