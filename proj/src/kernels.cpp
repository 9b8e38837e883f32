#include "convplan/kernels.hpp"

#include <cmath>
#include <limits>
#include <sstream>

#include "convplan/error.hpp"

namespace convplan::kernels {

Patch::Patch(const Tensor4& whole)
    : data_(&whole),
      box_(full_box(whole.shape())),
      global_h_(whole.shape().h),
      global_w_(whole.shape().w) {}

Patch::Patch(const Tensor4& data, Box box, std::int64_t global_h, std::int64_t global_w)
    : data_(&data), box_(box), global_h_(global_h), global_w_(global_w) {
  if (!(data.shape().h == box.h.size() && data.shape().w == box.w.size())) {
    throw ShapeError("patch data does not match its box");
  }
}

void Patch::throw_missing(std::int64_t h, std::int64_t w) const {
  std::ostringstream os;
  os << "read of (h=" << h << ", w=" << w << ") outside patch rows " << box_.h
     << " cols " << box_.w << " of a " << global_h_ << "x" << global_w_
     << " tensor";
  throw IndexError(os.str());
}

namespace {

void require(bool ok, const char* what) {
  if (!ok) throw ShapeError(what);
}

std::int64_t floor_div(std::int64_t a, std::int64_t b) {
  std::int64_t q = a / b;
  if ((a % b != 0) && ((a < 0) != (b < 0))) --q;
  return q;
}

}  // namespace

Tensor4 conv_fp(const Tensor4& x, const Tensor4& w, const ConvParams& conv) {
  const auto& s = x.shape();
  const Patch px(x);
  return conv_fp(px, w, conv, {0, conv.window.output_extent(s.h)},
                 {0, conv.window.output_extent(s.w)});
}

Tensor4 conv_fp(const Patch& x, const Tensor4& w, const ConvParams& conv,
                Range out_h, Range out_w) {
  const auto& xs = x.data().shape();
  const auto& ws = w.shape();
  const int k = conv.kernel();
  const int s = conv.stride();
  const int p = conv.padding();
  require(ws.n == conv.filters && ws.c == xs.c && ws.h == k && ws.w == k,
          "conv_fp: weight shape does not match input channels/filters/kernel");
  Tensor4 y({xs.n, ws.n, out_h.size(), out_w.size()});
  for (std::int64_t n = 0; n < xs.n; ++n)
    for (std::int64_t f = 0; f < ws.n; ++f)
      for (std::int64_t i = out_h.begin; i < out_h.end; ++i)
        for (std::int64_t j = out_w.begin; j < out_w.end; ++j) {
          double acc = 0.0;
          for (std::int64_t c = 0; c < xs.c; ++c)
            for (int a = 0; a < k; ++a) {
              const std::int64_t hi = s * i - p + a;
              for (int b = 0; b < k; ++b) {
                const std::int64_t wj = s * j - p + b;
                if (!x.in_global(hi, wj)) continue;
                acc += x.at(n, c, hi, wj) * w(f, c, a, b);
              }
            }
          y(n, f, i - out_h.begin, j - out_w.begin) = acc;
        }
  return y;
}

Tensor4 conv_bp_weights(const Tensor4& x, const Tensor4& dy, const ConvParams& conv) {
  return conv_bp_weights(Patch(x), Patch(dy), conv);
}

Tensor4 conv_bp_weights(const Patch& x, const Patch& dy, const ConvParams& conv) {
  const auto& xs = x.data().shape();
  const auto& ds = dy.data().shape();
  const int k = conv.kernel();
  const int s = conv.stride();
  const int p = conv.padding();
  require(ds.n == xs.n && ds.c == conv.filters,
          "conv_bp_weights: dy shape does not match x / filters");
  require(conv.window.output_extent(x.global_h()) == dy.global_h() &&
              conv.window.output_extent(x.global_w()) == dy.global_w(),
          "conv_bp_weights: dy extents do not match the convolution of x");
  const Box& ob = dy.box();
  Tensor4 dw({conv.filters, xs.c, k, k});
  for (std::int64_t f = 0; f < conv.filters; ++f)
    for (std::int64_t c = 0; c < xs.c; ++c)
      for (int a = 0; a < k; ++a)
        for (int b = 0; b < k; ++b) {
          double acc = 0.0;
          for (std::int64_t n = 0; n < xs.n; ++n)
            for (std::int64_t i = ob.h.begin; i < ob.h.end; ++i) {
              const std::int64_t hi = s * i - p + a;
              for (std::int64_t j = ob.w.begin; j < ob.w.end; ++j) {
                const std::int64_t wj = s * j - p + b;
                if (!x.in_global(hi, wj)) continue;
                acc += dy.at(n, f, i, j) * x.at(n, c, hi, wj);
              }
            }
          dw(f, c, a, b) = acc;
        }
  return dw;
}

Tensor4 conv_bp_data(const Tensor4& dy, const Tensor4& w, const ConvParams& conv,
                     const TensorShape& x_shape) {
  require(conv.window.output_extent(x_shape.h) == dy.shape().h &&
              conv.window.output_extent(x_shape.w) == dy.shape().w &&
              x_shape.n == dy.shape().n,
          "conv_bp_data: dy extents do not match x_shape");
  return conv_bp_data(Patch(dy), w, conv, {0, x_shape.h}, {0, x_shape.w});
}

Tensor4 conv_bp_data(const Patch& dy, const Tensor4& w, const ConvParams& conv,
                     Range in_h, Range in_w) {
  const auto& ds = dy.data().shape();
  const auto& ws = w.shape();
  const int k = conv.kernel();
  const int s = conv.stride();
  const int p = conv.padding();
  require(ws.n == conv.filters && ws.h == k && ws.w == k && ds.c == ws.n,
          "conv_bp_data: weight shape does not match dy filters/kernel");
  Tensor4 dx({ds.n, ws.c, in_h.size(), in_w.size()});
  for (std::int64_t n = 0; n < ds.n; ++n)
    for (std::int64_t c = 0; c < ws.c; ++c)
      for (std::int64_t i = in_h.begin; i < in_h.end; ++i)
        for (std::int64_t j = in_w.begin; j < in_w.end; ++j) {
          double acc = 0.0;
          for (std::int64_t f = 0; f < ws.n; ++f)
            for (int a = 0; a < k; ++a) {
              const std::int64_t th = i + p - a;
              if (th % s != 0) continue;
              const std::int64_t oi = th / s;
              for (int b = 0; b < k; ++b) {
                const std::int64_t tw = j + p - b;
                if (tw % s != 0) continue;
                const std::int64_t oj = tw / s;
                if (!dy.in_global(oi, oj)) continue;
                acc += dy.at(n, f, oi, oj) * w(f, c, a, b);
              }
            }
          dx(n, c, i - in_h.begin, j - in_w.begin) = acc;
        }
  return dx;
}

PoolForward pool_fp(const Tensor4& x, const PoolParams& pool) {
  const auto& s = x.shape();
  return pool_fp(Patch(x), pool, {0, pool.window.output_extent(s.h)},
                 {0, pool.window.output_extent(s.w)});
}

PoolForward pool_fp(const Patch& x, const PoolParams& pool, Range out_h, Range out_w) {
  const auto& xs = x.data().shape();
  const int k = pool.window.kernel;
  const int s = pool.window.stride;
  const int p = pool.window.padding;
  const bool is_max = pool.mode == PoolMode::max;
  const TensorShape ys{xs.n, xs.c, out_h.size(), out_w.size()};
  PoolForward out{Tensor4(ys), is_max ? Tensor4(ys) : Tensor4()};
  const double area = static_cast<double>(k) * k;
  for (std::int64_t n = 0; n < xs.n; ++n)
    for (std::int64_t c = 0; c < xs.c; ++c)
      for (std::int64_t i = out_h.begin; i < out_h.end; ++i)
        for (std::int64_t j = out_w.begin; j < out_w.end; ++j) {
          double acc = is_max ? -std::numeric_limits<double>::infinity() : 0.0;
          std::int64_t arg = -1;
          for (int a = 0; a < k; ++a) {
            const std::int64_t hi = s * i - p + a;
            for (int b = 0; b < k; ++b) {
              const std::int64_t wj = s * j - p + b;
              if (!x.in_global(hi, wj)) continue;
              const double v = x.at(n, c, hi, wj);
              if (!is_max) {
                acc += v;
              } else if (v > acc) {
                acc = v;
                arg = hi * x.global_w() + wj;
              }
            }
          }
          const auto oi = i - out_h.begin;
          const auto oj = j - out_w.begin;
          if (is_max) {
            out.y(n, c, oi, oj) = acc;
            out.argmax(n, c, oi, oj) = static_cast<double>(arg);
          } else {
            out.y(n, c, oi, oj) = acc / area;
          }
        }
  return out;
}

Tensor4 pool_bp(const Tensor4& dy, const Tensor4& argmax, const PoolParams& pool,
                const TensorShape& x_shape) {
  require(pool.window.output_extent(x_shape.h) == dy.shape().h &&
              pool.window.output_extent(x_shape.w) == dy.shape().w,
          "pool_bp: dy extents do not match x_shape");
  if (pool.mode == PoolMode::max) {
    require(argmax.shape() == dy.shape(), "pool_bp: argmax shape mismatch");
    return pool_bp(Patch(dy), Patch(argmax), pool, {0, x_shape.h}, {0, x_shape.w},
                   x_shape.w);
  }
  return pool_bp(Patch(dy), Patch(dy), pool, {0, x_shape.h}, {0, x_shape.w}, x_shape.w);
}

Tensor4 pool_bp(const Patch& dy, const Patch& argmax, const PoolParams& pool,
                Range in_h, Range in_w, std::int64_t x_w) {
  const auto& ds = dy.data().shape();
  const int k = pool.window.kernel;
  const int s = pool.window.stride;
  const int p = pool.window.padding;
  const bool is_max = pool.mode == PoolMode::max;
  const double area = static_cast<double>(k) * k;
  Tensor4 dx({ds.n, ds.c, in_h.size(), in_w.size()});
  for (std::int64_t n = 0; n < ds.n; ++n)
    for (std::int64_t c = 0; c < ds.c; ++c)
      for (std::int64_t i = in_h.begin; i < in_h.end; ++i)
        for (std::int64_t j = in_w.begin; j < in_w.end; ++j) {
          double acc = 0.0;
          const double flat = static_cast<double>(i * x_w + j);
          // Outputs whose windows cover (i, j): oi = (i + p - a) / s.
          const std::int64_t oi_lo = floor_div(i + p - (k - 1) + s - 1, s);
          const std::int64_t oi_hi = floor_div(i + p, s);
          const std::int64_t oj_lo = floor_div(j + p - (k - 1) + s - 1, s);
          const std::int64_t oj_hi = floor_div(j + p, s);
          for (std::int64_t oi = oi_lo; oi <= oi_hi; ++oi)
            for (std::int64_t oj = oj_lo; oj <= oj_hi; ++oj) {
              if (!dy.in_global(oi, oj)) continue;
              if (is_max) {
                if (argmax.at(n, c, oi, oj) == flat) acc += dy.at(n, c, oi, oj);
              } else {
                acc += dy.at(n, c, oi, oj) / area;
              }
            }
          dx(n, c, i - in_h.begin, j - in_w.begin) = acc;
        }
  return dx;
}

Tensor4 relu_fp(const Tensor4& x) {
  Tensor4 y(x.shape());
  auto in = x.values();
  auto out = y.values();
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = in[i] > 0.0 ? in[i] : 0.0;
  return y;
}

Tensor4 relu_bp(const Tensor4& x, const Tensor4& dy) {
  require(x.shape() == dy.shape(), "relu_bp: shape mismatch");
  Tensor4 dx(x.shape());
  auto in = x.values();
  auto g = dy.values();
  auto out = dx.values();
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = in[i] > 0.0 ? g[i] : 0.0;
  return dx;
}

ChannelSums bn_sums(const Tensor4& x) {
  const auto& s = x.shape();
  ChannelSums out{std::vector<double>(static_cast<std::size_t>(s.c), 0.0),
                  std::vector<double>(static_cast<std::size_t>(s.c), 0.0),
                  s.n * s.h * s.w};
  for (std::int64_t c = 0; c < s.c; ++c) {
    double sum = 0.0;
    double sq = 0.0;
    for (std::int64_t n = 0; n < s.n; ++n)
      for (std::int64_t h = 0; h < s.h; ++h)
        for (std::int64_t w = 0; w < s.w; ++w) {
          const double v = x(n, c, h, w);
          sum += v;
          sq += v * v;
        }
    out.sum[static_cast<std::size_t>(c)] = sum;
    out.sumsq[static_cast<std::size_t>(c)] = sq;
  }
  return out;
}

ChannelMoments bn_moments(const ChannelSums& s) {
  require(s.count > 0, "bn_moments: empty statistics group");
  ChannelMoments m;
  const double n = static_cast<double>(s.count);
  for (std::size_t c = 0; c < s.sum.size(); ++c) {
    const double mean = s.sum[c] / n;
    m.mean.push_back(mean);
    m.var.push_back(std::max(0.0, s.sumsq[c] / n - mean * mean));
  }
  return m;
}

Tensor4 bn_fp(const Tensor4& x, const ChannelMoments& m, const std::vector<double>& gamma,
              const std::vector<double>& beta, double epsilon) {
  const auto& s = x.shape();
  const auto channels = static_cast<std::size_t>(s.c);
  require(m.mean.size() == channels && gamma.size() == channels && beta.size() == channels,
          "bn_fp: per-channel parameter count mismatch");
  Tensor4 y(s);
  for (std::int64_t n = 0; n < s.n; ++n)
    for (std::int64_t c = 0; c < s.c; ++c) {
      const auto ci = static_cast<std::size_t>(c);
      const double inv = 1.0 / std::sqrt(m.var[ci] + epsilon);
      for (std::int64_t h = 0; h < s.h; ++h)
        for (std::int64_t w = 0; w < s.w; ++w)
          y(n, c, h, w) = gamma[ci] * (x(n, c, h, w) - m.mean[ci]) * inv + beta[ci];
    }
  return y;
}

BnGradSums bn_grad_sums(const Tensor4& x, const Tensor4& dy, const ChannelMoments& m,
                        double epsilon) {
  require(x.shape() == dy.shape(), "bn_grad_sums: shape mismatch");
  const auto& s = x.shape();
  BnGradSums out{std::vector<double>(static_cast<std::size_t>(s.c), 0.0),
                 std::vector<double>(static_cast<std::size_t>(s.c), 0.0)};
  for (std::int64_t c = 0; c < s.c; ++c) {
    const auto ci = static_cast<std::size_t>(c);
    const double inv = 1.0 / std::sqrt(m.var[ci] + epsilon);
    double sd = 0.0;
    double sdx = 0.0;
    for (std::int64_t n = 0; n < s.n; ++n)
      for (std::int64_t h = 0; h < s.h; ++h)
        for (std::int64_t w = 0; w < s.w; ++w) {
          const double g = dy(n, c, h, w);
          sd += g;
          sdx += g * (x(n, c, h, w) - m.mean[ci]) * inv;
        }
    out.dy[ci] = sd;
    out.dy_xhat[ci] = sdx;
  }
  return out;
}

Tensor4 bn_bp_data(const Tensor4& x, const Tensor4& dy, const ChannelMoments& m,
                   const std::vector<double>& gamma, double epsilon,
                   const BnGradSums& group, std::int64_t group_count) {
  require(x.shape() == dy.shape(), "bn_bp_data: shape mismatch");
  require(group_count > 0, "bn_bp_data: empty statistics group");
  const auto& s = x.shape();
  const double cnt = static_cast<double>(group_count);
  Tensor4 dx(s);
  for (std::int64_t n = 0; n < s.n; ++n)
    for (std::int64_t c = 0; c < s.c; ++c) {
      const auto ci = static_cast<std::size_t>(c);
      const double inv = 1.0 / std::sqrt(m.var[ci] + epsilon);
      const double mean_dy = group.dy[ci] / cnt;
      const double mean_dyx = group.dy_xhat[ci] / cnt;
      for (std::int64_t h = 0; h < s.h; ++h)
        for (std::int64_t w = 0; w < s.w; ++w) {
          const double xhat = (x(n, c, h, w) - m.mean[ci]) * inv;
          dx(n, c, h, w) = gamma[ci] * inv * (dy(n, c, h, w) - mean_dy - xhat * mean_dyx);
        }
    }
  return dx;
}

}  // namespace convplan::kernels
