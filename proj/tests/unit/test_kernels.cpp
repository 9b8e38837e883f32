#include <doctest.h>

#include <random>

#include "convplan/error.hpp"
#include "convplan/kernels.hpp"
#include "convplan/synth.hpp"
#include "oracles.hpp"

using namespace convplan;
namespace k = convplan::kernels;

namespace {

Tensor4 filled(TensorShape s, std::initializer_list<double> v) {
  Tensor4 t(s);
  std::copy(v.begin(), v.end(), t.values().begin());
  return t;
}

ConvParams conv_of(int f, int kk, int s, int p) { return ConvParams{f, Window{kk, s, p}}; }

}  // namespace

TEST_CASE("conv of ones with same padding") {
  const Tensor4 x({1, 1, 3, 3}, 1.0), w({1, 1, 3, 3}, 1.0);
  const auto y = k::conv_fp(x, w, conv_of(1, 3, 1, 1));
  const std::vector<double> want{4, 6, 4, 6, 9, 6, 4, 6, 4};
  CHECK(std::vector<double>(y.values().begin(), y.values().end()) == want);
}

TEST_CASE("identity and zero kernels") {
  std::mt19937_64 rng(5);
  const auto x = synth::random_tensor({2, 3, 5, 4}, rng);
  Tensor4 eye({3, 3, 1, 1});
  for (int c = 0; c < 3; ++c) eye(c, c, 0, 0) = 1.0;
  CHECK(max_relative_error(k::conv_fp(x, eye, conv_of(3, 1, 1, 0)), x) == 0.0);
  const auto dy = synth::random_tensor({2, 3, 5, 4}, rng);
  CHECK(max_relative_error(k::conv_bp_data(dy, eye, conv_of(3, 1, 1, 0), x.shape()), dy) == 0.0);
  const Tensor4 zero({4, 3, 3, 3});
  const auto y0 = k::conv_fp(x, zero, conv_of(4, 3, 1, 1));
  for (double v : y0.values()) CHECK(v == 0.0);
  const Tensor4 dy0({2, 4, 5, 4});
  const auto dw0 = k::conv_bp_weights(x, dy0, conv_of(4, 3, 1, 1));
  for (double v : dw0.values()) CHECK(v == 0.0);
  const auto dx0 =
      k::conv_bp_data(dy0, synth::random_tensor({4, 3, 3, 3}, rng), conv_of(4, 3, 1, 1), x.shape());
  for (double v : dx0.values()) CHECK(v == 0.0);
}

TEST_CASE("1x1 weight gradient is the inner product") {
  const auto x = filled({1, 1, 2, 2}, {1, 2, 3, 4});
  const auto dy = filled({1, 1, 2, 2}, {0.5, -1, 2, 0.25});
  const auto dw = k::conv_bp_weights(x, dy, conv_of(1, 1, 1, 0));
  CHECK(dw(0, 0, 0, 0) == doctest::Approx(0.5 - 2 + 6 + 1));
}

TEST_CASE("conv matches the direct definition") {
  std::mt19937_64 rng(11);
  for (int kk : {1, 3, 5})
    for (int s : {1, 2})
      for (int p : {0, kk / 2}) {
        const auto x = synth::random_tensor({2, 3, 9, 7}, rng);
        const auto w = synth::random_tensor({4, 3, kk, kk}, rng);
        const auto y = k::conv_fp(x, w, conv_of(4, kk, s, p));
        CHECK(max_relative_error(y, oracle::conv(x, w, Window{kk, s, p})) < 1e-14);
      }
}

TEST_CASE("conv is linear in x") {
  std::mt19937_64 rng(2);
  const auto a = synth::random_tensor({1, 2, 6, 6}, rng), b = synth::random_tensor({1, 2, 6, 6}, rng);
  const auto w = synth::random_tensor({3, 2, 3, 3}, rng);
  Tensor4 mix(a.shape());
  for (std::size_t i = 0; i < mix.values().size(); ++i)
    mix.values()[i] = 2.0 * a.values()[i] - 0.5 * b.values()[i];
  const auto cp = conv_of(3, 3, 1, 1);
  auto want = k::conv_fp(a, w, cp);
  const auto yb = k::conv_fp(b, w, cp);
  for (std::size_t i = 0; i < want.values().size(); ++i)
    want.values()[i] = 2.0 * want.values()[i] - 0.5 * yb.values()[i];
  CHECK(max_relative_error(k::conv_fp(mix, w, cp), want) < 1e-14);
}

TEST_CASE("conv backward passes finite differences and adjointness") {
  std::mt19937_64 rng(3);
  for (int kk : {1, 3})
    for (int s : {1, 2}) {
      const auto cp = conv_of(2, kk, s, kk / 2);
      const auto x = synth::random_tensor({1, 2, 5, 5}, rng);
      const auto w = synth::random_tensor({2, 2, kk, kk}, rng);
      const auto g = synth::random_tensor(k::conv_fp(x, w, cp).shape(), rng);
      const auto dw = k::conv_bp_weights(x, g, cp);
      const auto dx = k::conv_bp_data(g, w, cp, x.shape());
      const auto num_w = oracle::numeric_gradient(
          w, [&](const Tensor4& t) { return oracle::dot(k::conv_fp(x, t, cp), g); }, 1e-6);
      const auto num_x = oracle::numeric_gradient(
          x, [&](const Tensor4& t) { return oracle::dot(k::conv_fp(t, w, cp), g); }, 1e-6);
      CHECK(max_relative_error(dw, num_w) < 1e-6);
      CHECK(max_relative_error(dx, num_x) < 1e-6);
      const double lhs = oracle::dot(k::conv_fp(x, w, cp), g);
      CHECK(std::abs(lhs - oracle::dot(x, dx)) <= 1e-10 * std::abs(lhs));
      CHECK(std::abs(lhs - oracle::dot(w, dw)) <= 1e-10 * std::abs(lhs));
    }
}

TEST_CASE("conv rejects channel mismatches") {
  const Tensor4 x({1, 2, 4, 4}), w({1, 3, 3, 3});
  CHECK_THROWS_AS(k::conv_fp(x, w, conv_of(1, 3, 1, 1)), ShapeError);
}

TEST_CASE("pooling") {
  const auto x = filled({1, 1, 2, 2}, {1, 2, 3, 4});
  const auto mx = k::pool_fp(x, PoolParams{Window{2, 2, 0}, PoolMode::max});
  CHECK(mx.y(0, 0, 0, 0) == 4.0);
  CHECK(mx.argmax(0, 0, 0, 0) == 3.0);
  const auto av = k::pool_fp(x, PoolParams{Window{2, 2, 0}, PoolMode::average});
  CHECK(av.y(0, 0, 0, 0) == doctest::Approx(2.5));
  const Tensor4 dy({1, 1, 1, 1}, 1.0);
  const auto dmax = k::pool_bp(dy, mx.argmax, PoolParams{Window{2, 2, 0}, PoolMode::max}, x.shape());
  CHECK(dmax(0, 0, 1, 1) == 1.0);
  CHECK(dmax(0, 0, 0, 0) == 0.0);
  const auto davg = k::pool_bp(dy, av.argmax, PoolParams{Window{2, 2, 0}, PoolMode::average}, x.shape());
  for (double v : davg.values()) CHECK(v == doctest::Approx(0.25));
}

TEST_CASE("pooling backward passes finite differences") {
  std::mt19937_64 rng(8);
  for (PoolMode mode : {PoolMode::max, PoolMode::average}) {
    const PoolParams pp{Window{3, 2, 1}, mode};
    const auto x = synth::random_tensor({1, 2, 7, 6}, rng);
    const auto fwd = k::pool_fp(x, pp);
    const auto g = synth::random_tensor(fwd.y.shape(), rng);
    const auto dx = k::pool_bp(g, fwd.argmax, pp, x.shape());
    const auto num = oracle::numeric_gradient(
        x, [&](const Tensor4& t) { return oracle::dot(k::pool_fp(t, pp).y, g); }, 1e-6);
    CHECK(max_relative_error(dx, num) < 1e-6);
  }
}

TEST_CASE("relu") {
  const auto x = filled({1, 1, 1, 2}, {-1, 2});
  const auto y = k::relu_fp(x);
  CHECK(y(0, 0, 0, 0) == 0.0);
  CHECK(y(0, 0, 0, 1) == 2.0);
  const auto d = k::relu_bp(x, Tensor4({1, 1, 1, 2}, 1.0));
  CHECK(d(0, 0, 0, 0) == 0.0);
  CHECK(d(0, 0, 0, 1) == 1.0);
}

TEST_CASE("batch norm with identity statistics") {
  std::mt19937_64 rng(4);
  const auto x = synth::random_tensor({2, 3, 4, 4}, rng);
  const k::ChannelMoments m{{0, 0, 0}, {1, 1, 1}};
  const double eps = 1e-5;
  const auto y = k::bn_fp(x, m, {1, 1, 1}, {0, 0, 0}, eps);
  for (std::size_t i = 0; i < x.values().size(); ++i)
    CHECK(y.values()[i] == doctest::Approx(x.values()[i] / std::sqrt(1 + eps)).epsilon(1e-14));
}

TEST_CASE("batch norm backward passes finite differences") {
  std::mt19937_64 rng(6);
  const auto x = synth::random_tensor({2, 2, 3, 3}, rng);
  const std::vector<double> gamma{0.7, 1.3}, beta{0.1, -0.2};
  const double eps = 1e-5;
  const auto g = synth::random_tensor(x.shape(), rng);
  auto loss = [&](const Tensor4& t) {
    const auto m = k::bn_moments(k::bn_sums(t));
    return oracle::dot(k::bn_fp(t, m, gamma, beta, eps), g);
  };
  const auto m = k::bn_moments(k::bn_sums(x));
  const auto sums = k::bn_grad_sums(x, g, m, eps);
  const auto dx = k::bn_bp_data(x, g, m, gamma, eps, sums, x.shape().n * x.shape().h * x.shape().w);
  CHECK(max_relative_error(dx, oracle::numeric_gradient(x, loss, 1e-6)) < 1e-6);
}

TEST_CASE("moments of a constant tensor") {
  const Tensor4 x({2, 1, 3, 3}, 2.5);
  const auto m = k::bn_moments(k::bn_sums(x));
  CHECK(m.mean[0] == doctest::Approx(2.5));
  CHECK(m.var[0] == 0.0);
}

TEST_CASE("patch reads outside the received region throw") {
  const Tensor4 data({1, 1, 2, 2}, 1.0);
  const k::Patch p(data, Box{{0, 1}, {0, 1}, {2, 4}, {0, 2}}, 8, 8);
  CHECK(p.at(0, 0, 3, 1) == 1.0);
  CHECK_THROWS_AS(p.at(0, 0, 1, 1), IndexError);
}
