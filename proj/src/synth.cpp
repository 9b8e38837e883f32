#include "convplan/synth.hpp"

#include <cmath>

namespace convplan::synth {

namespace {

template <typename T>
T pick(std::mt19937_64& rng, std::initializer_list<T> options) {
  std::uniform_int_distribution<std::size_t> d(0, options.size() - 1);
  return *(options.begin() + static_cast<std::ptrdiff_t>(d(rng)));
}

std::int64_t uniform(std::mt19937_64& rng, std::int64_t lo, std::int64_t hi) {
  return std::uniform_int_distribution<std::int64_t>(lo, hi)(rng);
}

bool chance(std::mt19937_64& rng, double p) {
  return std::uniform_real_distribution<double>(0.0, 1.0)(rng) < p;
}

}  // namespace

std::vector<LayerSpec> random_layers(std::mt19937_64& rng, const NetOptions& opts) {
  const int total = static_cast<int>(uniform(rng, opts.min_layers, opts.max_layers));
  std::vector<LayerSpec> layers;
  TensorShape shape{uniform(rng, 1, opts.max_n), uniform(rng, 1, opts.max_c),
                    uniform(rng, opts.min_hw, opts.max_hw), uniform(rng, opts.min_hw, opts.max_hw)};
  layers.push_back({"in", LayerKind::input, {}, InputParams{shape}});

  auto fits = [&](const Window& w) {
    return w.output_extent(shape.h) >= opts.min_extent &&
           w.output_extent(shape.w) >= opts.min_extent && w.kernel <= shape.h + 2 * w.padding &&
           w.kernel <= shape.w + 2 * w.padding;
  };
  auto next_id = [&](const char* stem) { return std::string(stem) + std::to_string(layers.size()); };

  while (static_cast<int>(layers.size()) < total) {
    const std::string prev = layers.back().id;
    const int remaining = total - static_cast<int>(layers.size());
    if (remaining >= 2 && chance(rng, opts.residual_probability)) {
      const std::string branch = next_id("conv");
      layers.push_back({branch, LayerKind::conv, {prev},
                        ConvParams{static_cast<int>(shape.c), Window{3, 1, 1}}});
      layers.push_back({next_id("add"), LayerKind::relu, {prev, branch}, {}});
      continue;
    }
    std::vector<LayerKind> kinds{LayerKind::conv, LayerKind::pool, LayerKind::relu};
    if (opts.batchnorm) {
      kinds.push_back(LayerKind::batchnorm_local);
      kinds.push_back(LayerKind::batchnorm_spatial);
    }
    LayerKind kind = kinds[std::uniform_int_distribution<std::size_t>(0, kinds.size() - 1)(rng)];
    // A norm directly under another norm has identically zero affine gradients.
    const bool is_norm = kind == LayerKind::batchnorm_local || kind == LayerKind::batchnorm_spatial;
    if (is_norm && layers.back().is_batchnorm()) kind = LayerKind::relu;
    switch (kind) {
      case LayerKind::conv: {
        Window w{1, 1, 0};
        for (int attempt = 0; attempt < 20; ++attempt) {
          const int k = pick(rng, {1, 3, 5, 7});
          const Window trial{k, pick(rng, {1, 2}), pick(rng, {0, k / 2})};
          if (fits(trial)) {
            w = trial;
            break;
          }
        }
        const int filters = static_cast<int>(uniform(rng, 1, opts.max_c));
        layers.push_back({next_id("conv"), LayerKind::conv, {prev}, ConvParams{filters, w}});
        shape = {shape.n, filters, w.output_extent(shape.h), w.output_extent(shape.w)};
        break;
      }
      case LayerKind::pool: {
        const Window w = chance(rng, 0.5) ? Window{2, 2, 0} : Window{3, 2, 1};
        if (!fits(w)) {
          layers.push_back({next_id("relu"), LayerKind::relu, {prev}, {}});
          break;
        }
        const PoolMode mode = chance(rng, 0.5) ? PoolMode::max : PoolMode::average;
        layers.push_back({next_id("pool"), LayerKind::pool, {prev}, PoolParams{w, mode}});
        shape = {shape.n, shape.c, w.output_extent(shape.h), w.output_extent(shape.w)};
        break;
      }
      case LayerKind::batchnorm_local:
        layers.push_back({next_id("bnl"), kind, {prev}, BatchNormParams{}});
        break;
      case LayerKind::batchnorm_spatial:
        layers.push_back({next_id("bns"), kind, {prev}, BatchNormParams{}});
        break;
      default:
        layers.push_back({next_id("relu"), LayerKind::relu, {prev}, {}});
        break;
    }
  }
  return layers;
}

NetworkGraph random_network(std::uint64_t seed, const NetOptions& opts) {
  std::mt19937_64 rng(seed);
  return NetworkGraph::build(random_layers(rng, opts));
}

Tensor4 random_tensor(const TensorShape& shape, std::mt19937_64& rng) {
  Tensor4 t(shape);
  std::uniform_real_distribution<double> d(-1.0, 1.0);
  for (double& v : t.values()) v = d(rng);
  return t;
}

Parameters random_parameters(const NetworkGraph& g, std::mt19937_64& rng) {
  Parameters p(g.size());
  for (std::size_t i = 0; i < g.size(); ++i) {
    const auto& l = g.layer(i);
    const std::int64_t c = g.input_shape(i).c;
    if (l.kind == LayerKind::conv) {
      const auto& cv = l.conv();
      p[i].weights = random_tensor({cv.filters, c, cv.kernel(), cv.kernel()}, rng);
      // Keep activations near unit scale through deep stacks.
      const double scale = 1.0 / std::sqrt(static_cast<double>(c * cv.kernel() * cv.kernel()));
      for (double& v : p[i].weights.values()) v *= scale;
    } else if (l.is_batchnorm()) {
      std::uniform_real_distribution<double> gamma(0.5, 1.5), beta(-0.5, 0.5);
      for (std::int64_t k = 0; k < c; ++k) {
        p[i].gamma.push_back(gamma(rng));
        p[i].beta.push_back(beta(rng));
      }
    }
  }
  return p;
}

StepInputs random_inputs(const NetworkGraph& g, std::mt19937_64& rng) {
  StepInputs in;
  for (std::size_t i : g.sources()) {
    in.inputs[g.layer(i).id] = random_tensor(g.output_shape(i), rng);
  }
  for (std::size_t i : g.sinks()) {
    in.loss_seeds[g.layer(i).id] = random_tensor(g.output_shape(i), rng);
  }
  return in;
}

}  // namespace convplan::synth
