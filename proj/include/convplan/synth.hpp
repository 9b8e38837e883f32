#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "convplan/netgraph.hpp"
#include "convplan/simexec.hpp"
#include "convplan/tensor.hpp"

// Seeded random networks, tensors and parameters for verification runs.
namespace convplan::synth {

struct NetOptions {
  int min_layers = 3;  // including the input layer
  int max_layers = 8;
  std::int64_t max_n = 2;
  std::int64_t max_c = 4;
  std::int64_t min_hw = 16;
  std::int64_t max_hw = 32;
  std::int64_t min_extent = 4;  // layers never shrink a spatial extent below this
  bool batchnorm = true;
  double residual_probability = 0.2;
};

std::vector<LayerSpec> random_layers(std::mt19937_64& rng, const NetOptions& opts = {});
NetworkGraph random_network(std::uint64_t seed, const NetOptions& opts = {});

/// Values uniform in [-1, 1].
Tensor4 random_tensor(const TensorShape& shape, std::mt19937_64& rng);

/// Conv weights uniform in [-1, 1] / sqrt(fan-in); batch-norm scale in [0.5, 1.5] and
/// shift in [-0.5, 0.5].
Parameters random_parameters(const NetworkGraph& g, std::mt19937_64& rng);

/// Random tensors for every input layer and a random loss seed per sink.
StepInputs random_inputs(const NetworkGraph& g, std::mt19937_64& rng);

}  // namespace convplan::synth
