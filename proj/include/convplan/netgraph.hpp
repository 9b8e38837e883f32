#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <variant>
#include <vector>

#include "convplan/tensor.hpp"

namespace convplan {

/// Sliding-window geometry shared by convolution and pooling.
struct Window {
  int kernel = 1;
  int stride = 1;
  int padding = 0;

  /// Entries on either side of the window center, floor(K/2).
  int halo() const { return kernel / 2; }
  /// ceil((extent + 2P - K + 1) / S)
  std::int64_t output_extent(std::int64_t extent) const;
  friend bool operator==(const Window&, const Window&) = default;
};

enum class LayerKind {
  input,
  conv,
  pool,
  relu,
  batchnorm_local,
  batchnorm_spatial,
  fc,
  output,
};

std::string_view to_string(LayerKind kind);
std::optional<LayerKind> parse_layer_kind(std::string_view name);

enum class PoolMode { max, average };

struct InputParams {
  TensorShape shape;
};

struct ConvParams {
  int filters = 1;
  Window window;

  int kernel() const { return window.kernel; }
  int stride() const { return window.stride; }
  int padding() const { return window.padding; }
  int halo() const { return window.halo(); }
};

struct PoolParams {
  Window window{2, 2, 0};
  PoolMode mode = PoolMode::max;
};

struct BatchNormParams {
  double epsilon = 1e-5;
};

struct FcParams {
  int features = 1;
};

using LayerParams = std::variant<std::monostate, InputParams, ConvParams,
                                 PoolParams, BatchNormParams, FcParams>;

struct LayerSpec {
  std::string id;
  LayerKind kind = LayerKind::relu;
  std::vector<std::string> parents;
  LayerParams params;

  const ConvParams& conv() const { return std::get<ConvParams>(params); }
  const PoolParams& pool() const { return std::get<PoolParams>(params); }
  const BatchNormParams& batchnorm() const {
    return std::get<BatchNormParams>(params);
  }
  const FcParams& fc() const { return std::get<FcParams>(params); }
  const InputParams& input() const { return std::get<InputParams>(params); }

  bool is_batchnorm() const {
    return kind == LayerKind::batchnorm_local ||
           kind == LayerKind::batchnorm_spatial;
  }
  /// Conv or pool: layers whose local compute reads a halo.
  std::optional<Window> window() const;
};

/// Validated DAG of layers with resolved shapes. Immutable once built.
class NetworkGraph {
 public:
  /// Validates the layers and orders them topologically (stable by
  /// declaration order). Throws GraphError.
  static NetworkGraph build(std::vector<LayerSpec> layers);

  std::size_t size() const { return layers_.size(); }
  const LayerSpec& layer(std::size_t i) const { return layers_[i]; }
  std::span<const LayerSpec> layers() const { return layers_; }

  /// Index in topological order; throws GraphError for an unknown id.
  std::size_t index_of(std::string_view id) const;
  bool contains(std::string_view id) const;

  const std::vector<std::size_t>& parents(std::size_t i) const {
    return parents_[i];
  }
  const std::vector<std::size_t>& children(std::size_t i) const {
    return children_[i];
  }
  const TensorShape& input_shape(std::size_t i) const { return in_shapes_[i]; }
  const TensorShape& output_shape(std::size_t i) const {
    return out_shapes_[i];
  }

  std::vector<std::size_t> sources() const;
  std::vector<std::size_t> sinks() const;
  /// No layer has more than one parent or child.
  bool is_line() const;

  /// Multiply-accumulate count of the layer's forward pass (0 for cheap layers).
  double forward_flops(std::size_t i) const;

 private:
  std::vector<LayerSpec> layers_;
  std::vector<std::vector<std::size_t>> parents_;
  std::vector<std::vector<std::size_t>> children_;
  std::vector<TensorShape> in_shapes_;
  std::vector<TensorShape> out_shapes_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Covers every layer with source-to-sink paths. The first path has maximum
/// total weight; each later path maximizes the weight of layers not yet
/// covered (covered layers weigh zero). Ties go to earlier layers.
std::vector<std::vector<std::size_t>> longest_path_decomposition(
    const NetworkGraph& g, std::span<const double> weight);

}  // namespace convplan
