#pragma once
// Small constructors for hand-written test networks.

#include <string>
#include <vector>

#include "convplan/netgraph.hpp"

namespace convplan::testing {

inline LayerSpec input(std::string id, std::int64_t n, std::int64_t c, std::int64_t h,
                       std::int64_t w) {
  return {std::move(id), LayerKind::input, {}, InputParams{{n, c, h, w}}};
}

inline LayerSpec conv(std::string id, std::string parent, int filters, int k, int s = 1,
                      int p = -1) {
  return {std::move(id), LayerKind::conv, {std::move(parent)},
          ConvParams{filters, Window{k, s, p < 0 ? k / 2 : p}}};
}

inline LayerSpec pool(std::string id, std::string parent, int k, int s, int p = 0,
                      PoolMode mode = PoolMode::max) {
  return {std::move(id), LayerKind::pool, {std::move(parent)}, PoolParams{Window{k, s, p}, mode}};
}

inline LayerSpec relu(std::string id, std::vector<std::string> parents) {
  return {std::move(id), LayerKind::relu, std::move(parents), {}};
}

inline LayerSpec bn(std::string id, std::string parent, bool spatial = false) {
  return {std::move(id), spatial ? LayerKind::batchnorm_spatial : LayerKind::batchnorm_local,
          {std::move(parent)}, BatchNormParams{}};
}

inline LayerSpec fc(std::string id, std::string parent, int features) {
  return {std::move(id), LayerKind::fc, {std::move(parent)}, FcParams{features}};
}

}  // namespace convplan::testing
