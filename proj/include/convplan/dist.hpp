#pragma once

#include <array>
#include <cstdint>
#include <ostream>
#include <string_view>
#include <vector>

#include "convplan/netgraph.hpp"
#include "convplan/tensor.hpp"

namespace convplan {

/// Half-open index interval [begin, end).
struct Range {
  std::int64_t begin = 0;
  std::int64_t end = 0;

  std::int64_t size() const { return end > begin ? end - begin : 0; }
  bool empty() const { return end <= begin; }
  bool contains(std::int64_t i) const { return i >= begin && i < end; }
  Range intersect(Range o) const {
    return {std::max(begin, o.begin), std::min(end, o.end)};
  }
  friend bool operator==(const Range&, const Range&) = default;
};

/// Axis-aligned index box of an NCHW tensor.
struct Box {
  Range n, c, h, w;

  std::int64_t count() const { return n.size() * c.size() * h.size() * w.size(); }
  bool empty() const { return count() == 0; }
  TensorShape extents() const { return {n.size(), c.size(), h.size(), w.size()}; }
  Box intersect(const Box& o) const {
    return {n.intersect(o.n), c.intersect(o.c), h.intersect(o.h), w.intersect(o.w)};
  }
  friend bool operator==(const Box&, const Box&) = default;
};

std::ostream& operator<<(std::ostream& os, const Range& r);
std::ostream& operator<<(std::ostream& os, const Box& b);

Box full_box(const TensorShape& s);

/// Copies `box` (global coordinates) out of a tensor whose element [0,0,0,0]
/// sits at `origin`.
Tensor4 extract(const Tensor4& t, const Box& origin, const Box& box);
/// Writes `src` (extents of `box`) into `dst` placed at `origin`.
void insert(Tensor4& dst, const Box& origin, const Box& box, const Tensor4& src);

/// Processor grid over (N, H, W); ranks enumerate row-major in (i_N, i_H, i_W).
struct ProcGrid {
  int n = 1;
  int h = 1;
  int w = 1;

  struct Coord {
    int n = 0, h = 0, w = 0;
    friend bool operator==(const Coord&, const Coord&) = default;
  };

  int size() const { return n * h * w; }
  Coord coord(int rank) const;
  int rank(Coord c) const { return (c.n * h + c.h) * w + c.w; }
  bool contains(Coord c) const {
    return c.n >= 0 && c.n < n && c.h >= 0 && c.h < h && c.w >= 0 && c.w < w;
  }
};

/// Contiguous near-equal blocks of [0, extent); the first extent % parts
/// blocks hold one extra index.
class BlockedDim {
 public:
  BlockedDim(std::int64_t extent, int parts);

  std::int64_t extent() const { return extent_; }
  int parts() const { return parts_; }
  Range block(int part) const;
  int owner(std::int64_t index) const;

 private:
  std::int64_t extent_;
  int parts_;
  std::int64_t base_;
  std::int64_t rem_;
};

/// Blocked sample/spatial distribution of a layer; channels and filters are
/// replicated on every rank.
struct LayerDistribution {
  int n_parts = 1;
  int h_parts = 1;
  int w_parts = 1;

  ProcGrid grid() const { return {n_parts, h_parts, w_parts}; }
  int ranks() const { return n_parts * h_parts * w_parts; }
  bool sample_only() const { return h_parts == 1 && w_parts == 1; }
  friend bool operator==(const LayerDistribution&, const LayerDistribution&) = default;
  friend auto operator<=>(const LayerDistribution&, const LayerDistribution&) = default;
};

std::ostream& operator<<(std::ostream& os, const LayerDistribution& d);

/// A distribution bound to one tensor's extents.
class TensorLayout {
 public:
  TensorLayout(LayerDistribution dist, TensorShape shape);

  const LayerDistribution& dist() const { return dist_; }
  const TensorShape& shape() const { return shape_; }
  int ranks() const { return dist_.ranks(); }
  const BlockedDim& n_dim() const { return n_; }
  const BlockedDim& h_dim() const { return h_; }
  const BlockedDim& w_dim() const { return w_; }

  /// Throws DistributionError when rank is out of range.
  Box owned(int rank) const;

 private:
  LayerDistribution dist_;
  TensorShape shape_;
  BlockedDim n_, h_, w_;
};

/// Indices held by `rank` under `dist` for a tensor of `shape`.
Box owned_indices(const LayerDistribution& dist, const TensorShape& shape, int rank);

enum class Direction {
  north,
  south,
  east,
  west,
  north_east,
  north_west,
  south_east,
  south_west,
};
inline constexpr std::array<Direction, 8> kDirections = {
    Direction::north,      Direction::south,      Direction::east,
    Direction::west,       Direction::north_east, Direction::north_west,
    Direction::south_east, Direction::south_west};

std::string_view to_string(Direction d);
Direction opposite(Direction d);
/// Grid offset (dh, dw) of the peer in direction d.
std::pair<int, int> offset(Direction d);

/// Which tensor a halo serves.
enum class HaloPhase {
  forward,   // x rows/columns needed to compute owned y
  backward,  // dL/dy rows/columns needed to compute owned dL/dx
};

struct HaloLink {
  int peer = -1;  // -1: no exchange in this direction
  Box send;       // owned indices this rank ships to peer
  Box recv;       // indices received from peer
};

/// Halo of one rank. `patch` is the owned block extended by every received
/// region; kernels read from it.
struct RankHalo {
  Box owned;
  Box patch;
  std::array<HaloLink, 8> links;

  const HaloLink& link(Direction d) const {
    return links[static_cast<std::size_t>(d)];
  }
  std::int64_t recv_count() const;
  std::int64_t send_count() const;
};

using HaloSpec = std::vector<RankHalo>;

/// Per-rank halo for a windowed layer whose input has shape `in`.
/// Forward: exchanged tensor is x (shape in). Backward: exchanged tensor is
/// dL/dy, with the layer's output extents and `out_channels` channels
/// (0 means in.c). Throws HaloError when a needed row or column is not on
/// the rank itself or a grid-adjacent rank.
HaloSpec halo_spec(const LayerDistribution& dist, const Window& window,
                   const TensorShape& in, HaloPhase phase = HaloPhase::forward,
                   std::int64_t out_channels = 0);

/// Total halo elements received by all ranks.
std::int64_t halo_volume(const HaloSpec& spec);

struct ShuffleTransfer {
  int src = 0;
  int dst = 0;
  Box box;
};

/// Elements moved between two distributions of one tensor.
struct ShufflePlan {
  std::vector<ShuffleTransfer> transfers;  // src != dst, non-empty boxes
  std::int64_t moved = 0;
  std::int64_t kept = 0;

  bool empty() const { return transfers.empty(); }
};

/// Throws DistributionError if the layouts describe different tensors.
ShufflePlan shuffle_plan(const TensorLayout& from, const TensorLayout& to);

/// Reason the distribution cannot serve the layer, or empty when it can.
std::string check_layer_distribution(const NetworkGraph& g, std::size_t layer,
                                     const LayerDistribution& dist);

}  // namespace convplan
