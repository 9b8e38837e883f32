#include "convplan/dist.hpp"

#include <sstream>

#include "convplan/error.hpp"

namespace convplan {

std::ostream& operator<<(std::ostream& os, const Range& r) {
  return os << "[" << r.begin << "," << r.end << ")";
}

std::ostream& operator<<(std::ostream& os, const Box& b) {
  return os << "n" << b.n << " c" << b.c << " h" << b.h << " w" << b.w;
}

std::ostream& operator<<(std::ostream& os, const LayerDistribution& d) {
  return os << "{" << d.n_parts << "," << d.h_parts << "," << d.w_parts << "}";
}

Box full_box(const TensorShape& s) {
  return {{0, s.n}, {0, s.c}, {0, s.h}, {0, s.w}};
}

Tensor4 extract(const Tensor4& t, const Box& origin, const Box& box) {
  Tensor4 out(box.extents());
  for (std::int64_t n = box.n.begin; n < box.n.end; ++n)
    for (std::int64_t c = box.c.begin; c < box.c.end; ++c)
      for (std::int64_t h = box.h.begin; h < box.h.end; ++h)
        for (std::int64_t w = box.w.begin; w < box.w.end; ++w)
          out(n - box.n.begin, c - box.c.begin, h - box.h.begin,
              w - box.w.begin) =
              t(n - origin.n.begin, c - origin.c.begin, h - origin.h.begin,
                w - origin.w.begin);
  return out;
}

void insert(Tensor4& dst, const Box& origin, const Box& box, const Tensor4& src) {
  if (!(src.shape() == box.extents())) {
    throw MessageError("insert: source extents do not match target box");
  }
  for (std::int64_t n = box.n.begin; n < box.n.end; ++n)
    for (std::int64_t c = box.c.begin; c < box.c.end; ++c)
      for (std::int64_t h = box.h.begin; h < box.h.end; ++h)
        for (std::int64_t w = box.w.begin; w < box.w.end; ++w)
          dst(n - origin.n.begin, c - origin.c.begin, h - origin.h.begin,
              w - origin.w.begin) =
              src(n - box.n.begin, c - box.c.begin, h - box.h.begin,
                  w - box.w.begin);
}

ProcGrid::Coord ProcGrid::coord(int rank) const {
  return {rank / (h * w), (rank / w) % h, rank % w};
}

BlockedDim::BlockedDim(std::int64_t extent, int parts)
    : extent_(extent), parts_(parts) {
  if (parts < 1 || extent < parts) {
    std::ostringstream os;
    os << "cannot split extent " << extent << " into " << parts << " blocks";
    throw DistributionError(os.str());
  }
  base_ = extent / parts;
  rem_ = extent % parts;
}

Range BlockedDim::block(int part) const {
  const std::int64_t p = part;
  const std::int64_t begin = p * base_ + std::min(p, rem_);
  return {begin, begin + base_ + (p < rem_ ? 1 : 0)};
}

int BlockedDim::owner(std::int64_t index) const {
  const std::int64_t big = rem_ * (base_ + 1);
  if (index < big) return static_cast<int>(index / (base_ + 1));
  return static_cast<int>(rem_ + (index - big) / base_);
}

TensorLayout::TensorLayout(LayerDistribution dist, TensorShape shape)
    : dist_(dist),
      shape_(shape),
      n_(shape.n, dist.n_parts),
      h_(shape.h, dist.h_parts),
      w_(shape.w, dist.w_parts) {}

Box TensorLayout::owned(int rank) const {
  if (rank < 0 || rank >= ranks()) {
    std::ostringstream os;
    os << "rank " << rank << " out of range for " << ranks() << " ranks";
    throw DistributionError(os.str());
  }
  const auto c = dist_.grid().coord(rank);
  return {n_.block(c.n), {0, shape_.c}, h_.block(c.h), w_.block(c.w)};
}

Box owned_indices(const LayerDistribution& dist, const TensorShape& shape,
                  int rank) {
  return TensorLayout(dist, shape).owned(rank);
}

std::string_view to_string(Direction d) {
  switch (d) {
    case Direction::north: return "north";
    case Direction::south: return "south";
    case Direction::east: return "east";
    case Direction::west: return "west";
    case Direction::north_east: return "north_east";
    case Direction::north_west: return "north_west";
    case Direction::south_east: return "south_east";
    case Direction::south_west: return "south_west";
  }
  return "?";
}

std::pair<int, int> offset(Direction d) {
  switch (d) {
    case Direction::north: return {-1, 0};
    case Direction::south: return {1, 0};
    case Direction::east: return {0, 1};
    case Direction::west: return {0, -1};
    case Direction::north_east: return {-1, 1};
    case Direction::north_west: return {-1, -1};
    case Direction::south_east: return {1, 1};
    case Direction::south_west: return {1, -1};
  }
  return {0, 0};
}

Direction opposite(Direction d) {
  switch (d) {
    case Direction::north: return Direction::south;
    case Direction::south: return Direction::north;
    case Direction::east: return Direction::west;
    case Direction::west: return Direction::east;
    case Direction::north_east: return Direction::south_west;
    case Direction::north_west: return Direction::south_east;
    case Direction::south_east: return Direction::north_west;
    case Direction::south_west: return Direction::north_east;
  }
  return d;
}

std::int64_t RankHalo::recv_count() const {
  std::int64_t total = 0;
  for (const auto& l : links) total += l.recv.count();
  return total;
}

std::int64_t RankHalo::send_count() const {
  std::int64_t total = 0;
  for (const auto& l : links) total += l.send.count();
  return total;
}

namespace {

std::int64_t floor_div(std::int64_t a, std::int64_t b) {
  std::int64_t q = a / b;
  if ((a % b != 0) && ((a < 0) != (b < 0))) --q;
  return q;
}

std::int64_t ceil_div(std::int64_t a, std::int64_t b) {
  return -floor_div(-a, b);
}

/// Input indices read by outputs [out.begin, out.end).
Range forward_need(Range out, const Window& win, std::int64_t in_extent) {
  const Range need{win.stride * out.begin - win.padding,
                   win.stride * (out.end - 1) - win.padding + win.kernel};
  return need.intersect({0, in_extent});
}

/// Output indices whose windows touch inputs [in.begin, in.end).
Range backward_need(Range in, const Window& win, std::int64_t out_extent) {
  const Range need{
      ceil_div(in.begin - win.kernel + 1 + win.padding, win.stride),
      floor_div(in.end - 1 + win.padding, win.stride) + 1};
  return need.intersect({0, out_extent});
}

Range segment(Range need, Range own, int side) {
  if (side < 0) return need.intersect({std::min(need.begin, own.begin), own.begin});
  if (side > 0) return need.intersect({own.end, std::max(need.end, own.end)});
  return need.intersect(own);
}

bool within(Range inner, Range outer) {
  return inner.empty() || (inner.begin >= outer.begin && inner.end <= outer.end);
}

}  // namespace

HaloSpec halo_spec(const LayerDistribution& dist, const Window& window,
                   const TensorShape& in, HaloPhase phase, std::int64_t out_channels) {
  const TensorShape out{in.n, out_channels > 0 ? out_channels : in.c,
                        window.output_extent(in.h),
                        window.output_extent(in.w)};
  if (!out.valid()) throw DistributionError("halo_spec: empty output");
  const bool fwd = phase == HaloPhase::forward;
  const TensorLayout exchanged(dist, fwd ? in : out);
  const TensorLayout consumer(dist, fwd ? out : in);
  const ProcGrid grid = dist.grid();

  HaloSpec spec(static_cast<std::size_t>(grid.size()));
  for (int p = 0; p < grid.size(); ++p) {
    RankHalo& rh = spec[static_cast<std::size_t>(p)];
    rh.owned = exchanged.owned(p);
    rh.patch = rh.owned;
    const Box mine = consumer.owned(p);
    const Range need_h =
        fwd ? forward_need(mine.h, window, in.h) : backward_need(mine.h, window, out.h);
    const Range need_w =
        fwd ? forward_need(mine.w, window, in.w) : backward_need(mine.w, window, out.w);
    if (need_h.empty() || need_w.empty()) continue;
    rh.patch.h = {std::min(need_h.begin, rh.owned.h.begin),
                  std::max(need_h.end, rh.owned.h.end)};
    rh.patch.w = {std::min(need_w.begin, rh.owned.w.begin),
                  std::max(need_w.end, rh.owned.w.end)};

    const auto c = grid.coord(p);
    for (Direction d : kDirections) {
      const auto [dh, dw] = offset(d);
      const Range rows = segment(need_h, rh.owned.h, dh);
      const Range cols = segment(need_w, rh.owned.w, dw);
      if (rows.empty() || cols.empty()) continue;
      const ProcGrid::Coord pc{c.n, c.h + dh, c.w + dw};
      if (!grid.contains(pc) ||
          !within(rows, exchanged.h_dim().block(pc.h)) ||
          !within(cols, exchanged.w_dim().block(pc.w))) {
        std::ostringstream os;
        os << "rank " << p << " needs rows " << rows << " cols " << cols
           << " (" << to_string(d) << ") beyond its grid neighbors; "
           << "partition thinner than the halo of kernel " << window.kernel
           << " stride " << window.stride;
        throw HaloError(os.str());
      }
      HaloLink& link = rh.links[static_cast<std::size_t>(d)];
      link.peer = grid.rank(pc);
      link.recv = {rh.owned.n, rh.owned.c, rows, cols};
    }
  }
  for (int p = 0; p < grid.size(); ++p) {
    for (Direction d : kDirections) {
      const HaloLink& l = spec[static_cast<std::size_t>(p)].links[static_cast<std::size_t>(d)];
      if (l.recv.empty()) continue;
      HaloLink& back = spec[static_cast<std::size_t>(l.peer)]
                           .links[static_cast<std::size_t>(opposite(d))];
      back.peer = p;
      back.send = l.recv;
    }
  }
  return spec;
}

std::int64_t halo_volume(const HaloSpec& spec) {
  std::int64_t total = 0;
  for (const auto& rh : spec) total += rh.recv_count();
  return total;
}

ShufflePlan shuffle_plan(const TensorLayout& from, const TensorLayout& to) {
  if (!(from.shape() == to.shape())) {
    std::ostringstream os;
    os << "shuffle_plan: shape mismatch " << from.shape() << " vs " << to.shape();
    throw DistributionError(os.str());
  }
  if (from.ranks() != to.ranks()) {
    throw DistributionError("shuffle_plan: rank counts differ");
  }
  ShufflePlan plan;
  const int p = from.ranks();
  std::vector<Box> dst_boxes;
  dst_boxes.reserve(static_cast<std::size_t>(p));
  for (int r = 0; r < p; ++r) dst_boxes.push_back(to.owned(r));
  for (int s = 0; s < p; ++s) {
    const Box src = from.owned(s);
    for (int d = 0; d < p; ++d) {
      const Box moved = src.intersect(dst_boxes[static_cast<std::size_t>(d)]);
      if (moved.empty()) continue;
      if (s == d) {
        plan.kept += moved.count();
      } else {
        plan.transfers.push_back({s, d, moved});
        plan.moved += moved.count();
      }
    }
  }
  return plan;
}

std::string check_layer_distribution(const NetworkGraph& g, std::size_t layer,
                                     const LayerDistribution& dist) {
  const auto& spec = g.layer(layer);
  std::ostringstream os;
  if (dist.n_parts < 1 || dist.h_parts < 1 || dist.w_parts < 1) {
    return "partition counts must be >= 1";
  }
  for (const TensorShape& s : {g.input_shape(layer), g.output_shape(layer)}) {
    if (dist.n_parts > s.n || dist.h_parts > s.h || dist.w_parts > s.w) {
      os << "layer '" << spec.id << "': " << dist << " splits tensor " << s
         << " into empty blocks";
      return os.str();
    }
  }
  if (auto win = spec.window()) {
    try {
      halo_spec(dist, *win, g.input_shape(layer), HaloPhase::forward);
      halo_spec(dist, *win, g.input_shape(layer), HaloPhase::backward,
                g.output_shape(layer).c);
    } catch (const HaloError& e) {
      os << "layer '" << spec.id << "': " << e.what();
      return os.str();
    }
  }
  return {};
}

}  // namespace convplan
