#include "convplan/simexec.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "convplan/error.hpp"

namespace convplan {

namespace {

using kernels::ChannelMoments;
using kernels::ChannelSums;
using kernels::Patch;

constexpr double kUnset = std::numeric_limits<double>::quiet_NaN();

std::vector<double> flatten(const Tensor4& t) {
  return {t.values().begin(), t.values().end()};
}

Tensor4 unflatten(std::span<const double> v, const TensorShape& shape) {
  Tensor4 t(shape);
  std::copy(v.begin(), v.end(), t.values().begin());
  return t;
}

bool has_data(const Tensor4& t) { return t.size() > 0; }

std::vector<double> affine_or(const std::vector<double>& v, std::int64_t c, double fill) {
  if (v.empty()) return std::vector<double>(static_cast<std::size_t>(c), fill);
  if (static_cast<std::int64_t>(v.size()) != c) {
    throw ShapeError("batch-norm parameter length does not match channels");
  }
  return v;
}

const Tensor4& conv_weights(const NetworkGraph& g, std::size_t i, const Parameters& params) {
  const auto& conv = g.layer(i).conv();
  const TensorShape want{conv.filters, g.input_shape(i).c, conv.kernel(), conv.kernel()};
  if (i >= params.size() || !(params[i].weights.shape() == want) ||
      !has_data(params[i].weights)) {
    std::ostringstream os;
    os << "layer '" << g.layer(i).id << "': weights must have shape " << want;
    throw ShapeError(os.str());
  }
  return params[i].weights;
}

const Tensor4& global_input(const std::map<std::string, Tensor4>& m, const std::string& id,
                            const TensorShape& shape, const char* what) {
  auto it = m.find(id);
  if (it == m.end()) {
    throw ShapeError(std::string("missing ") + what + " for layer '" + id + "'");
  }
  if (!(it->second.shape() == shape)) {
    std::ostringstream os;
    os << what << " for layer '" << id << "' has shape " << it->second.shape()
       << ", expected " << shape;
    throw ShapeError(os.str());
  }
  return it->second;
}

/// Index boxes over which a batch-norm layer takes its statistics.
std::vector<Box> bn_groups(LayerKind kind, const LayerDistribution& dist,
                           const TensorShape& shape) {
  const TensorLayout layout(dist, shape);
  std::vector<Box> groups;
  if (kind == LayerKind::batchnorm_local) {
    for (int r = 0; r < dist.ranks(); ++r) groups.push_back(layout.owned(r));
  } else {
    for (int b = 0; b < dist.n_parts; ++b) {
      groups.push_back({layout.n_dim().block(b), {0, shape.c}, {0, shape.h}, {0, shape.w}});
    }
  }
  return groups;
}

std::string edge_label(const NetworkGraph& g, std::size_t parent, std::size_t child) {
  return g.layer(parent).id + "->" + g.layer(child).id;
}

}  // namespace

std::string_view to_string(Phase p) {
  switch (p) {
    case Phase::fp: return "fp";
    case Phase::bp_data: return "bp-data";
    case Phase::bp_weights: return "bp-weights";
  }
  return "?";
}

std::string_view to_string(MessageTag t) {
  switch (t) {
    case MessageTag::halo: return "halo";
    case MessageTag::shuffle: return "shuffle";
    case MessageTag::reduce: return "allreduce";
  }
  return "?";
}

// ---------------------------------------------------------------------------
// Serial oracle

StepResult serial_step(const NetworkGraph& g, const std::vector<LayerDistribution>& strategy,
                       const Parameters& params, const StepInputs& in) {
  const std::size_t n = g.size();
  auto dist_of = [&](std::size_t i) {
    return strategy.size() == n ? strategy[i] : LayerDistribution{};
  };
  StepResult out;
  out.layers.resize(n);
  std::vector<Tensor4> xs(n), argmax(n);
  std::vector<std::vector<ChannelMoments>> moments(n);

  for (std::size_t i = 0; i < n; ++i) {
    const auto& spec = g.layer(i);
    const TensorShape& in_shape = g.input_shape(i);
    LayerResult& res = out.layers[i];
    if (spec.kind == LayerKind::input) {
      res.y = global_input(in.inputs, spec.id, g.output_shape(i), "input");
      continue;
    }
    Tensor4 x(in_shape);
    for (std::size_t p : g.parents(i)) x += out.layers[p].y;
    switch (spec.kind) {
      case LayerKind::conv:
        res.y = kernels::conv_fp(x, conv_weights(g, i, params), spec.conv());
        break;
      case LayerKind::pool: {
        auto pf = kernels::pool_fp(x, spec.pool());
        res.y = std::move(pf.y);
        argmax[i] = std::move(pf.argmax);
        break;
      }
      case LayerKind::relu: res.y = kernels::relu_fp(x); break;
      case LayerKind::batchnorm_local:
      case LayerKind::batchnorm_spatial: {
        const auto gamma = affine_or(i < params.size() ? params[i].gamma : std::vector<double>{},
                                     in_shape.c, 1.0);
        const auto beta = affine_or(i < params.size() ? params[i].beta : std::vector<double>{},
                                    in_shape.c, 0.0);
        res.y = Tensor4(in_shape);
        const Box whole = full_box(in_shape);
        for (const Box& b : bn_groups(spec.kind, dist_of(i), in_shape)) {
          const Tensor4 sub = extract(x, whole, b);
          auto m = kernels::bn_moments(kernels::bn_sums(sub));
          insert(res.y, whole, b,
                 kernels::bn_fp(sub, m, gamma, beta, spec.batchnorm().epsilon));
          moments[i].push_back(std::move(m));
        }
        break;
      }
      case LayerKind::output: res.y = x; break;
      case LayerKind::fc:
        throw GraphError("layer '" + spec.id + "': fc layers are not executed");
      case LayerKind::input: break;
    }
    xs[i] = std::move(x);
  }

  for (std::size_t k = n; k-- > 0;) {
    const auto& spec = g.layer(k);
    const TensorShape& in_shape = g.input_shape(k);
    LayerResult& res = out.layers[k];
    Tensor4 dy;
    if (g.children(k).empty()) {
      dy = global_input(in.loss_seeds, spec.id, g.output_shape(k), "loss seed");
    } else {
      dy = Tensor4(g.output_shape(k));
      for (std::size_t c : g.children(k)) dy += out.layers[c].dx;
    }
    const Tensor4& x = xs[k];
    switch (spec.kind) {
      case LayerKind::input:
      case LayerKind::output: res.dx = dy; break;
      case LayerKind::conv: {
        const Tensor4& w = conv_weights(g, k, params);
        res.dw = kernels::conv_bp_weights(x, dy, spec.conv());
        res.dx = kernels::conv_bp_data(dy, w, spec.conv(), in_shape);
        break;
      }
      case LayerKind::pool:
        res.dx = kernels::pool_bp(dy, argmax[k], spec.pool(), in_shape);
        break;
      case LayerKind::relu: res.dx = kernels::relu_bp(x, dy); break;
      case LayerKind::batchnorm_local:
      case LayerKind::batchnorm_spatial: {
        const auto gamma = affine_or(k < params.size() ? params[k].gamma : std::vector<double>{},
                                     in_shape.c, 1.0);
        const double eps = spec.batchnorm().epsilon;
        res.dx = Tensor4(in_shape);
        res.dgamma.assign(static_cast<std::size_t>(in_shape.c), 0.0);
        res.dbeta.assign(static_cast<std::size_t>(in_shape.c), 0.0);
        const Box whole = full_box(in_shape);
        const auto groups = bn_groups(spec.kind, dist_of(k), in_shape);
        for (std::size_t gi = 0; gi < groups.size(); ++gi) {
          const Box& b = groups[gi];
          const Tensor4 sx = extract(x, whole, b);
          const Tensor4 sdy = extract(dy, whole, b);
          const auto& m = moments[k][gi];
          const auto gs = kernels::bn_grad_sums(sx, sdy, m, eps);
          insert(res.dx, whole, b,
                 kernels::bn_bp_data(sx, sdy, m, gamma, eps, gs, b.count() / in_shape.c));
          for (std::size_t c = 0; c < res.dgamma.size(); ++c) {
            res.dgamma[c] += gs.dy_xhat[c];
            res.dbeta[c] += gs.dy[c];
          }
        }
        break;
      }
      case LayerKind::fc: break;
    }
  }
  return out;
}

StepComparison compare_steps(const NetworkGraph& g, const StepResult& actual,
                             const StepResult& expected) {
  if (actual.layers.size() != g.size() || expected.layers.size() != g.size()) {
    throw ShapeError("compare_steps: results do not cover the graph");
  }
  StepComparison cmp;
  double worst = -1.0;
  for (std::size_t i = 0; i < g.size(); ++i) {
    const auto& a = actual.layers[i];
    const auto& e = expected.layers[i];
    const double ey = max_relative_error(a.y, e.y);
    const double edx = has_data(e.dx) ? max_relative_error(a.dx, e.dx) : 0.0;
    double edw = 0.0;
    if (has_data(e.dw)) edw = max_relative_error(a.dw, e.dw);
    if (!e.dgamma.empty()) {
      edw = std::max({edw, max_relative_error(a.dgamma, e.dgamma),
                      max_relative_error(a.dbeta, e.dbeta)});
    }
    cmp.y = std::max(cmp.y, ey);
    cmp.dx = std::max(cmp.dx, edx);
    cmp.dw = std::max(cmp.dw, edw);
    const double layer_worst = std::max({ey, edx, edw});
    if (layer_worst > worst) {
      worst = layer_worst;
      cmp.worst_layer = g.layer(i).id;
    }
  }
  return cmp;
}

// ---------------------------------------------------------------------------
// Shards

std::vector<Shard> scatter(const Tensor4& global, const TensorLayout& layout) {
  if (!(global.shape() == layout.shape())) {
    throw ShapeError("scatter: tensor shape does not match layout");
  }
  const Box whole = full_box(global.shape());
  std::vector<Shard> shards;
  for (int r = 0; r < layout.ranks(); ++r) {
    const Box b = layout.owned(r);
    shards.push_back({b, extract(global, whole, b)});
  }
  return shards;
}

Tensor4 gather_global(std::span<const Shard> shards, const TensorShape& shape) {
  Tensor4 out(shape);
  std::vector<int> hits(static_cast<std::size_t>(shape.count()), 0);
  const Box whole = full_box(shape);
  for (const Shard& s : shards) {
    if (!(s.data.shape() == s.box.extents()) || !has_data(s.data)) {
      std::ostringstream os;
      os << "gather: shard data " << s.data.shape() << " does not match box " << s.box;
      throw DistributionError(os.str());
    }
    if (!(s.box.intersect(whole) == s.box)) {
      std::ostringstream os;
      os << "gather: shard box " << s.box << " lies outside " << shape;
      throw DistributionError(os.str());
    }
    insert(out, whole, s.box, s.data);
    for (std::int64_t n = s.box.n.begin; n < s.box.n.end; ++n)
      for (std::int64_t c = s.box.c.begin; c < s.box.c.end; ++c)
        for (std::int64_t h = s.box.h.begin; h < s.box.h.end; ++h)
          for (std::int64_t w = s.box.w.begin; w < s.box.w.end; ++w)
            ++hits[static_cast<std::size_t>(out.offset(n, c, h, w))];
  }
  const auto bad = std::find_if(hits.begin(), hits.end(), [](int h) { return h != 1; });
  if (bad != hits.end()) {
    throw DistributionError(*bad == 0 ? "gather: shards leave a gap"
                                      : "gather: shards overlap");
  }
  return out;
}

// ---------------------------------------------------------------------------
// Messaging

std::int64_t EventLog::bytes(std::string_view action, std::string_view layer) const {
  std::int64_t total = 0;
  for (const auto& r : records_) {
    if (r.action == action && (layer.empty() || r.layer == layer)) total += r.bytes;
  }
  return total;
}

void EventLog::write_csv(std::ostream& os) const {
  os << "step,rank,action,layer,direction,bytes\n";
  for (const auto& r : records_) {
    os << r.step << ',' << r.rank << ',' << r.action << ',' << r.layer << ','
       << r.direction << ',' << r.bytes << '\n';
  }
}

void Mailboxes::send(Message m) {
  const auto bytes = static_cast<std::int64_t>(m.payload.size()) * kSimWordBytes;
  log_.append({step_, m.src,
               std::string(to_string(m.tag)) + "_send:" + std::string(to_string(m.phase)),
               m.layer, m.direction, bytes});
  queues_[{m.src, m.dst, m.tag}].push_back(std::move(m));
}

Message Mailboxes::receive(int src, int dst, MessageTag tag, std::string_view layer,
                           Phase phase, std::int64_t expected_words) {
  auto it = queues_.find({src, dst, tag});
  if (it == queues_.end() || it->second.empty()) {
    std::ostringstream os;
    os << "rank " << dst << " expected a " << to_string(tag) << " message from rank " << src
       << " for layer '" << layer << "' (" << to_string(phase) << ") but none was sent";
    throw MessageError(os.str());
  }
  Message m = std::move(it->second.front());
  it->second.pop_front();
  if (m.layer != layer || m.phase != phase ||
      static_cast<std::int64_t>(m.payload.size()) != expected_words) {
    std::ostringstream os;
    os << "rank " << dst << " received " << m.payload.size() << " words for layer '"
       << m.layer << "' (" << to_string(m.phase) << ") from rank " << src << ", expected "
       << expected_words << " words for layer '" << layer << "' (" << to_string(phase)
       << ")";
    throw MessageError(os.str());
  }
  log_.append({step_, dst,
               std::string(to_string(tag)) + "_recv:" + std::string(to_string(phase)),
               m.layer, m.recv_direction,
               static_cast<std::int64_t>(m.payload.size()) * kSimWordBytes});
  return m;
}

void Mailboxes::log_compute(int rank, std::string_view layer, Phase phase) {
  log_.append({step_, rank, "compute:" + std::string(to_string(phase)), std::string(layer),
               "-", 0});
}

bool Mailboxes::quiescent() const {
  return std::all_of(queues_.begin(), queues_.end(),
                     [](const auto& kv) { return kv.second.empty(); });
}

std::vector<std::vector<double>> allreduce(Mailboxes& net, std::span<const int> group,
                                           std::vector<std::vector<double>> payloads,
                                           std::string_view layer, Phase phase) {
  if (group.empty() || payloads.size() != group.size()) {
    throw MessageError("allreduce: one payload per group member is required");
  }
  const auto words = static_cast<std::int64_t>(payloads.front().size());
  for (const auto& p : payloads) {
    if (static_cast<std::int64_t>(p.size()) != words) {
      throw MessageError("allreduce: payload lengths differ within the group");
    }
  }
  std::vector<std::size_t> order(group.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](auto a, auto b) { return group[a] < group[b]; });
  const int root = group[order.front()];
  auto peer = [](int r) { return "peer=" + std::to_string(r); };

  for (std::size_t i : order) {
    if (group[i] == root) continue;
    net.send({MessageTag::reduce, group[i], root, std::string(layer), phase, peer(root),
              peer(group[i]), std::move(payloads[i])});
  }
  std::vector<double> acc = std::move(payloads[order.front()]);
  for (std::size_t i : order) {
    if (group[i] == root) continue;
    const Message m = net.receive(group[i], root, MessageTag::reduce, layer, phase, words);
    for (std::size_t k = 0; k < acc.size(); ++k) acc[k] += m.payload[k];
  }
  std::vector<std::vector<double>> result(group.size());
  for (std::size_t i : order) {
    if (group[i] == root) continue;
    net.send({MessageTag::reduce, root, group[i], std::string(layer), phase, peer(group[i]),
              peer(root), acc});
  }
  for (std::size_t i : order) {
    if (group[i] == root) {
      result[i] = acc;
    } else {
      result[i] = net.receive(root, group[i], MessageTag::reduce, layer, phase, words).payload;
    }
  }
  return result;
}

std::vector<ChannelMoments> bn_spatial_aggregate(Mailboxes& net, const LayerDistribution& dist,
                                                 std::span<const int> group,
                                                 std::span<const ChannelSums> local,
                                                 std::string_view layer) {
  if (group.empty() || local.size() != group.size()) {
    throw DistributionError("bn_spatial_aggregate: one set of sums per member is required");
  }
  const ProcGrid grid = dist.grid();
  const int block = grid.coord(group.front()).n;
  std::vector<int> want;
  for (int r = 0; r < grid.size(); ++r) {
    if (grid.coord(r).n == block) want.push_back(r);
  }
  std::vector<int> have(group.begin(), group.end());
  std::sort(have.begin(), have.end());
  if (have != want) {
    std::ostringstream os;
    os << "bn_spatial_aggregate: group is not sample block " << block << " of " << dist;
    throw DistributionError(os.str());
  }
  std::vector<std::vector<double>> payloads;
  for (const auto& s : local) {
    std::vector<double> p = s.sum;
    p.insert(p.end(), s.sumsq.begin(), s.sumsq.end());
    p.push_back(static_cast<double>(s.count));
    payloads.push_back(std::move(p));
  }
  const auto reduced = allreduce(net, group, std::move(payloads), layer, Phase::fp);
  std::vector<ChannelMoments> out;
  for (const auto& r : reduced) {
    const std::size_t c = (r.size() - 1) / 2;
    ChannelSums s;
    s.sum.assign(r.begin(), r.begin() + static_cast<std::ptrdiff_t>(c));
    s.sumsq.assign(r.begin() + static_cast<std::ptrdiff_t>(c),
                   r.begin() + static_cast<std::ptrdiff_t>(2 * c));
    s.count = static_cast<std::int64_t>(std::llround(r.back()));
    out.push_back(kernels::bn_moments(s));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Distributed executor

namespace {

/// Moves one tensor between layouts; shards are indexed by rank.
std::vector<Shard> redistribute(Mailboxes& net, const std::vector<Shard>& src,
                                const TensorLayout& from, const TensorLayout& to,
                                const std::string& label, Phase phase) {
  if (from.dist() == to.dist()) return src;
  const ShufflePlan plan = shuffle_plan(from, to);
  std::vector<Shard> dst;
  for (int r = 0; r < to.ranks(); ++r) {
    const Box b = to.owned(r);
    dst.push_back({b, Tensor4(b.extents(), kUnset)});
  }
  for (const auto& t : plan.transfers) {
    const Shard& s = src[static_cast<std::size_t>(t.src)];
    net.send({MessageTag::shuffle, t.src, t.dst, label, phase, "peer=" + std::to_string(t.dst),
              "peer=" + std::to_string(t.src), flatten(extract(s.data, s.box, t.box))});
  }
  for (int r = 0; r < to.ranks(); ++r) {
    const Shard& s = src[static_cast<std::size_t>(r)];
    Shard& d = dst[static_cast<std::size_t>(r)];
    const Box kept = s.box.intersect(d.box);
    if (!kept.empty()) insert(d.data, d.box, kept, extract(s.data, s.box, kept));
  }
  for (const auto& t : plan.transfers) {
    const Message m = net.receive(t.src, t.dst, MessageTag::shuffle, label, phase, t.box.count());
    Shard& d = dst[static_cast<std::size_t>(t.dst)];
    insert(d.data, d.box, t.box, unflatten(m.payload, t.box.extents()));
  }
  return dst;
}

Box with_channels(Box b, const Box& like) {
  b.c = like.c;
  return b;
}

/// fields[f][rank]: tensors exchanged together in one message per link.
using Fields = std::vector<std::vector<const Shard*>>;

void post_halo(Mailboxes& net, const HaloSpec& spec, const Fields& fields,
               const std::string& layer, Phase phase) {
  for (int p = 0; p < static_cast<int>(spec.size()); ++p) {
    const RankHalo& rh = spec[static_cast<std::size_t>(p)];
    for (Direction d : kDirections) {
      const HaloLink& l = rh.link(d);
      if (l.send.empty()) continue;
      std::vector<double> payload;
      for (const auto& f : fields) {
        const Shard& s = *f[static_cast<std::size_t>(p)];
        const auto part = flatten(extract(s.data, s.box, with_channels(l.send, s.box)));
        payload.insert(payload.end(), part.begin(), part.end());
      }
      net.send({MessageTag::halo, p, l.peer, layer, phase, std::string(to_string(d)),
                std::string(to_string(opposite(d))), std::move(payload)});
    }
  }
}

/// Receives rank p's halo into patches [field]; cells never received stay NaN.
std::vector<Shard> complete_halo(Mailboxes& net, const HaloSpec& spec, const Fields& fields,
                                 int p, const std::string& layer, Phase phase, bool corrupt) {
  const RankHalo& rh = spec[static_cast<std::size_t>(p)];
  std::vector<Shard> patches;
  for (const auto& f : fields) {
    const Shard& s = *f[static_cast<std::size_t>(p)];
    const Box pb = with_channels(rh.patch, s.box);
    Shard patch{pb, Tensor4(pb.extents(), kUnset)};
    insert(patch.data, pb, s.box, s.data);
    patches.push_back(std::move(patch));
  }
  // Sends were posted in direction order, so receive in the peer's order too.
  for (Direction d : kDirections) {
    const HaloLink& l = rh.link(d);
    if (l.recv.empty()) continue;
    std::vector<Box> boxes;
    std::int64_t words = 0;
    for (const auto& patch : patches) {
      boxes.push_back(with_channels(l.recv, patch.box));
      words += boxes.back().count();
    }
    const Message m = net.receive(l.peer, p, MessageTag::halo, layer, phase, words);
    std::size_t at = 0;
    for (std::size_t f = 0; f < patches.size(); ++f) {
      const auto n = static_cast<std::size_t>(boxes[f].count());
      insert(patches[f].data, patches[f].box, boxes[f],
             unflatten(std::span<const double>(m.payload).subspan(at, n), boxes[f].extents()));
      at += n;
    }
  }
  if (corrupt) {
    const bool north = !rh.link(Direction::north).recv.empty();
    const bool south = !rh.link(Direction::south).recv.empty();
    for (auto& patch : patches) {
      Box b = patch.box;
      if (north) ++b.h.begin;
      if (south) --b.h.end;
      if (b == patch.box) continue;
      patch = {b, extract(patch.data, patch.box, b)};
    }
  }
  return patches;
}

/// Runs a rank's kernel, naming the rank and layer in any IndexError.
template <typename F>
auto located(int rank, const std::string& layer, Phase phase, F&& f) {
  try {
    return f();
  } catch (const IndexError& e) {
    std::ostringstream os;
    os << "rank " << rank << ", layer '" << layer << "' (" << to_string(phase)
       << "): " << e.what();
    throw IndexError(os.str());
  }
}

std::vector<int> all_ranks(int p) {
  std::vector<int> r(static_cast<std::size_t>(p));
  for (int i = 0; i < p; ++i) r[static_cast<std::size_t>(i)] = i;
  return r;
}

}  // namespace

Executor::Executor(const NetworkGraph& g, std::vector<LayerDistribution> strategy,
                   ExecOptions opts)
    : g_(g), strategy_(std::move(strategy)), opts_(opts) {
  if (strategy_.size() != g_.size()) {
    std::ostringstream os;
    os << "strategy covers " << strategy_.size() << " layers, network has " << g_.size();
    throw DistributionError(os.str());
  }
  ranks_ = g_.size() == 0 ? 1 : strategy_.front().ranks();
  for (std::size_t i = 0; i < g_.size(); ++i) {
    if (g_.layer(i).kind == LayerKind::fc) {
      throw GraphError("layer '" + g_.layer(i).id + "': fc layers cannot be executed");
    }
    if (strategy_[i].ranks() != ranks_) {
      std::ostringstream os;
      os << "layer '" << g_.layer(i).id << "' uses " << strategy_[i].ranks()
         << " ranks, expected " << ranks_;
      throw DistributionError(os.str());
    }
    if (auto why = check_layer_distribution(g_, i, strategy_[i]); !why.empty()) {
      throw DistributionError(why);
    }
  }
}

DistributedStep Executor::run_step(const Parameters& params, const StepInputs& in) const {
  const std::size_t n = g_.size();
  const int P = ranks_;
  const auto everyone = all_ranks(P);
  Mailboxes net;
  DistributedStep step;
  step.ranks.resize(static_cast<std::size_t>(P));
  for (int r = 0; r < P; ++r) {
    step.ranks[static_cast<std::size_t>(r)].rank = r;
    step.ranks[static_cast<std::size_t>(r)].layers.resize(n);
  }
  auto at = [&](int r, std::size_t i) -> RankLayer& {
    return step.ranks[static_cast<std::size_t>(r)].layers[i];
  };
  auto collect = [&](std::size_t i, Shard RankLayer::*field) {
    std::vector<Shard> v;
    for (int r = 0; r < P; ++r) v.push_back(at(r, i).*field);
    return v;
  };
  auto out_layout = [&](std::size_t i) { return TensorLayout(strategy_[i], g_.output_shape(i)); };
  auto in_layout = [&](std::size_t i) { return TensorLayout(strategy_[i], g_.input_shape(i)); };

  // Forward.
  for (std::size_t i = 0; i < n; ++i) {
    const auto& spec = g_.layer(i);
    const LayerDistribution& dist = strategy_[i];
    const TensorLayout lin = in_layout(i);
    const TensorLayout lout = out_layout(i);

    if (spec.kind == LayerKind::input) {
      const auto shards =
          scatter(global_input(in.inputs, spec.id, g_.output_shape(i), "input"), lout);
      for (int r = 0; r < P; ++r) at(r, i).y = shards[static_cast<std::size_t>(r)];
      net.advance_step();
      continue;
    }

    for (int r = 0; r < P; ++r) {
      const Box b = lin.owned(r);
      at(r, i).x = {b, Tensor4(b.extents())};
    }
    for (std::size_t p : g_.parents(i)) {
      const auto moved = redistribute(net, collect(p, &RankLayer::y), out_layout(p), lin,
                                      edge_label(g_, p, i), Phase::fp);
      for (int r = 0; r < P; ++r) at(r, i).x.data += moved[static_cast<std::size_t>(r)].data;
    }

    switch (spec.kind) {
      case LayerKind::conv:
      case LayerKind::pool: {
        const Window win = *spec.window();
        const HaloSpec halo = halo_spec(dist, win, g_.input_shape(i), HaloPhase::forward);
        const Fields fields{[&] {
          std::vector<const Shard*> v;
          for (int r = 0; r < P; ++r) v.push_back(&at(r, i).x);
          return v;
        }()};
        post_halo(net, halo, fields, spec.id, Phase::fp);
        for (int r = 0; r < P; ++r) {
          RankLayer& L = at(r, i);
          L.x_patch = std::move(
              complete_halo(net, halo, fields, r, spec.id, Phase::fp, opts_.corrupt_halo)
                  .front());
          const Patch xp(L.x_patch.data, L.x_patch.box, g_.input_shape(i).h,
                         g_.input_shape(i).w);
          const Box yb = lout.owned(r);
          net.log_compute(r, spec.id, Phase::fp);
          if (spec.kind == LayerKind::conv) {
            L.y = {yb, located(r, spec.id, Phase::fp, [&] {
                      return kernels::conv_fp(xp, conv_weights(g_, i, params), spec.conv(), yb.h, yb.w);
                    })};
          } else {
            auto pf = located(r, spec.id, Phase::fp,
                              [&] { return kernels::pool_fp(xp, spec.pool(), yb.h, yb.w); });
            L.y = {yb, std::move(pf.y)};
            L.argmax = std::move(pf.argmax);
          }
        }
        break;
      }
      case LayerKind::relu:
      case LayerKind::output:
        for (int r = 0; r < P; ++r) {
          RankLayer& L = at(r, i);
          net.log_compute(r, spec.id, Phase::fp);
          L.y = {L.x.box, spec.kind == LayerKind::relu ? kernels::relu_fp(L.x.data) : L.x.data};
        }
        break;
      case LayerKind::batchnorm_local:
      case LayerKind::batchnorm_spatial: {
        const std::int64_t C = g_.input_shape(i).c;
        const auto gamma =
            affine_or(i < params.size() ? params[i].gamma : std::vector<double>{}, C, 1.0);
        const auto beta =
            affine_or(i < params.size() ? params[i].beta : std::vector<double>{}, C, 0.0);
        if (spec.kind == LayerKind::batchnorm_local) {
          for (int r = 0; r < P; ++r) at(r, i).moments = kernels::bn_moments(kernels::bn_sums(at(r, i).x.data));
        } else {
          const ProcGrid grid = dist.grid();
          for (int b = 0; b < grid.n; ++b) {
            std::vector<int> group;
            std::vector<ChannelSums> sums;
            for (int r = 0; r < P; ++r) {
              if (grid.coord(r).n != b) continue;
              group.push_back(r);
              sums.push_back(kernels::bn_sums(at(r, i).x.data));
            }
            auto m = bn_spatial_aggregate(net, dist, group, sums, spec.id);
            for (std::size_t k = 0; k < group.size(); ++k) at(group[k], i).moments = std::move(m[k]);
          }
        }
        for (int r = 0; r < P; ++r) {
          RankLayer& L = at(r, i);
          net.log_compute(r, spec.id, Phase::fp);
          L.y = {L.x.box, kernels::bn_fp(L.x.data, L.moments, gamma, beta, spec.batchnorm().epsilon)};
        }
        break;
      }
      case LayerKind::input:
      case LayerKind::fc: break;
    }
    net.advance_step();
  }

  // Backward.
  for (std::size_t i = n; i-- > 0;) {
    const auto& spec = g_.layer(i);
    const LayerDistribution& dist = strategy_[i];
    const TensorLayout lin = in_layout(i);
    const TensorLayout lout = out_layout(i);

    if (g_.children(i).empty()) {
      const auto shards =
          scatter(global_input(in.loss_seeds, spec.id, g_.output_shape(i), "loss seed"), lout);
      for (int r = 0; r < P; ++r) at(r, i).dy = shards[static_cast<std::size_t>(r)];
    } else {
      for (int r = 0; r < P; ++r) {
        const Box b = lout.owned(r);
        at(r, i).dy = {b, Tensor4(b.extents())};
      }
      for (std::size_t c : g_.children(i)) {
        const auto moved = redistribute(net, collect(c, &RankLayer::dx), in_layout(c), lout,
                                        edge_label(g_, i, c), Phase::bp_data);
        for (int r = 0; r < P; ++r) at(r, i).dy.data += moved[static_cast<std::size_t>(r)].data;
      }
    }

    switch (spec.kind) {
      case LayerKind::input:
      case LayerKind::output:
        for (int r = 0; r < P; ++r) {
          net.log_compute(r, spec.id, Phase::bp_data);
          at(r, i).dx = at(r, i).dy;
        }
        break;
      case LayerKind::relu:
        for (int r = 0; r < P; ++r) {
          RankLayer& L = at(r, i);
          net.log_compute(r, spec.id, Phase::bp_data);
          L.dx = {L.x.box, kernels::relu_bp(L.x.data, L.dy.data)};
        }
        break;
      case LayerKind::conv: {
        const auto& conv = spec.conv();
        const TensorShape xs = g_.input_shape(i);
        const TensorShape ys = g_.output_shape(i);
        const HaloSpec halo = halo_spec(dist, conv.window, xs, HaloPhase::backward, ys.c);
        const Fields fields{[&] {
          std::vector<const Shard*> v;
          for (int r = 0; r < P; ++r) v.push_back(&at(r, i).dy);
          return v;
        }()};
        post_halo(net, halo, fields, spec.id, Phase::bp_data);
        // Filter gradients need only owned dL/dy, so they run while the halo
        // is in flight.
        for (int r = 0; r < P; ++r) {
          RankLayer& L = at(r, i);
          net.log_compute(r, spec.id, Phase::bp_weights);
          L.dw = located(r, spec.id, Phase::bp_weights, [&] {
            return kernels::conv_bp_weights(Patch(L.x_patch.data, L.x_patch.box, xs.h, xs.w),
                                            Patch(L.dy.data, L.dy.box, ys.h, ys.w), conv);
          });
        }
        const Tensor4& w = conv_weights(g_, i, params);
        for (int r = 0; r < P; ++r) {
          RankLayer& L = at(r, i);
          const Shard dyp =
              complete_halo(net, halo, fields, r, spec.id, Phase::bp_data, opts_.corrupt_halo)
                  .front();
          const Box xb = lin.owned(r);
          net.log_compute(r, spec.id, Phase::bp_data);
          L.dx = {xb, located(r, spec.id, Phase::bp_data, [&] {
                        return kernels::conv_bp_data(Patch(dyp.data, dyp.box, ys.h, ys.w), w, conv,
                                                     xb.h, xb.w);
                      })};
        }
        std::vector<std::vector<double>> partial;
        for (int r = 0; r < P; ++r) partial.push_back(flatten(at(r, i).dw));
        const auto total = allreduce(net, everyone, std::move(partial), spec.id, Phase::bp_weights);
        for (int r = 0; r < P; ++r) {
          at(r, i).dw = unflatten(total[static_cast<std::size_t>(r)], w.shape());
        }
        break;
      }
      case LayerKind::pool: {
        const auto& pool = spec.pool();
        const TensorShape xs = g_.input_shape(i);
        const TensorShape ys = g_.output_shape(i);
        const bool with_argmax = pool.mode == PoolMode::max;
        std::vector<Shard> argmax;
        for (int r = 0; r < P; ++r) {
          argmax.push_back(with_argmax ? Shard{at(r, i).dy.box, at(r, i).argmax} : Shard{});
        }
        const HaloSpec halo = halo_spec(dist, pool.window, xs, HaloPhase::backward);
        Fields fields(with_argmax ? 2 : 1);
        for (int r = 0; r < P; ++r) {
          fields[0].push_back(&at(r, i).dy);
          if (with_argmax) fields[1].push_back(&argmax[static_cast<std::size_t>(r)]);
        }
        post_halo(net, halo, fields, spec.id, Phase::bp_data);
        for (int r = 0; r < P; ++r) {
          RankLayer& L = at(r, i);
          const auto patches =
              complete_halo(net, halo, fields, r, spec.id, Phase::bp_data, opts_.corrupt_halo);
          const Patch dyp(patches[0].data, patches[0].box, ys.h, ys.w);
          const Shard& am = patches.back();
          const Box xb = lin.owned(r);
          net.log_compute(r, spec.id, Phase::bp_data);
          L.dx = {xb, located(r, spec.id, Phase::bp_data, [&] {
                        return kernels::pool_bp(dyp, Patch(am.data, am.box, ys.h, ys.w), pool,
                                                xb.h, xb.w, xs.w);
                      })};
        }
        break;
      }
      case LayerKind::batchnorm_local:
      case LayerKind::batchnorm_spatial: {
        const std::int64_t C = g_.input_shape(i).c;
        const double eps = spec.batchnorm().epsilon;
        const auto gamma =
            affine_or(i < params.size() ? params[i].gamma : std::vector<double>{}, C, 1.0);
        std::vector<kernels::BnGradSums> local;
        for (int r = 0; r < P; ++r) {
          const RankLayer& L = at(r, i);
          local.push_back(kernels::bn_grad_sums(L.x.data, L.dy.data, L.moments, eps));
        }
        std::vector<kernels::BnGradSums> group_sums = local;
        std::vector<std::int64_t> group_count(static_cast<std::size_t>(P));
        if (spec.kind == LayerKind::batchnorm_local) {
          for (int r = 0; r < P; ++r) {
            const Box& b = at(r, i).x.box;
            group_count[static_cast<std::size_t>(r)] = b.n.size() * b.h.size() * b.w.size();
          }
        } else {
          const ProcGrid grid = dist.grid();
          const TensorShape xs = g_.input_shape(i);
          const BlockedDim nd(xs.n, dist.n_parts);
          for (int b = 0; b < grid.n; ++b) {
            std::vector<int> group;
            std::vector<std::vector<double>> payloads;
            for (int r = 0; r < P; ++r) {
              if (grid.coord(r).n != b) continue;
              group.push_back(r);
              const auto& s = local[static_cast<std::size_t>(r)];
              std::vector<double> p = s.dy;
              p.insert(p.end(), s.dy_xhat.begin(), s.dy_xhat.end());
              payloads.push_back(std::move(p));
            }
            const auto red = allreduce(net, group, std::move(payloads), spec.id, Phase::bp_data);
            for (std::size_t k = 0; k < group.size(); ++k) {
              auto& gs = group_sums[static_cast<std::size_t>(group[k])];
              gs.dy.assign(red[k].begin(), red[k].begin() + C);
              gs.dy_xhat.assign(red[k].begin() + C, red[k].end());
              group_count[static_cast<std::size_t>(group[k])] = nd.block(b).size() * xs.h * xs.w;
            }
          }
        }
        for (int r = 0; r < P; ++r) {
          RankLayer& L = at(r, i);
          net.log_compute(r, spec.id, Phase::bp_data);
          L.dx = {L.x.box, kernels::bn_bp_data(L.x.data, L.dy.data, L.moments, gamma, eps,
                                               group_sums[static_cast<std::size_t>(r)],
                                               group_count[static_cast<std::size_t>(r)])};
        }
        std::vector<std::vector<double>> partial;
        for (const auto& s : local) {
          std::vector<double> p = s.dy_xhat;
          p.insert(p.end(), s.dy.begin(), s.dy.end());
          partial.push_back(std::move(p));
        }
        const auto total = allreduce(net, everyone, std::move(partial), spec.id, Phase::bp_weights);
        for (int r = 0; r < P; ++r) {
          const auto& t = total[static_cast<std::size_t>(r)];
          at(r, i).dgamma.assign(t.begin(), t.begin() + C);
          at(r, i).dbeta.assign(t.begin() + C, t.end());
        }
        break;
      }
      case LayerKind::fc: break;
    }
    net.advance_step();
  }

  if (!net.quiescent()) throw MessageError("messages left undelivered after the step");
  step.log = std::move(net.log());
  return step;
}

StepResult gather_step(const NetworkGraph& g, const std::vector<LayerDistribution>& strategy,
                       const DistributedStep& step) {
  if (strategy.size() != g.size()) {
    throw DistributionError("gather_step: strategy does not cover the graph");
  }
  StepResult out;
  out.layers.resize(g.size());
  for (std::size_t i = 0; i < g.size(); ++i) {
    std::vector<Shard> ys, dxs;
    for (const auto& rs : step.ranks) {
      ys.push_back(rs.layers[i].y);
      dxs.push_back(rs.layers[i].dx);
    }
    LayerResult& res = out.layers[i];
    res.y = gather_global(ys, g.output_shape(i));
    res.dx = gather_global(dxs, g.layer(i).kind == LayerKind::input ? g.output_shape(i)
                                                                     : g.input_shape(i));
    if (!step.ranks.empty()) {
      const RankLayer& first = step.ranks.front().layers[i];
      res.dw = first.dw;
      res.dgamma = first.dgamma;
      res.dbeta = first.dbeta;
    }
  }
  return out;
}

}  // namespace convplan
