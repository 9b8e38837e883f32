#include "convplan/perfmodel.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <random>
#include <sstream>

#include "convplan/error.hpp"
#include "convplan/kernels.hpp"

namespace convplan {

void MachineModel::validate() const {
  if (ranks < 1) throw ParseError("machine: ranks must be >= 1");
  if (node_size < 1) throw ParseError("machine: node_size must be >= 1");
  if (word_bytes < 1) throw ParseError("machine: word_bytes must be >= 1");
  if (alpha_intra < 0 || alpha_inter < 0 || beta_intra < 0 || beta_inter < 0) {
    throw ParseError("machine: latency and bandwidth terms must be >= 0");
  }
}

double sr_cost(const MachineModel& m, std::int64_t words, Locality where) {
  const bool intra = where == Locality::intra;
  const double alpha = intra ? m.alpha_intra : m.alpha_inter;
  const double beta = intra ? m.beta_intra : m.beta_inter;
  return alpha + beta * static_cast<double>(words) * m.word_bytes;
}

double ar_cost(const MachineModel& m, int p, std::int64_t words) {
  if (p <= 1) return 0.0;
  const bool intra = p <= m.node_size;
  const double alpha = intra ? m.alpha_intra : m.alpha_inter;
  const double beta_word = (intra ? m.beta_intra : m.beta_inter) * m.word_bytes;
  const double n = static_cast<double>(words);
  const double rounds = std::ceil(std::log2(static_cast<double>(p)));
  // Thakur, Rabenseifner & Gropp: recursive doubling for short messages,
  // reduce-scatter + allgather (ring) for long ones.
  const double doubling = rounds * (alpha + n * beta_word);
  const double ring =
      2.0 * (p - 1) * alpha + 2.0 * (static_cast<double>(p - 1) / p) * n * beta_word;
  return std::min(doubling, ring);
}

std::string_view to_string(CostOp op) {
  switch (op) {
    case CostOp::fp: return "fp";
    case CostOp::bp_data: return "bp-data";
    case CostOp::bp_filter: return "bp-filter";
    case CostOp::fc: return "fc";
  }
  return "?";
}

std::optional<CostOp> parse_cost_op(std::string_view name) {
  for (auto op : {CostOp::fp, CostOp::bp_data, CostOp::bp_filter, CostOp::fc}) {
    if (to_string(op) == name) return op;
  }
  return std::nullopt;
}

std::string to_string(const CostKey& key) {
  std::ostringstream os;
  os << to_string(key.op) << "," << key.n << "," << key.c << "," << key.h << ","
     << key.w << "," << key.f << "," << key.k << "," << key.s << "," << key.pad;
  return os.str();
}

void CostTable::set(const CostKey& key, double seconds) {
  if (!(seconds > 0.0)) {
    throw ParseError("cost table: non-positive time for " + to_string(key));
  }
  entries_[key] = seconds;
}

std::optional<double> CostTable::find(const CostKey& key) const {
  if (auto it = entries_.find(key); it != entries_.end()) return it->second;
  if (interpolate_) return interpolate(key);
  return std::nullopt;
}

double CostTable::lookup(const CostKey& key) const {
  if (auto v = find(key)) return *v;
  throw CostLookupError("cost table has no entry for op,n,c,h,w,f,k,s,pad = " +
                        to_string(key));
}

std::optional<double> CostTable::interpolate(const CostKey& key) const {
  std::vector<std::pair<double, double>> pts;
  for (const auto& [k, t] : entries_) {
    if (k.op == key.op && k.c == key.c && k.f == key.f && k.k == key.k &&
        k.s == key.s && k.pad == key.pad) {
      pts.emplace_back(std::log(static_cast<double>(k.n * k.h * k.w)), std::log(t));
    }
  }
  if (pts.empty()) return std::nullopt;
  const double x = std::log(static_cast<double>(key.n * key.h * key.w));
  double mx = 0.0, my = 0.0;
  for (auto [px, py] : pts) {
    mx += px;
    my += py;
  }
  mx /= static_cast<double>(pts.size());
  my /= static_cast<double>(pts.size());
  double sxx = 0.0, sxy = 0.0;
  for (auto [px, py] : pts) {
    sxx += (px - mx) * (px - mx);
    sxy += (px - mx) * (py - my);
  }
  // One distinct workload: assume time proportional to it.
  const double slope = sxx > 0.0 ? sxy / sxx : 1.0;
  return std::exp(my + slope * (x - mx));
}

CostKey local_cost_key(const NetworkGraph& g, std::size_t layer,
                       const LayerDistribution& dist, CostOp op) {
  const auto& spec = g.layer(layer);
  const auto& in = g.input_shape(layer);
  const std::int64_t n = BlockedDim(in.n, dist.n_parts).block(0).size();
  if (spec.kind == LayerKind::fc) {
    return {CostOp::fc, n, in.c * in.h * in.w, 1, 1, spec.fc().features, 1, 1, 0};
  }
  if (spec.kind != LayerKind::conv) {
    throw CostLookupError("layer '" + spec.id + "' has no cost-table key");
  }
  const auto& c = spec.conv();
  return {op,
          n,
          in.c,
          BlockedDim(in.h, dist.h_parts).block(0).size(),
          BlockedDim(in.w, dist.w_parts).block(0).size(),
          c.filters,
          c.kernel(),
          c.stride(),
          c.padding()};
}

CostTable flop_cost_table(const NetworkGraph& g,
                          const std::vector<std::vector<LayerDistribution>>& per_layer,
                          double macs_per_second, double fixed_seconds) {
  CostTable t;
  for (std::size_t i = 0; i < g.size() && i < per_layer.size(); ++i) {
    const auto kind = g.layer(i).kind;
    if (kind != LayerKind::conv && kind != LayerKind::fc) continue;
    for (const auto& d : per_layer[i]) {
      if (kind == LayerKind::fc) {
        const auto key = local_cost_key(g, i, d, CostOp::fc);
        t.set(key, fixed_seconds + 3.0 * static_cast<double>(key.n * key.c * key.f) /
                                       macs_per_second);
        continue;
      }
      for (auto op : {CostOp::fp, CostOp::bp_data, CostOp::bp_filter}) {
        const auto key = local_cost_key(g, i, d, op);
        const double oh = static_cast<double>((key.h + key.s - 1) / key.s);
        const double ow = static_cast<double>((key.w + key.s - 1) / key.s);
        const double macs = static_cast<double>(key.n * key.c * key.f) * key.k * key.k * oh * ow;
        t.set(key, fixed_seconds + macs / macs_per_second);
      }
    }
  }
  return t;
}

namespace {

struct HaloLocality {
  Locality east_west = Locality::intra;
  Locality north_south = Locality::intra;
  Locality corner = Locality::intra;
};

HaloLocality halo_locality(const LayerDistribution& dist, const MachineModel& m) {
  HaloLocality out;
  const ProcGrid grid = dist.grid();
  for (int r = 0; r < grid.size(); ++r) {
    const auto c = grid.coord(r);
    auto check = [&](int dh, int dw, Locality& slot) {
      const ProcGrid::Coord pc{c.n, c.h + dh, c.w + dw};
      if (grid.contains(pc) && !m.same_node(r, grid.rank(pc))) slot = Locality::inter;
    };
    check(0, 1, out.east_west);
    check(1, 0, out.north_south);
    check(1, 1, out.corner);
    check(1, -1, out.corner);
  }
  return out;
}

/// 2 SR(O n c h) + 2 SR(O n c w) + 4 SR(O^2 n c), dropping undivided dims.
double halo_time(const LayerDistribution& dist, const MachineModel& m, int halo,
                 std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) {
  if (halo == 0) return 0.0;
  const auto loc = halo_locality(dist, m);
  const std::int64_t o = halo;
  double t = 0.0;
  if (dist.w_parts > 1) t += 2.0 * sr_cost(m, o * n * c * h, loc.east_west);
  if (dist.h_parts > 1) t += 2.0 * sr_cost(m, o * n * c * w, loc.north_south);
  if (dist.w_parts > 1 && dist.h_parts > 1) t += 4.0 * sr_cost(m, o * o * n * c, loc.corner);
  return t;
}

}  // namespace

LayerCost layer_cost(const NetworkGraph& g, std::size_t layer, const LayerDistribution& dist,
                     const MachineModel& m, const CostTable& t, const CostOptions& opts) {
  if (dist.ranks() != m.ranks) {
    std::ostringstream os;
    os << "layer '" << g.layer(layer).id << "': distribution " << dist << " uses "
       << dist.ranks() << " ranks, machine has " << m.ranks;
    throw DistributionError(os.str());
  }
  const auto& spec = g.layer(layer);
  const auto& in = g.input_shape(layer);
  const auto& out = g.output_shape(layer);
  const std::int64_t wb = m.word_bytes;
  LayerCost lc;

  if (auto win = spec.window()) {
    const std::int64_t fwd = halo_volume(halo_spec(dist, *win, in, HaloPhase::forward));
    const std::int64_t bwd =
        halo_volume(halo_spec(dist, *win, in, HaloPhase::backward, out.c));
    const bool with_argmax = spec.kind == LayerKind::pool && spec.pool().mode == PoolMode::max;
    lc.fp_halo_bytes = fwd * wb;
    lc.bpx_halo_bytes = bwd * wb * (with_argmax ? 2 : 1);
  }

  switch (spec.kind) {
    case LayerKind::conv: {
      const auto& cp = spec.conv();
      const auto kfp = local_cost_key(g, layer, dist, CostOp::fp);
      lc.fp_compute = t.lookup(kfp);
      lc.bpx_compute = t.lookup(local_cost_key(g, layer, dist, CostOp::bp_data));
      lc.bpw_compute = t.lookup(local_cost_key(g, layer, dist, CostOp::bp_filter));
      lc.fp_halo = halo_time(dist, m, cp.halo(), kfp.n, in.c, kfp.h, kfp.w);
      lc.bpx_halo = halo_time(dist, m, cp.halo(), kfp.n, out.c,
                              BlockedDim(out.h, dist.h_parts).block(0).size(),
                              BlockedDim(out.w, dist.w_parts).block(0).size());
      const std::int64_t wwords =
          static_cast<std::int64_t>(cp.filters) * in.c * cp.kernel() * cp.kernel();
      lc.bpa = ar_cost(m, dist.ranks(), wwords);
      lc.allreduce_bytes = dist.ranks() > 1 ? wwords * wb : 0;
      break;
    }
    case LayerKind::batchnorm_local:
    case LayerKind::batchnorm_spatial:
      lc.bpa = ar_cost(m, dist.ranks(), 2 * in.c);
      lc.allreduce_bytes = dist.ranks() > 1 ? 2 * in.c * wb : 0;
      break;
    case LayerKind::fc:
      lc.fp_compute = t.lookup(local_cost_key(g, layer, dist, CostOp::fc));
      break;
    default:
      break;
  }

  if (opts.overlap) {
    lc.fp_exposed = std::max(lc.fp_compute, lc.fp_halo);
    lc.bpw_exposed = lc.bpw_compute;
    lc.bpx_exposed = lc.bpx_compute + std::max(0.0, lc.bpx_halo - lc.bpw_compute);
  } else {
    lc.fp_exposed = lc.fp_compute + lc.fp_halo;
    lc.bpw_exposed = lc.bpw_compute;
    lc.bpx_exposed = lc.bpx_compute + lc.bpx_halo;
  }
  return lc;
}

double shuffle_cost(const ShufflePlan& plan, const MachineModel& m) {
  if (plan.empty()) return 0.0;
  std::map<int, double> per_rank;
  for (const auto& tr : plan.transfers) {
    const auto where = m.same_node(tr.src, tr.dst) ? Locality::intra : Locality::inter;
    per_rank[tr.src] += sr_cost(m, tr.box.count(), where);
  }
  double worst = 0.0;
  for (const auto& [rank, t] : per_rank) worst = std::max(worst, t);
  return worst;
}

NetworkCost network_cost(const NetworkGraph& g, const std::vector<LayerDistribution>& strategy,
                         const MachineModel& m, const CostTable& t, const CostOptions& opts) {
  if (strategy.size() != g.size()) {
    throw DistributionError("network_cost: strategy must assign every layer");
  }
  NetworkCost nc;
  nc.layers.reserve(g.size());
  for (std::size_t i = 0; i < g.size(); ++i) {
    nc.layers.push_back(layer_cost(g, i, strategy[i], m, t, opts));
  }
  std::vector<double> bwd_shuffle_into(g.size(), 0.0);
  double forward = 0.0;
  for (std::size_t i = 0; i < g.size(); ++i) {
    for (std::size_t p : g.parents(i)) {
      if (strategy[p] == strategy[i]) continue;
      const TensorLayout from(strategy[p], g.output_shape(p));
      const TensorLayout to(strategy[i], g.output_shape(p));
      const ShufflePlan fwd = shuffle_plan(from, to);
      const ShufflePlan bwd = shuffle_plan(to, from);
      EdgeShuffle e{p, i, shuffle_cost(fwd, m), shuffle_cost(bwd, m),
                    fwd.moved * m.word_bytes, bwd.moved * m.word_bytes};
      forward += e.forward_seconds;
      bwd_shuffle_into[p] += e.backward_seconds;
      nc.shuffles.push_back(e);
    }
    forward += nc.layers[i].fp_exposed;
  }

  double clock = forward;
  double channel_free = forward;
  for (std::size_t r = g.size(); r-- > 0;) {
    const auto& lc = nc.layers[r];
    clock += bwd_shuffle_into[r];
    const double weights_ready = clock + lc.bpw_exposed;
    clock += lc.backward_exposed();
    if (lc.bpa > 0.0) {
      const double start = std::max(weights_ready, channel_free);
      channel_free = start + lc.bpa;
    }
  }
  nc.forward = forward;
  nc.backward = clock - forward;
  nc.total = std::max(clock, channel_free);
  nc.exposed_allreduce = nc.total - clock;
  return nc;
}

LayerMemory layer_memory(const NetworkGraph& g, std::size_t layer,
                         const LayerDistribution& dist, int rank, int bytes_per_word) {
  const auto& spec = g.layer(layer);
  const auto& in = g.input_shape(layer);
  const auto& out = g.output_shape(layer);
  const std::int64_t wb = bytes_per_word;
  LayerMemory mem;
  const std::int64_t y = owned_indices(dist, out, rank).count();
  if (spec.kind == LayerKind::input) {
    mem.activations = y * wb;
    return mem;
  }
  const std::int64_t x = owned_indices(dist, in, rank).count();
  mem.activations = (x + y) * wb;
  mem.error_signals = (x + y) * wb;
  if (auto win = spec.window()) {
    const auto fwd = halo_spec(dist, *win, in, HaloPhase::forward);
    const auto bwd = halo_spec(dist, *win, in, HaloPhase::backward, out.c);
    mem.halo_buffers = (fwd[static_cast<std::size_t>(rank)].recv_count() +
                        bwd[static_cast<std::size_t>(rank)].recv_count()) *
                       wb;
  }
  if (spec.kind == LayerKind::conv) {
    const auto& c = spec.conv();
    mem.weights = 2 * static_cast<std::int64_t>(c.filters) * in.c * c.kernel() * c.kernel() * wb;
  } else if (spec.is_batchnorm()) {
    mem.weights = 2 * 2 * in.c * wb;
  } else if (spec.kind == LayerKind::fc) {
    mem.weights = 2 * in.c * in.h * in.w * spec.fc().features * wb;
  }
  return mem;
}

std::int64_t MemoryEstimate::max_bytes() const {
  return per_rank.empty() ? 0 : *std::max_element(per_rank.begin(), per_rank.end());
}

MemoryEstimate memory_estimate(const NetworkGraph& g,
                               const std::vector<LayerDistribution>& strategy,
                               int bytes_per_word) {
  if (strategy.size() != g.size()) {
    throw DistributionError("memory_estimate: strategy must assign every layer");
  }
  const int ranks = strategy.front().ranks();
  MemoryEstimate est;
  est.per_rank.assign(static_cast<std::size_t>(ranks), 0);
  for (int r = 0; r < ranks; ++r) {
    for (std::size_t i = 0; i < g.size(); ++i) {
      est.per_rank[static_cast<std::size_t>(r)] +=
          layer_memory(g, i, strategy[i], r, bytes_per_word).total();
    }
  }
  est.busiest_rank = static_cast<int>(
      std::max_element(est.per_rank.begin(), est.per_rank.end()) - est.per_rank.begin());
  for (std::size_t i = 0; i < g.size(); ++i) {
    est.layers.push_back(layer_memory(g, i, strategy[i], est.busiest_rank, bytes_per_word));
  }
  return est;
}

CostTable benchgen(const std::vector<BenchShape>& shapes, int repetitions, int warmups,
                   unsigned seed) {
  using clock = std::chrono::steady_clock;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> uni(-1.0, 1.0);
  auto random_tensor = [&](TensorShape s) {
    Tensor4 t(s);
    for (double& v : t.values()) v = uni(rng);
    return t;
  };
  CostTable table;
  volatile double sink = 0.0;
  for (const auto& s : shapes) {
    const ConvParams conv{static_cast<int>(s.f), {s.k, s.s, s.pad}};
    const TensorShape xs{s.n, s.c, s.h, s.w};
    const TensorShape ys{s.n, s.f, conv.window.output_extent(s.h),
                         conv.window.output_extent(s.w)};
    if (!xs.valid() || !ys.valid()) {
      throw ParseError("benchgen: invalid shape");
    }
    const Tensor4 x = random_tensor(xs);
    const Tensor4 w = random_tensor({s.f, s.c, s.k, s.k});
    const Tensor4 dy = random_tensor(ys);
    auto time_op = [&](CostOp op) {
      auto run = [&] {
        Tensor4 r;
        switch (op) {
          case CostOp::fp: r = kernels::conv_fp(x, w, conv); break;
          case CostOp::bp_data: r = kernels::conv_bp_data(dy, w, conv, xs); break;
          default: r = kernels::conv_bp_weights(x, dy, conv); break;
        }
        sink = r.values()[0];
      };
      for (int i = 0; i < warmups; ++i) run();
      const auto start = clock::now();
      for (int i = 0; i < repetitions; ++i) run();
      const std::chrono::duration<double> elapsed = clock::now() - start;
      const double mean = elapsed.count() / std::max(1, repetitions);
      table.set({op, s.n, s.c, s.h, s.w, s.f, s.k, s.s, s.pad},
                std::max(mean, 1e-12));
    };
    time_op(CostOp::fp);
    time_op(CostOp::bp_data);
    time_op(CostOp::bp_filter);
  }
  return table;
}

}  // namespace convplan
