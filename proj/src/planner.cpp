#include "convplan/planner.hpp"

#include <algorithm>
#include <limits>
#include <map>
#include <numeric>
#include <sstream>

#include "convplan/error.hpp"

namespace convplan {

std::string_view to_string(CandidateKind k) {
  switch (k) {
    case CandidateKind::sample_only: return "sample";
    case CandidateKind::spatial: return "spatial";
    case CandidateKind::hybrid: return "hybrid";
  }
  return "?";
}

CandidateKind classify(const LayerDistribution& d) {
  if (d.sample_only()) return CandidateKind::sample_only;
  return d.n_parts == 1 ? CandidateKind::spatial : CandidateKind::hybrid;
}

std::vector<std::vector<LayerDistribution>> CandidateSet::per_layer() const {
  std::vector<std::vector<LayerDistribution>> out;
  for (std::size_t u : unit_of) out.push_back(per_unit[u]);
  return out;
}

namespace {

bool is_anchor(const NetworkGraph& g, std::size_t i) {
  switch (g.layer(i).kind) {
    case LayerKind::input:
    case LayerKind::conv:
    case LayerKind::pool:
    case LayerKind::fc: return true;
    default: return g.parents(i).size() != 1;
  }
}

struct Units {
  std::vector<std::size_t> unit_of;
  std::vector<std::size_t> anchors;
  std::vector<std::vector<std::size_t>> members;
};

Units build_units(const NetworkGraph& g) {
  Units u;
  u.unit_of.assign(g.size(), 0);
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (is_anchor(g, i)) {
      u.unit_of[i] = u.anchors.size();
      u.anchors.push_back(i);
      u.members.push_back({i});
    } else {
      const std::size_t unit = u.unit_of[g.parents(i).front()];
      u.unit_of[i] = unit;
      u.members[unit].push_back(i);
    }
  }
  return u;
}

/// All (p_N, p_H, p_W) with product P, in candidate order.
std::vector<LayerDistribution> factorizations(int ranks) {
  std::vector<LayerDistribution> out;
  for (int n = 1; n <= ranks; ++n) {
    if (ranks % n) continue;
    for (int h = 1; h <= ranks / n; ++h) {
      if ((ranks / n) % h) continue;
      out.push_back({n, h, ranks / n / h});
    }
  }
  std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) {
    if (a.n_parts != b.n_parts) return a.n_parts > b.n_parts;
    const int ma = std::max(a.h_parts, a.w_parts);
    const int mb = std::max(b.h_parts, b.w_parts);
    if (ma != mb) return ma < mb;
    return a.h_parts > b.h_parts;
  });
  return out;
}

bool windowed_split_ok(const NetworkGraph& g, std::size_t layer, const LayerDistribution& d) {
  const auto win = g.layer(layer).window();
  if (!win) return true;
  const auto& in = g.input_shape(layer);
  const std::int64_t k = win->kernel;
  const std::int64_t o = win->halo();
  auto ok = [&](std::int64_t extent, int parts) {
    if (parts == 1) return true;
    return extent > k && extent / parts >= std::max<std::int64_t>(o, 1);
  };
  return ok(in.h, d.h_parts) && ok(in.w, d.w_parts);
}

std::vector<std::int64_t> unit_memory(const NetworkGraph& g, std::span<const std::size_t> members,
                                      const LayerDistribution& d, int word_bytes) {
  std::vector<std::int64_t> per_rank(static_cast<std::size_t>(d.ranks()), 0);
  for (int r = 0; r < d.ranks(); ++r) {
    for (std::size_t i : members) {
      per_rank[static_cast<std::size_t>(r)] += layer_memory(g, i, d, r, word_bytes).total();
    }
  }
  return per_rank;
}

std::string grid_list(const std::vector<LayerDistribution>& v) {
  std::ostringstream os;
  for (std::size_t i = 0; i < v.size(); ++i) os << (i ? " " : "") << v[i];
  return os.str();
}

}  // namespace

std::vector<LayerDistribution> unit_grids(const NetworkGraph& g,
                                          std::span<const std::size_t> members, int ranks) {
  std::vector<LayerDistribution> out;
  if (members.empty()) return out;
  const std::size_t anchor = members.front();
  for (const auto& d : factorizations(ranks)) {
    if (g.layer(anchor).kind == LayerKind::fc && !d.sample_only()) continue;
    bool ok = true;
    for (std::size_t i : members) {
      if (!check_layer_distribution(g, i, d).empty() || !windowed_split_ok(g, i, d)) {
        ok = false;
        break;
      }
    }
    if (ok) out.push_back(d);
  }
  return out;
}

CandidateSet generate_candidates(const NetworkGraph& g, const MachineModel& m,
                                 const PlannerOptions& opts) {
  m.validate();
  Units units = build_units(g);
  CandidateSet cs;
  cs.unit_of = std::move(units.unit_of);
  cs.anchors = std::move(units.anchors);
  cs.members = std::move(units.members);
  for (std::size_t u = 0; u < cs.anchors.size(); ++u) {
    auto grids = unit_grids(g, cs.members[u], m.ranks);
    if (grids.empty()) {
      std::ostringstream os;
      os << "layer '" << g.layer(cs.anchors[u]).id << "': no grid of " << m.ranks
         << " ranks fits input " << g.input_shape(cs.anchors[u])
         << " (sample count, block extents, or halo width)";
      throw PlanError(os.str());
    }
    if (opts.max_candidates > 0 && grids.size() > static_cast<std::size_t>(opts.max_candidates)) {
      grids.resize(static_cast<std::size_t>(opts.max_candidates));
    }
    cs.per_unit.push_back(std::move(grids));
  }
  if (!opts.mem_cap_bytes) return cs;

  const std::int64_t cap = *opts.mem_cap_bytes;
  const std::size_t ranks = static_cast<std::size_t>(m.ranks);
  std::vector<std::vector<std::vector<std::int64_t>>> mem(cs.anchors.size());
  std::vector<std::int64_t> floor(ranks, 0);  // per rank, sum of per-unit minima
  for (std::size_t u = 0; u < cs.anchors.size(); ++u) {
    std::vector<std::int64_t> lo(ranks, std::numeric_limits<std::int64_t>::max());
    for (const auto& d : cs.per_unit[u]) {
      mem[u].push_back(unit_memory(g, cs.members[u], d, m.word_bytes));
      for (std::size_t r = 0; r < ranks; ++r) lo[r] = std::min(lo[r], mem[u].back()[r]);
    }
    for (std::size_t r = 0; r < ranks; ++r) floor[r] += lo[r];
  }
  for (std::size_t u = 0; u < cs.anchors.size(); ++u) {
    std::vector<std::int64_t> lo(ranks, std::numeric_limits<std::int64_t>::max());
    for (const auto& v : mem[u])
      for (std::size_t r = 0; r < ranks; ++r) lo[r] = std::min(lo[r], v[r]);
    std::vector<LayerDistribution> kept;
    std::int64_t best = std::numeric_limits<std::int64_t>::max();
    for (std::size_t j = 0; j < cs.per_unit[u].size(); ++j) {
      std::int64_t need = 0;
      for (std::size_t r = 0; r < ranks; ++r) {
        need = std::max(need, floor[r] - lo[r] + mem[u][j][r]);
      }
      best = std::min(best, need);
      if (need <= cap) kept.push_back(cs.per_unit[u][j]);
    }
    if (kept.empty()) {
      std::ostringstream os;
      os << "layer '" << g.layer(cs.anchors[u]).id << "': memory cap " << cap
         << " B excludes every candidate (" << grid_list(cs.per_unit[u])
         << "); the smallest needs at least " << best << " B per rank";
      throw PlanError(os.str());
    }
    cs.per_unit[u] = std::move(kept);
  }
  return cs;
}

LineSolution solve_line(const LineProblem& p) {
  const std::size_t stages = p.node_cost.size();
  if (stages == 0) throw PlanError("solve_line: no stages");
  if (p.edge_cost.size() + 1 != stages) throw PlanError("solve_line: edge stages mismatch");
  for (std::size_t k = 0; k < stages; ++k) {
    if (p.node_cost[k].empty()) {
      std::ostringstream os;
      os << "solve_line: stage " << k << " has no choices";
      throw PlanError(os.str());
    }
  }
  // Best path into each vertex, keeping whole prefixes for the tie-break.
  std::vector<double> dist(p.node_cost[0].size(), 0.0);
  std::vector<std::vector<std::size_t>> path(dist.size());
  for (std::size_t j = 0; j < dist.size(); ++j) path[j] = {j};
  for (std::size_t k = 0; k + 1 < stages; ++k) {
    const std::size_t next = p.node_cost[k + 1].size();
    std::vector<double> nd(next, std::numeric_limits<double>::infinity());
    std::vector<std::vector<std::size_t>> np(next);
    for (std::size_t j = 0; j < next; ++j) {
      for (std::size_t i = 0; i < dist.size(); ++i) {
        const double cand = dist[i] + (p.node_cost[k][i] + p.edge_cost[k][i][j]);
        if (cand < nd[j] || (cand == nd[j] && path[i] < np[j])) {
          nd[j] = cand;
          np[j] = path[i];
        }
      }
      np[j].push_back(j);
    }
    dist = std::move(nd);
    path = std::move(np);
  }
  LineSolution best;
  best.cost = std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < dist.size(); ++j) {
    const double total = dist[j] + p.node_cost[stages - 1][j];
    if (total < best.cost || (total == best.cost && path[j] < best.choice)) {
      best.cost = total;
      best.choice = path[j];
    }
  }
  return best;
}

double unit_cost(const NetworkGraph& g, const CandidateSet& cands, std::size_t unit,
                 const LayerDistribution& d, const MachineModel& m, const CostTable& t,
                 const CostOptions& opts) {
  double total = 0.0;
  for (std::size_t i : cands.members[unit]) total += layer_cost(g, i, d, m, t, opts).total();
  return total;
}

double unit_shuffle_cost(const NetworkGraph& g, const CandidateSet& cands, std::size_t u,
                         const LayerDistribution& du, std::size_t v,
                         const LayerDistribution& dv, const MachineModel& m) {
  if (du == dv) return 0.0;
  double total = 0.0;
  for (std::size_t p : cands.members[u]) {
    for (std::size_t c : g.children(p)) {
      if (cands.unit_of[c] != v) continue;
      const TensorLayout from(du, g.output_shape(p));
      const TensorLayout to(dv, g.output_shape(p));
      total += shuffle_cost(shuffle_plan(from, to), m) + shuffle_cost(shuffle_plan(to, from), m);
    }
  }
  return total;
}

std::vector<LayerDistribution> expand(const CandidateSet& cands,
                                      std::span<const LayerDistribution> per_unit_choice) {
  std::vector<LayerDistribution> out;
  out.reserve(cands.unit_of.size());
  for (std::size_t u : cands.unit_of) out.push_back(per_unit_choice[u]);
  return out;
}

namespace {

/// Lexicographic (p_N, p_H, p_W) order of a unit's candidates.
std::vector<std::size_t> lex_order(const std::vector<LayerDistribution>& v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](auto a, auto b) { return v[a] < v[b]; });
  return idx;
}

std::vector<double> path_weights(const NetworkGraph& g, const CandidateSet& cands,
                                 const MachineModel& m, const CostTable& t) {
  std::vector<double> w(g.size(), 0.0);
  try {
    for (std::size_t i = 0; i < g.size(); ++i) {
      double best = std::numeric_limits<double>::infinity();
      for (const auto& d : cands.of_layer(i)) {
        const auto lc = layer_cost(g, i, d, m, t);
        best = std::min(best, lc.fp_compute + lc.bpx_compute + lc.bpw_compute);
      }
      w[i] = best;
    }
  } catch (const CostLookupError&) {
    for (std::size_t i = 0; i < g.size(); ++i) w[i] = g.forward_flops(i);
  }
  return w;
}

/// Units along a layer path, consecutive repeats merged.
std::vector<std::size_t> unit_path(const CandidateSet& cands,
                                   const std::vector<std::size_t>& layers) {
  std::vector<std::size_t> out;
  for (std::size_t i : layers) {
    const std::size_t u = cands.unit_of[i];
    if (out.empty() || out.back() != u) out.push_back(u);
  }
  return out;
}

struct PlanOutcome {
  std::vector<std::size_t> choice;  // per unit, index into cands.per_unit
  double first_path_cost = 0.0;
};

PlanOutcome plan_paths(const NetworkGraph& g, const CandidateSet& cands, const MachineModel& m,
                       const CostTable& t, const PlannerOptions& opts,
                       const std::vector<std::vector<std::size_t>>& paths) {
  constexpr std::size_t kUnassigned = std::numeric_limits<std::size_t>::max();
  PlanOutcome out;
  out.choice.assign(cands.anchors.size(), kUnassigned);
  for (std::size_t pi = 0; pi < paths.size(); ++pi) {
    const auto units = unit_path(cands, paths[pi]);
    // Stage choices in lexicographic grid order; fixed units offer one.
    std::vector<std::vector<std::size_t>> options;
    for (std::size_t u : units) {
      if (out.choice[u] != kUnassigned) {
        options.push_back({out.choice[u]});
      } else {
        options.push_back(lex_order(cands.per_unit[u]));
      }
    }
    LineProblem prob;
    for (std::size_t k = 0; k < units.size(); ++k) {
      std::vector<double> nc;
      for (std::size_t j : options[k]) {
        nc.push_back(unit_cost(g, cands, units[k], cands.per_unit[units[k]][j], m, t, opts.cost));
      }
      prob.node_cost.push_back(std::move(nc));
      if (k + 1 == units.size()) break;
      std::vector<std::vector<double>> ec;
      for (std::size_t i : options[k]) {
        std::vector<double> row;
        for (std::size_t j : options[k + 1]) {
          row.push_back(unit_shuffle_cost(g, cands, units[k], cands.per_unit[units[k]][i],
                                          units[k + 1], cands.per_unit[units[k + 1]][j], m));
        }
        ec.push_back(std::move(row));
      }
      prob.edge_cost.push_back(std::move(ec));
    }
    const LineSolution sol = solve_line(prob);
    if (pi == 0) out.first_path_cost = sol.cost;
    for (std::size_t k = 0; k < units.size(); ++k) {
      out.choice[units[k]] = options[k][sol.choice[k]];
    }
  }
  for (std::size_t u = 0; u < out.choice.size(); ++u) {
    if (out.choice[u] == kUnassigned) {
      throw PlanError("layer '" + g.layer(cands.anchors[u]).id + "' is on no planned path");
    }
  }
  return out;
}

Strategy plan_with_cap(const NetworkGraph& g, CandidateSet cands, const MachineModel& m,
                       const CostTable& t, const PlannerOptions& opts,
                       const std::vector<std::vector<std::size_t>>& paths) {
  for (;;) {
    const PlanOutcome po = plan_paths(g, cands, m, t, opts, paths);
    std::vector<LayerDistribution> chosen;
    for (std::size_t u = 0; u < po.choice.size(); ++u) {
      chosen.push_back(cands.per_unit[u][po.choice[u]]);
    }
    Strategy s;
    s.assignment = expand(cands, chosen);
    s.memory = memory_estimate(g, s.assignment, m.word_bytes);
    if (!opts.mem_cap_bytes || s.memory.max_bytes() <= *opts.mem_cap_bytes) {
      s.breakdown = network_cost(g, s.assignment, m, t, opts.cost);
      s.predicted_seconds = s.breakdown.total;
      s.path_cost = po.first_path_cost;
      return s;
    }
    // Drop the chosen candidate that costs the most memory above its unit's
    // leanest option, then plan again.
    const int r = s.memory.busiest_rank;
    std::int64_t worst = 0;
    std::size_t drop = cands.per_unit.size();
    for (std::size_t u = 0; u < cands.per_unit.size(); ++u) {
      if (cands.per_unit[u].size() < 2) continue;
      std::int64_t lo = std::numeric_limits<std::int64_t>::max();
      for (const auto& d : cands.per_unit[u]) {
        lo = std::min(lo, unit_memory(g, cands.members[u], d, m.word_bytes)[static_cast<std::size_t>(r)]);
      }
      const std::int64_t mine =
          unit_memory(g, cands.members[u], chosen[u], m.word_bytes)[static_cast<std::size_t>(r)];
      if (mine - lo > worst) {
        worst = mine - lo;
        drop = u;
      }
    }
    if (drop == cands.per_unit.size()) {
      std::ostringstream os;
      os << "memory cap " << *opts.mem_cap_bytes << " B cannot be met; best plan needs "
         << s.memory.max_bytes() << " B on rank " << r;
      throw PlanError(os.str());
    }
    auto& v = cands.per_unit[drop];
    v.erase(v.begin() + static_cast<std::ptrdiff_t>(po.choice[drop]));
  }
}

}  // namespace

Strategy plan_line(const NetworkGraph& g, const CandidateSet& cands, const MachineModel& m,
                   const CostTable& t, const PlannerOptions& opts) {
  if (!g.is_line()) throw PlanError("plan_line: network has branches; use plan_dag");
  std::vector<std::size_t> all(g.size());
  std::iota(all.begin(), all.end(), 0);
  return plan_with_cap(g, cands, m, t, opts, {all});
}

Strategy plan_dag(const NetworkGraph& g, const CandidateSet& cands, const MachineModel& m,
                  const CostTable& t, const PlannerOptions& opts) {
  const auto w = path_weights(g, cands, m, t);
  return plan_with_cap(g, cands, m, t, opts, longest_path_decomposition(g, w));
}

std::vector<LayerDistribution> uniform_strategies(const NetworkGraph& g, int ranks) {
  std::vector<LayerDistribution> out;
  for (const auto& d : factorizations(ranks)) {
    bool ok = true;
    for (std::size_t i = 0; i < g.size() && ok; ++i) ok = check_layer_distribution(g, i, d).empty();
    if (ok) out.push_back(d);
  }
  return out;
}

std::optional<std::vector<LayerDistribution>> random_strategy(const NetworkGraph& g, int ranks,
                                                              std::mt19937_64& rng) {
  const Units units = build_units(g);
  const auto grids = factorizations(ranks);
  std::vector<LayerDistribution> choice;
  for (const auto& members : units.members) {
    std::vector<LayerDistribution> ok;
    for (const auto& d : grids) {
      bool fits = true;
      for (std::size_t i : members) fits = fits && check_layer_distribution(g, i, d).empty();
      if (fits) ok.push_back(d);
    }
    if (ok.empty()) return std::nullopt;
    std::uniform_int_distribution<std::size_t> pick(0, ok.size() - 1);
    choice.push_back(ok[pick(rng)]);
  }
  std::vector<LayerDistribution> out;
  for (std::size_t u : units.unit_of) out.push_back(choice[u]);
  return out;
}

}  // namespace convplan
