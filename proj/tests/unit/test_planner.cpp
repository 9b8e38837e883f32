#include <doctest.h>

#include <fstream>
#include <random>

#include "builders.hpp"
#include "convplan/error.hpp"
#include "convplan/io.hpp"
#include "convplan/planner.hpp"
#include "convplan/synth.hpp"
#include "oracles.hpp"

using namespace convplan;
using namespace convplan::testing;

namespace {

MachineModel flat(int ranks, double alpha = 1e-5, double beta = 1e-9) {
  MachineModel m;
  m.ranks = m.node_size = ranks;
  m.alpha_intra = m.alpha_inter = alpha;
  m.beta_intra = m.beta_inter = beta;
  return m;
}

// Sum of unit costs plus shuffles over every unit edge.
double assignment_cost(const NetworkGraph& g, const CandidateSet& c,
                       const std::vector<LayerDistribution>& per_unit, const MachineModel& m,
                       const CostTable& t) {
  double total = 0.0;
  for (std::size_t u = 0; u < c.anchors.size(); ++u)
    total += unit_cost(g, c, u, per_unit[u], m, t);
  for (std::size_t u = 0; u < c.anchors.size(); ++u)
    for (std::size_t v = 0; v < c.anchors.size(); ++v)
      if (u != v) total += unit_shuffle_cost(g, c, u, per_unit[u], v, per_unit[v], m);
  return total;
}

double brute_force(const NetworkGraph& g, const CandidateSet& c, const MachineModel& m,
                   const CostTable& t) {
  std::vector<std::size_t> idx(c.anchors.size(), 0);
  double best = 1e300;
  while (true) {
    std::vector<LayerDistribution> pick;
    for (std::size_t u = 0; u < idx.size(); ++u) pick.push_back(c.per_unit[u][idx[u]]);
    best = std::min(best, assignment_cost(g, c, pick, m, t));
    std::size_t u = 0;
    while (u < idx.size() && ++idx[u] == c.per_unit[u].size()) idx[u++] = 0;
    if (u == idx.size()) break;
  }
  return best;
}

std::vector<LayerDistribution> units_of(const CandidateSet& c, const Strategy& s) {
  std::vector<LayerDistribution> out;
  for (std::size_t a : c.anchors) out.push_back(s.assignment[a]);
  return out;
}

}  // namespace

TEST_CASE("P=4 candidates are ordered sample-first") {
  const auto g = NetworkGraph::build({input("in", 32, 16, 128, 128), conv("c", "in", 16, 3)});
  const auto c = generate_candidates(g, flat(4));
  const std::vector<LayerDistribution> want{{4, 1, 1}, {2, 2, 1}, {2, 1, 2},
                                            {1, 2, 2}, {1, 4, 1}, {1, 1, 4}};
  CHECK(c.of_layer(1) == want);
  CHECK(classify(want[0]) == CandidateKind::sample_only);
  CHECK(classify(want[1]) == CandidateKind::hybrid);
  CHECK(classify(want[3]) == CandidateKind::spatial);
}

TEST_CASE("one sample allows only spatial candidates") {
  const auto g = NetworkGraph::build({input("in", 1, 4, 64, 64), conv("c", "in", 4, 3)});
  const auto c = generate_candidates(g, flat(8));
  for (const auto& d : c.of_layer(1)) CHECK(d.n_parts == 1);
}

TEST_CASE("a spatial dim as small as the kernel is never split") {
  const auto g = NetworkGraph::build({input("in", 1, 4, 3, 64), conv("c", "in", 4, 3)});
  const auto c = generate_candidates(g, flat(4));
  REQUIRE(!c.of_layer(1).empty());
  for (const auto& d : c.of_layer(1)) CHECK(d.h_parts == 1);
}

TEST_CASE("non-windowed layers share their parent's candidates") {
  const auto g = NetworkGraph::build({input("in", 4, 4, 32, 32), conv("c", "in", 4, 3),
                                      bn("b", "c"), relu("r", {"b"})});
  const auto c = generate_candidates(g, flat(4));
  CHECK(c.unit_of[2] == c.unit_of[1]);
  CHECK(c.unit_of[3] == c.unit_of[1]);
}

TEST_CASE("candidate cap keeps the first candidates") {
  const auto g = NetworkGraph::build({input("in", 32, 16, 128, 128), conv("c", "in", 16, 3)});
  PlannerOptions po;
  po.max_candidates = 2;
  const auto c = generate_candidates(g, flat(4), po);
  CHECK(c.of_layer(1) == std::vector<LayerDistribution>{{4, 1, 1}, {2, 2, 1}});
}

TEST_CASE("line solver equals exhaustive search") {
  std::mt19937_64 rng(77);
  std::uniform_real_distribution<double> u(0.0, 10.0);
  std::uniform_int_distribution<int> stages(1, 6), width(1, 4);
  for (int trial = 0; trial < 200; ++trial) {
    LineProblem p;
    const int k = stages(rng);
    for (int s = 0; s < k; ++s) {
      p.node_cost.emplace_back(static_cast<std::size_t>(width(rng)));
      for (double& v : p.node_cost.back()) v = u(rng);
    }
    for (int s = 0; s + 1 < k; ++s) {
      p.edge_cost.emplace_back(p.node_cost[s].size(),
                               std::vector<double>(p.node_cost[s + 1].size()));
      for (auto& row : p.edge_cost.back())
        for (double& v : row) v = u(rng) < 3.0 ? 0.0 : u(rng);
    }
    const auto sol = solve_line(p);
    CHECK(sol.cost == oracle::exhaustive_min(p));
    CHECK(oracle::path_length(p, sol.choice) == sol.cost);
  }
}

TEST_CASE("line solver breaks ties by the smallest choice sequence") {
  LineProblem p;
  p.node_cost = {{1, 1}, {2, 2, 2}, {0, 0}};
  p.edge_cost = {{{0, 0, 0}, {0, 0, 0}}, {{0, 0}, {0, 0}, {0, 0}}};
  CHECK(solve_line(p).choice == std::vector<std::size_t>{0, 0, 0});
  p.node_cost[0] = {2, 1};
  p.edge_cost[0] = {{0, 0, 0}, {1, 1, 1}};
  CHECK(solve_line(p).choice == std::vector<std::size_t>{0, 0, 0});
  LineProblem empty;
  empty.node_cost = {{1}, {}};
  empty.edge_cost = {{{}}};
  CHECK_THROWS_AS(solve_line(empty), PlanError);
}

TEST_CASE("single-layer net plans trivially") {
  const auto g = NetworkGraph::build({input("in", 2, 3, 8, 8)});
  const auto m = flat(1);
  const auto c = generate_candidates(g, m);
  const auto s = plan_line(g, c, m, CostTable{});
  CHECK(s.assignment == std::vector<LayerDistribution>{{1, 1, 1}});
  CHECK(s.predicted_seconds == 0.0);
}

TEST_CASE("hand-built costs make a mid-network shuffle worthwhile") {
  const auto g = NetworkGraph::build({input("in", 2, 4, 64, 64), conv("wide", "in", 8, 3),
                                      conv("narrow", "wide", 4, 3)});
  const auto m = flat(2, 1e-6, 1e-10);
  const auto c = generate_candidates(g, m);
  CostTable t;
  for (std::size_t layer : {1, 2})
    for (const auto& d : c.of_layer(layer)) {
      const bool sample = d.sample_only();
      // "wide" is cheap when split spatially; "narrow" when split by sample.
      const double sec = (layer == 1) == sample ? 1.0 : 0.1;
      for (auto op : {CostOp::fp, CostOp::bp_data, CostOp::bp_filter})
        t.set(local_cost_key(g, layer, d, op), sec);
    }
  const auto s = plan_line(g, c, m, t);
  CHECK(!s.assignment[1].sample_only());
  CHECK(s.assignment[2].sample_only());
  CHECK(s.path_cost == doctest::Approx(brute_force(g, c, m, t)).epsilon(1e-12));
  CHECK(s.predicted_seconds == network_cost(g, s.assignment, m, t).total);
}

TEST_CASE("uniform costs choose the first path") {
  const auto g = NetworkGraph::build({input("in", 4, 2, 32, 32), conv("c", "in", 2, 1)});
  const auto m = flat(4, 0.0, 0.0);
  const auto c = generate_candidates(g, m);
  CostTable t;
  for (const auto& d : c.of_layer(1))
    for (auto op : {CostOp::fp, CostOp::bp_data, CostOp::bp_filter})
      t.set(local_cost_key(g, 1, d, op), 1.0);
  const auto s = plan_line(g, c, m, t);
  CHECK(s.assignment[1] == LayerDistribution{1, 1, 4});
  CHECK(plan_line(g, c, m, t).assignment == s.assignment);
}

TEST_CASE("plan_line rejects branches and plan_dag handles lines") {
  const auto line = NetworkGraph::build({input("in", 2, 2, 32, 32), conv("a", "in", 2, 3),
                                         conv("b", "a", 2, 3)});
  const auto m = flat(2);
  const auto c = generate_candidates(line, m);
  const auto t = flop_cost_table(line, c.per_layer(), 1e9);
  CHECK(plan_dag(line, c, m, t).assignment == plan_line(line, c, m, t).assignment);

  const auto fork = NetworkGraph::build({input("in", 2, 2, 32, 32), conv("a", "in", 2, 3),
                                         conv("b", "in", 2, 3)});
  const auto cf = generate_candidates(fork, m);
  CHECK_THROWS_AS(plan_line(fork, cf, m, flop_cost_table(fork, cf.per_layer(), 1e9)), PlanError);
}

TEST_CASE("diamond: the skip branch is optimal given the fixed main path") {
  const auto g = NetworkGraph::build({input("in", 4, 4, 64, 64), conv("main1", "in", 8, 5),
                                      conv("main2", "main1", 4, 5), conv("skip", "in", 4, 1),
                                      relu("join", {"main2", "skip"})});
  const auto m = flat(4, 1e-5, 1e-9);
  const auto c = generate_candidates(g, m);
  const auto t = flop_cost_table(g, c.per_layer(), 1e9);
  const auto s = plan_dag(g, c, m, t);
  auto units = units_of(c, s);
  const std::size_t su = c.unit_of[g.index_of("skip")];
  const double chosen = assignment_cost(g, c, units, m, t);
  for (const auto& d : c.per_unit[su]) {
    units[su] = d;
    CHECK(chosen <= assignment_cost(g, c, units, m, t) + 1e-15);
  }
}

TEST_CASE("plans are deterministic and no worse than uniform assignments") {
  int compared = 0;
  for (std::uint64_t seed = 50; seed < 58; ++seed) {
    const auto g = synth::random_network(seed);
    const auto m = flat(4, 1e-5, 1e-9);
    CandidateSet c;
    try {
      c = generate_candidates(g, m);
    } catch (const PlanError&) {
      continue;  // some layer is too small for four ranks
    }
    const auto t = flop_cost_table(g, c.per_layer(), 1e8);
    const auto a = plan_dag(g, c, m, t), b = plan_dag(g, c, m, t);
    CHECK(a.assignment == b.assignment);
    const double planned = assignment_cost(g, c, units_of(c, a), m, t);
    for (const auto& d : uniform_strategies(g, 4)) {
      bool everywhere = true;
      for (const auto& cands : c.per_unit)
        everywhere = everywhere && std::find(cands.begin(), cands.end(), d) != cands.end();
      if (!everywhere) continue;
      std::vector<LayerDistribution> u(c.anchors.size(), d);
      INFO("seed " << seed << " uniform " << d);
      CHECK(planned <= assignment_cost(g, c, u, m, t) * (1 + 1e-12));
      ++compared;
    }
  }
  CHECK(compared >= 8);
}

TEST_CASE("memory cap is respected or reported") {
  const auto g = io::load_network(CONVPLAN_NETS_DIR "/mesh2k.json");
  const std::int64_t cap = 16LL << 30;
  const std::vector<LayerDistribution> sample(g.size(), {2, 1, 1});
  CHECK(memory_estimate(g, sample, 4).max_bytes() > cap);

  PlannerOptions po;
  po.mem_cap_bytes = cap;
  CHECK_THROWS_AS(generate_candidates(g, flat(2), po), PlanError);

  const auto m4 = flat(4);
  const auto c = generate_candidates(g, m4, po);
  const auto s = plan_line(g, c, m4, flop_cost_table(g, c.per_layer(), 1e10), po);
  CHECK(s.memory.max_bytes() <= cap);
  for (std::size_t i = 0; i < g.size(); ++i) CHECK(!s.assignment[i].sample_only());
}
