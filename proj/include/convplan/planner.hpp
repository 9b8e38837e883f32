#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <vector>

#include "convplan/dist.hpp"
#include "convplan/netgraph.hpp"
#include "convplan/perfmodel.hpp"

namespace convplan {

enum class CandidateKind { sample_only, spatial, hybrid };

std::string_view to_string(CandidateKind k);
CandidateKind classify(const LayerDistribution& d);

struct PlannerOptions {
  std::optional<std::int64_t> mem_cap_bytes;
  int max_candidates = 16;
  CostOptions cost;
};

/// Layers that share a distribution. Input, conv, pool, fc and join
/// (multi-parent) layers anchor a unit; every other layer joins the unit of
/// its parent.
struct CandidateSet {
  std::vector<std::size_t> unit_of;                // per layer
  std::vector<std::size_t> anchors;                // per unit, ascending
  std::vector<std::vector<std::size_t>> members;   // per unit, topological
  std::vector<std::vector<LayerDistribution>> per_unit;

  const std::vector<LayerDistribution>& of_layer(std::size_t layer) const {
    return per_unit[unit_of[layer]];
  }
  /// Candidates expanded per layer (flop_cost_table takes this form).
  std::vector<std::vector<LayerDistribution>> per_layer() const;
};

/// Every grid (p_N, p_H, p_W) with product `ranks` and p_N <= N under which
/// each unit member can run: blocks non-empty, halos confined to grid
/// neighbors, and for windowed anchors a spatial dimension is split only
/// when its extent exceeds K and blocks hold at least O entries. fc units
/// allow only (ranks, 1, 1). Ordered by p_N descending, then
/// max(p_H, p_W) ascending, then p_H descending.
std::vector<LayerDistribution> unit_grids(const NetworkGraph& g,
                                          std::span<const std::size_t> members, int ranks);

/// Per-unit candidates truncated to `opts.max_candidates` and pruned by the
/// memory cap. Throws PlanError naming the binding constraint when a unit
/// has none left.
CandidateSet generate_candidates(const NetworkGraph& g, const MachineModel& m,
                                 const PlannerOptions& opts = {});

/// Layered shortest-path instance: node_cost[k][j] is the cost of choice j
/// at stage k, edge_cost[k][i][j] the transition cost from stage k choice i
/// to stage k + 1 choice j. A path's length accumulates, from the source,
/// (node_cost[k] + edge_cost[k]) for each stage then the last node cost.
struct LineProblem {
  std::vector<std::vector<double>> node_cost;
  std::vector<std::vector<std::vector<double>>> edge_cost;
};

struct LineSolution {
  std::vector<std::size_t> choice;
  double cost = 0.0;
};

/// Minimum-length path in one forward pass. Equal lengths go to the
/// lexicographically smallest choice sequence. Throws PlanError when a stage
/// is empty.
LineSolution solve_line(const LineProblem& p);

struct Strategy {
  std::vector<LayerDistribution> assignment;  // per layer
  double predicted_seconds = 0.0;             // network_cost(assignment).total
  double path_cost = 0.0;                     // shortest-path length of the first path
  NetworkCost breakdown;
  MemoryEstimate memory;
};

/// Shortest-path plan of a network without branches. Throws PlanError when
/// the graph branches.
Strategy plan_line(const NetworkGraph& g, const CandidateSet& cands, const MachineModel& m,
                   const CostTable& t, const PlannerOptions& opts = {});

/// Plans the longest path first, then each further path with its already
/// assigned units fixed.
Strategy plan_dag(const NetworkGraph& g, const CandidateSet& cands, const MachineModel& m,
                  const CostTable& t, const PlannerOptions& opts = {});

/// Sum of layer_cost totals over the unit's members, in member order.
double unit_cost(const NetworkGraph& g, const CandidateSet& cands, std::size_t unit,
                 const LayerDistribution& d, const MachineModel& m, const CostTable& t,
                 const CostOptions& opts = {});

/// Forward plus backward shuffle seconds over every layer edge from unit u
/// to unit v.
double unit_shuffle_cost(const NetworkGraph& g, const CandidateSet& cands, std::size_t u,
                         const LayerDistribution& du, std::size_t v,
                         const LayerDistribution& dv, const MachineModel& m);

/// Strategy with every layer of unit u set to choice[u].
std::vector<LayerDistribution> expand(const CandidateSet& cands,
                                      std::span<const LayerDistribution> per_unit_choice);

/// Grids the executor accepts for every layer at once.
std::vector<LayerDistribution> uniform_strategies(const NetworkGraph& g, int ranks);

/// Random executor-valid strategy: each unit picks uniformly among grids
/// valid for all its members. Returns nullopt when some unit has none.
std::optional<std::vector<LayerDistribution>> random_strategy(const NetworkGraph& g, int ranks,
                                                              std::mt19937_64& rng);

}  // namespace convplan
