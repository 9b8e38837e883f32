#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

#include "convplan/netgraph.hpp"
#include "convplan/perfmodel.hpp"
#include "convplan/planner.hpp"

// Text formats. Every parser throws ParseError with the offending field or
// line; network validation failures surface as GraphError.
namespace convplan::io {

std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::string_view text);

/// {"layers": [{"id", "kind", "parents", ...kind fields}]}. Conv padding
/// defaults to floor(K/2) and stride to 1; pool stride defaults to the window.
NetworkGraph parse_network(std::string_view json);
NetworkGraph load_network(const std::filesystem::path& path);
/// Canonical form: layers in topological order with every field explicit.
std::string serialize_network(const NetworkGraph& g);

/// {"ranks", "node_size", "alpha_intra", "alpha_inter", "beta_intra",
/// "beta_inter", "word_bytes"}; node_size defaults to ranks.
MachineModel parse_machine(std::string_view json);
MachineModel load_machine(const std::filesystem::path& path);
std::string serialize_machine(const MachineModel& m);

/// {"ranks": P, "layers": {id: {"n_parts", "h_parts", "w_parts"}}, ...};
/// extra top-level keys (the predicted breakdown) are ignored on input.
std::vector<LayerDistribution> parse_strategy(const NetworkGraph& g, std::string_view json);
std::vector<LayerDistribution> load_strategy(const NetworkGraph& g,
                                             const std::filesystem::path& path);
std::string serialize_strategy(const NetworkGraph& g,
                               const std::vector<LayerDistribution>& assignment);
/// Adds the predicted breakdown (total, per-layer costs, shuffles, memory).
std::string serialize_strategy(const NetworkGraph& g, const Strategy& s);

/// CSV with header `op,n,c,h,w,f,k,s,pad,seconds`.
CostTable parse_cost_table(std::string_view csv);
CostTable load_cost_table(const std::filesystem::path& path);
std::string serialize_cost_table(const CostTable& t);

/// CSV with header `n,c,h,w,f,k,s,pad`.
std::vector<BenchShape> parse_bench_shapes(std::string_view csv);

}  // namespace convplan::io
