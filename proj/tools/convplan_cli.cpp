#include <algorithm>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <random>
#include <sstream>
#include <string>

#include "CLI11.hpp"

#include "convplan/dist.hpp"
#include "convplan/error.hpp"
#include "convplan/io.hpp"
#include "convplan/netgraph.hpp"
#include "convplan/perfmodel.hpp"
#include "convplan/planner.hpp"
#include "convplan/simexec.hpp"
#include "convplan/synth.hpp"

using namespace convplan;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitFailed = 1;
constexpr int kExitUsage = 2;

struct Options {
  std::string net, machine, costs, strategy, shapes, out, events;
  int ranks = 0;
  std::uint64_t seed = 1;
  std::optional<std::int64_t> mem_cap;
  double tolerance = 1e-9;
  int max_candidates = 16;
  bool interpolate = false;
  bool corrupt_halo = false;
  int random_strategies = 4;
  int reps = 10;
  int warmups = 3;
  double macs_per_second = 1e10;
  bool no_overlap = false;
};

std::string dist_str(const LayerDistribution& d) {
  std::ostringstream os;
  os << d;
  return os.str();
}

std::string human_bytes(std::int64_t b) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(1);
  if (b >= (1LL << 30)) {
    os << static_cast<double>(b) / static_cast<double>(1LL << 30) << " GiB";
  } else if (b >= (1LL << 20)) {
    os << static_cast<double>(b) / static_cast<double>(1LL << 20) << " MiB";
  } else if (b >= (1LL << 10)) {
    os << static_cast<double>(b) / 1024.0 << " KiB";
  } else {
    os << b << " B";
  }
  return os.str();
}

NetworkGraph load_or_generate(const Options& o) {
  if (!o.net.empty()) return io::load_network(o.net);
  return synth::random_network(o.seed);
}

MachineModel machine_for(const Options& o) {
  MachineModel m;
  if (!o.machine.empty()) {
    m = io::load_machine(o.machine);
  } else {
    m.alpha_intra = m.alpha_inter = 1e-6;
    m.beta_intra = m.beta_inter = 1e-10;
    m.ranks = m.node_size = 1;
  }
  if (o.ranks > 0) {
    if (o.machine.empty() || m.node_size == m.ranks) m.node_size = o.ranks;
    m.ranks = o.ranks;
  }
  m.node_size = std::min(m.node_size, m.ranks);
  m.validate();
  return m;
}

CostTable costs_for(const Options& o, const NetworkGraph& g, const CandidateSet* cands) {
  CostTable t;
  if (!o.costs.empty()) {
    t = io::load_cost_table(o.costs);
  } else if (cands) {
    t = flop_cost_table(g, cands->per_layer(), o.macs_per_second);
  }
  t.set_interpolation(o.interpolate);
  return t;
}

void print_costs(const NetworkGraph& g, const std::vector<LayerDistribution>& a,
                 const NetworkCost& nc, const MemoryEstimate* mem) {
  std::size_t id_width = 6;
  for (const auto& l : g.layers()) id_width = std::max(id_width, l.id.size() + 2);
  const int idw = static_cast<int>(id_width);
  std::cout << std::left << std::setw(idw) << "layer" << std::setw(11) << "dist"
            << std::right << std::setw(12) << "FP" << std::setw(12) << "BPx" << std::setw(12)
            << "BPw" << std::setw(12) << "BPa" << std::setw(14) << "halo bytes";
  if (mem) std::cout << std::setw(12) << "memory";
  std::cout << "\n" << std::scientific << std::setprecision(3);
  for (std::size_t i = 0; i < g.size(); ++i) {
    const auto& lc = nc.layers[i];
    std::cout << std::left << std::setw(idw) << g.layer(i).id << std::setw(11) << dist_str(a[i])
              << std::right << std::setw(12) << lc.fp_exposed << std::setw(12) << lc.bpx_exposed
              << std::setw(12) << lc.bpw_exposed << std::setw(12) << lc.bpa << std::setw(14)
              << lc.fp_halo_bytes + lc.bpx_halo_bytes;
    if (mem) std::cout << std::setw(12) << human_bytes(mem->layers[i].total());
    std::cout << "\n";
  }
  for (const auto& e : nc.shuffles) {
    std::cout << "shuffle " << g.layer(e.parent).id << " -> " << g.layer(e.child).id
              << ": fwd " << e.forward_seconds << " s (" << e.forward_bytes << " B), bwd "
              << e.backward_seconds << " s (" << e.backward_bytes << " B)\n";
  }
  std::cout << "forward " << nc.forward << " s, backward " << nc.backward
            << " s, exposed allreduce " << nc.exposed_allreduce << " s\n"
            << "total " << nc.total << " s\n";
  if (mem) {
    std::cout << "max memory per rank " << human_bytes(mem->max_bytes()) << " (rank "
              << mem->busiest_rank << ")\n";
  }
  std::cout << std::defaultfloat;
}

int cmd_verify(const Options& o) {
  const NetworkGraph g = load_or_generate(o);
  const int ranks = o.ranks > 0 ? o.ranks : 1;
  std::cout << "seed " << o.seed << "\n"
            << "network " << (o.net.empty() ? "random" : o.net) << ", " << g.size()
            << " layers, " << ranks << " ranks, tolerance " << o.tolerance << "\n";

  std::vector<std::vector<LayerDistribution>> strategies;
  if (!o.strategy.empty()) {
    strategies.push_back(io::load_strategy(g, o.strategy));
  } else {
    for (const auto& d : uniform_strategies(g, ranks)) {
      strategies.emplace_back(g.size(), d);
    }
    std::mt19937_64 rng(o.seed);
    for (int k = 0; k < o.random_strategies; ++k) {
      if (auto s = random_strategy(g, ranks, rng)) strategies.push_back(std::move(*s));
    }
  }
  if (strategies.empty()) {
    std::cout << "no valid strategy over " << ranks << " ranks\n";
    return kExitFailed;
  }

  std::mt19937_64 rng(o.seed);
  const Parameters params = synth::random_parameters(g, rng);
  const StepInputs inputs = synth::random_inputs(g, rng);
  ExecOptions eo;
  eo.corrupt_halo = o.corrupt_halo;

  bool all_ok = true;
  std::cout << std::scientific << std::setprecision(3);
  for (const auto& s : strategies) {
    std::string label;
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (i == 0 || !(s[i] == s[i - 1])) label += (label.empty() ? "" : " ") + dist_str(s[i]);
    }
    try {
      const Executor ex(g, s, eo);
      const auto step = ex.run_step(params, inputs);
      const auto got = gather_step(g, s, step);
      const auto want = serial_step(g, s, params, inputs);
      const auto cmp = compare_steps(g, got, want);
      const bool ok = cmp.worst() <= o.tolerance;
      all_ok = all_ok && ok;
      std::cout << (ok ? "PASS " : "FAIL ") << label << "  y " << cmp.y << "  dx " << cmp.dx
                << "  dw " << cmp.dw;
      if (!ok) std::cout << "  worst layer '" << cmp.worst_layer << "'";
      std::cout << "\n";
    } catch (const Error& e) {
      all_ok = false;
      std::cout << "FAIL " << label << "  " << e.what() << "\n";
    }
  }
  std::cout << (all_ok ? "verification passed" : "verification FAILED") << " ("
            << strategies.size() << " strategies)\n";
  return all_ok ? kExitOk : kExitFailed;
}

int cmd_plan(const Options& o) {
  const NetworkGraph g = io::load_network(o.net);
  const MachineModel m = machine_for(o);
  PlannerOptions po;
  po.mem_cap_bytes = o.mem_cap;
  po.max_candidates = o.max_candidates;
  po.cost.overlap = !o.no_overlap;
  const CandidateSet cands = generate_candidates(g, m, po);
  const CostTable t = costs_for(o, g, &cands);
  const Strategy s = g.is_line() ? plan_line(g, cands, m, t, po) : plan_dag(g, cands, m, t, po);

  std::cout << "seed " << o.seed << "\n"
            << "planned " << g.size() << " layers over " << m.ranks << " ranks"
            << (o.costs.empty() ? " (flop cost model)" : "") << "\n";
  if (o.mem_cap) std::cout << "memory cap " << human_bytes(*o.mem_cap) << "\n";
  print_costs(g, s.assignment, s.breakdown, &s.memory);
  if (!o.out.empty()) io::write_file(o.out, io::serialize_strategy(g, s));
  return kExitOk;
}

int cmd_estimate(const Options& o) {
  const NetworkGraph g = io::load_network(o.net);
  const auto a = io::load_strategy(g, o.strategy);
  Options oo = o;
  if (oo.ranks == 0) oo.ranks = a.front().ranks();
  const MachineModel m = machine_for(oo);
  std::vector<std::vector<LayerDistribution>> per_layer;
  for (const auto& d : a) per_layer.push_back({d});
  CostTable t = o.costs.empty() ? flop_cost_table(g, per_layer, o.macs_per_second)
                                : io::load_cost_table(o.costs);
  t.set_interpolation(o.interpolate);
  CostOptions co;
  co.overlap = !o.no_overlap;
  const auto nc = network_cost(g, a, m, t, co);
  const auto mem = memory_estimate(g, a, m.word_bytes);
  std::cout << "seed " << o.seed << "\n";
  print_costs(g, a, nc, &mem);
  if (!o.out.empty()) {
    Strategy s;
    s.assignment = a;
    s.breakdown = nc;
    s.predicted_seconds = nc.total;
    s.memory = mem;
    io::write_file(o.out, io::serialize_strategy(g, s));
  }
  return kExitOk;
}

int cmd_benchgen(const Options& o) {
  const auto shapes = io::parse_bench_shapes(io::read_file(o.shapes));
  const CostTable t = benchgen(shapes, o.reps, o.warmups, static_cast<unsigned>(o.seed));
  std::cout << "seed " << o.seed << "\n"
            << "timed " << shapes.size() << " shapes, " << t.size() << " entries ("
            << o.warmups << " warmups, mean of " << o.reps << " runs)\n";
  const std::string csv = io::serialize_cost_table(t);
  if (o.out.empty()) {
    std::cout << csv;
  } else {
    io::write_file(o.out, csv);
  }
  return kExitOk;
}

int cmd_simulate(const Options& o) {
  const NetworkGraph g = load_or_generate(o);
  std::vector<LayerDistribution> a;
  if (!o.strategy.empty()) {
    a = io::load_strategy(g, o.strategy);
  } else {
    const auto uniform = uniform_strategies(g, o.ranks > 0 ? o.ranks : 1);
    if (uniform.empty()) throw DistributionError("no uniform strategy fits this network");
    a.assign(g.size(), uniform.front());
  }
  std::mt19937_64 rng(o.seed);
  const Parameters params = synth::random_parameters(g, rng);
  const StepInputs inputs = synth::random_inputs(g, rng);
  ExecOptions eo;
  eo.corrupt_halo = o.corrupt_halo;
  const Executor ex(g, a, eo);
  const auto step = ex.run_step(params, inputs);

  std::cout << "seed " << o.seed << "\n"
            << "simulated " << g.size() << " layers on " << ex.ranks() << " ranks, "
            << step.log.records().size() << " events\n";
  for (const char* action :
       {"halo_send:fp", "halo_send:bp-data", "shuffle_send:fp", "shuffle_send:bp-data",
        "allreduce_send:fp", "allreduce_send:bp-data", "allreduce_send:bp-weights"}) {
    std::cout << std::left << std::setw(28) << action << std::right << std::setw(14)
              << step.log.bytes(action) << " B\n";
  }
  if (!o.events.empty()) {
    std::ofstream os(o.events);
    if (!os) throw ParseError("cannot write '" + o.events + "'");
    step.log.write_csv(os);
  }
  if (!o.out.empty()) {
    const auto got = gather_step(g, a, step);
    std::ostringstream os;
    os << std::setprecision(17);
    os << "{\n  \"seed\": " << o.seed << ",\n  \"layers\": {";
    for (std::size_t i = 0; i < g.size(); ++i) {
      const auto& y = got.layers[i].y;
      os << (i ? "," : "") << "\n    \"" << g.layer(i).id << "\": {\"shape\": [" << y.shape().n
         << ", " << y.shape().c << ", " << y.shape().h << ", " << y.shape().w << "], \"y\": [";
      const auto v = y.values();
      for (std::size_t k = 0; k < v.size(); ++k) os << (k ? ", " : "") << v[k];
      os << "]}";
    }
    os << "\n  }\n}\n";
    io::write_file(o.out, os.str());
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Plan, price and verify sample/spatial-parallel CNN training strategies"};
  app.require_subcommand(1);
  Options o;
  std::int64_t mem_cap = -1;

  auto common = [&](CLI::App* sc) {
    sc->add_option("--seed", o.seed, "Seed for synthetic networks and tensors");
    sc->add_option("--ranks", o.ranks, "Number of ranks P");
  };
  auto costs = [&](CLI::App* sc) {
    sc->add_option("--machine", o.machine, "Machine model (JSON)")->check(CLI::ExistingFile);
    sc->add_option("--costs", o.costs, "Cost table (CSV); flop model when omitted")
        ->check(CLI::ExistingFile);
    sc->add_flag("--interpolate-costs", o.interpolate,
                 "Estimate missing cost-table keys by log-linear fit");
    sc->add_option("--macs-per-second", o.macs_per_second, "Rate for the flop cost model");
    sc->add_flag("--no-overlap", o.no_overlap, "Price halo exchanges without overlap");
    sc->add_option("--out", o.out, "Write the strategy with its predicted breakdown");
  };

  auto* verify = app.add_subcommand("verify", "Compare the distributed step against the serial oracle");
  common(verify);
  verify->add_option("--net", o.net, "Network (JSON); random when omitted")->check(CLI::ExistingFile);
  verify->add_option("--strategy", o.strategy, "Verify only this strategy")->check(CLI::ExistingFile);
  verify->add_option("--tolerance", o.tolerance, "Max relative error");
  verify->add_option("--random-strategies", o.random_strategies,
                     "Mixed strategies drawn in addition to the uniform ones");
  verify->add_flag("--debug-corrupt-halo", o.corrupt_halo, "Drop one halo row on receipt");

  auto* plan = app.add_subcommand("plan", "Choose a strategy by shortest path");
  common(plan);
  costs(plan);
  plan->add_option("--net", o.net, "Network (JSON)")->required()->check(CLI::ExistingFile);
  plan->add_option("--mem-cap-bytes", mem_cap, "Per-rank memory cap");
  plan->add_option("--max-candidates", o.max_candidates, "Candidates kept per layer");

  auto* estimate = app.add_subcommand("estimate", "Price a given strategy");
  common(estimate);
  costs(estimate);
  estimate->add_option("--net", o.net, "Network (JSON)")->required()->check(CLI::ExistingFile);
  estimate->add_option("--strategy", o.strategy, "Strategy (JSON)")
      ->required()
      ->check(CLI::ExistingFile);

  auto* bench = app.add_subcommand("benchgen", "Time the reference kernels into a cost table");
  bench->add_option("--seed", o.seed, "Seed for the timed tensors");
  bench->add_option("shapes", o.shapes, "Shapes CSV (n,c,h,w,f,k,s,pad)")
      ->required()
      ->check(CLI::ExistingFile);
  bench->add_option("--out", o.out, "Cost table CSV; standard output when omitted");
  bench->add_option("--reps", o.reps, "Timed runs per entry")->check(CLI::PositiveNumber);
  bench->add_option("--warmups", o.warmups, "Untimed runs per entry")->check(CLI::NonNegativeNumber);

  auto* simulate = app.add_subcommand("simulate", "Run one step and export the event log");
  common(simulate);
  simulate->add_option("--net", o.net, "Network (JSON); random when omitted")->check(CLI::ExistingFile);
  simulate->add_option("--strategy", o.strategy, "Strategy (JSON)")->check(CLI::ExistingFile);
  simulate->add_option("--events", o.events, "Event log CSV");
  simulate->add_option("--out", o.out, "Gathered outputs (JSON)");
  simulate->add_flag("--debug-corrupt-halo", o.corrupt_halo, "Drop one halo row on receipt");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }
  if (mem_cap >= 0) o.mem_cap = mem_cap;

  try {
    if (*verify) return cmd_verify(o);
    if (*plan) return cmd_plan(o);
    if (*estimate) return cmd_estimate(o);
    if (*bench) return cmd_benchgen(o);
    if (*simulate) return cmd_simulate(o);
  } catch (const ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const GraphError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitFailed;
  }
  return kExitUsage;
}
