#include <optional>
#include <random>
#include <sstream>

#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "convplan/dist.hpp"
#include "convplan/error.hpp"
#include "convplan/io.hpp"
#include "convplan/perfmodel.hpp"
#include "convplan/planner.hpp"
#include "convplan/simexec.hpp"
#include "convplan/synth.hpp"

namespace py = pybind11;
using namespace convplan;

namespace {

std::vector<LayerDistribution> strategy_arg(const NetworkGraph& g, const py::object& s) {
  if (py::isinstance<py::str>(s)) return io::parse_strategy(g, s.cast<std::string>());
  if (py::isinstance<LayerDistribution>(s)) {
    return std::vector<LayerDistribution>(g.size(), s.cast<LayerDistribution>());
  }
  return s.cast<std::vector<LayerDistribution>>();
}

CostTable table_arg(const NetworkGraph& g, const std::optional<std::string>& csv,
                    const std::vector<std::vector<LayerDistribution>>& per_layer) {
  return csv ? io::parse_cost_table(*csv) : flop_cost_table(g, per_layer, 1e10);
}

py::dict cost_dict(const NetworkGraph& g, const NetworkCost& nc) {
  py::dict d;
  d["total"] = nc.total;
  d["forward"] = nc.forward;
  d["backward"] = nc.backward;
  d["exposed_allreduce"] = nc.exposed_allreduce;
  py::dict layers;
  for (std::size_t i = 0; i < g.size(); ++i) {
    const auto& lc = nc.layers[i];
    py::dict l;
    l["fp"] = lc.fp_exposed;
    l["bp_data"] = lc.bpx_exposed;
    l["bp_weights"] = lc.bpw_exposed;
    l["bp_allreduce"] = lc.bpa;
    l["fp_halo_bytes"] = lc.fp_halo_bytes;
    l["bpx_halo_bytes"] = lc.bpx_halo_bytes;
    layers[py::str(g.layer(i).id)] = l;
  }
  d["layers"] = layers;
  return d;
}

}  // namespace

PYBIND11_MODULE(_convplan, m) {
  m.doc() = "Sample/spatial-parallel CNN training planner and verifier";

  static py::exception<Error> error(m, "Error");
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const Error& e) {
      py::set_error(error, e.what());
    }
  });

  py::class_<LayerDistribution>(m, "LayerDistribution")
      .def(py::init([](int n, int h, int w) { return LayerDistribution{n, h, w}; }),
           py::arg("n_parts") = 1, py::arg("h_parts") = 1, py::arg("w_parts") = 1)
      .def_readwrite("n_parts", &LayerDistribution::n_parts)
      .def_readwrite("h_parts", &LayerDistribution::h_parts)
      .def_readwrite("w_parts", &LayerDistribution::w_parts)
      .def_property_readonly("ranks", &LayerDistribution::ranks)
      .def("__eq__", [](const LayerDistribution& a, const LayerDistribution& b) { return a == b; })
      .def("__repr__", [](const LayerDistribution& d) {
        std::ostringstream os;
        os << "LayerDistribution" << d;
        return os.str();
      });

  py::class_<MachineModel>(m, "MachineModel")
      .def(py::init([](int ranks, int node_size, double alpha, double beta, int word_bytes) {
             MachineModel mm;
             mm.ranks = ranks;
             mm.node_size = node_size > 0 ? node_size : ranks;
             mm.alpha_intra = mm.alpha_inter = alpha;
             mm.beta_intra = mm.beta_inter = beta;
             mm.word_bytes = word_bytes;
             mm.validate();
             return mm;
           }),
           py::arg("ranks") = 1, py::arg("node_size") = 0, py::arg("alpha") = 0.0,
           py::arg("beta") = 0.0, py::arg("word_bytes") = 4)
      .def_static("from_json", &io::parse_machine)
      .def("to_json", &io::serialize_machine)
      .def_readwrite("ranks", &MachineModel::ranks)
      .def_readwrite("node_size", &MachineModel::node_size)
      .def_readwrite("alpha_intra", &MachineModel::alpha_intra)
      .def_readwrite("alpha_inter", &MachineModel::alpha_inter)
      .def_readwrite("beta_intra", &MachineModel::beta_intra)
      .def_readwrite("beta_inter", &MachineModel::beta_inter)
      .def_readwrite("word_bytes", &MachineModel::word_bytes);

  py::class_<NetworkGraph>(m, "Network")
      .def_static("from_json", &io::parse_network, py::arg("text"))
      .def("to_json", &io::serialize_network)
      .def("__len__", &NetworkGraph::size)
      .def_property_readonly("ids",
                             [](const NetworkGraph& g) {
                               std::vector<std::string> ids;
                               for (const auto& l : g.layers()) ids.push_back(l.id);
                               return ids;
                             })
      .def("output_shape",
           [](const NetworkGraph& g, const std::string& id) {
             const auto& s = g.output_shape(g.index_of(id));
             return std::vector<std::int64_t>{s.n, s.c, s.h, s.w};
           })
      .def("is_line", &NetworkGraph::is_line)
      .def("longest_paths", [](const NetworkGraph& g, const std::vector<double>& weight) {
        std::vector<std::vector<std::string>> out;
        for (const auto& p : longest_path_decomposition(g, weight)) {
          std::vector<std::string> ids;
          for (std::size_t i : p) ids.push_back(g.layer(i).id);
          out.push_back(std::move(ids));
        }
        return out;
      });

  py::class_<synth::NetOptions>(m, "NetOptions").def(py::init<>());
  m.def("random_network", &synth::random_network, py::arg("seed"),
        py::arg("options") = synth::NetOptions{});

  m.def("sr_cost",
        [](const MachineModel& mm, std::int64_t words, bool inter) {
          return sr_cost(mm, words, inter ? Locality::inter : Locality::intra);
        },
        py::arg("machine"), py::arg("words"), py::arg("inter") = true);
  m.def("ar_cost", &ar_cost, py::arg("machine"), py::arg("ranks"), py::arg("words"));

  m.def(
      "halo_spec",
      [](const LayerDistribution& d, int kernel, int stride, int padding,
         const std::vector<std::int64_t>& shape, bool backward) {
        const TensorShape s{shape.at(0), shape.at(1), shape.at(2), shape.at(3)};
        const auto spec = halo_spec(d, Window{kernel, stride, padding}, s,
                                    backward ? HaloPhase::backward : HaloPhase::forward);
        py::list ranks;
        for (const auto& rh : spec) {
          py::dict links;
          for (Direction dir : kDirections) {
            const auto& l = rh.link(dir);
            if (l.recv.empty()) continue;
            links[py::str(std::string(to_string(dir)))] = py::make_tuple(
                l.peer, py::make_tuple(l.recv.h.begin, l.recv.h.end),
                py::make_tuple(l.recv.w.begin, l.recv.w.end), l.recv.count());
          }
          ranks.append(links);
        }
        return ranks;
      },
      py::arg("dist"), py::arg("kernel"), py::arg("stride"), py::arg("padding"), py::arg("shape"),
      py::arg("backward") = false,
      "Per rank: {direction: (peer, (h0, h1), (w0, w1), elements)} of received regions.");

  m.def(
      "memory_bytes",
      [](const NetworkGraph& g, const py::object& strategy, int word_bytes) {
        return memory_estimate(g, strategy_arg(g, strategy), word_bytes).per_rank;
      },
      py::arg("net"), py::arg("strategy"), py::arg("word_bytes") = 4);

  m.def(
      "plan",
      [](const NetworkGraph& g, const MachineModel& mm, std::optional<std::string> costs,
         std::optional<std::int64_t> mem_cap, int max_candidates) {
        PlannerOptions po;
        po.mem_cap_bytes = mem_cap;
        po.max_candidates = max_candidates;
        const auto cands = generate_candidates(g, mm, po);
        const auto t = table_arg(g, costs, cands.per_layer());
        const auto s = g.is_line() ? plan_line(g, cands, mm, t, po) : plan_dag(g, cands, mm, t, po);
        return io::serialize_strategy(g, s);
      },
      py::arg("net"), py::arg("machine"), py::arg("costs") = py::none(),
      py::arg("mem_cap_bytes") = py::none(), py::arg("max_candidates") = 16,
      "Returns the strategy document (JSON text).");

  m.def(
      "estimate",
      [](const NetworkGraph& g, const py::object& strategy, const MachineModel& mm,
         std::optional<std::string> costs) {
        const auto a = strategy_arg(g, strategy);
        std::vector<std::vector<LayerDistribution>> per_layer;
        for (const auto& d : a) per_layer.push_back({d});
        return cost_dict(g, network_cost(g, a, mm, table_arg(g, costs, per_layer)));
      },
      py::arg("net"), py::arg("strategy"), py::arg("machine"), py::arg("costs") = py::none());

  m.def(
      "verify",
      [](const NetworkGraph& g, const py::object& strategy, std::uint64_t seed) {
        const auto a = strategy_arg(g, strategy);
        std::mt19937_64 rng(seed);
        const auto params = synth::random_parameters(g, rng);
        const auto inputs = synth::random_inputs(g, rng);
        const Executor ex(g, a);
        const auto got = gather_step(g, a, ex.run_step(params, inputs));
        const auto cmp = compare_steps(g, got, serial_step(g, a, params, inputs));
        py::dict d;
        d["y"] = cmp.y;
        d["dx"] = cmp.dx;
        d["dw"] = cmp.dw;
        d["worst_layer"] = cmp.worst_layer;
        return d;
      },
      py::arg("net"), py::arg("strategy"), py::arg("seed") = 1,
      "Max relative errors of the distributed step against the serial oracle.");

  m.def(
      "simulate",
      [](const NetworkGraph& g, const py::object& strategy, std::uint64_t seed) {
        const auto a = strategy_arg(g, strategy);
        std::mt19937_64 rng(seed);
        const auto params = synth::random_parameters(g, rng);
        const auto inputs = synth::random_inputs(g, rng);
        const auto step = Executor(g, a).run_step(params, inputs);
        std::ostringstream os;
        step.log.write_csv(os);
        return os.str();
      },
      py::arg("net"), py::arg("strategy"), py::arg("seed") = 1,
      "Event log CSV of one simulated step.");
}
