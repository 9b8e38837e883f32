#include "convplan/io.hpp"

#include <cctype>
#include <charconv>
#include <fstream>
#include <iomanip>
#include <limits>
#include <set>
#include <sstream>

#include "json.hpp"

#include "convplan/error.hpp"

namespace convplan::io {

using json = nlohmann::json;
using ojson = nlohmann::ordered_json;

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open '" + path.string() + "'");
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

void write_file(const std::filesystem::path& path, std::string_view text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ParseError("cannot write '" + path.string() + "'");
  out << text;
}

namespace {

json parse_json(std::string_view text, const char* what) {
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    throw ParseError(std::string(what) + ": " + e.what());
  }
}

template <typename T>
T field(const json& obj, const char* key, const std::string& where) {
  auto it = obj.find(key);
  if (it == obj.end()) throw ParseError(where + ": missing field '" + key + "'");
  try {
    return it->get<T>();
  } catch (const json::exception&) {
    throw ParseError(where + ": field '" + key + "' has the wrong type");
  }
}

template <typename T>
T field_or(const json& obj, const char* key, T fallback, const std::string& where) {
  return obj.contains(key) ? field<T>(obj, key, where) : fallback;
}

void only_keys(const json& obj, std::initializer_list<const char*> allowed,
               const std::string& where) {
  const std::set<std::string> ok(allowed.begin(), allowed.end());
  for (const auto& [k, v] : obj.items()) {
    if (!ok.contains(k)) throw ParseError(where + ": unknown field '" + k + "'");
  }
}

LayerSpec parse_layer(const json& j, std::size_t index) {
  std::string where = "layer #" + std::to_string(index);
  if (!j.is_object()) throw ParseError(where + ": expected an object");
  LayerSpec l;
  l.id = field<std::string>(j, "id", where);
  where = "layer '" + l.id + "'";
  const auto kind_name = field<std::string>(j, "kind", where);
  const auto kind = parse_layer_kind(kind_name);
  if (!kind) throw ParseError(where + ": unknown layer kind '" + kind_name + "'");
  l.kind = *kind;
  l.parents = field_or<std::vector<std::string>>(j, "parents", {}, where);
  switch (l.kind) {
    case LayerKind::input:
      only_keys(j, {"id", "kind", "parents", "n", "c", "h", "w"}, where);
      l.params = InputParams{{field<std::int64_t>(j, "n", where), field<std::int64_t>(j, "c", where),
                              field<std::int64_t>(j, "h", where),
                              field<std::int64_t>(j, "w", where)}};
      break;
    case LayerKind::conv: {
      only_keys(j, {"id", "kind", "parents", "filters", "kernel", "stride", "padding"}, where);
      ConvParams c;
      c.filters = field<int>(j, "filters", where);
      c.window.kernel = field<int>(j, "kernel", where);
      c.window.stride = field_or<int>(j, "stride", 1, where);
      c.window.padding = field_or<int>(j, "padding", c.window.kernel / 2, where);
      l.params = c;
      break;
    }
    case LayerKind::pool: {
      only_keys(j, {"id", "kind", "parents", "window", "stride", "padding", "mode"}, where);
      PoolParams p;
      p.window.kernel = field_or<int>(j, "window", 2, where);
      p.window.stride = field_or<int>(j, "stride", p.window.kernel, where);
      p.window.padding = field_or<int>(j, "padding", 0, where);
      const auto mode = field_or<std::string>(j, "mode", "max", where);
      if (mode == "max") {
        p.mode = PoolMode::max;
      } else if (mode == "average" || mode == "avg") {
        p.mode = PoolMode::average;
      } else {
        throw ParseError(where + ": unknown pool mode '" + mode + "'");
      }
      l.params = p;
      break;
    }
    case LayerKind::batchnorm_local:
    case LayerKind::batchnorm_spatial:
      only_keys(j, {"id", "kind", "parents", "epsilon"}, where);
      l.params = BatchNormParams{field_or<double>(j, "epsilon", 1e-5, where)};
      break;
    case LayerKind::fc:
      only_keys(j, {"id", "kind", "parents", "features"}, where);
      l.params = FcParams{field<int>(j, "features", where)};
      break;
    case LayerKind::relu:
    case LayerKind::output:
      only_keys(j, {"id", "kind", "parents"}, where);
      break;
  }
  return l;
}

}  // namespace

NetworkGraph parse_network(std::string_view text) {
  const json doc = parse_json(text, "network");
  if (!doc.is_object() || !doc.contains("layers") || !doc["layers"].is_array()) {
    throw ParseError("network: expected an object with a 'layers' array");
  }
  std::vector<LayerSpec> layers;
  std::size_t i = 0;
  for (const auto& j : doc["layers"]) layers.push_back(parse_layer(j, i++));
  return NetworkGraph::build(std::move(layers));
}

NetworkGraph load_network(const std::filesystem::path& path) {
  return parse_network(read_file(path));
}

std::string serialize_network(const NetworkGraph& g) {
  ojson layers = ojson::array();
  for (const auto& l : g.layers()) {
    ojson j;
    j["id"] = l.id;
    j["kind"] = std::string(to_string(l.kind));
    j["parents"] = l.parents;
    switch (l.kind) {
      case LayerKind::input: {
        const auto& s = l.input().shape;
        j["n"] = s.n;
        j["c"] = s.c;
        j["h"] = s.h;
        j["w"] = s.w;
        break;
      }
      case LayerKind::conv:
        j["filters"] = l.conv().filters;
        j["kernel"] = l.conv().kernel();
        j["stride"] = l.conv().stride();
        j["padding"] = l.conv().padding();
        break;
      case LayerKind::pool:
        j["window"] = l.pool().window.kernel;
        j["stride"] = l.pool().window.stride;
        j["padding"] = l.pool().window.padding;
        j["mode"] = l.pool().mode == PoolMode::max ? "max" : "average";
        break;
      case LayerKind::batchnorm_local:
      case LayerKind::batchnorm_spatial: j["epsilon"] = l.batchnorm().epsilon; break;
      case LayerKind::fc: j["features"] = l.fc().features; break;
      case LayerKind::relu:
      case LayerKind::output: break;
    }
    layers.push_back(std::move(j));
  }
  ojson doc;
  doc["layers"] = std::move(layers);
  return doc.dump(2) + "\n";
}

MachineModel parse_machine(std::string_view text) {
  const json j = parse_json(text, "machine");
  const std::string where = "machine";
  if (!j.is_object()) throw ParseError("machine: expected an object");
  only_keys(j, {"ranks", "node_size", "alpha_intra", "alpha_inter", "beta_intra", "beta_inter",
                "word_bytes"},
            where);
  MachineModel m;
  m.ranks = field<int>(j, "ranks", where);
  m.node_size = field_or<int>(j, "node_size", m.ranks, where);
  m.alpha_intra = field<double>(j, "alpha_intra", where);
  m.alpha_inter = field_or<double>(j, "alpha_inter", m.alpha_intra, where);
  m.beta_intra = field<double>(j, "beta_intra", where);
  m.beta_inter = field_or<double>(j, "beta_inter", m.beta_intra, where);
  m.word_bytes = field_or<int>(j, "word_bytes", 4, where);
  m.validate();
  return m;
}

MachineModel load_machine(const std::filesystem::path& path) {
  return parse_machine(read_file(path));
}

std::string serialize_machine(const MachineModel& m) {
  ojson j;
  j["ranks"] = m.ranks;
  j["node_size"] = m.node_size;
  j["alpha_intra"] = m.alpha_intra;
  j["alpha_inter"] = m.alpha_inter;
  j["beta_intra"] = m.beta_intra;
  j["beta_inter"] = m.beta_inter;
  j["word_bytes"] = m.word_bytes;
  return j.dump(2) + "\n";
}

std::vector<LayerDistribution> parse_strategy(const NetworkGraph& g, std::string_view text) {
  const json doc = parse_json(text, "strategy");
  if (!doc.is_object() || !doc.contains("layers") || !doc["layers"].is_object()) {
    throw ParseError("strategy: expected an object with a 'layers' map");
  }
  const auto& layers = doc["layers"];
  for (const auto& [id, v] : layers.items()) {
    if (!g.contains(id)) throw ParseError("strategy: unknown layer '" + id + "'");
  }
  const int ranks = field_or<int>(doc, "ranks", 0, "strategy");
  std::vector<LayerDistribution> out;
  for (const auto& l : g.layers()) {
    if (!layers.contains(l.id)) throw ParseError("strategy: no distribution for layer '" + l.id + "'");
    const auto& d = layers[l.id];
    const std::string where = "strategy layer '" + l.id + "'";
    only_keys(d, {"n_parts", "h_parts", "w_parts"}, where);
    LayerDistribution ld{field_or<int>(d, "n_parts", 1, where), field_or<int>(d, "h_parts", 1, where),
                         field_or<int>(d, "w_parts", 1, where)};
    if (ld.n_parts < 1 || ld.h_parts < 1 || ld.w_parts < 1) {
      throw ParseError(where + ": partition counts must be >= 1");
    }
    if (ranks > 0 && ld.ranks() != ranks) {
      throw ParseError(where + ": uses " + std::to_string(ld.ranks()) + " ranks, file declares " +
                       std::to_string(ranks));
    }
    out.push_back(ld);
  }
  return out;
}

std::vector<LayerDistribution> load_strategy(const NetworkGraph& g,
                                             const std::filesystem::path& path) {
  return parse_strategy(g, read_file(path));
}

namespace {

ojson strategy_core(const NetworkGraph& g, const std::vector<LayerDistribution>& a) {
  if (a.size() != g.size()) throw DistributionError("strategy does not cover the network");
  ojson doc;
  doc["ranks"] = a.empty() ? 1 : a.front().ranks();
  ojson layers = ojson::object();
  for (std::size_t i = 0; i < g.size(); ++i) {
    layers[g.layer(i).id] = {{"n_parts", a[i].n_parts},
                             {"h_parts", a[i].h_parts},
                             {"w_parts", a[i].w_parts}};
  }
  doc["layers"] = std::move(layers);
  return doc;
}

}  // namespace

std::string serialize_strategy(const NetworkGraph& g,
                               const std::vector<LayerDistribution>& assignment) {
  return strategy_core(g, assignment).dump(2) + "\n";
}

std::string serialize_strategy(const NetworkGraph& g, const Strategy& s) {
  ojson doc = strategy_core(g, s.assignment);
  ojson pred;
  pred["total_seconds"] = s.predicted_seconds;
  pred["forward_seconds"] = s.breakdown.forward;
  pred["backward_seconds"] = s.breakdown.backward;
  pred["exposed_allreduce_seconds"] = s.breakdown.exposed_allreduce;
  pred["path_cost_seconds"] = s.path_cost;
  pred["max_rank_bytes"] = s.memory.max_bytes();
  ojson layers = ojson::object();
  for (std::size_t i = 0; i < g.size() && i < s.breakdown.layers.size(); ++i) {
    const auto& lc = s.breakdown.layers[i];
    layers[g.layer(i).id] = {{"fp", lc.fp_exposed},
                             {"bp_data", lc.bpx_exposed},
                             {"bp_weights", lc.bpw_exposed},
                             {"bp_allreduce", lc.bpa},
                             {"fp_halo_bytes", lc.fp_halo_bytes},
                             {"bpx_halo_bytes", lc.bpx_halo_bytes},
                             {"allreduce_bytes", lc.allreduce_bytes}};
  }
  pred["layers"] = std::move(layers);
  ojson shuffles = ojson::array();
  for (const auto& e : s.breakdown.shuffles) {
    shuffles.push_back({{"from", g.layer(e.parent).id},
                        {"to", g.layer(e.child).id},
                        {"forward_seconds", e.forward_seconds},
                        {"backward_seconds", e.backward_seconds},
                        {"forward_bytes", e.forward_bytes},
                        {"backward_bytes", e.backward_bytes}});
  }
  pred["shuffles"] = std::move(shuffles);
  doc["predicted"] = std::move(pred);
  return doc.dump(2) + "\n";
}

namespace {

std::vector<std::string> split_csv(std::string_view line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  for (;;) {
    const auto comma = line.find(',', start);
    auto cell = line.substr(start, comma == std::string_view::npos ? line.npos : comma - start);
    while (!cell.empty() && std::isspace(static_cast<unsigned char>(cell.front()))) cell.remove_prefix(1);
    while (!cell.empty() && std::isspace(static_cast<unsigned char>(cell.back()))) cell.remove_suffix(1);
    out.emplace_back(cell);
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

/// Data rows after checking the header; blank and '#' lines are skipped.
std::vector<std::pair<int, std::vector<std::string>>> csv_rows(std::string_view text,
                                                               std::string_view header,
                                                               const char* what) {
  std::vector<std::pair<int, std::vector<std::string>>> rows;
  std::istringstream in{std::string(text)};
  std::string line;
  int lineno = 0;
  bool seen_header = false;
  const auto want = split_csv(header);
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos || line[0] == '#') continue;
    auto cells = split_csv(line);
    if (!seen_header) {
      if (cells != want) {
        throw ParseError(std::string(what) + ": expected header '" + std::string(header) + "'");
      }
      seen_header = true;
      continue;
    }
    if (cells.size() != want.size()) {
      std::ostringstream os;
      os << what << " line " << lineno << ": expected " << want.size() << " columns, got "
         << cells.size();
      throw ParseError(os.str());
    }
    rows.emplace_back(lineno, std::move(cells));
  }
  if (!seen_header) throw ParseError(std::string(what) + ": missing header");
  return rows;
}

template <typename T>
T to_number(const std::string& s, int lineno, const char* what) {
  T v{};
  const auto* end = s.data() + s.size();
  const auto [ptr, ec] = std::from_chars(s.data(), end, v);
  if (ec != std::errc() || ptr != end) {
    std::ostringstream os;
    os << what << " line " << lineno << ": bad number '" << s << "'";
    throw ParseError(os.str());
  }
  return v;
}

}  // namespace

CostTable parse_cost_table(std::string_view csv) {
  CostTable t;
  constexpr const char* what = "cost table";
  for (const auto& [lineno, c] : csv_rows(csv, "op,n,c,h,w,f,k,s,pad,seconds", what)) {
    const auto op = parse_cost_op(c[0]);
    if (!op) throw ParseError(std::string(what) + " line " + std::to_string(lineno) +
                              ": unknown op '" + c[0] + "'");
    CostKey k;
    k.op = *op;
    k.n = to_number<std::int64_t>(c[1], lineno, what);
    k.c = to_number<std::int64_t>(c[2], lineno, what);
    k.h = to_number<std::int64_t>(c[3], lineno, what);
    k.w = to_number<std::int64_t>(c[4], lineno, what);
    k.f = to_number<std::int64_t>(c[5], lineno, what);
    k.k = to_number<int>(c[6], lineno, what);
    k.s = to_number<int>(c[7], lineno, what);
    k.pad = to_number<int>(c[8], lineno, what);
    const double seconds = to_number<double>(c[9], lineno, what);
    try {
      t.set(k, seconds);
    } catch (const Error& e) {
      throw ParseError(std::string(what) + " line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return t;
}

CostTable load_cost_table(const std::filesystem::path& path) {
  return parse_cost_table(read_file(path));
}

std::string serialize_cost_table(const CostTable& t) {
  std::ostringstream os;
  os << "op,n,c,h,w,f,k,s,pad,seconds\n";
  os << std::setprecision(std::numeric_limits<double>::max_digits10);
  for (const auto& [k, v] : t.entries()) {
    os << to_string(k.op) << ',' << k.n << ',' << k.c << ',' << k.h << ',' << k.w << ',' << k.f
       << ',' << k.k << ',' << k.s << ',' << k.pad << ',' << v << '\n';
  }
  return os.str();
}

std::vector<BenchShape> parse_bench_shapes(std::string_view csv) {
  std::vector<BenchShape> out;
  constexpr const char* what = "shapes";
  for (const auto& [lineno, c] : csv_rows(csv, "n,c,h,w,f,k,s,pad", what)) {
    BenchShape s;
    s.n = to_number<std::int64_t>(c[0], lineno, what);
    s.c = to_number<std::int64_t>(c[1], lineno, what);
    s.h = to_number<std::int64_t>(c[2], lineno, what);
    s.w = to_number<std::int64_t>(c[3], lineno, what);
    s.f = to_number<std::int64_t>(c[4], lineno, what);
    s.k = to_number<int>(c[5], lineno, what);
    s.s = to_number<int>(c[6], lineno, what);
    s.pad = to_number<int>(c[7], lineno, what);
    if (s.n < 1 || s.c < 1 || s.h < 1 || s.w < 1 || s.f < 1 || s.k < 1 || s.s < 1 || s.pad < 0) {
      throw ParseError(std::string(what) + " line " + std::to_string(lineno) +
                       ": extents must be positive");
    }
    out.push_back(s);
  }
  return out;
}

}  // namespace convplan::io
