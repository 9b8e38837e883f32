#include "convplan/netgraph.hpp"

#include <algorithm>
#include <functional>
#include <queue>
#include <sstream>

#include "convplan/error.hpp"

namespace convplan {

std::int64_t Window::output_extent(std::int64_t extent) const {
  const std::int64_t span = extent + 2 * padding - kernel + 1;
  if (span <= 0) return 0;
  return (span + stride - 1) / stride;
}

std::string_view to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::input: return "input";
    case LayerKind::conv: return "conv";
    case LayerKind::pool: return "pool";
    case LayerKind::relu: return "relu";
    case LayerKind::batchnorm_local: return "batchnorm-local";
    case LayerKind::batchnorm_spatial: return "batchnorm-spatial";
    case LayerKind::fc: return "fc";
    case LayerKind::output: return "output";
  }
  return "?";
}

std::optional<LayerKind> parse_layer_kind(std::string_view name) {
  for (auto k : {LayerKind::input, LayerKind::conv, LayerKind::pool,
                 LayerKind::relu, LayerKind::batchnorm_local,
                 LayerKind::batchnorm_spatial, LayerKind::fc,
                 LayerKind::output}) {
    if (to_string(k) == name) return k;
  }
  return std::nullopt;
}

std::optional<Window> LayerSpec::window() const {
  if (kind == LayerKind::conv) return conv().window;
  if (kind == LayerKind::pool) return pool().window;
  return std::nullopt;
}

namespace {

[[noreturn]] void fail(const LayerSpec& l, const std::string& what) {
  throw GraphError("layer '" + l.id + "': " + what);
}

void check_params(const LayerSpec& l) {
  auto require = [&](bool ok, const char* what) {
    if (!ok) fail(l, what);
  };
  switch (l.kind) {
    case LayerKind::input:
      require(std::holds_alternative<InputParams>(l.params),
              "input layer needs a shape");
      require(l.input().shape.valid(), "input extents must be >= 1");
      require(l.parents.empty(), "input layer cannot have parents");
      return;
    case LayerKind::conv: {
      require(std::holds_alternative<ConvParams>(l.params),
              "missing convolution parameters");
      const auto& c = l.conv();
      require(c.filters >= 1, "filters must be >= 1");
      require(c.kernel() >= 1, "kernel must be >= 1");
      require(c.kernel() % 2 == 1, "kernel size must be odd");
      require(c.stride() >= 1, "stride must be >= 1");
      require(c.padding() >= 0 && c.padding() <= c.halo(),
              "padding must lie in [0, kernel/2]");
      break;
    }
    case LayerKind::pool: {
      require(std::holds_alternative<PoolParams>(l.params),
              "missing pooling parameters");
      const auto& w = l.pool().window;
      require(w.kernel >= 1, "window must be >= 1");
      require(w.stride >= 1, "stride must be >= 1");
      require(w.padding >= 0 && w.padding <= w.halo(),
              "padding must lie in [0, window/2]");
      break;
    }
    case LayerKind::batchnorm_local:
    case LayerKind::batchnorm_spatial:
      require(std::holds_alternative<BatchNormParams>(l.params),
              "missing batch-norm parameters");
      require(l.batchnorm().epsilon >= 0.0, "epsilon must be >= 0");
      break;
    case LayerKind::fc:
      require(std::holds_alternative<FcParams>(l.params),
              "missing fc parameters");
      require(l.fc().features >= 1, "features must be >= 1");
      break;
    case LayerKind::relu:
    case LayerKind::output:
      break;
  }
  require(!l.parents.empty(), "non-input layer needs at least one parent");
}

TensorShape resolve_output(const LayerSpec& l, const TensorShape& in) {
  switch (l.kind) {
    case LayerKind::input:
      return l.input().shape;
    case LayerKind::conv: {
      const auto& c = l.conv();
      return {in.n, c.filters, c.window.output_extent(in.h),
              c.window.output_extent(in.w)};
    }
    case LayerKind::pool: {
      const auto& w = l.pool().window;
      return {in.n, in.c, w.output_extent(in.h), w.output_extent(in.w)};
    }
    case LayerKind::fc:
      return {in.n, l.fc().features, 1, 1};
    default:
      return in;
  }
}

}  // namespace

NetworkGraph NetworkGraph::build(std::vector<LayerSpec> layers) {
  const std::size_t n = layers.size();
  if (n == 0) throw GraphError("network has no layers");

  std::unordered_map<std::string, std::size_t> decl;
  for (std::size_t i = 0; i < n; ++i) {
    if (layers[i].id.empty()) throw GraphError("layer with empty id");
    if (!decl.emplace(layers[i].id, i).second) {
      throw GraphError("duplicate layer id '" + layers[i].id + "'");
    }
  }
  for (const auto& l : layers) {
    check_params(l);
    for (const auto& p : l.parents) {
      if (!decl.contains(p)) {
        fail(l, "unknown parent '" + p + "'");
      }
    }
  }

  // Kahn's algorithm, always releasing the earliest-declared ready layer.
  std::vector<std::vector<std::size_t>> succ(n);
  std::vector<std::size_t> indegree(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    for (const auto& p : layers[i].parents) {
      succ[decl.at(p)].push_back(i);
      ++indegree[i];
    }
  }
  std::priority_queue<std::size_t, std::vector<std::size_t>,
                      std::greater<>> ready;
  for (std::size_t i = 0; i < n; ++i) {
    if (indegree[i] == 0) ready.push(i);
  }
  std::vector<std::size_t> order;
  order.reserve(n);
  while (!ready.empty()) {
    const std::size_t i = ready.top();
    ready.pop();
    order.push_back(i);
    for (std::size_t s : succ[i]) {
      if (--indegree[s] == 0) ready.push(s);
    }
  }
  if (order.size() != n) {
    std::ostringstream os;
    os << "cycle detected among layers:";
    for (std::size_t i = 0; i < n; ++i) {
      if (indegree[i] > 0) os << " '" << layers[i].id << "'";
    }
    throw GraphError(os.str());
  }

  NetworkGraph g;
  g.layers_.reserve(n);
  for (std::size_t i : order) g.layers_.push_back(std::move(layers[i]));
  for (std::size_t i = 0; i < n; ++i) g.index_.emplace(g.layers_[i].id, i);

  g.parents_.assign(n, {});
  g.children_.assign(n, {});
  g.in_shapes_.assign(n, {});
  g.out_shapes_.assign(n, {});
  for (std::size_t i = 0; i < n; ++i) {
    const auto& l = g.layers_[i];
    for (const auto& p : l.parents) {
      const std::size_t pi = g.index_.at(p);
      g.parents_[i].push_back(pi);
      g.children_[pi].push_back(i);
    }
    if (l.kind == LayerKind::input) {
      g.in_shapes_[i] = l.input().shape;
    } else {
      const TensorShape first = g.out_shapes_[g.parents_[i].front()];
      for (std::size_t pi : g.parents_[i]) {
        if (!(g.out_shapes_[pi] == first)) {
          std::ostringstream os;
          os << "parent shapes disagree (" << first << " vs "
             << g.out_shapes_[pi] << ")";
          fail(l, os.str());
        }
      }
      g.in_shapes_[i] = first;
    }
    g.out_shapes_[i] = resolve_output(l, g.in_shapes_[i]);
    if (!g.out_shapes_[i].valid()) {
      std::ostringstream os;
      os << "output shape " << g.out_shapes_[i] << " is empty for input "
         << g.in_shapes_[i];
      fail(l, os.str());
    }
  }
  for (auto& c : g.children_) std::sort(c.begin(), c.end());
  return g;
}

std::size_t NetworkGraph::index_of(std::string_view id) const {
  auto it = index_.find(std::string(id));
  if (it == index_.end()) {
    throw GraphError("unknown layer id '" + std::string(id) + "'");
  }
  return it->second;
}

bool NetworkGraph::contains(std::string_view id) const {
  return index_.contains(std::string(id));
}

std::vector<std::size_t> NetworkGraph::sources() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < size(); ++i) {
    if (parents_[i].empty()) out.push_back(i);
  }
  return out;
}

std::vector<std::size_t> NetworkGraph::sinks() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < size(); ++i) {
    if (children_[i].empty()) out.push_back(i);
  }
  return out;
}

bool NetworkGraph::is_line() const {
  for (std::size_t i = 0; i < size(); ++i) {
    if (parents_[i].size() > 1 || children_[i].size() > 1) return false;
  }
  return sources().size() == 1;
}

double NetworkGraph::forward_flops(std::size_t i) const {
  const auto& l = layers_[i];
  const auto& in = in_shapes_[i];
  const auto& out = out_shapes_[i];
  switch (l.kind) {
    case LayerKind::conv: {
      const double k = l.conv().kernel();
      return static_cast<double>(out.count()) * static_cast<double>(in.c) * k * k;
    }
    case LayerKind::fc:
      return static_cast<double>(in.count()) * l.fc().features;
    default:
      return 0.0;
  }
}

std::vector<std::vector<std::size_t>> longest_path_decomposition(
    const NetworkGraph& g, std::span<const double> weight) {
  const std::size_t n = g.size();
  if (weight.size() != n) {
    throw GraphError("longest_path_decomposition: one weight per layer");
  }
  for (double w : weight) {
    if (!(w >= 0.0)) throw GraphError("layer weights must be non-negative");
  }

  struct Score {
    double weight = 0.0;
    std::size_t fresh = 0;  // uncovered layers on the path
    bool operator>(const Score& o) const {
      return weight > o.weight || (weight == o.weight && fresh > o.fresh);
    }
  };

  std::vector<bool> covered(n, false);
  std::size_t remaining = n;
  std::vector<std::vector<std::size_t>> paths;
  while (remaining > 0) {
    // Layers are stored in topological order, so one forward sweep suffices.
    std::vector<Score> best(n);
    std::vector<std::ptrdiff_t> pred(n, -1);
    for (std::size_t i = 0; i < n; ++i) {
      Score own{covered[i] ? 0.0 : weight[i], covered[i] ? 0u : 1u};
      Score acc{};
      for (std::size_t p : g.parents(i)) {
        const bool tie = !(best[p] > acc) && !(acc > best[p]);
        if (pred[i] < 0 || best[p] > acc ||
            (tie && p < static_cast<std::size_t>(pred[i]))) {
          acc = best[p];
          pred[i] = static_cast<std::ptrdiff_t>(p);
        }
      }
      best[i] = {acc.weight + own.weight, acc.fresh + own.fresh};
    }
    std::ptrdiff_t end = -1;
    for (std::size_t s : g.sinks()) {
      if (end < 0 || best[s] > best[static_cast<std::size_t>(end)]) {
        end = static_cast<std::ptrdiff_t>(s);
      }
    }
    std::vector<std::size_t> path;
    for (std::ptrdiff_t v = end; v >= 0; v = pred[static_cast<std::size_t>(v)]) {
      path.push_back(static_cast<std::size_t>(v));
    }
    std::reverse(path.begin(), path.end());
    for (std::size_t v : path) {
      if (!covered[v]) {
        covered[v] = true;
        --remaining;
      }
    }
    paths.push_back(std::move(path));
  }
  return paths;
}

}  // namespace convplan
