#pragma once

#include <compare>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "convplan/dist.hpp"
#include "convplan/netgraph.hpp"

namespace convplan {

/// Two-level alpha-beta machine: ranks are packed `node_size` per node.
/// A flat model is node_size == ranks.
struct MachineModel {
  int ranks = 1;
  int node_size = 1;
  double alpha_intra = 0.0;  // s
  double alpha_inter = 0.0;  // s
  double beta_intra = 0.0;   // s / byte
  double beta_inter = 0.0;   // s / byte
  int word_bytes = 4;

  /// Throws ParseError on negative terms or non-positive sizes.
  void validate() const;
  bool same_node(int a, int b) const { return a / node_size == b / node_size; }
};

enum class Locality { intra, inter };

/// alpha + beta * words * word_bytes.
double sr_cost(const MachineModel& m, std::int64_t words, Locality where = Locality::inter);

/// Allreduce of `words` over `p` ranks: the cheaper of recursive doubling,
/// ceil(log2 p) (alpha + n beta'), and ring / Rabenseifner,
/// 2 (p - 1) alpha + 2 ((p - 1) / p) n beta', with beta' = beta * word_bytes.
/// Intra-node terms apply when p <= node_size.
double ar_cost(const MachineModel& m, int p, std::int64_t words);

enum class CostOp { fp, bp_data, bp_filter, fc };

std::string_view to_string(CostOp op);
std::optional<CostOp> parse_cost_op(std::string_view name);

/// Local problem a kernel timing was measured for.
struct CostKey {
  CostOp op = CostOp::fp;
  std::int64_t n = 1, c = 1, h = 1, w = 1, f = 1;
  int k = 1, s = 1, pad = 0;

  friend auto operator<=>(const CostKey&, const CostKey&) = default;
};

std::string to_string(const CostKey& key);

/// Empirical kernel timings with exact-key lookup. With interpolation enabled,
/// a missing key is estimated by a least-squares fit of log(seconds) against
/// log(n * h * w) over entries sharing (op, c, f, k, s, pad); this is an
/// approximation for planning unmeasured shapes.
class CostTable {
 public:
  void set(const CostKey& key, double seconds);
  bool contains(const CostKey& key) const { return entries_.contains(key); }
  /// Throws CostLookupError naming the missing key.
  double lookup(const CostKey& key) const;
  std::optional<double> find(const CostKey& key) const;

  void set_interpolation(bool on) { interpolate_ = on; }
  bool interpolation() const { return interpolate_; }

  const std::map<CostKey, double>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }

 private:
  std::optional<double> interpolate(const CostKey& key) const;

  std::map<CostKey, double> entries_;
  bool interpolate_ = false;
};

/// Table whose times are multiply-accumulate counts divided by `macs_per_second`
/// (plus `fixed_seconds` per call), for every conv key the layers of `g` can
/// produce under the given distributions.
CostTable flop_cost_table(const NetworkGraph& g,
                          const std::vector<std::vector<LayerDistribution>>& per_layer,
                          double macs_per_second, double fixed_seconds = 0.0);

/// Cost-table key for one layer's local problem on the largest block.
CostKey local_cost_key(const NetworkGraph& g, std::size_t layer,
                       const LayerDistribution& dist, CostOp op);

struct CostOptions {
  bool overlap = true;  // hide halo time under interior compute and BPw
};

/// Modeled cost of one layer. Times are seconds; byte counts total the
/// messages of every rank at the machine word size.
struct LayerCost {
  double fp_compute = 0.0;
  double fp_halo = 0.0;
  double bpx_compute = 0.0;
  double bpx_halo = 0.0;
  double bpw_compute = 0.0;
  double bpa = 0.0;

  double fp_exposed = 0.0;
  double bpx_exposed = 0.0;
  double bpw_exposed = 0.0;

  std::int64_t fp_halo_bytes = 0;
  std::int64_t bpx_halo_bytes = 0;
  std::int64_t allreduce_bytes = 0;

  double raw_total() const {
    return fp_compute + fp_halo + bpx_compute + bpx_halo + bpw_compute + bpa;
  }
  /// Cost used for path weights: exposed compute plus the full allreduce.
  double total() const { return fp_exposed + bpx_exposed + bpw_exposed + bpa; }
  double backward_exposed() const { return bpx_exposed + bpw_exposed; }
};

/// Prices layer `layer` under `dist`:
///   FP  = C(local) + 2 SR(O n c h) + 2 SR(O n c w) + 4 SR(O^2 n c)
///   BPx = Cx(local) + the same halo terms over dL/dy (F channels)
///   BPw = Cw(local)
///   BPa = AR(P, F C K^2)
/// East/west and corner terms vanish when W is undivided, north/south and
/// corner terms when H is undivided. With overlap, FP exposes
/// max(C, halo) and the dL/dy halo hides under BPw.
LayerCost layer_cost(const NetworkGraph& g, std::size_t layer, const LayerDistribution& dist,
                     const MachineModel& m, const CostTable& t, const CostOptions& opts = {});

/// Pairwise-exchange all-to-all: max over ranks of the sum of its sends.
double shuffle_cost(const ShufflePlan& plan, const MachineModel& m);

struct EdgeShuffle {
  std::size_t parent = 0;
  std::size_t child = 0;
  double forward_seconds = 0.0;
  double backward_seconds = 0.0;
  std::int64_t forward_bytes = 0;
  std::int64_t backward_bytes = 0;
};

struct NetworkCost {
  double total = 0.0;
  double forward = 0.0;            // exposed FP plus forward shuffles
  double backward = 0.0;           // exposed BPx/BPw plus backward shuffles
  double exposed_allreduce = 0.0;  // allreduce time not hidden by backward compute
  std::vector<LayerCost> layers;
  std::vector<EdgeShuffle> shuffles;
};

/// Whole-network time. Cheap layers are free; BPa runs on a single allreduce
/// channel that starts after the layer's BPw and overlaps all later backward
/// compute.
NetworkCost network_cost(const NetworkGraph& g, const std::vector<LayerDistribution>& strategy,
                         const MachineModel& m, const CostTable& t,
                         const CostOptions& opts = {});

struct LayerMemory {
  std::int64_t activations = 0;    // x + y
  std::int64_t error_signals = 0;  // dL/dx + dL/dy
  std::int64_t halo_buffers = 0;
  std::int64_t weights = 0;        // w + dL/dw
  std::int64_t total() const { return activations + error_signals + halo_buffers + weights; }
};

struct MemoryEstimate {
  std::vector<std::int64_t> per_rank;  // bytes
  std::vector<LayerMemory> layers;     // bytes on the busiest rank
  int busiest_rank = 0;
  std::int64_t max_bytes() const;
};

/// Per-rank bytes. Input layers hold only their sample block.
LayerMemory layer_memory(const NetworkGraph& g, std::size_t layer,
                         const LayerDistribution& dist, int rank, int bytes_per_word);
MemoryEstimate memory_estimate(const NetworkGraph& g,
                               const std::vector<LayerDistribution>& strategy,
                               int bytes_per_word);

struct BenchShape {
  std::int64_t n = 1, c = 1, h = 1, w = 1, f = 1;
  int k = 1, s = 1, pad = 0;
};

/// Times the reference kernels: `warmups` untimed runs then the mean of
/// `repetitions` runs, for fp, bp-data and bp-filter of every shape.
CostTable benchgen(const std::vector<BenchShape>& shapes, int repetitions = 10,
                   int warmups = 3, unsigned seed = 1);

}  // namespace convplan
