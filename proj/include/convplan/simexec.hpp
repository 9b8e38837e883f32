#pragma once

#include <cstdint>
#include <deque>
#include <map>
#include <ostream>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include "convplan/dist.hpp"
#include "convplan/kernels.hpp"
#include "convplan/netgraph.hpp"
#include "convplan/tensor.hpp"

namespace convplan {

/// Learnable state of one layer: conv weights (F x C x K x K) or batch-norm
/// scale/shift. Other layers leave everything empty.
struct LayerParameters {
  Tensor4 weights;
  std::vector<double> gamma;
  std::vector<double> beta;
};

using Parameters = std::vector<LayerParameters>;  // indexed like the graph

struct StepInputs {
  std::map<std::string, Tensor4> inputs;      // per input layer
  std::map<std::string, Tensor4> loss_seeds;  // dL/dy per sink layer
};

struct LayerResult {
  Tensor4 y;
  Tensor4 dx;  // dL/dx; for input layers the gradient w.r.t. the input
  Tensor4 dw;
  std::vector<double> dgamma;
  std::vector<double> dbeta;
};

struct StepResult {
  std::vector<LayerResult> layers;
};

/// Serial oracle for one training step. Batch-norm statistics are taken
/// over the groups the strategy implies: each rank's block for
/// batchnorm-local, each sample block for batchnorm-spatial.
StepResult serial_step(const NetworkGraph& g, const std::vector<LayerDistribution>& strategy,
                       const Parameters& params, const StepInputs& in);

struct StepComparison {
  double y = 0.0;
  double dx = 0.0;
  double dw = 0.0;
  std::string worst_layer;
  double worst() const { return std::max({y, dx, dw}); }
};

/// Max relative error per tensor kind across all layers.
StepComparison compare_steps(const NetworkGraph& g, const StepResult& actual,
                             const StepResult& expected);

struct Shard {
  Box box;
  Tensor4 data;
};

std::vector<Shard> scatter(const Tensor4& global, const TensorLayout& layout);
/// Reassembles a tensor; throws DistributionError on gaps, overlaps, or
/// shards whose data disagrees with their box.
Tensor4 gather_global(std::span<const Shard> shards, const TensorShape& shape);

enum class Phase { fp, bp_data, bp_weights };
enum class MessageTag { halo, shuffle, reduce };

std::string_view to_string(Phase p);
std::string_view to_string(MessageTag t);

struct Message {
  MessageTag tag = MessageTag::halo;
  int src = 0;
  int dst = 0;
  std::string layer;
  Phase phase = Phase::fp;
  std::string direction;       // as seen by the sender
  std::string recv_direction;  // as seen by the receiver
  std::vector<double> payload;
};

struct EventRecord {
  int step = 0;
  int rank = 0;
  std::string action;  // e.g. "halo_send:fp", "compute:bp-weights"
  std::string layer;   // layer id, or "parent->child" for shuffles
  std::string direction;
  std::int64_t bytes = 0;

  friend bool operator==(const EventRecord&, const EventRecord&) = default;
};

/// Append-only record of every send, receive and local compute.
class EventLog {
 public:
  void append(EventRecord r) { records_.push_back(std::move(r)); }
  const std::vector<EventRecord>& records() const { return records_; }
  /// Sum of bytes over records whose action equals `action` and, when given,
  /// whose layer equals `layer`.
  std::int64_t bytes(std::string_view action, std::string_view layer = {}) const;
  /// Lines `step,rank,action,layer,direction,bytes` under a header line.
  void write_csv(std::ostream& os) const;

 private:
  std::vector<EventRecord> records_;
};

inline constexpr std::int64_t kSimWordBytes = sizeof(double);

/// FIFO mailboxes per (source, destination, tag) channel.
class Mailboxes {
 public:
  void send(Message m);
  /// Pops the oldest message on the channel and checks that it belongs to
  /// `layer`/`phase` and carries `expected_words` values. Throws MessageError.
  Message receive(int src, int dst, MessageTag tag, std::string_view layer, Phase phase,
                  std::int64_t expected_words);
  void log_compute(int rank, std::string_view layer, Phase phase);
  void advance_step() { ++step_; }
  bool quiescent() const;

  EventLog& log() { return log_; }
  const EventLog& log() const { return log_; }

 private:
  using Channel = std::tuple<int, int, MessageTag>;
  std::map<Channel, std::deque<Message>> queues_;
  EventLog log_;
  int step_ = 0;
};

/// Sums equal-length payloads of `group` (payloads[i] belongs to group[i]);
/// the lowest rank reduces in rank-id order and broadcasts. Returns the
/// result held by each member. Throws MessageError on length mismatch.
std::vector<std::vector<double>> allreduce(Mailboxes& net, std::span<const int> group,
                                           std::vector<std::vector<double>> payloads,
                                           std::string_view layer, Phase phase);

/// Per-channel moments of the samples shared by `group` (every rank with one
/// sample block), from each member's local sums. Throws DistributionError
/// when the group is not exactly one sample block of `dist`.
std::vector<kernels::ChannelMoments> bn_spatial_aggregate(
    Mailboxes& net, const LayerDistribution& dist, std::span<const int> group,
    std::span<const kernels::ChannelSums> local, std::string_view layer);

/// One layer's shards on one rank.
struct RankLayer {
  Shard x;
  Shard y;
  Shard dy;
  Shard dx;
  Shard x_patch;  // x extended by its forward halo
  Tensor4 argmax; // max pooling
  kernels::ChannelMoments moments;
  Tensor4 dw;
  std::vector<double> dgamma;
  std::vector<double> dbeta;
};

struct RankState {
  int rank = 0;
  std::vector<RankLayer> layers;
};

struct DistributedStep {
  std::vector<RankState> ranks;
  EventLog log;
};

struct ExecOptions {
  /// Debug aid: drop one row of every north/south halo on receipt.
  bool corrupt_halo = false;
};

/// Runs one forward/backward step of a network on virtual ranks that only
/// talk through mailboxes.
class Executor {
 public:
  /// Throws DistributionError for a missing or unusable distribution and
  /// GraphError for fc layers, which are priced but never executed.
  Executor(const NetworkGraph& g, std::vector<LayerDistribution> strategy,
           ExecOptions opts = {});

  /// Inputs and seeds are global tensors, scattered per the owning layer's
  /// distribution before the step starts.
  DistributedStep run_step(const Parameters& params, const StepInputs& in) const;

  int ranks() const { return ranks_; }

 private:
  const NetworkGraph& g_;
  std::vector<LayerDistribution> strategy_;
  ExecOptions opts_;
  int ranks_ = 1;
};

/// Gathers every layer's y and dL/dx and takes dL/dw from rank 0.
StepResult gather_step(const NetworkGraph& g, const std::vector<LayerDistribution>& strategy,
                       const DistributedStep& step);

}  // namespace convplan
