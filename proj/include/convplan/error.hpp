#pragma once

#include <stdexcept>
#include <string>

namespace convplan {

/// Base of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed input document (network spec, strategy, machine, cost table).
class ParseError : public Error {
 public:
  using Error::Error;
};

/// Structural problem with a network graph (cycle, shape mismatch, ...).
class GraphError : public Error {
 public:
  using Error::Error;
};

/// Tensor extents that disagree with an operation's contract.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A distribution cannot be applied to a tensor or layer.
class DistributionError : public Error {
 public:
  using Error::Error;
};

/// A rank's partition is too thin for the halo it needs.
class HaloError : public DistributionError {
 public:
  using DistributionError::DistributionError;
};

/// Read of a tensor element that is neither owned nor received.
class IndexError : public Error {
 public:
  using Error::Error;
};

/// Message or shard whose size disagrees with its declared index set.
class MessageError : public Error {
 public:
  using Error::Error;
};

/// Missing cost-table entry.
class CostLookupError : public Error {
 public:
  using Error::Error;
};

/// No feasible strategy.
class PlanError : public Error {
 public:
  using Error::Error;
};

}  // namespace convplan
