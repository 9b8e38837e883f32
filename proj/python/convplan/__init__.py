"""Plan, price and verify sample/spatial-parallel CNN training strategies."""

from ._convplan import (
    Error,
    LayerDistribution,
    MachineModel,
    Network,
    ar_cost,
    estimate,
    halo_spec,
    memory_bytes,
    plan,
    random_network,
    simulate,
    sr_cost,
    verify,
)

__all__ = [
    "Error",
    "LayerDistribution",
    "MachineModel",
    "Network",
    "ar_cost",
    "estimate",
    "halo_spec",
    "memory_bytes",
    "plan",
    "random_network",
    "simulate",
    "sr_cost",
    "verify",
]
