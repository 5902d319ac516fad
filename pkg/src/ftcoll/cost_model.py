"""Alpha-beta link model and closed-form collective traffic/time formulas.

Units are fixed: bytes, seconds, bytes/s.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

DEFAULT_ALPHA = 2e-6


@dataclass(frozen=True)
class CostParams:
    alpha: float = DEFAULT_ALPHA
    beta: float = 50e9

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        if not self.beta > 0:
            raise ValueError(f"beta must be > 0, got {self.beta}")

    def bandwidth_only(self) -> "CostParams":
        return CostParams(alpha=0.0, beta=self.beta)


class TrafficKind(str, Enum):
    REDUCE_SCATTER = "ReduceScatter"
    ALL_GATHER = "AllGather"
    BROADCAST_ROOT = "BroadcastRoot"

    @classmethod
    def _missing_(cls, value):
        if value == "Broadcast":
            return cls.BROADCAST_ROOT
        return None


def link_time(size: float, p: CostParams) -> float:
    if size < 0:
        raise ValueError("size must be >= 0")
    return p.alpha + size / p.beta


def ring_allreduce_time(n: int, g: int, D: float, B: float) -> float:
    """Bandwidth-only ring AllReduce time over ``n*g`` ranks."""
    ranks = n * g
    if ranks < 2:
        raise ValueError("ring AllReduce needs at least 2 ranks")
    if D < 0 or not B > 0:
        raise ValueError("need D >= 0 and B > 0")
    return 2 * (ranks - 1) / ranks * D / B


def ring_allreduce_time_ab(ranks: int, D: float, p: CostParams) -> float:
    """Alpha-augmented ring AllReduce: 2(N-1) latency-bearing steps of D/N each."""
    if ranks < 2:
        raise ValueError("ring AllReduce needs at least 2 ranks")
    return 2 * (ranks - 1) * (p.alpha + D / ranks / p.beta)


def min_cross_server_traffic(op_kind: str | TrafficKind, D_total: float, n: int) -> float:
    """Lower bound on the bytes a server must move across the network."""
    if n < 2:
        raise ValueError("need n >= 2 servers")
    kind = TrafficKind(op_kind)
    if kind in (TrafficKind.REDUCE_SCATTER, TrafficKind.ALL_GATHER):
        return (n - 1) / n * D_total
    return float(D_total)


def bottleneck_load(Y: float, D: float) -> float:
    """Per-direction volume of the degraded server under the two-stage AllReduce.

    ``2(1-Y)D`` for its share of the global ring plus ``Y*D`` for the broadcast leg.
    """
    if not 0 <= Y <= 1:
        raise ValueError(f"Y must lie in [0, 1], got {Y}")
    return 2 * (1 - Y) * D + Y * D
