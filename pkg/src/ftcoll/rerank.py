"""Repair a ring order so that neighbours share enough healthy rails.

On a rail-optimized fabric two servers can only talk at full speed over the
rails both still have.  A ring is as fast as its weakest edge, so an edge
whose shared rail count falls below the ring-wide floor (the smallest rail
set of any member) is a bottleneck that re-ordering can remove.  The repair
is greedy: for each bad edge, find another server that shares enough rails
with both ends and move it in between.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

from .topology import ClusterTopology, HealthMap, rail_set


@dataclass(frozen=True)
class LogicalRing:
    order: tuple[int, ...]
    rail_sets: Mapping[int, frozenset[int]] = field(default_factory=dict)

    def __post_init__(self):
        order = tuple(int(x) for x in self.order)
        object.__setattr__(self, "order", order)
        if len(set(order)) != len(order):
            raise ValueError("ring order repeats a node")
        sets = {int(k): frozenset(v) for k, v in self.rail_sets.items()}
        missing = [x for x in order if x not in sets]
        if missing:
            raise ValueError(f"no rail set for nodes {missing}")
        object.__setattr__(self, "rail_sets", sets)

    def shared(self, u: int, v: int) -> int:
        return len(self.rail_sets[u] & self.rail_sets[v])

    def edges(self) -> list[tuple[int, int]]:
        o = self.order
        return [(o[i], o[(i + 1) % len(o)]) for i in range(len(o))] if len(o) > 1 else []

    def min_adjacent(self) -> int:
        """Smallest shared-rail count over all ring edges."""
        e = self.edges()
        return min(self.shared(u, v) for u, v in e) if e else 0

    def with_order(self, order: Sequence[int]) -> "LogicalRing":
        return LogicalRing(tuple(order), self.rail_sets)


def ring_from_topology(topology: ClusterTopology, health: HealthMap, order: Sequence[int] | None = None) -> LogicalRing:
    order = tuple(range(topology.n)) if order is None else tuple(order)
    return LogicalRing(order, {s: rail_set(topology, health, s) for s in order})


def global_floor(ring: LogicalRing) -> int:
    """Fewest healthy rails on any member."""
    if not ring.order:
        raise ValueError("empty ring")
    return min(len(ring.rail_sets[x]) for x in ring.order)


@dataclass(frozen=True)
class Candidate:
    u: int
    v: int
    gap: int
    position: int


def find_candidates(ring: LogicalRing) -> list[Candidate]:
    """Ring edges below the floor, worst first, then by position."""
    if len(ring.order) < 2:
        return []
    floor = global_floor(ring)
    out = []
    for i, (u, v) in enumerate(ring.edges()):
        s = ring.shared(u, v)
        if s < floor:
            out.append(Candidate(u, v, floor - s, i))
    out.sort(key=lambda c: (-c.gap, c.position))
    return out


@dataclass
class RerankResult:
    ring: LogicalRing
    moves: list[tuple[int, int, int]]  # (bridge, u, v)
    unresolved: list[tuple[int, int]]
    residual: list[tuple[int, int]]  # sub-floor edges left in the output
    floor: int = 0


def _relocate(order: list[int], w: int, u: int, v: int) -> None:
    order.remove(w)
    i = order.index(u)
    j = order.index(v)
    if (i + 1) % len(order) == j:
        order.insert(i + 1, w)
    else:  # v sits just before u
        order.insert(j + 1, w)


def rerank_detail(ring: LogicalRing) -> RerankResult:
    """Greedy bridge repair, reporting what moved and what is still short."""
    floor = global_floor(ring) if ring.order else 0
    order = list(ring.order)
    moves, unresolved = [], []
    for c in find_candidates(ring):
        u, v = c.u, c.v
        N = len(order)
        if N < 3:
            unresolved.append((u, v))
            continue
        iu, iv = order.index(u), order.index(v)
        if (iu + 1) % N != iv and (iv + 1) % N != iu:
            continue  # an earlier move already split this edge
        best = None
        # scan the other nodes in the current ring order, first acceptable wins
        for w in list(order):
            if w in (u, v):
                continue
            new_cap = min(ring.shared(u, w), ring.shared(w, v))
            k = order.index(w)
            prev_w, next_w = order[(k - 1) % N], order[(k + 1) % N]
            removal_cap = ring.shared(prev_w, next_w)
            if new_cap >= floor and removal_cap >= floor:
                best = w
                break
        if best is None:
            unresolved.append((u, v))
            continue
        _relocate(order, best, u, v)
        moves.append((best, u, v))
    out = ring.with_order(order)
    residual = [(a, b) for a, b in out.edges() if out.shared(a, b) < floor]
    return RerankResult(out, moves, unresolved, residual, floor)


def rerank(ring: LogicalRing) -> LogicalRing:
    return rerank_detail(ring).ring
