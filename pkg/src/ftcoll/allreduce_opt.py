"""AllReduce around a degraded server: split the data, run two rings at once.

A fraction ``1 - Y`` of the buffer goes through an ordinary ring over every
server, paced by the degraded server.  The remaining ``Y`` is all-reduced
among the healthy servers only, using the bandwidth the slow server cannot
absorb.  Afterwards the degraded server's own contribution to the ``Y`` part
is pushed down a chain of healthy servers and the finished values come back
from the end of the chain.

Times are in seconds, sizes in bytes, bandwidths in bytes/s.  ``X`` is the
fraction of bandwidth the degraded server has lost relative to a healthy one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np

from .balance import balance_slowdown, hot_repair_nic
from .collectives import (
    PAD_GRANULE,
    CollectiveKind,
    CollectiveRequest,
    Lane,
    Schedule,
    ScheduleBuilder,
    even_cuts,
    padded_layout,
    pipeline_segments,
    ring_all_reduce,
)
from .cost_model import CostParams
from .topology import ClusterTopology, HealthMap
from .transport import DEFAULT_CHUNK_SIZE

PRACTICAL_THRESHOLD = 1.0 / 3.0
VAR_EPS = 0.05
MAX_DEPTH = 4


class PlanError(ValueError):
    pass


class Strategy(str, Enum):
    STANDARD_RING = "StandardRing"
    TWO_STAGE = "TwoStageAllReduce"
    BALANCE = "Balance"
    HOT_REPAIR = "HotRepair"


@dataclass(frozen=True)
class PartitionInputs:
    n: int
    g: int
    X: float
    D: float = 1.0
    B: float = 1.0

    def __post_init__(self):
        if self.n < 2:
            raise PlanError(f"need n >= 2 servers, got {self.n}")
        if self.g < 2:
            raise PlanError(f"need g >= 2 GPUs per server, got {self.g}")
        if not 0 < self.X < 1:
            if self.X >= 1:
                raise PlanError("X >= 1: the server has no bandwidth left; exclude it by re-ranking instead")
            raise PlanError(f"X must lie in (0, 1), got {self.X}")
        if self.D < 0 or not self.B > 0:
            raise PlanError("need D >= 0 and B > 0")

    @property
    def a(self) -> float:
        ng = self.n * self.g
        return 2 * (ng - 1) / ng

    @property
    def b(self) -> float:
        m = (self.n - 1) * self.g
        return 2 * (m - 1) / m


@dataclass
class PartitionPlan:
    inputs: PartitionInputs
    Y: float
    T1: float
    T2: float
    T3: float
    T_total: float
    strategy: Strategy
    threshold: float
    rule: str = "exact"
    stage1: dict = field(default_factory=dict)
    stage2: dict = field(default_factory=dict)
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        i = self.inputs
        return {
            "n": i.n, "g": i.g, "X": i.X, "D": i.D, "B": i.B,
            "Y": self.Y, "T1": self.T1, "T2": self.T2, "T3": self.T3, "T_total": self.T_total,
            "strategy": self.strategy.value, "threshold": self.threshold, "rule": self.rule,
            "stage1": self.stage1, "stage2": self.stage2, "notes": list(self.notes),
        }


def stage_times(Y: float, inp: PartitionInputs) -> tuple[float, float, float]:
    """(global ring, partial ring, broadcast leg) times for split ``Y``."""
    if not 0 <= Y <= 1:
        raise PlanError(f"Y must lie in [0, 1], got {Y}")
    D, B, X = inp.D, inp.B, inp.X
    T1 = inp.a * (1 - Y) * D / ((1 - X) * B)
    T2 = inp.b * Y * D / (X * B)
    T3 = Y * D / (X * B)
    return T1, T2, T3


def total_time(Y: float, inp: PartitionInputs) -> float:
    T1, T2, T3 = stage_times(Y, inp)
    return max(T1, T2) + T3


def total_time_grid(Y: np.ndarray, inp: PartitionInputs) -> np.ndarray:
    """Vectorized :func:`total_time` over an array of splits."""
    Y = np.asarray(Y, dtype=float)
    D, B, X = inp.D, inp.B, inp.X
    T1 = inp.a * (1 - Y) * D / ((1 - X) * B)
    T2 = inp.b * Y * D / (X * B)
    return np.maximum(T1, T2) + Y * D / (X * B)


def threshold(n: int, g: int) -> float:
    """Lost fraction above which splitting beats the plain ring."""
    if n < 2 or g < 2:
        raise PlanError("need n >= 2 and g >= 2")
    ng = n * g
    return ng / (3 * ng - 2)


def optimal_split(n: int, g: int, X: float) -> float:
    """Closed-form minimizer of the total time when ``X`` exceeds the threshold."""
    return X + X * (1 - X) / (X + (g * (n - 1) - 1) * n)


def optimal_partition(inp: PartitionInputs, practical_rule: bool = False) -> PartitionPlan:
    """Best split for ``inp``.

    With ``practical_rule`` the plain ring is kept whenever ``X < 1/3``
    instead of comparing against the exact threshold.
    """
    thr = threshold(inp.n, inp.g)
    cut = PRACTICAL_THRESHOLD if practical_rule else thr
    keep_ring = inp.X < cut if practical_rule else inp.X <= cut
    Y = 0.0 if keep_ring else optimal_split(inp.n, inp.g, inp.X)
    T1, T2, T3 = stage_times(Y, inp)
    plan = PartitionPlan(
        inputs=inp, Y=Y, T1=T1, T2=T2, T3=T3, T_total=max(T1, T2) + T3,
        strategy=Strategy.STANDARD_RING if keep_ring else Strategy.TWO_STAGE,
        threshold=thr, rule="practical" if practical_rule else "exact",
    )
    plan.stage1 = {"global_ring": {"servers": inp.n, "share": 1 - Y},
                   "partial_ring": {"servers": inp.n - 1, "share": Y}}
    plan.stage2 = {"broadcast_share": Y, "chain_servers": inp.n - 1} if Y > 0 else {}
    if practical_rule and (inp.X <= thr) != keep_ring:
        plan.notes.append(f"practical 1/3 rule and exact threshold {thr:.6f} disagree at X={inp.X:g}")
    return plan


def plan_for_split(inp: PartitionInputs, Y: float) -> PartitionPlan:
    """A split plan at a caller-chosen ``Y`` (for what-if runs)."""
    T1, T2, T3 = stage_times(Y, inp)
    return PartitionPlan(
        inputs=inp, Y=Y, T1=T1, T2=T2, T3=T3, T_total=max(T1, T2) + T3,
        strategy=Strategy.TWO_STAGE if Y > 0 else Strategy.STANDARD_RING,
        threshold=threshold(inp.n, inp.g), rule="fixed",
        stage1={"global_ring": {"servers": inp.n, "share": 1 - Y},
                "partial_ring": {"servers": inp.n - 1, "share": Y}},
        stage2={"broadcast_share": Y, "chain_servers": inp.n - 1} if Y > 0 else {},
    )


# -- nested plans -------------------------------------------------------------

@dataclass
class PlanNode:
    """One level of a (possibly nested) split AllReduce.

    ``degraded`` is None for a leaf, which runs one plain ring over ``servers``.
    Otherwise ``child`` all-reduces the ``Y`` share over the other servers.
    """

    servers: tuple[int, ...]
    bandwidths: tuple[float, ...]
    D: float
    g: int
    predicted_time: float
    degraded: int | None = None
    plan: PartitionPlan | None = None
    child: "PlanNode | None" = None

    @property
    def depth(self) -> int:
        return 0 if self.child is None else 1 + self.child.depth

    @property
    def Y(self) -> float:
        return 0.0 if self.plan is None else self.plan.Y

    def levels(self) -> list["PlanNode"]:
        out, node = [], self
        while node is not None:
            out.append(node)
            node = node.child
        return out

    def to_dict(self) -> dict:
        return {
            "servers": list(self.servers),
            "bandwidths": list(self.bandwidths),
            "D": self.D,
            "predicted_time": self.predicted_time,
            "degraded": self.degraded,
            "plan": None if self.plan is None else self.plan.to_dict(),
            "child": None if self.child is None else self.child.to_dict(),
        }


def _ring_factor(n: int, g: int) -> float:
    ng = n * g
    return 2 * (ng - 1) / ng


def _leaf(servers, bws, D, g) -> PlanNode:
    return PlanNode(tuple(servers), tuple(bws), D, g, _ring_factor(len(servers), g) * D / min(bws))


def recursive_plan(
    bandwidths: Sequence[float],
    D: float,
    g: int = 8,
    servers: Sequence[int] | None = None,
    var_eps: float = VAR_EPS,
    max_depth: int = MAX_DEPTH,
    practical_rule: bool = False,
) -> PlanNode:
    """Peel off the slowest server level by level.

    At each level the slowest server runs only the outer ring; the rest of
    the group gets the split share and sees bandwidths reduced by what the
    outer ring already uses.  Stops when the group is within ``var_eps`` of
    uniform, has fewer than three servers, or ``max_depth`` is reached.
    """
    bws = [float(b) for b in bandwidths]
    servers = tuple(range(len(bws))) if servers is None else tuple(servers)
    if len(bws) < 2 or len(servers) != len(bws):
        raise PlanError("need at least 2 servers with one bandwidth each")
    if any(not b > 0 for b in bws):
        raise PlanError("bandwidths must be > 0")
    return _plan_level(servers, bws, float(D), g, var_eps, max_depth, 0, practical_rule)


def _plan_level(servers, bws, D, g, var_eps, max_depth, depth, practical_rule) -> PlanNode:
    hi, lo = max(bws), min(bws)
    if (hi - lo) / hi < var_eps or len(servers) < 3 or depth >= max_depth:
        return _leaf(servers, bws, D, g)
    k = bws.index(lo)
    rest = [b for i, b in enumerate(bws) if i != k]
    rest_ids = tuple(s for i, s in enumerate(servers) if i != k)
    mean_rest = sum(rest) / len(rest)
    X = 1 - lo / mean_rest
    if X <= 0:
        return _leaf(servers, bws, D, g)
    inp = PartitionInputs(len(servers), g, X, D, mean_rest)
    plan = optimal_partition(inp, practical_rule)
    if plan.strategy is Strategy.STANDARD_RING:
        return _leaf(servers, bws, D, g)
    child = _plan_level(rest_ids, [b - lo for b in rest], plan.Y * D, g, var_eps, max_depth,
                        depth + 1, practical_rule)
    T1 = plan.T1
    T3 = plan.Y * D / (mean_rest - lo)
    return PlanNode(servers, tuple(bws), D, g, max(T1, child.predicted_time) + T3,
                    degraded=servers[k], plan=plan, child=child)


def two_stage_node(topology: ClusterTopology, health: HealthMap, degraded: int, plan: PartitionPlan,
                   D: float | None = None) -> PlanNode:
    """Single-level node for ``plan`` with ``degraded`` peeled off."""
    servers = tuple(range(topology.n))
    bws = tuple(topology.server_bandwidth(s, health) for s in servers)
    D = plan.inputs.D if D is None else D
    rest = tuple(s for s in servers if s != degraded)
    child = _leaf(rest, [bws[s] - bws[degraded] or 1.0 for s in rest], plan.Y * D, topology.g)
    return PlanNode(servers, bws, D, topology.g, plan.T_total, degraded=degraded, plan=plan, child=child)


# -- schedules ----------------------------------------------------------------

def _rail_nic(topology: ClusterTopology, server: int, rail: int) -> int | None:
    for d in topology.server_nics(server):
        if d.rail == rail:
            return d.nic_id
    return None


def _rail_lanes(topology, health, servers, rails) -> list[Lane]:
    """One lane per rail.  A server whose NIC on that rail is down borrows a
    healthy NIC from a rail outside ``rails`` before falling back to its
    failover chain."""
    rails = sorted(rails)
    spare = {s: [d.nic_id for d in topology.server_nics(s)
                 if d.rail not in rails and health.nic_ok(d.nic_id)] for s in servers}
    lanes = []
    for r in rails:
        nics, bw = {}, math.inf
        for s in servers:
            k = _rail_nic(topology, s, r)
            if k is None:
                k = topology.server_nics(s)[r % len(topology.server_nics(s))].nic_id
            if not health.nic_ok(k):
                k = spare[s].pop(0) if spare[s] else hot_repair_nic(topology, health, k)
            nics[s] = k
            bw = min(bw, topology.nic(k).bandwidth)
        lanes.append(Lane(bw, nics))
    return lanes


def _healthy_rails(topology, health, server, rails) -> list[int]:
    return [d.rail for d in topology.server_nics(server) if d.rail in rails and health.nic_ok(d.nic_id)]


def _gpus(topology, servers) -> list[int]:
    return [r for s in servers for r in topology.gpus_of(s)]


def _touched(b: ScheduleBuilder, start: int, ranks) -> dict[int, tuple[int, ...]]:
    """Per rank, every step since ``start`` that reads or writes it."""
    out: dict[int, list[int]] = {r: [] for r in ranks}
    for st in b.steps[start:]:
        if st.src in out:
            out[st.src].append(st.sid)
        if st.dst in out and st.dst != st.src:
            out[st.dst].append(st.sid)
    return {r: tuple(v) for r, v in out.items()}


class _Build:
    def __init__(self, topology, health, segment_bytes):
        self.topo = topology
        self.health = health
        self.seg = segment_bytes
        self.b = ScheduleBuilder()
        self.lanes: list[Lane] = []

    def add_lanes(self, lanes) -> int:
        base = len(self.lanes)
        self.lanes.extend(lanes)
        return base

    def ring(self, servers, region, rails, stage):
        ring = _gpus(self.topo, servers)
        lanes = _rail_lanes(self.topo, self.health, servers, rails)
        base = self.add_lanes(lanes)
        ring_all_reduce(self.b, ring, region, lanes, stage=stage, lane_base=base, segment_bytes=self.seg)

    def level(self, node: PlanNode, region, rails, depth=0):
        lo, hi = region
        if node.child is None or node.Y <= 0 or hi <= lo:
            self.ring(node.servers, region, rails, f"L{depth}.ring")
            return
        topo, d = self.topo, node.degraded
        outer = set(_healthy_rails(topo, self.health, d, rails)) or set(rails)
        inner = set(rails) - outer or set(rails)
        cut = lo + int(round((1 - node.Y) * (hi - lo) / PAD_GRANULE)) * PAD_GRANULE
        cut = min(max(cut, lo), hi)
        if cut > lo:
            self.ring(node.servers, (lo, cut), outer, f"L{depth}.global")
        if cut == hi:
            return
        start = len(self.b.steps)
        self.level(node.child, (cut, hi), inner, depth + 1)
        quiet = _touched(self.b, start, _gpus(topo, node.child.servers))
        self.broadcast_leg(d, node.child.servers, (cut, hi), rails, outer, quiet, f"L{depth}.bcast")

    def broadcast_leg(self, d, healthy, region, rails, outer, quiet, stage):
        topo, b, g = self.topo, self.b, self.topo.g
        dg = list(topo.gpus_of(d))
        pieces = even_cuts(*region, g)
        lanes = []
        for j in range(g):
            nics = {}
            for s in (d, *healthy):
                usable = _healthy_rails(topo, self.health, s, outer if s == d else rails)
                if usable:
                    nics[s] = _rail_nic(topo, s, usable[j % len(usable)])
                else:
                    nics[s] = hot_repair_nic(topo, self.health, topo.server_nics(s)[j % len(topo.server_nics(s))].nic_id)
            lanes.append(Lane(1.0 / g, nics))
        base = self.add_lanes(lanes)
        gate = {r: (b.barrier(r, v, stage=f"{stage}.wait"),) if len(v) > 1 else v for r, v in quiet.items()}
        for j, piece in enumerate(pieces):
            lane = base + j
            P = pipeline_segments(piece[1] - piece[0], self.seg)
            head = dg[j]
            order = [r for r in dg if r != head] + [head]
            for p, unit in enumerate(even_cuts(*piece, P)):
                if unit[1] <= unit[0]:
                    continue
                # sum the degraded server's own copies onto GPU j
                prev: tuple[int, ...] = ()
                for x, y in zip(order, order[1:]):
                    prev = (b.add(x, y, unit, op="reduce", deps=prev, stage=f"{stage}.local",
                                  lane=lane, block=p),)
                src, src_buf = head, "work"
                last = prev
                for s in healthy:
                    hj = topo.gpus_of(s)[j]
                    # "out" on hj is scratch shared with inner levels; wait until they are done with it
                    arrive = b.add(src, hj, unit, op="copy", deps=last + gate.get(hj, ()), stage=stage, lane=lane,
                                   block=p, src_buf=src_buf, dst_buf="out")
                    applied = None
                    for hk in topo.gpus_of(s):
                        sid = b.add(hj, hk, unit, op="reduce", deps=(arrive,) + gate.get(hk, ()),
                                    stage=f"{stage}.apply", lane=lane, block=p, src_buf="out", dst_buf="work")
                        if hk == hj:
                            applied = sid
                    src, src_buf, last = hj, "out", (arrive,)
                back = b.add(src, head, unit, op="copy", deps=(applied,), stage=f"{stage}.return",
                             lane=lane, block=p)
                for r in dg:
                    if r != head:
                        b.add(head, r, unit, op="copy", deps=(back,), stage=f"{stage}.local", lane=lane, block=p)


def build_allreduce_schedule(
    topology: ClusterTopology,
    health: HealthMap,
    node: PlanNode,
    D: int,
    E: int | None = None,
    reduction: str = "sum",
    segment_bytes: int = DEFAULT_CHUNK_SIZE,
) -> Schedule:
    """Executable AllReduce over every GPU of ``node.servers`` following ``node``.

    Each ring runs one lane per rail; the degraded server's ring only uses the
    rails still up on it, the inner group gets the others.
    """
    participants = tuple(_gpus(topology, node.servers))
    if E is None:
        E = max(1, D // PAD_GRANULE) if D else 0
    Ep, Dp = padded_layout(E, D, len(participants) * topology.g)
    rails = set(topology.rails)
    bld = _Build(topology, health, segment_bytes)
    bld.level(node, (0, Dp), rails)
    sched = Schedule(bld.b.steps, participants, CollectiveKind.ALL_REDUCE, participants, bld.lanes,
                     E, Ep, Dp, reduction, participants[0], meta={"plan": node.to_dict()})
    sched.check()
    return sched


def plan_two_stage(
    topology: ClusterTopology,
    health: HealthMap,
    degraded: int,
    plan: PartitionPlan,
    D: int | None = None,
    E: int | None = None,
    segment_bytes: int = DEFAULT_CHUNK_SIZE,
) -> Schedule:
    """Schedule for a single degraded server split by ``plan``."""
    if plan.strategy is not Strategy.TWO_STAGE:
        raise PlanError("plan keeps the plain ring; nothing to split")
    if topology.n < 3:
        raise PlanError("the partial ring needs at least 2 healthy servers (n >= 3)")
    D = int(plan.inputs.D if D is None else D)
    node = two_stage_node(topology, health, degraded, plan, D)
    return build_allreduce_schedule(topology, health, node, D, E, segment_bytes=segment_bytes)


def degraded_server(topology: ClusterTopology, health: HealthMap) -> tuple[int, float] | None:
    """Slowest server and its lost fraction against the mean of the others."""
    bws = [topology.server_bandwidth(s, health) for s in range(topology.n)]
    k = min(range(topology.n), key=lambda s: (bws[s], s))
    rest = [b for s, b in enumerate(bws) if s != k]
    X = 1 - bws[k] / (sum(rest) / len(rest))
    return (k, X) if X > 0 else None


# -- strategy selection -------------------------------------------------------

def predict_strategies(req: CollectiveRequest, topology: ClusterTopology, health: HealthMap,
                       cost: CostParams) -> dict[Strategy, float]:
    """Alpha-beta predicted AllReduce time for each candidate strategy."""
    D, g = float(req.D), topology.g
    bws = [topology.server_bandwidth(s, health) for s in range(topology.n)]
    full = [topology.server_bandwidth(s) for s in range(topology.n)]
    N = topology.n * g
    if min(bws) <= 0:
        return {Strategy.BALANCE: math.inf, Strategy.TWO_STAGE: math.inf}
    slow = balance_slowdown(topology, health)
    t_bal = 2 * (N - 1) * cost.alpha + _ring_factor(topology.n, g) * D * slow / min(full)
    node = recursive_plan(bws, D, g)
    t_two = node.predicted_time + 2 * (N - 1) * cost.alpha
    for lvl in node.levels()[:-1]:
        P = pipeline_segments(int(lvl.Y * D / g), DEFAULT_CHUNK_SIZE)
        t_two += (2 * (g - 1) + len(lvl.servers) + P) * cost.alpha
    return {Strategy.BALANCE: t_bal, Strategy.TWO_STAGE: t_two}


def select_strategy(req: CollectiveRequest, topology: ClusterTopology, health: HealthMap,
                    cost: CostParams | None = None) -> Strategy:
    """Balance for everything but AllReduce; for AllReduce the faster prediction."""
    if CollectiveKind(req.kind) is not CollectiveKind.ALL_REDUCE:
        return Strategy.BALANCE
    times = predict_strategies(req, topology, health, cost or CostParams())
    return min(times, key=lambda s: (times[s], s is not Strategy.BALANCE))
