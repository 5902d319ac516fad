"""Spreading a failed NIC's traffic over the healthy NICs of its server.

The collective algorithm itself is untouched: only the NIC each byte leaves
through changes.  Also picks the intra-server path a redirected flow takes
to reach its new NIC.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping

from .collectives import Lane
from .cost_model import DEFAULT_ALPHA
from .topology import ClusterTopology, HealthMap, failover_chain

MiB = 1 << 20
PXN_STAGING_BYTES = 64 * MiB
CROSS_NUMA_DERATE = 0.5


class NoHealthyNic(ValueError):
    pass


def redistribute(D_i: int, nic_bw: Mapping[int, float], failed=()) -> dict[int, int]:
    """Integer byte shares over healthy NICs, proportional to bandwidth.

    The rounding remainder goes to the fastest healthy NIC (lowest id on ties)
    so the shares always add up to ``D_i``.
    """
    failed = set(failed)
    healthy = sorted(k for k in nic_bw if k not in failed)
    if not healthy:
        raise NoHealthyNic("every NIC of the server has failed")
    if D_i < 0:
        raise ValueError("D_i must be >= 0")
    total = sum(nic_bw[k] for k in healthy)
    shares = {k: int(D_i * nic_bw[k] // total) for k in healthy}
    best = min(healthy, key=lambda k: (-nic_bw[k], k))
    shares[best] += int(D_i) - sum(shares.values())
    return shares


def available_bandwidth(topology: ClusterTopology, headroom: Mapping | None = None) -> dict[int, float]:
    """Nominal NIC bandwidth minus current utilization (a fraction per NIC)."""
    headroom = headroom or {}
    return {
        d.nic_id: d.bandwidth * (1.0 - headroom.get(("nic", d.nic_id), 0.0))
        for row in topology.nics
        for d in row
    }


class PathKind(str, Enum):
    DIRECT_PCIE = "DirectPcie"
    PCIE_CPU = "PcieThenCpuInterconnect"
    PXN = "PxnViaProxyGpu"


@dataclass(frozen=True)
class Path:
    kind: PathKind
    predicted_time: float
    proxy: int | None = None
    bandwidth: float = 0.0


@dataclass
class TrafficAssignment:
    server: int
    D_i: int
    shares: dict[int, int]
    routes: dict[int, Path] = field(default_factory=dict)


def _avail(bw: float, util: float) -> float:
    return max(0.0, bw * (1.0 - util))


def _time(size: float, hops: int, bw: float, alpha: float) -> float:
    if bw <= 0:
        return float("inf")
    return hops * alpha + size / bw


def route_flow(
    topology: ClusterTopology,
    headroom: Mapping | None,
    src_gpu: int,
    backup_nic: int,
    size: float = 64 * MiB,
    demand: float | None = None,
    alpha: float = DEFAULT_ALPHA,
    staging_in_use: float = 0.0,
) -> Path:
    """Pick how ``src_gpu`` reaches ``backup_nic``.

    ``headroom`` maps ``("pcie", nic)``, ``("cpu", server)`` and
    ``("nvlink", server)`` to utilization in ``[0, 1]``.  ``demand`` is the
    flow's rate in bytes/s (defaults to the NIC line rate).  Same-NUMA flows
    go straight over PCIe when the lane has room; otherwise the cheapest of
    the three paths wins, with PCIe-based paths preferred on ties.
    """
    headroom = headroom or {}
    nic = topology.nic(backup_nic)
    server = topology.server_of_gpu(src_gpu)
    if nic.server != server:
        raise ValueError("backup NIC must be on the source GPU's server")
    demand = nic.bandwidth if demand is None else demand
    pcie = _avail(topology.pcie_bw, headroom.get(("pcie", backup_nic), 0.0))
    cpu = _avail(topology.cpu_interconnect_bw, headroom.get(("cpu", server), 0.0))
    nvl = _avail(topology.nvlink_bw, headroom.get(("nvlink", server), 0.0))
    same_numa = topology.numa_of_gpu(src_gpu) == nic.numa

    direct_bw = min(pcie, nic.bandwidth)
    if same_numa and pcie >= demand:
        return Path(PathKind.DIRECT_PCIE, _time(size, 1, direct_bw, alpha), bandwidth=direct_bw)

    options = []
    if same_numa:
        options.append(Path(PathKind.DIRECT_PCIE, _time(size, 1, direct_bw, alpha), bandwidth=direct_bw))
    else:
        bw = min(pcie, cpu, CROSS_NUMA_DERATE * nic.bandwidth)
        options.append(Path(PathKind.PCIE_CPU, _time(size, 2, bw, alpha), bandwidth=bw))
    proxy = nic.affinity_gpu
    if staging_in_use + min(size, PXN_STAGING_BYTES) <= PXN_STAGING_BYTES and proxy != src_gpu:
        bw = min(nvl, pcie, nic.bandwidth)
        options.append(Path(PathKind.PXN, _time(size, 2, bw, alpha), proxy=proxy, bandwidth=bw))
    # stable min keeps the PCIe-family option on ties
    return min(options, key=lambda p: p.predicted_time)


def plan_server(
    topology: ClusterTopology,
    health: HealthMap,
    server: int,
    D_i: int,
    headroom: Mapping | None = None,
) -> TrafficAssignment:
    """Shares for every healthy NIC of ``server`` plus a route for each
    flow that was displaced from a failed NIC."""
    nics = topology.server_nics(server)
    bw = available_bandwidth(topology, headroom)
    failed = {d.nic_id for d in nics if not health.nic_ok(d.nic_id)}
    shares = redistribute(D_i, {d.nic_id: bw[d.nic_id] for d in nics}, failed)
    routes = {}
    for f in sorted(failed):
        src = topology.nic(f).affinity_gpu
        for k in shares:
            routes.setdefault(k, route_flow(topology, headroom, src, k, size=shares[k]))
    return TrafficAssignment(server, D_i, shares, routes)


# -- lane bindings for execution ---------------------------------------------

def _default_nic(topology: ClusterTopology, server: int, c: int) -> int:
    local = topology.server_nics(server)
    return local[c % len(local)].nic_id


def hot_repair_nic(topology: ClusterTopology, health: HealthMap, nic: int) -> int:
    """Where a failed NIC's traffic goes without rebalancing: the first healthy
    NIC in the failover chain of the NIC's own GPU."""
    if health.nic_ok(nic):
        return nic
    for k in failover_chain(topology, topology.nic(nic).affinity_gpu):
        if health.nic_ok(k):
            return k
    raise NoHealthyNic(f"no healthy NIC left on server {topology.nic(nic).server}")


def channel_bindings(
    topology: ClusterTopology,
    health: HealthMap,
    channels: int,
    strategy: str = "balance",
    servers=None,
) -> list[Lane]:
    """Lanes for ``channels`` equal channels under the given failover strategy.

    ``balance`` splits each channel whose NIC failed somewhere into sub-lanes
    (one common refinement across servers) so that on every affected server
    the lost share lands on healthy NICs in proportion to bandwidth.  Fully
    healthy servers move each sub-lane onto the lead server's rail where that
    NIC has room, so no single peer NIC has to absorb the whole redirected
    share.
    ``hot_repair`` moves the whole channel to the failover-chain head.
    """
    servers = list(range(topology.n)) if servers is None else list(servers)
    degraded = {s for s in servers if any(not health.nic_ok(d.nic_id) for d in topology.server_nics(s))}
    # healthy servers may take rail-aligned sub-lanes only up to the per-NIC
    # load (in message fractions per byte/s) of the worst degraded server
    cap = max((1.0 / topology.server_bandwidth(s, health) for s in degraded
               if topology.server_bandwidth(s, health) > 0), default=0.0)
    load: dict[int, float] = {}
    for s in set(servers) - degraded:
        for c in range(channels):
            k = _default_nic(topology, s, c)
            load[k] = load.get(k, 0.0) + 1.0 / channels
    lanes: list[Lane] = []
    for c in range(channels):
        base = {s: _default_nic(topology, s, c) for s in servers}
        if strategy == "hot_repair":
            lanes.append(Lane(1.0 / channels, {s: hot_repair_nic(topology, health, k) for s, k in base.items()}))
            continue
        if strategy != "balance":
            raise ValueError(f"unknown strategy {strategy!r}")
        splits: dict[int, list[tuple[float, int]]] = {}
        for s, k in base.items():
            if health.nic_ok(k):
                continue
            nics = topology.server_nics(s)
            bw = {d.nic_id: d.bandwidth for d in nics}
            failed = {d.nic_id for d in nics if not health.nic_ok(d.nic_id)}
            healthy = sorted(x for x in bw if x not in failed)
            if not healthy:
                raise NoHealthyNic(f"no healthy NIC left on server {s}")
            total = sum(bw[x] for x in healthy)
            acc, cuts = 0.0, []
            for x in healthy:
                acc += bw[x] / total
                cuts.append((acc, x))
            cuts[-1] = (1.0, cuts[-1][1])
            splits[s] = cuts
        if not splits:
            lanes.append(Lane(1.0 / channels, base))
            continue
        points = sorted({0.0, 1.0} | {p for cuts in splits.values() for p, _ in cuts})
        lead = min(splits)
        for lo, hi in zip(points, points[1:]):
            if hi - lo <= 1e-12:
                continue
            mid = (lo + hi) / 2
            own = {s: next(x for p, x in cuts if mid < p) for s, cuts in splits.items()}
            rail = topology.nic(own[lead]).rail
            nics = {}
            for s in servers:
                if s in own:
                    nics[s] = own[s]
                elif s in degraded:
                    nics[s] = base[s]  # its own split is already balanced, leave it be
                else:
                    # keep the sub-lane on one rail end to end when that NIC has room
                    same = [d.nic_id for d in topology.server_nics(s) if d.rail == rail]
                    f = (hi - lo) / channels
                    k = same[0] if same else base[s]
                    if k != base[s] and load[k] + f <= cap * topology.nic(k).bandwidth * (1 + 1e-9):
                        load[k] += f
                        load[base[s]] -= f
                    else:
                        k = base[s]
                    nics[s] = k
            lanes.append(Lane((hi - lo) / channels, nics))
    return lanes


def balance_slowdown(topology: ClusterTopology, health: HealthMap) -> float:
    """Bandwidth-bound makespan ratio under perfect rebalancing: the worst
    server's nominal over remaining bandwidth."""
    worst = 1.0
    for s in range(topology.n):
        total = topology.server_bandwidth(s)
        left = topology.server_bandwidth(s, health)
        if left <= 0:
            return float("inf")
        worst = max(worst, total / left)
    return worst
