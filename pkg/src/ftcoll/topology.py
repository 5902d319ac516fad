"""Cluster model: servers, GPUs, NICs, rails, NUMA domains and link speeds.

GPU and NIC identifiers are dense integers over the whole cluster.  GPU ``s * g + j``
is local GPU ``j`` of server ``s``; NICs are numbered server by server in the
order they are listed in the topology spec.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence


class TopologyError(ValueError):
    pass


@dataclass(frozen=True)
class NicSpec:
    """One NIC as written in a scenario file (GPU indices are server-local)."""

    rail: int
    numa: int
    bandwidth: float
    affinity_gpu: int
    pcie_hops: Mapping[int, int]
    nic_id: int | None = None


@dataclass(frozen=True)
class TopologySpec:
    n: int
    g: int
    nics: Sequence[Sequence[NicSpec]]
    gpu_numa: Sequence[Sequence[int]]
    nvlink_bw: float = 450e9
    cpu_interconnect_bw: float = 60e9
    pcie_bw: float = 64e9


@dataclass(frozen=True, eq=False)
class NicDescriptor:
    nic_id: int
    server: int
    local_index: int
    rail: int
    numa: int
    bandwidth: float
    affinity_gpu: int
    pcie_hops: Mapping[int, int]


@dataclass(frozen=True, eq=False)
class ClusterTopology:
    n: int
    g: int
    nics: tuple[tuple[NicDescriptor, ...], ...]
    gpu_numa: tuple[tuple[int, ...], ...]
    nvlink_bw: float
    cpu_interconnect_bw: float
    pcie_bw: float
    _by_id: tuple[NicDescriptor, ...] = field(repr=False, default=())

    @property
    def num_gpus(self) -> int:
        return self.n * self.g

    @property
    def num_nics(self) -> int:
        return len(self._by_id)

    @property
    def rails(self) -> frozenset[int]:
        return frozenset(d.rail for d in self._by_id)

    def nic(self, nic_id: int) -> NicDescriptor:
        if not 0 <= nic_id < len(self._by_id):
            raise TopologyError(f"unknown nic {nic_id}")
        return self._by_id[nic_id]

    def server_nics(self, server: int) -> tuple[NicDescriptor, ...]:
        if not 0 <= server < self.n:
            raise TopologyError(f"unknown server {server}")
        return self.nics[server]

    def server_of_gpu(self, gpu: int) -> int:
        if not 0 <= gpu < self.num_gpus:
            raise TopologyError(f"unknown gpu {gpu}")
        return gpu // self.g

    def gpus_of(self, server: int) -> range:
        return range(server * self.g, (server + 1) * self.g)

    def numa_of_gpu(self, gpu: int) -> int:
        s = self.server_of_gpu(gpu)
        return self.gpu_numa[s][gpu - s * self.g]

    def server_bandwidth(self, server: int, health: "HealthMap | None" = None) -> float:
        return sum(
            d.bandwidth
            for d in self.server_nics(server)
            if health is None or health.nic_ok(d.nic_id)
        )


def build_topology(spec: TopologySpec) -> ClusterTopology:
    """Validate ``spec`` and return an immutable topology with global ids."""
    if spec.n < 2:
        raise TopologyError(f"need at least 2 servers, got n={spec.n}")
    if spec.g < 1:
        raise TopologyError(f"need at least 1 GPU per server, got g={spec.g}")
    for name in ("nvlink_bw", "cpu_interconnect_bw", "pcie_bw"):
        if not getattr(spec, name) > 0:
            raise TopologyError(f"{name} must be > 0")
    if len(spec.nics) != spec.n:
        raise TopologyError(f"nics lists {len(spec.nics)} servers, expected {spec.n}")
    if len(spec.gpu_numa) != spec.n or any(len(row) != spec.g for row in spec.gpu_numa):
        raise TopologyError("gpu_numa must give one NUMA domain per GPU per server")

    declared = [ns.nic_id for row in spec.nics for ns in row if ns.nic_id is not None]
    if len(declared) != len(set(declared)):
        raise TopologyError("duplicate NIC identifiers")

    by_id: list[NicDescriptor] = []
    per_server: list[tuple[NicDescriptor, ...]] = []
    for s, server_nics in enumerate(spec.nics):
        if not server_nics:
            raise TopologyError(f"server {s} has no NICs")
        rails_seen: set[int] = set()
        row = []
        for k, ns in enumerate(server_nics):
            if not ns.bandwidth > 0:
                raise TopologyError(f"server {s} nic {k}: bandwidth must be > 0")
            if ns.rail in rails_seen:
                raise TopologyError(f"server {s}: duplicate NIC on rail {ns.rail}")
            rails_seen.add(ns.rail)
            if not 0 <= ns.affinity_gpu < spec.g:
                raise TopologyError(f"server {s} nic {k}: bad affinity gpu {ns.affinity_gpu}")
            missing = set(range(spec.g)) - set(ns.pcie_hops)
            if missing:
                raise TopologyError(
                    f"server {s} nic {k}: pcie_hops missing gpus {sorted(missing)}"
                )
            if ns.pcie_hops[ns.affinity_gpu] > min(ns.pcie_hops[j] for j in range(spec.g)):
                raise TopologyError(
                    f"server {s} nic {k}: affinity gpu is not the closest by pcie_hops"
                )
            if ns.nic_id is not None and ns.nic_id != len(by_id):
                raise TopologyError(
                    f"server {s} nic {k}: id {ns.nic_id} is not dense (expected {len(by_id)})"
                )
            desc = NicDescriptor(
                nic_id=len(by_id),
                server=s,
                local_index=k,
                rail=ns.rail,
                numa=ns.numa,
                bandwidth=float(ns.bandwidth),
                affinity_gpu=s * spec.g + ns.affinity_gpu,
                pcie_hops={s * spec.g + j: int(ns.pcie_hops[j]) for j in range(spec.g)},
            )
            by_id.append(desc)
            row.append(desc)
        per_server.append(tuple(row))

    return ClusterTopology(
        n=spec.n,
        g=spec.g,
        nics=tuple(per_server),
        gpu_numa=tuple(tuple(r) for r in spec.gpu_numa),
        nvlink_bw=float(spec.nvlink_bw),
        cpu_interconnect_bw=float(spec.cpu_interconnect_bw),
        pcie_bw=float(spec.pcie_bw),
        _by_id=tuple(by_id),
    )


def uniform_spec(
    n: int,
    g: int,
    nics_per_server: int | None = None,
    nic_bandwidth: float = 50e9,
    numa_domains: int = 2,
    **links: float,
) -> TopologySpec:
    """Rail-optimized cluster with identical servers.

    NIC ``k`` sits on rail ``k`` next to GPU ``k * g // m``.  PCIe hop counts:
    1 to the affinity GPU, 2 under the same PCIe switch (GPU pairs), 3 within
    the NUMA domain, 5 across sockets.
    """
    m = g if nics_per_server is None else nics_per_server
    numa_domains = max(1, min(numa_domains, g))
    gpu_numa = [j * numa_domains // g for j in range(g)]
    nics = []
    for k in range(m):
        aff = k * g // m
        hops = {}
        for j in range(g):
            if j == aff:
                hops[j] = 1
            elif j // 2 == aff // 2:
                hops[j] = 2
            elif gpu_numa[j] == gpu_numa[aff]:
                hops[j] = 3
            else:
                hops[j] = 5
        nics.append(NicSpec(rail=k, numa=gpu_numa[aff], bandwidth=nic_bandwidth,
                            affinity_gpu=aff, pcie_hops=hops))
    return TopologySpec(n=n, g=g, nics=[list(nics) for _ in range(n)],
                        gpu_numa=[list(gpu_numa) for _ in range(n)], **links)


class HealthMap:
    """Mutable record of failed NICs and failed NIC-to-NIC links."""

    def __init__(self, failed_nics: Iterable[int] = (), failed_links: Iterable[tuple[int, int]] = ()):
        self.failed_nics: set[int] = set(failed_nics)
        self.failed_links: set[frozenset[int]] = {frozenset(p) for p in failed_links}

    def nic_ok(self, nic_id: int) -> bool:
        return nic_id not in self.failed_nics

    def link_ok(self, a: int, b: int) -> bool:
        return self.nic_ok(a) and self.nic_ok(b) and frozenset((a, b)) not in self.failed_links

    def fail_nic(self, nic_id: int) -> None:
        self.failed_nics.add(nic_id)

    def restore_nic(self, nic_id: int) -> None:
        self.failed_nics.discard(nic_id)

    def fail_link(self, a: int, b: int) -> None:
        self.failed_links.add(frozenset((a, b)))

    def restore_link(self, a: int, b: int) -> None:
        self.failed_links.discard(frozenset((a, b)))

    def copy(self) -> "HealthMap":
        h = HealthMap(self.failed_nics)
        h.failed_links = set(self.failed_links)
        return h

    def __repr__(self) -> str:
        return f"HealthMap(failed_nics={sorted(self.failed_nics)}, failed_links={len(self.failed_links)})"


def failover_chain(topology: ClusterTopology, gpu: int) -> list[int]:
    """All NICs of ``gpu``'s server, closest PCIe distance first, ties by id."""
    server = topology.server_of_gpu(gpu)
    nics = topology.server_nics(server)
    return [d.nic_id for d in sorted(nics, key=lambda d: (d.pcie_hops[gpu], d.nic_id))]


def rail_set(topology: ClusterTopology, health: HealthMap, server: int) -> frozenset[int]:
    return frozenset(d.rail for d in topology.server_nics(server) if health.nic_ok(d.nic_id))
