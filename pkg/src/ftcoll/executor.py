"""Runs a :class:`~ftcoll.collectives.Schedule` on the simulated cluster.

Cross-server steps ride :class:`~ftcoll.transport.Connection` objects, one per
(lane, sender GPU, receiver GPU), bound to the lane's NIC on each server.
Same-server steps ride NVLink, modeled as an uncontended pipe per GPU pair.
A step starts when all of its dependencies have landed and its link is free.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .collectives import REDUCTIONS, Schedule, Step
from .engine import Engine, EventKind
from .faults import FaultConfig, FaultManager
from .topology import ClusterTopology, HealthMap
from .transport import Connection, NoBackup, PortTable, TransportConfig, open_endpoint


class NvLink:
    """Serial GPU-to-GPU pipe inside a server; never fails."""

    def __init__(self, engine: Engine, bw: float, alpha: float, name: str):
        self.engine = engine
        self.bw = bw
        self.alpha = alpha
        self.name = name
        self.free_at = 0.0
        self.bytes = 0

    @property
    def landed(self) -> bool:
        return self.free_at <= self.engine.now

    def send(self, data: np.ndarray, nbytes: int, on_landed) -> None:
        start = max(self.engine.now, self.free_at)
        end = start + self.alpha + nbytes / self.bw
        self.free_at = end
        self.bytes += nbytes
        payload = np.array(data, copy=True)
        self.engine.at(end, EventKind.CHUNK_COMPLETE, lambda ev: on_landed(payload),
                       label=f"{self.name} nvlink")


@dataclass
class Fabric:
    """Everything a schedule needs to run: clock, cluster, health and links."""

    topology: ClusterTopology
    engine: Engine = field(default_factory=Engine)
    transport: TransportConfig = field(default_factory=TransportConfig)
    physical: HealthMap = field(default_factory=HealthMap)
    known: HealthMap = field(default_factory=HealthMap)
    faults: FaultManager | None = None
    fault_cfg: FaultConfig | None = None
    ports: PortTable = field(default_factory=PortTable)

    def __post_init__(self):
        if self.faults is None:
            self.faults = FaultManager(self.engine, self.topology, self.fault_cfg,
                                       physical=self.physical, known=self.known)
        else:
            self.physical = self.faults.physical
            self.known = self.faults.known


@dataclass
class ExecutionResult:
    start: float
    end: float
    buffers: dict[int, dict[str, np.ndarray]]
    traffic: dict[int, dict[str, int]]
    nvlink_bytes: int
    steps_done: int
    retransmitted_chunks: int
    connections: list[Connection]

    @property
    def makespan(self) -> float:
        return self.end - self.start

    def server_traffic(self, topology: ClusterTopology) -> dict[int, dict[str, int]]:
        out = {s: {"tx": 0, "rx": 0} for s in range(topology.n)}
        for nic, t in self.traffic.items():
            s = topology.nic(nic).server
            out[s]["tx"] += t["tx"]
            out[s]["rx"] += t["rx"]
        return out


def _chain_with_head(topology: ClusterTopology, head: int) -> list[int]:
    from .topology import failover_chain

    aff = topology.nic(head).affinity_gpu
    return [head] + [x for x in failover_chain(topology, aff) if x != head]


def lane_nic(topology: ClusterTopology, sched: Schedule, lane: int, server: int) -> int:
    nics = sched.lanes[lane].nics if lane < len(sched.lanes) else {}
    if server in nics:
        return nics[server]
    local = topology.server_nics(server)
    return local[lane % len(local)].nic_id


def init_buffers(sched: Schedule, inputs: Mapping[int, np.ndarray], ranks) -> dict[int, dict[str, np.ndarray]]:
    bufs = {}
    for r in ranks:
        x = np.asarray(inputs[r])
        if len(x) != sched.E:
            raise ValueError(f"rank {r}: expected {sched.E} elements, got {len(x)}")
        padded = np.zeros(sched.Ep, dtype=x.dtype)
        padded[: sched.E] = x
        bufs[r] = {"in": padded, "work": padded.copy(), "out": np.zeros_like(padded)}
    return bufs


def _apply(sched: Schedule, bufs, st: Step, data: np.ndarray) -> None:
    if st.op == "noop":
        return
    dst = bufs[st.dst][st.dst_buf]
    sl = sched.elems(st.dst_range)
    if st.op == "copy":
        dst[sl] = data
    else:
        dst[sl] = REDUCTIONS[sched.reduction](dst[sl], data)


def replay(sched: Schedule, inputs: Mapping[int, np.ndarray], rng: np.random.Generator | None = None):
    """Run the steps instantly in a (random) dependency-respecting order.

    Used to check that a schedule's dependencies alone guarantee its result,
    independent of link timing.
    """
    ranks = {st.src for st in sched.steps} | {st.dst for st in sched.steps} | set(sched.participants)
    bufs = init_buffers(sched, inputs, sorted(ranks))
    waiting = [len(st.deps) for st in sched.steps]
    children: list[list[int]] = [[] for _ in sched.steps]
    for st in sched.steps:
        for d in st.deps:
            children[d].append(st.sid)
    ready = [st.sid for st in sched.steps if not st.deps]
    while ready:
        k = int(rng.integers(len(ready))) if rng is not None else 0
        sid = ready.pop(k)
        st = sched.steps[sid]
        data = bufs[st.src][st.src_buf][sched.elems(st.src_range)].copy()
        _apply(sched, bufs, st, data)
        for c in children[sid]:
            waiting[c] -= 1
            if waiting[c] == 0:
                ready.append(c)
    if any(waiting):
        raise ValueError("schedule has unreachable steps")
    return bufs


def execute(
    sched: Schedule,
    inputs: Mapping[int, np.ndarray],
    fabric: Fabric,
    run: bool = True,
) -> ExecutionResult:
    """Run ``sched`` starting at the fabric clock; returns timing and buffers.

    Raises :class:`NoBackup` if a failure leaves some connection with no
    usable NIC.
    """
    topo, eng, cfg = fabric.topology, fabric.engine, fabric.transport
    fm = fabric.faults
    ranks = sorted({st.src for st in sched.steps} | {st.dst for st in sched.steps} | set(sched.participants))
    bufs = init_buffers(sched, inputs, ranks)
    steps = sched.steps
    waiting = [len(st.deps) for st in steps]
    children: list[list[int]] = [[] for _ in steps]
    for st in steps:
        for d in st.deps:
            children[d].append(st.sid)

    links: dict[tuple, object] = {}
    queues: dict[tuple, deque] = {}
    conns: list[Connection] = []
    nvlinks: list[NvLink] = []
    state = {"done": 0, "end": eng.now, "error": None}
    start_time = eng.now

    def link_for(st: Step):
        s_src, s_dst = topo.server_of_gpu(st.src), topo.server_of_gpu(st.dst)
        key = (st.lane, st.slot, st.src, st.dst) if s_src != s_dst else ("nv", st.lane, st.slot, st.src, st.dst)
        link = links.get(key)
        if link is None:
            if s_src == s_dst:
                link = NvLink(eng, topo.nvlink_bw, cfg.alpha, f"{st.src}->{st.dst}")
                nvlinks.append(link)
            else:
                a = lane_nic(topo, sched, st.lane, s_src)
                b = lane_nic(topo, sched, st.lane, s_dst)
                snd = open_endpoint(topo, st.src, _chain_with_head(topo, a), cfg)
                rcv = open_endpoint(topo, st.dst, _chain_with_head(topo, b), cfg)
                link = Connection(eng, topo, snd, rcv, cfg, ports=fabric.ports,
                                  physical=fabric.physical, name=f"L{st.lane}.{st.slot}:{st.src}->{st.dst}")
                fm.attach(link)
                conns.append(link)
            links[key] = link
            queues[key] = deque()
        return key, link

    def finish(sid: int, worklist: list[int]) -> None:
        state["done"] += 1
        state["end"] = max(state["end"], eng.now)
        for c in children[sid]:
            waiting[c] -= 1
            if waiting[c] == 0:
                worklist.append(c)

    def drain(worklist: list[int]) -> None:
        while worklist:
            sid = worklist.pop()
            st = steps[sid]
            if st.local:
                data = bufs[st.src][st.src_buf][sched.elems(st.src_range)].copy()
                _apply(sched, bufs, st, data)
                finish(sid, worklist)
                continue
            key, link = link_for(st)
            queues[key].append(sid)
            pump(key, link)

    def pump(key, link) -> None:
        q = queues[key]
        if not q or not link.landed or getattr(link, "failed", False):
            return
        sid = q.popleft()
        st = steps[sid]
        data = bufs[st.src][st.src_buf][sched.elems(st.src_range)].copy()

        def landed(arg, sid=sid, st=st):
            payload = arg.recv if hasattr(arg, "recv") else arg
            _apply(sched, bufs, st, payload)
            wl: list[int] = []
            finish(sid, wl)
            pump(key, link)
            drain(wl)

        if isinstance(link, NvLink):
            link.send(data, st.nbytes, landed)
        else:
            link.send(data, st.nbytes, on_landed=landed, on_done=lambda L: pump(key, link))

    def on_verdict(rec, conn, exc):
        if exc is not None and state["error"] is None:
            state["error"] = exc
        elif exc is None:
            for key, link in links.items():
                if link is conn:
                    eng.after(0.0, EventKind.RECOVERY, lambda ev, key=key, link=link: pump(key, link),
                              label=f"{conn.name} drain")

    fm.on_verdict.append(on_verdict)
    try:
        drain([st.sid for st in steps if not st.deps])
        if run:
            # stop at the last landing so later faults stay queued for the next collective
            while state["done"] < len(steps) and state["error"] is None and eng.step() is not None:
                pass
    finally:
        fm.on_verdict.remove(on_verdict)
    if state["error"] is not None:
        raise state["error"]
    if state["done"] != len(steps):
        raise RuntimeError(f"schedule stalled: {state['done']}/{len(steps)} steps finished")
    return ExecutionResult(
        start=start_time,
        end=state["end"],
        buffers=bufs,
        traffic=fabric.ports.traffic(),
        nvlink_bytes=sum(l.bytes for l in nvlinks),
        steps_done=state["done"],
        retransmitted_chunks=sum(c.retransmitted_chunks for c in conns),
        connections=conns,
    )
