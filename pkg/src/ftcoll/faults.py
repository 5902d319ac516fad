"""Fault injection, out-of-band notification, probing and fault localization.

Two health maps are kept apart on purpose: ``physical`` is ground truth and
changes the instant a fault is injected or repaired; ``known`` is what the
communicator has learned from verdicts and reprobes, and is the only one the
planners and failover logic consult.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Protocol, Union

from .engine import Engine, EventKind
from .topology import ClusterTopology, HealthMap
from .transport import Connection, NoBackup


# -- fault vocabulary --------------------------------------------------------

@dataclass(frozen=True)
class NicTarget:
    nic: int


@dataclass(frozen=True)
class LinkTarget:
    a: int
    b: int


@dataclass(frozen=True)
class TransportTarget:
    connection: str


FaultTarget = Union[NicTarget, LinkTarget, TransportTarget]

# Failure classes the injector understands, keyed to the kind of target they
# hit.  Classes outside this table (NVLink, switch-wide, process crashes) are
# rejected.
FAILURE_CLASSES = {
    "nic_hardware": NicTarget,
    "nic_port": NicTarget,
    "nic_driver": NicTarget,
    "nic_firmware": NicTarget,
    "pcie_nic_unreachable": NicTarget,
    "link_down": LinkTarget,
    "cable": LinkTarget,
    "tor_port": LinkTarget,
    "link_flap": LinkTarget,
    "crc_escalated": LinkTarget,
    "qp_error": TransportTarget,
    "transport": TransportTarget,
}


@dataclass(frozen=True)
class FaultEvent:
    time: float
    target: FaultTarget
    permanent: bool = True
    recovery_time: float | None = None
    failure_class: str | None = None

    def __post_init__(self):
        if self.time < 0:
            raise ValueError("fault time must be >= 0")
        if self.permanent and self.recovery_time is not None:
            raise ValueError("a permanent fault cannot have a recovery_time")
        if self.recovery_time is not None and not self.recovery_time > self.time:
            raise ValueError("recovery_time must be after the fault time")
        if self.failure_class is not None:
            expected = FAILURE_CLASSES.get(self.failure_class)
            if expected is None:
                raise ValueError(f"unsupported failure class {self.failure_class!r}")
            if not isinstance(self.target, expected):
                raise ValueError(f"{self.failure_class} faults target a {expected.__name__}")


# -- probes and verdicts -----------------------------------------------------

class ProbeResult(str, Enum):
    SUCCESS = "Success"
    LOCAL_ERROR = "LocalError"
    TIMEOUT = "Timeout"


@dataclass(frozen=True)
class ProbeOutcome:
    edge: tuple[int, int]
    result: ProbeResult


class VerdictKind(str, Enum):
    LOCAL_NIC = "LocalNicFault"
    REMOTE_NIC = "RemoteNicFault"
    LINK = "LinkFault"
    DUAL_ENDPOINT = "DualEndpointFault"
    INCONCLUSIVE = "Inconclusive"


@dataclass(frozen=True)
class Verdict:
    kind: VerdictKind
    nics: tuple[int, ...] = ()
    flags: tuple[str, ...] = ()


@dataclass
class FaultConfig:
    oob_enabled: bool = True
    oob_latency: float = 0.5e-3
    probe_rtt: float = 10e-6
    probe_timeout: float = 5e-3
    poll_timeout: float = 30.0
    reprobe_base: float = 0.1
    reprobe_max: float = 1.6


def probe(prober_nic: int, target_nic: int, health: HealthMap) -> ProbeOutcome:
    """Zero-byte write from ``prober_nic`` to ``target_nic`` over a probe QP."""
    if not health.nic_ok(prober_nic):
        result = ProbeResult.LOCAL_ERROR
    elif not health.link_ok(prober_nic, target_nic):
        result = ProbeResult.TIMEOUT
    else:
        result = ProbeResult.SUCCESS
    return ProbeOutcome((prober_nic, target_nic), result)


def probe_latency(outcome: ProbeOutcome, cfg: FaultConfig) -> float:
    return cfg.probe_timeout if outcome.result == ProbeResult.TIMEOUT else cfg.probe_rtt


def triangulate(
    outcomes: Iterable[ProbeOutcome],
    has_aux: bool,
    a: int,
    b: int,
    aux: int | None = None,
) -> Verdict:
    """Localize a fault on the ``a``-``b`` connection from probe outcomes.

    Needs ``a->b`` and ``b->a``; with ``has_aux`` also ``aux->a`` and ``aux->b``.
    """
    got = {o.edge: o.result for o in outcomes}
    need = [(a, b), (b, a)]
    if has_aux:
        if aux is None:
            raise ValueError("has_aux requires the auxiliary NIC id")
        need += [(aux, a), (aux, b)]
    missing = [e for e in need if e not in got]
    if missing:
        raise ValueError(f"missing probe outcomes for edges {missing}")

    ra, rb = got[(a, b)], got[(b, a)]
    L, T, S = ProbeResult.LOCAL_ERROR, ProbeResult.TIMEOUT, ProbeResult.SUCCESS
    if ra == L and rb == L:
        return Verdict(VerdictKind.LOCAL_NIC, (a, b), ("both-local-errors",))
    if ra == L:
        return Verdict(VerdictKind.LOCAL_NIC, (a,), ("inconsistent",) if rb == S else ())
    if rb == L:
        return Verdict(VerdictKind.LOCAL_NIC, (b,), ("inconsistent",) if ra == S else ())
    if ra == S and rb == S:
        return Verdict(VerdictKind.INCONCLUSIVE, (a, b), ("transient",))
    # at least one timeout, no local errors
    asym = ("asymmetric",) if S in (ra, rb) else ()
    if not has_aux:
        return Verdict(VerdictKind.INCONCLUSIVE, (a, b), ("no-aux",) + asym)
    xa, xb = got[(aux, a)], got[(aux, b)]
    if L in (xa, xb):
        return Verdict(VerdictKind.INCONCLUSIVE, (a, b), ("aux-failed",) + asym)
    if xa == S and xb == S:
        return Verdict(VerdictKind.LINK, (a, b), asym)
    if xa == T and xb == S:
        return Verdict(VerdictKind.REMOTE_NIC, (a,), asym)
    if xa == S and xb == T:
        return Verdict(VerdictKind.REMOTE_NIC, (b,), asym)
    return Verdict(VerdictKind.DUAL_ENDPOINT, (a, b), asym)


def all_outcome_combinations(has_aux: bool):
    """Every probe-outcome assignment for a round (for exhaustive checks)."""
    edges = [(0, 1), (1, 0)] + ([(2, 0), (2, 1)] if has_aux else [])
    for results in itertools.product(list(ProbeResult), repeat=len(edges)):
        yield [ProbeOutcome(e, r) for e, r in zip(edges, results)]


# -- out-of-band notification ------------------------------------------------

@dataclass(frozen=True)
class OobDelivery:
    time: float
    detector: int
    peer: int
    via: str


def notify_oob(detector: int, peer: int, t_detect: float, cfg: FaultConfig) -> OobDelivery:
    """When ``peer`` learns of the error ``detector`` saw at ``t_detect``.

    Without the OOB path the peer only finds out when its own poll times out.
    """
    if cfg.oob_enabled:
        return OobDelivery(t_detect + cfg.oob_latency, detector, peer, "oob")
    return OobDelivery(t_detect + cfg.poll_timeout, detector, peer, "poll-timeout")


class Awareness:
    """First moment each endpoint of a connection knew about the failure."""

    def __init__(self):
        self.aware: dict[int, float] = {}
        self.verdicts = 0

    def mark(self, endpoint: int, t: float) -> bool:
        if endpoint in self.aware and self.aware[endpoint] <= t:
            return False
        self.aware[endpoint] = t
        return True

    def ready(self, a: int, b: int) -> float | None:
        if a in self.aware and b in self.aware:
            return max(self.aware[a], self.aware[b])
        return None


# -- reprobing ---------------------------------------------------------------

class ReprobePolicy(Protocol):
    def interval(self, attempt: int) -> float: ...


@dataclass(frozen=True)
class ExponentialBackoff:
    base: float = 0.1
    cap: float = 1.6

    def interval(self, attempt: int) -> float:
        return min(self.base * (2 ** attempt), self.cap)


def reprobe_schedule(verdict: Verdict, history: list[float], now: float, policy: ReprobePolicy) -> float:
    """Time of the next probe of a component the verdict marked as failed."""
    if verdict.kind == VerdictKind.INCONCLUSIVE and "transient" in verdict.flags:
        raise ValueError("nothing to reprobe for a transient verdict")
    return now + policy.interval(len(history))


# -- runtime -----------------------------------------------------------------

@dataclass
class DetectionRecord:
    component: str
    fault_time: float
    detect_time: float
    peer_aware_time: float
    verdict_time: float
    verdict: Verdict
    probes: list[ProbeOutcome] = field(default_factory=list)
    connections: list[str] = field(default_factory=list)
    resume_delays: list[float] = field(default_factory=list)

    @property
    def detection_latency(self) -> float:
        return self.peer_aware_time - self.fault_time

    @property
    def localization_latency(self) -> float:
        return self.verdict_time - self.peer_aware_time


class FaultManager:
    """Drives injected faults through detection, localization, failover and reprobing."""

    def __init__(
        self,
        engine: Engine,
        topology: ClusterTopology,
        cfg: FaultConfig | None = None,
        physical: HealthMap | None = None,
        known: HealthMap | None = None,
        policy: ReprobePolicy | None = None,
    ):
        self.engine = engine
        self.topology = topology
        self.cfg = cfg or FaultConfig()
        self.physical = physical if physical is not None else HealthMap()
        self.known = known if known is not None else HealthMap()
        self.policy = policy or ExponentialBackoff(self.cfg.reprobe_base, self.cfg.reprobe_max)
        self.connections: list[Connection] = []
        self.records: list[DetectionRecord] = []
        self.recoveries: list[dict] = []
        self.errors: list[tuple[str, Exception]] = []
        self._pending: dict[str, DetectionRecord] = {}
        self._fault_times: dict[str, float] = {}
        self._transport_faults: set[str] = set()
        self._reprobing: dict[str, Verdict] = {}
        self._reprobe_events: dict[int, object] = {}
        self.on_verdict = []

    # -- wiring ----------------------------------------------------------
    def attach(self, conn: Connection) -> None:
        conn.physical = self.physical
        conn.fault_sink = self.report
        self.connections.append(conn)

    def inject(self, fault: FaultEvent) -> None:
        self.engine.at(fault.time, EventKind.FAULT_INJECT, lambda ev: self._apply(fault),
                       label=f"inject {_describe(fault.target)}")
        if fault.recovery_time is not None:
            self.engine.at(fault.recovery_time, EventKind.RECOVERY, lambda ev: self._repair(fault),
                           label=f"repair {_describe(fault.target)}")

    # -- fault application ---------------------------------------------------
    def _apply(self, fault: FaultEvent) -> None:
        t = self.engine.now
        target = fault.target
        key = _describe(target)
        self._fault_times[key] = t
        if isinstance(target, NicTarget):
            self.physical.fail_nic(target.nic)
        elif isinstance(target, LinkTarget):
            self.physical.fail_link(target.a, target.b)
        else:
            self._transport_faults.add(target.connection)
        for conn in list(self.connections):
            hit = (
                conn.name == target.connection
                if isinstance(target, TransportTarget)
                else not self.physical.link_ok(*conn.nics())
            )
            if hit and not conn.failed:
                conn.interrupt(t)
                self.report(conn, t)

    def _repair(self, fault: FaultEvent) -> None:
        target = fault.target
        if isinstance(target, NicTarget):
            self.physical.restore_nic(target.nic)
        elif isinstance(target, LinkTarget):
            self.physical.restore_link(target.a, target.b)
        else:
            self._transport_faults.discard(target.connection)

    def _component(self, conn: Connection) -> tuple[str, str]:
        a, b = conn.nics()
        if conn.name in self._transport_faults:
            return f"qp:{conn.name}", "sender"
        if not self.physical.nic_ok(a):
            return f"nic:{a}", "sender"
        if not self.physical.nic_ok(b):
            return f"nic:{b}", "receiver"
        return f"link:{min(a, b)}-{max(a, b)}", "sender"

    def _aux_nic(self, a: int, b: int) -> int | None:
        sa, sb = self.topology.nic(a).server, self.topology.nic(b).server
        want_rail = self.topology.nic(b).rail
        for s in range(self.topology.n):
            if s in (sa, sb):
                continue
            nics = self.topology.server_nics(s)
            ordered = sorted(nics, key=lambda d: (d.rail != want_rail, d.nic_id))
            for d in ordered:
                if self.known.nic_ok(d.nic_id):
                    return d.nic_id
        return None

    # -- detection round -------------------------------------------------
    def report(self, conn: Connection, t: float) -> None:
        """``conn`` observed an error at ``t``; join or open a localization round."""
        component, detector_side = self._component(conn)
        rec = self._pending.get(component)
        if rec is not None:
            rec.connections.append(conn.name)
            return
        a, b = conn.nics()
        detector, peer = (a, b) if detector_side == "sender" else (b, a)
        aware = Awareness()
        aware.mark(detector, t)
        delivery = notify_oob(detector, peer, t, self.cfg)
        aware.mark(peer, delivery.time)
        start = aware.ready(a, b)
        aux = self._aux_nic(a, b)
        outcomes = [probe(a, b, self.physical), probe(b, a, self.physical)]
        if aux is not None:
            outcomes += [probe(aux, a, self.physical), probe(aux, b, self.physical)]
        verdict = triangulate(outcomes, aux is not None, a, b, aux)
        t_verdict = start + max(probe_latency(o, self.cfg) for o in outcomes)
        rec = DetectionRecord(
            component=component,
            fault_time=self._fault_times.get(component, t),
            detect_time=t,
            peer_aware_time=delivery.time,
            verdict_time=t_verdict,
            verdict=verdict,
            probes=outcomes,
            connections=[conn.name],
        )
        self._pending[component] = rec
        self.records.append(rec)
        self.engine.at(t_verdict, EventKind.PROBE_RESULT, lambda ev: self._deliver(rec),
                       label=f"verdict {component} {verdict.kind.value}")

    def _deliver(self, rec: DetectionRecord) -> None:
        del self._pending[rec.component]
        v = rec.verdict
        transport = rec.component.startswith("qp:")
        if v.kind in (VerdictKind.LOCAL_NIC, VerdictKind.REMOTE_NIC, VerdictKind.DUAL_ENDPOINT):
            for nic in v.nics:
                self.known.fail_nic(nic)
        elif v.kind == VerdictKind.LINK or (v.kind == VerdictKind.INCONCLUSIVE and not transport):
            self.known.fail_link(*v.nics)
        if not transport and not (v.kind == VerdictKind.INCONCLUSIVE and "transient" in v.flags):
            self._start_reprobe(rec.component, v)
        by_name = {c.name: c for c in self.connections}
        for name in rec.connections:
            conn = by_name[name]
            try:
                delay = conn.recover(self.known, force_sender=transport)
            except NoBackup as exc:
                self.errors.append((name, exc))
                conn.failed = True
                for cb in self.on_verdict:
                    cb(rec, conn, exc)
                continue
            if transport:
                self._transport_faults.discard(name)
            rec.resume_delays.append(self.engine.now - rec.fault_time + conn.cfg.reschedule_latency + delay)
            for cb in self.on_verdict:
                cb(rec, conn, None)

    # -- reprobing -----------------------------------------------------------
    def _component_ok(self, component: str, v: Verdict) -> bool:
        if v.kind == VerdictKind.LINK or v.kind == VerdictKind.INCONCLUSIVE:
            return self.physical.link_ok(*v.nics)
        return all(self.physical.nic_ok(n) for n in v.nics)

    def _start_reprobe(self, component: str, v: Verdict) -> None:
        if component in self._reprobing:
            return
        self._reprobing[component] = v
        self._schedule_reprobe(component, v, [])

    def _schedule_reprobe(self, component: str, v: Verdict, history: list[float]) -> None:
        t_next = reprobe_schedule(v, history, self.engine.now, self.policy)

        def fire(ev):
            self._reprobe_events.pop(id(ev), None)
            history.append(self.engine.now)
            if self._component_ok(component, v):
                if v.kind == VerdictKind.LINK or v.kind == VerdictKind.INCONCLUSIVE:
                    self.known.restore_link(*v.nics)
                else:
                    for nic in v.nics:
                        self.known.restore_nic(nic)
                del self._reprobing[component]
                self.recoveries.append({"component": component, "time": self.engine.now,
                                        "probes": len(history)})
                return
            if self.engine.pending() - len(self._reprobe_events) > 0:
                self._schedule_reprobe(component, v, history)
            else:
                del self._reprobing[component]

        ev = self.engine.at(t_next, EventKind.TIMEOUT, fire, label=f"reprobe {component}")
        self._reprobe_events[id(ev)] = ev


def _describe(target: FaultTarget) -> str:
    if isinstance(target, NicTarget):
        return f"nic:{target.nic}"
    if isinstance(target, LinkTarget):
        return f"link:{min(target.a, target.b)}-{max(target.a, target.b)}"
    return f"qp:{target.connection}"
