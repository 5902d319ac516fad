"""Chunked RDMA-style transfers with multi-NIC registration, failover and rollback.

A transfer is split into chunks that are posted back to back on the active NIC.
Chunk ``i`` lands at the receiver ``alpha + bytes_through_i / bw`` after the
transfer starts; the receiver confirms it on landing and the sender sees the
completion one ``alpha`` later (the ACK trip).  Partially landed chunks hold
garbage until they are overwritten by the retransmission.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable

import numpy as np

from .engine import Engine, Event, EventKind
from .topology import ClusterTopology, HealthMap

MiB = 1 << 20
DEFAULT_CHUNK_SIZE = MiB
DEFAULT_REGISTRATION_COST = 2e-3
GARBAGE = np.int64(-0x5A5A5A5A5A5A5A5)


class NoBackup(RuntimeError):
    """Every NIC in the failover chain is unusable."""


class TransportError(RuntimeError):
    pass


class SenderState(str, Enum):
    NOT_SENT = "NotSent"
    IN_FLIGHT = "InFlight"
    COMPLETED = "Completed"


class ReceiverState(str, Enum):
    NOT_RECEIVED = "NotReceived"
    PARTIAL = "Partial"
    CONFIRMED = "Confirmed"


@dataclass
class TransportConfig:
    chunk_size: int = DEFAULT_CHUNK_SIZE
    alpha: float = 2e-6
    multi_registration: bool = True
    registration_cost: float = DEFAULT_REGISTRATION_COST
    reschedule_latency: float = 10e-6

    def __post_init__(self):
        if self.chunk_size <= 0:
            raise ValueError("chunk_size must be > 0")


class ChunkLedger:
    """Per-transfer record of sender completions and receiver confirmations.

    ``payload`` is the sender's buffer (never modified while the ledger lives);
    ``recv`` is the receiver's landing buffer.  Element ranges are assigned to
    chunks in proportion to their byte ranges, so a small element array can
    stand in for a large logical message.
    """

    def __init__(self, payload: np.ndarray, nbytes: int, chunk_size: int):
        if chunk_size <= 0:
            raise ValueError("chunk_size must be > 0")
        self.payload = np.array(payload, copy=True)
        self.payload.setflags(write=False)
        self.nbytes = int(nbytes)
        self.chunk_size = int(chunk_size)
        self.total_chunks = math.ceil(self.nbytes / self.chunk_size) if self.nbytes > 0 else 0
        k = self.total_chunks
        self.byte_bounds = [min(i * self.chunk_size, self.nbytes) for i in range(k + 1)]
        E = len(self.payload)
        if k:
            self.elem_bounds = [(E * b) // self.nbytes for b in self.byte_bounds]
        else:
            self.elem_bounds = [0]
        self.sender_state = [SenderState.NOT_SENT] * k
        self.receiver_state = [ReceiverState.NOT_RECEIVED] * k
        self.partial_bytes = [0] * k
        self.recv = np.zeros_like(self.payload)
        self.recv.setflags(write=True)
        self.confirm_log: list[tuple[int, bytes]] = []

    def chunk_bytes(self, i: int) -> int:
        return self.byte_bounds[i + 1] - self.byte_bounds[i]

    def elems(self, i: int) -> slice:
        return slice(self.elem_bounds[i], self.elem_bounds[i + 1])

    def land_partial(self, i: int, nbytes: int) -> None:
        size = self.chunk_bytes(i)
        nbytes = max(0, min(int(nbytes), size))
        if nbytes == 0 or self.receiver_state[i] == ReceiverState.CONFIRMED:
            return
        self.receiver_state[i] = ReceiverState.PARTIAL
        self.partial_bytes[i] = nbytes
        sl = self.elems(i)
        cut = sl.start + (sl.stop - sl.start) * nbytes // size
        self.recv[sl.start:cut] = GARBAGE

    def confirm(self, i: int) -> None:
        sl = self.elems(i)
        self.recv[sl] = self.payload[sl]
        self.receiver_state[i] = ReceiverState.CONFIRMED
        self.partial_bytes[i] = self.chunk_bytes(i)
        self.confirm_log.append((i, self.payload[sl].tobytes()))

    def complete(self, i: int) -> None:
        if self.receiver_state[i] != ReceiverState.CONFIRMED:
            raise TransportError(f"completion for chunk {i} before it landed")
        self.sender_state[i] = SenderState.COMPLETED

    @property
    def done(self) -> bool:
        return all(s == SenderState.COMPLETED for s in self.sender_state) and all(
            r == ReceiverState.CONFIRMED for r in self.receiver_state
        )


@dataclass(eq=False)
class ConnectionState:
    """One endpoint of a connection: which NIC it is on and where it can go next."""

    gpu: int
    server: int
    chain: list[int]
    active_nic: int
    registered_nics: set[int] = field(default_factory=set)
    chunks: ChunkLedger | None = None
    peer: "ConnectionState | None" = None
    lazy_registration: bool = False
    registrations_paid: int = 0
    fault_pending: bool = False

    @property
    def position(self) -> int:
        return self.chain.index(self.active_nic)


def register_multi(conn: ConnectionState, nics, topology: ClusterTopology) -> None:
    nics = set(nics)
    own = {d.nic_id for d in topology.server_nics(conn.server)}
    foreign = nics - own
    if foreign:
        raise TransportError(f"cannot register NICs {sorted(foreign)} from another server")
    conn.registered_nics = nics


def open_endpoint(
    topology: ClusterTopology,
    gpu: int,
    chain: list[int],
    cfg: TransportConfig,
    registered: set[int] | None = None,
) -> ConnectionState:
    """Endpoint whose active NIC is the head of ``chain``.

    With multi-registration every chain NIC is registered up front; otherwise
    only the head is, and failover pays ``registration_cost`` on first use.
    """
    ep = ConnectionState(
        gpu=gpu,
        server=topology.server_of_gpu(gpu),
        chain=list(chain),
        active_nic=chain[0],
        lazy_registration=not cfg.multi_registration,
    )
    if registered is None:
        registered = set(chain) if cfg.multi_registration else {chain[0]}
    register_multi(ep, registered, topology)
    return ep


def send_chunks(conn: ConnectionState, data: np.ndarray, chunk_size: int, nbytes: int | None = None) -> ChunkLedger:
    """Create the ledger for a fresh transfer of ``data`` (``nbytes`` logical bytes)."""
    if chunk_size <= 0:
        raise ValueError("chunk_size must be > 0")
    if nbytes is None:
        nbytes = int(np.asarray(data).nbytes)
    ledger = ChunkLedger(np.asarray(data), nbytes, chunk_size)
    conn.chunks = ledger
    if conn.peer is not None:
        conn.peer.chunks = ledger
    return ledger


def rollback(conn: ConnectionState) -> tuple[int, int]:
    """Rewind sender and receiver to a consistent point.

    Returns ``(sender_resume, receiver_floor)``: the first chunk without a
    sender completion and the last confirmed chunk (``-1`` if none).  In-flight
    chunks go back to NotSent and partial receives to NotReceived.
    """
    ledger = conn.chunks
    if ledger is None:
        raise TransportError("rollback with no transfer on the connection")
    if not conn.fault_pending:
        raise TransportError("rollback with no failure pending")
    conn.fault_pending = False
    k = ledger.total_chunks
    resume = next((i for i in range(k) if ledger.sender_state[i] != SenderState.COMPLETED), k)
    floor = max((i for i in range(k) if ledger.receiver_state[i] == ReceiverState.CONFIRMED), default=-1)
    for i in range(k):
        if ledger.sender_state[i] == SenderState.IN_FLIGHT:
            ledger.sender_state[i] = SenderState.NOT_SENT
        if ledger.receiver_state[i] == ReceiverState.PARTIAL:
            ledger.receiver_state[i] = ReceiverState.NOT_RECEIVED
            ledger.partial_bytes[i] = 0
    return resume, floor


def next_healthy(conn: ConnectionState, health: HealthMap, peer_nic: int | None = None) -> int:
    """First chain NIC, other than the active one, that is healthy and usable.

    NICs passed over earlier are eligible again once health marks them
    recovered, so the result is always the first healthy element of the chain.
    """
    for nic in conn.chain:
        if nic == conn.active_nic or not health.nic_ok(nic):
            continue
        if peer_nic is not None and not health.link_ok(nic, peer_nic):
            continue
        if nic not in conn.registered_nics and not conn.lazy_registration:
            continue
        return nic
    raise NoBackup(f"gpu {conn.gpu}: failover chain {conn.chain} exhausted")


def migrate(conn: ConnectionState, health: HealthMap, peer_nic: int | None = None) -> int:
    """Move ``conn`` to the next usable NIC in its chain; returns the new NIC.

    Registration cost is recorded in ``registrations_paid`` when the target was
    not registered in advance.
    """
    nic = next_healthy(conn, health, peer_nic)
    if nic not in conn.registered_nics:
        conn.registered_nics.add(nic)
        conn.registrations_paid += 1
    conn.active_nic = nic
    return nic


class Port:
    """One direction of a NIC (egress or ingress), serving one transfer at a time.

    Reservations are kept as busy intervals; a new transfer takes the earliest
    gap that fits, so a transfer waiting on its far end never blocks others.
    """

    __slots__ = ("nic", "direction", "busy", "bytes")

    def __init__(self, nic: int, direction: str):
        self.nic = nic
        self.direction = direction
        self.busy: list[list] = []  # [start, end, tag], sorted by start
        self.bytes = 0

    @property
    def free_at(self) -> float:
        return max((iv[1] for iv in self.busy), default=0.0)

    def prune(self, now: float) -> None:
        if self.busy and self.busy[0][1] <= now:
            self.busy = [iv for iv in self.busy if iv[1] > now]

    def earliest(self, t: float, dur: float) -> float:
        cand = t
        for s, e, _ in self.busy:
            if e <= cand:
                continue
            if s >= cand + dur:
                break
            cand = e
        return cand

    def reserve(self, start: float, dur: float, tag) -> None:
        iv = [start, start + dur, tag]
        i = len(self.busy)
        while i > 0 and self.busy[i - 1][0] > start:
            i -= 1
        self.busy.insert(i, iv)

    def truncate(self, tag, t: float) -> None:
        keep = []
        for iv in self.busy:
            if iv[2] is tag:
                if iv[0] >= t:
                    continue
                iv[1] = min(iv[1], t)
            keep.append(iv)
        self.busy = keep


class PortTable:
    def __init__(self):
        self._ports: dict[tuple[int, str], Port] = {}

    def get(self, nic: int, direction: str) -> Port:
        key = (nic, direction)
        port = self._ports.get(key)
        if port is None:
            port = self._ports[key] = Port(nic, direction)
        return port

    def traffic(self) -> dict[int, dict[str, int]]:
        out: dict[int, dict[str, int]] = {}
        for (nic, d), p in sorted(self._ports.items()):
            out.setdefault(nic, {"tx": 0, "rx": 0})[d] = p.bytes
        return out


class Connection:
    """A sender/receiver endpoint pair driven by an :class:`Engine`.

    ``send`` moves one buffer.  ``physical`` is ground-truth health: posting on
    a dead path, or having the path die under an in-flight transfer, freezes
    the ledger (:meth:`interrupt`) and reports to ``fault_sink``.  The fault
    layer later calls :meth:`recover` with the health it has learned.
    """

    def __init__(
        self,
        engine: Engine,
        topology: ClusterTopology,
        sender: ConnectionState,
        receiver: ConnectionState,
        cfg: TransportConfig,
        ports: PortTable | None = None,
        physical: HealthMap | None = None,
        fault_sink: Callable[["Connection", float], None] | None = None,
        name: str = "",
    ):
        self.engine = engine
        self.topology = topology
        self.sender = sender
        self.receiver = receiver
        sender.peer = receiver
        receiver.peer = sender
        self.cfg = cfg
        self.ports = ports if ports is not None else PortTable()
        self.physical = physical if physical is not None else HealthMap()
        self.fault_sink = fault_sink
        self.name = name or f"{sender.gpu}->{receiver.gpu}"
        self.ledger: ChunkLedger | None = None
        self._events: list[Event] = []
        self._callbacks: dict[int, list] = {}
        self._restart_pending = False
        self._window: tuple | None = None
        self.failed = False
        self.history: list[dict] = []
        self.retransmitted_chunks = 0

    def nics(self) -> tuple[int, int]:
        return self.sender.active_nic, self.receiver.active_nic

    def uses(self, nic: int) -> bool:
        return nic in self.nics()

    def rate(self) -> float:
        a, b = self.nics()
        return min(self.topology.nic(a).bandwidth, self.topology.nic(b).bandwidth)

    @property
    def busy(self) -> bool:
        return self.ledger is not None and not self.ledger.done

    # -- data path -------------------------------------------------------
    @property
    def landed(self) -> bool:
        """Every chunk of the current transfer has been confirmed at the receiver."""
        if self._restart_pending:
            return False
        return self.ledger is None or all(r == ReceiverState.CONFIRMED for r in self.ledger.receiver_state)

    def send(
        self,
        data: np.ndarray,
        nbytes: int,
        on_done: Callable[[ChunkLedger], None] | None = None,
        on_landed: Callable[[ChunkLedger], None] | None = None,
    ) -> ChunkLedger:
        """Start a transfer.  ``on_landed`` fires once when the receiver holds
        the whole buffer, ``on_done`` when the sender has every completion.

        A new transfer may start as soon as the previous one has landed; its
        outstanding acknowledgements keep arriving in the background.
        """
        if not self.landed:
            raise TransportError(f"{self.name}: transfer already in progress")
        ledger = send_chunks(self.sender, data, self.cfg.chunk_size, nbytes)
        self.ledger = ledger
        self._callbacks[id(ledger)] = [on_landed, on_done]
        if ledger.total_chunks == 0:
            self._events.append(self.engine.after(self.cfg.alpha, EventKind.CHUNK_COMPLETE,
                                                  lambda ev, L=ledger: self._finish(L),
                                                  label=f"{self.name} empty"))
        elif not self.failed:
            self._post(0)
        return ledger

    def _post(self, first: int) -> None:
        ledger = self.ledger
        assert ledger is not None
        a, b = self.nics()
        if not self.physical.link_ok(a, b):
            now = self.engine.now
            self.failed = True
            self.sender.fault_pending = True
            if self.fault_sink is not None:
                self.fault_sink(self, now)
            return
        now = self.engine.now
        self._events = [e for e in self._events if not e.cancelled and e.time >= now]
        eg, ing = self.ports.get(a, "tx"), self.ports.get(b, "rx")
        rate = self.rate()
        alpha = self.cfg.alpha
        # Ports are decoupled (output-queued switch): the sender may push into
        # the fabric while the receiver's ingress is still draining earlier data.
        base = ledger.byte_bounds[first]
        remaining = ledger.nbytes - base
        dur = remaining / rate
        eg.prune(now)
        ing.prune(now)
        tx_start = eg.earliest(now, dur)
        start = ing.earliest(tx_start, dur)
        tag = object()
        eg.reserve(tx_start, dur, tag)
        ing.reserve(start, dur, tag)
        eg.bytes += remaining
        ing.bytes += remaining
        end = start + alpha + dur
        self._window = (start, rate, alpha, first, end, tx_start, tag)
        L = ledger
        for i in range(first, ledger.total_chunks):
            ledger.sender_state[i] = SenderState.IN_FLIGHT
            land = start + alpha + (ledger.byte_bounds[i + 1] - base) / rate
            if alpha == 0:
                self._events.append(self.engine.at(land, EventKind.CHUNK_COMPLETE,
                                                   lambda ev, i=i: (self._land(L, i), self._ack(L, i)),
                                                   label=f"{self.name} c{i}"))
            else:
                self._events.append(self.engine.at(land, EventKind.CHUNK_COMPLETE,
                                                   lambda ev, i=i: self._land(L, i),
                                                   label=f"{self.name} land c{i}"))
                self._events.append(self.engine.at(land + alpha, EventKind.CHUNK_COMPLETE,
                                                   lambda ev, i=i: self._ack(L, i),
                                                   label=f"{self.name} ack c{i}"))

    def _land(self, L: ChunkLedger, i: int) -> None:
        L.confirm(i)
        cbs = self._callbacks.get(id(L))
        if cbs is not None and cbs[0] is not None and all(r == ReceiverState.CONFIRMED for r in L.receiver_state):
            if L is self.ledger:
                self._window = None
            cb, cbs[0] = cbs[0], None
            cb(L)

    def _ack(self, L: ChunkLedger, i: int) -> None:
        L.complete(i)
        if L.done:
            self._finish(L)

    def _finish(self, L: ChunkLedger) -> None:
        if L is self.ledger:
            self._window = None
        cbs = self._callbacks.pop(id(L), None)
        if cbs is None:
            return
        on_landed, on_done = cbs
        if on_landed is not None:
            on_landed(L)
        if on_done is not None:
            on_done(L)

    # -- fault path ------------------------------------------------------
    def interrupt(self, t: float) -> None:
        """The active path died at ``t``: keep what landed, cancel the rest."""
        if self.failed:
            return
        self.failed = True
        self.sender.fault_pending = True
        for ev in self._events:
            ev.cancel()
        self._events.clear()
        ledger, window = self.ledger, self._window
        self._window = None
        if ledger is None or window is None or self.landed:
            return
        start, rate, alpha, first, end, tx_start, tag = window
        base = ledger.byte_bounds[first]
        remaining = ledger.nbytes - base
        a, b = self.nics()
        landed = min(remaining, max(0, int((t - start - alpha) * rate)))
        pushed = min(remaining, max(0, int((t - tx_start) * rate)))
        eg, ing = self.ports.get(a, "tx"), self.ports.get(b, "rx")
        eg.bytes -= remaining - pushed
        ing.bytes -= remaining - landed
        eg.truncate(tag, t)
        ing.truncate(tag, t)
        for i in range(first, ledger.total_chunks):
            lo = start + alpha + (ledger.byte_bounds[i] - base) / rate
            if ledger.receiver_state[i] != ReceiverState.CONFIRMED and t > lo:
                ledger.land_partial(i, (t - lo) * rate)

    def recover(self, health: HealthMap, force_sender: bool = False) -> float:
        """Roll back, fail over the endpoint(s) that lost their path, resume.

        ``health`` is the learned (post-verdict) health.  Returns the extra
        delay paid for on-demand registration, zero with multi-registration.
        Raises :class:`NoBackup` when a chain runs out.
        """
        self.sender.fault_pending = self.sender.fault_pending or force_sender
        if self.ledger is not None and self.sender.fault_pending:
            resume, floor = rollback(self.sender)
        else:
            self.sender.fault_pending = False
            resume, floor = 0, -1
        before = self.sender.registrations_paid + self.receiver.registrations_paid
        moved = []
        if not health.nic_ok(self.receiver.active_nic):
            moved.append(("receiver", migrate(self.receiver, health)))
        if not health.nic_ok(self.sender.active_nic) or force_sender:
            moved.append(("sender", migrate(self.sender, health, peer_nic=self.receiver.active_nic)))
        elif not health.link_ok(*self.nics()):
            moved.append(("sender", migrate(self.sender, health, peer_nic=self.receiver.active_nic)))
        paid = self.sender.registrations_paid + self.receiver.registrations_paid - before
        extra = paid * self.cfg.registration_cost
        self.history.append({"time": self.engine.now, "resume": resume, "floor": floor,
                             "moved": moved, "registration_delay": extra})
        self.failed = False
        if self.busy:
            self.retransmitted_chunks += self.ledger.total_chunks - resume

            self._restart_pending = True

            def restart(ev, resume=resume):
                self._restart_pending = False
                if not self.failed:
                    self._post(resume)

            self._events.append(self.engine.after(self.cfg.reschedule_latency + extra,
                                                  EventKind.RECOVERY, restart,
                                                  label=f"{self.name} resume@{resume}"))
        return extra
