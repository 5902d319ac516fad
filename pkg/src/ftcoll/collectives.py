"""Ring schedules for the standard collectives and a direct reference oracle.

A schedule is a DAG of point-to-point steps.  Each step moves one byte range
of a named per-GPU buffer (``in``, ``work`` or ``out``) to another GPU and
either copies or reduces it into the destination.  Ranks are global GPU ids.

Buffers hold integer elements standing in for ``D`` logical bytes.  Byte
ranges map to element ranges proportionally, so a schedule can be timed for
a gigabyte message while only a few thousand integers are actually moved.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping, Sequence

import numpy as np

from .transport import DEFAULT_CHUNK_SIZE

PAD_GRANULE = 8  # bytes; one integer element
MAX_PIPELINE_SEGMENTS = 64


class CollectiveKind(str, Enum):
    REDUCE_SCATTER = "ReduceScatter"
    ALL_GATHER = "AllGather"
    BROADCAST = "Broadcast"
    REDUCE = "Reduce"
    ALL_REDUCE = "AllReduce"
    SEND_RECV = "SendRecv"
    ALL_TO_ALL = "AllToAll"


REDUCTIONS = {"sum": np.add, "max": np.maximum, "min": np.minimum}


@dataclass(frozen=True)
class CollectiveRequest:
    """One collective call.  ``D`` is the per-GPU buffer size in bytes.

    For AllGather every rank passes a full-size buffer and contributes its
    own shard; for SendRecv rank ``k`` sends to rank ``k+1`` (wrapping) in
    participant order.
    """

    kind: CollectiveKind
    D: int
    participants: tuple[int, ...]
    reduction: str = "sum"
    channels: int = 1
    root: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", CollectiveKind(self.kind))
        object.__setattr__(self, "participants", tuple(int(p) for p in self.participants))
        if len(set(self.participants)) != len(self.participants):
            raise ValueError("participants must be distinct")
        if len(self.participants) < 2:
            raise ValueError("a collective needs at least 2 participants")
        if self.D < 0:
            raise ValueError("D must be >= 0")
        if self.channels < 1:
            raise ValueError("channels must be >= 1")
        if self.reduction not in REDUCTIONS:
            raise ValueError(f"unknown reduction {self.reduction!r}")
        if self.root is not None and self.root not in self.participants:
            raise ValueError(f"root {self.root} is not a participant")

    @property
    def root_rank(self) -> int:
        return self.participants[0] if self.root is None else self.root


@dataclass(frozen=True)
class Lane:
    """A slice of the message with its own NIC binding (one per server).

    Servers missing from ``nics`` use the NIC whose local index equals the
    lane index modulo the server's NIC count.
    """

    fraction: float
    nics: Mapping[int, int] = field(default_factory=dict)


def equal_lanes(count: int) -> list[Lane]:
    return [Lane(1.0 / count) for _ in range(count)]


@dataclass(frozen=True)
class Step:
    sid: int
    src: int
    dst: int
    src_range: tuple[int, int]
    dst_range: tuple[int, int]
    op: str = "copy"  # "copy" | "reduce" | "noop"
    deps: tuple[int, ...] = ()
    stage: str = ""
    lane: int = 0
    block: int = -1
    src_buf: str = "work"
    dst_buf: str = "work"
    slot: int = 0  # independent pipeline slot within the lane (own connection)

    @property
    def nbytes(self) -> int:
        return self.src_range[1] - self.src_range[0]

    @property
    def local(self) -> bool:
        return self.src == self.dst


@dataclass
class Schedule:
    steps: list[Step]
    ring_order: tuple[int, ...]
    kind: CollectiveKind | str
    participants: tuple[int, ...]
    lanes: list[Lane]
    E: int
    Ep: int
    Dp: int
    reduction: str = "sum"
    root: int | None = None
    meta: dict = field(default_factory=dict)

    def elems(self, rng: tuple[int, int]) -> slice:
        lo, hi = rng
        if self.Dp == 0:
            return slice(0, 0)
        return slice(self.Ep * lo // self.Dp, self.Ep * hi // self.Dp)

    def check(self) -> None:
        """Step ids are dense and every dependency points backwards (a DAG)."""
        for i, st in enumerate(self.steps):
            if st.sid != i:
                raise ValueError(f"step {i} has sid {st.sid}")
            for d in st.deps:
                if not 0 <= d < i:
                    raise ValueError(f"step {i} depends on {d}")


class ScheduleBuilder:
    def __init__(self):
        self.steps: list[Step] = []

    def add(self, src, dst, src_range, dst_range=None, op="copy", deps=(), stage="", lane=0,
            block=-1, src_buf="work", dst_buf="work", slot=0) -> int:
        sid = len(self.steps)
        dst_range = src_range if dst_range is None else dst_range
        if src_range[1] - src_range[0] != dst_range[1] - dst_range[0]:
            raise ValueError("source and destination ranges differ in size")
        self.steps.append(Step(sid, int(src), int(dst), tuple(src_range), tuple(dst_range), op,
                               tuple(sorted(set(deps))), stage, lane, block, src_buf, dst_buf, slot))
        return sid

    def barrier(self, gpu: int, deps: Iterable[int], stage: str = "barrier") -> int:
        return self.add(gpu, gpu, (0, 0), op="noop", deps=tuple(deps), stage=stage)


def padded_layout(E: int, D: int, units: int) -> tuple[int, int]:
    """Pad element and byte counts up to a multiple of ``units`` granules."""
    Ep = math.ceil(E / units) * units if E else 0
    Dp = math.ceil(D / (units * PAD_GRANULE)) * units * PAD_GRANULE if D else 0
    return Ep, Dp


def lane_cuts(lo: int, hi: int, lanes: Sequence[Lane]) -> list[tuple[int, int]]:
    """Split ``[lo, hi)`` into consecutive pieces sized by lane fractions."""
    total = sum(l.fraction for l in lanes)
    acc = 0.0
    bounds = [lo]
    for l in lanes[:-1]:
        acc += l.fraction
        bounds.append(lo + int(round((hi - lo) * acc / total)))
    bounds.append(hi)
    return [(bounds[i], bounds[i + 1]) for i in range(len(lanes))]


def even_cuts(lo: int, hi: int, parts: int) -> list[tuple[int, int]]:
    return [(lo + (hi - lo) * k // parts, lo + (hi - lo) * (k + 1) // parts) for k in range(parts)]


def _entry(b: ScheduleBuilder, ranks, deps_in) -> dict[int, tuple[int, ...]]:
    """Per-rank dependency tuple for the first touch of a sub-collective."""
    out = {}
    for r in ranks:
        d = tuple(deps_in.get(r, ())) if deps_in else ()
        if len(d) > 1:
            d = (b.barrier(r, d),)
        out[r] = d
    return out


# -- ring building blocks -----------------------------------------------------
# Each returns {rank: tuple of step ids after which the rank's result is final}.

def ring_slices(unit_bytes: int, segment_bytes: int, max_slices: int = 4) -> int:
    """How many independent pipeline slices each lane's ring is cut into."""
    if unit_bytes <= 0:
        return 1
    return max(1, min(max_slices, math.ceil(16 * unit_bytes / max(1, segment_bytes))))


def _ring_phase(b, ring, units, shard_of, prev, entry, op, offset, stage, lane, done, record_all, slot=0):
    """N-1 rounds of one ring phase for a single lane slice.

    ``offset`` is 1 for reduce-scatter (send the block owned one hop back)
    and 0 for all-gather (send the block just received).
    """
    N = len(ring)
    for r in range(N - 1):
        cur = {}
        for i in range(N):
            blk = shard_of[(i - r - offset) % N]
            nxt = (i + 1) % N
            deps = prev[i] + (entry[ring[nxt]] if r == 0 else ())
            cur[nxt] = (b.add(ring[i], ring[nxt], units[blk], op=op, deps=deps,
                              stage=stage, lane=lane, block=blk, slot=slot),)
            if record_all:
                done[ring[nxt]].extend(cur[nxt])
        prev = cur
    return prev


def _ring(b, ring, region, lanes, deps_in, phases, shard_of, stage, lane_base, segment_bytes):
    N = len(ring)
    shards = even_cuts(*region, N)
    shard_of = list(range(N)) if shard_of is None else list(shard_of)
    entry = _entry(b, ring, deps_in)
    done: dict[int, list[int]] = {r: [] for r in ring}
    lane_units = [lane_cuts(*shards[k], lanes) for k in range(N)]
    for L in range(len(lanes)):
        S = ring_slices(max(lane_units[k][L][1] - lane_units[k][L][0] for k in range(N)), segment_bytes)
        sliced = [even_cuts(*lane_units[k][L], S) for k in range(N)]
        for sl in range(S):
            units = [sliced[k][sl] for k in range(N)]
            prev = {i: entry[ring[i]] for i in range(N)}
            for ph in phases:
                if ph == "rs":
                    prev = _ring_phase(b, ring, units, shard_of, prev, entry, "reduce", 1,
                                       f"{stage}.rs" if len(phases) > 1 else stage, lane_base + L, done, False, sl)
                else:
                    prev = _ring_phase(b, ring, units, shard_of, prev, entry, "copy", 0,
                                       f"{stage}.ag" if len(phases) > 1 else stage, lane_base + L, done, True, sl)
            if phases[-1] == "rs":
                for i in range(N):
                    done[ring[i]].extend(prev[i])
    for r in ring:
        if not done[r]:
            done[r].extend(entry[r])
    return {r: tuple(v) for r, v in done.items()}


def ring_reduce_scatter(b, ring, region, lanes, deps_in=None, shard_of=None, stage="rs", lane_base=0,
                        segment_bytes=DEFAULT_CHUNK_SIZE):
    """Ring position ``i`` ends with the fully reduced shard ``shard_of[i]``."""
    return _ring(b, ring, region, lanes, deps_in, ("rs",), shard_of, stage, lane_base, segment_bytes)


def ring_all_gather(b, ring, region, lanes, deps_in=None, shard_of=None, stage="ag", lane_base=0,
                    segment_bytes=DEFAULT_CHUNK_SIZE):
    """Ring position ``i`` starts holding shard ``shard_of[i]``; all end with every shard."""
    return _ring(b, ring, region, lanes, deps_in, ("ag",), shard_of, stage, lane_base, segment_bytes)


def ring_all_reduce(b, ring, region, lanes, deps_in=None, stage="ar", lane_base=0,
                    segment_bytes=DEFAULT_CHUNK_SIZE):
    """Reduce-scatter then all-gather, chained per lane slice with no barrier in between."""
    return _ring(b, ring, region, lanes, deps_in, ("rs", "ag"), None, stage, lane_base, segment_bytes)


def pipeline_segments(nbytes: int, segment_bytes: int) -> int:
    return max(1, min(MAX_PIPELINE_SEGMENTS, math.ceil(nbytes / max(1, segment_bytes))))


def chain_broadcast(b, chain, region, lanes, deps_in=None, segment_bytes=DEFAULT_CHUNK_SIZE,
                    stage="bcast", lane_base=0, op="copy", src_buf="work", dst_buf="work"):
    """Pipelined forward along ``chain`` starting at ``chain[0]``."""
    entry = _entry(b, chain, deps_in)
    P = pipeline_segments(region[1] - region[0], segment_bytes)
    segs = even_cuts(*region, P)
    done: dict[int, list[int]] = {r: [] for r in chain}
    done[chain[0]].extend(entry[chain[0]])
    for L, lane in enumerate(lanes):
        for p, seg in enumerate(segs):
            unit = lane_cuts(*seg, lanes)[L]
            prev = entry[chain[0]]
            for j in range(len(chain) - 1):
                deps = prev + entry[chain[j + 1]]
                sid = b.add(chain[j], chain[j + 1], unit, op=op, deps=deps, stage=stage,
                            lane=lane_base + L, block=p,
                            src_buf=src_buf if j == 0 else dst_buf, dst_buf=dst_buf)
                prev = (sid,)
                done[chain[j + 1]].append(sid)
    return {r: tuple(v) for r, v in done.items()}


def chain_reduce(b, chain, region, lanes, deps_in=None, segment_bytes=DEFAULT_CHUNK_SIZE,
                 stage="reduce", lane_base=0):
    """Pipelined accumulation along ``chain``; the result lands on ``chain[-1]``."""
    entry = _entry(b, chain, deps_in)
    P = pipeline_segments(region[1] - region[0], segment_bytes)
    segs = even_cuts(*region, P)
    done: dict[int, list[int]] = {r: list(entry[r]) for r in chain}
    for L, lane in enumerate(lanes):
        for p, seg in enumerate(segs):
            unit = lane_cuts(*seg, lanes)[L]
            prev = entry[chain[0]]
            for j in range(len(chain) - 1):
                deps = prev + entry[chain[j + 1]]
                sid = b.add(chain[j], chain[j + 1], unit, op="reduce", deps=deps, stage=stage,
                            lane=lane_base + L, block=p)
                prev = (sid,)
                done[chain[j]].append(sid)
            done[chain[-1]].extend(prev)
    return {r: tuple(v) for r, v in done.items()}


# -- top-level schedules ------------------------------------------------------

def ring_schedule(
    req: CollectiveRequest,
    ring_order: Sequence[int] | None = None,
    lanes: Sequence[Lane] | None = None,
    E: int | None = None,
    segment_bytes: int = DEFAULT_CHUNK_SIZE,
) -> Schedule:
    """Build the step DAG for ``req`` over ``ring_order``.

    ``E`` is the number of integer elements each rank holds (defaults to one
    per 8 bytes of ``D``, at least one).  ``lanes`` defaults to
    ``req.channels`` equal lanes.
    """
    parts = req.participants
    ring = tuple(parts if ring_order is None else ring_order)
    if sorted(ring) != sorted(parts):
        raise ValueError("ring_order must be a permutation of the participants")
    N = len(ring)
    lanes = list(equal_lanes(req.channels) if lanes is None else lanes)
    if not lanes:
        raise ValueError("need at least one lane")
    if E is None:
        E = max(1, req.D // PAD_GRANULE) if req.D else 0
    Ep, Dp = padded_layout(E, req.D, N * len(lanes))
    region = (0, Dp)
    b = ScheduleBuilder()
    kind = req.kind
    pos_of = {r: i for i, r in enumerate(ring)}
    part_idx = {r: k for k, r in enumerate(parts)}

    if kind == CollectiveKind.REDUCE_SCATTER:
        # the block that finishes at position i is shard_of[i]: each rank keeps its own shard
        shard_of = [part_idx[ring[i]] for i in range(N)]
        ring_reduce_scatter(b, ring, region, lanes, shard_of=shard_of, segment_bytes=segment_bytes)
    elif kind == CollectiveKind.ALL_GATHER:
        shard_of = [part_idx[ring[i]] for i in range(N)]
        ring_all_gather(b, ring, region, lanes, shard_of=shard_of, segment_bytes=segment_bytes)
    elif kind == CollectiveKind.ALL_REDUCE:
        ring_all_reduce(b, ring, region, lanes, segment_bytes=segment_bytes)
    elif kind == CollectiveKind.BROADCAST:
        p0 = pos_of[req.root_rank]
        chain = [ring[(p0 + j) % N] for j in range(N)]
        chain_broadcast(b, chain, region, lanes, segment_bytes=segment_bytes)
    elif kind == CollectiveKind.REDUCE:
        p0 = pos_of[req.root_rank]
        chain = [ring[(p0 + 1 + j) % N] for j in range(N)]
        chain_reduce(b, chain, region, lanes, segment_bytes=segment_bytes)
    elif kind == CollectiveKind.SEND_RECV:
        for k, src in enumerate(parts):
            dst = parts[(k + 1) % N]
            for L, unit in enumerate(lane_cuts(0, Dp, lanes)):
                b.add(src, dst, unit, op="copy", stage="p2p", lane=L, src_buf="in", dst_buf="out")
    elif kind == CollectiveKind.ALL_TO_ALL:
        shards = even_cuts(0, Dp, N)
        for k, src in enumerate(parts):
            for j, dst in enumerate(parts):
                for L, (s_unit, d_unit) in enumerate(zip(lane_cuts(*shards[j], lanes),
                                                         lane_cuts(*shards[k], lanes))):
                    b.add(src, dst, s_unit, d_unit, op="copy", stage="p2p", lane=L,
                          block=j, src_buf="in", dst_buf="out")
    else:  # pragma: no cover
        raise ValueError(f"unsupported kind {kind}")

    sched = Schedule(b.steps, ring, kind, parts, lanes, E, Ep, Dp, req.reduction, req.root_rank)
    return sched


def shard_bounds(E: int, Ep: int, N: int, k: int) -> slice:
    return slice(min(E, k * Ep // N), min(E, (k + 1) * Ep // N))


def _pad(x: np.ndarray, Ep: int) -> np.ndarray:
    out = np.zeros(Ep, dtype=x.dtype)
    out[: len(x)] = x
    return out


def oracle(req: CollectiveRequest, inputs: Mapping[int, np.ndarray], Ep: int | None = None) -> dict[int, np.ndarray]:
    """Expected result on every rank that has one, computed directly.

    ReduceScatter ranks get only their own shard; Reduce only defines the root.
    Shard boundaries follow the padded layout of :func:`ring_schedule`
    (``Ep`` elements, split evenly among participants).
    """
    parts = req.participants
    N = len(parts)
    arrays = [np.asarray(inputs[r]) for r in parts]
    E = len(arrays[0])
    if any(len(a) != E for a in arrays):
        raise ValueError("all ranks must hold the same number of elements")
    if Ep is None:
        Ep = padded_layout(E, req.D, N * req.channels)[0]
    ufunc = REDUCTIONS[req.reduction]
    kind = req.kind

    def total():
        acc = arrays[0].copy()
        for a in arrays[1:]:
            acc = ufunc(acc, a)
        return acc

    if kind == CollectiveKind.ALL_REDUCE:
        t = total()
        return {r: t.copy() for r in parts}
    if kind == CollectiveKind.REDUCE_SCATTER:
        t = total()
        return {r: t[shard_bounds(E, Ep, N, k)].copy() for k, r in enumerate(parts)}
    if kind == CollectiveKind.ALL_GATHER:
        out = np.zeros(E, dtype=arrays[0].dtype)
        for k in range(N):
            sl = shard_bounds(E, Ep, N, k)
            out[sl] = arrays[k][sl]
        return {r: out.copy() for r in parts}
    if kind == CollectiveKind.BROADCAST:
        src = np.asarray(inputs[req.root_rank])
        return {r: src.copy() for r in parts}
    if kind == CollectiveKind.REDUCE:
        return {req.root_rank: total()}
    if kind == CollectiveKind.SEND_RECV:
        return {parts[(k + 1) % N]: arrays[k].copy() for k in range(N)}
    if kind == CollectiveKind.ALL_TO_ALL:
        padded = [_pad(a, Ep) for a in arrays]
        res = {}
        for j, r in enumerate(parts):
            out = np.zeros(Ep, dtype=arrays[0].dtype)
            for k in range(N):
                out[k * Ep // N:(k + 1) * Ep // N] = padded[k][j * Ep // N:(j + 1) * Ep // N]
            res[r] = out[:E]
        return res
    raise ValueError(f"unsupported kind {kind}")  # pragma: no cover


def results(req: CollectiveRequest, sched: Schedule, buffers: Mapping[int, Mapping[str, np.ndarray]]) -> dict[int, np.ndarray]:
    """Pull each rank's result out of executed buffers in oracle form."""
    parts = req.participants
    N = len(parts)
    E, Ep = sched.E, sched.Ep
    kind = req.kind
    if kind in (CollectiveKind.SEND_RECV, CollectiveKind.ALL_TO_ALL):
        return {r: buffers[r]["out"][:E].copy() for r in parts}
    if kind == CollectiveKind.REDUCE_SCATTER:
        return {r: buffers[r]["work"][shard_bounds(E, Ep, N, k)].copy() for k, r in enumerate(parts)}
    if kind == CollectiveKind.REDUCE:
        return {req.root_rank: buffers[req.root_rank]["work"][:E].copy()}
    return {r: buffers[r]["work"][:E].copy() for r in parts}
