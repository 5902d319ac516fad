"""Scenario files: what to simulate, with which faults and which strategy.

A scenario is YAML (or JSON, which YAML also reads).  Only ``topology`` is
required; everything else has a default.  Example::

    topology: {n: 2, g: 8, nic_bandwidth: 50e9}
    workload:
      - {kind: AllReduce, size: 1073741824, time: 0.0, channels: 8}
    faults:
      - {time: 0.001, nic: [1, 3]}            # server 1, local NIC 3
      - {time: 0.002, link: [[0, 2], [1, 2]], permanent: false, recovery_time: 0.5}
    strategy: balance
    cost: {alpha: 2.0e-6, beta: 50.0e9}
    knobs: {chunk_size: 1048576, oob_latency: 0.0005, probe_timeout: 0.005,
            multi_registration: true, elements: 4096, bandwidth_only: false}
    monte_carlo: {k: [1, 2, 3], trials: 50, seed: 0, size: 1073741824}
    seed: 0

Errors carry the dotted path of the offending field.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .collectives import CollectiveKind, REDUCTIONS
from .cost_model import DEFAULT_ALPHA, CostParams
from .faults import FAILURE_CLASSES, FaultEvent, LinkTarget, NicTarget, TransportTarget
from .topology import NicSpec, TopologyError, TopologySpec, build_topology, uniform_spec
from .transport import DEFAULT_CHUNK_SIZE

GiB = 1 << 30
STRATEGIES = ("auto", "hot_repair_only", "balance", "two_stage", "recursive")
DEFAULT_WORKLOAD_SIZE = GiB


class ScenarioError(ValueError):
    def __init__(self, problems: list[tuple[str, str]]):
        self.problems = problems
        super().__init__("; ".join(f"{path}: {msg}" for path, msg in problems))


@dataclass(frozen=True)
class WorkloadItem:
    kind: CollectiveKind
    size: int
    time: float = 0.0
    participants: tuple[int, ...] | None = None
    channels: int | None = None
    reduction: str = "sum"
    root: int | None = None


@dataclass(frozen=True)
class MonteCarlo:
    k: tuple[int, ...]
    trials: int
    seed: int = 0
    size: int = DEFAULT_WORKLOAD_SIZE


@dataclass(frozen=True)
class Knobs:
    chunk_size: int = DEFAULT_CHUNK_SIZE
    oob_latency: float = 0.5e-3
    probe_timeout: float = 5e-3
    oob_enabled: bool = True
    multi_registration: bool = True
    elements: int = 4096
    bandwidth_only: bool = False


@dataclass
class Scenario:
    topology: TopologySpec
    workload: list[WorkloadItem]
    faults: list[FaultEvent] = field(default_factory=list)
    monte_carlo: MonteCarlo | None = None
    strategy: str = "auto"
    cost: CostParams = field(default_factory=CostParams)
    knobs: Knobs = field(default_factory=Knobs)
    seed: int = 0
    name: str = "scenario"

    def without_faults(self) -> "Scenario":
        return Scenario(self.topology, list(self.workload), [], self.monte_carlo, self.strategy,
                        self.cost, self.knobs, self.seed, self.name)


class _Checker:
    def __init__(self):
        self.problems: list[tuple[str, str]] = []

    def fail(self, path: str, msg: str):
        self.problems.append((path, msg))

    def num(self, d: dict, key: str, path: str, default=None, kind=float, lo=None, lo_strict=False):
        if key not in d or d[key] is None:
            return default
        v = d[key]
        if isinstance(v, bool) or not isinstance(v, (int, float, str)):
            self.fail(f"{path}.{key}", f"expected a number, got {v!r}")
            return default
        try:
            v = kind(float(v)) if kind is int and isinstance(v, (float, str)) else kind(v)
        except (TypeError, ValueError):
            self.fail(f"{path}.{key}", f"expected a number, got {d[key]!r}")
            return default
        if lo is not None and (v <= lo if lo_strict else v < lo):
            self.fail(f"{path}.{key}", f"must be {'>' if lo_strict else '>='} {lo}, got {v}")
            return default
        return v

    def flag(self, d: dict, key: str, path: str, default: bool) -> bool:
        v = d.get(key, default)
        if not isinstance(v, bool):
            self.fail(f"{path}.{key}", f"expected true or false, got {v!r}")
            return default
        return v

    def mapping(self, v, path: str) -> dict:
        if v is None:
            return {}
        if not isinstance(v, dict):
            self.fail(path, f"expected a mapping, got {type(v).__name__}")
            return {}
        return v

    def unknown(self, d: dict, allowed, path: str):
        for k in d:
            if k not in allowed:
                self.fail(f"{path}.{k}" if path else str(k), "unknown field")


def _topology(c: _Checker, raw) -> TopologySpec | None:
    t = c.mapping(raw, "topology")
    if raw is None:
        c.fail("topology", "required")
        return None
    c.unknown(t, {"n", "g", "nics_per_server", "nic_bandwidth", "numa_domains", "nvlink_bw",
                  "cpu_interconnect_bw", "pcie_bw", "nics"}, "topology")
    n = c.num(t, "n", "topology", kind=int, lo=2)
    g = c.num(t, "g", "topology", kind=int, lo=1)
    if n is None or g is None:
        if "n" not in t:
            c.fail("topology.n", "required")
        if "g" not in t:
            c.fail("topology.g", "required")
        return None
    links = {}
    for k in ("nvlink_bw", "cpu_interconnect_bw", "pcie_bw"):
        v = c.num(t, k, "topology", lo=0, lo_strict=True)
        if v is not None:
            links[k] = v
    if "nics" in t:
        rows = t["nics"]
        if not isinstance(rows, list) or not rows:
            c.fail("topology.nics", "expected a non-empty list")
            return None
        if not isinstance(rows[0], list):
            rows = [rows] * n
        if len(rows) != n:
            c.fail("topology.nics", f"expected {n} per-server lists, got {len(rows)}")
            return None
        nics = []
        for s, row in enumerate(rows):
            out = []
            for k, spec in enumerate(row):
                p = f"topology.nics[{s}][{k}]"
                spec = c.mapping(spec, p)
                try:
                    out.append(NicSpec(rail=int(spec.get("rail", k)), numa=int(spec.get("numa", 0)),
                                       bandwidth=float(spec.get("bandwidth", 50e9)),
                                       affinity_gpu=int(spec.get("affinity_gpu", k * g // len(row))),
                                       pcie_hops={int(a): int(b) for a, b in
                                                  (spec.get("pcie_hops") or {j: 1 for j in range(g)}).items()}))
                except (TypeError, ValueError, AttributeError) as e:
                    c.fail(p, str(e))
            nics.append(out)
        base = uniform_spec(n, g, len(nics[0]) or None)
        spec = TopologySpec(n=n, g=g, nics=nics, gpu_numa=base.gpu_numa, **links)
    else:
        m = c.num(t, "nics_per_server", "topology", kind=int, lo=1)
        bw = c.num(t, "nic_bandwidth", "topology", default=50e9, lo=0, lo_strict=True)
        numa = c.num(t, "numa_domains", "topology", default=2, kind=int, lo=1)
        spec = uniform_spec(n, g, m, bw, numa, **links)
    try:
        build_topology(spec)
    except TopologyError as e:
        c.fail("topology", str(e))
        return None
    return spec


def _nic_id(c: _Checker, v, path: str, spec: TopologySpec) -> int | None:
    if isinstance(v, int) and not isinstance(v, bool):
        return v
    if isinstance(v, (list, tuple)) and len(v) == 2 and all(isinstance(x, int) for x in v):
        s, k = v
        if not 0 <= s < spec.n or not 0 <= k < len(spec.nics[s]):
            c.fail(path, f"no NIC {k} on server {s}")
            return None
        return sum(len(spec.nics[x]) for x in range(s)) + k
    c.fail(path, f"expected a NIC id or [server, index], got {v!r}")
    return None


def _faults(c: _Checker, raw, spec: TopologySpec | None) -> list[FaultEvent]:
    if raw is None:
        return []
    if not isinstance(raw, list):
        c.fail("faults", "expected a list")
        return []
    out = []
    total = sum(len(r) for r in spec.nics) if spec else 0
    for i, f in enumerate(raw):
        p = f"faults[{i}]"
        f = c.mapping(f, p)
        c.unknown(f, {"time", "nic", "link", "connection", "permanent", "recovery_time", "class"}, p)
        t = c.num(f, "time", p, lo=0)
        if t is None:
            c.fail(f"{p}.time", "required")
            continue
        targets = [k for k in ("nic", "link", "connection") if k in f]
        if len(targets) != 1:
            c.fail(p, "exactly one of nic, link, connection is required")
            continue
        target = None
        if "nic" in f and spec:
            nid = _nic_id(c, f["nic"], f"{p}.nic", spec)
            if nid is not None and not 0 <= nid < total:
                c.fail(f"{p}.nic", f"unknown NIC {nid}")
            elif nid is not None:
                target = NicTarget(nid)
        elif "link" in f and spec:
            ends = f["link"]
            if not isinstance(ends, list) or len(ends) != 2:
                c.fail(f"{p}.link", "expected two NICs")
            else:
                a = _nic_id(c, ends[0], f"{p}.link[0]", spec)
                b = _nic_id(c, ends[1], f"{p}.link[1]", spec)
                if a is not None and b is not None:
                    target = LinkTarget(a, b)
        elif "connection" in f:
            target = TransportTarget(str(f["connection"]))
        rec = c.num(f, "recovery_time", p, lo=0)
        permanent = c.flag(f, "permanent", p, rec is None)
        cls = f.get("class")
        if cls is not None and cls not in FAILURE_CLASSES:
            c.fail(f"{p}.class", f"unsupported failure class {cls!r}")
            cls = None
        if target is None:
            continue
        try:
            out.append(FaultEvent(t, target, permanent, rec, cls))
        except ValueError as e:
            c.fail(p, str(e))
    return out


def _workload(c: _Checker, raw, spec: TopologySpec | None) -> list[WorkloadItem]:
    if raw is None:
        return [WorkloadItem(CollectiveKind.ALL_REDUCE, DEFAULT_WORKLOAD_SIZE)]
    if not isinstance(raw, list) or not raw:
        c.fail("workload", "expected a non-empty list")
        return []
    out = []
    gpus = spec.n * spec.g if spec else 0
    for i, w in enumerate(raw):
        p = f"workload[{i}]"
        w = c.mapping(w, p)
        c.unknown(w, {"kind", "size", "time", "participants", "channels", "reduction", "root"}, p)
        try:
            kind = CollectiveKind(w.get("kind", "AllReduce"))
        except ValueError:
            c.fail(f"{p}.kind", f"unknown collective {w.get('kind')!r}; one of {[k.value for k in CollectiveKind]}")
            continue
        size = c.num(w, "size", p, default=DEFAULT_WORKLOAD_SIZE, kind=int, lo=0)
        t = c.num(w, "time", p, default=0.0, lo=0)
        ch = c.num(w, "channels", p, kind=int, lo=1)
        root = c.num(w, "root", p, kind=int, lo=0)
        red = w.get("reduction", "sum")
        if red not in REDUCTIONS:
            c.fail(f"{p}.reduction", f"unknown reduction {red!r}")
            red = "sum"
        parts = w.get("participants")
        if parts is not None and parts != "all":
            if not isinstance(parts, list) or not all(isinstance(x, int) and 0 <= x < gpus for x in parts):
                c.fail(f"{p}.participants", "expected 'all' or a list of GPU ids")
                parts = None
            else:
                parts = tuple(parts)
        else:
            parts = None
        out.append(WorkloadItem(kind, size, t, parts, ch, red, root))
    return out


def _monte_carlo(c: _Checker, raw) -> MonteCarlo | None:
    if raw is None:
        return None
    m = c.mapping(raw, "monte_carlo")
    c.unknown(m, {"k", "trials", "seed", "size"}, "monte_carlo")
    ks = m.get("k", 1)
    if isinstance(ks, int) and not isinstance(ks, bool):
        ks = list(range(0, ks + 1))
    if not isinstance(ks, list) or not all(isinstance(x, int) and x >= 0 for x in ks):
        c.fail("monte_carlo.k", "expected a failure count or a list of counts")
        ks = [0]
    trials = c.num(m, "trials", "monte_carlo", default=50, kind=int, lo=1)
    seed = c.num(m, "seed", "monte_carlo", default=0, kind=int)
    size = c.num(m, "size", "monte_carlo", default=DEFAULT_WORKLOAD_SIZE, kind=int, lo=0)
    return MonteCarlo(tuple(ks), trials or 1, seed, size)


def scenario_from_dict(raw: Any, name: str = "scenario") -> Scenario:
    c = _Checker()
    if not isinstance(raw, dict):
        raise ScenarioError([("", "scenario must be a mapping")])
    c.unknown(raw, {"name", "topology", "workload", "faults", "monte_carlo", "strategy", "cost", "knobs", "seed"}, "")
    spec = _topology(c, raw.get("topology"))
    workload = _workload(c, raw.get("workload"), spec)
    faults = _faults(c, raw.get("faults"), spec)
    mc = _monte_carlo(c, raw.get("monte_carlo"))
    strategy = raw.get("strategy", "auto")
    if strategy not in STRATEGIES:
        c.fail("strategy", f"unknown strategy {strategy!r}; one of {list(STRATEGIES)}")
    cost_raw = c.mapping(raw.get("cost"), "cost")
    c.unknown(cost_raw, {"alpha", "beta"}, "cost")
    alpha = c.num(cost_raw, "alpha", "cost", default=DEFAULT_ALPHA, lo=0)
    beta = c.num(cost_raw, "beta", "cost", default=50e9, lo=0, lo_strict=True)
    kr = c.mapping(raw.get("knobs"), "knobs")
    c.unknown(kr, {"chunk_size", "oob_latency", "probe_timeout", "oob_enabled", "multi_registration",
                   "elements", "bandwidth_only"}, "knobs")
    d = Knobs()
    knobs = Knobs(
        chunk_size=c.num(kr, "chunk_size", "knobs", default=d.chunk_size, kind=int, lo=1),
        oob_latency=c.num(kr, "oob_latency", "knobs", default=d.oob_latency, lo=0),
        probe_timeout=c.num(kr, "probe_timeout", "knobs", default=d.probe_timeout, lo=0),
        oob_enabled=c.flag(kr, "oob_enabled", "knobs", d.oob_enabled),
        multi_registration=c.flag(kr, "multi_registration", "knobs", d.multi_registration),
        elements=c.num(kr, "elements", "knobs", default=d.elements, kind=int, lo=1),
        bandwidth_only=c.flag(kr, "bandwidth_only", "knobs", d.bandwidth_only),
    )
    seed = c.num(raw, "seed", "", default=0, kind=int)
    if c.problems:
        raise ScenarioError(c.problems)
    return Scenario(spec, workload, faults, mc, strategy, CostParams(alpha, beta), knobs, seed,
                    str(raw.get("name", name)))


def parse_scenario(path: str | Path) -> Scenario:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as e:
        raise ScenarioError([(str(p), f"cannot read: {e.strerror}")]) from e
    try:
        raw = json.loads(text) if p.suffix == ".json" else yaml.safe_load(text)
    except (yaml.YAMLError, json.JSONDecodeError) as e:
        raise ScenarioError([(str(p), f"not well-formed: {e}")]) from e
    return scenario_from_dict(raw, name=p.stem)
