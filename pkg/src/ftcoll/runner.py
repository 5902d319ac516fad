"""Run scenarios end to end and write reports.

``run`` executes the workload twice, once with the scenario's faults and once
without, and reports each collective's slowdown against the clean run.
``sweep`` places ``k`` random NIC failures many times over and reports the
spread of the predicted slowdown for each ``k``.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .allreduce_opt import (
    PartitionInputs,
    PlanError,
    Strategy,
    build_allreduce_schedule,
    degraded_server,
    optimal_partition,
    plan_two_stage,
    predict_strategies,
    recursive_plan,
    select_strategy,
)
from .balance import NoHealthyNic, channel_bindings, hot_repair_nic
from .collectives import CollectiveKind, CollectiveRequest, oracle, results, ring_schedule
from .cost_model import CostParams
from .engine import Engine
from .executor import Fabric, execute
from .faults import FaultConfig
from .scenario import Scenario, WorkloadItem
from .topology import ClusterTopology, HealthMap, build_topology
from .transport import NoBackup, TransportConfig

INPUT_RANGE = 1000


@dataclass
class Report:
    kind: str  # "run" | "sweep"
    scenario: str
    seed: int
    strategy: str
    collectives: list[dict] = field(default_factory=list)
    traffic: list[dict] = field(default_factory=list)
    detections: list[dict] = field(default_factory=list)
    sweep: list[dict] = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "scenario": self.scenario,
            "seed": self.seed,
            "strategy": self.strategy,
            "summary": self.summary,
            "collectives": self.collectives,
            "sweep": self.sweep,
            "traffic": self.traffic,
            "detections": self.detections,
            "notes": self.notes,
        }

    def to_json(self) -> str:
        return json.dumps(_clean(self.to_dict()), indent=2) + "\n"


def _clean(x):
    """Make a report JSON-safe: non-finite floats become null, numpy scalars plain."""
    if isinstance(x, dict):
        return {str(k): _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return x if math.isfinite(x) else None
    return x


# -- single runs ----------------------------------------------------------------

def _fabric(scn: Scenario, topo: ClusterTopology) -> Fabric:
    k = scn.knobs
    tcfg = TransportConfig(chunk_size=k.chunk_size, alpha=0.0 if k.bandwidth_only else scn.cost.alpha,
                           multi_registration=k.multi_registration)
    fcfg = FaultConfig(oob_enabled=k.oob_enabled, oob_latency=k.oob_latency, probe_timeout=k.probe_timeout)
    return Fabric(topo, engine=Engine(), transport=tcfg, fault_cfg=fcfg)


def _request(item: WorkloadItem, topo: ClusterTopology) -> CollectiveRequest:
    parts = item.participants or tuple(range(topo.num_gpus))
    channels = item.channels or max(len(r) for r in topo.nics)
    return CollectiveRequest(item.kind, item.size, parts, item.reduction, channels, item.root)


def _servers(topo: ClusterTopology, parts) -> list[int]:
    return sorted({topo.server_of_gpu(r) for r in parts})


def build_schedule(strategy: str, req: CollectiveRequest, topo: ClusterTopology, health: HealthMap,
                   cost: CostParams, E: int, segment_bytes: int):
    """Pick the concrete strategy for ``req`` and build its schedule.

    Returns ``(schedule, chosen strategy name, plan dict or None, notes)``.
    """
    notes: list[str] = []
    servers = _servers(topo, req.participants)
    full = len(req.participants) == topo.num_gpus
    is_ar = req.kind is CollectiveKind.ALL_REDUCE
    chosen = strategy
    if strategy == "auto":
        pick = select_strategy(req, topo, health, cost) if full else Strategy.BALANCE
        chosen = "recursive" if pick is Strategy.TWO_STAGE else "balance"
    if chosen in ("two_stage", "recursive"):
        if not (is_ar and full):
            notes.append(f"{chosen} applies to whole-cluster AllReduce only; using balance")
            chosen = "balance"
        else:
            bws = [topo.server_bandwidth(s, health) for s in range(topo.n)]
            if chosen == "two_stage":
                deg = degraded_server(topo, health)
                if deg is None or topo.n < 3:
                    notes.append("no degraded server or fewer than 3 servers; using balance")
                    chosen = "balance"
                else:
                    d, X = deg
                    rest = [b for s, b in enumerate(bws) if s != d]
                    plan = optimal_partition(PartitionInputs(topo.n, topo.g, X, req.D, sum(rest) / len(rest)))
                    if plan.strategy is Strategy.STANDARD_RING:
                        notes.append(f"X={X:.4f} is at or below the split threshold; using balance")
                        chosen = "balance"
                    else:
                        sched = plan_two_stage(topo, health, d, plan, E=E, segment_bytes=segment_bytes)
                        return sched, "two_stage", plan.to_dict(), notes
            if chosen == "recursive":
                if min(bws) <= 0:
                    raise PlanError("a server has no healthy NIC left")
                node = recursive_plan(bws, req.D, topo.g)
                if node.depth == 0:
                    notes.append("bandwidths close to uniform; using balance")
                    chosen = "balance"
                else:
                    sched = build_allreduce_schedule(topo, health, node, req.D, E, req.reduction,
                                                     segment_bytes=segment_bytes)
                    return sched, "recursive", node.to_dict(), notes
    mode = "hot_repair" if chosen == "hot_repair_only" else "balance"
    lanes = channel_bindings(topo, health, req.channels, mode, servers=servers)
    sched = ring_schedule(req, lanes=lanes, E=E, segment_bytes=segment_bytes)
    return sched, chosen, None, notes


def _simulate(scn: Scenario, seed: int) -> tuple[list[dict], Fabric]:
    topo = build_topology(scn.topology)
    fab = _fabric(scn, topo)
    for f in scn.faults:
        fab.faults.inject(f)
    rng = np.random.default_rng(seed)
    eng = fab.engine
    entries = []
    port_down: set[int] = set()
    order = sorted(range(len(scn.workload)), key=lambda i: (scn.workload[i].time, i))
    for i in order:
        item = scn.workload[i]
        if item.time >= eng.now:
            eng.run_until(item.time)
        # NIC port state is visible locally at issue time, both down and back up
        for nic in port_down - fab.physical.failed_nics:
            fab.known.restore_nic(nic)
        port_down = (port_down & fab.physical.failed_nics) | (fab.physical.failed_nics - fab.known.failed_nics)
        fab.known.failed_nics |= port_down
        req = _request(item, topo)
        E = scn.knobs.elements
        inputs = {r: rng.integers(-INPUT_RANGE, INPUT_RANGE, E) for r in req.participants}
        entry = {"index": i, "kind": req.kind.value, "size": req.D, "issue_time": item.time,
                 "start": eng.now, "end": None, "makespan": None, "strategy": None, "plan": None,
                 "integrity": None, "error": None, "retransmitted_chunks": 0, "notes": []}
        try:
            sched, chosen, plan, notes = build_schedule(scn.strategy, req, topo, fab.known, scn.cost, E,
                                                        scn.knobs.chunk_size)
            entry.update(strategy=chosen, plan=plan, notes=notes)
            res = execute(sched, inputs, fab)
            exp = oracle(req, inputs, Ep=sched.Ep)
            got = results(req, sched, res.buffers)
            ok = all(np.array_equal(v, got[r]) for r, v in exp.items())
            entry.update(end=res.end, makespan=res.makespan, integrity="pass" if ok else "mismatch",
                         retransmitted_chunks=res.retransmitted_chunks)
        except (NoBackup, NoHealthyNic, PlanError, RuntimeError) as e:
            entry.update(integrity="failed", error=f"{type(e).__name__}: {e}", end=eng.now)
        entries.append(entry)
    entries.sort(key=lambda e: e["index"])
    return entries, fab


def run(scn: Scenario, seed: int | None = None) -> Report:
    seed = scn.seed if seed is None else seed
    entries, fab = _simulate(scn, seed)
    base, _ = _simulate(scn.without_faults(), seed)
    topo = fab.topology
    for e, b in zip(entries, base):
        e["baseline_makespan"] = b["makespan"]
        if e["makespan"] is not None and b["makespan"]:
            e["overhead"] = e["makespan"] / b["makespan"] - 1
        else:
            e["overhead"] = None
    rep = Report("run", scn.name, seed, scn.strategy, collectives=entries)
    traffic = fab.ports.traffic()
    rep.traffic = [{"nic": k, "server": topo.nic(k).server, "rail": topo.nic(k).rail,
                    "tx": traffic[k]["tx"], "rx": traffic[k]["rx"]} for k in sorted(traffic)]
    for r in fab.faults.records:
        rep.detections.append({
            "component": r.component, "fault_time": r.fault_time, "detect_time": r.detect_time,
            "detection_latency": r.detection_latency, "localization_latency": r.localization_latency,
            "verdict": r.verdict.kind.value, "nics": list(r.verdict.nics), "flags": list(r.verdict.flags),
            "connections": len(r.connections),
            "migration_latency": max(r.resume_delays) if r.resume_delays else None,
        })
    done = [e for e in entries if e["makespan"] is not None]
    tot = sum(e["makespan"] for e in done)
    tot_b = sum(e["baseline_makespan"] for e in done if e["baseline_makespan"])
    rep.summary = {
        "collectives": len(entries),
        "failed": sum(e["integrity"] == "failed" for e in entries),
        "mismatched": sum(e["integrity"] == "mismatch" for e in entries),
        "total_makespan": tot,
        "baseline_makespan": tot_b,
        "overhead": tot / tot_b - 1 if tot_b else None,
    }
    return rep


# -- Monte Carlo sweeps ----------------------------------------------------------

def failure_placement(topo: ClusterTopology, k: int, seed: int, trial: int) -> list[int]:
    """NICs that fail in ``trial``: the first ``k`` of a per-trial permutation.

    The same trial index gives nested placements for growing ``k``, so the
    curves over ``k`` share their randomness.
    """
    perm = np.random.default_rng([seed, trial]).permutation(topo.num_nics)
    return sorted(int(x) for x in perm[:k])


def _ring_nic_load(topo: ClusterTopology, health: HealthMap, mode: str) -> float:
    """Largest per-NIC time factor of a whole-cluster ring under ``mode``."""
    m = max(len(r) for r in topo.nics)
    if mode == "balance":
        worst = 0.0
        for s in range(topo.n):
            left = topo.server_bandwidth(s, health)
            if left <= 0:
                return math.inf
            worst = max(worst, 1.0 / left)
        return worst
    worst = 0.0
    for s in range(topo.n):
        load: dict[int, float] = {}
        for c in range(m):
            base = topo.server_nics(s)[c % len(topo.server_nics(s))].nic_id
            try:
                k = hot_repair_nic(topo, health, base)
            except NoHealthyNic:
                return math.inf
            load[k] = load.get(k, 0.0) + 1.0 / m
        worst = max(worst, max(v / topo.nic(k).bandwidth for k, v in load.items()))
    return worst


def estimate_slowdown(topo: ClusterTopology, health: HealthMap, strategy: str, D: float,
                      cost: CostParams) -> float:
    """Predicted whole-cluster AllReduce time under ``health`` over the healthy time."""
    ranks = topo.num_gpus
    a = 2 * (ranks - 1) / ranks
    lat = 2 * (ranks - 1) * cost.alpha
    clean = HealthMap()
    mode = "hot_repair" if strategy == "hot_repair_only" else "balance"
    t0 = lat + a * D * _ring_nic_load(topo, clean, mode)
    t_ring = lat + a * D * _ring_nic_load(topo, health, mode)
    if strategy in ("hot_repair_only", "balance") or math.isinf(t_ring):
        return t_ring / t0
    req = CollectiveRequest(CollectiveKind.ALL_REDUCE, int(D), tuple(range(ranks)))
    times = predict_strategies(req, topo, health, cost)
    return min(t_ring, times[Strategy.TWO_STAGE]) / t0


def _simulated_slowdown(scn: Scenario, topo: ClusterTopology, health: HealthMap, D: int) -> float:
    req = CollectiveRequest(CollectiveKind.ALL_REDUCE, D, tuple(range(topo.num_gpus)),
                            channels=max(len(r) for r in topo.nics))
    E = scn.knobs.elements
    rng = np.random.default_rng(0)
    inputs = {r: rng.integers(-INPUT_RANGE, INPUT_RANGE, E) for r in req.participants}
    times = []
    for h in (HealthMap(), health):
        try:
            sched, *_ = build_schedule(scn.strategy, req, topo, h, scn.cost, E, scn.knobs.chunk_size)
        except (NoHealthyNic, PlanError):
            return math.inf
        fab = _fabric(scn, topo)
        fab.physical.failed_nics |= h.failed_nics
        fab.known.failed_nics |= h.failed_nics
        times.append(execute(sched, inputs, fab).makespan)
    return times[1] / times[0]


def _trend(ks: Sequence[int], means: Sequence[float]) -> dict:
    pairs = sorted(zip(ks, means))
    ks = [k for k, _ in pairs]
    ms = [m for _, m in pairs]
    inc = {ks[i]: ms[i] - ms[i - 1] for i in range(1, len(ks)) if ks[i] == ks[i - 1] + 1}
    later = [inc[k] for k in sorted(inc) if k > 2]
    return {
        "non_decreasing": all(b >= a for a, b in zip(ms, ms[1:])),
        "increments": {str(k): v for k, v in sorted(inc.items())},
        "increments_non_increasing_after_2": all(b <= a for a, b in zip(later, later[1:])),
    }


def sweep(scn: Scenario, seed: int | None = None, simulate: bool = False) -> Report:
    """Overhead distribution over random failure placements for each ``k``.

    By default uses the bandwidth model of each strategy (fast enough for
    large clusters); ``simulate`` runs every trial through the executor.
    """
    if scn.monte_carlo is None:
        raise ValueError("scenario has no monte_carlo block")
    mc = scn.monte_carlo
    seed = mc.seed if seed is None else seed
    topo = build_topology(scn.topology)
    rep = Report("sweep", scn.name, seed, scn.strategy)
    rows = []
    for k in mc.k:
        vals, lost = [], 0
        for t in range(mc.trials):
            health = HealthMap(failure_placement(topo, k, seed, t))
            if simulate:
                s = _simulated_slowdown(scn, topo, health, mc.size)
            else:
                s = estimate_slowdown(topo, health, scn.strategy, mc.size, scn.cost)
            if math.isinf(s):
                lost += 1
            else:
                vals.append(s - 1)
        arr = np.array(vals) if vals else np.array([np.nan])
        rows.append({
            "k": k, "trials": mc.trials, "lost_trials": lost,
            "mean": float(np.mean(arr)), "p50": float(np.percentile(arr, 50)),
            "p90": float(np.percentile(arr, 90)), "p99": float(np.percentile(arr, 99)),
            "max": float(np.max(arr)),
        })
    rep.sweep = rows
    rep.summary = {"mode": "simulated" if simulate else "model", "size": mc.size,
                   "servers": topo.n, "nics": topo.num_nics,
                   "trend": _trend([r["k"] for r in rows], [r["mean"] for r in rows])}
    if any(r["lost_trials"] for r in rows):
        rep.notes.append("lost trials left some server with no healthy NIC and are excluded from the statistics")
    return rep


# -- output ---------------------------------------------------------------------

RUN_COLUMNS = ("index", "kind", "size", "issue_time", "start", "end", "makespan", "baseline_makespan",
               "overhead", "strategy", "integrity", "retransmitted_chunks", "error")
SWEEP_COLUMNS = ("k", "trials", "lost_trials", "mean", "p50", "p90", "p99", "max")


def emit(report: Report, out_dir: str | Path, fmt: str = "json", plots: bool = True) -> list[Path]:
    """Write ``report`` under ``out_dir``; returns the files written."""
    if fmt not in ("json", "csv"):
        raise ValueError(f"format must be json or csv, got {fmt!r}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = f"{report.scenario}_{report.kind}"
    paths = []
    if fmt == "json":
        p = out / f"{stem}.json"
        p.write_text(report.to_json())
        paths.append(p)
    else:
        p = out / f"{stem}.csv"
        cols = RUN_COLUMNS if report.kind == "run" else SWEEP_COLUMNS
        rows = report.collectives if report.kind == "run" else report.sweep
        with p.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for r in rows:
                w.writerow(["" if r.get(c) is None else r.get(c) for c in cols])
        paths.append(p)
    if plots:
        paths.extend(_plots(report, out, stem))
    return paths


def _plots(report: Report, out: Path, stem: str) -> list[Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    if report.kind == "sweep":
        ks = [r["k"] for r in report.sweep]
        ax.plot(ks, [100 * r["mean"] for r in report.sweep], "o-", label="mean")
        ax.plot(ks, [100 * r["p90"] for r in report.sweep], "s--", label="p90")
        ax.set_xlabel("failed NICs")
        ax.set_ylabel("overhead (%)")
        ax.legend()
        name = f"{stem}_overhead_vs_k.png"
    else:
        pts = [(c["size"], c["size"] / c["makespan"] / 1e9) for c in report.collectives if c["makespan"]]
        base = [(c["size"], c["size"] / c["baseline_makespan"] / 1e9)
                for c in report.collectives if c.get("baseline_makespan")]
        if base:
            ax.plot(*zip(*sorted(base)), "s--", label="no faults")
        if pts:
            ax.plot(*zip(*sorted(pts)), "o-", label="with faults")
        ax.set_xscale("log")
        ax.set_xlabel("message size (bytes)")
        ax.set_ylabel("algorithm bandwidth (GB/s)")
        ax.legend()
        name = f"{stem}_throughput_vs_size.png"
    fig.tight_layout()
    p = out / name
    fig.savefig(p, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return [p]
