"""End-to-end acceptance checks, one test per numbered criterion.

Each test records a PASS/FAIL line (printed in the terminal summary) before
asserting, so a failing criterion still shows what was measured.
"""

import json
import math
import time

import numpy as np
import pytest

from ftcoll.allreduce_opt import (
    PartitionInputs,
    optimal_partition,
    optimal_split,
    plan_for_split,
    plan_two_stage,
    stage_times,
    threshold,
    total_time,
    total_time_grid,
)
from ftcoll.balance import channel_bindings
from ftcoll.collectives import CollectiveKind, CollectiveRequest, oracle, results, ring_schedule
from ftcoll.cost_model import bottleneck_load
from ftcoll.engine import Engine
from ftcoll.executor import Fabric, execute
from ftcoll.faults import (
    FaultConfig,
    FaultEvent,
    FaultManager,
    LinkTarget,
    NicTarget,
    ProbeResult,
    VerdictKind,
    all_outcome_combinations,
    triangulate,
)
from ftcoll.rerank import LogicalRing, global_floor, rerank
from ftcoll.runner import run, sweep
from ftcoll.scenario import scenario_from_dict
from ftcoll.topology import HealthMap, build_topology, failover_chain, uniform_spec
from ftcoll.transport import MiB, Connection, NoBackup, TransportConfig, open_endpoint

GRID = np.linspace(0.0, 1.0, 10001)


def random_tuples(rng, count, above):
    out = []
    while len(out) < count:
        n = int(rng.integers(2, 65))
        g = int(rng.integers(2, 9))
        thr = threshold(n, g)
        X = float(rng.uniform(thr, 0.99)) if above else float(rng.uniform(0.0, thr))
        if 0 < X < 1 and (X > thr if above else X <= thr):
            out.append(PartitionInputs(n, g, X))
    return out


# 1 ---------------------------------------------------------------------------
def test_c01_closed_form_matches_grid_search(criterion):
    rng = np.random.default_rng(1)
    t0 = time.perf_counter()
    worst = 0.0
    for inp in random_tuples(rng, 1000, above=True):
        y_grid = GRID[np.argmin(total_time_grid(GRID, inp))]
        worst = max(worst, abs(y_grid - optimal_split(inp.n, inp.g, inp.X)))
    elapsed = time.perf_counter() - t0
    ok = worst <= 2e-3 and elapsed < 5.0
    criterion(1, ok, f"max |grid argmin - Y*| = {worst:.2e} (<= 2e-3), {elapsed:.2f} s (< 5 s)")
    assert ok


# 2 ---------------------------------------------------------------------------
def test_c02_threshold_behaviour(criterion):
    rng = np.random.default_rng(2)
    below_bad = 0
    for inp in random_tuples(rng, 1000, above=False):
        T = total_time_grid(GRID, inp)
        if not np.all(T[0] <= T):
            below_bad += 1
    above_bad = 0
    for inp in random_tuples(rng, 1000, above=True):
        T = total_time_grid(GRID, inp)
        k = int(np.argmin(T))
        if not (0 < k < len(GRID) - 1 and T[k] < T[0] and T[k] < T[-1]):
            above_bad += 1
    ok = below_bad == 0 and above_bad == 0
    criterion(2, ok, f"below threshold: {below_bad}/1000 with a grid point under T(0); "
                     f"above: {above_bad}/1000 without an interior minimum")
    assert ok


# 3 ---------------------------------------------------------------------------
def test_c03_crossing_identity_and_spot_values(criterion):
    rng = np.random.default_rng(3)
    worst = 0.0
    for inp in random_tuples(rng, 1000, above=True):
        T1, T2, _ = stage_times(optimal_split(inp.n, inp.g, inp.X), inp)
        worst = max(worst, abs(T1 - T2) / max(T1, T2))
    spot = PartitionInputs(2, 8, 0.5, 1.0, 1.0)
    plan = optimal_partition(spot)
    ok = worst <= 1e-9 and abs(plan.Y - 0.517241) <= 1e-6 and abs(plan.T_total - 2.8448) <= 1e-3
    criterion(3, ok, f"max rel |T1-T2| at Y* = {worst:.1e}; n=2,g=8,X=0.5: Y*={plan.Y:.6f}, "
                     f"T={plan.T_total:.4f}")
    assert ok


# 4 ---------------------------------------------------------------------------
def test_c04_degraded_server_load(criterion):
    D = 256 * MiB
    exact = bottleneck_load(0.25, D) == 1.75 * D and bottleneck_load(0.25, 1) == 1.75
    n, g = 4, 4
    topo = build_topology(uniform_spec(n, g))
    health = HealthMap([0, 1])  # server 0 keeps 2 of 4 NICs
    inp = PartitionInputs(n, g, 0.5, D, topo.server_bandwidth(1))
    plan = plan_for_split(inp, 0.25)
    cfg = TransportConfig(alpha=0.0)
    sched = plan_two_stage(topo, health, 0, plan, E=2048, segment_bytes=cfg.chunk_size)
    rng = np.random.default_rng(4)
    inputs = {r: rng.integers(-99, 99, 2048) for r in range(n * g)}
    res = execute(sched, inputs, Fabric(topo, transport=cfg, physical=health.copy(), known=health.copy()))
    req = CollectiveRequest(CollectiveKind.ALL_REDUCE, D, tuple(range(n * g)))
    correct = all(np.array_equal(v, results(req, sched, res.buffers)[r])
                  for r, v in oracle(req, inputs, Ep=sched.Ep).items())
    tr = res.server_traffic(topo)[0]
    scale = sched.Dp / D
    target = bottleneck_load(0.25, D) * scale
    gap = max(abs(tr["tx"] - target), abs(tr["rx"] - target))
    ok = exact and correct and gap <= cfg.chunk_size
    criterion(4, ok, f"bottleneck_load(0.25)=1.75D exact: {exact}; executed degraded tx/rx = "
                     f"{tr['tx'] / sched.Dp:.4f}D/{tr['rx'] / sched.Dp:.4f}D vs 1.75D, "
                     f"gap {gap / MiB:.1f} MiB vs one chunk {cfg.chunk_size / MiB:.0f} MiB")
    assert ok


# 5 ---------------------------------------------------------------------------
def _hot_repair_case(topo, t_fail, depth, gap):
    eng = Engine()
    cfg = TransportConfig()
    snd = open_endpoint(topo, 0, failover_chain(topo, 0), cfg)
    rcv = open_endpoint(topo, topo.g, failover_chain(topo, topo.g), cfg)
    conn = Connection(eng, topo, snd, rcv, cfg, name="c")
    fm = FaultManager(eng, topo)
    fm.attach(conn)
    data = np.arange(64 * 16, dtype=np.int64) * 7 + 3
    done = []
    conn.send(data, 64 * cfg.chunk_size, lambda L: done.append(eng.now))
    failed = [snd.chain[0]]
    fm.inject(FaultEvent(t_fail, NicTarget(snd.chain[0])))

    def next_fault(rec, c, exc):
        if exc is None and len(failed) < depth:
            nic = c.sender.active_nic
            failed.append(nic)
            fm.inject(FaultEvent(eng.now + gap, NicTarget(nic)))

    fm.on_verdict.append(next_fault)
    eng.run()
    raised = any(isinstance(e, NoBackup) for _, e in fm.errors)
    return raised, bool(done), np.array_equal(conn.ledger.recv, conn.ledger.payload), failed, snd.chain


def test_c05_lossless_hot_repair(criterion):
    topo = build_topology(uniform_spec(2, 3, 3))
    cfg = TransportConfig()
    tc = cfg.chunk_size / topo.nic(0).bandwidth
    instants = [cfg.alpha + k * tc for k in range(64)] + [cfg.alpha + (k + 0.5) * tc for k in range(64)]
    t0 = time.perf_counter()
    cases = lost = bad_nobackup = exhausted = 0
    for depth in (1, 2, 3):
        for t in instants:
            raised, finished, equal, failed, chain = _hot_repair_case(topo, t, depth, 0.3 * tc)
            cases += 1
            if raised:
                exhausted += 1
                if set(failed) != set(chain):
                    bad_nobackup += 1
            elif not (finished and equal):
                lost += 1
    elapsed = time.perf_counter() - t0
    ok = cases == 384 and lost == 0 and bad_nobackup == 0 and exhausted > 0 and elapsed < 10.0
    criterion(5, ok, f"{cases} cases: {lost} corrupted/unfinished survivors, {exhausted} NoBackup "
                     f"({bad_nobackup} with a chain NIC still healthy), {elapsed:.2f} s (< 10 s)")
    assert ok


# 6 ---------------------------------------------------------------------------
KINDS6 = [CollectiveKind.REDUCE_SCATTER, CollectiveKind.ALL_GATHER, CollectiveKind.BROADCAST,
          CollectiveKind.ALL_REDUCE, CollectiveKind.SEND_RECV]


def test_c06_semantics_under_failure(criterion):
    rng = np.random.default_rng(6)
    t0 = time.perf_counter()
    mismatches, injected = [], 0
    D = 4 * MiB
    for trial in range(200):
        n, g = int(rng.integers(2, 5)), int(rng.integers(2, 5))
        topo = build_topology(uniform_spec(n, g))
        kind = KINDS6[trial % len(KINDS6)]
        parts = tuple(range(n * g))
        req = CollectiveRequest(kind, D, parts, channels=g, root=int(rng.integers(n * g)))
        sched = ring_schedule(req, ring_order=tuple(int(x) for x in rng.permutation(parts)), E=256)
        inputs = {r: rng.integers(-1000, 1000, 256) for r in parts}
        fab = Fabric(topo)
        # keep at least one NIC per server so every trial has a backup
        k = int(rng.integers(0, 3))
        victims = []
        while len(victims) < k:
            nic = int(rng.integers(topo.num_nics))
            s = topo.nic(nic).server
            if nic not in victims and sum(topo.nic(v).server == s for v in victims) < g - 1:
                victims.append(nic)
        horizon = 4 * D / topo.nic(0).bandwidth
        for nic in victims:
            fab.faults.inject(FaultEvent(float(rng.uniform(0, horizon)), NicTarget(nic)))
            injected += 1
        res = execute(sched, inputs, fab)
        got = results(req, sched, res.buffers)
        if not all(np.array_equal(v, got[r]) for r, v in oracle(req, inputs, Ep=sched.Ep).items()):
            mismatches.append(trial)
    elapsed = time.perf_counter() - t0
    ok = not mismatches and elapsed < 30.0
    criterion(6, ok, f"200 trials, {injected} NIC faults injected: {len(mismatches)} mismatches, "
                     f"{elapsed:.1f} s (< 30 s)")
    assert ok


# 7, 8 ------------------------------------------------------------------------
def _ratio(kind, strategy):
    topo = build_topology(uniform_spec(2, 8))
    parts = tuple(range(16))
    rng = np.random.default_rng(7)
    inputs = {r: rng.integers(-9, 9, 2048) for r in parts}
    req = CollectiveRequest(kind, 1 << 30, parts, channels=8)
    cfg = TransportConfig(alpha=0.0)
    base = execute(ring_schedule(req, E=2048), inputs, Fabric(topo, transport=cfg)).makespan
    h = HealthMap([3])
    sched = ring_schedule(req, lanes=channel_bindings(topo, h, 8, strategy), E=2048)
    res = execute(sched, inputs, Fabric(topo, transport=cfg, physical=h.copy(), known=h.copy()))
    got = results(req, sched, res.buffers)
    assert all(np.array_equal(v, got[r]) for r, v in oracle(req, inputs, Ep=sched.Ep).items())
    return res.makespan / base


def test_c07_balance_bound(criterion):
    kinds = [CollectiveKind.ALL_REDUCE, CollectiveKind.ALL_GATHER, CollectiveKind.REDUCE_SCATTER]
    ratios = {k.value: _ratio(k, "balance") for k in kinds}
    ok = all(abs(r / (8 / 7) - 1) <= 0.02 for r in ratios.values())
    criterion(7, ok, "makespan ratio vs no failure " +
              ", ".join(f"{k} {r:.4f}" for k, r in ratios.items()) + " (8/7 = 1.1429 +- 2%)")
    assert ok


def test_c08_hot_repair_penalty(criterion):
    kinds = [CollectiveKind.ALL_REDUCE, CollectiveKind.ALL_GATHER, CollectiveKind.REDUCE_SCATTER]
    thr = {k.value: 1 / _ratio(k, "hot_repair") for k in kinds}
    ok = all(abs(t - 0.5) <= 0.02 for t in thr.values())
    criterion(8, ok, "throughput vs baseline " + ", ".join(f"{k} {t:.3f}" for k, t in thr.items()) +
              " (0.50 +- 0.02)")
    assert ok


# 9 ---------------------------------------------------------------------------
def _expected_verdict(res, has_aux):
    """Independent decision table; None where only totality is required."""
    L, T, S = ProbeResult.LOCAL_ERROR, ProbeResult.TIMEOUT, ProbeResult.SUCCESS
    ab, ba = res[0], res[1]
    if ab == L and ba == T:
        return VerdictKind.LOCAL_NIC, (0,)
    if ba == L and ab == T:
        return VerdictKind.LOCAL_NIC, (1,)
    if ab == S and ba == S:
        return VerdictKind.INCONCLUSIVE, None
    if ab == T and ba == T:
        if not has_aux:
            return VerdictKind.INCONCLUSIVE, None
        xa, xb = res[2], res[3]
        if (xa, xb) == (S, S):
            return VerdictKind.LINK, (0, 1)
        if (xa, xb) == (T, S):
            return VerdictKind.REMOTE_NIC, (0,)
        if (xa, xb) == (T, T):
            return VerdictKind.DUAL_ENDPOINT, (0, 1)
    return None


def _detection_latencies(oob: bool):
    topo = build_topology(uniform_spec(3, 2))
    out = []
    for target in (NicTarget(0), NicTarget(2), LinkTarget(0, 2)):
        eng = Engine()
        cfg = FaultConfig(oob_enabled=oob)
        fm = FaultManager(eng, topo, cfg)
        tcfg = TransportConfig()
        snd = open_endpoint(topo, 0, failover_chain(topo, 0), tcfg)
        rcv = open_endpoint(topo, 2, failover_chain(topo, 2), tcfg)
        conn = Connection(eng, topo, snd, rcv, tcfg, name="c")
        fm.attach(conn)
        conn.send(np.arange(512, dtype=np.int64), 32 * MiB)
        fm.inject(FaultEvent(1e-4, target))
        eng.run()
        out += [r.detection_latency for r in fm.records]
    return out, cfg


def test_c09_triangulation_and_detection(criterion):
    total = mismatched = 0
    for has_aux in (False, True):
        for outcomes in all_outcome_combinations(has_aux):
            v = triangulate(outcomes, has_aux, 0, 1, 2 if has_aux else None)
            total += 1
            if not isinstance(v.kind, VerdictKind):
                mismatched += 1
                continue
            exp = _expected_verdict([o.result for o in outcomes], has_aux)
            if exp is not None and (v.kind != exp[0] or (exp[1] is not None and v.nics != exp[1])):
                mismatched += 1
    lat_oob, cfg = _detection_latencies(True)
    lat_poll, _ = _detection_latencies(False)
    oob_ok = bool(lat_oob) and all(x <= cfg.oob_latency + cfg.probe_timeout for x in lat_oob)
    poll_ok = bool(lat_poll) and all(math.isclose(x, cfg.poll_timeout, rel_tol=1e-12) for x in lat_poll)
    ok = total == 9 + 81 and mismatched == 0 and oob_ok and poll_ok
    criterion(9, ok, f"{total} outcome combinations, {mismatched} off the decision table; detection with OOB "
                     f"max {max(lat_oob) * 1e3:.3f} ms (<= {(cfg.oob_latency + cfg.probe_timeout) * 1e3:.1f} ms), "
                     f"without OOB {sorted(set(lat_poll))} s")
    assert ok


# 10 --------------------------------------------------------------------------
def test_c10_rerank(criterion):
    ring = LogicalRing((0, 1, 2, 3), {0: {0, 1}, 1: {1}, 2: {0}, 3: {0, 1}})
    out = rerank(ring)
    example = out.order == (1, 0, 2, 3) and out.min_adjacent() >= global_floor(ring)

    rng = np.random.default_rng(10)
    perm_bad = decreased = wrong = 0
    for trial in range(500):
        N = int(rng.integers(8, 17))
        p = rng.choice([0.1, 0.3, 0.5])
        sets = {}
        for s in range(N):
            rails = {r for r in range(8) if rng.random() > p}
            sets[s] = rails or {int(rng.integers(8))}
        r0 = LogicalRing(tuple(int(x) for x in rng.permutation(N)), sets)
        r1 = rerank(r0)
        if sorted(r1.order) != list(range(N)):
            perm_bad += 1
        if r1.min_adjacent() < r0.min_adjacent():
            decreased += 1
        topo = build_topology(uniform_spec(N, 1, 1))
        req = CollectiveRequest(CollectiveKind.ALL_REDUCE, 256 * 1024, tuple(range(N)))
        inputs = {x: rng.integers(-50, 50, 64) for x in range(N)}
        sched = ring_schedule(req, ring_order=r1.order, E=64)
        res = execute(sched, inputs, Fabric(topo))
        got = results(req, sched, res.buffers)
        if not all(np.array_equal(v, got[x]) for x, v in oracle(req, inputs, Ep=sched.Ep).items()):
            wrong += 1
    ok = example and perm_bad == 0 and decreased == 0 and wrong == 0
    criterion(10, ok, f"example -> {list(out.order)}; 500 random patterns: {perm_bad} non-permutations, "
                      f"{decreased} decreased the min edge, {wrong} oracle mismatches")
    assert ok


# 11 --------------------------------------------------------------------------
def test_c11_multi_failure_trend(criterion):
    scn = scenario_from_dict({
        "name": "trend",
        "topology": {"n": 64, "g": 8},
        "strategy": "balance",
        "cost": {"alpha": 0.0},
        "monte_carlo": {"k": list(range(0, 11)), "trials": 50, "seed": 0},
    })
    t0 = time.perf_counter()
    rep = sweep(scn)
    elapsed = time.perf_counter() - t0
    means = [r["mean"] for r in rep.sweep]
    trend = rep.summary["trend"]
    ok = trend["non_decreasing"] and trend["increments_non_increasing_after_2"] and elapsed < 120
    incs = ", ".join(f"{float(v) * 100:.2f}" for v in trend["increments"].values())
    criterion(11, ok, f"mean overhead k=1..10 (%): {', '.join(f'{m * 100:.2f}' for m in means[1:])}; "
                      f"non-decreasing {trend['non_decreasing']}, increments (pp) {incs}, "
                      f"non-increasing after k=2 {trend['increments_non_increasing_after_2']}, {elapsed:.1f} s")
    assert ok


# 12 --------------------------------------------------------------------------
def test_c12_determinism(criterion):
    raw = {
        "name": "det",
        "topology": {"n": 3, "g": 2},
        "workload": [{"kind": "AllReduce", "size": 8 * MiB, "time": 0.0},
                     {"kind": "AllGather", "size": 8 * MiB, "time": 0.01}],
        "faults": [{"time": 1e-4, "nic": [1, 0]}, {"time": 2e-4, "link": [[0, 1], [2, 1]]}],
        "strategy": "balance",
        "knobs": {"elements": 512},
        "seed": 5,
        "monte_carlo": {"k": [0, 1, 2], "trials": 10, "seed": 3},
    }
    a = run(scenario_from_dict(raw), seed=11).to_json()
    b = run(scenario_from_dict(raw), seed=11).to_json()
    c = sweep(scenario_from_dict(raw)).to_json()
    d = sweep(scenario_from_dict(raw)).to_json()
    ok = a == b and c == d and json.loads(a)["summary"]["failed"] == 0
    criterion(12, ok, f"run json identical: {a == b} ({len(a)} bytes); sweep json identical: {c == d}")
    assert ok
