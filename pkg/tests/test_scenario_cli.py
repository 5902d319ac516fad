import json
import math
from pathlib import Path

import numpy as np
import pytest

from ftcoll.cli import main
from ftcoll.cost_model import CostParams
from ftcoll.faults import LinkTarget, NicTarget
from ftcoll.runner import estimate_slowdown, failure_placement, run, sweep, _simulated_slowdown
from ftcoll.scenario import ScenarioError, parse_scenario, scenario_from_dict
from ftcoll.topology import HealthMap, build_topology

DEMOS = Path(__file__).resolve().parents[1] / "demos" / "scenarios"


def test_defaults():
    scn = scenario_from_dict({"topology": {"n": 2, "g": 4}})
    assert scn.strategy == "auto" and scn.faults == [] and scn.monte_carlo is None
    assert len(scn.workload) == 1 and scn.workload[0].size == 1 << 30


def test_fault_targets_resolve():
    scn = scenario_from_dict({
        "topology": {"n": 2, "g": 4},
        "faults": [{"time": 0.1, "nic": [1, 2]}, {"time": 0.2, "nic": 3},
                   {"time": 0.3, "link": [[0, 1], [1, 1]], "permanent": False, "recovery_time": 1.0}],
    })
    assert scn.faults[0].target == NicTarget(6)
    assert scn.faults[1].target == NicTarget(3)
    assert scn.faults[2].target == LinkTarget(1, 5) and scn.faults[2].recovery_time == 1.0


def test_errors_name_every_bad_field():
    with pytest.raises(ScenarioError) as ei:
        scenario_from_dict({
            "topology": {"n": 1, "g": 4},
            "strategy": "fastest",
            "workload": [{"kind": "Gossip", "size": -3}],
            "bogus": 1,
        })
    paths = {p for p, _ in ei.value.problems}
    assert {"strategy", "bogus"} <= paths
    assert any(p.startswith("workload[0]") for p in paths)
    assert any(p.startswith("topology") for p in paths)


def test_json_and_yaml(tmp_path):
    raw = {"name": "j", "topology": {"n": 2, "g": 2}, "seed": 4}
    p = tmp_path / "s.json"
    p.write_text(json.dumps(raw))
    assert parse_scenario(p).seed == 4
    q = tmp_path / "bad.yaml"
    q.write_text("topology: [1, 2\n")
    with pytest.raises(ScenarioError):
        parse_scenario(q)


def test_failure_placement_is_nested():
    topo = build_topology(scenario_from_dict({"topology": {"n": 8, "g": 8}}).topology)
    for t in range(10):
        prev = set()
        for k in range(6):
            cur = set(failure_placement(topo, k, 3, t))
            assert len(cur) == k and prev <= cur
            prev = cur
    assert failure_placement(topo, 4, 3, 0) != failure_placement(topo, 4, 3, 1)


@pytest.mark.parametrize("strategy", ["balance", "hot_repair_only"])
@pytest.mark.parametrize("failed", [[0], [1, 4], [0, 1, 9]])
def test_estimator_agrees_with_executor(strategy, failed):
    scn = scenario_from_dict({
        "topology": {"n": 3, "g": 4},
        "strategy": strategy,
        "cost": {"alpha": 0.0},
        "knobs": {"elements": 512, "bandwidth_only": True},
    })
    topo = build_topology(scn.topology)
    h = HealthMap(failed)
    D = 64 * 2**20
    model = estimate_slowdown(topo, h, strategy, D, CostParams(alpha=0.0))
    sim = _simulated_slowdown(scn, topo, h, D)
    assert sim == pytest.approx(model, rel=0.03)


def test_run_reports_overhead_and_detection():
    scn = parse_scenario(DEMOS / "one_nic_down.yaml")
    rep = run(scn)
    s = rep.summary
    assert s["collectives"] == 3 and s["failed"] == 0 and s["mismatched"] == 0
    assert s["overhead"] > 0
    assert [d["verdict"] for d in rep.detections] == ["LocalNicFault"]
    assert all(c["integrity"] == "pass" for c in rep.collectives)


def test_sweep_lost_trials_are_noted():
    scn = scenario_from_dict({
        "topology": {"n": 2, "g": 2},
        "monte_carlo": {"k": [0, 2, 3], "trials": 30, "seed": 1},
    })
    rep = sweep(scn)
    rows = {r["k"]: r for r in rep.sweep}
    assert rows[0]["mean"] == 0 and rows[0]["lost_trials"] == 0
    assert rows[3]["lost_trials"] == 30 and math.isnan(rows[3]["mean"])
    assert rep.notes
    assert "NaN" not in rep.to_json()


def test_cli_run_and_sweep(tmp_path, capsys):
    out = tmp_path / "o"
    assert main(["run", "--scenario", str(DEMOS / "one_nic_down.yaml"), "--out", str(out),
                 "--format", "csv", "--no-plots"]) == 0
    head = (out / "one_nic_down_run.csv").read_text().splitlines()[0]
    assert head.startswith("index,kind,size")
    assert main(["sweep", "--scenario", str(DEMOS / "sweep64.yaml"), "--out", str(out)]) == 0
    data = json.loads((out / "sweep64_sweep.json").read_text())
    assert [r["k"] for r in data["sweep"]] == list(range(11))
    assert (out / "sweep64_sweep_overhead_vs_k.png").exists()


def test_cli_plan(capsys):
    assert main(["plan", "--n", "2", "--g", "8", "--X", "0.5"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["partition"]["Y"] == pytest.approx(0.517241, abs=1e-6)
    assert out["partition"]["strategy"] == "TwoStageAllReduce"
    assert main(["plan", "--scenario", str(DEMOS / "degraded_server.yaml")]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["degraded"] == 0 and out["selected"] in ("Balance", "TwoStageAllReduce")


def test_cli_rerank(capsys):
    assert main(["rerank", "--ring", str(DEMOS / "ring.yaml")]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["order"] == [1, 0, 2, 3] and out["min_adjacent_after"] == 1


def test_cli_exit_codes(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("topology: {n: 1, g: 2}\n")
    assert main(["run", "--scenario", str(bad)]) == 2
    assert main(["plan", "--n", "2", "--g", "8", "--X", "1.0"]) == 2
    assert "re-ranking" in capsys.readouterr().err
    assert main(["sweep", "--scenario", str(DEMOS / "one_nic_down.yaml"), "--out", str(tmp_path)]) == 2
    assert main(["run", "--scenario", str(tmp_path / "missing.yaml")]) in (1, 2)
