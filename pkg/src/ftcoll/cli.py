"""Command line entry point: ``ftcoll run|sweep|plan|rerank``.

Exit status is 0 on success, 2 for a bad scenario or bad arguments, 1 for
any other error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import yaml

from .allreduce_opt import (
    PartitionInputs,
    PlanError,
    degraded_server,
    optimal_partition,
    predict_strategies,
    recursive_plan,
    select_strategy,
)
from .collectives import CollectiveKind, CollectiveRequest
from .faults import NicTarget
from .rerank import LogicalRing, rerank_detail, ring_from_topology
from .runner import Report, _clean, emit, run, sweep
from .scenario import Scenario, ScenarioError, parse_scenario
from .topology import HealthMap, build_topology

__all__ = ["main", "parse_scenario", "run", "sweep", "emit"]


def _health(scn: Scenario, topo) -> HealthMap:
    """Every NIC fault in the scenario, taken as already known."""
    h = HealthMap()
    for f in scn.faults:
        if isinstance(f.target, NicTarget):
            h.fail_nic(f.target.nic)
    return h


def _write(obj: dict, out: str | None, name: str) -> None:
    text = json.dumps(_clean(obj), indent=2) + "\n"
    if out:
        p = Path(out)
        p.mkdir(parents=True, exist_ok=True)
        (p / name).write_text(text)
    sys.stdout.write(text)


def cmd_run(args) -> int:
    scn = parse_scenario(args.scenario)
    rep = run(scn, args.seed)
    return _finish(rep, args)


def cmd_sweep(args) -> int:
    scn = parse_scenario(args.scenario)
    if scn.monte_carlo is None:
        raise ScenarioError([("monte_carlo", "required for sweep")])
    rep = sweep(scn, args.seed, simulate=args.simulate)
    return _finish(rep, args)


def _finish(rep: Report, args) -> int:
    paths = emit(rep, args.out, args.format, plots=not args.no_plots)
    print(json.dumps(_clean(rep.summary), indent=2))
    for p in paths:
        print(f"wrote {p}")
    return 0


def cmd_plan(args) -> int:
    if args.scenario:
        scn = parse_scenario(args.scenario)
        topo = build_topology(scn.topology)
        health = _health(scn, topo)
        bws = [topo.server_bandwidth(s, health) for s in range(topo.n)]
        D = args.D if args.D is not None else scn.workload[0].size
        req = CollectiveRequest(CollectiveKind.ALL_REDUCE, int(D), tuple(range(topo.num_gpus)))
        out = {"bandwidths": bws, "D": D}
        deg = degraded_server(topo, health)
        if deg is not None:
            d, X = deg
            rest = [b for s, b in enumerate(bws) if s != d]
            out["degraded"] = d
            out["partition"] = optimal_partition(PartitionInputs(topo.n, topo.g, X, D, sum(rest) / len(rest)),
                                                 args.practical).to_dict()
        if min(bws) > 0:
            out["recursive"] = recursive_plan(bws, D, topo.g, practical_rule=args.practical).to_dict()
        times = predict_strategies(req, topo, health, scn.cost)
        out["predicted"] = {s.value: t for s, t in times.items()}
        out["selected"] = select_strategy(req, topo, health, scn.cost).value
    else:
        if args.n is None or args.g is None or args.X is None:
            raise ScenarioError([("plan", "give --scenario or all of --n --g --X")])
        inp = PartitionInputs(args.n, args.g, args.X, args.D if args.D is not None else 1.0,
                              args.B if args.B is not None else 1.0)
        out = {"partition": optimal_partition(inp, args.practical).to_dict()}
    _write(out, args.out, "plan.json")
    return 0


def cmd_rerank(args) -> int:
    if args.ring:
        raw = yaml.safe_load(Path(args.ring).read_text())
        try:
            ring = LogicalRing(tuple(raw["order"]), {int(k): v for k, v in raw["rail_sets"].items()})
        except (KeyError, TypeError, ValueError) as e:
            raise ScenarioError([("ring", f"expected order and rail_sets: {e}")]) from e
    elif args.scenario:
        scn = parse_scenario(args.scenario)
        topo = build_topology(scn.topology)
        ring = ring_from_topology(topo, _health(scn, topo))
    else:
        raise ScenarioError([("rerank", "give --ring or --scenario")])
    res = rerank_detail(ring)
    _write({
        "input": list(ring.order),
        "order": list(res.ring.order),
        "floor": res.floor,
        "min_adjacent_before": ring.min_adjacent(),
        "min_adjacent_after": res.ring.min_adjacent(),
        "moves": [{"bridge": w, "between": [u, v]} for w, u, v in res.moves],
        "unresolved": [list(p) for p in res.unresolved],
        "residual": [list(p) for p in res.residual],
    }, args.out, "rerank.json")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ftcoll", description="Fault-tolerant collective simulator")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, need_scenario=True):
        p.add_argument("--scenario", required=need_scenario, help="scenario file (YAML or JSON)")
        p.add_argument("--seed", type=int, default=None, help="override the scenario seed")
        p.add_argument("--out", default=None, help="output directory")

    for name, fn in (("run", cmd_run), ("sweep", cmd_sweep)):
        p = sub.add_parser(name)
        common(p)
        p.add_argument("--format", choices=("csv", "json"), default="json")
        p.add_argument("--no-plots", action="store_true")
        if name == "sweep":
            p.add_argument("--simulate", action="store_true", help="run each trial through the executor")
        p.set_defaults(fn=fn)

    p = sub.add_parser("plan")
    common(p, need_scenario=False)
    p.add_argument("--n", type=int)
    p.add_argument("--g", type=int)
    p.add_argument("--X", type=float)
    p.add_argument("--D", type=float)
    p.add_argument("--B", type=float)
    p.add_argument("--practical", action="store_true", help="keep the ring whenever X < 1/3")
    p.set_defaults(fn=cmd_plan)

    p = sub.add_parser("rerank")
    common(p, need_scenario=False)
    p.add_argument("--ring", help="YAML/JSON with 'order' and 'rail_sets'")
    p.set_defaults(fn=cmd_rerank)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "out", None) is None and args.command in ("run", "sweep"):
        args.out = "out"
    try:
        return args.fn(args)
    except (ScenarioError, PlanError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - surface anything else as a run error
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
