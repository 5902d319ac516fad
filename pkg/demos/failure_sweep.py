"""
Overhead as failures pile up
============================

64 servers with 8 NICs each; k random NICs fail.  The same trial index
fails a growing set of NICs, so the curve over k is smooth.
"""

from pathlib import Path

from ftcoll.runner import sweep
from ftcoll.scenario import parse_scenario

scn = parse_scenario(Path(__file__).parent / "scenarios" / "sweep64.yaml")
for strategy in ("hot_repair_only", "balance"):
    scn.strategy = strategy
    rep = sweep(scn)
    print(strategy)
    for row in rep.sweep:
        print(f"  k={row['k']:2d}  mean {100 * row['mean']:6.2f}%  p90 {100 * row['p90']:6.2f}%")
