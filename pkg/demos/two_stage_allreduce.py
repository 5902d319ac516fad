"""
Splitting an AllReduce around a slow server
===========================================

Four servers of four GPUs; server 0 has two of its four NICs left.  The
degraded server joins a ring over part of the buffer, the other three
reduce the rest among themselves and hand it over at the end.
"""

import numpy as np

from ftcoll.allreduce_opt import PartitionInputs, degraded_server, optimal_partition, plan_two_stage
from ftcoll.balance import channel_bindings
from ftcoll.collectives import CollectiveRequest, oracle, results, ring_schedule
from ftcoll.executor import Fabric, execute
from ftcoll.topology import HealthMap, build_topology, uniform_spec
from ftcoll.transport import MiB, TransportConfig

n, g, D = 4, 4, 256 * MiB
topo = build_topology(uniform_spec(n, g))
health = HealthMap([0, 1])
cfg = TransportConfig(alpha=0.0)

d, X = degraded_server(topo, health)
plan = optimal_partition(PartitionInputs(n, g, X, D, topo.server_bandwidth(1)))
print(f"server {d} lost X={X:.2f}; Y*={plan.Y:.4f}, predicted {plan.T_total * 1e3:.2f} ms")

rng = np.random.default_rng(1)
inputs = {r: rng.integers(-99, 99, 2048) for r in range(n * g)}
req = CollectiveRequest("AllReduce", D, tuple(range(n * g)), channels=g)


def go(sched):
    res = execute(sched, inputs, Fabric(topo, transport=cfg, physical=health.copy(), known=health.copy()))
    ok = all(np.array_equal(v, results(req, sched, res.buffers)[r])
             for r, v in oracle(req, inputs, Ep=sched.Ep).items())
    return res, ok


two, ok = go(plan_two_stage(topo, health, d, plan, E=2048, segment_bytes=cfg.chunk_size))
print(f"two-stage: {two.makespan * 1e3:.2f} ms  correct={ok}")
tr = two.server_traffic(topo)[d]
print(f"  degraded server sent {tr['tx'] / D:.3f} D, received {tr['rx'] / D:.3f} D")

bal, ok = go(ring_schedule(req, lanes=channel_bindings(topo, health, g), E=2048))
print(f"balance:   {bal.makespan * 1e3:.2f} ms  correct={ok}")
