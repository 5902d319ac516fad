"""
Rebalancing against plain failover
==================================

Two 8-GPU servers, NIC 3 of server 0 down.  Hot repair piles the dead NIC's
channel onto its neighbour; balancing spreads it over all seven survivors.
"""

import numpy as np

from ftcoll.balance import channel_bindings
from ftcoll.collectives import CollectiveRequest, oracle, results, ring_schedule
from ftcoll.executor import Fabric, execute
from ftcoll.topology import HealthMap, build_topology, uniform_spec
from ftcoll.transport import TransportConfig

topo = build_topology(uniform_spec(2, 8))
cfg = TransportConfig(alpha=0.0)
rng = np.random.default_rng(0)
inputs = {r: rng.integers(-9, 9, 2048) for r in range(16)}
req = CollectiveRequest("AllReduce", 1 << 30, tuple(range(16)), channels=8)

base = execute(ring_schedule(req, E=2048), inputs, Fabric(topo, transport=cfg)).makespan
print(f"healthy: {base * 1e3:.2f} ms")

health = HealthMap([3])
for strategy in ("hot_repair", "balance"):
    sched = ring_schedule(req, lanes=channel_bindings(topo, health, 8, strategy), E=2048)
    res = execute(sched, inputs, Fabric(topo, transport=cfg, physical=health.copy(), known=health.copy()))
    ok = all(np.array_equal(v, results(req, sched, res.buffers)[r])
             for r, v in oracle(req, inputs, Ep=sched.Ep).items())
    print(f"{strategy:>10}: {res.makespan * 1e3:.2f} ms  x{res.makespan / base:.4f}  correct={ok}")
