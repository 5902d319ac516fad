"""
Finding which part broke
========================

Each fault kind is injected under a live transfer.  Probes from both ends
and from a third server tell a dead NIC from a dead cable.  Without the
out-of-band path the peer only finds out when its poll times out.
"""

import numpy as np

from ftcoll.engine import Engine
from ftcoll.faults import FaultConfig, FaultEvent, FaultManager, LinkTarget, NicTarget
from ftcoll.topology import build_topology, failover_chain, uniform_spec
from ftcoll.transport import MiB, Connection, TransportConfig, open_endpoint

topo = build_topology(uniform_spec(3, 2))

for oob in (True, False):
    for target in (NicTarget(0), NicTarget(2), LinkTarget(0, 2)):
        eng = Engine()
        fm = FaultManager(eng, topo, FaultConfig(oob_enabled=oob))
        cfg = TransportConfig()
        conn = Connection(eng, topo, open_endpoint(topo, 0, failover_chain(topo, 0), cfg),
                          open_endpoint(topo, 2, failover_chain(topo, 2), cfg), cfg)
        fm.attach(conn)
        conn.send(np.arange(256), 32 * MiB)
        fm.inject(FaultEvent(1e-4, target))
        eng.run()
        r = fm.records[0]
        print(f"oob={oob!s:5}  {r.component:10} -> {r.verdict.kind.value:14} "
              f"detect {r.detection_latency * 1e3:9.3f} ms  localize {r.localization_latency * 1e3:.3f} ms")
