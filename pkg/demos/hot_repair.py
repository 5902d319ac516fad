"""
Losing a NIC in the middle of a transfer
========================================

A 64 MiB send loses its NIC partway through.  The receiver keeps what it
confirmed, the sender moves to the next NIC in its chain and resends the rest.
"""

import numpy as np

from ftcoll.engine import Engine
from ftcoll.faults import FaultEvent, FaultManager, NicTarget
from ftcoll.topology import build_topology, failover_chain, uniform_spec
from ftcoll.transport import MiB, Connection, TransportConfig, open_endpoint

topo = build_topology(uniform_spec(3, 8))
eng = Engine()
cfg = TransportConfig()
snd = open_endpoint(topo, 0, failover_chain(topo, 0), cfg)
rcv = open_endpoint(topo, 8, failover_chain(topo, 8), cfg)
conn = Connection(eng, topo, snd, rcv, cfg, name="gpu0->gpu8")

fm = FaultManager(eng, topo)
fm.attach(conn)

data = np.arange(4096)
conn.send(data, 64 * MiB, on_done=lambda L: print(f"done at {eng.now * 1e3:.3f} ms"))
print("chain of gpu 0:", snd.chain)

# kill the active NIC about 40% in
fm.inject(FaultEvent(0.55e-3, NicTarget(snd.active_nic)))
eng.run()

rec = fm.records[0]
print(f"verdict {rec.verdict.kind.value} on {rec.verdict.nics}, "
      f"peer aware after {rec.detection_latency * 1e3:.2f} ms")
print("resumed from chunk", conn.history[0]["resume"], "on NIC", snd.active_nic)
print("bytes intact:", np.array_equal(conn.ledger.recv, data))
