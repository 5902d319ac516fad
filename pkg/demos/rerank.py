"""
Re-ordering a ring around missing rails
=======================================

Servers 1 and 2 have no rail in common, so the edge between them stalls
the ring.  Moving server 0 in between fixes it.
"""

import numpy as np

from ftcoll.rerank import LogicalRing, rerank_detail

ring = LogicalRing((0, 1, 2, 3), {0: {0, 1}, 1: {1}, 2: {0}, 3: {0, 1}})
res = rerank_detail(ring)
print("before", ring.order, "weakest edge", ring.min_adjacent())
print("after ", res.ring.order, "weakest edge", res.ring.min_adjacent(), "moves", res.moves)

# a bigger cluster with rails knocked out at random
rng = np.random.default_rng(0)
sets = {s: {r for r in range(8) if rng.random() > 0.4} or {0} for s in range(12)}
big = LogicalRing(tuple(range(12)), sets)
out = rerank_detail(big)
print(f"12 servers: weakest edge {big.min_adjacent()} -> {out.ring.min_adjacent()} "
      f"(floor {out.floor}), {len(out.moves)} moves, still short: {out.residual}")
