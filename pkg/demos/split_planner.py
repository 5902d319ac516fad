"""
Planning the split for a degraded server
========================================

One server lost part of its NIC bandwidth.  Compare the plain ring with
a split where the degraded server only joins the first share of the data.
"""

import numpy as np

from ftcoll.allreduce_opt import PartitionInputs, optimal_partition, threshold, total_time, total_time_grid

n, g = 2, 8
print(f"split starts paying off above X = {threshold(n, g):.4f}")

# lost half of its bandwidth
inp = PartitionInputs(n, g, X=0.5)
plan = optimal_partition(inp)
print(f"Y* = {plan.Y:.6f}  T = {plan.T_total:.4f}  (ring alone: {total_time(0.0, inp):.4f})")

# the whole curve, for a look at where the kink sits
Y = np.linspace(0, 1, 11)
for y, t in zip(Y, total_time_grid(Y, inp)):
    print(f"  Y={y:.1f}  T={t:.4f}")

# a mild loss keeps the ring
print(optimal_partition(PartitionInputs(n, g, X=0.2)).strategy.value)
