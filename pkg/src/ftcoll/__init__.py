"""Simulated multi-NIC GPU cluster for studying collectives under NIC and link failures.

The building blocks, bottom up: ``topology`` (servers, GPUs, NICs, rails),
``engine`` (discrete-event clock), ``transport`` (chunked transfers with
failover), ``faults`` (injection, probing, localization), ``collectives``
(ring schedules and a reference oracle), ``executor`` (runs schedules),
``balance`` and ``allreduce_opt`` (strategies for a degraded cluster),
``rerank`` (ring re-ordering) and ``runner``/``cli`` (scenarios and reports).
"""

__version__ = "0.1.0"
