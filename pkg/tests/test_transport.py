import numpy as np
import pytest

from ftcoll.engine import Engine
from ftcoll.topology import HealthMap, build_topology, failover_chain, uniform_spec
from ftcoll.transport import (
    GARBAGE,
    MiB,
    ChunkLedger,
    Connection,
    NoBackup,
    Port,
    ReceiverState,
    SenderState,
    TransportConfig,
    TransportError,
    migrate,
    next_healthy,
    open_endpoint,
    register_multi,
    rollback,
    send_chunks,
)


@pytest.fixture
def topo():
    return build_topology(uniform_spec(2, 4))


def pair(topo, cfg=None, sender_gpu=0, receiver_gpu=4):
    cfg = cfg or TransportConfig()
    eng = Engine()
    snd = open_endpoint(topo, sender_gpu, failover_chain(topo, sender_gpu), cfg)
    rcv = open_endpoint(topo, receiver_gpu, failover_chain(topo, receiver_gpu), cfg)
    return eng, Connection(eng, topo, snd, rcv, cfg)


def test_ledger_chunking():
    L = ChunkLedger(np.arange(10), nbytes=5 * MiB, chunk_size=2 * MiB)
    assert L.total_chunks == 3
    assert [L.chunk_bytes(i) for i in range(3)] == [2 * MiB, 2 * MiB, MiB]
    assert L.elems(2) == slice(8, 10)
    with pytest.raises(TransportError):
        L.complete(0)
    L.land_partial(0, MiB)
    assert L.receiver_state[0] == ReceiverState.PARTIAL
    assert np.all(L.recv[:2] == GARBAGE)
    L.confirm(0)
    L.complete(0)
    assert L.sender_state[0] == SenderState.COMPLETED and not L.done
    assert not L.payload.flags.writeable


def test_rollback_rewinds_inflight_and_partial(topo):
    cfg = TransportConfig()
    snd = open_endpoint(topo, 0, failover_chain(topo, 0), cfg)
    L = send_chunks(snd, np.arange(8), MiB, 4 * MiB)
    with pytest.raises(TransportError):
        rollback(snd)
    for i in range(4):
        L.sender_state[i] = SenderState.IN_FLIGHT
    L.confirm(0)
    L.complete(0)
    L.confirm(1)
    L.land_partial(2, MiB // 2)
    snd.fault_pending = True
    assert rollback(snd) == (1, 1)
    assert L.sender_state[1:] == [SenderState.NOT_SENT] * 3
    assert L.receiver_state[2] == ReceiverState.NOT_RECEIVED


def test_next_healthy_and_migrate(topo):
    cfg = TransportConfig(multi_registration=False)
    ep = open_endpoint(topo, 0, failover_chain(topo, 0), cfg)
    assert ep.registered_nics == {0}
    h = HealthMap([0, 1])
    nic = migrate(ep, h)
    assert nic == ep.active_nic and h.nic_ok(nic) and ep.registrations_paid == 1
    h.restore_nic(0)
    assert next_healthy(ep, h) == 0  # recovered NICs come back into play
    with pytest.raises(NoBackup):
        next_healthy(ep, HealthMap(range(4)))
    with pytest.raises(TransportError):
        register_multi(ep, {5}, topo)


def test_port_backfill():
    p = Port(0, "tx")
    p.reserve(1.0, 1.0, "a")
    assert p.earliest(0.0, 0.5) == 0.0
    assert p.earliest(0.0, 1.5) == 2.0
    p.truncate("a", 1.5)
    assert p.earliest(1.5, 0.1) == 1.5


def test_clean_transfer_timing(topo):
    cfg = TransportConfig(alpha=1e-6)
    eng, conn = pair(topo, cfg)
    data = np.arange(64)
    done = []
    conn.send(data, 16 * MiB, lambda L: done.append(eng.now))
    eng.run()
    assert np.array_equal(conn.ledger.recv, data)
    assert done == [pytest.approx(2e-6 + 16 * MiB / 50e9)]
    assert conn.ports.traffic()[0]["tx"] == 16 * MiB


@pytest.mark.parametrize("frac", [0.0, 0.3, 0.5, 0.99])
def test_interrupt_and_recover_is_lossless(topo, frac):
    cfg = TransportConfig()
    eng, conn = pair(topo, cfg)
    data = np.arange(1, 161)
    conn.send(data, 10 * MiB)
    health = HealthMap()

    def fail(ev):
        health.fail_nic(0)
        conn.physical.fail_nic(0)
        conn.interrupt(eng.now)

    from ftcoll.engine import EventKind
    t_fail = cfg.alpha + frac * 10 * MiB / 50e9
    eng.at(t_fail, EventKind.FAULT_INJECT, fail)
    eng.run_until(t_fail)
    assert conn.failed
    conn.recover(health)
    eng.run()
    assert conn.ledger.done
    assert np.array_equal(conn.ledger.recv, data)
    assert conn.sender.active_nic != 0


def test_send_while_busy_is_rejected(topo):
    eng, conn = pair(topo)
    conn.send(np.arange(4), MiB)
    with pytest.raises(TransportError):
        conn.send(np.arange(4), MiB)


def test_lazy_registration_costs_time(topo):
    fast = TransportConfig(multi_registration=True)
    slow = TransportConfig(multi_registration=False)
    out = {}
    for cfg in (fast, slow):
        eng, conn = pair(topo, cfg)
        conn.send(np.arange(16), 4 * MiB)
        conn.physical.fail_nic(0)
        conn.interrupt(0.0)
        conn.recover(HealthMap([0]))
        eng.run()
        out[cfg.multi_registration] = eng.now
    assert out[False] - out[True] == pytest.approx(slow.registration_cost)
