import pytest

from ftcoll.engine import Engine, EventKind, SchedulingError


def test_time_then_insertion_order():
    eng = Engine()
    seen = []
    for t, name in [(2.0, "c"), (1.0, "a"), (2.0, "d"), (1.0, "b")]:
        eng.at(t, EventKind.TIMEOUT, lambda e, n=name: seen.append(n), label=name)
    eng.run()
    assert seen == ["a", "b", "c", "d"]
    assert eng.now == 2.0
    assert [r.label for r in eng.trace] == seen


def test_cancel_and_pending():
    eng = Engine()
    hit = []
    ev = eng.at(1.0, EventKind.RECOVERY, lambda e: hit.append(1))
    eng.at(2.0, EventKind.RECOVERY, lambda e: hit.append(2))
    ev.cancel()
    assert eng.pending() == 1
    assert eng.peek_time() == 2.0
    eng.run()
    assert hit == [2]


def test_run_until_parks_clock():
    eng = Engine()
    eng.at(1.0, EventKind.TIMEOUT)
    eng.at(3.0, EventKind.TIMEOUT)
    recs = eng.run_until(2.0)
    assert len(recs) == 1 and eng.now == 2.0
    with pytest.raises(SchedulingError):
        eng.at(1.5, EventKind.TIMEOUT)
    with pytest.raises(SchedulingError):
        eng.run_until(1.0)
    eng.run()
    assert eng.now == 3.0


def test_actions_can_schedule_more():
    eng = Engine()
    times = []

    def tick(e):
        times.append(eng.now)
        if len(times) < 5:
            eng.after(0.5, EventKind.CHUNK_COMPLETE, tick)

    eng.at(0.0, EventKind.CHUNK_COMPLETE, tick)
    eng.run()
    assert times == [0.0, 0.5, 1.0, 1.5, 2.0]


def test_max_events():
    eng = Engine()
    for t in range(10):
        eng.at(float(t), EventKind.TIMEOUT)
    assert len(eng.run(max_events=3)) == 3
    assert eng.pending() == 7
