import graphlib

from hypothesis import given, settings, strategies as st

from comesh.kgroup import Entry
from comesh.monitors import (
    ElectionMonitor,
    FifoMonitor,
    InheritanceMonitor,
    ProgressMonitor,
    SafetyMonitor,
    WaitForMonitor,
    find_cycle,
)

from conftest import Bench

graphs = st.dictionaries(st.integers(0, 7), st.sets(st.integers(0, 7), max_size=3), max_size=8)


def acyclic(g):
    try:
        tuple(graphlib.TopologicalSorter({u: set(vs) for u, vs in g.items()}).static_order())
    except graphlib.CycleError:
        return False
    return True


@settings(max_examples=300, deadline=None)
@given(graphs)
def test_find_cycle_agrees_with_toposort(g):
    cyc = find_cycle(g)
    assert (cyc is None) == acyclic(g)
    if cyc:
        assert cyc[0] == cyc[-1]
        for u, v in zip(cyc, cyc[1:]):
            assert v in g[u]


def ev(t, name, **kw):
    return {"t": t, "ev": name, **kw}


def test_safety_flags_overlap_only_between_routines():
    m = SafetyMonitor()
    m(ev(1, "executing", routine=0, instance=1, devices=[1, 2]))
    m(ev(2, "executing", routine=1, instance=1, devices=[3]))
    assert m.ok
    m(ev(3, "executing", routine=2, instance=1, devices=[2, 5]))
    assert [v.detail["shared"] for v in m.violations] == [[2]]


def test_safety_release_clears():
    m = SafetyMonitor()
    m(ev(1, "executing", routine=0, instance=1, devices=[1]))
    m(ev(2, "releasing", routine=0, instance=1))
    m(ev(3, "executing", routine=1, instance=1, devices=[1]))
    assert m.ok and m.max_concurrent == 1


def test_fifo_out_of_order():
    m = FifoMonitor()
    for seq in (1, 3, 2):
        m(ev(seq, "lock_grant", device=4, enq_seq=seq, token=[seq]))
    assert len(m.violations) == 1 and m.violations[0].detail["enq_seq"] == 2


def test_progress_after_arrivals_stop():
    m = ProgressMonitor(arrivals_end=10.0)
    m(ev(5, "stage", routine=0, stage="ACQUIRING_LOCKS"))
    m(ev(12, "stage", routine=1, stage="ACQUIRING_LOCKS"))
    assert len(m.violations) == 1
    m(ev(13, "executing", routine=0))
    m.finish(20)
    assert m.violations[-1].detail["waiting"] == [1]


def test_wait_for_cycle():
    m = WaitForMonitor()
    lock = lambda t, dev, op, rid: m(ev(t, "lock", device=dev, op=op, token=[rid, 1, 0, 0, 0]))
    lock(1, 1, "GRANT", 0)
    lock(2, 2, "GRANT", 1)
    lock(3, 2, "ENQ", 0)
    assert m.ok
    lock(4, 1, "ENQ", 1)
    assert m.violations[0].detail["cycle"] in ([0, 1, 0], [1, 0, 1])


def test_two_live_leaders_flagged():
    m = ElectionMonitor()
    m(ev(1, "active", entity="ROUTINE:0", epoch=0, node=3))
    m(ev(2, "crash", node=3))
    m(ev(3, "active", entity="ROUTINE:0", epoch=0, node=5))
    assert m.ok
    m(ev(4, "active", entity="ROUTINE:0", epoch=0, node=7))
    assert not m.ok


def test_inheritance_missing_and_invented():
    m = InheritanceMonitor()
    a, b, c = (Entry(i, 0, ("x", i)) for i in (1, 2, 3))
    m.on_issued("R", [a, b])
    m.on_committed("R", [a])
    m.on_installed("R", 1, [a, b], "LEADER_FAILURE")
    assert m.ok
    m.on_installed("R", 2, [b, c], "LEADER_FAILURE")
    d = m.violations[0].detail
    assert d["missing"] == [1] and d["invented"] == [3]


def test_quiet_run_passes_every_monitor():
    b = Bench()
    s = b.simple
    b.routine(s[20], [s[1], s[2]], at=20.0)
    b.routine(s[21], [s[5]], at=30.0)
    w = b.world(horizon=500, arrivals_end=100.0)  # crosses one epoch change
    w.run()
    assert all(w.suite.verdicts().values()), w.suite.violations()
    assert w.suite.inheritance.checks
