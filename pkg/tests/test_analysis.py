import csv
import io
import itertools
import json
from fractions import Fraction

import pytest
from hypothesis import assume, given, settings, strategies as st

from comesh.analysis import (
    AvailabilityParams,
    InvalidParameter,
    TraceParseError,
    aggregate,
    availability,
    availability_exact,
    availability_montecarlo,
    max_node_bandwidth,
    max_node_peak_rate,
    parse_trace,
    write_trace,
)

from conftest import Bench


def enumerate_availability(S, G, k, f, F):
    """Brute force: every failure set against every ordered draw of G groups."""
    groups = list(itertools.combinations(range(S), k))
    good = total = 0
    for failed in itertools.combinations(range(S), F):
        bad = set(failed)
        ok_group = [len(bad.intersection(g)) <= f for g in groups]
        n_ok = sum(ok_group)
        good += n_ok**G
        total += len(groups) ** G
    return Fraction(good, total)


def test_hand_counted_case():
    # 8 of the 120 triples hold both failed nodes
    assert availability_exact(AvailabilityParams(10, 1, 3, 1, 2)) == Fraction(14, 15)


@pytest.mark.parametrize("S,G,k,f,F", [
    (10, 1, 3, 1, 2), (10, 1, 3, 1, 3), (7, 2, 3, 1, 3), (6, 3, 5, 2, 4), (8, 2, 1, 0, 2), (5, 1, 5, 2, 5),
])
def test_closed_form_matches_enumeration(S, G, k, f, F):
    assert availability_exact(AvailabilityParams(S, G, k, f, F)) == enumerate_availability(S, G, k, f, F)


def test_few_failures_always_available():
    for F in range(3):
        assert availability(AvailabilityParams(50, 10, 5, 2, F)) == 1.0


def test_bad_parameters():
    with pytest.raises(InvalidParameter):
        availability(AvailabilityParams(3, 1, 5, 2, 1))
    with pytest.raises(InvalidParameter):
        availability(AvailabilityParams(10, 1, 3, 1, 11))
    with pytest.raises(InvalidParameter):
        availability(AvailabilityParams(10, 0, 3, 1, 1))


params = st.integers(3, 40).flatmap(lambda S: st.tuples(
    st.just(S), st.integers(1, 6), st.integers(0, 4), st.integers(0, S)))


@settings(max_examples=150, deadline=None)
@given(params)
def test_monotone_in_failures_groups_and_tolerance(args):
    S, G, f, F = args
    k = 2 * f + 1
    assume(k <= S)
    a = availability(AvailabilityParams(S, G, k, f, F))
    assert 0.0 <= a <= 1.0
    if F < S:
        assert availability(AvailabilityParams(S, G, k, f, F + 1)) <= a
    assert availability(AvailabilityParams(S, G + 1, k, f, F)) <= a
    # more tolerance at the same group size can only help
    if f + 1 <= k:
        assert availability(AvailabilityParams(S, G, k, f + 1, F)) >= a


@pytest.mark.parametrize("p", [AvailabilityParams(40, 4, 5, 2, 8), AvailabilityParams(100, 10, 3, 1, 10)])
def test_montecarlo_within_four_stderr(p):
    mc = availability_montecarlo(p, 20_000, seed=3)
    assert abs(mc.estimate - availability(p)) <= 4 * mc.stderr


def test_montecarlo_no_failures():
    mc = availability_montecarlo(AvailabilityParams(30, 5, 3, 1, 0), 1000, seed=0)
    assert mc.estimate == 1.0 and mc.successes == 1000


# --- traces ----------------------------------------------------------------------


def test_trace_round_trip():
    recs = [{"t": 0.0, "ev": "run", "seed": 1}, {"t": 1.5, "ev": "x", "v": [1, 2]}]
    buf = io.StringIO()
    write_trace(recs, buf)
    assert parse_trace(buf.getvalue().splitlines()) == recs


def test_parse_error_names_the_line():
    lines = [json.dumps({"t": 0, "ev": "run"}), "", "{broken", json.dumps({"t": 1, "ev": "x"})]
    with pytest.raises(TraceParseError) as err:
        parse_trace(lines)
    assert err.value.line == 3
    with pytest.raises(TraceParseError) as err:
        parse_trace([json.dumps({"t": "soon", "ev": "x"})])
    assert err.value.line == 1


def test_incomplete_trace_rejected():
    with pytest.raises(TraceParseError):
        aggregate([[{"t": 0, "ev": "run", "seed": 0, "k": 3}]])


def test_lone_routine_gives_one_client_sample():
    b = Bench()
    b.routine(b.simple[9], [b.simple[0], b.simple[1]])
    rep = aggregate([b.world().run()])
    assert len(rep.client_delay) == 1 and rep.client_delay[0]["delay"] > 0
    assert rep.sync_delay == []


def test_queued_routine_gives_one_sync_sample():
    b = Bench()
    s = b.simple
    b.routine(s[20], [s[1]], at=20.0, duration=30.0)
    b.routine(s[21], [s[1]], at=25.0)
    rep = aggregate([b.world().run()])
    assert [(r["routine"], r["blocker"]) for r in rep.sync_delay] == [(1, 0)]
    assert rep.sync_delay[0]["delay"] > 0
    # the blocked one is not a client sample
    assert [r["routine"] for r in rep.client_delay] == [0]


def test_csv_headers_carry_units(tmp_path):
    b = Bench()
    b.routine(b.simple[9], [b.simple[0]])
    rep = aggregate([b.world().run()], point="p")
    rep.write_csv(tmp_path)
    for metric, (col, unit) in rep.VALUES.items():
        with open(tmp_path / f"{metric}.csv") as fh:
            assert f"{col} [{unit}]" in next(csv.reader(fh))
    with open(tmp_path / "summary.csv") as fh:
        assert next(csv.reader(fh))[:3] == ["metric", "subset", "unit"]


def test_peak_rate_bounds_average_rate():
    b = Bench()
    b.routine(b.simple[9], [b.simple[0]])
    rep = aggregate([b.world(horizon=400).run()])
    peak = max_node_peak_rate(rep, "e2e")
    # windows tile the run, so the busiest one carries at least the mean
    assert peak >= max_node_bandwidth(rep, "e2e") / 400 * (1 - 1e-9)
    assert peak <= max_node_bandwidth(rep, "e2e") / rep.bandwidth_peak[0]["window"] * (1 + 1e-9)
