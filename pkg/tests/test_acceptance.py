"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line (collected in the terminal summary) and then
asserts, so a failing criterion shows up both ways.
"""

import itertools
import random
import time
from pathlib import Path

import numpy as np
import pytest

from comesh.analysis import (
    AvailabilityParams,
    availability,
    availability_exact,
    availability_montecarlo,
    max_node_bandwidth,
)
from comesh.experiments import run_scenario, write_outputs
from comesh.kgroup import Directory
from comesh.model import Config, EntityId, EntityKind, MembershipView, SelectionPolicy, validate_config
from comesh.scenario import load_scenario
from comesh.selection import LshParams, cluster_devices
from comesh.simnet import build_topology

from test_analysis import enumerate_availability

SCEN = Path(__file__).resolve().parent.parent / "scenarios"


def scenario(name):
    return load_scenario(SCEN / f"{name}.yaml")


def by_point(res, metric, **where):
    return {p.name: res.report.values(metric, point=p.name, **where) for p in res.points}


def spread(xs):
    return (max(xs) - min(xs)) / min(xs)


# --- 1 ---------------------------------------------------------------------------


def test_c1_availability(verdict):
    t0 = time.perf_counter()
    S, G, k, f = 100, 30, 11, 5
    at = lambda F: availability(AvailabilityParams(S, G, k, f, F))
    exact_ok = all(at(F) == 1.0 for F in range(f + 1))
    a45 = at(45)
    grid = list(range(0, 60, 3))
    worst = 0.0
    for F in grid:
        p = AvailabilityParams(S, G, k, f, F)
        mc = availability_montecarlo(p, 100_000, seed=F)
        worst = max(worst, abs(mc.estimate - at(F)) / mc.stderr)
    enum_ok = True
    for S_ in range(1, 11):
        for f_ in range(0, 3):
            for k_ in range(1, S_ + 1):
                for F in range(S_ + 1):
                    p = AvailabilityParams(S_, 1, k_, f_, F)
                    enum_ok &= availability_exact(p) == enumerate_availability(S_, 1, k_, f_, F)
    took = time.perf_counter() - t0
    ok = exact_ok and a45 > 0.5 and worst <= 4 and enum_ok and took < 60
    verdict("C1", ok, f"F<=5 exact 1.0: {exact_ok}; A(F=45)={a45:.3g} (need >0.5); worst MC gap {worst:.2f} stderr "
                      f"over {len(grid)} points; enumeration exact: {enum_ok}; {took:.1f}s")
    assert ok


# --- 2, 4 ------------------------------------------------------------------------


@pytest.fixture(scope="module")
def safety_runs():
    t0 = time.perf_counter()
    sc = scenario("safety_chaos")
    res = run_scenario(sc, list(range(200)), keep_records=True)
    took = time.perf_counter() - t0
    kills = executing = 0
    for p in res.points:
        for t in p.trials:
            kills += sum(1 for r in t.records if r["ev"] == "chaos_kill")
            executing += sum(1 for r in t.records if r["ev"] == "executing")
            t.records = []
    return res, took, kills, executing


def test_c2_safety(verdict, safety_runs):
    res, took, kills, executing = safety_runs
    per = {p.name: len(p.trials) for p in res.points}
    bad = [(p.name, t.seed) for p in res.points for t in p.trials if not t.verdicts["safety"]]
    ok = not bad and min(per.values()) >= 200 and took < 600 and kills > 0 and executing > 0
    verdict("C2", ok, f"{sum(per.values())} trials {per}, {kills} chaos kills, {executing} executions, "
                      f"{len(bad)} safety violations, {took:.0f}s")
    assert ok


CASES = {
    "1": ["leader", "mid_lock"],
    "2a": ["old_leader"],
    "2b": ["new_leader"],
    "2c": ["old_member"],
    "2d": ["new_member"],
    "multi": ["mid_lock", "leader", "old_leader", "new_leader", "old_member", "new_member"],
}


def test_c3_inheritance(verdict):
    base = scenario("safety_chaos")
    counts = {}
    failed = []
    for case, kinds in CASES.items():
        ov = {"locking": "SLA", "churn.cases": kinds, "churn.prob": 1.0}
        if case == "multi":
            ov["churn.max_kills"] = 8
        res = run_scenario(base.with_overrides(ov), list(range(20)), keep_records=True)
        n = 0
        for t in res.points[0].trials:
            if not any(r["ev"] == "chaos_kill" for r in t.records):
                continue
            n += 1
            if not t.verdicts["inheritance"]:
                failed.append((case, t.seed))
        counts[case] = n
    total = sum(counts.values())
    ok = not failed and total >= 100 and all(counts.values())
    verdict("C3", ok, f"{total} schedules with kills {counts}, inheritance failures {failed}")
    assert ok


def test_c4_progress_and_deadlock(verdict, safety_runs):
    res = run_scenario(scenario("progress_chained"), list(range(30)), keep_records=True)
    trials = res.points[0].trials
    drained = sum(1 for t in trials if t.verdicts["progress"])
    waited = sum(1 for t in trials if any(r["ev"] == "lock_wait" for r in t.records))
    chaos, _, _, _ = safety_runs
    cycles = [t.seed for p in list(chaos.points) + list(res.points) for t in p.trials if not t.verdicts["deadlock"]]
    ok = drained == len(trials) and waited > 0 and not cycles
    verdict("C4", ok, f"waiting set drained in {drained}/{len(trials)} chained SLA trials ({waited} with queueing); "
                      f"wait-for cycles in {len(cycles)} SLA/OLA traces")
    assert ok


# --- 5, 6 ------------------------------------------------------------------------


@pytest.fixture(scope="module")
def selection_runs():
    return run_scenario(scenario("quorum_distance"), list(range(5)))


def test_c5_lsh_locality(verdict, selection_runs):
    res = selection_runs
    Ns = [50, 250, 500, 750, 1000]
    mean = {pol: [float(np.mean(by_point(res, "quorum_distance")[f"N={N};selection_policy={pol}"])) for N in Ns]
            for pol in ("LSH_MIX", "RANDOM")}
    lsh, rnd = mean["LSH_MIX"], mean["RANDOM"]
    flat = max(lsh) / min(lsh) <= 2.0
    grows = rnd[-1] > rnd[0] and all(b >= a for a, b in zip(rnd, rnd[1:]))
    base = scenario("quorum_distance")
    m3 = {pol: float(np.mean(run_scenario(base.with_overrides({"N": 1000, "lsh_m": 3, "selection_policy": pol}),
                                          list(range(5))).report.values("quorum_distance")))
          for pol in ("LSH_MIX", "RANDOM")}
    ratio = m3["LSH_MIX"] / m3["RANDOM"]
    paper = 2.4 / 5.3
    near = abs(ratio - paper) <= 0.3 * paper
    ok = flat and grows and ratio < 0.5 and near
    verdict("C5", ok, f"LSH {[round(x, 2) for x in lsh]} (max/min {max(lsh) / min(lsh):.2f}), RANDOM "
                      f"{[round(x, 2) for x in rnd]}; m=3 N=1000 LSH {m3['LSH_MIX']:.2f} vs RANDOM {m3['RANDOM']:.2f} "
                      f"ratio {ratio:.2f} (reference {paper:.2f} +-30%)")
    assert ok


def test_c6_candidate_count(verdict, selection_runs):
    Ns = [50, 250, 500, 750, 1000]
    pts = by_point(selection_runs, "candidate_count")
    means = [float(np.mean(pts[f"N={N};selection_policy=LSH_MIX"])) for N in Ns]
    mono = all(b > a for a, b in zip(means, means[1:]))
    ok = mono and 0.5 * 13.0 <= means[0] <= 1.5 * 13.0
    verdict("C6", ok, f"mean candidates {[round(x, 1) for x in means]} over N={Ns}")
    assert ok


# --- 7, 8 ------------------------------------------------------------------------


def op_rows(res, point, op, cause=None):
    return [r for r in res.report.kgroup_ops
            if r["point"] == point and r["op"] == op and (cause is None or r["cause"] == cause)]


def test_c7_kgroup_micro_ops(verdict):
    res = run_scenario(scenario("kgroup_micro"), list(range(4)))
    names = [p.name for p in res.points]
    el = [float(np.mean([r["delay"] for r in op_rows(res, n, "election", "EPOCH_START")])) for n in names]
    qu = [float(np.mean([r["delay"] for r in op_rows(res, n, "quorum")])) for n in names]
    quiet = [r["delay"] / r["rtt"] for n in names for r in op_rows(res, n, "election", "EPOCH_START")
             if r["rtt"] != ""]
    fail = [r["delay"] / r["rtt"] for n in names for r in op_rows(res, n, "election", "LEADER_FAILURE")]
    exact = bool(quiet) and max(quiet) <= 1 + 1e-9
    # zero-failure elections must be exactly one round trip
    runs = run_scenario(scenario("kgroup_micro").with_overrides({"f": 2, "churn.mode": "NONE"}), [0])
    calm = [r["delay"] / r["rtt"] for r in runs.report.kgroup_ops if r["op"] == "election" and r["rtt"] != ""]
    exact = exact and bool(calm) and all(abs(x - 1.0) < 1e-9 for x in calm)
    bounded = bool(fail) and max(fail) <= 5 + 1e-9
    ok = exact and bounded and spread(el) < 0.25 and spread(qu) < 0.25
    verdict("C7", ok, f"k=3..11 election means {[round(x, 1) for x in el]} (spread {spread(el):.0%}), quorum means "
                      f"{[round(x, 1) for x in qu]} (spread {spread(qu):.0%}); quiet election = 1 RTT: {exact}; "
                      f"failover max {max(fail):.2f} RTT over {len(fail)}")
    assert ok


def test_c8_churn(verdict):
    res = run_scenario(scenario("churn"), list(range(10)))
    calm, churn = (p.name for p in res.points)
    cd = {n: float(np.median(res.report.values("client_delay", point=n))) for n in (calm, churn)}
    rise = cd[churn] / cd[calm] - 1
    med = lambda n, op: float(np.median([r["delay"] for r in op_rows(res, n, op)]))
    ops = {op: (med(calm, op), med(churn, op)) for op in ("election", "quorum")}
    steady = all(abs(b - a) <= 0.1 * a for a, b in ops.values())
    ok = rise < 0.5 and steady
    verdict("C8", ok, f"median client delay {cd[calm]:.1f} -> {cd[churn]:.1f} ({rise:+.0%}) at 40% churn; "
                      f"k-group op medians {ops}")
    assert ok


# --- 9 ---------------------------------------------------------------------------


def test_c9_bandwidth_vs_central(verdict):
    res = run_scenario(scenario("bandwidth_baseline"), list(range(3)))
    peak = {p.name: max_node_bandwidth(res.report, "e2e", point=p.name) for p in res.points}
    ratios = {n: peak[f"centralized=True;workload.routines={n}"] / peak[f"centralized=False;workload.routines={n}"]
              for n in (10, 20)}
    growth = peak["centralized=False;workload.routines=20"] / peak["centralized=False;workload.routines=10"] - 1
    ok = min(ratios.values()) >= 5 and growth < 0.25
    verdict("C9", ok, f"central/decentral busiest-node bytes {({k: round(v, 2) for k, v in ratios.items()})} "
                      f"(need >=5); decentral growth when routines double {growth:+.0%}")
    assert ok


# --- 10, 11 ----------------------------------------------------------------------


def test_c10_determinism(verdict, tmp_path):
    same = True
    files = 0
    for name in ("sync_delay", "safety_chaos", "quorum_distance"):
        sc = scenario(name)
        for d in ("a", "b"):
            write_outputs(run_scenario(sc, [0, 1]), tmp_path / name / d)
        for p in sorted((tmp_path / name / "a").glob("*.csv")):
            files += 1
            same &= p.read_bytes() == (tmp_path / name / "b" / p.name).read_bytes()
    verdict("C10", same, f"{files} CSV files byte-identical across re-runs: {same}")
    assert same


def test_c11_zero_message_selection(verdict):
    rng = random.Random(2024)
    topos = {}
    for seed, N in itertools.product(range(2), (60, 250)):
        topo = build_topology("GRID3D", N, 0.4, seed)
        topos[(seed, N)] = (topo, cluster_devices(topo.positions, 10, seed))
    agree = 0
    cases = 1000
    for _ in range(cases):
        (seed, N), (topo, clusters) = rng.choice(sorted(topos.items(), key=lambda kv: kv[0]))
        f = rng.choice([1, 2])
        policy = rng.choice([SelectionPolicy.LSH_MIX, SelectionPolicy.RANDOM])
        cfg = validate_config(Config(N=N, f=f, selection_policy=policy))
        smart = topo.smart_ids()
        dead = set(rng.sample(smart, rng.randint(0, f)))
        alive = [n for n in range(N) if n not in dead]
        epoch = rng.randint(0, 10_000)
        c = rng.choice(clusters)
        ent = EntityId(EntityKind.DEVICE_CLUSTER, c.id, c.center)
        ents = [EntityId(EntityKind.DEVICE_CLUSTER, x.id, x.center) for x in clusters]
        picks = set()
        for node in range(5):
            # each node starts from its own copy of the view, listed in its own order
            order = alive[:]
            random.Random(node).shuffle(order)
            view = MembershipView(0, frozenset(order), frozenset(reversed(smart)))
            d = Directory(cfg, topo.positions, smart, clusters, ents, seed, topo.hops)
            loc = params = None
            if policy is SelectionPolicy.LSH_MIX:
                loc = d.locality(epoch)
                params = LshParams.derive(seed, epoch, cfg.lsh_m, cfg.lsh_l, cfg.lsh_r, loc.augmented.shape[1])
            picks.add(tuple(d.select(view, ent, epoch, loc, params)[0]))
        agree += len(picks) == 1
    ok = agree == cases
    verdict("C11", ok, f"{agree}/{cases} randomized cases gave one group at all 5 nodes")
    assert ok
