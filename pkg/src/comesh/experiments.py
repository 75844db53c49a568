"""Scenario execution: seed sweeps, selection-only sweeps and availability curves."""

from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from .analysis import AvailabilityParams, MetricsReport, aggregate, availability, availability_montecarlo, write_trace
from .kgroup import Directory
from .model import EntityId, EntityKind, MembershipView
from .monitors import Violation
from .scenario import Experiment, Scenario, make_workload
from .selection import cluster_devices
from .simnet import build_topology

SELECTION_ONLY = (Experiment.QUORUM_DISTANCE, Experiment.LOAD)


@dataclass
class TrialResult:
    point: str
    seed: int
    records: list[dict[str, Any]]
    verdicts: dict[str, bool]
    violations: list[Violation]


@dataclass
class PointResult:
    label: dict[str, Any]
    name: str
    trials: list[TrialResult] = field(default_factory=list)


@dataclass
class ExperimentResult:
    scenario: Scenario
    points: list[PointResult]
    report: MetricsReport
    availability_rows: list[dict[str, Any]] = field(default_factory=list)

    def violations(self) -> list[tuple[str, int, Violation]]:
        return [(p.name, t.seed, v) for p in self.points for t in p.trials for v in t.violations]

    @property
    def ok(self) -> bool:
        return not self.violations()

    def verdict_rows(self) -> list[dict[str, Any]]:
        rows = []
        for p in self.points:
            for t in p.trials:
                for name, ok in t.verdicts.items():
                    rows.append({"point": p.name, "seed": t.seed, "monitor": name, "ok": ok,
                                 "violations": sum(1 for v in t.violations if v.monitor == name)})
        return rows


def point_name(label: Mapping[str, Any]) -> str:
    return ";".join(f"{k}={v}" for k, v in label.items()) or "default"


# --- single trials --------------------------------------------------------------------


def simulate(sc: Scenario, seed: int, point: str = "default", monitors: bool = True) -> TrialResult:
    world = sc.build(seed, monitors=monitors)
    records = world.run()
    suite = world.suite
    verdicts = suite.verdicts() if suite is not None else {}
    violations = suite.violations() if suite is not None else []
    return TrialResult(point, seed, records, verdicts, violations)


def selection_trial(sc: Scenario, seed: int, point: str = "default") -> TrialResult:
    """Group selection over several epochs with everyone alive; no messages are simulated,
    but the records have the same shape as a full trial's."""
    cfg = sc.config
    topo = build_topology(sc.topology, cfg.N, cfg.smart_fraction, seed)
    clusters = cluster_devices(topo.positions, cfg.devices_per_kgroup, seed)
    routines, _, _ = make_workload(sc.workload, topo, clusters, cfg, seed) if sc.workload.routines else ([], [], None)
    entities = [EntityId(EntityKind.DEVICE_CLUSTER, c.id, c.center) for c in clusters]
    rng = np.random.default_rng([seed, 0x7E])
    for r in sorted(routines, key=lambda r: r.id):
        touched = sorted(r.touched)
        entities.append(EntityId(EntityKind.ROUTINE, r.id, touched[int(rng.integers(len(touched)))]))
    hops = topo.hops()
    smart = topo.smart_ids()
    directory = Directory(cfg, topo.positions, smart, clusters, entities, seed, lambda: hops)
    for ent, r in zip(entities[len(clusters):], sorted(routines, key=lambda r: r.id)):
        directory.set_entity_devices(ent, r.touched)
    view = MembershipView(0, frozenset(range(topo.n)), frozenset(smart))
    alive = set(range(topo.n))
    records: list[dict[str, Any]] = [{"t": 0.0, "ev": "run", "seed": seed, "N": topo.n, "smart": len(smart),
                                      "f": cfg.f, "k": cfg.k, "locking": cfg.locking.value,
                                      "policy": cfg.selection_policy.value, "centralized": cfg.centralized,
                                      "selection_only": True}]
    for e in range(sc.epochs):
        now = e * cfg.epoch_length
        for rec in directory.start_epoch(e, view, now):
            records.append({"t": now, "ev": "group", "entity": rec.entity.key(), "epoch": e,
                            "members": list(rec.members), "local": list(rec.local), "candidates": rec.candidates,
                            "leader": rec.leader(alive), "qdist": directory.quorum_distance(rec, alive)})
        records.append({"t": now, "ev": "epoch", "epoch": e})
    horizon = sc.epochs * cfg.epoch_length
    records.append({"t": horizon, "ev": "end", "horizon": horizon, "sent": 0, "delivered": 0, "dropped": {},
                    "events": 0})
    return TrialResult(point, seed, records, {}, [])


def _trial(args: tuple[Scenario, int, str, bool]) -> TrialResult:
    sc, seed, point, monitors = args
    if sc.experiment in SELECTION_ONLY:
        return selection_trial(sc, seed, point)
    return simulate(sc, seed, point, monitors)


# --- availability -----------------------------------------------------------------------


def availability_rows(sc: Scenario, seed: int = 0) -> list[dict[str, Any]]:
    spec = sc.availability
    S = int(spec.get("S", 100))
    G = int(spec.get("G", 30))
    f = int(spec.get("f", sc.config.f))
    k = int(spec.get("k", 2 * f + 1))
    Fs = spec.get("F") or list(range(0, S + 1))
    trials = int(spec.get("mc_trials", 0))
    rows = []
    for F in Fs:
        p = AvailabilityParams(S, G, k, f, int(F))
        row: dict[str, Any] = {"S": S, "G": G, "k": k, "f": f, "F": int(F), "availability": availability(p)}
        if trials:
            mc = availability_montecarlo(p, trials, seed * 1_000_003 + int(F))
            row.update(mc_estimate=mc.estimate, mc_stderr=mc.stderr, mc_trials=trials)
        rows.append(row)
    return rows


# --- whole scenarios --------------------------------------------------------------------


def run_scenario(sc: Scenario, seeds: Sequence[int] | None = None, jobs: int = 1, monitors: bool = True,
                 keep_records: bool = False) -> ExperimentResult:
    """Every sweep point times every seed.  Results are joined in (point, seed) order
    whatever the worker count, so outputs do not depend on scheduling."""
    seeds = list(seeds) if seeds is not None else sc.seed_list()
    if sc.experiment is Experiment.AVAILABILITY:
        rows = []
        for label, pt in sc.points():
            for r in availability_rows(pt, seeds[0] if seeds else 0):
                rows.append({"point": point_name(label), **r})
        return ExperimentResult(sc, [PointResult(lbl, point_name(lbl)) for lbl, _ in sc.points()], MetricsReport(),
                                rows)
    points = [(label, point_name(label), pt) for label, pt in sc.points()]
    jobs_list = [(pt, seed, name, monitors) for _, name, pt in points for seed in seeds]
    if jobs > 1 and len(jobs_list) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            trials = list(ex.map(_trial, jobs_list))
    else:
        trials = [_trial(j) for j in jobs_list]
    report = MetricsReport()
    results = []
    it = iter(trials)
    for label, name, _ in points:
        pr = PointResult(label, name, [next(it) for _ in seeds])
        report.extend(aggregate([t.records for t in pr.trials], point=name))
        if not keep_records:
            for t in pr.trials:
                t.records = []
        results.append(pr)
    return ExperimentResult(sc, results, report)


def write_outputs(res: ExperimentResult, out: str | Path, traces: bool = False) -> list[Path]:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    if res.scenario.experiment is Experiment.AVAILABILITY:
        path = out / "availability.csv"
        _write_plain(path, res.availability_rows, {"availability": "probability", "mc_estimate": "probability",
                                                   "mc_stderr": "probability"})
        return [path]
    paths = res.report.write_csv(out)
    path = out / "verdicts.csv"
    _write_plain(path, res.verdict_rows(), {})
    paths.append(path)
    if traces:
        tdir = out / "traces"
        tdir.mkdir(exist_ok=True)
        for p in res.points:
            for t in p.trials:
                safe = p.name.replace(";", "_").replace("=", "-")
                tp = tdir / f"{safe}_seed{t.seed}.jsonl"
                with open(tp, "w") as fh:
                    write_trace(t.records, fh)
                paths.append(tp)
    return paths


def _write_plain(path: Path, rows: Sequence[Mapping[str, Any]], units: Mapping[str, str]) -> None:
    cols: list[str] = []
    for r in rows:
        for c in r:
            if c not in cols:
                cols.append(c)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"{c} [{units[c]}]" if c in units else c for c in cols])
        for r in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in (r.get(c, "") for c in cols)])


# --- counterexamples --------------------------------------------------------------------


def excerpt(records: Sequence[Mapping[str, Any]], v: Violation, limit: int = 25) -> list[Mapping[str, Any]]:
    """The records nearest a violation that mention what it involves."""
    routines: set[int] = set()
    devices: set[int] = set()
    entities: set[str] = set()
    d = v.detail
    for key in ("routine", "other"):
        val = d.get(key)
        if isinstance(val, (list, tuple)) and val:
            routines.add(int(val[0]))
        elif isinstance(val, int):
            routines.add(val)
    for key in ("cycle", "waiting"):
        routines.update(int(x) for x in d.get(key, []) or [])
    for key in ("shared",):
        devices.update(int(x) for x in d.get(key, []) or [])
    if isinstance(d.get("device"), int):
        devices.add(d["device"])
    if isinstance(d.get("entity"), str):
        entities.add(d["entity"])

    def relevant(r: Mapping[str, Any]) -> bool:
        if r["ev"] in ("crash", "restart", "chaos_kill"):
            return True
        if r.get("routine") in routines or r.get("device") in devices or r.get("entity") in entities:
            return True
        tok = r.get("token")
        return bool(tok) and tok[0] in routines

    hits = [r for r in records if r["t"] <= v.t + 1e-9 and relevant(r)]
    return hits[-limit:]


def finite(xs: Iterable[float]) -> list[float]:
    return [x for x in xs if math.isfinite(x)]
