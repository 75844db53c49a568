"""Availability math and metric extraction from simulation traces."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Any, Iterable, Iterator, Mapping, Sequence, TextIO

import numpy as np

from . import kernels


class InvalidParameter(ValueError):
    pass


class TraceParseError(ValueError):
    def __init__(self, line: int, reason: str) -> None:
        super().__init__(f"line {line}: {reason}")
        self.line = line


# --- availability ------------------------------------------------------------------------


@dataclass(frozen=True)
class AvailabilityParams:
    S: int  # smart nodes
    G: int  # groups
    k: int  # group size
    f: int  # tolerated failures per group
    F: int  # simultaneous failures

    def validate(self) -> "AvailabilityParams":
        for name in ("S", "G", "k", "f", "F"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or isinstance(v, bool) or v < 0:
                raise InvalidParameter(f"{name} must be a non-negative integer, got {v!r}")
        if self.k < 1 or self.G < 1:
            raise InvalidParameter("k and G must be at least 1")
        if self.k > self.S:
            raise InvalidParameter(f"k={self.k} exceeds S={self.S}")
        if self.F > self.S:
            raise InvalidParameter(f"F={self.F} exceeds S={self.S}")
        return self


def group_survival_exact(p: AvailabilityParams) -> Fraction:
    """Probability that one uniform k-subset holds at most f of the F failed nodes."""
    p.validate()
    S, k, f, F = p.S, p.k, p.f, p.F
    lo = max(0, k + F - S)
    good = sum(math.comb(S - F, k - i) * math.comb(F, i) for i in range(lo, min(f, k, F) + 1))
    return Fraction(good, math.comb(S, k))


def availability_exact(p: AvailabilityParams) -> Fraction:
    p.validate()
    if p.F <= p.f:
        return Fraction(1)
    # groups treated as independent draws, hence the plain power
    return group_survival_exact(p) ** p.G


def availability(p: AvailabilityParams) -> float:
    if p.validate().F <= p.f:
        return 1.0
    return float(availability_exact(p))


@dataclass(frozen=True)
class MonteCarloEstimate:
    estimate: float
    stderr: float
    successes: int
    trials: int


def availability_montecarlo(p: AvailabilityParams, trials: int, seed: int) -> MonteCarloEstimate:
    p.validate()
    if trials < 1:
        raise InvalidParameter("trials must be at least 1")
    ok = int(kernels.mc_availability(p.S, p.G, p.k, p.f, p.F, trials, seed & 0xFFFFFFFFFFFFFFFF))
    # shrunk proportion keeps the error bar honest when every trial agrees
    shrunk = (ok + 0.5) / (trials + 1)
    return MonteCarloEstimate(ok / trials, math.sqrt(shrunk * (1 - shrunk) / trials), ok, trials)


# --- trace I/O ---------------------------------------------------------------------------


def write_trace(records: Iterable[Mapping[str, Any]], fh: TextIO) -> None:
    for rec in records:
        fh.write(json.dumps(rec, separators=(",", ":"), sort_keys=False) + "\n")


def parse_trace(lines: Iterable[str]) -> list[dict[str, Any]]:
    out = []
    for no, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise TraceParseError(no, f"invalid JSON ({exc.msg})") from None
        if not isinstance(rec, dict):
            raise TraceParseError(no, "record is not an object")
        if not isinstance(rec.get("t"), (int, float)) or not isinstance(rec.get("ev"), str):
            raise TraceParseError(no, "record needs numeric 't' and string 'ev'")
        out.append(rec)
    return out


def read_trace(path: str | Path) -> list[dict[str, Any]]:
    with open(path) as fh:
        return parse_trace(fh)


# --- metrics -----------------------------------------------------------------------------

Inst = tuple[int, int]  # (routine, instance)


@dataclass
class MetricsReport:
    client_delay: list[dict[str, Any]] = field(default_factory=list)
    sync_delay: list[dict[str, Any]] = field(default_factory=list)
    temporal_load: list[dict[str, Any]] = field(default_factory=list)
    spatial_load: list[dict[str, Any]] = field(default_factory=list)
    quorum_distance: list[dict[str, Any]] = field(default_factory=list)
    kgroup_overlap: list[dict[str, Any]] = field(default_factory=list)
    candidate_count: list[dict[str, Any]] = field(default_factory=list)
    bandwidth: list[dict[str, Any]] = field(default_factory=list)
    bandwidth_peak: list[dict[str, Any]] = field(default_factory=list)
    kgroup_ops: list[dict[str, Any]] = field(default_factory=list)
    group_survival: list[dict[str, Any]] = field(default_factory=list)

    # metric name -> (value column, unit)
    VALUES = {
        "client_delay": ("delay", "time_units"),
        "sync_delay": ("delay", "time_units"),
        "temporal_load": ("fraction", "fraction_of_run"),
        "spatial_load": ("groups", "groups"),
        "quorum_distance": ("hops", "hops"),
        "kgroup_overlap": ("overlap", "fraction_of_k"),
        "candidate_count": ("candidates", "nodes"),
        "bandwidth": ("total", "bytes"),
        "bandwidth_peak": ("rate", "bytes_per_time_unit"),
        "kgroup_ops": ("delay", "time_units"),
        "group_survival": ("alive", "fraction"),
    }

    def metrics(self) -> list[str]:
        return list(self.VALUES)

    def values(self, metric: str, **where: Any) -> list[float]:
        col = self.VALUES[metric][0]
        return [float(r[col]) for r in getattr(self, metric) if all(r.get(k) == v for k, v in where.items())]

    def extend(self, other: "MetricsReport") -> None:
        for m in self.metrics():
            getattr(self, m).extend(getattr(other, m))

    def summary(self) -> list[dict[str, Any]]:
        rows = []
        for m in self.metrics():
            groups: dict[tuple, list[float]] = {}
            col = self.VALUES[m][0]
            for r in getattr(self, m):
                key = _summary_key(m, r)
                groups.setdefault(key, []).append(float(r[col]))
            for key in groups:  # first-seen order, i.e. sweep then seed order
                st = describe(groups[key])
                rows.append({"metric": m, "subset": "/".join(str(k) for k in key if k != ""),
                             "unit": self.VALUES[m][1], **st})
        return rows

    def write_csv(self, out: str | Path) -> list[Path]:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        paths = []
        for m in self.metrics():
            path = out / f"{m}.csv"
            _write_rows(path, getattr(self, m), self.VALUES[m])
            paths.append(path)
        path = out / "summary.csv"
        _write_rows(path, self.summary(), None)
        paths.append(path)
        return paths


def _summary_key(metric: str, row: Mapping[str, Any]) -> tuple:
    label = row.get("point", "")
    if metric == "temporal_load":
        return (label, row["role"])
    if metric == "bandwidth":
        return (label, row["scheme"], row["cls"])
    if metric == "bandwidth_peak":
        return (label, row["scheme"])
    if metric == "kgroup_ops":
        return (label, row["op"], row["cause"])
    return (label,)


def describe(xs: Sequence[float]) -> dict[str, Any]:
    if not xs:
        return {"n": 0, "median": math.nan, "mean": math.nan, "p90": math.nan}
    a = np.asarray(xs, dtype=float)
    return {"n": len(a), "median": float(np.median(a)), "mean": float(a.mean()), "p90": float(np.percentile(a, 90))}


def _fmt(v: Any) -> Any:
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (list, tuple)):
        return " ".join(str(x) for x in v)
    return v


def _write_rows(path: Path, rows: Sequence[Mapping[str, Any]], value: tuple[str, str] | None) -> None:
    cols: list[str] = []
    for r in rows:
        for k in r:
            if k not in cols:
                cols.append(k)
    if not cols and value is not None:
        cols = [value[0]]
    header = []
    for c in cols:
        if value is not None and c == value[0]:
            header.append(f"{c} [{value[1]}]")
        else:
            header.append(c)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(r.get(c, "")) for c in cols])


def format_summary(rows: Sequence[Mapping[str, Any]]) -> str:
    head = f"{'metric':<16} {'subset':<28} {'unit':<16} {'n':>6} {'median':>10} {'mean':>10} {'p90':>10}"
    lines = [head, "-" * len(head)]
    for r in rows:
        lines.append(f"{r['metric']:<16} {r['subset'][:28]:<28} {r['unit']:<16} {r['n']:>6} "
                     f"{r['median']:>10.3f} {r['mean']:>10.3f} {r['p90']:>10.3f}")
    return "\n".join(lines)


# --- trace -> metrics --------------------------------------------------------------------


class _Trial:
    """Indexes one trial's records once; each metric reads what it needs."""

    def __init__(self, records: Sequence[Mapping[str, Any]]) -> None:
        self.records = records
        run = next((r for r in records if r["ev"] == "run"), None)
        if run is None:
            raise TraceParseError(1, "trace has no 'run' record")
        end = next((r for r in reversed(records) if r["ev"] == "end"), None)
        if end is None:
            raise TraceParseError(len(records), "trace has no 'end' record (incomplete trial?)")
        self.seed = run["seed"]
        self.k = run["k"]
        self.lsh = run.get("policy") == "LSH_MIX" and not run.get("centralized") and run["k"] > 1
        self.horizon = float(end["horizon"])
        self.by_ev: dict[str, list[Mapping[str, Any]]] = {}
        for r in records:
            self.by_ev.setdefault(r["ev"], []).append(r)

    def ev(self, name: str) -> list[Mapping[str, Any]]:
        return self.by_ev.get(name, [])


def _first_times(recs: Iterable[Mapping[str, Any]]) -> dict[Inst, float]:
    out: dict[Inst, float] = {}
    for r in recs:
        key = (r["routine"], r["instance"])
        if key not in out:
            out[key] = r["t"]
    return out


def _inst(token: Sequence[int]) -> Inst:
    return (token[0], token[1])


def _blocking(tr: _Trial) -> tuple[dict[Inst, set[Inst]], dict[Inst, set[int]]]:
    """Who each instance waited behind, and which devices it contended for."""
    blockers: dict[Inst, set[Inst]] = {}
    devices: dict[Inst, set[int]] = {}
    for r in tr.ev("lock_wait") + tr.ev("lock_refuse"):
        me = _inst(r["token"])
        devices.setdefault(me, set()).add(r["device"])
        if r.get("holder"):
            other = _inst(r["holder"])
            if other != me:
                blockers.setdefault(me, set()).add(other)
    for r in tr.ev("lock_grant"):
        me = _inst(r["token"])
        devices.setdefault(me, set()).add(r["device"])
        if r.get("after"):
            other = _inst(r["after"])
            if other != me:
                blockers.setdefault(me, set()).add(other)
    for r in tr.ev("ola_abort"):
        blockers.setdefault((r["routine"], r["instance"]), set())
    return blockers, devices


def client_delays(tr: _Trial) -> list[dict[str, Any]]:
    trig = _first_times(tr.ev("trigger"))
    first = _first_times(tr.ev("first_cmd"))
    blockers, _ = _blocking(tr)
    rows = []
    for key in sorted(first):
        if key in trig and key not in blockers:
            rows.append({"seed": tr.seed, "routine": key[0], "instance": key[1], "delay": first[key] - trig[key]})
    return rows


def sync_delays(tr: _Trial) -> list[dict[str, Any]]:
    first = _first_times(tr.ev("first_cmd"))
    blockers, devices = _blocking(tr)
    released: dict[tuple[Inst, int], float] = {}
    for r in tr.ev("lock"):
        if r["op"] == "REL":
            released[(_inst(r["token"]), r["device"])] = r["t"]
    rows = []
    for me in sorted(blockers):
        if me not in first:
            continue
        t1 = first[me]
        best: tuple[float, Inst] | None = None
        for other in blockers[me]:
            rel = [released[(other, d)] for d in devices.get(me, ()) if (other, d) in released]
            rel = [t for t in rel if t <= t1]
            if rel and (best is None or max(rel) > best[0]):
                best = (max(rel), other)
        if best is not None:
            rows.append({"seed": tr.seed, "routine": me[0], "instance": me[1], "blocker": best[1][0],
                         "delay": t1 - best[0]})
    return rows


def _group_history(tr: _Trial) -> tuple[list[Mapping[str, Any]], dict[tuple[str, int], list[tuple[float, int | None]]],
                                         dict[tuple[str, int], list[tuple[float, list[int]]]], dict[int, float]]:
    groups = tr.ev("group")
    leaders: dict[tuple[str, int], list[tuple[float, int | None]]] = {}
    recruits: dict[tuple[str, int], list[tuple[float, list[int]]]] = {}
    for g in groups:
        leaders[(g["entity"], g["epoch"])] = [(g["t"], g["leader"])]
    for r in tr.ev("leader"):
        leaders.setdefault((r["entity"], r["epoch"]), []).append((r["t"], r["leader"]))
    for r in tr.ev("recruits"):
        recruits.setdefault((r["entity"], r["epoch"]), []).append((r["t"], list(r["nodes"])))
    starts = {r["epoch"]: float(r["t"]) for r in tr.ev("epoch")}
    return groups, leaders, recruits, starts


def _union_length(ivs: list[tuple[float, float]]) -> float:
    total, cur_a, cur_b = 0.0, None, None
    for a, b in sorted(ivs):
        if cur_b is None or a > cur_b:
            if cur_b is not None:
                total += cur_b - cur_a
            cur_a, cur_b = a, b
        else:
            cur_b = max(cur_b, b)
    if cur_b is not None:
        total += cur_b - cur_a
    return total


def loads(tr: _Trial) -> tuple[list[dict[str, Any]], list[dict[str, Any]]]:
    """Temporal load: share of the run a node spends leading or serving any group
    (overlapping groups counted once).  Spatial load: groups per node per epoch."""
    groups, leaders, recruits, starts = _group_history(tr)
    epochs = sorted(starts)
    end_of = {e: (starts[epochs[i + 1]] if i + 1 < len(epochs) else tr.horizon) for i, e in enumerate(epochs)}
    lead_iv: dict[int, list[tuple[float, float]]] = {}
    serve_iv: dict[int, list[tuple[float, float]]] = {}
    concurrent: dict[tuple[int, int], int] = {}
    for g in groups:
        key = (g["entity"], g["epoch"])
        t0, t1 = float(g["t"]), end_of.get(g["epoch"], tr.horizon)
        joined = {m: t0 for m in g["members"]}
        for t, ns in recruits.get(key, []):
            for m in ns:
                joined.setdefault(m, t)
        for m, tj in joined.items():
            serve_iv.setdefault(m, []).append((tj, t1))
            concurrent[(g["epoch"], m)] = concurrent.get((g["epoch"], m), 0) + 1
        spans = leaders.get(key, [])
        for i, (t, ld) in enumerate(spans):
            nxt = spans[i + 1][0] if i + 1 < len(spans) else t1
            if ld is not None and nxt > t:
                lead_iv.setdefault(ld, []).append((t, min(nxt, t1)))
    temporal = []
    for n in sorted(serve_iv):
        either = _union_length(serve_iv[n])
        lead = _union_length(lead_iv.get(n, []))
        for role, v in (("leader", lead), ("member", either - lead), ("either", either)):
            temporal.append({"seed": tr.seed, "node": n, "role": role, "fraction": v / tr.horizon})
    spatial = [{"seed": tr.seed, "epoch": e, "node": n, "groups": c} for (e, n), c in sorted(concurrent.items())]
    return temporal, spatial


def selection_stats(tr: _Trial) -> tuple[list[dict[str, Any]], list[dict[str, Any]], list[dict[str, Any]]]:
    groups = tr.ev("group")
    qd, cand, overlap = [], [], []
    prev: dict[str, list[int]] = {}
    for g in sorted(groups, key=lambda g: (g["epoch"], g["entity"])):
        ent = g["entity"]
        if g.get("qdist") is not None and not math.isnan(g["qdist"]):
            qd.append({"seed": tr.seed, "epoch": g["epoch"], "entity": ent, "hops": g["qdist"]})
        if tr.lsh:  # random selection has no candidate stage
            cand.append({"seed": tr.seed, "epoch": g["epoch"], "entity": ent, "candidates": g["candidates"]})
        if ent in prev:
            old, new = set(prev[ent]), set(g["members"])
            overlap.append({"seed": tr.seed, "epoch": g["epoch"], "entity": ent,
                            "overlap": len(old & new) / max(1, tr.k)})
        prev[ent] = g["members"]
    return qd, cand, overlap


def bandwidth_rows(tr: _Trial) -> list[dict[str, Any]]:
    rows = []
    for r in tr.ev("bandwidth"):
        for scheme in ("e2e", "h2h"):
            for cls in ("bg", "fg"):
                rows.append({"seed": tr.seed, "node": r["node"], "smart": r["smart"], "scheme": scheme, "cls": cls,
                             "total": r[f"{scheme}_{cls}"]})
    return rows


def bandwidth_peaks(tr: _Trial) -> list[dict[str, Any]]:
    rows = []
    for r in tr.ev("bandwidth"):
        for scheme in ("e2e", "h2h"):
            if f"{scheme}_peak" in r:
                rows.append({"seed": tr.seed, "node": r["node"], "smart": r["smart"], "scheme": scheme,
                             "window": r["window"], "rate": r[f"{scheme}_peak"]})
    return rows


def kgroup_ops(tr: _Trial) -> list[dict[str, Any]]:
    rows = []
    for r in tr.ev("election"):
        rows.append({"seed": tr.seed, "entity": r["entity"], "epoch": r["epoch"], "op": "election",
                     "cause": r["cause"], "delay": r["delay"], "rtt": r["rtt"],
                     "since_failure": r.get("since_failure", "")})
    for op in ("quorum", "transfer", "reconstruct"):
        for r in tr.ev(op):
            rows.append({"seed": tr.seed, "entity": r["entity"], "epoch": r["epoch"], "op": op, "cause": "",
                         "delay": r["delay"], "rtt": "", "since_failure": ""})
    return rows


def group_survival(tr: _Trial) -> list[dict[str, Any]]:
    dead = {(r["entity"], r["epoch"]) for r in tr.ev("group_dead")}
    return [{"seed": tr.seed, "entity": g["entity"], "epoch": g["epoch"],
             "alive": 0.0 if (g["entity"], g["epoch"]) in dead else 1.0} for g in tr.ev("group")]


def aggregate(traces: Iterable[Sequence[Mapping[str, Any]]], point: str | None = None) -> MetricsReport:
    """Every metric of every trial, rows tagged by seed (and sweep point if given)."""
    rep = MetricsReport()
    for records in traces:
        tr = _Trial(records)
        part = MetricsReport()
        part.client_delay = client_delays(tr)
        part.sync_delay = sync_delays(tr)
        part.temporal_load, part.spatial_load = loads(tr)
        part.quorum_distance, part.candidate_count, part.kgroup_overlap = selection_stats(tr)
        part.bandwidth = bandwidth_rows(tr)
        part.bandwidth_peak = bandwidth_peaks(tr)
        part.kgroup_ops = kgroup_ops(tr)
        part.group_survival = group_survival(tr)
        if point is not None:
            for m in part.metrics():
                getattr(part, m)[:] = [{"point": point, **r} for r in getattr(part, m)]
        rep.extend(part)
    return rep


def max_node_bandwidth(rep: MetricsReport, scheme: str = "e2e", **where: Any) -> float:
    """Largest per-node total (background plus foreground), averaged over seeds."""
    per: dict[tuple[Any, int], float] = {}
    for r in rep.bandwidth:
        if r["scheme"] != scheme or any(r.get(k) != v for k, v in where.items()):
            continue
        key = (r["seed"], r["node"])
        per[key] = per.get(key, 0.0) + r["total"]
    by_seed: dict[Any, float] = {}
    for (seed, _), v in per.items():
        by_seed[seed] = max(by_seed.get(seed, 0.0), v)
    return float(np.mean(list(by_seed.values()))) if by_seed else 0.0


def max_node_peak_rate(rep: MetricsReport, scheme: str = "e2e", **where: Any) -> float:
    """Busiest node's peak windowed rate, averaged over seeds."""
    by_seed: dict[Any, float] = {}
    for r in rep.bandwidth_peak:
        if r["scheme"] != scheme or any(r.get(k) != v for k, v in where.items()):
            continue
        by_seed[r["seed"]] = max(by_seed.get(r["seed"], 0.0), r["rate"])
    return float(np.mean(list(by_seed.values()))) if by_seed else 0.0


def iter_points(report: MetricsReport, metric: str) -> Iterator[tuple[str, list[float]]]:
    col = MetricsReport.VALUES[metric][0]
    pts: dict[str, list[float]] = {}
    for r in getattr(report, metric):
        pts.setdefault(r.get("point", ""), []).append(float(r[col]))
    yield from pts.items()
