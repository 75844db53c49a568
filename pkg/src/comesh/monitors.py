"""Omniscient checkers that watch a running simulation.

Each monitor consumes trace records as they are emitted (and, for
inheritance, the replication hooks) and collects violations.  They never
feed anything back into the protocol.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Sequence

from .kgroup import Entry


@dataclass
class Violation:
    monitor: str
    t: float
    detail: dict[str, Any]


class Monitor:
    name = "monitor"

    def __init__(self) -> None:
        self.violations: list[Violation] = []

    def flag(self, t: float, **detail: Any) -> None:
        self.violations.append(Violation(self.name, t, detail))

    def __call__(self, rec: Mapping[str, Any]) -> None:  # pragma: no cover - interface
        raise NotImplementedError

    def finish(self, horizon: float) -> None:
        pass

    @property
    def ok(self) -> bool:
        return not self.violations


class SafetyMonitor(Monitor):
    """No two routine instances with overlapping lock sets execute at once."""

    name = "safety"

    def __init__(self) -> None:
        super().__init__()
        self.executing: dict[tuple[int, int], set[int]] = {}
        self.max_concurrent = 0

    def __call__(self, rec: Mapping[str, Any]) -> None:
        ev = rec["ev"]
        if ev == "executing":
            key = (rec["routine"], rec["instance"])
            devs = set(rec["devices"])
            for other, odevs in self.executing.items():
                if other[0] != key[0] and devs & odevs:
                    self.flag(rec["t"], routine=key, other=other, shared=sorted(devs & odevs))
            self.executing[key] = devs
            self.max_concurrent = max(self.max_concurrent, len(self.executing))
        elif ev in ("releasing", "done"):
            self.executing.pop((rec["routine"], rec["instance"]), None)
        elif ev == "device_conflict":
            self.flag(rec["t"], device=rec["device"], token=rec["token"], other=rec["other"])


class FifoMonitor(Monitor):
    """Queue grants on each device follow enqueue order."""

    name = "fifo"

    def __init__(self) -> None:
        super().__init__()
        self.last: dict[int, int] = {}
        self.grants = 0

    def __call__(self, rec: Mapping[str, Any]) -> None:
        if rec["ev"] != "lock_grant" or rec.get("enq_seq") is None:
            return
        dev, seq = rec["device"], rec["enq_seq"]
        prev = self.last.get(dev)
        if prev is not None and seq < prev:
            self.flag(rec["t"], device=dev, enq_seq=seq, previous=prev, token=rec["token"])
        self.last[dev] = max(seq, prev or seq)
        self.grants += 1


class ProgressMonitor(Monitor):
    """Once arrivals stop, the set of routines waiting for locks only shrinks,
    one routine at a time, and is empty by the horizon."""

    name = "progress"

    def __init__(self, arrivals_end: float | None) -> None:
        super().__init__()
        self.arrivals_end = arrivals_end
        self.waiting: set[int] = set()
        self.sizes: list[tuple[float, int]] = []

    def __call__(self, rec: Mapping[str, Any]) -> None:
        ev, rid = rec["ev"], rec.get("routine")
        before = len(self.waiting)
        if ev == "stage" and rec["stage"] == "ACQUIRING_LOCKS":
            self.waiting.add(rid)
        elif ev == "executing":
            self.waiting.discard(rid)
        else:
            return
        after = len(self.waiting)
        if after == before:
            return
        halted = self.arrivals_end is not None and rec["t"] > self.arrivals_end
        if halted and after > before:
            self.flag(rec["t"], reason="waiting set grew after arrivals stopped", routine=rid, size=after)
        if halted:
            self.sizes.append((rec["t"], after))

    def finish(self, horizon: float) -> None:
        if self.arrivals_end is not None and self.waiting:
            self.flag(horizon, reason="routines still waiting at horizon", waiting=sorted(self.waiting))


class WaitForMonitor(Monitor):
    """Cycle check on the routine wait-for graph built from lock-queue commits."""

    name = "deadlock"

    def __init__(self) -> None:
        super().__init__()
        self.holder: dict[int, int | None] = {}
        self.waiters: dict[int, list[int]] = {}

    def __call__(self, rec: Mapping[str, Any]) -> None:
        if rec["ev"] != "lock":
            return
        dev, op, rid = rec["device"], rec["op"], rec["token"][0]
        w = self.waiters.setdefault(dev, [])
        if op == "ENQ":
            if self.holder.get(dev) != rid and rid not in w:
                w.append(rid)
        elif op in ("GRANT", "PRELOCK"):
            if rid in w:
                w.remove(rid)
            self.holder[dev] = rid
        elif op == "REL":
            if self.holder.get(dev) == rid:
                self.holder[dev] = None
        elif op == "DEQ" and rid in w:
            w.remove(rid)
        cycle = self.find_cycle()
        if cycle:
            self.flag(rec["t"], cycle=cycle)

    def edges(self) -> dict[int, set[int]]:
        g: dict[int, set[int]] = {}
        for dev, ws in self.waiters.items():
            h = self.holder.get(dev)
            if h is None:
                continue
            for r in ws:
                if r != h:
                    g.setdefault(r, set()).add(h)
        return g

    def find_cycle(self) -> list[int] | None:
        return find_cycle(self.edges())


def find_cycle(graph: Mapping[int, Iterable[int]]) -> list[int] | None:
    color: dict[int, int] = {}
    stack: list[int] = []

    def visit(u: int) -> list[int] | None:
        color[u] = 1
        stack.append(u)
        for v in sorted(graph.get(u, ())):
            c = color.get(v, 0)
            if c == 1:
                return stack[stack.index(v):] + [v]
            if c == 0:
                found = visit(v)
                if found:
                    return found
        stack.pop()
        color[u] = 2
        return None

    for u in sorted(graph):
        if color.get(u, 0) == 0:
            found = visit(u)
            if found:
                return found
    return None


class ElectionMonitor(Monitor):
    """At most one live node acts as leader of a group at any instant."""

    name = "election"

    def __init__(self) -> None:
        super().__init__()
        self.active: dict[tuple[str, int], int] = {}
        self.dead: set[int] = set()

    def __call__(self, rec: Mapping[str, Any]) -> None:
        ev = rec["ev"]
        if ev == "crash":
            self.dead.add(rec["node"])
        elif ev == "restart":
            self.dead.discard(rec["node"])
            for key in [k for k, n in self.active.items() if n == rec["node"]]:
                del self.active[key]
        elif ev == "active":
            key = (rec["entity"], rec["epoch"])
            cur = self.active.get(key)
            if cur is not None and cur != rec["node"] and cur not in self.dead:
                self.flag(rec["t"], entity=key[0], epoch=key[1], leaders=[cur, rec["node"]])
            self.active[key] = rec["node"]


class InheritanceMonitor(Monitor):
    """Every state a new leader installs keeps each committed entry and adds
    only entries some earlier leader actually issued."""

    name = "inheritance"

    def __init__(self) -> None:
        super().__init__()
        self.committed: dict[str, dict[int, Entry]] = {}
        self.issued: dict[str, set[Entry]] = {}
        self.checks: list[dict[str, Any]] = []
        self.now = 0.0

    def __call__(self, rec: Mapping[str, Any]) -> None:
        self.now = rec["t"]

    # replication hooks
    def on_issued(self, ekey: str, entries: Sequence[Entry]) -> None:
        self.issued.setdefault(ekey, set()).update(entries)

    def on_committed(self, ekey: str, entries: Sequence[Entry]) -> None:
        c = self.committed.setdefault(ekey, {})
        for e in entries:
            c[e.seq] = e

    def on_installed(self, ekey: str, epoch: int, entries: Sequence[Entry], cause: str) -> None:
        committed = self.committed.setdefault(ekey, {})
        installed = {e.seq: e for e in entries}
        missing = [s for s in sorted(committed) if installed.get(s) != committed[s]]
        issued = self.issued.get(ekey, set())
        invented = [e.seq for e in entries if e not in issued]
        ok = not missing and not invented
        self.checks.append({"entity": ekey, "epoch": epoch, "cause": cause, "ok": ok, "entries": len(entries)})
        if not ok:
            self.flag(self.now, entity=ekey, epoch=epoch, cause=cause, missing=missing[:10], invented=invented[:10])
        for e in entries:
            committed[e.seq] = e


class Hooks:
    """Fan-out of replication events to interested observers."""

    def __init__(self, observers: Iterable[Any] = ()) -> None:
        self.observers = list(observers)

    def issued(self, ekey: str, entries: Sequence[Entry]) -> None:
        for o in self.observers:
            o.on_issued(ekey, entries)

    def committed(self, ekey: str, entries: Sequence[Entry]) -> None:
        for o in self.observers:
            o.on_committed(ekey, entries)

    def installed(self, ekey: str, epoch: int, entries: Sequence[Entry], cause: str) -> None:
        for o in self.observers:
            o.on_installed(ekey, epoch, entries, cause)


@dataclass
class MonitorSuite:
    safety: SafetyMonitor = field(default_factory=SafetyMonitor)
    fifo: FifoMonitor = field(default_factory=FifoMonitor)
    deadlock: WaitForMonitor = field(default_factory=WaitForMonitor)
    election: ElectionMonitor = field(default_factory=ElectionMonitor)
    inheritance: InheritanceMonitor = field(default_factory=InheritanceMonitor)
    progress: ProgressMonitor = field(default_factory=lambda: ProgressMonitor(None))

    @property
    def all(self) -> list[Monitor]:
        return [self.safety, self.fifo, self.inheritance, self.progress, self.deadlock, self.election]

    def __call__(self, rec: Mapping[str, Any]) -> None:
        for m in self.all:
            m(rec)

    def finish(self, horizon: float) -> None:
        for m in self.all:
            m.finish(horizon)

    def verdicts(self) -> dict[str, bool]:
        return {m.name: m.ok for m in self.all}

    def violations(self) -> list[Violation]:
        return [v for m in self.all for v in m.violations]
