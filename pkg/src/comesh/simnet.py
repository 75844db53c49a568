"""Deterministic discrete-event network simulator.

Time is an abstract unit. Each hop costs one unit of propagation latency
plus a serialization delay of ``size / (bandwidth / degree)`` where
``degree`` is the hop sender's current number of alive neighbors.
Routes are minimum-hop paths; ties go to the smallest next-node id.
"""

from __future__ import annotations

import enum
import heapq
import itertools
import json
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, TextIO

import numpy as np

from . import kernels
from .model import MembershipView, NodeRecord, Status


class Unreachable(RuntimeError):
    pass


class TopologyKind(enum.Enum):
    GRID3D = "GRID3D"
    RANDOM = "RANDOM"
    CLUSTERED = "CLUSTERED"


# target mean degree for the radius-based topologies
TARGET_DEGREE = 6.0
# nodes per spatial cluster in CLUSTERED layouts
CLUSTER_SIZE = 25
CONNECT_RETRIES = 20


@dataclass
class Topology:
    kind: TopologyKind
    positions: np.ndarray
    adjacency: list[list[int]]
    transmission_radius: float
    smart: np.ndarray
    power_domain: np.ndarray
    seed: int = 0

    @property
    def n(self) -> int:
        return len(self.adjacency)

    @property
    def dim(self) -> int:
        return self.positions.shape[1]

    def smart_ids(self) -> list[int]:
        return [int(i) for i in np.flatnonzero(self.smart)]

    def csr(self) -> tuple[np.ndarray, np.ndarray]:
        indptr = np.zeros(self.n + 1, dtype=np.int32)
        indptr[1:] = np.cumsum([len(a) for a in self.adjacency])
        indices = np.fromiter(itertools.chain.from_iterable(self.adjacency), dtype=np.int32, count=int(indptr[-1]))
        return indptr, indices

    def hops(self, alive: np.ndarray | None = None) -> np.ndarray:
        indptr, indices = self.csr()
        if alive is None:
            alive = np.ones(self.n, dtype=np.uint8)
        return kernels.all_pairs_hops(indptr, indices, np.asarray(alive, dtype=np.uint8))

    def is_connected(self) -> bool:
        return bool((self.hops()[0] >= 0).all()) if self.n else True

    def records(self) -> list[NodeRecord]:
        return [
            NodeRecord(i, tuple(float(x) for x in self.positions[i]), bool(self.smart[i]), Status.ALIVE, int(self.power_domain[i]))
            for i in range(self.n)
        ]


def _grid_positions(n: int) -> np.ndarray:
    a = max(1, math.ceil(round(n ** (1 / 3), 9)))
    b = max(1, math.ceil(math.sqrt(n / a) - 1e-9))
    c = max(1, math.ceil(n / (a * b) - 1e-9))
    pts = [(x, y, z) for z in range(c) for y in range(b) for x in range(a)]
    return np.asarray(pts[:n], dtype=np.float64)


def _grid_adjacency(pos: np.ndarray) -> list[list[int]]:
    index = {tuple(int(v) for v in p): i for i, p in enumerate(pos)}
    adj: list[list[int]] = []
    for p in pos:
        x, y, z = (int(v) for v in p)
        nbrs = []
        for dx, dy, dz in ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)):
            j = index.get((x + dx, y + dy, z + dz))
            if j is not None:
                nbrs.append(j)
        adj.append(sorted(nbrs))
    return adj


def _pairwise(pos: np.ndarray) -> np.ndarray:
    diff = pos[:, None, :] - pos[None, :, :]
    return np.sqrt((diff**2).sum(axis=2))


def _radius_for_degree(d: np.ndarray, degree: float) -> float:
    n = len(d)
    if n < 2:
        return 1.0
    iu = np.triu_indices(n, 1)
    pairs = np.sort(d[iu])
    # mean degree = 2 * edges / n
    want = int(min(len(pairs), max(1, round(degree * n / 2))))
    return float(pairs[want - 1]) * (1 + 1e-9)


def _bottleneck(d: np.ndarray) -> float:
    """Largest edge of a Euclidean minimum spanning tree (Prim)."""
    n = len(d)
    if n < 2:
        return 0.0
    in_tree = np.zeros(n, dtype=bool)
    in_tree[0] = True
    best = d[0].copy()
    worst = 0.0
    for _ in range(n - 1):
        cand = np.where(in_tree, np.inf, best)
        j = int(cand.argmin())
        worst = max(worst, float(cand[j]))
        in_tree[j] = True
        best = np.minimum(best, d[j])
    return worst * (1 + 1e-9)


def _radius_adjacency(d: np.ndarray, radius: float) -> list[list[int]]:
    within = (d <= radius) & ~np.eye(len(d), dtype=bool)
    return [sorted(int(j) for j in np.flatnonzero(row)) for row in within]


def _connected(adj: list[list[int]]) -> bool:
    if not adj:
        return True
    seen = {0}
    stack = [0]
    while stack:
        u = stack.pop()
        for v in adj[u]:
            if v not in seen:
                seen.add(v)
                stack.append(v)
    return len(seen) == len(adj)


def _scatter(kind: TopologyKind, n: int, rng: np.random.Generator) -> np.ndarray:
    side = math.sqrt(n)
    if kind is TopologyKind.RANDOM:
        return rng.uniform(0.0, side, (n, 2))
    n_clusters = max(1, math.ceil(n / CLUSTER_SIZE))
    centers = rng.uniform(0.0, side, (n_clusters, 2))
    sigma = side / (2.0 * math.sqrt(n_clusters))
    which = rng.integers(n_clusters, size=n)
    return centers[which] + rng.normal(0.0, sigma, (n, 2))


def _power_domains(pos: np.ndarray, smart: np.ndarray, domain_size: int) -> np.ndarray:
    smart_ids = [int(i) for i in np.flatnonzero(smart)]
    order = sorted(smart_ids, key=lambda i: (tuple(pos[i]), i))
    dom = np.full(len(pos), -1, dtype=np.int64)
    for rank, i in enumerate(order):
        dom[i] = rank // max(1, domain_size)
    if smart_ids:
        sp = pos[smart_ids]
        for i in range(len(pos)):
            if dom[i] < 0:
                dom[i] = dom[smart_ids[int(((sp - pos[i]) ** 2).sum(axis=1).argmin())]]
    return dom


def build_topology(kind: TopologyKind | str, N: int, smart_fraction: float, seed: int, domain_size: int = 2) -> Topology:
    kind = TopologyKind(kind) if not isinstance(kind, TopologyKind) else kind
    if N < 1:
        raise ValueError("N must be >= 1")
    if kind is TopologyKind.GRID3D:
        pos = _grid_positions(N)
        adj = _grid_adjacency(pos)
        radius = 1.0
        used_seed = seed
    else:
        for offset in range(CONNECT_RETRIES):
            rng = np.random.default_rng([seed + offset, 0x70])
            pos = _scatter(kind, N, rng)
            d = _pairwise(pos)
            radius = _radius_for_degree(d, TARGET_DEGREE)
            adj = _radius_adjacency(d, radius)
            used_seed = seed + offset
            if _connected(adj):
                break
        else:
            # widen the radius of the last layout just enough to connect it
            radius = max(radius, _bottleneck(d))
            adj = _radius_adjacency(d, radius)
    rng = np.random.default_rng([seed, 0x5A])
    n_smart = math.ceil(smart_fraction * N - 1e-9)
    smart = np.zeros(N, dtype=bool)
    smart[rng.choice(N, size=n_smart, replace=False)] = True
    return Topology(kind, pos, adj, radius, smart, _power_domains(pos, smart, domain_size), used_seed)


def route(topology: Topology, src: int, dst: int, hops: np.ndarray | None = None, alive: np.ndarray | None = None) -> list[int]:
    """Minimum-hop path from src to dst, excluding src (so ``len`` is the hop count)."""
    if hops is None:
        hops = topology.hops(alive)
    if alive is not None and not (alive[src] and alive[dst]):
        raise Unreachable(f"{src} -> {dst}: endpoint down")
    if src == dst:
        return []
    if hops[src, dst] < 0:
        raise Unreachable(f"{src} -> {dst}: partitioned")
    path = []
    u = src
    while u != dst:
        want = hops[u, dst] - 1
        u = min(v for v in topology.adjacency[u] if hops[v, dst] == want and (alive is None or alive[v]))
        path.append(u)
    return path


# --- event loop -------------------------------------------------------------


class Event:
    __slots__ = ("time", "fn", "args", "cancelled", "created")

    def __init__(self, time: float, fn: Callable, args: tuple, created: float) -> None:
        self.time = time
        self.fn = fn
        self.args = args
        self.cancelled = False
        self.created = created

    def cancel(self) -> None:
        self.cancelled = True


class CausalityError(RuntimeError):
    pass


class Simulator:
    def __init__(self) -> None:
        self.now = 0.0
        self._queue: list[tuple[float, int, Event]] = []
        self._seq = itertools.count()
        self.processed = 0

    def at(self, time: float, fn: Callable, *args: Any) -> Event:
        if time < self.now:
            raise CausalityError(f"event at {time} scheduled from {self.now}")
        ev = Event(time, fn, args, self.now)
        heapq.heappush(self._queue, (time, next(self._seq), ev))
        return ev

    def schedule(self, delay: float, fn: Callable, *args: Any) -> Event:
        return self.at(self.now + max(0.0, delay), fn, *args)

    def run(self, until: float) -> None:
        q = self._queue
        while q and q[0][0] <= until:
            t, _, ev = heapq.heappop(q)
            if ev.cancelled:
                continue
            self.now = t
            self.processed += 1
            ev.fn(*ev.args)
        self.now = max(self.now, until)

    def pending(self) -> int:
        return sum(1 for _, _, ev in self._queue if not ev.cancelled)


# --- tracing ----------------------------------------------------------------


class Trace:
    """In-memory list of event records; monitors subscribe to the stream."""

    def __init__(self, sim: Simulator, messages: bool = False) -> None:
        self.sim = sim
        self.records: list[dict[str, Any]] = []
        self.listeners: list[Callable[[dict[str, Any]], None]] = []
        self.messages = messages

    def emit(self, ev: str, **fields: Any) -> dict[str, Any]:
        rec = {"t": self.sim.now, "ev": ev, **fields}
        self.records.append(rec)
        for fn in self.listeners:
            fn(rec)
        return rec

    def dump(self, fh: TextIO) -> None:
        for rec in self.records:
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")


# --- messages and the network -------------------------------------------------

HEADER_BYTES = 32
ENTRY_BYTES = 64

# background traffic: device monitoring and state propagation
BACKGROUND = frozenset({"PING", "PING_ACK", "STATE_UPDATE"})


@dataclass(slots=True)
class Message:
    kind: str
    src: int
    dst: int
    group: str | None = None
    epoch: int = -1
    seq: int = -1
    payload: Any = None
    size: int = HEADER_BYTES
    src_inc: int = 0
    dst_inc: int = 0
    path: tuple[int, ...] = ()


def message_size(kind: str, entries: int = 0, extra: int = 0) -> int:
    """Byte size used by the bandwidth model: fixed header + 64 bytes per state entry."""
    return HEADER_BYTES + ENTRY_BYTES * entries + extra


@dataclass
class NetStats:
    sent: int = 0
    delivered: int = 0
    dropped: dict[str, int] = field(default_factory=dict)

    def drop(self, reason: str) -> None:
        self.dropped[reason] = self.dropped.get(reason, 0) + 1


class Network:
    def __init__(
        self,
        sim: Simulator,
        topology: Topology,
        bandwidth: float,
        loss_prob: float = 0.0,
        seed: int = 0,
        trace: Trace | None = None,
    ) -> None:
        self.sim = sim
        self.topo = topology
        self.bandwidth = float(bandwidth)
        self.loss_prob = loss_prob
        self.rng = np.random.default_rng([seed, 0x10])
        self.trace = trace
        n = topology.n
        self.alive = np.ones(n, dtype=np.uint8)
        self.incarnation = [0] * n
        self.handlers: dict[int, Callable[[Message], None]] = {}
        self.stats = NetStats()
        self.e2e = np.zeros((n, 2), dtype=np.float64)  # [background, foreground]
        self.h2h = np.zeros((n, 2), dtype=np.float64)
        # bytes per node per accounting window, for peak rates
        self.window = 100.0
        self._win: dict[int, tuple[np.ndarray, np.ndarray]] = {}
        self._indptr, self._indices = topology.csr()
        self._dirty = True
        self._hops: np.ndarray | None = None
        self._degree: list[int] = []
        self._paths: dict[tuple[int, int], tuple[int, ...] | None] = {}

    # topology state ---------------------------------------------------------
    def _refresh(self) -> None:
        if self._dirty:
            self._hops = kernels.all_pairs_hops(self._indptr, self._indices, self.alive)
            alive = self.alive
            self._degree = [sum(1 for v in nb if alive[v]) for nb in self.topo.adjacency]
            self._paths.clear()
            self._dirty = False

    @property
    def hops(self) -> np.ndarray:
        self._refresh()
        return self._hops  # type: ignore[return-value]

    def degree(self, node: int) -> int:
        self._refresh()
        return self._degree[node]

    def is_alive(self, node: int) -> bool:
        return bool(self.alive[node])

    def fail(self, node: int) -> None:
        self.alive[node] = 0
        self.incarnation[node] += 1
        self._dirty = True

    def join(self, node: int) -> None:
        self.alive[node] = 1
        self.incarnation[node] += 1
        self._dirty = True

    def path(self, src: int, dst: int) -> tuple[int, ...] | None:
        self._refresh()
        key = (src, dst)
        if key not in self._paths:
            try:
                self._paths[key] = tuple(route(self.topo, src, dst, self._hops, self.alive))
            except Unreachable:
                self._paths[key] = None
        return self._paths[key]

    def peak_rate(self, scheme: str) -> np.ndarray:
        """Per node, the busiest window's bytes per time unit."""
        idx = 0 if scheme == "e2e" else 1
        if not self._win:
            return np.zeros(self.topo.n)
        return np.max([pair[idx] for pair in self._win.values()], axis=0) / self.window

    def hop_count(self, src: int, dst: int) -> int:
        return int(self.hops[src, dst])

    def transit_time(self, src: int, dst: int, size: int) -> float:
        p = self.path(src, dst)
        if p is None:
            return math.inf
        t = 0.0
        u = src
        for v in p:
            deg = max(1, self._degree[u])
            t += size * deg / self.bandwidth + 1.0
            u = v
        return t

    def rtt(self, a: int, b: int, size_out: int = HEADER_BYTES, size_back: int = HEADER_BYTES) -> float:
        return self.transit_time(a, b, size_out) + self.transit_time(b, a, size_back)

    # sending ------------------------------------------------------------------
    def send(self, msg: Message) -> float | None:
        """Schedule delivery; returns the delivery time or None when dropped."""
        self.stats.sent += 1
        if not self.alive[msg.src]:
            self.stats.drop("sender_down")
            return None
        p = self.path(msg.src, msg.dst)
        if p is None:
            self.stats.drop("unreachable")
            return None
        msg.src_inc = self.incarnation[msg.src]
        msg.dst_inc = self.incarnation[msg.dst]
        msg.path = p
        cls = 0 if msg.kind in BACKGROUND else 1
        if msg.src == msg.dst:
            # local hand-off between roles on one node: no radio traffic
            self.sim.at(self.sim.now, self._deliver, msg)
            return self.sim.now
        w = int(self.sim.now // self.window)
        if w not in self._win:
            self._win[w] = (np.zeros(self.topo.n), np.zeros(self.topo.n))
        we, wh = self._win[w]
        self.e2e[msg.src, cls] += msg.size
        self.e2e[msg.dst, cls] += msg.size
        we[msg.src] += msg.size
        we[msg.dst] += msg.size
        u = msg.src
        for v in p:
            self.h2h[u, cls] += msg.size
            self.h2h[v, cls] += msg.size
            wh[u] += msg.size
            wh[v] += msg.size
            u = v
        if self.trace is not None and self.trace.messages:
            self.trace.emit("msg", kind=msg.kind, src=msg.src, dst=msg.dst, size=msg.size, group=msg.group)
        if self.loss_prob and self.rng.random() < self.loss_prob:
            self.stats.drop("loss")
            return None
        when = self.sim.now + self.transit_time(msg.src, msg.dst, msg.size)
        self.sim.at(when, self._deliver, msg)
        return when

    def _deliver(self, msg: Message) -> None:
        if not self.alive[msg.src] or self.incarnation[msg.src] != msg.src_inc:
            self.stats.drop("sender_failed_in_flight")
            return
        if not self.alive[msg.dst] or self.incarnation[msg.dst] != msg.dst_inc:
            self.stats.drop("receiver_down")
            return
        for v in msg.path[:-1]:
            if not self.alive[v]:
                self.stats.drop("relay_down")
                return
        handler = self.handlers.get(msg.dst)
        if handler is None:
            self.stats.drop("no_handler")
            return
        self.stats.delivered += 1
        handler(msg)


# --- churn and membership -------------------------------------------------------


class ChurnKind(enum.Enum):
    FAIL = "FAIL"
    JOIN = "JOIN"


@dataclass(frozen=True, order=True)
class ChurnEvent:
    time: float
    node: int
    kind: ChurnKind


class MembershipService:
    """Idealized membership: every alive node learns of a FAIL or JOIN a fixed
    ``detection_delay`` after it happens, so all views are identical."""

    def __init__(self, sim: Simulator, network: Network, smart: Iterable[int], detection_delay: float = 2.0) -> None:
        self.sim = sim
        self.net = network
        self.detection_delay = detection_delay
        self.smart = frozenset(int(s) for s in smart)
        self.alive: set[int] = set(range(network.topo.n))
        self.version = 0
        self.listeners: list[Callable[[ChurnEvent], None]] = []
        self.on_crash: list[Callable[[int], None]] = []
        self.on_restart: list[Callable[[int], None]] = []

    def view(self) -> MembershipView:
        return MembershipView(self.version, frozenset(self.alive), self.smart)

    def alive_smart(self) -> list[int]:
        return sorted(self.alive & self.smart)

    def inject(self, schedule: Iterable[ChurnEvent]) -> None:
        for ev in sorted(schedule):
            self.sim.at(ev.time, self._apply, ev)

    def _apply(self, ev: ChurnEvent) -> None:
        if ev.kind is ChurnKind.FAIL:
            if not self.net.is_alive(ev.node):
                return
            self.net.fail(ev.node)
            for fn in self.on_crash:
                fn(ev.node)
        else:
            if self.net.is_alive(ev.node):
                return
            self.net.join(ev.node)
            for fn in self.on_restart:
                fn(ev.node)
        self.sim.schedule(self.detection_delay, self._detect, ev)

    def _detect(self, ev: ChurnEvent) -> None:
        # detections arrive in occurrence order, so a quick FAIL/JOIN pair is
        # still reported as a failure followed by a fresh join
        if ev.kind is ChurnKind.FAIL:
            self.alive.discard(ev.node)
        else:
            self.alive.add(ev.node)
        self.version += 1
        for fn in self.listeners:
            fn(ev)
