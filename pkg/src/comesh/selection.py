"""Committee selection computable locally from a membership view.

Two policies produce an ordered member list for an entity at an epoch:

* ``sortition_select`` ranks every alive smart node by a keyed digest of
  ``(epoch, node, entity)`` and keeps the lowest ``k``.
* ``lsh_select`` keeps ``f + 1`` nodes that share a p-stable LSH bucket with
  the entity's center (nearest first), then adds ``f`` seeded-random nodes.

Both are pure functions of their inputs, so every node holding the same view
computes the same group without exchanging messages.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import kernels
from .model import EntityId, EntityKind, InvalidParameter, LshLeader, MembershipView


class InsufficientSmartNodes(RuntimeError):
    pass


_KIND_CODE = {EntityKind.DEVICE_CLUSTER: 0, EntityKind.ROUTINE: 1}


@lru_cache(maxsize=1 << 18)
def _digest(epoch: int, node: int, kind: str, ident: int) -> int:
    # SHA-256 truncated to the first 8 bytes, big endian
    h = hashlib.sha256(f"{epoch}|{node}|{kind}|{ident}".encode()).digest()
    return int.from_bytes(h[:8], "big")


def sortition_hash(epoch: int, node: int, entity: EntityId) -> tuple[int, int]:
    """(64-bit digest, node id) compared lexicographically; ids break ties."""
    return _digest(epoch, node, entity.kind.value, entity.id), node


def sortition_order(nodes: Iterable[int], epoch: int, entity: EntityId) -> list[int]:
    return sorted(nodes, key=lambda n: sortition_hash(epoch, n, entity))


def sortition_select(view: MembershipView, entity: EntityId, epoch: int, k: int) -> list[int]:
    candidates = view.alive_smart
    if len(candidates) < k:
        raise InsufficientSmartNodes(f"{len(candidates)} alive smart nodes < k={k}")
    return sortition_order(candidates, epoch, entity)[:k]


# --- locality-sensitive hashing ------------------------------------------


def lsh_scalar(v: Sequence[float], a: Sequence[float], b: float, r: float) -> int:
    if r <= 0:
        raise InvalidParameter("bucket width r must be positive")
    if len(v) != len(a):
        raise InvalidParameter("dimension mismatch between v and a")
    return math.floor((float(np.dot(a, v)) + b) / r)


@dataclass(frozen=True)
class LshParams:
    m: int
    l: int
    r: float
    a_vectors: np.ndarray  # (l, m, dim)
    b_offsets: np.ndarray  # (l, m)

    def __post_init__(self) -> None:
        if self.r <= 0 or self.m < 1 or self.l < 1:
            raise InvalidParameter("LSH needs m >= 1, l >= 1, r > 0")
        if self.a_vectors.shape[:2] != (self.l, self.m) or self.b_offsets.shape != (self.l, self.m):
            raise InvalidParameter("a/b arrays do not match (l, m)")

    @classmethod
    def derive(cls, seed: int, epoch: int, m: int, l: int, r: float, dim: int) -> "LshParams":
        rng = np.random.default_rng([seed, epoch, 0x15A])
        a = rng.standard_normal((l, m, dim))
        b = rng.uniform(0.0, r, (l, m))
        return cls(m, l, float(r), a, b)

    @property
    def dim(self) -> int:
        return self.a_vectors.shape[2]


def lsh_buckets(node: Sequence[float], params: LshParams) -> list[tuple[int, ...]]:
    vec = np.asarray(node, dtype=np.float64)[None, :]
    keys = kernels.lsh_keys(vec, params.a_vectors, params.b_offsets, params.r)[0]
    return [tuple(int(x) for x in row) for row in keys]


def augmented_location(
    base: Sequence[float],
    is_smart: bool,
    monitored: Sequence[Sequence[float]] = (),
    jitter: float = 0.0,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Location followed by the mean location of previously monitored devices.

    Simple devices and smart nodes without history repeat their own location.
    """
    base_arr = np.asarray(base, dtype=np.float64)
    if is_smart and len(monitored):
        tail = np.mean(np.asarray(monitored, dtype=np.float64), axis=0)
        if jitter > 0:
            if rng is None:
                raise InvalidParameter("jitter needs an rng")
            tail = tail + rng.normal(0.0, jitter, tail.shape)
    else:
        tail = base_arr
    return np.concatenate([base_arr, tail])


@dataclass
class LocalityMap:
    """Everything lsh_select needs besides the view.

    ``augmented`` rows are indexed by node id; ``centers`` maps each device
    cluster id to its center device.
    """

    positions: np.ndarray
    augmented: np.ndarray
    centers: Mapping[int, int]
    seed: int
    neighbors: int = 2
    leader_policy: LshLeader = LshLeader.LOCAL
    _keys: dict[int, np.ndarray] = field(default_factory=dict, repr=False)

    def keys(self, params: LshParams, epoch: int) -> np.ndarray:
        cached = self._keys.get(epoch)
        if cached is None:
            cached = kernels.lsh_keys(self.augmented, params.a_vectors, params.b_offsets, params.r)
            self._keys[epoch] = cached
        return cached

    def center_vector(self, device: int) -> np.ndarray:
        # the center is hashed under the simple-device rule
        p = self.positions[device]
        return np.concatenate([p, p])


@dataclass(frozen=True)
class Selection:
    members: tuple[int, ...]  # priority order; first alive member leads
    local: tuple[int, ...]  # stage-1 members
    candidates: int  # bucket-sharing smart nodes before truncation


def _center_device(entity: EntityId, loc: LocalityMap) -> int:
    if entity.kind is EntityKind.DEVICE_CLUSTER:
        return loc.centers.get(entity.id, entity.representative_device)
    return entity.representative_device


def bucket_matches(center: int, nodes: Sequence[int], params: LshParams, epoch: int, loc: LocalityMap) -> list[int]:
    keys = loc.keys(params, epoch)
    ckeys = kernels.lsh_keys(loc.center_vector(center)[None, :], params.a_vectors, params.b_offsets, params.r)[0]
    idx = np.asarray(nodes, dtype=np.int64)
    if idx.size == 0:
        return []
    hit = (keys[idx] == ckeys[None, :, :]).all(axis=2).any(axis=1)
    return [int(n) for n in idx[hit]]


def _by_distance(nodes: Iterable[int], center: int, loc: LocalityMap) -> list[int]:
    c = loc.positions[center]
    return sorted(nodes, key=lambda n: (float(np.sum((loc.positions[n] - c) ** 2)), n))


def _entity_rng(seed: int, epoch: int, entity: EntityId) -> np.random.Generator:
    return np.random.default_rng([seed, epoch, _KIND_CODE[entity.kind], entity.id])


def lsh_stage_one(
    view: MembershipView, entity: EntityId, epoch: int, f: int, params: LshParams, loc: LocalityMap
) -> tuple[list[int], int]:
    """Nearest f+1 bucket-sharing smart nodes (possibly fewer) and the raw candidate count."""
    alive = view.alive_smart
    center = _center_device(entity, loc)
    cands = bucket_matches(center, alive, params, epoch, loc)
    return _by_distance(cands, center, loc)[: f + 1], len(cands)


def lsh_select(
    view: MembershipView, entity: EntityId, epoch: int, f: int, params: LshParams, loc: LocalityMap
) -> Selection:
    alive = view.alive_smart
    k = 2 * f + 1
    if len(alive) < k:
        raise InsufficientSmartNodes(f"{len(alive)} alive smart nodes < 2f+1={k}")
    center = _center_device(entity, loc)
    local, n_cands = lsh_stage_one(view, entity, epoch, f, params, loc)
    chosen = set(local)
    if len(local) < f + 1:
        # borrow from the nearest other cluster centers' bucket matches
        others = [c for c in sorted(set(loc.centers.values())) if c != center]
        borrowed: list[int] = []
        for nb in _by_distance(others, center, loc)[: loc.neighbors]:
            borrowed.extend(n for n in bucket_matches(nb, alive, params, epoch, loc) if n not in chosen)
        for n in _by_distance(dict.fromkeys(borrowed), center, loc):
            if len(local) == f + 1:
                break
            if n not in chosen:
                local.append(n)
                chosen.add(n)
    rng = _entity_rng(loc.seed, epoch, entity)
    if len(local) < f + 1:
        pool = [n for n in alive if n not in chosen]
        fill = rng.choice(len(pool), size=f + 1 - len(local), replace=False)
        for i in sorted(int(x) for x in fill):
            local.append(pool[i])
            chosen.add(pool[i])
    pool = [n for n in alive if n not in chosen]
    extra = [pool[int(i)] for i in rng.choice(len(pool), size=f, replace=False)] if f else []
    local_sorted = sortition_order(local, epoch, entity)
    if loc.leader_policy is LshLeader.ALL:
        members = sortition_order(local + extra, epoch, entity)
    else:
        members = local_sorted + sortition_order(extra, epoch, entity)
    return Selection(tuple(members), tuple(local_sorted), n_cands)


# --- device clustering ---------------------------------------------------


@dataclass(frozen=True)
class Cluster:
    id: int
    members: tuple[int, ...]
    center: int


def _kmeans_pp(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(points)
    idx = [int(rng.integers(n))]
    d2 = np.sum((points - points[idx[0]]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            nxt = int(rng.integers(n))
        else:
            nxt = int(rng.choice(n, p=d2 / total))
        idx.append(nxt)
        d2 = np.minimum(d2, np.sum((points - points[nxt]) ** 2, axis=1))
    return points[idx].astype(np.float64)


def cluster_devices(locations: np.ndarray, devices_per_kgroup: int, seed: int, max_iter: int = 100) -> list[Cluster]:
    """Lloyd's k-means with ceil(N / devices_per_kgroup) clusters."""
    points = np.asarray(locations, dtype=np.float64)
    n = len(points)
    if n < 1:
        raise InvalidParameter("need at least one device")
    k = math.ceil(n / devices_per_kgroup)
    rng = np.random.default_rng([seed, 0xC1])
    centroids = _kmeans_pp(points, k, rng)
    labels = np.full(n, -1)
    for _ in range(max_iter):
        d2 = ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        new = d2.argmin(axis=1)
        for c in range(k):
            if not np.any(new == c):
                # re-seed an empty cluster at the point farthest from its centroid
                far = int(d2[np.arange(n), new].argmax())
                new[far] = c
        if np.array_equal(new, labels):
            break
        labels = new
        for c in range(k):
            centroids[c] = points[labels == c].mean(axis=0)
    groups = sorted((sorted(int(i) for i in np.flatnonzero(labels == c)) for c in range(k)), key=lambda g: g[0])
    out = []
    for cid, members in enumerate(groups):
        center = members[int(rng.integers(len(members)))]
        out.append(Cluster(cid, tuple(members), center))
    return out


def hop_quorum_distance(leader: int, members: Sequence[int], f: int, hops: np.ndarray) -> float:
    """Hop count from the leader to the f-th closest other member (quorum complete)."""
    if f == 0:
        return 0.0
    d = sorted(int(hops[leader, m]) for m in members if m != leader)
    d = [x for x in d if x >= 0]
    if len(d) < f:
        return math.inf
    return float(d[f - 1])
