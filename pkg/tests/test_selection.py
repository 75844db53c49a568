import hashlib
import random

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from comesh.experiments import selection_trial
from comesh.model import EntityId, EntityKind, InvalidParameter, MembershipView
from comesh.scenario import scenario_from_dict
from comesh.selection import (
    InsufficientSmartNodes,
    LocalityMap,
    LshParams,
    cluster_devices,
    hop_quorum_distance,
    lsh_buckets,
    lsh_scalar,
    lsh_select,
    lsh_stage_one,
    sortition_order,
    sortition_select,
)

ENT = EntityId(EntityKind.ROUTINE, 3, 0)


def view_of(smart, alive=None):
    smart = frozenset(smart)
    return MembershipView(0, frozenset(alive if alive is not None else smart), smart)


def test_single_candidate():
    assert sortition_select(view_of([42]), ENT, 0, 1) == [42]


def test_not_enough_candidates():
    with pytest.raises(InsufficientSmartNodes):
        sortition_select(view_of([1, 2]), ENT, 0, 3)


def test_matches_brute_force_sort():
    nodes = list(range(100, 110))

    def h(n):
        raw = hashlib.sha256(f"7|{n}|ROUTINE|3".encode()).digest()[:8]
        return int.from_bytes(raw, "big"), n

    expected = sorted(nodes, key=h)[:5]
    assert sortition_select(view_of(nodes), ENT, 7, 5) == expected


def test_epoch_changes_selection():
    nodes = range(40)
    picks = {tuple(sortition_select(view_of(nodes), ENT, e, 5)) for e in range(10)}
    assert len(picks) > 1


@settings(max_examples=60, deadline=None)
@given(
    smart=st.sets(st.integers(0, 500), min_size=5, max_size=60),
    epoch=st.integers(0, 10_000),
    ident=st.integers(0, 1000),
    kind=st.sampled_from(list(EntityKind)),
    k=st.integers(1, 5),
)
def test_same_view_same_group_everywhere(smart, epoch, ident, kind, k):
    ent = EntityId(kind, ident, 0)
    # five nodes each build the view from their own (differently ordered) copy
    results = set()
    for node in range(5):
        local = list(smart)
        random.Random(node).shuffle(local)
        results.add(tuple(sortition_select(view_of(local), ent, epoch, k)))
    assert len(results) == 1


@settings(max_examples=40, deadline=None)
@given(st.sets(st.integers(0, 300), min_size=3, max_size=40), st.integers(0, 50))
def test_order_is_a_permutation(nodes, epoch):
    out = sortition_order(nodes, epoch, ENT)
    assert sorted(out) == sorted(nodes)


def test_lsh_scalar_cases():
    assert lsh_scalar([0.0, 0.0], [1.0, 2.0], 0.0, 4.0) == 0
    assert lsh_scalar([7.9], [1.0], 0.0, 4.0) == 1
    assert lsh_scalar([-0.1], [1.0], 0.0, 4.0) == -1
    with pytest.raises(InvalidParameter):
        lsh_scalar([1.0], [1.0], 0.0, 0.0)
    with pytest.raises(InvalidParameter):
        lsh_scalar([1.0, 2.0], [1.0], 0.0, 4.0)


def test_degenerate_key_is_the_scalar():
    p = LshParams.derive(seed=1, epoch=0, m=1, l=1, r=4.0, dim=3)
    v = [1.5, -2.0, 7.0]
    assert lsh_buckets(v, p) == [(lsh_scalar(v, p.a_vectors[0, 0], p.b_offsets[0, 0], 4.0),)]


def test_default_key_shape():
    p = LshParams.derive(seed=1, epoch=0, m=2, l=2, r=4.0, dim=6)
    keys = lsh_buckets(np.arange(6.0), p)
    assert len(keys) == 2 and all(len(k) == 2 for k in keys)


def test_colocated_nodes_share_keys():
    p = LshParams.derive(seed=9, epoch=3, m=2, l=2, r=4.0, dim=6)
    v = np.array([1.0, 2.0, 3.0, 1.0, 2.0, 3.0])
    assert lsh_buckets(v, p) == lsh_buckets(v.copy(), p)


def _fixture_map(seed=0, n=10):
    rng = np.random.default_rng(seed)
    pos = rng.uniform(0, 6, (n, 3))
    aug = np.hstack([pos, pos])
    return LocalityMap(pos, aug, {0: 0}, seed), pos


@pytest.mark.parametrize("seed", range(8))
def test_stage_one_matches_brute_force(seed):
    loc, pos = _fixture_map(seed)
    params = LshParams.derive(seed, 0, 2, 2, 4.0, 6)
    smart = list(range(1, 10))
    ent = EntityId(EntityKind.DEVICE_CLUSTER, 0, 0)
    f = 2
    center = np.concatenate([pos[0], pos[0]])

    def key(v, table):
        return tuple(lsh_scalar(v, params.a_vectors[table, j], params.b_offsets[table, j], 4.0) for j in range(2))

    hits = [n for n in smart if any(key(loc.augmented[n], t) == key(center, t) for t in range(2))]
    hits.sort(key=lambda n: (float(np.sum((pos[n] - pos[0]) ** 2)), n))
    local, count = lsh_stage_one(view_of(smart), ent, 0, f, params, loc)
    assert local == hits[: f + 1]
    assert count == len(hits)


def test_f0_single_member():
    loc, _ = _fixture_map(1)
    params = LshParams.derive(1, 0, 2, 2, 4.0, 6)
    sel = lsh_select(view_of(range(1, 10)), EntityId(EntityKind.DEVICE_CLUSTER, 0, 0), 0, 0, params, loc)
    assert len(sel.members) == 1


@pytest.mark.parametrize("f", [1, 2])
def test_lsh_group_shape(f):
    loc, _ = _fixture_map(2)
    params = LshParams.derive(2, 0, 2, 2, 4.0, 6)
    sel = lsh_select(view_of(range(1, 10)), EntityId(EntityKind.DEVICE_CLUSTER, 0, 0), 0, f, params, loc)
    assert len(sel.members) == len(set(sel.members)) == 2 * f + 1
    assert len(sel.local) == f + 1
    assert set(sel.local) <= set(sel.members)


def test_single_cluster():
    pts = np.random.default_rng(0).uniform(0, 10, (25, 3))
    cl = cluster_devices(pts, 25, seed=0)
    assert len(cl) == 1 and cl[0].members == tuple(range(25))


def test_default_cluster_count():
    pts = np.random.default_rng(0).uniform(0, 10, (250, 3))
    cl = cluster_devices(pts, 25, seed=0)
    assert len(cl) == 10
    assert sorted(d for c in cl for d in c.members) == list(range(250))
    assert all(c.center in c.members for c in cl)


def test_separable_pairs():
    pts = np.array([[0.0, 0, 0], [100.0, 100, 100], [0.1, 0, 0], [100.1, 100, 100]])
    cl = cluster_devices(pts, 2, seed=3)
    assert sorted(c.members for c in cl) == [(0, 2), (1, 3)]


def test_hop_quorum_distance():
    hops = np.array([[0, 1, 3, 2], [1, 0, 2, 1], [3, 2, 0, 1], [2, 1, 1, 0]])
    assert hop_quorum_distance(0, [0, 1, 2, 3], 1, hops) == 1.0
    assert hop_quorum_distance(0, [0, 1, 2, 3], 2, hops) == 2.0
    assert hop_quorum_distance(0, [0], 0, hops) == 0.0


def test_lsh_beats_random_quorum_distance():
    base = {"experiment": "QUORUM_DISTANCE", "epochs": 3, "workload": {"routines": 0},
            "config": {"N": 500, "smart_fraction": 0.4}}
    means = {}
    for policy in ("LSH_MIX", "RANDOM"):
        raw = dict(base, config=dict(base["config"], selection_policy=policy))
        sc = scenario_from_dict(raw)
        recs = selection_trial(sc, 0).records
        means[policy] = np.mean([r["qdist"] for r in recs if r["ev"] == "group"])
    assert means["LSH_MIX"] < means["RANDOM"]
