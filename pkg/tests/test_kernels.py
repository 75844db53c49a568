"""Compiled and pure-Python kernels must agree bit for bit."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from comesh import _purepy, kernels
from comesh.simnet import build_topology

speedups = pytest.importorskip("comesh._speedups")


def test_backend_reported():
    assert kernels.BACKEND in ("cython", "python")


@pytest.mark.parametrize("kind,n", [("GRID3D", 64), ("RANDOM", 80), ("GRID3D", 27)])
def test_hops_agree(kind, n):
    topo = build_topology(kind, n, 0.4, seed=5)
    indptr, indices = topo.csr()
    alive = np.ones(n, dtype=np.uint8)
    alive[::7] = 0
    a = speedups.all_pairs_hops(indptr, indices, alive)
    b = _purepy.all_pairs_hops(indptr, indices, alive)
    assert np.array_equal(a, b)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 40), st.integers(1, 3), st.integers(1, 3), st.floats(0.5, 8.0), st.integers(0, 2**31))
def test_lsh_keys_agree(n, m, l, r, seed):
    rng = np.random.default_rng(seed)
    vecs = rng.uniform(-20, 20, (n, 6))
    a = rng.standard_normal((l, m, 6))
    b = rng.uniform(0, r, (l, m))
    assert np.array_equal(speedups.lsh_keys(vecs, a, b, r), _purepy.lsh_keys(vecs, a, b, r))


@settings(max_examples=25, deadline=None)
@given(
    st.integers(5, 40).flatmap(
        lambda S: st.tuples(
            st.just(S), st.integers(1, 4), st.integers(1, S), st.integers(0, 3), st.integers(0, S), st.integers(0, 2**63)
        )
    )
)
def test_mc_agree(args):
    S, G, k, f, F, seed = args
    assert speedups.mc_availability(S, G, k, f, F, 300, seed) == _purepy.mc_availability(S, G, k, f, F, 300, seed)
