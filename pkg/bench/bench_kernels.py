"""Time the compiled kernels against the pure-Python fallback.

    python3 bench/bench_kernels.py [--repeat 3]
"""

import argparse
import timeit

import numpy as np

from comesh import _purepy
from comesh.simnet import build_topology

try:
    from comesh import _speedups
except ImportError:
    _speedups = None


def cases():
    topo = build_topology("GRID3D", 500, 0.4, seed=0)
    indptr, indices = topo.csr()
    alive = np.ones(topo.n, dtype=np.uint8)
    yield "all_pairs_hops N=500", lambda m: m.all_pairs_hops(indptr, indices, alive)

    rng = np.random.default_rng(0)
    vecs = rng.uniform(0, 10, (1000, 6))
    a = rng.standard_normal((2, 3, 6))
    b = rng.uniform(0, 4, (2, 3))
    yield "lsh_keys 1000x(l=2,m=3)", lambda m: m.lsh_keys(vecs, a, b, 4.0)

    yield "mc_availability 1e4 trials", lambda m: m.mc_availability(100, 30, 11, 5, 45, 10_000, 7)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()
    print(f"{'kernel':<30} {'python s':>10} {'cython s':>10} {'speedup':>8}")
    for name, fn in cases():
        py = min(timeit.repeat(lambda: fn(_purepy), number=1, repeat=args.repeat))
        if _speedups is None:
            print(f"{name:<30} {py:>10.4f} {'n/a':>10} {'':>8}")
            continue
        cy = min(timeit.repeat(lambda: fn(_speedups), number=1, repeat=args.repeat))
        print(f"{name:<30} {py:>10.4f} {cy:>10.4f} {py / cy:>7.1f}x")


if __name__ == "__main__":
    main()
