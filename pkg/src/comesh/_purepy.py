"""Pure-Python kernels, bit-compatible with the compiled extension."""

from __future__ import annotations

from collections import deque

import numpy as np

_MASK = (1 << 64) - 1


def all_pairs_hops(indptr, indices, alive) -> np.ndarray:
    n = len(indptr) - 1
    indptr = [int(x) for x in indptr]
    indices = [int(x) for x in indices]
    alive = [bool(x) for x in alive]
    out = np.full((n, n), -1, dtype=np.int32)
    for src in range(n):
        if not alive[src]:
            continue
        row = [-1] * n
        row[src] = 0
        q = deque([src])
        while q:
            u = q.popleft()
            du = row[u] + 1
            for e in range(indptr[u], indptr[u + 1]):
                v = indices[e]
                if alive[v] and row[v] < 0:
                    row[v] = du
                    q.append(v)
        out[src] = row
    return out


def lsh_keys(vecs, a, b, r: float) -> np.ndarray:
    vecs = np.asarray(vecs, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    proj = np.einsum("jqc,ic->ijq", a, vecs) + b[None, :, :]
    return np.floor(proj / r).astype(np.int64)


def mc_availability(S: int, G: int, k: int, f: int, F: int, trials: int, seed: int) -> int:
    state = seed & _MASK

    def draw() -> int:
        nonlocal state
        state = (state + 0x9E3779B97F4A7C15) & _MASK
        z = state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
        return z ^ (z >> 31)

    perm_f = list(range(S))
    perm_g = list(range(S))
    ok = 0
    for _ in range(trials):
        failed = [False] * S
        for i in range(F):
            j = i + draw() % (S - i)
            perm_f[i], perm_f[j] = perm_f[j], perm_f[i]
            failed[perm_f[i]] = True
        good = True
        for _g in range(G):
            bad = 0
            for i in range(k):
                j = i + draw() % (S - i)
                perm_g[i], perm_g[j] = perm_g[j], perm_g[i]
                bad += failed[perm_g[i]]
            if bad > f:
                good = False
                break
        ok += good
    return ok
