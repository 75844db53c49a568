# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels; ``_purepy`` holds the reference implementations."""

import numpy as np

from libc.math cimport floor
from libc.stdint cimport int32_t, int64_t, uint8_t, uint64_t


def all_pairs_hops(const int32_t[:] indptr, const int32_t[:] indices, const uint8_t[:] alive):
    cdef Py_ssize_t n = indptr.shape[0] - 1
    out = np.full((n, n), -1, dtype=np.int32)
    cdef int32_t[:, :] dist = out
    queue_arr = np.empty(max(n, 1), dtype=np.int32)
    cdef int32_t[:] queue = queue_arr
    cdef Py_ssize_t src, head, tail, u, v, e
    for src in range(n):
        if not alive[src]:
            continue
        dist[src, src] = 0
        queue[0] = <int32_t>src
        head = 0
        tail = 1
        while head < tail:
            u = queue[head]
            head += 1
            for e in range(indptr[u], indptr[u + 1]):
                v = indices[e]
                if alive[v] and dist[src, v] < 0:
                    dist[src, v] = dist[src, u] + 1
                    queue[tail] = <int32_t>v
                    tail += 1
    return out


def lsh_keys(const double[:, :] vecs, const double[:, :, :] a, const double[:, :] b, double r):
    cdef Py_ssize_t n = vecs.shape[0], dim = vecs.shape[1]
    cdef Py_ssize_t nl = a.shape[0], nm = a.shape[1]
    out = np.empty((n, nl, nm), dtype=np.int64)
    cdef int64_t[:, :, :] keys = out
    cdef Py_ssize_t i, j, q, c
    cdef double acc
    for i in range(n):
        for j in range(nl):
            for q in range(nm):
                acc = b[j, q]
                for c in range(dim):
                    acc += a[j, q, c] * vecs[i, c]
                keys[i, j, q] = <int64_t>floor(acc / r)
    return out


cdef inline uint64_t _splitmix(uint64_t *state) nogil:
    state[0] += 0x9E3779B97F4A7C15ULL
    cdef uint64_t z = state[0]
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL
    return z ^ (z >> 31)


def mc_availability(int S, int G, int k, int f, int F, long trials, unsigned long long seed):
    """Count trials in which every one of G random k-subsets holds <= f failed nodes."""
    cdef uint64_t state = seed
    perm_f_arr = np.arange(S, dtype=np.int32)
    perm_g_arr = np.arange(S, dtype=np.int32)
    failed_arr = np.zeros(S, dtype=np.uint8)
    cdef int32_t[:] perm_f = perm_f_arr
    cdef int32_t[:] perm_g = perm_g_arr
    cdef uint8_t[:] failed = failed_arr
    cdef long t, ok = 0
    cdef int i, j, g, bad, tmp
    cdef bint good
    for t in range(trials):
        for i in range(S):
            failed[i] = 0
        for i in range(F):
            j = i + <int>(_splitmix(&state) % <uint64_t>(S - i))
            tmp = perm_f[i]; perm_f[i] = perm_f[j]; perm_f[j] = tmp
            failed[perm_f[i]] = 1
        good = True
        for g in range(G):
            bad = 0
            for i in range(k):
                j = i + <int>(_splitmix(&state) % <uint64_t>(S - i))
                tmp = perm_g[i]; perm_g[i] = perm_g[j]; perm_g[j] = tmp
                bad += failed[perm_g[i]]
            if bad > f:
                good = False
                break
        if good:
            ok += 1
    return ok
