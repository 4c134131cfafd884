# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels. Contracts are documented in ``_pycore.py``."""
import numpy as np
cimport numpy as cnp

ctypedef cnp.int64_t i64

NAME = "cython"


cdef inline i64 _find(i64[::1] parent, i64 x) noexcept nogil:
    cdef i64 root = x, nxt
    while parent[root] != root:
        root = parent[root]
    while parent[x] != root:
        nxt = parent[x]
        parent[x] = root
        x = nxt
    return root


def label_components(Py_ssize_t n, u, v):
    cdef const i64[::1] uu = np.ascontiguousarray(u, dtype=np.int64)
    cdef const i64[::1] vv = np.ascontiguousarray(v, dtype=np.int64)
    cdef i64[::1] parent = np.arange(n, dtype=np.int64)
    cdef i64[::1] size = np.ones(n, dtype=np.int64)
    labels_arr = np.empty(n, dtype=np.int64)
    sizes_arr = np.zeros(n, dtype=np.int64)
    cdef i64[::1] labels = labels_arr
    cdef i64[::1] sizes = sizes_arr
    cdef i64[::1] rep = np.full(n, -1, dtype=np.int64)
    cdef Py_ssize_t i, m = uu.shape[0]
    cdef i64 ra, rb, tmp, r
    with nogil:
        for i in range(m):
            ra = _find(parent, uu[i])
            rb = _find(parent, vv[i])
            if ra == rb:
                continue
            if size[ra] < size[rb] or (size[ra] == size[rb] and rb < ra):
                tmp = ra
                ra = rb
                rb = tmp
            parent[rb] = ra
            size[ra] += size[rb]
        for i in range(n):
            r = _find(parent, i)
            if rep[r] < 0:
                rep[r] = i
            labels[i] = rep[r]
            sizes[rep[r]] += 1
    return labels_arr, sizes_arr


def kmax_trajectory(Py_ssize_t n, u, v):
    cdef const i64[::1] uu = np.ascontiguousarray(u, dtype=np.int64)
    cdef const i64[::1] vv = np.ascontiguousarray(v, dtype=np.int64)
    cdef i64[::1] parent = np.arange(n, dtype=np.int64)
    cdef i64[::1] size = np.ones(n, dtype=np.int64)
    cdef Py_ssize_t i, m = uu.shape[0], k = 1
    pos_arr = np.empty(m + 1, dtype=np.int64)
    kmax_arr = np.empty(m + 1, dtype=np.int64)
    cdef i64[::1] pos = pos_arr
    cdef i64[::1] kmax = kmax_arr
    cdef i64 ra, rb, tmp, best = 1 if n > 0 else 0
    pos[0] = 0
    kmax[0] = best
    with nogil:
        for i in range(m):
            ra = _find(parent, uu[i])
            rb = _find(parent, vv[i])
            if ra == rb:
                continue
            if size[ra] < size[rb]:
                tmp = ra
                ra = rb
                rb = tmp
            parent[rb] = ra
            size[ra] += size[rb]
            if size[ra] > best:
                best = size[ra]
                pos[k] = i + 1
                kmax[k] = best
                k += 1
    return pos_arr[:k].copy(), kmax_arr[:k].copy()


def pair_distance_hist(labels, coords, is_origin, Py_ssize_t rmax):
    lab_np = np.asarray(labels, dtype=np.int64)
    order_np = np.argsort(lab_np, kind="stable").astype(np.int64)
    cdef const i64[::1] lab = np.ascontiguousarray(lab_np)
    cdef const i64[::1] order = order_np
    cdef const i64[:, ::1] xs = np.ascontiguousarray(coords, dtype=np.int64)
    cdef const cnp.uint8_t[::1] orig = np.ascontiguousarray(is_origin, dtype=np.uint8)
    hist_arr = np.zeros(rmax + 1, dtype=np.int64)
    cdef i64[::1] hist = hist_arr
    cdef Py_ssize_t n = lab.shape[0], d = xs.shape[1]
    cdef Py_ssize_t a = 0, b, i, j, lo, k, o, x
    cdef i64 dist, diff
    with nogil:
        while a < n:
            b = a + 1
            while b < n and lab[order[b]] == lab[order[a]]:
                b += 1
            # members are sorted by index, hence by the first coordinate
            lo = a
            for i in range(a, b):
                o = order[i]
                if not orig[o]:
                    continue
                while xs[order[lo], 0] < xs[o, 0] - rmax:
                    lo += 1
                j = lo
                while j < b:
                    x = order[j]
                    if xs[x, 0] > xs[o, 0] + rmax:
                        break
                    dist = 0
                    for k in range(d):
                        diff = xs[x, k] - xs[o, k]
                        if diff < 0:
                            diff = -diff
                        if diff > dist:
                            dist = diff
                    if dist <= rmax:
                        hist[dist] += 1
                    j += 1
            a = b
    return hist_arr


def two_ghost_counts(labels, sizes, coords, i64 side, origins, shifts, ns):
    cdef const i64[::1] lab = np.ascontiguousarray(labels, dtype=np.int64)
    cdef const i64[::1] sz = np.ascontiguousarray(sizes, dtype=np.int64)
    cdef const i64[:, ::1] xs = np.ascontiguousarray(coords, dtype=np.int64)
    cdef const i64[::1] org = np.ascontiguousarray(origins, dtype=np.int64)
    cdef const i64[:, ::1] sh = np.ascontiguousarray(np.asarray(shifts, dtype=np.int64).reshape(len(shifts), -1))
    cdef const i64[::1] thr = np.ascontiguousarray(ns, dtype=np.int64)
    cdef Py_ssize_t S = sh.shape[0], K = thr.shape[0], d = xs.shape[1], O = org.shape[0]
    counts_arr = np.zeros((S, K), dtype=np.int64)
    valid_arr = np.zeros(S, dtype=np.int64)
    cdef i64[:, ::1] counts = counts_arr
    cdef i64[::1] valid = valid_arr
    cdef Py_ssize_t s, q, k, o
    cdef i64 idx, c, lo, lx, m
    cdef bint inside
    with nogil:
        for q in range(O):
            o = org[q]
            lo = lab[o]
            for s in range(S):
                idx = 0
                inside = True
                for k in range(d):
                    c = xs[o, k] + sh[s, k]
                    if c < 0 or c >= side:
                        inside = False
                        break
                    idx = idx * side + c
                if not inside:
                    continue
                valid[s] += 1
                lx = lab[idx]
                if lx == lo:
                    continue
                m = sz[lo] if sz[lo] < sz[lx] else sz[lx]
                for k in range(K):
                    if thr[k] <= m:
                        counts[s, k] += 1
    return counts_arr, valid_arr
