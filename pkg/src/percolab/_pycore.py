"""Pure-Python/numpy implementations of the hot kernels.

These mirror ``_core.pyx`` exactly (same inputs, bit-identical outputs) and
are used when the compiled extension is unavailable or when
``PERCOLAB_PURE_PYTHON=1`` is set.
"""
from __future__ import annotations

import numpy as np

NAME = "python"


def _find(parent, x):
    root = x
    while parent[root] != root:
        root = parent[root]
    while parent[x] != root:
        parent[x], x = root, parent[x]
    return root


def label_components(n, u, v):
    """Union by size with path compression; labels are the smallest vertex index of each cluster."""
    parent = list(range(n))
    size = [1] * n
    for a, b in zip(np.asarray(u).tolist(), np.asarray(v).tolist()):
        ra, rb = _find(parent, a), _find(parent, b)
        if ra == rb:
            continue
        if size[ra] < size[rb] or (size[ra] == size[rb] and rb < ra):
            ra, rb = rb, ra
        parent[rb] = ra
        size[ra] += size[rb]
    rep = [-1] * n
    labels = np.empty(n, dtype=np.int64)
    sizes = np.zeros(n, dtype=np.int64)
    for x in range(n):
        r = _find(parent, x)
        if rep[r] < 0:
            rep[r] = x
        labels[x] = rep[r]
        sizes[rep[r]] += 1
    return labels, sizes


def kmax_trajectory(n, u, v):
    """Largest cluster size as edges are added in order.

    Returns ``(pos, kmax)``: after the first ``pos[j]`` edges the largest
    cluster has size ``kmax[j]``, until the next change point.
    """
    parent = list(range(n))
    size = [1] * n
    best = 1 if n else 0
    pos, kmax = [0], [best]
    for i, (a, b) in enumerate(zip(np.asarray(u).tolist(), np.asarray(v).tolist())):
        ra, rb = _find(parent, a), _find(parent, b)
        if ra == rb:
            continue
        if size[ra] < size[rb]:
            ra, rb = rb, ra
        parent[rb] = ra
        size[ra] += size[rb]
        if size[ra] > best:
            best = size[ra]
            pos.append(i + 1)
            kmax.append(best)
    return np.asarray(pos, dtype=np.int64), np.asarray(kmax, dtype=np.int64)


def pair_distance_hist(labels, coords, is_origin, rmax):
    """Histogram over ordered same-cluster pairs ``(o, x)`` with ``o`` an origin, by l-infinity distance <= rmax."""
    labels = np.asarray(labels)
    coords = np.asarray(coords, dtype=np.int64)
    is_origin = np.asarray(is_origin, dtype=bool)
    hist = np.zeros(rmax + 1, dtype=np.int64)
    order = np.argsort(labels, kind="stable")
    lab = labels[order]
    cuts = np.flatnonzero(np.diff(lab)) + 1
    starts = np.concatenate(([0], cuts))
    stops = np.concatenate((cuts, [len(lab)]))
    for a, b in zip(starts, stops):
        members = order[a:b]
        origins = members[is_origin[members]]
        if len(origins) == 0:
            continue
        pts = coords[members]
        for chunk in range(0, len(origins), 256):
            o = coords[origins[chunk:chunk + 256]]
            dist = np.abs(o[:, None, :] - pts[None, :, :]).max(axis=2).ravel()
            hist += np.bincount(dist[dist <= rmax], minlength=rmax + 1)
    return hist


def two_ghost_counts(labels, sizes, coords, side, origins, shifts, ns):
    """For each shift ``z`` and threshold ``ns[k]``: number of origins ``o`` with
    ``o`` and ``o+z`` in distinct clusters both of size >= ``ns[k]``.

    Also returns, per shift, how many origins had ``o+z`` inside the box.
    """
    labels = np.asarray(labels)
    sizes = np.asarray(sizes)
    coords = np.asarray(coords, dtype=np.int64)
    origins = np.asarray(origins, dtype=np.int64)
    shifts = np.asarray(shifts, dtype=np.int64)
    ns = np.asarray(ns, dtype=np.int64)
    d = coords.shape[1]
    weights = side ** np.arange(d - 1, -1, -1, dtype=np.int64)
    counts = np.zeros((len(shifts), len(ns)), dtype=np.int64)
    valid = np.zeros(len(shifts), dtype=np.int64)
    base = coords[origins]
    lab_o = labels[origins]
    size_o = sizes[lab_o]
    for s, z in enumerate(shifts):
        pts = base + z
        inside = np.all((pts >= 0) & (pts < side), axis=1)
        valid[s] = inside.sum()
        idx = pts[inside] @ weights
        lab_x = labels[idx]
        m = np.minimum(size_o[inside], sizes[lab_x])
        m = m[lab_o[inside] != lab_x]
        counts[s] = (m[:, None] >= ns[None, :]).sum(axis=0)
    return counts, valid
