"""Connectivity labeling and per-configuration cluster statistics."""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import _backend
from .errors import DomainError
from .kernels import Block
from .sampler import BoxGeometry, EdgeConfiguration


@dataclass(frozen=True)
class ClusterLabeling:
    """Clusters of an edge set on ``vertex_count`` vertices.

    ``labels[x]`` is the smallest vertex index in the cluster of ``x`` (so it
    is its own fixed point, ``labels[labels[x]] == labels[x]``), and
    ``sizes[r]`` is the cluster size for each label ``r`` (zero elsewhere).
    """

    labels: np.ndarray
    sizes: np.ndarray
    box: BoxGeometry | None = None

    def __post_init__(self):
        self.labels.setflags(write=False)
        self.sizes.setflags(write=False)

    @property
    def vertex_count(self) -> int:
        return len(self.labels)

    def find(self, x: int) -> int:
        return int(self.labels[x])

    def connected(self, x: int, y: int) -> bool:
        return self.labels[x] == self.labels[y]

    def size_of(self, x: int) -> int:
        return int(self.sizes[self.labels[x]])

    @property
    def roots(self) -> np.ndarray:
        return np.flatnonzero(self.sizes)

    @property
    def cluster_sizes(self) -> np.ndarray:
        return self.sizes[self.sizes > 0]

    @property
    def largest(self) -> int:
        return int(self.sizes.max()) if len(self.sizes) else 0

    def members(self, x: int) -> np.ndarray:
        return np.flatnonzero(self.labels == self.labels[x])


def label_clusters(edges, vertex_count: int | None = None, box: BoxGeometry | None = None) -> ClusterLabeling:
    """Label the clusters of an :class:`EdgeConfiguration` or a ``(u, v)`` pair of index arrays."""
    if isinstance(edges, EdgeConfiguration):
        box = edges.box
        vertex_count = box.vertex_count
        u, v = edges.u, edges.v
    else:
        if vertex_count is None:
            raise DomainError("vertex_count is required for a bare edge list")
        arr = np.asarray(edges, dtype=np.int64).reshape(-1, 2) if not isinstance(edges, tuple) else None
        u, v = (arr[:, 0], arr[:, 1]) if arr is not None else (np.asarray(edges[0]), np.asarray(edges[1]))
    if len(u) and (min(u.min(), v.min()) < 0 or max(u.max(), v.max()) >= vertex_count):
        raise DomainError("edge endpoint outside the vertex range")
    labels, sizes = _backend.label_components(int(vertex_count), u, v)
    return ClusterLabeling(labels, sizes, box)


def _vertex_set(labeling: ClusterLabeling, B) -> np.ndarray:
    if isinstance(B, Block):
        if labeling.box is None:
            raise DomainError("a Block argument needs a labeling that knows its box")
        lo, hi = labeling.box.clip(B)
        if np.any(lo != np.asarray(B.corner)) or np.any(hi != np.asarray(B.corner) + B.side - 1):
            raise DomainError(f"{B.tag} is not contained in the box")
        return labeling.box.indices_of(B)
    idx = np.unique(np.asarray(B, dtype=np.int64).reshape(-1))
    if len(idx) and (idx[0] < 0 or idx[-1] >= labeling.vertex_count):
        raise DomainError("vertex subset leaves the box")
    return idx


def _restricted_counts(labeling: ClusterLabeling, idx: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Labels meeting the set and the size of each intersection."""
    return np.unique(labeling.labels[idx], return_counts=True)


def max_cluster_in(labeling: ClusterLabeling, B) -> int:
    """``max_K |K ∩ B|`` over all clusters, including clusters that leave ``B``."""
    idx = _vertex_set(labeling, B)
    if len(idx) == 0:
        return 0
    return int(_restricted_counts(labeling, idx)[1].max())


def restricted_susceptibility(labeling: ClusterLabeling, B) -> int:
    """``sum_C |C ∩ B|^2``, the number of ordered connected pairs in ``B``."""
    idx = _vertex_set(labeling, B)
    if len(idx) == 0:
        return 0
    counts = _restricted_counts(labeling, idx)[1]
    return int(np.dot(counts, counts))


def cross_block_product(labeling: ClusterLabeling, B_small, B_big) -> int:
    """``sum_C |C ∩ B_small| * |C ∩ B_big|``."""
    small = _vertex_set(labeling, B_small)
    big = _vertex_set(labeling, B_big)
    if not np.all(np.isin(small, big, assume_unique=True)):
        raise DomainError("B_small must be contained in B_big")
    ls, cs = _restricted_counts(labeling, small)
    lb, cb = _restricted_counts(labeling, big)
    pos = np.searchsorted(lb, ls)
    return int(np.dot(cs, cb[pos]))


def origin_connection_counts(labeling: ClusterLabeling, origin, radii: Sequence[int]) -> np.ndarray:
    """For each ``r``, the number of ``x`` in ``origin + [-r, r]^d`` connected to ``origin`` (itself included)."""
    box = labeling.box
    if box is None:
        raise DomainError("labeling has no box geometry")
    o = np.asarray(origin, dtype=np.int64).reshape(box.d)
    radii = np.asarray(radii, dtype=np.int64)
    if len(radii) == 0:
        return np.zeros(0, dtype=np.int64)
    rmax = int(radii.max())
    if np.any(o - rmax < 0) or np.any(o + rmax >= box.side):
        raise DomainError(f"the ball of radius {rmax} around {tuple(o)} exceeds the box")
    oi = int(o @ box.strides)
    members = labeling.members(oi)
    dist = np.abs(box.coords[members] - o).max(axis=1)
    hist = np.bincount(dist[dist <= rmax], minlength=rmax + 1)
    return np.cumsum(hist)[radii]


def two_ghost_indicator(labeling: ClusterLabeling, x, n: int, origin=None) -> bool:
    """True iff ``origin`` and ``x`` lie in distinct clusters each of size at least ``n``.

    The origin defaults to vertex 0.  In finite volume every cluster is
    finite, so no further condition is needed.
    """
    box = labeling.box
    xi = int(x) if box is None or np.isscalar(x) else box.index(x)
    oi = 0 if origin is None else (int(origin) if box is None or np.isscalar(origin) else box.index(origin))
    if labeling.connected(oi, xi):
        return False
    return min(labeling.size_of(oi), labeling.size_of(xi)) >= n


def cluster_size_histogram(labeling: ClusterLabeling) -> dict[int, int]:
    return dict(sorted(Counter(labeling.cluster_sizes.tolist()).items()))


def size_biased_tail(labeling: ClusterLabeling, ns) -> np.ndarray:
    """``P(|K(x)| >= n)`` for a uniform vertex ``x``, for each ``n`` in ``ns``."""
    sizes = np.sort(labeling.cluster_sizes)
    mass = np.concatenate((np.cumsum(sizes[::-1])[::-1], [0]))
    pos = np.searchsorted(sizes, np.asarray(ns), side="left")
    return mass[pos] / labeling.vertex_count


def tail_from_histogram(hist: dict[int, int], n: int, vertex_count: int) -> float:
    return sum(s * k for s, k in hist.items() if s >= n) / vertex_count
