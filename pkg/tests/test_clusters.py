from __future__ import annotations

from collections import deque

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from percolab.clusters import (cluster_size_histogram, cross_block_product, label_clusters, max_cluster_in,
                               origin_connection_counts, restricted_susceptibility, size_biased_tail,
                               tail_from_histogram, two_ghost_indicator)
from percolab.errors import DomainError
from percolab.kernels import Block, ModelParams, SigmaDecomposition
from percolab.sampler import BoxGeometry, rng_for, sample_layered, sample_plain

BOX4 = BoxGeometry(4, 1)


def lab(edges, n=4, box=None):
    return label_clusters(np.asarray(edges, dtype=np.int64).reshape(-1, 2), n, box)


def test_label_examples():
    empty = lab([], 5)
    assert empty.cluster_sizes.tolist() == [1] * 5
    path = lab([(0, 1), (1, 2)], 3)
    assert path.cluster_sizes.tolist() == [3]
    pairs = lab([(0, 1), (2, 3)], 4)
    assert sorted(pairs.cluster_sizes.tolist()) == [2, 2]


def test_out_of_range_endpoint():
    with pytest.raises(DomainError):
        lab([(0, 4)], 4)


def test_max_cluster_examples():
    box = BoxGeometry(8, 1)
    iso = lab([], 8, box)
    assert max_cluster_in(iso, Block(0, (3,), 2)) == 1
    assert max_cluster_in(iso, Block(2, (4,), 2)) == 1
    full = lab([(i, i + 1) for i in range(7)], 8, box)
    assert max_cluster_in(full, Block(2, (4,), 2)) == 4
    assert max_cluster_in(full, []) == 0


def test_restricted_susceptibility_examples():
    assert restricted_susceptibility(lab([], 4), range(4)) == 4
    assert restricted_susceptibility(lab([(0, 1), (1, 2), (2, 3)], 4), range(4)) == 16
    assert restricted_susceptibility(lab([(0, 1), (1, 2)], 4), range(4)) == 10


def test_cross_block_product_examples():
    L = lab([(0, 1), (2, 3)], 4, BOX4)
    small, big = Block(1, (0,), 2), Block(2, (0,), 2)
    assert cross_block_product(L, big, big) == restricted_susceptibility(L, big)
    assert cross_block_product(lab([], 4, BOX4), small, big) == 2
    full = lab([(0, 1), (1, 2), (2, 3)], 4, BOX4)
    assert cross_block_product(full, small, big) == 2 * 4
    with pytest.raises(DomainError):
        cross_block_product(L, big, small)


def test_block_outside_box_rejected():
    with pytest.raises(DomainError):
        max_cluster_in(lab([], 4, BOX4), Block(2, (2,), 2))


def test_origin_connection_examples():
    box = BoxGeometry(9, 1)
    assert origin_connection_counts(lab([], 9, box), 4, [1, 2, 4]).tolist() == [1, 1, 1]
    full = lab([(i, i + 1) for i in range(8)], 9, box)
    assert origin_connection_counts(full, 4, [0, 1, 4]).tolist() == [1, 3, 9]
    # origin 4 with cluster {3, 4, 7}, i.e. {-1, 0, 3} relative to the origin
    tri = lab([(3, 4), (4, 7)], 9, box)
    assert origin_connection_counts(tri, 4, [2]).tolist() == [2]
    with pytest.raises(DomainError):
        origin_connection_counts(tri, 4, [5])


def test_two_ghost_examples():
    box = BoxGeometry(10, 1)
    L = lab([(0, 1), (1, 2), (2, 3), (3, 4), (5, 6), (6, 7)], 10, box)
    assert not two_ghost_indicator(L, 3, 1)
    assert two_ghost_indicator(lab([], 10, box), 9, 1)
    assert not two_ghost_indicator(L, 6, 4)
    assert two_ghost_indicator(L, 6, 3)


def test_histogram_examples():
    assert cluster_size_histogram(lab([], 6)) == {1: 6}
    assert cluster_size_histogram(lab([(0, 1), (1, 2), (2, 3)], 4)) == {4: 1}
    split = lab([(0, 1), (1, 2)], 4)
    assert tail_from_histogram(cluster_size_histogram(split), 2, 4) == pytest.approx(0.75)
    assert size_biased_tail(split, [1, 2, 3, 4]).tolist() == pytest.approx([1.0, 0.75, 0.75, 0.0])


def bfs_counts(n, edges, coords, origin, radii):
    adj = [[] for _ in range(n)]
    for a, b in edges:
        adj[a].append(b)
        adj[b].append(a)
    seen = {origin}
    queue = deque([origin])
    while queue:
        x = queue.popleft()
        for y in adj[x]:
            if y not in seen:
                seen.add(y)
                queue.append(y)
    dist = [int(np.abs(coords[x] - coords[origin]).max()) for x in seen]
    return [sum(1 for t in dist if t <= r) for r in radii]


@given(st.integers(1, 2), st.integers(0, 2 ** 31), st.floats(0.1, 3.0))
def test_origin_counts_match_bfs(d, seed, beta):
    side = 12 if d == 1 else 8
    box = BoxGeometry(side, d)
    cfg = sample_plain(ModelParams(d, 0.5 * d, beta=beta), box, rng_for(seed))
    labeling = label_clusters(cfg)
    origin = (side // 2,) * d
    radii = [0, 1, 2, side // 2 - 1]
    want = bfs_counts(box.vertex_count, zip(cfg.u.tolist(), cfg.v.tolist()), box.coords, box.index(origin), radii)
    assert origin_connection_counts(labeling, origin, radii).tolist() == want


@given(st.integers(0, 2 ** 31), st.floats(0.1, 4.0), st.floats(0.0, 1.0))
def test_labeling_invariants(seed, beta, frac):
    box = BoxGeometry(32, 1)
    sigma = SigmaDecomposition.zeros(2, 1, 5)
    cfg = sample_layered(ModelParams(1, 0.5, beta=beta), sigma, box, 5, rng_for(seed))
    L = label_clusters(cfg)
    assert L.sizes.sum() == box.vertex_count
    assert np.all(L.labels[L.labels] == L.labels)
    assert np.all(L.labels <= np.arange(box.vertex_count))
    for B in (Block(3, (8,), 2), Block(5, (0,), 2)):
        chi, mx = restricted_susceptibility(L, B), max_cluster_in(L, B)
        meeting = len(np.unique(L.labels[box.indices_of(B)]))
        assert mx * mx / meeting <= chi <= B.volume * mx
    low = label_clusters(cfg.at(beta * frac))
    small, big = Block(2, (8,), 2), Block(4, (0,), 2)
    assert cross_block_product(low, small, big) <= cross_block_product(L, small, big)
