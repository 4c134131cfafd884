from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from percolab.errors import DepthError, DomainError, MismatchError
from percolab.kernels import Block, ModelParams, SigmaDecomposition, block_of, h_sigma_array
from percolab.sampler import (PLAIN, REMAINDER, BoxGeometry, displacement_classes, edge_set, parse_dump,
                              restrict_to_eta, rng_for, sample_hierarchical, sample_layered, sample_plain)

HALF = ModelParams(1, 0.5, c=1.0, beta=math.log(2), L=2)


def test_box_indexing_is_a_bijection():
    box = BoxGeometry(5, 2)
    assert box.vertex_count == 25
    assert [box.index(box.point(i)) for i in range(25)] == list(range(25))
    assert box.indices(box.coords).tolist() == list(range(25))


def test_displacement_classes_half_space():
    cls = displacement_classes(4, 2)
    z = cls.z
    assert len(z) == (7 * 7 - 1) // 2
    first = np.array([row[np.flatnonzero(row)[0]] for row in z])
    assert np.all(first > 0)
    assert cls.count.tolist() == [int(np.prod(4 - np.abs(row))) for row in z]


def test_beta_zero_is_empty():
    p0 = HALF.with_beta(0.0)
    assert sample_plain(p0, BoxGeometry(16, 1), rng_for(0)).num_edges == 0
    sigma = SigmaDecomposition.zeros(2, 1, 4)
    assert sample_layered(p0, sigma, BoxGeometry(16, 1), 4, rng_for(0)).num_edges == 0


def test_nearest_neighbour_count_is_binomial():
    box = BoxGeometry(4, 1)
    draws = 100_000
    counts = np.zeros(4, dtype=np.int64)
    for s in range(draws):
        cfg = sample_plain(HALF, box, rng_for(7, s))
        counts[int(np.sum(cfg.v - cfg.u == 1))] += 1
    expected = draws * stats.binom.pmf(np.arange(4), 3, 0.5)
    assert stats.chisquare(counts, expected).pvalue > 1e-3


def test_long_pair_marginal():
    params = ModelParams(1, 0.5, c=1.0, beta=1.0)
    box = BoxGeometry(3, 1)
    draws = 100_000
    hits = sum((0, 2) in edge_set(sample_plain(params, box, rng_for(11, s))) for s in range(draws))
    p = -math.expm1(-2 ** -1.5)
    assert p == pytest.approx(0.29781, abs=1e-5)
    assert abs(hits / draws - p) < 3 * math.sqrt(p * (1 - p) / draws)


def test_single_pair_block_layer():
    params = ModelParams(1, 0.5, c=1.0, beta=1.0, L=2)
    sigma = SigmaDecomposition.zeros(2, 1, 1)
    box = BoxGeometry(2, 1)
    draws = 40_000
    B = Block(1, (0,), 2)
    opened = 0
    for s in range(draws):
        cfg = sample_hierarchical(params, sigma, box, 1, rng_for(5, s))
        assert cfg.blocks == (B,) or cfg.num_edges == 0
        opened += cfg.num_edges
    p = -math.expm1(-2 ** -1.5)
    assert abs(opened / draws - p) < 4 * math.sqrt(p * (1 - p) / draws)


def test_layer_invariants():
    params = ModelParams(1, 0.5, c=1.0, beta=2.0, L=2)
    sigma = SigmaDecomposition.random(2, 1, 6, 4)
    box = BoxGeometry(32, 1)
    cfg = sample_layered(params, sigma, box, 6, rng_for(1))
    pairs = list(zip(cfg.u.tolist(), cfg.v.tolist(), cfg.layer.tolist()))
    assert len(set(pairs)) == len(pairs)
    assert np.all(cfg.u < cfg.v)
    for k, B in enumerate(cfg.blocks, start=1):
        m = cfg.layer == k
        if not m.any():
            continue
        pu, pv = box.coords[cfg.u[m]], box.coords[cfg.v[m]]
        assert all(B.contains(x) and B.contains(y) for x, y in zip(pu, pv))
        assert np.all(h_sigma_array(sigma, pu, pv) == B.level)
    assert set(np.unique(cfg.layer)) <= {REMAINDER, *range(1, len(cfg.blocks) + 1)}


def test_truncation_flag():
    params = ModelParams(1, 0.5, beta=1.0, L=2)
    shifted = SigmaDecomposition(2, ((1,),) * 5)
    assert sample_layered(params, shifted, BoxGeometry(16, 1), 5, rng_for(0)).truncated
    aligned = SigmaDecomposition.zeros(2, 1, 4)
    assert not sample_layered(params, aligned, BoxGeometry(16, 1), 4, rng_for(0)).truncated


def test_layered_preconditions():
    params = ModelParams(1, 0.5, beta=1.0, L=2)
    sigma = SigmaDecomposition.zeros(2, 1, 3)
    with pytest.raises(DepthError):
        sample_layered(params, sigma, BoxGeometry(8, 1), 4, rng_for(0))
    with pytest.raises(DomainError):
        sample_layered(params, sigma, BoxGeometry(16, 1), 3, rng_for(0))
    with pytest.raises(MismatchError):
        sample_layered(ModelParams(1, 0.5, L=3), sigma, BoxGeometry(8, 1), 3, rng_for(0))


def test_determinism():
    params = ModelParams(2, 1.0, beta=0.4, L=2)
    sigma = SigmaDecomposition.random(2, 2, 5, 9)
    box = BoxGeometry(32, 2)
    a = sample_layered(params, sigma, box, 5, rng_for(42, 3), seed=42, stream=3)
    b = sample_layered(params, sigma, box, 5, rng_for(42, 3), seed=42, stream=3)
    assert a.dump() == b.dump()
    c = sample_layered(params, sigma, box, 5, rng_for(42, 4), seed=42, stream=4)
    assert a.dump() != c.dump()


def test_dump_round_trip():
    params = ModelParams(1, 0.5, beta=1.5, L=2)
    sigma = SigmaDecomposition.zeros(2, 1, 4)
    cfg = sample_layered(params, sigma, BoxGeometry(16, 1), 4, rng_for(2), seed=2, stream=0)
    header, edges = parse_dump(cfg.dump())
    assert header["side"] == "16" and header["seed"] == "2" and header["sigma"] == sigma.digest
    # a pair may be open in several layers at once, so compare as a multiset of tagged edges
    assert len(edges) == cfg.num_edges
    assert {(a, b) for _, a, b in edges} == edge_set(cfg)
    assert {t for t, _, _ in edges} <= {"R"} | {B.tag for B in cfg.blocks}
    plain = sample_plain(params, BoxGeometry(16, 1), rng_for(2))
    assert {t for t, _, _ in parse_dump(plain.dump())[1]} <= {"P"}
    assert np.all(plain.layer == PLAIN)


@given(st.integers(0, 2 ** 32 - 1), st.floats(0.05, 3.0), st.floats(0.0, 1.0))
def test_monotone_coupling(seed, beta, frac):
    params = ModelParams(1, 0.5, beta=beta, L=2)
    sigma = SigmaDecomposition.zeros(2, 1, 5)
    cfg = sample_layered(params, sigma, BoxGeometry(32, 1), 5, rng_for(seed))
    low = cfg.at(beta * frac)
    assert edge_set(low) <= edge_set(cfg)
    assert edge_set(low.at(beta * frac * 0.5)) <= edge_set(low)
    with pytest.raises(DomainError):
        low.at(beta * 2 + 1)


def test_coupled_marginal_matches_lower_beta():
    high, low = ModelParams(1, 0.5, beta=2.0), 0.5
    box = BoxGeometry(3, 1)
    draws = 40_000
    hits = sum((0, 1) in edge_set(sample_plain(high, box, rng_for(8, s)).at(low)) for s in range(draws))
    p = -math.expm1(-low)
    assert abs(hits / draws - p) < 4 * math.sqrt(p * (1 - p) / draws)


def test_eta_restriction_examples():
    params = ModelParams(1, 0.5, beta=3.0, L=2)
    sigma = SigmaDecomposition.zeros(2, 1, 4)
    box = BoxGeometry(16, 1)
    cfg = sample_layered(params, sigma, box, 4, rng_for(6))
    top = block_of(sigma, 0, 4)
    assert edge_set(restrict_to_eta(cfg, top)) == edge_set(cfg)
    a, b = block_of(sigma, 4, 1), block_of(sigma, 6, 1)
    assert edge_set(restrict_to_eta(cfg, a)) == edge_set(restrict_to_eta(cfg, b))
    point = block_of(sigma, 5, 0)
    kept = restrict_to_eta(cfg, point)
    removed = {cfg.layer_id(block_of(sigma, 5, m)) for m in range(1, 5)}
    assert not set(kept.layer.tolist()) & removed
    assert kept.num_edges == int(np.sum(~np.isin(cfg.layer, list(removed))))


def test_eta_recursion_as_edge_sets():
    params = ModelParams(1, 0.5, beta=3.0, L=2)
    sigma = SigmaDecomposition.random(2, 1, 5, 1)
    box = BoxGeometry(32, 1)
    cfg = sample_layered(params, sigma, box, 5, rng_for(12))
    for x in (0, 7, 19, 31):
        for n in range(0, 4):
            B = block_of(sigma, x, n)
            up = block_of(sigma, x, n + 1)
            own = cfg.layer == cfg.layer_id(up) if cfg.layer_id(up) else np.zeros(cfg.num_edges, bool)
            layer = set(zip(cfg.u[own].tolist(), cfg.v[own].tolist()))
            assert edge_set(restrict_to_eta(cfg, up)) == edge_set(restrict_to_eta(cfg, B)) | layer


def test_foreign_block_is_rejected():
    params = ModelParams(1, 0.5, beta=1.0, L=2)
    sigma = SigmaDecomposition.zeros(2, 1, 4)
    cfg = sample_layered(params, sigma, BoxGeometry(16, 1), 4, rng_for(0))
    with pytest.raises(MismatchError):
        restrict_to_eta(cfg, Block(2, (1,), 2))


def test_layer_independence():
    params = ModelParams(1, 0.5, beta=1.0, L=2)
    sigma = SigmaDecomposition.zeros(2, 1, 2)
    box = BoxGeometry(4, 1)
    draws = 20_000
    a = np.zeros(draws)
    b = np.zeros(draws)
    for s in range(draws):
        cfg = sample_layered(params, sigma, box, 2, rng_for(9, s))
        a[s] = np.sum(cfg.layer == REMAINDER)
        b[s] = np.sum(cfg.layer != REMAINDER)
    r = np.corrcoef(a, b)[0, 1]
    assert abs(r) < 3 / math.sqrt(draws)


def test_large_box_is_fast_and_sparse():
    params = ModelParams(1, 0.5, beta=0.27)
    cfg = sample_plain(params, BoxGeometry(1 << 16, 1), rng_for(0))
    assert 0 < cfg.num_edges < 10 * (1 << 16)
