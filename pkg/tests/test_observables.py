from __future__ import annotations

import math

import numpy as np
import pytest

from percolab.errors import DomainError, InsufficientSamplesError
from percolab.kernels import Block, ModelParams, SigmaDecomposition, block_of
from percolab.observables import (BlockEnsemble, classify_good, collect_chain, collect_sibling_ensembles,
                                  constrained_tail_fit, estimate_M, estimate_T, mark_ancestral, tightness_report,
                                  two_ghost_lhs, write_csv)
from percolab.oracle import TinyInstance, exact_connection_probability
from percolab.sampler import BoxGeometry, rng_for, sample_layered

B0 = Block(0, (0,), 2)
B2 = Block(2, (0,), 2)


def ens(values, block=B2, chi=None):
    values = np.asarray(values)
    return BlockEnsemble(block, values, values.astype(float) ** 2 if chi is None else chi)


def test_M_examples():
    assert estimate_M(ens(np.ones(200, int), B0)).value == 2
    assert estimate_M(ens(np.full(150, 7))).value == 8
    mixed = ens(np.repeat([2, 3, 4], [50, 20, 30]))
    assert mixed.tail(3) == pytest.approx(0.5) and mixed.tail(4) == pytest.approx(0.3)
    assert estimate_M(mixed).value == 4


def test_M_band_brackets_value_and_needs_samples():
    rng = np.random.default_rng(0)
    m = estimate_M(ens(rng.integers(1, 20, 400)))
    assert m.lower <= m.value <= m.upper
    with pytest.raises(InsufficientSamplesError):
        estimate_M(ens(np.ones(99, int)))


def test_M_monotone_under_coupling():
    params = ModelParams(1, 0.5, beta=2.0, L=2)
    sigma = SigmaDecomposition.zeros(2, 1, 4)
    box = BoxGeometry(16, 1)
    configs = [sample_layered(params, sigma, box, 4, rng_for(3, s)) for s in range(200)]
    hi = collect_sibling_ensembles(params, sigma, box, 4, 200, 3, parent_levels=[4], configs=configs)
    lo = collect_sibling_ensembles(params.with_beta(0.5), sigma, box, 4, 200, 3, parent_levels=[4],
                                   configs=[c.at(0.5) for c in configs])
    for a, b in zip(lo.at_level(3), hi.at_level(3)):
        assert np.all(a.max_in <= b.max_in)
        assert estimate_M(a).value <= estimate_M(b).value


def test_classify_good_examples():
    same = [ens(np.full(120, 3), B) for B in B2.children()]
    assert all(classify_good(same).flags().values())
    kids = Block(1, (0,), 2).children()
    low, high = ens(np.full(120, 1), kids[0]), ens(np.full(120, 2), kids[1])
    flags = classify_good([low, high]).flags()
    assert flags[kids[0]] and not flags[kids[1]]
    with pytest.raises(DomainError):
        classify_good([ens(np.ones(120, int), kids[0])])


def test_dead_heat_counts_as_tie():
    kids = Block(1, (0,), 2).children()
    rng = np.random.default_rng(1)
    a = rng.integers(1, 10, 300)
    b = a.copy()
    b[0] += 1
    report = classify_good([ens(a, kids[0]), ens(b, kids[1])])
    assert report.good_count == 2


def test_mark_ancestral():
    sigma = SigmaDecomposition.zeros(2, 1, 3)
    top = Block(3, (0,), 2, sigma.digest)
    mid = top.children()
    reports = [classify_good([ens(np.full(120, 1), mid[0]), ens(np.full(120, 5), mid[1])])]
    for m, v in zip(mid, (1, 1)):
        reports.append(classify_good([ens(np.full(120, v), c) for c in m.children()]))
    marked = {r.block: r.ancestrally_good for rep in mark_ancestral(reports, sigma) for r in rep.rows}
    assert marked[mid[0]] and not marked[mid[1]]
    assert all(marked[c] for c in mid[0].children())
    assert not any(marked[c] for c in mid[1].children())
    for rep in mark_ancestral(reports, sigma):
        for r in rep.rows:
            assert not r.ancestrally_good or r.good


def test_estimate_T_examples():
    params = ModelParams(1, 0.5, beta=0.0, L=2)
    sigma = SigmaDecomposition.zeros(2, 1, 4)
    box = BoxGeometry(16, 1)
    chain = collect_chain(params, sigma, box, block_of(sigma, 0, 1), 3, 4, 50, 0)
    T = estimate_T(chain)
    assert T[0][0] == chain[0].mean_chi
    assert [t for t, _ in T] == [2.0, 2.0, 2.0, 2.0]
    with pytest.raises(DomainError):
        estimate_T([chain[0], chain[2]])


def test_T_nondecreasing_in_k_on_coupled_samples():
    params = ModelParams(1, 0.5, beta=1.5, L=2)
    sigma = SigmaDecomposition.random(2, 1, 5, 3)
    box = BoxGeometry(32, 1)
    base = block_of(sigma, 16, 1)
    chain = [e for e in collect_chain(params, sigma, box, base, 3, 5, 100, 4)]
    for k in range(1, len(chain) - 1):
        assert np.all(chain[k + 1].cross >= chain[k].cross)
    assert np.all(chain[1].cross >= chain[0].chi)


def test_T1_matches_oracle():
    params = ModelParams(1, 0.5, beta=1.0, L=2)
    sigma = SigmaDecomposition.zeros(2, 1, 2)
    box = BoxGeometry(4, 1)
    reps = 100_000
    chain = collect_chain(params, sigma, box, block_of(sigma, 0, 1), 1, 2, reps, 17)
    inst = TinyInstance.restricted(params, sigma, box, block_of(sigma, 0, 2))
    exact = sum(exact_connection_probability(inst, x, y) for x in range(2) for y in range(4))
    T1, se = estimate_T(chain)[1]
    assert abs(T1 - exact) < 3 * se


def test_tightness_examples():
    rep = tightness_report(ens(np.ones(500, int), B0))
    assert rep.M.value == 2 and rep.passed
    const = tightness_report(ens(np.full(300, 7)))
    assert const.passed
    mean_row = [r for r in const.rows if r.check.startswith("mean_over_M")][0]
    assert mean_row.estimate == pytest.approx(7 / 8)
    lam1 = [r for r in const.rows if r.check == "upper_tail" and r.parameter == 1][0]
    assert lam1.bound == pytest.approx(math.exp(-1 / 9)) and lam1.estimate <= math.exp(-1)


def test_tightness_flags_gross_violation():
    # half the mass far above M and half far below: the lower-tail bound 27 * 0.01 is violated
    values = np.repeat([1, 1000], [150, 150])
    rep = tightness_report(ens(values), epsilons=(0.01,))
    assert not rep.passed
    failed = [r.check for r in rep.rows if not r.passed]
    assert "lower_tail" in failed


def test_two_ghost_examples():
    params = ModelParams(1, 0.5, beta=0.0)
    res = two_ghost_lhs((1.0, 0.25), {(1,): 0.5, (2,): 0.3}, params, 8)
    assert res.lhs == 0 and res.passed
    assert res.rhs == pytest.approx(40000 / (0.25 * 8 ** 1.5))
    zero = two_ghost_lhs((1.0, 0.25), {(1,): 0.0, (-1,): 0.0}, params.with_beta(1.0), 10 ** 6)
    assert zero.lhs == 0
    with pytest.raises(DomainError):
        two_ghost_lhs((1.0, 0.5), {}, params, 8)
    hot = two_ghost_lhs((1.0, 0.25), {(1,): 0.5}, params.with_beta(1.0), 8)
    assert hot.lhs == pytest.approx(math.expm1(1.0) * 0.25)


def test_constrained_tail_fit():
    ns = np.array([1.0, 2.0, 4.0, 8.0])
    assert constrained_tail_fit(ns, 3 * ns ** -0.25, 0.25) == pytest.approx(3.0)
    assert constrained_tail_fit(ns, ns ** -0.5, 0.25) == pytest.approx(1.0)


def test_sibling_collection_shapes_and_csv():
    params = ModelParams(1, 0.5, beta=1.0, L=4)
    sigma = SigmaDecomposition.zeros(4, 1, 3)
    box = BoxGeometry(64, 1)
    got = collect_sibling_ensembles(params, sigma, box, 3, 20, 1)
    assert len(got.by_parent) == 16 + 4 + 1
    assert all(len(v) == 4 and all(e.R == 20 for e in v) for v in got.by_parent.values())
    text = write_csv(classify_good(got.by_parent[Block(3, (0,), 4, sigma.digest)]).csv_rows())
    assert text.splitlines()[0].startswith("parent,block,level,mean_max")
