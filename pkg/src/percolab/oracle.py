"""Exact computations on tiny instances, used as ground truth.

Two independent exact methods are provided:

* brute-force enumeration of all ``2^E`` open/closed patterns (``E <= 24``),
  with pattern probabilities accumulated in log space;
* a partition-state recursion that adds one pair at a time and tracks the
  law of the connectivity partition.  It needs no cap on ``E`` (only on the
  number of vertices) and is used for the exact good-children computation,
  whose boxes have more pairs than enumeration allows.

The two are cross-checked against each other in the test suite.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import stats

from .errors import DomainError, SizeError
from .kernels import (Block, ModelParams, SigmaDecomposition, block_of, is_block_of, kernel_H_sigma, kernel_J,
                      kernel_J_restricted)
from .sampler import BoxGeometry, restrict_to_eta, rng_for, sample_layered, sample_plain

MAX_ENUM_EDGES = 24
MAX_PARTITION_VERTICES = 10
# relative tolerance for treating exact expectations as equal
TIE_RTOL = 1e-12


@dataclass(frozen=True)
class TinyInstance:
    """Independent pairs on a handful of vertices; ``prob[i, j]`` is the open probability."""

    prob: np.ndarray
    name: str = "tiny"
    pairs: tuple[tuple[int, int], ...] = field(init=False)

    def __post_init__(self):
        P = np.asarray(self.prob, dtype=float)
        if P.ndim != 2 or P.shape[0] != P.shape[1]:
            raise DomainError("probability matrix must be square")
        if not np.allclose(P, P.T, rtol=0, atol=0) or np.any(np.diag(P) != 0):
            raise DomainError("probability matrix must be symmetric with zero diagonal")
        if np.any((P < 0) | (P > 1)):
            raise DomainError("probabilities must lie in [0, 1]")
        P.setflags(write=False)
        object.__setattr__(self, "prob", P)
        n = P.shape[0]
        object.__setattr__(self, "pairs", tuple((i, j) for i in range(n) for j in range(i + 1, n) if P[i, j] > 0))

    @property
    def n(self) -> int:
        return self.prob.shape[0]

    @property
    def E(self) -> int:
        return len(self.pairs)

    def pair_probs(self) -> np.ndarray:
        return np.asarray([self.prob[i, j] for i, j in self.pairs])

    @classmethod
    def from_rates(cls, rates: np.ndarray, beta: float, name: str = "tiny") -> "TinyInstance":
        return cls(-np.expm1(-beta * np.asarray(rates, dtype=float)), name)

    @classmethod
    def plain(cls, params: ModelParams, box: BoxGeometry) -> "TinyInstance":
        """J-percolation on a box."""
        return cls.from_rates(_rate_matrix(box, lambda x, y: kernel_J(params, np.subtract(y, x))), params.beta,
                              f"plain(side={box.side},d={box.d},beta={params.beta})")

    @classmethod
    def hierarchical(cls, params: ModelParams, sigma: SigmaDecomposition, box: BoxGeometry) -> "TinyInstance":
        return cls.from_rates(_rate_matrix(box, lambda x, y: kernel_H_sigma(params, sigma, x, y)), params.beta,
                              f"hier(side={box.side},sigma={sigma.digest},beta={params.beta})")

    @classmethod
    def restricted(cls, params: ModelParams, sigma: SigmaDecomposition, box: BoxGeometry, B: Block) -> "TinyInstance":
        """The configuration without the layers of the strict ancestors of ``B``."""
        return cls.from_rates(_rate_matrix(box, lambda x, y: kernel_J_restricted(params, sigma, B, x, y)),
                              params.beta, f"eta({B.tag},side={box.side},beta={params.beta})")


def _rate_matrix(box: BoxGeometry, rate: Callable) -> np.ndarray:
    V = box.vertex_count
    out = np.zeros((V, V))
    for i in range(V):
        for j in range(i + 1, V):
            out[i, j] = out[j, i] = rate(box.point(i), box.point(j))
    return out


# ----------------------------------------------------------------------------
# brute-force enumeration

def _enumerate(inst: TinyInstance, chunk: int = 1 << 18):
    """Yield ``(weights, labels)`` over all patterns: labels are min-index cluster labels, shape ``(C, n)``."""
    E = inst.E
    if E > MAX_ENUM_EDGES:
        raise SizeError(f"{E} pairs exceed the enumeration cap of {MAX_ENUM_EDGES}")
    p = inst.pair_probs()
    certain = p >= 1
    logp = np.where(certain, 0.0, np.log(np.where(certain, 0.5, p)))
    log1mp = np.where(certain, -np.inf, np.log1p(-np.where(certain, 0.5, p)))
    pairs = np.asarray(inst.pairs, dtype=np.int64).reshape(-1, 2)
    total = 1 << E
    for start in range(0, total, chunk):
        idx = np.arange(start, min(total, start + chunk), dtype=np.int64)
        bits = ((idx[:, None] >> np.arange(E, dtype=np.int64)[None, :]) & 1).astype(bool)
        with np.errstate(invalid="ignore"):
            logw = np.where(bits, logp[None, :], log1mp[None, :]).sum(axis=1)
        w = np.exp(logw)
        labels = np.tile(np.arange(inst.n, dtype=np.int64), (len(idx), 1))
        for _ in range(inst.n):
            changed = False
            for e, (i, j) in enumerate(pairs):
                on = bits[:, e]
                m = np.minimum(labels[on, i], labels[on, j])
                if np.any(labels[on, i] != m) or np.any(labels[on, j] != m):
                    changed = True
                labels[on, i] = m
                labels[on, j] = m
            if not changed:
                break
        yield w, labels


def _accumulate(inst: TinyInstance, stat: Callable[[np.ndarray], np.ndarray]) -> float:
    parts = []
    for w, labels in _enumerate(inst):
        parts.append(float(np.dot(w, stat(labels).astype(float))))
    return math.fsum(parts)


def _law(inst: TinyInstance, stat: Callable[[np.ndarray], np.ndarray]) -> dict[int, float]:
    acc: dict[int, list[float]] = {}
    for w, labels in _enumerate(inst):
        vals = stat(labels)
        for v in np.unique(vals):
            acc.setdefault(int(v), []).append(float(w[vals == v].sum()))
    return {k: math.fsum(v) for k, v in sorted(acc.items())}


def exact_connection_probability(inst: TinyInstance, x: int, y: int) -> float:
    if x == y:
        return 1.0
    return _accumulate(inst, lambda lab: lab[:, x] == lab[:, y])


def exact_cluster_law(inst: TinyInstance, x: int) -> dict[int, float]:
    """Law of ``|K(x)|``."""
    return _law(inst, lambda lab: (lab == lab[:, [x]]).sum(axis=1))


def _max_in(lab: np.ndarray, B: np.ndarray) -> np.ndarray:
    sub = lab[:, B]
    return (sub[:, :, None] == sub[:, None, :]).sum(axis=2).max(axis=1)


def exact_max_cluster_law(inst: TinyInstance, B: Sequence[int]) -> dict[int, float]:
    """Law of ``max_K |K ∩ B|``."""
    B = np.asarray(B, dtype=np.int64)
    if len(B) == 0:
        return {0: 1.0}
    return _law(inst, lambda lab: _max_in(lab, B))


def exact_restricted_susceptibility(inst: TinyInstance, B: Sequence[int]) -> float:
    B = np.asarray(B, dtype=np.int64)
    return _accumulate(inst, lambda lab: (lab[:, B][:, :, None] == lab[:, B][:, None, :]).sum(axis=(1, 2)))


# ----------------------------------------------------------------------------
# partition-state recursion

def partition_law(inst: TinyInstance) -> dict[tuple[int, ...], float]:
    """Exact law of the cluster partition, as min-index label tuples."""
    if inst.n > MAX_PARTITION_VERTICES:
        raise SizeError(f"{inst.n} vertices exceed the partition cap of {MAX_PARTITION_VERTICES}")
    law = {tuple(range(inst.n)): 1.0}
    for (i, j), p in zip(inst.pairs, inst.pair_probs()):
        nxt: dict[tuple[int, ...], float] = {}
        for state, w in law.items():
            a, b = state[i], state[j]
            if a == b:
                nxt[state] = nxt.get(state, 0.0) + w
                continue
            if p < 1:
                nxt[state] = nxt.get(state, 0.0) + w * (1 - p)
            lo, hi = min(a, b), max(a, b)
            merged = tuple(lo if s == hi else s for s in state)
            nxt[merged] = nxt.get(merged, 0.0) + w * p
        law = nxt
    return law


def block_statistics(law: dict[tuple[int, ...], float], B: Sequence[int]) -> tuple[float, float]:
    """Exact ``E max_K |K ∩ B|`` and ``E sum_C |C ∩ B|^2`` from a partition law."""
    mean_max, chi = [], []
    for state, w in law.items():
        counts = np.unique([state[x] for x in B], return_counts=True)[1]
        mean_max.append(w * counts.max())
        chi.append(w * float(np.dot(counts, counts)))
    return math.fsum(mean_max), math.fsum(chi)


@dataclass(frozen=True)
class ExactGoodness:
    parent: Block
    children: tuple[Block, ...]
    mean_max: tuple[float, ...]
    susceptibility: tuple[float, ...]
    good: tuple[bool, ...]

    @property
    def good_count(self) -> int:
        return sum(self.good)


def _geq(a: float, b: float) -> bool:
    return a >= b - TIE_RTOL * max(abs(a), abs(b), 1.0)


def goodness_flags(mean_max: Sequence[float], chi: Sequence[float], L: int, d: int,
                   geq: Callable[[float, float], bool] = _geq) -> tuple[bool, ...]:
    """Flag each sibling good iff enough siblings weakly dominate it in both statistics."""
    k = len(mean_max)
    need = (L ** d) // 2 - 1
    flags = []
    for b in range(k):
        first = sum(1 for o in range(k) if o != b and geq(mean_max[o], mean_max[b]))
        second = sum(1 for o in range(k) if o != b and geq(chi[o], chi[b]))
        flags.append(first >= need and second >= 1)
    return tuple(flags)


def exact_good_children(params: ModelParams, sigma: SigmaDecomposition, parent: Block,
                        box: BoxGeometry | None = None) -> ExactGoodness:
    """Goodness of each child of ``parent`` from exact expectations.

    All children of one parent share the same restricted configuration (the
    layers of the strict ancestors of the parent are removed, plus that of
    the parent itself), so a single partition law serves every child.
    """
    if parent.level < 1:
        raise DomainError("singleton blocks have no children")
    if not is_block_of(sigma, parent):
        raise DomainError(f"{parent.tag} is not a block of the given decomposition")
    box = box or BoxGeometry(parent.side, parent.d)
    lo, hi = box.clip(parent)
    if np.any(lo != np.asarray(parent.corner)) or np.any(hi != np.asarray(parent.corner) + parent.side - 1):
        raise DomainError(f"{parent.tag} is not contained in the box")
    if box.vertex_count > MAX_PARTITION_VERTICES:
        raise SizeError(f"box of {box.vertex_count} vertices exceeds the exact cap")
    children = tuple(Block(c.level, c.corner, c.L, sigma.digest) for c in parent.children())
    inst = TinyInstance.restricted(params, sigma, box, children[0])
    law = partition_law(inst)
    stats_ = [block_statistics(law, box.indices_of(c)) for c in children]
    mean_max = tuple(s[0] for s in stats_)
    chi = tuple(s[1] for s in stats_)
    return ExactGoodness(parent, children, mean_max, chi, goodness_flags(mean_max, chi, sigma.L, sigma.d))


def all_parent_blocks(sigma: SigmaDecomposition, box: BoxGeometry, max_level: int | None = None) -> list[Block]:
    """Non-singleton blocks of ``sigma`` lying entirely inside the box."""
    top = sigma.N if max_level is None else max_level
    out = []
    for m in range(1, top + 1):
        seen = set()
        for i in range(box.vertex_count):
            B = block_of(sigma, box.point(i), m)
            if B.corner in seen:
                continue
            seen.add(B.corner)
            lo, hi = box.clip(B)
            if np.all(lo == np.asarray(B.corner)) and np.all(hi == np.asarray(B.corner) + B.side - 1):
                out.append(B)
    return out


# ----------------------------------------------------------------------------
# sampler verification

@dataclass(frozen=True)
class CheckRow:
    quantity: str
    exact: float
    estimate: float
    stderr: float
    p_value: float

    @property
    def z(self) -> float:
        return 0.0 if self.stderr == 0 else (self.estimate - self.exact) / self.stderr

    @property
    def passed(self) -> bool:
        return self.p_value > 1e-3


@dataclass
class SamplerReport:
    instance: str
    draws: int
    rows: list[CheckRow]

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.rows)

    @property
    def min_p(self) -> float:
        return min(r.p_value for r in self.rows) if self.rows else 1.0


def pattern_chi_square(inst: TinyInstance, patterns: np.ndarray, min_expected: float = 5.0) -> tuple[float, int, float]:
    """Chi-square of observed pattern bitmasks against the exact product law.

    Patterns with expected count below ``min_expected`` are pooled into one bin.
    """
    if inst.E > 20:
        raise SizeError("pattern law too large for a chi-square table")
    draws = len(patterns)
    p = inst.pair_probs()
    idx = np.arange(1 << inst.E, dtype=np.int64)
    bits = ((idx[:, None] >> np.arange(inst.E)[None, :]) & 1).astype(bool)
    law = np.where(bits, p[None, :], 1 - p[None, :]).prod(axis=1)
    observed = np.bincount(patterns, minlength=len(law)).astype(float)
    expected = law * draws
    big = expected >= min_expected
    obs = np.append(observed[big], observed[~big].sum())
    exp = np.append(expected[big], expected[~big].sum())
    if exp[-1] < min_expected:
        obs[-2] += obs[-1] if len(obs) > 1 else 0
        exp[-2] += exp[-1] if len(exp) > 1 else 0
        obs, exp = obs[:-1], exp[:-1]
    keep = exp > 0
    obs, exp = obs[keep], exp[keep]
    if np.any(observed[law == 0] > 0):
        return math.inf, max(len(obs) - 1, 1), 0.0
    if len(obs) < 2:
        return 0.0, 0, 1.0
    chi2 = float(((obs - exp) ** 2 / exp).sum())
    dof = len(obs) - 1
    return chi2, dof, float(stats.chi2.sf(chi2, dof))


def pattern_codes(inst: TinyInstance, configs: Iterable) -> np.ndarray:
    """Bitmask of the distinct open pairs of each configuration (layers merged)."""
    pos = {pair: k for k, pair in enumerate(inst.pairs)}
    out = []
    for c in configs:
        code = 0
        for a, b in set(zip(c.u.tolist(), c.v.tolist())):
            code |= 1 << pos[(a, b)]
        out.append(code)
    return np.asarray(out, dtype=np.int64)


def _connection_rows(inst: TinyInstance, configs: list, tag: str) -> list[CheckRow]:
    from .clusters import label_clusters

    labs = [label_clusters((c.u, c.v), inst.n).labels for c in configs]
    labs = np.asarray(labs)
    rows = []
    for i in range(inst.n):
        for j in range(i + 1, inst.n):
            exact = exact_connection_probability(inst, i, j)
            hits = labs[:, i] == labs[:, j]
            est = float(hits.mean())
            se = math.sqrt(max(exact * (1 - exact), 0.0) / len(configs))
            if se == 0:
                pv = 1.0 if est == exact else 0.0
            else:
                pv = float(2 * stats.norm.sf(abs(est - exact) / se))
            rows.append(CheckRow(f"{tag}:P({i}<->{j})", exact, est, se, pv))
    return rows


def verify_sampler(params: ModelParams, box: BoxGeometry, draws: int, seed: int = 0,
                   sigma: SigmaDecomposition | None = None, block: Block | None = None,
                   max_level: int | None = None) -> SamplerReport:
    """Compare sampler output on a tiny box with the exact law.

    Without ``sigma`` the plain sampler is checked against J-percolation.
    With ``sigma`` the layered sampler is checked: the union of layers
    against J-percolation, and, if ``block`` is given, the restricted
    configuration of that block against its closed-form rates.
    """
    if draws < 10_000:
        raise DomainError("verification needs at least 10^4 draws")
    rows: list[CheckRow] = []
    plain_inst = TinyInstance.plain(params, box)
    if sigma is None:
        configs = [sample_plain(params, box, rng_for(seed, s)) for s in range(draws)]
        name = plain_inst.name
        chi2, dof, pv = pattern_chi_square(plain_inst, pattern_codes(plain_inst, configs))
        rows.append(CheckRow("plain:pattern-chi2", float(dof), chi2, math.sqrt(2 * max(dof, 1)), pv))
        rows += _connection_rows(plain_inst, configs, "plain")
    else:
        configs = [sample_layered(params, sigma, box, max_level, rng_for(seed, s)) for s in range(draws)]
        name = f"layered(side={box.side},sigma={sigma.digest},beta={params.beta})"
        chi2, dof, pv = pattern_chi_square(plain_inst, pattern_codes(plain_inst, configs))
        rows.append(CheckRow("union:pattern-chi2", float(dof), chi2, math.sqrt(2 * max(dof, 1)), pv))
        rows += _connection_rows(plain_inst, configs, "union")
        if block is not None:
            eta_inst = TinyInstance.restricted(params, sigma, box, block)
            etas = [restrict_to_eta(c, block) for c in configs]
            chi2, dof, pv = pattern_chi_square(eta_inst, pattern_codes(eta_inst, etas))
            rows.append(CheckRow(f"eta[{block.tag}]:pattern-chi2", float(dof), chi2, math.sqrt(2 * max(dof, 1)), pv))
            rows += _connection_rows(eta_inst, etas, f"eta[{block.tag}]")
    return SamplerReport(name, draws, rows)


# ----------------------------------------------------------------------------
# golden values

def golden_record(instance: str, quantity: str, exact_value: float) -> dict:
    return {"instance": instance, "quantity": quantity, "exact_value": float(exact_value)}


def write_golden(path: str | Path, records: Sequence[dict]) -> None:
    Path(path).write_text(json.dumps(list(records), indent=2, sort_keys=True) + "\n")


def read_golden(path: str | Path) -> list[dict]:
    data = json.loads(Path(path).read_text())
    for rec in data:
        if set(rec) != {"instance", "quantity", "exact_value"}:
            raise DomainError(f"malformed golden record {rec}")
    return data
