"""Block observables from replicate ensembles.

Covers the typical size of the largest restricted cluster in a block, the
cross-scale products along an ancestor chain, sibling goodness
classification, the tightness checks and the two-ghost left-hand side.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy import stats

from . import _backend
from .errors import DomainError, InsufficientSamplesError
from .kernels import Block, ModelParams, SigmaDecomposition, block_of
from .sampler import BoxGeometry, EdgeConfiguration, rng_for, sample_layered

MIN_REPLICATES_FOR_M = 100
INV_E = math.exp(-1.0)


@dataclass
class BlockEnsemble:
    """Per-replicate statistics of one block, each computed in the block's restricted configuration.

    ``cross`` holds, when the ensemble is part of an ancestor chain, the
    per-replicate product ``sum_C |C ∩ base| |C ∩ block|`` with the chain's
    smallest block.  ``rooted`` holds ``|K(x) ∩ block|`` for a fixed vertex ``x``.
    """

    block: Block
    max_in: np.ndarray
    chi: np.ndarray
    cross: np.ndarray | None = None
    rooted: np.ndarray | None = None
    truncated: bool = False

    def __post_init__(self):
        self.max_in = np.asarray(self.max_in, dtype=np.int64)
        self.chi = np.asarray(self.chi, dtype=float)
        if len(self.chi) != len(self.max_in):
            raise DomainError("statistics arrays must have one entry per replicate")

    @property
    def R(self) -> int:
        return len(self.max_in)

    @property
    def mean_max(self) -> float:
        return float(self.max_in.mean())

    @property
    def se_max(self) -> float:
        return float(self.max_in.std(ddof=1) / math.sqrt(self.R)) if self.R > 1 else math.inf

    @property
    def mean_chi(self) -> float:
        return float(self.chi.mean())

    @property
    def se_chi(self) -> float:
        return float(self.chi.std(ddof=1) / math.sqrt(self.R)) if self.R > 1 else math.inf

    def tail(self, m: float) -> float:
        """Empirical ``P(|K_max ∩ B| >= m)``."""
        return float(np.count_nonzero(self.max_in >= m)) / self.R


def clopper_pearson(k: int, n: int, confidence: float = 0.95) -> tuple[float, float]:
    a = 1 - confidence
    lo = 0.0 if k == 0 else float(stats.beta.ppf(a / 2, k, n - k + 1))
    hi = 1.0 if k == n else float(stats.beta.ppf(1 - a / 2, k + 1, n - k))
    return lo, hi


def one_sided_lower(k: int, n: int, confidence: float) -> float:
    """Exact binomial lower confidence bound for the success probability."""
    return 0.0 if k == 0 else float(stats.beta.ppf(1 - confidence, k, n - k + 1))


def one_sided_upper(k: int, n: int, confidence: float) -> float:
    return 1.0 if k == n else float(stats.beta.ppf(confidence, k + 1, n - k))


@dataclass(frozen=True)
class MEstimate:
    value: int
    lower: int
    upper: int
    tail_at_value: float
    R: int


def estimate_M(ensemble: BlockEnsemble, confidence: float = 0.95) -> MEstimate:
    """Smallest ``m`` with empirical tail at most ``1/e``, with a binomial band.

    ``lower``/``upper`` are the crossing points of the lower/upper
    Clopper-Pearson limits of the tail.  All three are at least 2.
    """
    R = ensemble.R
    if R < MIN_REPLICATES_FOR_M:
        raise InsufficientSamplesError(f"estimate_M needs at least {MIN_REPLICATES_FOR_M} replicates, got {R}")
    vals = np.sort(ensemble.max_in)
    top = int(vals[-1]) + 1

    def crossing(tail_fn) -> int:
        for m in range(1, top + 1):
            if tail_fn(m) <= INV_E:
                return max(m, 2)
        return max(top, 2)

    def count(m):
        return R - int(np.searchsorted(vals, m, side="left"))

    value = crossing(lambda m: count(m) / R)
    lower = crossing(lambda m: clopper_pearson(count(m), R, confidence)[0])
    upper = crossing(lambda m: clopper_pearson(count(m), R, confidence)[1])
    return MEstimate(value, min(lower, value), max(upper, value), count(value) / R, R)


# ----------------------------------------------------------------------------
# goodness

@dataclass(frozen=True)
class GoodnessRow:
    block: Block
    mean_max: float
    se_max: float
    chi: float
    se_chi: float
    dominated_in_max: int     # siblings whose mean max is (statistically) >= this one
    dominated_in_chi: int     # siblings whose susceptibility is (statistically) >= this one
    good: bool
    ancestrally_good: bool | None = None


@dataclass
class GoodnessReport:
    parent: Block
    rows: list[GoodnessRow]
    required: int

    @property
    def good_count(self) -> int:
        return sum(r.good for r in self.rows)

    def flags(self) -> dict[Block, bool]:
        return {r.block: r.good for r in self.rows}

    def csv_rows(self) -> list[dict]:
        return [{"parent": self.parent.tag, "block": r.block.tag, "level": r.block.level,
                 "mean_max": r.mean_max, "se_max": r.se_max, "chi": r.chi, "se_chi": r.se_chi,
                 "siblings_ge_max": r.dominated_in_max, "siblings_ge_chi": r.dominated_in_chi,
                 "required_ge_max": self.required, "good": int(r.good),
                 "ancestrally_good": "" if r.ancestrally_good is None else int(r.ancestrally_good)}
                for r in self.rows]


def common_parent(blocks: Sequence[Block]) -> Block:
    """The parent block of a complete sibling set, or :class:`DomainError`."""
    if not blocks:
        raise DomainError("empty sibling set")
    level, L, d = blocks[0].level, blocks[0].L, blocks[0].d
    if any(b.level != level or b.L != L or b.d != d for b in blocks):
        raise DomainError("siblings must share level, L and dimension")
    corner = tuple(min(b.corner[i] for b in blocks) for i in range(d))
    parent = Block(level + 1, corner, L, blocks[0].sigma_digest)
    if sorted(c.corner for c in parent.children()) != sorted(b.corner for b in blocks):
        raise DomainError("sibling set is not exactly the children of one parent")
    return parent


def _weakly_geq(a: float, b: float, se_a: float, se_b: float) -> bool:
    """``a >= b``, counting dead heats within two pooled standard errors as satisfied."""
    pooled = math.sqrt(se_a ** 2 + se_b ** 2) if math.isfinite(se_a) and math.isfinite(se_b) else 0.0
    return a >= b or abs(a - b) < 2 * pooled


def classify_good(siblings: Sequence[BlockEnsemble]) -> GoodnessReport:
    """Goodness of each of ``L^d`` sibling blocks from their estimated statistics."""
    parent = common_parent([s.block for s in siblings])
    if len({s.R for s in siblings}) != 1:
        raise DomainError("siblings must have the same replicate count")
    need = (parent.L ** parent.d) // 2 - 1
    rows = []
    for i, s in enumerate(siblings):
        first = sum(1 for j, o in enumerate(siblings)
                    if j != i and _weakly_geq(o.mean_max, s.mean_max, o.se_max, s.se_max))
        second = sum(1 for j, o in enumerate(siblings)
                     if j != i and _weakly_geq(o.mean_chi, s.mean_chi, o.se_chi, s.se_chi))
        rows.append(GoodnessRow(s.block, s.mean_max, s.se_max, s.mean_chi, s.se_chi, first, second,
                                first >= need and second >= 1))
    return GoodnessReport(parent, rows, need)


def mark_ancestral(reports: Iterable[GoodnessReport], sigma: SigmaDecomposition) -> list[GoodnessReport]:
    """Fill ``ancestrally_good``: good, and every classified ancestor good.

    Ancestors above the highest classified level count as good, so blocks at
    the top classified level are ancestrally good iff they are good.
    """
    reports = list(reports)
    good = {(r.block.level, r.block.corner): r.good for rep in reports for r in rep.rows}
    top = max((lvl for lvl, _ in good), default=0)
    out = []
    for rep in reports:
        rows = []
        for r in rep.rows:
            ok = r.good
            for m in range(r.block.level + 1, top + 1):
                if not ok:
                    break
                anc = block_of(sigma, r.block.corner, m)
                ok = good.get((m, anc.corner), True)
            rows.append(GoodnessRow(**{**r.__dict__, "ancestrally_good": ok}))
        out.append(GoodnessReport(rep.parent, rows, rep.required))
    return out


# ----------------------------------------------------------------------------
# chain products

def estimate_T(chain: Sequence[BlockEnsemble]) -> list[tuple[float, float]]:
    """``(T_k, stderr)`` for ``k = 0 .. len(chain)-1`` along ``chain[0] ⊂ chain[1] ⊂ ...``."""
    if not chain:
        raise DomainError("empty chain")
    base = chain[0].block
    for k in range(1, len(chain)):
        a, b = chain[k - 1].block, chain[k].block
        if b.level != a.level + 1 or not b.contains_block(a):
            raise DomainError(f"broken chain between {a.tag} and {b.tag}")
    out = [(chain[0].mean_chi, chain[0].se_chi)]
    for ens in chain[1:]:
        if ens.cross is None:
            raise DomainError(f"{ens.block.tag} carries no cross products with {base.tag}")
        x = np.asarray(ens.cross, dtype=float)
        out.append((float(x.mean()), float(x.std(ddof=1) / math.sqrt(len(x))) if len(x) > 1 else math.inf))
    return out


# ----------------------------------------------------------------------------
# tightness

@dataclass(frozen=True)
class TightnessRow:
    """One inequality check.  ``slack`` is positive when the check passes."""

    check: str
    parameter: float
    estimate: float
    bound: float
    confidence_limit: float
    slack: float

    @property
    def passed(self) -> bool:
        return self.slack >= 0


@dataclass
class TightnessReport:
    block: Block
    M: MEstimate
    rows: list[TightnessRow]
    rooted: list[TightnessRow] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.rows)

    def csv_rows(self) -> list[dict]:
        return [{"block": self.block.tag, "level": self.block.level, "M": self.M.value, "check": r.check,
                 "parameter": r.parameter, "estimate": r.estimate, "bound": r.bound,
                 "confidence_limit": r.confidence_limit, "slack": r.slack, "passed": int(r.passed),
                 "gated": int(r not in self.rooted)}
                for r in self.rows + self.rooted]


def tightness_report(ensemble: BlockEnsemble, lambdas: Sequence[float] = (1, 2, 3, 5),
                     epsilons: Sequence[float] = (0.1, 0.25), confidence: float = 0.999,
                     M: MEstimate | None = None) -> TightnessReport:
    """Check the tightness inequalities against one-sided confidence limits.

    A row fails only when the data show a violation at the given confidence:
    the lower limit of a probability exceeds its bound, or the confidence
    interval of the mean lies outside ``[M/(2e), 10 M]``.
    """
    M = M or estimate_M(ensemble)
    R = ensemble.R
    rows = []
    for lam in lambdas:
        k = int(np.count_nonzero(ensemble.max_in >= lam * M.value))
        lo = one_sided_lower(k, R, confidence)
        bound = math.exp(-lam / 9)
        rows.append(TightnessRow("upper_tail", lam, k / R, bound, lo, bound - lo))
    for eps in epsilons:
        k = int(np.count_nonzero(ensemble.max_in < eps * M.value))
        lo = one_sided_lower(k, R, confidence)
        bound = 27 * eps
        rows.append(TightnessRow("lower_tail", eps, k / R, bound, lo, bound - lo))
    z = float(stats.norm.ppf(confidence))
    ratio = ensemble.mean_max / M.value
    se = ensemble.se_max / M.value if math.isfinite(ensemble.se_max) else 0.0
    lo_b, hi_b = 1 / (2 * math.e), 10.0
    if ratio < lo_b:
        rows.append(TightnessRow("mean_over_M_low", 1.0, ratio, lo_b, ratio + z * se, ratio + z * se - lo_b))
    else:
        rows.append(TightnessRow("mean_over_M_high" if ratio > hi_b else "mean_over_M", 1.0, ratio, hi_b,
                                 ratio - z * se, min(hi_b - (ratio - z * se), ratio + z * se - lo_b)))
    rooted = []
    if ensemble.rooted is not None and len(ensemble.rooted):
        base = int(np.count_nonzero(ensemble.rooted >= M.value))
        for lam in lambdas:
            k = int(np.count_nonzero(ensemble.rooted >= lam * M.value))
            lo = one_sided_lower(k, R, confidence)
            bound = min(1.0, one_sided_upper(base, R, confidence) * math.exp(1 - lam / 9))
            rooted.append(TightnessRow("rooted_tail", lam, k / R, bound, lo, bound - lo))
    return TightnessReport(ensemble.block, M, rows, rooted)


# ----------------------------------------------------------------------------
# two-ghost bound

@dataclass(frozen=True)
class TwoGhostResult:
    n: int
    lhs: float
    rhs: float
    A: float
    theta: float
    remainder: float = 0.0

    @property
    def ratio(self) -> float:
        return self.lhs / self.rhs

    @property
    def passed(self) -> bool:
        return self.lhs <= self.rhs


def constrained_tail_fit(ns: Sequence[float], tail: Sequence[float], theta: float) -> float:
    """Smallest ``A`` with ``tail(m) <= A m^(-theta)`` at every measured ``m``."""
    ns = np.asarray(ns, dtype=float)
    tail = np.asarray(tail, dtype=float)
    if len(ns) == 0:
        raise DomainError("no tail points to fit")
    return float(np.max(tail * ns ** theta))


def two_ghost_lhs(tail_fit: tuple[float, float], per_x_freqs: Mapping | tuple[np.ndarray, np.ndarray],
                  params: ModelParams, n: int, remainder: float = 0.0) -> TwoGhostResult:
    """Both sides of the two-ghost inequality at size ``n``.

    ``per_x_freqs`` maps displacements ``x != 0`` to estimated probabilities
    that the origin and ``x`` lie in distinct clusters of size at least ``n``
    (either a dict or a ``(displacements, freqs)`` pair).  ``remainder`` is
    added to the left side and should bound the displacements left out.
    """
    A, theta = tail_fit
    if not theta < 0.5:
        raise DomainError(f"theta must be below 1/2, got {theta}")
    if isinstance(per_x_freqs, Mapping):
        xs = np.asarray([np.atleast_1d(x) for x in per_x_freqs.keys()], dtype=np.int64).reshape(-1, params.d)
        fs = np.asarray(list(per_x_freqs.values()), dtype=float)
    else:
        xs = np.asarray(per_x_freqs[0], dtype=np.int64).reshape(-1, params.d)
        fs = np.asarray(per_x_freqs[1], dtype=float)
    lhs = 0.0
    if len(xs) and params.beta > 0:
        weights = np.expm1(params.beta * params.kernel_values(xs))
        lhs = float(np.dot(weights, fs ** 2))
    rhs = 40000 * A ** 2 / ((1 - 2 * theta) ** 2 * n ** (1 + 2 * theta))
    return TwoGhostResult(int(n), lhs + remainder, rhs, float(A), float(theta), float(remainder))


# ----------------------------------------------------------------------------
# collection from the layered sampler

@dataclass(frozen=True)
class _ParentGeometry:
    parent: Block
    children: tuple[Block, ...]
    points: np.ndarray          # vertex indices of the parent, sorted
    child_of_point: np.ndarray  # child slot of each point
    chain: tuple[tuple[int, tuple[int, ...]], ...]   # (level, corner) of the parent and its ancestors
    rooted_vertex: np.ndarray   # one fixed vertex per child (its lowest-index point)


def _parent_geometry(sigma: SigmaDecomposition, box: BoxGeometry, parent: Block, max_level: int) -> _ParentGeometry:
    children = tuple(Block(c.level, c.corner, c.L, sigma.digest) for c in parent.children())
    pts = box.indices_of(parent)
    coords = box.coords[pts]
    w = sigma.L ** (parent.level - 1)
    slot = np.zeros(len(pts), dtype=np.int64)
    for i in range(box.d):
        slot = slot * sigma.L + (coords[:, i] - parent.corner[i]) // w
    chain = tuple((m, block_of(sigma, parent.corner, m).corner) for m in range(parent.level, max_level + 1))
    rooted = np.asarray([pts[slot == k].min() for k in range(len(children))], dtype=np.int64)
    return _ParentGeometry(parent, children, pts, slot, chain, rooted)


def inside_blocks(sigma: SigmaDecomposition, box: BoxGeometry, level: int) -> list[Block]:
    """Level-``level`` blocks of ``sigma`` contained in the box, in corner order."""
    s = np.asarray(sigma.anchor(level))
    w = sigma.L ** level
    axes = []
    for i in range(box.d):
        first = (w - 1 - s[i]) // w
        last = (box.side - w - s[i]) // w
        axes.append(s[i] + w * np.arange(first, last + 1, dtype=np.int64))
    if any(len(a) == 0 for a in axes):
        return []
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, box.d)
    return [Block(level, tuple(int(c) for c in row), sigma.L, sigma.digest) for row in grid]


def _per_child_stats(labels: np.ndarray, geo: _ParentGeometry, V: int) -> tuple[np.ndarray, np.ndarray]:
    k = len(geo.children)
    key = geo.child_of_point * V + labels[geo.points]
    uniq, counts = np.unique(key, return_counts=True)
    child = uniq // V
    mx = np.zeros(k, dtype=np.int64)
    np.maximum.at(mx, child, counts)
    chi = np.bincount(child, weights=counts.astype(float) ** 2, minlength=k)
    return mx, chi


def _eta_labels(config: EdgeConfiguration, chain) -> np.ndarray:
    ids = [config._block_ids.get(key) for key in chain]
    ids = [i for i in ids if i is not None]
    if ids:
        keep = ~np.isin(config.layer, ids)
        u, v = config.u[keep], config.v[keep]
    else:
        u, v = config.u, config.v
    return _backend.label_components(config.box.vertex_count, u, v)[0]


@dataclass
class SiblingEnsembles:
    """Ensembles for the children of every parent block inside the box, grouped by parent."""

    by_parent: dict[Block, list[BlockEnsemble]]
    truncated: bool
    replicates: int

    def levels(self) -> list[int]:
        return sorted({p.level - 1 for p in self.by_parent})

    def at_level(self, level: int) -> list[BlockEnsemble]:
        return [e for p, es in self.by_parent.items() if p.level == level + 1 for e in es]


def collect_sibling_ensembles(params: ModelParams, sigma: SigmaDecomposition, box: BoxGeometry,
                              max_level: int | None, replicates: int, seed: int,
                              parent_levels: Sequence[int] | None = None,
                              configs: Iterable[EdgeConfiguration] | None = None) -> SiblingEnsembles:
    """Sample ``replicates`` layered configurations and record the statistics of every child
    of every parent block that lies inside the box.

    For each parent, all children share one restricted configuration: the
    layers of the parent and of its ancestors are removed.
    """
    max_level = sigma.N if max_level is None else max_level
    levels = list(range(1, max_level + 1)) if parent_levels is None else list(parent_levels)
    geos = [_parent_geometry(sigma, box, P, max_level) for m in levels for P in inside_blocks(sigma, box, m)]
    V = box.vertex_count
    mx = {g.parent: np.zeros((replicates, len(g.children)), dtype=np.int64) for g in geos}
    chi = {g.parent: np.zeros((replicates, len(g.children))) for g in geos}
    rooted = {g.parent: np.zeros((replicates, len(g.children)), dtype=np.int64) for g in geos}
    truncated = False
    if configs is None:
        configs = (sample_layered(params, sigma, box, max_level, rng_for(seed, s), seed=seed, stream=s)
                   for s in range(replicates))
    count = 0
    for r, config in enumerate(configs):
        if r >= replicates:
            break
        count += 1
        truncated = truncated or config.truncated
        for g in geos:
            if g.parent.level == 1:
                # children are singletons: every statistic is 1
                mx[g.parent][r] = 1
                chi[g.parent][r] = 1
                rooted[g.parent][r] = 1
                continue
            labels = _eta_labels(config, g.chain)
            a, b = _per_child_stats(labels, g, V)
            mx[g.parent][r] = a
            chi[g.parent][r] = b
            for k, x in enumerate(g.rooted_vertex):
                pts = g.points[g.child_of_point == k]
                rooted[g.parent][r, k] = int(np.count_nonzero(labels[pts] == labels[x]))
    if count < replicates:
        raise InsufficientSamplesError(f"only {count} configurations supplied, {replicates} requested")
    out = {}
    for g in geos:
        out[g.parent] = [BlockEnsemble(c, mx[g.parent][:, k], chi[g.parent][:, k], rooted=rooted[g.parent][:, k],
                                       truncated=False)
                         for k, c in enumerate(g.children)]
    return SiblingEnsembles(out, truncated, replicates)


def collect_chain(params: ModelParams, sigma: SigmaDecomposition, box: BoxGeometry, base: Block, depth: int,
                  max_level: int | None, replicates: int, seed: int) -> list[BlockEnsemble]:
    """Ensembles along ``base = B_n ⊂ B_{n+1} ⊂ ... ⊂ B_{n+depth}``.

    Entry ``k`` is computed in the restricted configuration of ``B_{n+k}``
    and records the cross product with ``B_n`` used by :func:`estimate_T`.
    """
    max_level = sigma.N if max_level is None else max_level
    if base.level + depth > max_level:
        raise DomainError("chain exceeds the sampled levels")
    blocks = [block_of(sigma, base.corner, base.level + k) for k in range(depth + 1)]
    for B in blocks:
        lo, hi = box.clip(B)
        if np.any(lo != np.asarray(B.corner)) or np.any(hi != np.asarray(B.corner) + B.side - 1):
            raise DomainError(f"{B.tag} is not inside the box")
    chains = [tuple((m, block_of(sigma, B.corner, m).corner) for m in range(B.level + 1, max_level + 1))
              for B in blocks]
    idx = [box.indices_of(B) for B in blocks]
    V = box.vertex_count
    mx = np.zeros((replicates, len(blocks)), dtype=np.int64)
    ch = np.zeros((replicates, len(blocks)))
    cr = np.zeros((replicates, len(blocks)))
    for r in range(replicates):
        config = sample_layered(params, sigma, box, max_level, rng_for(seed, r), seed=seed, stream=r)
        for k in range(len(blocks)):
            labels = _eta_labels(config, chains[k])
            big = np.bincount(labels[idx[k]], minlength=V)
            small = np.bincount(labels[idx[0]], minlength=V)
            mx[r, k] = big.max()
            ch[r, k] = float(np.dot(big, big))
            cr[r, k] = float(np.dot(small, big))
    return [BlockEnsemble(B, mx[:, k], ch[:, k], cross=cr[:, k]) for k, B in enumerate(blocks)]


def write_csv(rows: Sequence[dict], fh=None) -> str:
    buf = io.StringIO()
    if rows:
        w = csv.DictWriter(buf, fieldnames=list(rows[0].keys()), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    text = buf.getvalue()
    if fh is not None:
        fh.write(text)
    return text
