"""Top-level experiments: locating the critical point, two-point and cluster-size
profiles, power-law fits, the two-ghost run and the hierarchical comparison.
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import stats

from . import _backend
from .errors import BracketError, DomainError, InsufficientSamplesError
from .kernels import ModelParams, SigmaDecomposition, block_of, translate_sigma
from .observables import TwoGhostResult, constrained_tail_fit, two_ghost_lhs
from .sampler import BoxGeometry, EdgeConfiguration, rng_for, sample_hierarchical, sample_plain

log = logging.getLogger(__name__)

MIN_REPLICATES = 200
MIN_FIT_POINTS = 4

SamplerFn = Callable[[int, float, np.random.Generator], EdgeConfiguration]


@dataclass(frozen=True)
class ExperimentPlan:
    """A replicate experiment on a ladder of box sides."""

    params: ModelParams
    sides: tuple[int, ...]
    replicates: int
    seed: int = 0
    radii: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.replicates < MIN_REPLICATES:
            raise DomainError(f"at least {MIN_REPLICATES} replicates per point are required")
        for side in self.sides:
            for r in self.radii_for(side):
                if r > side // 4:
                    raise DomainError(f"radius {r} breaks the margin rule r <= side/4 = {side // 4}")

    def radii_for(self, side: int) -> tuple[int, ...]:
        return tuple(self.radii) if self.radii is not None else dyadic_grid(side // 4)


def dyadic_grid(top: int) -> tuple[int, ...]:
    out, r = [], 1
    while r <= top:
        out.append(r)
        r *= 2
    return tuple(out)


def batch_means(values: np.ndarray, batches: int = 20) -> tuple[np.ndarray, np.ndarray]:
    """Mean and batch-means standard error along axis 0."""
    values = np.asarray(values, dtype=float)
    R = len(values)
    b = max(2, min(batches, R))
    groups = np.array_split(values, b, axis=0)
    means = np.stack([g.mean(axis=0) for g in groups])
    return values.mean(axis=0), means.std(axis=0, ddof=1) / math.sqrt(b)


# ----------------------------------------------------------------------------
# fitting

@dataclass(frozen=True)
class FitResult:
    exponent: float
    stderr: float
    window: tuple[float, ...]
    statistic: float
    prefactor: float

    def as_dict(self) -> dict:
        return {"exponent": self.exponent, "stderr": self.stderr, "window": list(self.window),
                "chi2_per_dof": self.statistic, "prefactor": self.prefactor}


def fit_window(x: Sequence[float], lower: float = 4, limit: float | None = None) -> np.ndarray:
    """Mask keeping ``x >= lower`` and, when the margin ``limit`` is given, dropping the top octave."""
    x = np.asarray(x, dtype=float)
    keep = x >= lower
    if limit is not None:
        keep &= x <= limit / 2
    return keep


def fit_power_law(x: Sequence[float], y: Sequence[float], err: Sequence[float] | None = None, *,
                  lower: float = 4, limit: float | None = None) -> FitResult:
    """Weighted least squares of ``log y`` on ``log x`` inside :func:`fit_window`."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    err = np.zeros_like(y) if err is None else np.asarray(err, dtype=float)
    keep = fit_window(x, lower, limit)
    bad = keep & ~(y > 0)
    if bad.any():
        warnings.warn(f"dropping {int(bad.sum())} nonpositive points from the fit", RuntimeWarning, stacklevel=2)
        keep &= y > 0
    if keep.sum() < MIN_FIT_POINTS:
        raise InsufficientSamplesError(f"only {int(keep.sum())} points in the fit window; need {MIN_FIT_POINTS}")
    lx, ly = np.log(x[keep]), np.log(y[keep])
    sig = err[keep] / y[keep]
    w = np.ones_like(lx) if np.any(sig <= 0) else 1 / sig ** 2
    X = np.stack([np.ones_like(lx), lx], axis=1)
    cov = np.linalg.inv(X.T @ (w[:, None] * X))
    beta = cov @ X.T @ (w * ly)
    resid = ly - X @ beta
    dof = len(lx) - 2
    chi2 = float(np.sum(w * resid ** 2)) / dof
    scale = max(chi2, 1.0) if np.all(sig > 0) else chi2
    se = math.sqrt(cov[1, 1] * scale)
    return FitResult(float(beta[1]), se, tuple(x[keep].tolist()), chi2, float(math.exp(beta[0])))


@dataclass(frozen=True)
class TrendTest:
    tau: float
    p_upward: float

    def significant(self, level: float = 0.01) -> bool:
        return self.p_upward < level


def mann_kendall(y: Sequence[float]) -> TrendTest:
    """One-sided Mann-Kendall test for an upward trend in a sequence."""
    y = np.asarray(y, dtype=float)
    if len(y) < 3:
        raise InsufficientSamplesError("trend test needs at least 3 points")
    res = stats.kendalltau(np.arange(len(y)), y, alternative="greater")
    return TrendTest(float(res.statistic), float(res.pvalue))


# ----------------------------------------------------------------------------
# critical point

@dataclass
class _KmaxCurve:
    """Largest-cluster size as a step function of beta, for every replicate of one side."""

    side: int
    d: int
    step_beta: np.ndarray    # all change points, sorted
    step_incr: np.ndarray    # increments of kmax at those points
    step_rep: np.ndarray     # replicate owning each change point
    replicates: int

    def mean(self, beta: float, weights: np.ndarray | None = None) -> float:
        j = int(np.searchsorted(self.step_beta, beta, side="right"))
        if weights is None:
            return 1.0 + float(self.step_incr[:j].sum()) / self.replicates
        return 1.0 + float(np.dot(self.step_incr[:j], weights[self.step_rep[:j]])) / self.replicates


def _kmax_curve(sampler: SamplerFn, side: int, d: int, beta_max: float, replicates: int, seed: int) -> _KmaxCurve:
    betas, incrs, reps = [], [], []
    V = side ** d
    for r in range(replicates):
        cfg = sampler(side, beta_max, rng_for(seed, r))
        order = np.argsort(cfg.thresholds, kind="stable")
        pos, kmax = _backend.kmax_trajectory(V, cfg.u[order], cfg.v[order])
        t = cfg.thresholds[order]
        betas.append(t[pos[1:] - 1])
        incrs.append(np.diff(kmax))
        reps.append(np.full(len(pos) - 1, r, dtype=np.int64))
    b = np.concatenate(betas)
    o = np.argsort(b, kind="stable")
    return _KmaxCurve(side, d, b[o], np.concatenate(incrs)[o].astype(float), np.concatenate(reps)[o], replicates)


@dataclass(frozen=True)
class BetaCResult:
    beta_c: float
    interval: tuple[float, float]
    stderr: float
    sides: tuple[int, ...]
    exponent_q: float
    pair_crossings: tuple[float, ...]
    curve: tuple[tuple[float, ...], ...] = field(default=(), repr=False)

    def as_dict(self) -> dict:
        return {"beta_c_hat": self.beta_c, "interval": list(self.interval), "stderr": self.stderr,
                "sides": list(self.sides), "q": self.exponent_q, "pair_crossings": list(self.pair_crossings)}


def mean_field_lower_bound(params: ModelParams, side: int) -> float:
    """``1 / sum_z J(z)`` over the box displacements: below this no box cluster grows."""
    from .sampler import displacement_classes

    cls = displacement_classes(side, params.d)
    return 1.0 / (2 * float(params.kernel_values(cls.z).sum()))


def _bisect(f: Callable[[float], float], lo: float, hi: float, rtol: float = 1e-7) -> float:
    flo = f(lo)
    for _ in range(200):
        if hi - lo <= rtol * hi:
            break
        mid = 0.5 * (lo + hi)
        fm = f(mid)
        if (fm > 0) == (flo > 0):
            lo, flo = mid, fm
        else:
            hi = mid
    return 0.5 * (lo + hi)


def estimate_beta_c(params: ModelParams, sides: Sequence[int], replicates: int, seed: int = 0, *,
                    q: float | None = None, beta_lo: float | None = None, beta_hi: float | None = None,
                    sampler: SamplerFn | None = None, max_widen: int = 6, bootstrap: int = 200) -> BetaCResult:
    """Crossing point of ``m(beta, side) = E|K_max| / side^(d q)`` between successive box sides.

    Each replicate is sampled once at the top of the bracket; the coupled
    thresholds give ``|K_max|`` as an exact step function of ``beta``, so
    the ratio ``m(big)/m(small)`` is bisected without extra sampling.  The
    reported value is the crossing of the two largest sides; the standard
    error comes from a bootstrap over replicates.
    """
    sides = tuple(sorted(int(s) for s in sides))
    if len(sides) < 2:
        raise DomainError("at least two box sides are needed")
    if any(b < 4 * a for a, b in zip(sides, sides[1:])):
        raise DomainError("successive sides must differ by a factor of at least 4")
    d = params.d
    q = (d + params.alpha) / (2 * d) if q is None else q
    if sampler is None:
        def sampler(side, beta, rng):
            return sample_plain(params.with_beta(beta), BoxGeometry(side, d), rng)
    lo = mean_field_lower_bound(params, sides[-1]) if beta_lo is None else beta_lo
    hi = 4 * lo if beta_hi is None else beta_hi
    for attempt in range(max_widen + 1):
        curves = [_kmax_curve(sampler, s, d, hi, replicates, seed + 7919 * k) for k, s in enumerate(sides)]

        def ratio(beta, a, b, wa=None, wb=None):
            ma = curves[a].mean(beta, wa) / sides[a] ** (d * q)
            mb = curves[b].mean(beta, wb) / sides[b] ** (d * q)
            return mb / ma - 1.0

        top = len(sides) - 1
        while ratio(lo, top - 1, top) > 0 and lo > 1e-12:
            lo /= 2
        if ratio(hi, top - 1, top) > 0:
            break
        log.info("crossing not bracketed by [%g, %g]; widening", lo, hi)
        if attempt == max_widen:
            raise BracketError(f"no crossing in [{lo}, {hi}] after {max_widen} widenings")
        hi *= 2
    crossings = []
    for a in range(top):
        f = lambda beta, a=a: ratio(beta, a, a + 1)
        if f(lo) <= 0 < f(hi):
            crossings.append(_bisect(f, lo, hi))
        else:
            crossings.append(math.nan)
    beta_c = crossings[-1]
    rng = np.random.default_rng([seed, 1])
    boots = []
    for _ in range(bootstrap):
        wa = rng.multinomial(replicates, np.full(replicates, 1 / replicates)).astype(float)
        wb = rng.multinomial(replicates, np.full(replicates, 1 / replicates)).astype(float)
        f = lambda beta: ratio(beta, top - 1, top, wa, wb)
        if f(lo) <= 0 < f(hi):
            boots.append(_bisect(f, lo, hi, 1e-6))
    se = float(np.std(boots, ddof=1)) if len(boots) > 1 else math.nan
    grid = np.linspace(lo, hi, 41)
    curve = tuple((float(b),) + tuple(curves[k].mean(b) / sides[k] ** (d * q) for k in range(len(sides)))
                  for b in grid)
    return BetaCResult(beta_c, (lo, hi), se, sides, q, tuple(crossings), curve)


# ----------------------------------------------------------------------------
# profiles at fixed beta

@dataclass(frozen=True)
class ProfileTable:
    x: np.ndarray
    value: np.ndarray
    err: np.ndarray
    limit: float

    def rows(self, xname: str, yname: str) -> list[dict]:
        return [{xname: float(a), yname: float(b), "err": float(c)} for a, b, c in zip(self.x, self.value, self.err)]


@dataclass
class CriticalRun:
    """Everything measured from one batch of plain configurations at a single beta."""

    params: ModelParams
    side: int
    replicates: int
    two_point: ProfileTable
    tail: ProfileTable
    ghost_shifts: np.ndarray | None = None
    ghost_ns: tuple[int, ...] = ()
    ghost_freqs: np.ndarray | None = None     # (shifts, ns)
    largest_fraction: float = 0.0

    def two_point_fit(self) -> FitResult:
        return fit_power_law(self.two_point.x, self.two_point.value, self.two_point.err, limit=self.two_point.limit)

    def tail_fit(self) -> FitResult:
        return fit_power_law(self.tail.x, self.tail.value, self.tail.err, limit=self.tail.limit)

    def trend(self) -> TrendTest:
        """Mann-Kendall test on ``S(r) r^(d - alpha)`` across the fit window."""
        keep = fit_window(self.two_point.x, limit=self.two_point.limit)
        r = self.two_point.x[keep]
        return mann_kendall(self.two_point.value[keep] * r ** (self.params.d - self.params.alpha))

    def two_ghost(self, n: int, theta: float = 0.25) -> TwoGhostResult:
        if self.ghost_freqs is None or n not in self.ghost_ns:
            raise DomainError(f"two-ghost frequencies were not measured for n={n}")
        k = self.ghost_ns.index(n)
        A = max(1.0, constrained_tail_fit(self.tail.x, self.tail.value, theta))
        xmax = int(np.abs(self.ghost_shifts).max())
        # the tail is nonincreasing, so its value at the largest grid point <= n bounds P(|K| >= n)
        p_n = float(self.tail.value[np.searchsorted(self.tail.x, n, side="right") - 1])
        rem = far_field_weight(self.params, xmax) * p_n ** 2
        return two_ghost_lhs((A, theta), (self.ghost_shifts, self.ghost_freqs[:, k]), self.params, n, rem)


def far_field_weight(params: ModelParams, xmax: int, cutoff: int = 1_000_000) -> float:
    """Upper bound on ``sum_{||x|| > xmax} (exp(beta J(x)) - 1)`` over the whole lattice, default kernel."""
    if params.kernel is not None:
        raise DomainError("far-field bound is only available for the power-law kernel")
    d, s, b = params.d, params.decay, params.beta * params.c
    k = np.arange(xmax + 1, cutoff + 1, dtype=float)
    shell = (2 * k + 1) ** d - (2 * k - 1) ** d
    head = float(np.sum(shell * np.expm1(b * k ** (-s))))
    # beyond the cutoff: expm1(y) <= y e^y and shell <= 2d (3k)^(d-1)
    tail = math.exp(b * cutoff ** (-s)) * b * 2 * d * 3 ** (d - 1) * cutoff ** (-params.alpha) / params.alpha
    return head + tail


def _origins(box: BoxGeometry, stride: int = 1) -> np.ndarray:
    idx = np.flatnonzero(box.central_mask())
    return idx[::stride]


def critical_run(params: ModelParams, side: int, replicates: int, seed: int = 0, *,
                 radii: Sequence[int] | None = None, ghost_ns: Sequence[int] = (), ghost_xmax: int = 256,
                 ghost_origins: int = 1024, batches: int = 20, configs=None) -> CriticalRun:
    """Two-point profile, size-biased tail and two-ghost frequencies from one set of replicates."""
    d = params.d
    box = BoxGeometry(side, d)
    radii = np.asarray(dyadic_grid(side // 4) if radii is None else radii, dtype=np.int64)
    if radii.max() > side // 4:
        raise DomainError(f"radius {int(radii.max())} breaks the margin rule r <= side/4 = {side // 4}")
    is_origin = box.central_mask()
    n_origin = int(is_origin.sum())
    if n_origin < 32:
        raise DomainError("box too small: fewer than 32 central origins")
    V = box.vertex_count
    ns = np.asarray(dyadic_grid(max(1, V // 16)), dtype=np.int64)
    rmax = int(radii.max())
    vol = (2 * radii + 1.0) ** d
    S = np.zeros((replicates, len(radii)))
    T = np.zeros((replicates, len(ns)))
    giant = 0.0
    shifts = None
    if ghost_ns:
        g = np.indices((2 * ghost_xmax + 1,) * d).reshape(d, -1).T - ghost_xmax
        shifts = g[np.any(g != 0, axis=1)]
        org = _origins(box, max(1, n_origin // ghost_origins))
        gc = np.zeros((len(shifts), len(ghost_ns)))
        gv = np.zeros(len(shifts))
    it = configs if configs is not None else (
        sample_plain(params, box, rng_for(seed, r), seed=seed, stream=r) for r in range(replicates))
    count = 0
    for r, cfg in enumerate(it):
        if r >= replicates:
            break
        count += 1
        labels, sizes = _backend.label_components(V, cfg.u, cfg.v)
        hist = _backend.pair_distance_hist(labels, box.coords, is_origin, rmax)
        S[r] = np.cumsum(hist)[radii] / (n_origin * vol)
        cs = np.sort(sizes[sizes > 0])
        mass = np.concatenate((np.cumsum(cs[::-1])[::-1], [0]))
        T[r] = mass[np.searchsorted(cs, ns, side="left")] / V
        giant += cs[-1] / V
        if ghost_ns:
            c, v = _backend.two_ghost_counts(labels, sizes, box.coords, side, org, shifts, ghost_ns)
            gc += c
            gv += v
    if count < replicates:
        raise InsufficientSamplesError(f"only {count} configurations supplied, {replicates} requested")
    s_mean, s_err = batch_means(S, batches)
    t_mean, t_err = batch_means(T, batches)
    run = CriticalRun(params, side, replicates,
                      ProfileTable(radii.astype(float), s_mean, s_err, side / 4),
                      ProfileTable(ns.astype(float), t_mean, t_err, V / 16),
                      largest_fraction=giant / replicates)
    if ghost_ns:
        run.ghost_shifts = shifts
        run.ghost_ns = tuple(int(n) for n in ghost_ns)
        run.ghost_freqs = gc / np.maximum(gv, 1)[:, None]
    return run


def two_point_profile(params: ModelParams, box: BoxGeometry, radii: Sequence[int], replicates: int,
                      seed: int = 0) -> ProfileTable:
    """``S(r)``: mean fraction of ``origin + [-r, r]^d`` connected to a central origin."""
    if max(radii) > box.side // 4:
        raise DomainError(f"radius {max(radii)} breaks the margin rule r <= side/4 = {box.side // 4}")
    return critical_run(params, box.side, replicates, seed, radii=radii).two_point


@dataclass(frozen=True)
class TailReport:
    table: ProfileTable
    fit: FitResult
    floor: float
    conjectured: float

    @property
    def inverse_delta(self) -> float:
        return -self.fit.exponent

    def as_dict(self) -> dict:
        return {"inverse_delta": self.inverse_delta, "stderr": self.fit.stderr, "window": list(self.fit.window),
                "floor": self.floor, "reference_conjectural": self.conjectured}


def tail_report(run: CriticalRun) -> TailReport:
    p = run.params
    return TailReport(run.tail, run.tail_fit(), (p.d - p.alpha) / (2 * p.d), (p.d - p.alpha) / (p.d + p.alpha))


def cluster_tail_profile(params: ModelParams, box: BoxGeometry, replicates: int, seed: int = 0) -> TailReport:
    """Size-biased ``P(|K| >= n)`` on a dyadic grid up to ``V/16`` and the fitted decay exponent."""
    return tail_report(critical_run(params, box.side, replicates, seed))


def sensitivity(params: ModelParams, side: int, replicates: int, beta_c: BetaCResult | float, width: float,
                seed: int = 0, **kw) -> dict[str, CriticalRun]:
    """Profiles at ``beta_c - width``, ``beta_c`` and ``beta_c + width`` from coupled samples."""
    bc = beta_c.beta_c if isinstance(beta_c, BetaCResult) else float(beta_c)
    top = params.with_beta(bc + width)
    box = BoxGeometry(side, params.d)
    out = {}
    for tag, b in (("minus", bc - width), ("center", bc), ("plus", bc + width)):
        cfgs = (sample_plain(top, box, rng_for(seed, r), seed=seed, stream=r).at(b) for r in range(replicates))
        out[tag] = critical_run(params.with_beta(b), side, replicates, seed, configs=cfgs, **kw)
    return out


# ----------------------------------------------------------------------------
# pure hierarchical model

@dataclass
class HierarchicalRun:
    params: ModelParams
    L: int
    N: int
    beta_c: BetaCResult | None
    table: ProfileTable
    fit: FitResult

    def as_dict(self) -> dict:
        return {"L": self.L, "N": self.N, "beta": self.params.beta,
                "beta_c": None if self.beta_c is None else self.beta_c.as_dict(), "fit": self.fit.as_dict()}


def aligned_sigma(sigma: SigmaDecomposition, N: int) -> SigmaDecomposition:
    """``sigma`` shifted so that its ``N``-block containing the origin becomes ``[0, L^N - 1]^d``."""
    B = block_of(sigma, (0,) * sigma.d, N)
    return translate_sigma(sigma, tuple(-c for c in B.corner))


def hierarchical_sampler(params: ModelParams, sigma: SigmaDecomposition) -> SamplerFn:
    L = sigma.L

    def sample(side, beta, rng):
        n = round(math.log(side, L))
        if L ** n != side:
            raise DomainError(f"hierarchical boxes must have side a power of L, got {side}")
        local = aligned_sigma(sigma, n)
        return sample_hierarchical(params.with_beta(beta), local, BoxGeometry(side, params.d), n, rng)

    return sample


def hierarchical_profile_at(params: ModelParams, sigma: SigmaDecomposition, N: int, replicates: int,
                            seed: int = 0, batches: int = 20) -> ProfileTable:
    """``S_hier(L^n)``: mean fraction of the ``n``-block of a uniform vertex connected to it, ``n = 0..N``."""
    L, d = sigma.L, params.d
    side = L ** N
    box = BoxGeometry(side, d)
    V = box.vertex_count
    local = aligned_sigma(sigma, N)
    block_id = []
    for n in range(N + 1):
        w = L ** n
        ids = np.zeros(V, dtype=np.int64)
        for i in range(d):
            ids = ids * (side // w) + box.coords[:, i] // w
        block_id.append(ids)
    S = np.zeros((replicates, N + 1))
    for r in range(replicates):
        cfg = sample_hierarchical(params, local, box, N, rng_for(seed, r), seed=seed, stream=r)
        labels = _backend.label_components(V, cfg.u, cfg.v)[0]
        for n in range(N + 1):
            counts = np.unique(block_id[n] * V + labels, return_counts=True)[1].astype(float)
            S[r, n] = float(np.dot(counts, counts)) / (V * L ** (n * d))
    mean, err = batch_means(S, batches)
    return ProfileTable(np.asarray([float(L ** n) for n in range(N + 1)]), mean, err, float(side))


def hierarchical_profile(params: ModelParams, sigma: SigmaDecomposition, N: int, replicates: int,
                         seed: int = 0, beta: float | None = None, betac_replicates: int | None = None
                         ) -> HierarchicalRun:
    """Pure hierarchical model on an ``N``-block: locate its critical point, then fit the profile.

    The fit uses levels ``1 .. N-1`` (distances ``L .. L^(N-1)``); the top
    level saturates and the bottom one is the trivial self-connection.
    """
    if sigma.N < N:
        raise DomainError(f"sigma depth {sigma.N} is below N={N}")
    bc = None
    if beta is None:
        sides = [sigma.L ** n for n in range(max(1, N - 2), N + 1)]
        sides = [s for s in sides if s >= 4]
        bc = estimate_beta_c(params, sides, betac_replicates or replicates, seed + 1,
                             sampler=hierarchical_sampler(params, sigma),
                             beta_lo=hierarchical_lower_bound(params, N))
        beta = bc.beta_c
    p = params.with_beta(beta)
    table = hierarchical_profile_at(p, sigma, N, replicates, seed)
    keep = np.arange(N + 1)
    keep = (keep >= 1) & (keep <= N - 1)
    fit = fit_power_law(table.x[keep], table.value[keep], table.err[keep], lower=0)
    return HierarchicalRun(p, sigma.L, N, bc, table, fit)


def hierarchical_lower_bound(params: ModelParams, N: int) -> float:
    """``1 / sum_y H(x, y)`` inside an ``N``-block."""
    L, d = params.L, params.d
    total = sum((L ** (n * d) - L ** ((n - 1) * d)) * params.c * L ** (-params.decay * n) for n in range(1, N + 1))
    return 1.0 / total
