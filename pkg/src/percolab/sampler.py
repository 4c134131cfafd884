"""Sublinear samplers for long-range percolation on a finite box.

Edges are grouped into classes of equal open probability (one class per
displacement for the translation-invariant kernel, one per block for the
hierarchical layers).  Each class gets a binomial edge count and a uniform
placement of that many distinct pairs, so the expected work is proportional
to the number of open edges plus the number of classes.

Every sampled edge also carries an activation threshold: the edge is open
at inverse temperature ``b`` iff its threshold is ``<= b``.  Thresholds are
drawn from the exact conditional law, so :meth:`EdgeConfiguration.at`
produces the monotone coupling of configurations at all ``b`` below the
sampled one.
"""
from __future__ import annotations

import io
import logging
from dataclasses import dataclass, field
from functools import cached_property, lru_cache
from typing import Iterable

import numpy as np

from .errors import DepthError, DomainError, KernelContractError, MismatchError
from .kernels import Block, ModelParams, SigmaDecomposition, block_of, h_sigma_array, hier_weight, is_block_of

log = logging.getLogger(__name__)

PLAIN = -1
REMAINDER = 0

# classes with open probability above this use per-pair Bernoulli draws
DENSE_P = 0.5
# warn when the per-pair fallback has to visit more pairs than this
DENSE_WARN_PAIRS = 100_000


def rng_for(seed: int, stream: int = 0) -> np.random.Generator:
    """Independent, reproducible generator for replicate ``stream`` of run ``seed``."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=(int(stream),))))


@dataclass(frozen=True)
class BoxGeometry:
    """The box ``[0, side-1]^d`` with free boundary and row-major vertex indexing."""

    side: int
    d: int = 1

    def __post_init__(self):
        if self.side < 1 or self.d < 1:
            raise DomainError("box side and dimension must be positive")

    @property
    def vertex_count(self) -> int:
        return self.side ** self.d

    @cached_property
    def strides(self) -> np.ndarray:
        return self.side ** np.arange(self.d - 1, -1, -1, dtype=np.int64)

    @cached_property
    def coords(self) -> np.ndarray:
        c = np.indices((self.side,) * self.d, dtype=np.int64).reshape(self.d, -1).T
        c.setflags(write=False)
        return c

    def index(self, x) -> int:
        x = (int(x),) if np.isscalar(x) else tuple(int(v) for v in x)
        if len(x) != self.d or any(not 0 <= v < self.side for v in x):
            raise DomainError(f"{x} is outside the box of side {self.side}")
        return int(np.dot(x, self.strides))

    def indices(self, X: np.ndarray) -> np.ndarray:
        return np.asarray(X, dtype=np.int64).reshape(-1, self.d) @ self.strides

    def point(self, i: int) -> tuple[int, ...]:
        return tuple(int(v) for v in self.coords[i])

    def clip(self, B: Block) -> tuple[np.ndarray, np.ndarray]:
        """Per-coordinate inclusive bounds of ``B`` intersected with the box (may be empty)."""
        lo = np.maximum(np.asarray(B.corner), 0)
        hi = np.minimum(np.asarray(B.corner) + B.side - 1, self.side - 1)
        return lo, hi

    def indices_of(self, B: Block) -> np.ndarray:
        """Sorted vertex indices of ``B`` intersected with the box."""
        lo, hi = self.clip(B)
        if np.any(hi < lo):
            return np.zeros(0, dtype=np.int64)
        axes = [np.arange(a, b + 1, dtype=np.int64) for a, b in zip(lo, hi)]
        grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, self.d)
        return grid @ self.strides

    def truncates(self, B: Block) -> bool:
        lo, hi = self.clip(B)
        return bool(np.any(hi - lo + 1 != B.side))

    def central_mask(self) -> np.ndarray:
        """Vertices in the middle half ``[side/4, 3 side/4)^d``."""
        q = self.side // 4
        return np.all((self.coords >= q) & (self.coords < self.side - q), axis=1)

    def as_dict(self) -> dict:
        return {"side": self.side, "d": self.d}


@dataclass(frozen=True)
class EdgeConfiguration:
    """Open edges of one sample, tagged by layer.

    ``layer`` is :data:`PLAIN`, :data:`REMAINDER`, or ``k >= 1`` meaning the
    block ``blocks[k-1]``.  ``u < v`` for every edge.
    """

    box: BoxGeometry
    u: np.ndarray
    v: np.ndarray
    layer: np.ndarray
    thresholds: np.ndarray
    beta: float
    blocks: tuple[Block, ...] = ()
    sigma: SigmaDecomposition | None = None
    max_level: int = 0
    truncated: bool = False
    seed: int | None = None
    stream: int | None = None
    _block_ids: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        for arr in (self.u, self.v, self.layer, self.thresholds):
            arr.setflags(write=False)
        if not self._block_ids:
            self._block_ids.update({(b.level, b.corner): k + 1 for k, b in enumerate(self.blocks)})

    @property
    def num_edges(self) -> int:
        return len(self.u)

    @property
    def edges(self) -> tuple[np.ndarray, np.ndarray]:
        return self.u, self.v

    def _subset(self, mask: np.ndarray, beta: float | None = None) -> "EdgeConfiguration":
        return EdgeConfiguration(self.box, self.u[mask], self.v[mask], self.layer[mask], self.thresholds[mask],
                                 self.beta if beta is None else beta, self.blocks, self.sigma, self.max_level,
                                 self.truncated, self.seed, self.stream, self._block_ids)

    def at(self, beta: float) -> "EdgeConfiguration":
        """The coupled configuration at a smaller inverse temperature."""
        if beta > self.beta * (1 + 1e-12):
            raise DomainError(f"cannot raise beta from {self.beta} to {beta} on a coupled sample")
        return self._subset(self.thresholds <= beta, beta)

    def layer_id(self, B: Block) -> int | None:
        return self._block_ids.get((B.level, B.corner))

    def tag_of(self, layer_id: int) -> str:
        if layer_id == PLAIN:
            return "P"
        if layer_id == REMAINDER:
            return "R"
        return self.blocks[layer_id - 1].tag

    @property
    def layers(self) -> dict[str, list[tuple[int, int]]]:
        out: dict[str, list[tuple[int, int]]] = {}
        for lid in np.unique(self.layer):
            m = self.layer == lid
            out[self.tag_of(int(lid))] = list(zip(self.u[m].tolist(), self.v[m].tolist()))
        return out

    def dump(self, fh=None) -> str:
        """Line-oriented text: ``#`` header lines, then one ``layer_tag u v`` per edge."""
        buf = io.StringIO()
        buf.write(f"# side={self.box.side} d={self.box.d} beta={self.beta!r} seed={self.seed} stream={self.stream}\n")
        if self.sigma is not None:
            buf.write(f"# sigma={self.sigma.digest} L={self.sigma.L} max_level={self.max_level} truncated={self.truncated}\n")
        order = np.lexsort((self.v, self.u, self.layer))
        for i in order:
            buf.write(f"{self.tag_of(int(self.layer[i]))} {int(self.u[i])} {int(self.v[i])}\n")
        text = buf.getvalue()
        if fh is not None:
            fh.write(text)
        return text


def parse_dump(text: str) -> tuple[dict, list[tuple[str, int, int]]]:
    header: dict = {}
    edges = []
    for line in text.splitlines():
        if line.startswith("#"):
            for tok in line[1:].split():
                k, _, v = tok.partition("=")
                header[k] = v
        elif line.strip():
            tag, a, b = line.split()
            edges.append((tag, int(a), int(b)))
    return header, edges


# ----------------------------------------------------------------------------
# uniform placement of distinct items

def _dedup_redraw(rng, groups: np.ndarray, keys_fn, draw_fn):
    """Draw one item per slot, then redraw slots whose key repeats until all keys are distinct.

    The set of keys produced per group is a uniform random subset, because the
    procedure is invariant under relabelling of the items.
    """
    vals = draw_fn(groups)
    while True:
        key = keys_fn(vals)
        order = np.argsort(key, kind="stable")
        ks = key[order]
        dup = np.zeros(len(key), dtype=bool)
        dup[order[1:]] = ks[1:] == ks[:-1]
        if not dup.any():
            return vals
        fresh = draw_fn(groups[dup])
        for arr, new in zip(vals, fresh):
            arr[dup] = new


def _thresholds(rng, p: np.ndarray, rate: np.ndarray) -> np.ndarray:
    # conditional on being open at beta, U ~ Unif(0, p(beta)) and the edge opens at -log(1-U)/rate
    return -np.log1p(-rng.random(len(p)) * p) / rate


# ----------------------------------------------------------------------------
# translation-invariant kernel: displacement classes

@dataclass(frozen=True)
class _Classes:
    z: np.ndarray        # (K, d) lexicographically positive displacements
    count: np.ndarray    # (K,) number of pairs in the box with this displacement
    extent: np.ndarray   # (K, d) side - |z_i|
    start: np.ndarray    # (K, d) smallest coordinate of the lower endpoint


@lru_cache(maxsize=16)
def displacement_classes(side: int, d: int) -> _Classes:
    grid = np.indices((2 * side - 1,) * d, dtype=np.int64).reshape(d, -1).T - (side - 1)
    nz = grid != 0
    first = np.argmax(nz, axis=1)
    positive = nz.any(axis=1) & (grid[np.arange(len(grid)), first] > 0)
    z = grid[positive]
    extent = side - np.abs(z)
    for arr in (z, extent):
        arr.setflags(write=False)
    start = np.maximum(-z, 0)
    start.setflags(write=False)
    count = np.prod(extent, axis=1)
    count.setflags(write=False)
    return _Classes(z, count, extent, start)


@lru_cache(maxsize=64)
def _class_rates(d: int, alpha: float, c: float, kernel, side: int) -> np.ndarray:
    J = ModelParams(d, alpha, c, 0.0, 2, kernel).kernel_values(displacement_classes(side, d).z)
    J.setflags(write=False)
    return J


def _decode_start(cls: _Classes, k: np.ndarray, j: np.ndarray) -> np.ndarray:
    ext = cls.extent[k]
    d = ext.shape[1]
    pts = np.empty_like(ext)
    rem = j.copy()
    for i in range(d - 1, -1, -1):
        pts[:, i] = rem % ext[:, i]
        rem //= ext[:, i]
    return pts + cls.start[k]


def _sample_invariant(params: ModelParams, box: BoxGeometry, beta: float, rng: np.random.Generator):
    """Open pairs of the J-process at ``beta``; returns ``(u, v, thresholds, J_of_edge)``."""
    cls = displacement_classes(box.side, box.d)
    empty = np.zeros(0, dtype=np.int64)
    if beta == 0 or len(cls.z) == 0:
        return empty, empty.copy(), np.zeros(0), np.zeros(0)
    J = _class_rates(params.d, params.alpha, params.c, params.kernel, box.side)
    p = -np.expm1(-beta * J)
    dense = p > DENSE_P
    dense_pairs = int(cls.count[dense].sum())
    if dense_pairs > DENSE_WARN_PAIRS:
        log.warning("dense regime: %d pairs have open probability above %.2f; sampling them one by one",
                    dense_pairs, DENSE_P)
    sparse_k = np.where(dense, 0, rng.binomial(cls.count, np.where(dense, 0.0, p)))
    groups = np.repeat(np.arange(len(p)), sparse_k)
    big = int(cls.count.max()) + 1

    def draw(g):
        return [np.floor(rng.random(len(g)) * cls.count[g]).astype(np.int64)]

    (j,) = _dedup_redraw(rng, groups, lambda vals: groups * big + vals[0], draw) if len(groups) else [np.zeros(0, np.int64)]
    ks, js = [groups], [j]
    for k in np.flatnonzero(dense):
        hit = np.flatnonzero(rng.random(int(cls.count[k])) < p[k])
        ks.append(np.full(len(hit), k, dtype=np.int64))
        js.append(hit.astype(np.int64))
    k = np.concatenate(ks)
    j = np.concatenate(js)
    a = _decode_start(cls, k, j)
    u = a @ box.strides
    v = (a + cls.z[k]) @ box.strides
    t = _thresholds(rng, p[k], J[k])
    return u, v, t, J[k]


def _pack(box, parts, beta, **kw) -> EdgeConfiguration:
    u = np.concatenate([p[0] for p in parts]) if parts else np.zeros(0, np.int64)
    v = np.concatenate([p[1] for p in parts]) if parts else np.zeros(0, np.int64)
    t = np.concatenate([p[2] for p in parts]) if parts else np.zeros(0)
    lay = np.concatenate([p[3] for p in parts]).astype(np.int32) if parts else np.zeros(0, np.int32)
    return EdgeConfiguration(box, u.astype(np.int64), v.astype(np.int64), lay, t.astype(float), float(beta), **kw)


def sample_plain(params: ModelParams, box: BoxGeometry, rng: np.random.Generator, *,
                 seed: int | None = None, stream: int | None = None) -> EdgeConfiguration:
    """Long-range percolation with kernel J on the box, at ``params.beta``."""
    if box.d != params.d:
        raise MismatchError("box and params disagree on the dimension")
    u, v, t, _ = _sample_invariant(params, box, params.beta, rng)
    return _pack(box, [(u, v, t, np.full(len(u), PLAIN))], params.beta, seed=seed, stream=stream)


# ----------------------------------------------------------------------------
# hierarchical layers

@dataclass
class _LevelPlan:
    """Static geometry of all level-m blocks meeting the box (cached per sigma, box, level)."""
    level: int
    cells: np.ndarray        # (nb, d) per-axis cell index of each block
    digits: np.ndarray       # (L^d, d) child digit vectors
    lo: list[np.ndarray]     # per axis: (cells, L) child interval starts (clipped to the box)
    size: list[np.ndarray]   # per axis: (cells, L) child interval lengths (clipped, >= 0)
    csize: np.ndarray        # (nb, L^d) child sizes inside the box
    n: np.ndarray            # (nb,) block sizes inside the box
    eligible: np.ndarray     # (nb,) pairs split between two children
    first_weight: np.ndarray  # (nb, L^d) cumulative s_a (n - s_a)
    cum_size: np.ndarray     # (nb, L^d) cumulative child sizes
    blocks: tuple[Block, ...]
    truncated: bool
    _dense_pairs: dict = field(default_factory=dict)


@lru_cache(maxsize=256)
def _level_plan(sigma: SigmaDecomposition, box: BoxGeometry, m: int) -> _LevelPlan:
    L, d = sigma.L, box.d
    w, cw = L ** m, L ** (m - 1)
    s = sigma.anchor(m)
    corners, los, sizes = [], [], []
    for i in range(d):
        k = np.arange((0 - s[i]) // w, (box.side - 1 - s[i]) // w + 1, dtype=np.int64)
        C = s[i] + k * w
        child = C[:, None] + np.arange(L, dtype=np.int64)[None, :] * cw
        lo = np.maximum(child, 0)
        hi = np.minimum(child + cw - 1, box.side - 1)
        corners.append(C)
        los.append(lo)
        sizes.append(np.maximum(hi - lo + 1, 0))
    cells = np.indices([len(c) for c in corners], dtype=np.int64).reshape(d, -1).T
    digits = np.indices((L,) * d, dtype=np.int64).reshape(d, -1).T
    csize = np.ones((len(cells), len(digits)), dtype=np.int64)
    for i in range(d):
        csize *= sizes[i][cells[:, i]][:, digits[:, i]]
    n = csize.sum(axis=1)
    eligible = (n * n - (csize * csize).sum(axis=1)) // 2
    keep = eligible > 0
    cells, csize, n, eligible = cells[keep], csize[keep], n[keep], eligible[keep]
    corner_rows = np.stack([corners[i][cells[:, i]] for i in range(d)], axis=1)
    blocks = tuple(Block(m, tuple(int(c) for c in row), L, sigma.digest) for row in corner_rows)
    return _LevelPlan(m, cells, digits, los, sizes, csize, n, eligible,
                      np.cumsum(csize * (n[:, None] - csize), axis=1), np.cumsum(csize, axis=1),
                      blocks, any(box.truncates(B) for B in blocks))


def _split_pairs(plan: _LevelPlan, box: BoxGeometry, b: int) -> tuple[np.ndarray, np.ndarray]:
    """All pairs of block ``b`` whose endpoints lie in different children (dense fallback)."""
    if b not in plan._dense_pairs:
        B = plan.blocks[b]
        idx = box.indices_of(B)
        pts = box.coords[idx]
        child = np.zeros(len(idx), dtype=np.int64)
        for i in range(box.d):
            child = child * B.L + (pts[:, i] - B.corner[i]) // (B.L ** (B.level - 1))
        iu, iv = np.triu_indices(len(idx), 1)
        ok = child[iu] != child[iv]
        plan._dense_pairs[b] = (idx[iu[ok]], idx[iv[ok]])
    return plan._dense_pairs[b]


def _sample_level(params, sigma, box, m, beta, rng):
    """Edges of every level-m block layer; returns ``(u, v, thresholds, plan, block_index_per_edge)``."""
    plan = _level_plan(sigma, box, m)
    d = box.d
    rate = float(hier_weight(params, m))
    p = -np.expm1(-beta * rate)
    if p == 0 or len(plan.blocks) == 0:
        e = np.zeros(0, np.int64)
        return e, e.copy(), np.zeros(0), plan, e.copy()
    cells, digits, csize, n = plan.cells, plan.digits, plan.csize, plan.n

    def coords_in_child(g, a):
        out = np.empty((len(g), d), dtype=np.int64)
        for i in range(d):
            ci, ji = cells[g, i], digits[a, i]
            out[:, i] = plan.lo[i][ci, ji] + np.floor(rng.random(len(g)) * plan.size[i][ci, ji]).astype(np.int64)
        return out

    if p > DENSE_P:
        us, vs, gs = [], [], []
        for b in range(len(plan.blocks)):
            pu, pv = _split_pairs(plan, box, b)
            hit = rng.random(len(pu)) < p
            us.append(pu[hit])
            vs.append(pv[hit])
            gs.append(np.full(int(hit.sum()), b, np.int64))
        u, v, g = np.concatenate(us), np.concatenate(vs), np.concatenate(gs)
    else:
        k = rng.binomial(plan.eligible, p)
        g = np.repeat(np.arange(len(plan.blocks)), k)
        V = box.vertex_count
        child_ids = np.arange(csize.shape[1])[None, :]

        def draw(gg):
            # first endpoint: child a with weight s_a (n - s_a), uniform inside it;
            # second endpoint: uniform over the other children's vertices
            wsum = plan.first_weight[gg]
            a = np.argmax(wsum > (rng.random(len(gg)) * wsum[:, -1])[:, None], axis=1)
            x = coords_in_child(gg, a)
            sa = csize[gg, a]
            other = plan.cum_size[gg] - sa[:, None] * (child_ids >= a[:, None])
            b = np.argmax(other > (rng.random(len(gg)) * (n[gg] - sa))[:, None], axis=1)
            y = coords_in_child(gg, b)
            ix, iy = x @ box.strides, y @ box.strides
            return [np.minimum(ix, iy), np.maximum(ix, iy)]

        if len(g):
            u, v = _dedup_redraw(rng, g, lambda vals: vals[0] * V + vals[1], draw)
        else:
            u = v = np.zeros(0, np.int64)
    t = _thresholds(rng, np.full(len(u), p), np.full(len(u), rate))
    return u, v, t, plan, g


def _block_layers(params, sigma, box, max_level, beta, rng):
    parts, blocks = [], []
    truncated = False
    for m in range(1, max_level + 1):
        u, v, t, plan, g = _sample_level(params, sigma, box, m, beta, rng)
        truncated = truncated or plan.truncated
        used, inv = np.unique(g, return_inverse=True)
        base = len(blocks) + 1
        blocks.extend(plan.blocks[i] for i in used)
        parts.append((u, v, t, base + inv))
    return parts, blocks, truncated


def _check_layered(params, sigma, box, max_level):
    if params.L != sigma.L or params.d != sigma.d or box.d != params.d:
        raise MismatchError("params, sigma and box must agree on d and L")
    if max_level > sigma.N:
        raise DepthError(f"max_level {max_level} exceeds the stored depth N={sigma.N}")
    if max_level < 1:
        raise DomainError("max_level must be >= 1")
    if box.side > sigma.L ** max_level:
        raise DomainError(f"box side {box.side} exceeds L^max_level = {sigma.L ** max_level}")


def sample_layered(params: ModelParams, sigma: SigmaDecomposition, box: BoxGeometry, max_level: int | None,
                   rng: np.random.Generator, *, seed: int | None = None, stream: int | None = None) -> EdgeConfiguration:
    """Remainder layer plus one independent layer per block of level ``1..max_level``.

    Pairs whose smallest common block lies above ``max_level`` (or beyond the
    stored prefix) carry no hierarchical layer and stay in the remainder with
    their full rate J, so the union of all layers is J-percolation exactly.
    """
    max_level = sigma.N if max_level is None else max_level
    _check_layered(params, sigma, box, max_level)
    beta = params.beta
    # remainder by thinning the dominating J-process
    u, v, t_J, J = _sample_invariant(params, box, beta, rng)
    h = h_sigma_array(sigma, box.coords[u], box.coords[v], max_level)
    H = np.where(h >= 1, hier_weight(params, np.maximum(h, 0)), 0.0)
    R = J - H
    if np.any(R < -1e-12 * J):
        raise KernelContractError("remainder kernel is negative: J is below the power-law floor")
    R = np.maximum(R, 0.0)
    pJ = -np.expm1(-beta * J)
    pR = -np.expm1(-beta * R)
    q = pR / pJ if len(pJ) else pJ
    if np.any((q < 0) | (q > 1 + 1e-12)):
        raise KernelContractError("thinning ratio outside [0, 1]")
    keep = rng.random(len(q)) < q
    u, v, R, pR = u[keep], v[keep], R[keep], pR[keep]
    t = _thresholds(rng, pR, R)
    parts = [(u, v, t, np.full(len(u), REMAINDER))]
    more, blocks, truncated = _block_layers(params, sigma, box, max_level, beta, rng)
    return _pack(box, parts + more, beta, blocks=tuple(blocks), sigma=sigma, max_level=max_level,
                 truncated=truncated, seed=seed, stream=stream)


def sample_hierarchical(params: ModelParams, sigma: SigmaDecomposition, box: BoxGeometry, max_level: int | None,
                        rng: np.random.Generator, *, seed: int | None = None,
                        stream: int | None = None) -> EdgeConfiguration:
    """Block layers only: percolation with the pure hierarchical kernel H_sigma."""
    max_level = sigma.N if max_level is None else max_level
    _check_layered(params, sigma, box, max_level)
    parts, blocks, truncated = _block_layers(params, sigma, box, max_level, params.beta, rng)
    return _pack(box, parts, params.beta, blocks=tuple(blocks), sigma=sigma, max_level=max_level,
                 truncated=truncated, seed=seed, stream=stream)


def ancestor_layer_ids(config: EdgeConfiguration, B: Block) -> list[int]:
    if config.sigma is None:
        raise MismatchError("configuration carries no hierarchical layers")
    if (B.sigma_digest and B.sigma_digest != config.sigma.digest) or not is_block_of(config.sigma, B):
        raise MismatchError(f"{B.tag} is not a block of sigma {config.sigma.digest}")
    if B.level > config.max_level:
        raise DepthError(f"block level {B.level} exceeds the sampled max_level {config.max_level}")
    ids = []
    for m in range(B.level + 1, config.max_level + 1):
        lid = config.layer_id(block_of(config.sigma, B.corner, m))
        if lid is not None:
            ids.append(lid)
    return ids


def eta_mask(config: EdgeConfiguration, B: Block) -> np.ndarray:
    ids = ancestor_layer_ids(config, B)
    if not ids:
        return np.ones(config.num_edges, dtype=bool)
    return ~np.isin(config.layer, ids)


def restrict_to_eta(config: EdgeConfiguration, B: Block) -> EdgeConfiguration:
    """Remainder edges plus every block layer except those of strict ancestors of ``B``."""
    return config._subset(eta_mask(config, B))


def edge_set(config: EdgeConfiguration) -> set[tuple[int, int]]:
    return set(zip(config.u.tolist(), config.v.tolist()))


def iter_replicates(sample_fn, seed: int, replicates: Iterable[int] | int):
    """Yield ``(stream, configuration)`` with one generator stream per replicate."""
    streams = range(replicates) if isinstance(replicates, int) else replicates
    for s in streams:
        yield s, sample_fn(rng_for(seed, s), s)
