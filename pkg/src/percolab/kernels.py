"""Block geometry and edge kernels of the L-adic hierarchical decomposition.

A decomposition is a finite digit prefix ``sigma_1 .. sigma_N`` (each a
d-vector with entries in ``0..L-1``) together with a unit-place digit
``offset``.  The level-``n`` anchor is

    s^(n) = offset + sum_{m=1}^{n} sigma_m L^m

and the ``n``-blocks are the cubes ``s^(n) + L^n k + [0, L^n - 1]^d``.  For
ordinary decompositions ``offset`` is zero; it is only needed so that
translates ``sigma + x`` by vectors that are not multiples of ``L`` remain
representable.

All functions here are pure and operate on immutable values.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import DepthError, DomainError, KernelContractError, MismatchError

INFINITE = math.inf
"""Sentinel returned by :func:`h_sigma` when no stored level joins two points."""

# relative slack allowed when checking R >= 0 and custom kernels against the power law
_ROUNDING = 1e-12

Point = Sequence[int]


def _as_point(x, d: int | None = None) -> tuple[int, ...]:
    if isinstance(x, (int, np.integer)):
        x = (int(x),)
    p = tuple(int(v) for v in x)
    if d is not None and len(p) != d:
        raise DomainError(f"expected a {d}-dimensional point, got {p}")
    return p


def linf(z: Point) -> int:
    return max(abs(int(v)) for v in z)


@dataclass(frozen=True)
class ModelParams:
    d: int
    alpha: float
    c: float = 1.0
    beta: float = 0.0
    L: int = 2
    kernel: Callable[[np.ndarray], np.ndarray] | None = field(default=None, compare=False, repr=False)
    """Optional translation-invariant kernel ``J(z)`` acting on an ``(m, d)`` array of
    displacements.  It must dominate ``c * ||z||^(-d-alpha)``; this is checked
    whenever kernel values are computed."""

    def __post_init__(self):
        if int(self.d) != self.d or self.d < 1:
            raise DomainError(f"d must be a positive integer, got {self.d}")
        if not 0 < self.alpha < self.d:
            raise DomainError(f"alpha must lie in (0, d={self.d}), got {self.alpha}")
        if not self.c > 0:
            raise DomainError(f"c must be positive, got {self.c}")
        if not self.beta >= 0:
            raise DomainError(f"beta must be nonnegative, got {self.beta}")
        if int(self.L) != self.L or self.L < 2:
            raise DomainError(f"L must be an integer >= 2, got {self.L}")

    @property
    def decay(self) -> float:
        """The power ``d + alpha``."""
        return self.d + self.alpha

    def with_beta(self, beta: float) -> "ModelParams":
        return ModelParams(self.d, self.alpha, self.c, beta, self.L, self.kernel)

    def as_dict(self) -> dict:
        return {"d": self.d, "alpha": self.alpha, "c": self.c, "beta": self.beta, "L": self.L,
                "kernel": "power_law" if self.kernel is None else getattr(self.kernel, "__name__", "custom")}

    def kernel_values(self, z: np.ndarray) -> np.ndarray:
        """J at each row of the integer displacement array ``z`` (shape ``(m, d)``)."""
        z = np.asarray(z, dtype=np.int64).reshape(-1, self.d)
        norms = np.abs(z).max(axis=1).astype(float)
        if np.any(norms == 0):
            raise DomainError("J is not defined on the zero displacement")
        floor = self.c * norms ** (-self.decay)
        if self.kernel is None:
            return floor
        vals = np.asarray(self.kernel(z), dtype=float).reshape(-1)
        if np.any(vals < floor * (1 - _ROUNDING)):
            raise KernelContractError("custom kernel falls below c*||z||^(-d-alpha)")
        back = np.asarray(self.kernel(-z), dtype=float).reshape(-1)
        if not np.allclose(vals, back, rtol=1e-12, atol=0):
            raise KernelContractError("custom kernel is not symmetric")
        return vals


@dataclass(frozen=True)
class Displacement:
    z: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "z", _as_point(self.z))
        if self.norm < 1:
            raise DomainError("displacement must be nonzero")

    @property
    def norm(self) -> int:
        return linf(self.z)


@dataclass(frozen=True)
class SigmaDecomposition:
    L: int
    digits: tuple[tuple[int, ...], ...]
    offset: tuple[int, ...] | None = None

    def __post_init__(self):
        if int(self.L) != self.L or self.L < 2:
            raise DomainError(f"L must be an integer >= 2, got {self.L}")
        digits = tuple(_as_point(s) for s in self.digits)
        if not digits and self.offset is None:
            raise DomainError("an empty prefix needs an explicit offset to fix the dimension")
        d = len(digits[0]) if digits else len(self.offset)
        offset = (0,) * d if self.offset is None else _as_point(self.offset, d)
        for s in digits + (offset,):
            if len(s) != d:
                raise DomainError("all digits must have the same dimension")
            if any(v < 0 or v >= self.L for v in s):
                raise DomainError(f"digit {s} has entries outside [0, {self.L - 1}]")
        object.__setattr__(self, "digits", digits)
        object.__setattr__(self, "offset", offset)

    @classmethod
    def zeros(cls, L: int, d: int, N: int) -> "SigmaDecomposition":
        return cls(L, ((0,) * d,) * N, (0,) * d)

    @classmethod
    def random(cls, L: int, d: int, N: int, seed: int) -> "SigmaDecomposition":
        rng = np.random.default_rng(seed)
        return cls(L, tuple(tuple(int(v) for v in row) for row in rng.integers(0, L, size=(N, d))))

    @classmethod
    def parse(cls, value, L: int, d: int, N: int) -> "SigmaDecomposition":
        """Build from a config value: a digit list, ``"zeros"``, or ``"random:<seed>"``."""
        if value is None or value == "zeros":
            return cls.zeros(L, d, N)
        if isinstance(value, str):
            if value.startswith("random:"):
                return cls.random(L, d, N, int(value.split(":", 1)[1]))
            raise DomainError(f"unrecognised sigma value {value!r}")
        rows = [(r,) if isinstance(r, int) else tuple(r) for r in value]
        if len(rows) < N:
            raise DepthError(f"sigma has {len(rows)} digits but depth {N} is required")
        return cls(L, tuple(rows))

    @property
    def d(self) -> int:
        return len(self.offset)

    @property
    def N(self) -> int:
        return len(self.digits)

    @cached_property
    def digest(self) -> str:
        payload = repr((self.L, self.offset, self.digits)).encode()
        return hashlib.sha1(payload).hexdigest()[:12]

    def anchor(self, n: int) -> tuple[int, ...]:
        if n < 0:
            raise DomainError("levels are nonnegative")
        if n > self.N:
            raise DepthError(f"level {n} exceeds the stored depth N={self.N}; extend sigma")
        s = list(self.offset)
        for m in range(1, n + 1):
            for i, v in enumerate(self.digits[m - 1]):
                s[i] += v * self.L ** m
        return tuple(s)

    def anchors(self) -> np.ndarray:
        """Array of shape ``(N+1, d)`` holding ``s^(0) .. s^(N)``."""
        out = np.zeros((self.N + 1, self.d), dtype=np.int64)
        out[0] = self.offset
        for m in range(1, self.N + 1):
            out[m] = out[m - 1] + np.asarray(self.digits[m - 1], dtype=np.int64) * self.L ** m
        return out

    def as_dict(self) -> dict:
        return {"L": self.L, "offset": list(self.offset), "digits": [list(s) for s in self.digits],
                "digest": self.digest}


@dataclass(frozen=True, order=True)
class Block:
    """The cube ``corner + [0, L^level - 1]^d``.

    The corner determines the whole sub-hierarchy inside the block, so
    children and levels of pairs inside the block need no reference to the
    decomposition that produced it.
    """

    level: int
    corner: tuple[int, ...]
    L: int = 2
    sigma_digest: str = field(default="", compare=False)

    @property
    def side(self) -> int:
        return self.L ** self.level

    @property
    def d(self) -> int:
        return len(self.corner)

    @property
    def volume(self) -> int:
        return self.side ** self.d

    def contains(self, x) -> bool:
        x = _as_point(x, self.d)
        return all(0 <= xi - ci < self.side for xi, ci in zip(x, self.corner))

    def contains_block(self, other: "Block") -> bool:
        return other.level <= self.level and self.contains(other.corner)

    def is_ancestor_of(self, other: "Block") -> bool:
        return other.level < self.level and self.contains(other.corner)

    def children(self) -> list["Block"]:
        if self.level == 0:
            return []
        s = self.L ** (self.level - 1)
        out = []
        for offs in np.ndindex(*(self.L,) * self.d):
            corner = tuple(c + o * s for c, o in zip(self.corner, offs))
            out.append(Block(self.level - 1, corner, self.L, self.sigma_digest))
        return out

    def points(self) -> Iterator[tuple[int, ...]]:
        for offs in np.ndindex(*(self.side,) * self.d):
            yield tuple(c + o for c, o in zip(self.corner, offs))

    def inner_level(self, x, y) -> int:
        """Level of the smallest sub-block of this block containing both ``x`` and ``y``."""
        x, y = _as_point(x, self.d), _as_point(y, self.d)
        if not (self.contains(x) and self.contains(y)):
            raise DomainError("points must lie in the block")
        for m in range(self.level + 1):
            w = self.L ** m
            if all((a - c) // w == (b - c) // w for a, b, c in zip(x, y, self.corner)):
                return m
        raise AssertionError("unreachable: the block itself contains both points")

    def as_dict(self) -> dict:
        return {"level": self.level, "corner": list(self.corner), "sigma_digest": self.sigma_digest}

    @property
    def tag(self) -> str:
        return f"B{self.level}@" + ",".join(str(c) for c in self.corner)


def _check_sigma(params: ModelParams, sigma: SigmaDecomposition) -> None:
    if params.L != sigma.L or params.d != sigma.d:
        raise MismatchError(f"params (d={params.d}, L={params.L}) do not match sigma (d={sigma.d}, L={sigma.L})")


def kernel_J(params: ModelParams, z) -> float:
    if not isinstance(z, Displacement):
        z = Displacement(_as_point(z))
    if len(z.z) != params.d:
        raise DomainError(f"displacement {z.z} is not {params.d}-dimensional")
    return float(params.kernel_values(np.asarray([z.z]))[0])


def block_of(sigma: SigmaDecomposition, x, n: int) -> Block:
    x = _as_point(x, sigma.d)
    s = sigma.anchor(n)
    w = sigma.L ** n
    corner = tuple(si + w * ((xi - si) // w) for xi, si in zip(x, s))
    return Block(n, corner, sigma.L, sigma.digest)


def is_block_of(sigma: SigmaDecomposition, B: Block) -> bool:
    if B.L != sigma.L or B.d != sigma.d or B.level > sigma.N:
        return False
    return block_of(sigma, B.corner, B.level).corner == B.corner


def parent(sigma: SigmaDecomposition, B: Block) -> Block:
    return block_of(sigma, B.corner, B.level + 1)


def h_sigma(sigma: SigmaDecomposition, x, y) -> int | float:
    """Smallest stored level at which ``x`` and ``y`` share a block, else :data:`INFINITE`."""
    x, y = _as_point(x, sigma.d), _as_point(y, sigma.d)
    if x == y:
        return 0
    anchors = sigma.anchors()
    for n in range(1, sigma.N + 1):
        w = sigma.L ** n
        if all((a - s) // w == (b - s) // w for a, b, s in zip(x, y, anchors[n])):
            return n
    return INFINITE


def d_sigma(sigma: SigmaDecomposition, x, y) -> float:
    h = h_sigma(sigma, x, y)
    if h == 0:
        return 0.0
    return INFINITE if h == INFINITE else float(sigma.L ** h)


def h_sigma_array(sigma: SigmaDecomposition, X: np.ndarray, Y: np.ndarray, max_level: int | None = None) -> np.ndarray:
    """Vectorised :func:`h_sigma` for rows of ``X`` and ``Y``; ``-1`` encodes INFINITE.

    Levels above ``max_level`` are treated as absent.
    """
    X = np.asarray(X, dtype=np.int64).reshape(-1, sigma.d)
    Y = np.asarray(Y, dtype=np.int64).reshape(-1, sigma.d)
    top = sigma.N if max_level is None else max_level
    if top > sigma.N:
        raise DepthError(f"level {top} exceeds the stored depth N={sigma.N}")
    if top == 0 or len(X) == 0:
        return np.where(np.all(X == Y, axis=1), 0, -1).astype(np.int64)
    s = sigma.anchors()[1:top + 1]                                         # (top, d)
    w = sigma.L ** np.arange(1, top + 1, dtype=np.int64)[:, None]          # (top, 1)
    same = np.all(np.floor_divide(X[:, None, :] - s, w) == np.floor_divide(Y[:, None, :] - s, w), axis=2)
    h = np.where(same.any(axis=1), same.argmax(axis=1) + 1, -1)
    return np.where(np.all(X == Y, axis=1), 0, h).astype(np.int64)


def hier_weight(params: ModelParams, level) -> np.ndarray | float:
    """``c L^{-(d+alpha) level}``: the rate of a level-``level`` block layer."""
    return params.c * np.power(float(params.L), -params.decay * np.asarray(level, dtype=float))


def kernel_H_sigma(params: ModelParams, sigma: SigmaDecomposition, x, y) -> float:
    _check_sigma(params, sigma)
    h = h_sigma(sigma, x, y)
    if h == 0 or h == INFINITE:
        return 0.0
    return float(hier_weight(params, h))


def kernel_R_sigma(params: ModelParams, sigma: SigmaDecomposition, x, y) -> float:
    x, y = _as_point(x, params.d), _as_point(y, params.d)
    if x == y:
        raise DomainError("R is only defined for distinct points")
    J = kernel_J(params, tuple(b - a for a, b in zip(x, y)))
    H = kernel_H_sigma(params, sigma, x, y)
    R = J - H
    if R < 0:
        if R < -_ROUNDING * J:
            raise KernelContractError(f"R_sigma({x},{y}) = {R} < 0: kernel below the power-law floor")
        R = 0.0
    return R


def kernel_H_block(params: ModelParams, B: Block, x, y) -> float:
    if B.level < 1:
        raise DomainError("only non-singleton blocks carry a hierarchical layer")
    x, y = _as_point(x, params.d), _as_point(y, params.d)
    if x == y or not (B.contains(x) and B.contains(y)):
        return 0.0
    if B.inner_level(x, y) != B.level:
        return 0.0
    return float(hier_weight(params, B.level))


def kernel_J_restricted(params: ModelParams, sigma: SigmaDecomposition, B: Block, x, y) -> float:
    """Rate of the pair ``{x, y}`` in the configuration that omits the layers of all strict ancestors of ``B``."""
    _check_sigma(params, sigma)
    if not is_block_of(sigma, B):
        raise MismatchError(f"{B} is not a block of sigma {sigma.digest}")
    x, y = _as_point(x, params.d), _as_point(y, params.d)
    if x == y:
        raise DomainError("J_{sigma,B} is only defined for distinct points")
    h = h_sigma(sigma, x, y)
    if h != INFINITE and h > B.level and block_of(sigma, x, h).contains(B.corner):
        return kernel_R_sigma(params, sigma, x, y)
    return kernel_J(params, tuple(b - a for a, b in zip(x, y)))


def translate_sigma(sigma: SigmaDecomposition, x) -> SigmaDecomposition:
    """The decomposition whose blocks are the blocks of ``sigma`` shifted by ``x``.

    Digits are recomputed by L-adic addition modulo ``L^(N+1)``; the carry out
    of the top digit is dropped, which does not affect any stored level.
    """
    x = _as_point(x, sigma.d)
    L, N = sigma.L, sigma.N
    mod = L ** (N + 1)
    total = [(s + xi) % mod for s, xi in zip(sigma.anchor(N), x)]
    offset = tuple(t % L for t in total)
    digits = tuple(tuple((t // L ** m) % L for t in total) for m in range(1, N + 1))
    return SigmaDecomposition(L, digits, offset)
