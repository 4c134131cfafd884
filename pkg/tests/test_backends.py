from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from percolab import _backend, _pycore

try:
    from percolab import _core
except ImportError:  # extension not built in this environment
    _core = None

needs_core = pytest.mark.skipif(_core is None, reason="compiled extension not built")


def random_graph(seed, n, m):
    rng = np.random.default_rng(seed)
    u = rng.integers(0, n, m)
    v = rng.integers(0, n, m)
    keep = u != v
    return np.minimum(u, v)[keep], np.maximum(u, v)[keep]


def test_backend_name_is_reported():
    assert _backend.BACKEND in ("cython", "python")


@needs_core
@given(st.integers(0, 2 ** 31), st.integers(1, 300), st.integers(0, 400))
def test_labels_identical(seed, n, m):
    u, v = random_graph(seed, n, m)
    a = _core.label_components(n, u, v)
    b = _pycore.label_components(n, u, v)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


@needs_core
@given(st.integers(0, 2 ** 31), st.integers(2, 200), st.integers(0, 300))
def test_kmax_trajectory_identical(seed, n, m):
    u, v = random_graph(seed, n, m)
    for x, y in zip(_core.kmax_trajectory(n, u, v), _pycore.kmax_trajectory(n, u, v)):
        assert np.array_equal(x, y)


@needs_core
@given(st.integers(0, 2 ** 31), st.integers(1, 2))
def test_distance_and_ghost_kernels_identical(seed, d):
    side = 24 if d == 1 else 8
    n = side ** d
    u, v = random_graph(seed, n, n)
    coords = np.indices((side,) * d).reshape(d, -1).T.astype(np.int64)
    labels, sizes = _pycore.label_components(n, u, v)
    is_origin = np.zeros(n, dtype=bool)
    is_origin[np.random.default_rng(seed).choice(n, n // 3, replace=False)] = True
    assert np.array_equal(_core.pair_distance_hist(labels, coords, is_origin, side // 2),
                          _pycore.pair_distance_hist(labels, coords, is_origin, side // 2))
    g = np.indices((5,) * d).reshape(d, -1).T - 2
    shifts = g[np.any(g != 0, axis=1)].astype(np.int64)
    origins = np.flatnonzero(is_origin).astype(np.int64)
    ns = np.asarray([1, 2, 4], dtype=np.int64)
    for x, y in zip(_core.two_ghost_counts(labels, sizes, coords, side, origins, shifts, ns),
                    _pycore.two_ghost_counts(labels, sizes, coords, side, origins, shifts, ns)):
        assert np.array_equal(x, y)


def test_fallback_selected_by_environment(monkeypatch):
    import importlib
    monkeypatch.setenv("PERCOLAB_PURE_PYTHON", "1")
    reloaded = importlib.reload(_backend)
    try:
        assert reloaded.BACKEND == _pycore.NAME
        assert reloaded.label_components is _pycore.label_components
    finally:
        monkeypatch.delenv("PERCOLAB_PURE_PYTHON")
        importlib.reload(_backend)
