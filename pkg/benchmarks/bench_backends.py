"""Time the compiled kernels against the pure-Python fallback on critical configurations.

    python3 benchmarks/bench_backends.py [--side 16384] [--repeat 5]
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from percolab import _pycore
from percolab.kernels import ModelParams
from percolab.sampler import BoxGeometry, rng_for, sample_plain

try:
    from percolab import _core
except ImportError:
    _core = None


def best_of(fn, repeat: int) -> float:
    times = []
    for _ in range(repeat):
        start = time.perf_counter()
        fn()
        times.append(time.perf_counter() - start)
    return min(times)


def workloads(side: int, beta: float, seed: int):
    box = BoxGeometry(side, 1)
    cfg = sample_plain(ModelParams(1, 0.5, beta=beta), box, rng_for(seed))
    V = box.vertex_count
    order = np.argsort(cfg.thresholds, kind="stable")
    labels, sizes = _pycore.label_components(V, cfg.u, cfg.v)
    is_origin = box.central_mask()
    origins = np.flatnonzero(is_origin)[::max(1, int(is_origin.sum()) // 256)]
    shifts = np.arange(-64, 65, dtype=np.int64)
    shifts = shifts[shifts != 0].reshape(-1, 1)
    ns = np.array([8, 16, 32], dtype=np.int64)
    return cfg.num_edges, {
        "label_components": lambda core: core.label_components(V, cfg.u, cfg.v),
        "kmax_trajectory": lambda core: core.kmax_trajectory(V, cfg.u[order], cfg.v[order]),
        "pair_distance_hist": lambda core: core.pair_distance_hist(labels, box.coords, is_origin, side // 4),
        "two_ghost_counts": lambda core: core.two_ghost_counts(labels, sizes, box.coords, side, origins, shifts, ns),
    }


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--side", type=int, default=1 << 14)
    ap.add_argument("--beta", type=float, default=0.2656)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    edges, jobs = workloads(args.side, args.beta, args.seed)
    print(f"side={args.side} beta={args.beta} edges={edges}")
    print(f"{'kernel':<20} {'python [ms]':>12} {'cython [ms]':>12} {'speedup':>8}")
    for name, job in jobs.items():
        py = best_of(lambda: job(_pycore), args.repeat) * 1e3
        if _core is None:
            print(f"{name:<20} {py:12.2f} {'n/a':>12} {'n/a':>8}")
            continue
        cy = best_of(lambda: job(_core), args.repeat) * 1e3
        print(f"{name:<20} {py:12.2f} {cy:12.2f} {py / cy:8.1f}x")


if __name__ == "__main__":
    main()
