"""Command-line driver: ``percolab <command> --config run.json``.

Every run writes ``runs/<timestamp>-<hash>/record.json`` plus CSV tables
under the output directory (``--out``, overridden by ``PERCOLAB_OUT``).
Exit codes: 0 success, 1 invalid configuration, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import math
import os
import platform
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable

import numpy as np

from . import BACKEND, __version__
from .errors import ConfigError, DomainError, PercolabError
from .kernels import Block, ModelParams, SigmaDecomposition
from .sampler import BoxGeometry, rng_for, sample_hierarchical, sample_layered, sample_plain

log = logging.getLogger("percolab")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2

COMMANDS = ("betac", "twopoint", "tail", "hier", "blocks", "oracle-check", "sample")


# ----------------------------------------------------------------------------
# configuration

_DEFAULTS: dict[str, Any] = {
    "d": 1, "alpha": 0.5, "c": 1.0, "L": 2, "beta": None, "sigma": "zeros", "N": None,
    "side": 1024, "sides": None, "replicates": 200, "radii": None, "max_level": None,
    "lambdas": [1, 2, 3, 5], "epsilons": [0.1, 0.25], "ghost_ns": [8, 16, 32], "ghost_xmax": 256,
    "draws": 100_000, "beta_bracket": None, "max_widen": 6, "q": None, "kernel": "power_law",
    "layered": False, "hierarchical": False,
}


@dataclass
class RunConfig:
    values: dict

    def __getitem__(self, key):
        return self.values[key]

    def params(self, beta: float | None = None) -> ModelParams:
        b = self["beta"] if beta is None else beta
        try:
            return ModelParams(self["d"], self["alpha"], self["c"], 0.0 if b is None else float(b), self["L"])
        except DomainError as exc:
            field_ = next((f for f in ("alpha", "c", "L", "d", "beta") if f in str(exc).split()[0]), "params")
            raise ConfigError(field_, str(exc)) from None

    def depth(self, side: int | None = None) -> int:
        if self["N"] is not None:
            return int(self["N"])
        side = side or self["side"]
        return max(1, math.ceil(math.log(side, self["L"]) - 1e-9))

    def sigma(self, depth: int | None = None) -> SigmaDecomposition:
        N = self.depth() if depth is None else depth
        try:
            return SigmaDecomposition.parse(self["sigma"], self["L"], self["d"], N)
        except (DomainError, ValueError) as exc:
            raise ConfigError("sigma", str(exc)) from None


def _check_number(values: dict, key: str, kind=float, minimum=None, exclusive=False):
    v = values[key]
    if v is None:
        return
    if isinstance(v, bool) or not isinstance(v, (int, float)) or (kind is int and int(v) != v):
        raise ConfigError(key, f"expected {'an integer' if kind is int else 'a number'}, got {v!r}")
    if minimum is not None and (v <= minimum if exclusive else v < minimum):
        raise ConfigError(key, f"must be {'>' if exclusive else '>='} {minimum}, got {v}")


def load_config(path: str | None, command: str, overrides: dict | None = None) -> RunConfig:
    raw: dict = {}
    if path:
        try:
            raw = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError("--config", f"no such file {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError("--config", f"invalid JSON: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError("--config", "the configuration must be a JSON object")
    unknown = (set(raw) | set(overrides or {})) - set(_DEFAULTS) - {"seed", "comment"}
    if unknown:
        raise ConfigError(sorted(unknown)[0], "unknown configuration field")
    values = {**_DEFAULTS, **raw, **(overrides or {})}
    for key, kind, lo, excl in (("d", int, 1, False), ("L", int, 2, False), ("c", float, 0, True),
                                ("side", int, 1, False), ("replicates", int, 1, False), ("N", int, 1, False),
                                ("max_level", int, 1, False), ("draws", int, 1, False), ("max_widen", int, 0, False),
                                ("ghost_xmax", int, 1, False)):
        _check_number(values, key, kind, lo, excl)
    if not isinstance(values["alpha"], (int, float)) or not 0 < values["alpha"] < values["d"]:
        raise ConfigError("alpha", f"must lie in (0, d={values['d']}), got {values['alpha']!r}")
    betas = values["beta"] if isinstance(values["beta"], list) else [values["beta"]]
    for b in betas:
        if b is not None and (isinstance(b, bool) or not isinstance(b, (int, float)) or b < 0):
            raise ConfigError("beta", f"must be a nonnegative number, got {b!r}")
    if values["kernel"] != "power_law":
        raise ConfigError("kernel", "only the power_law kernel is configurable from the command line")
    if values["radii"] is not None:
        radii = values["radii"]
        if not isinstance(radii, list) or not radii or any(not isinstance(r, int) or r < 1 for r in radii):
            raise ConfigError("radii", "must be a nonempty list of positive integers")
        if command in ("twopoint", "tail") and max(radii) > values["side"] // 4:
            raise ConfigError("radii", f"margin rule violated: r_max={max(radii)} exceeds side/4={values['side'] // 4}")
    if values["sides"] is not None:
        sides = values["sides"]
        if not isinstance(sides, list) or len(sides) < 2 or any(not isinstance(s, int) or s < 2 for s in sides):
            raise ConfigError("sides", "must list at least two box sides")
        s = sorted(sides)
        if any(b < 4 * a for a, b in zip(s, s[1:])):
            raise ConfigError("sides", "successive sides must differ by a factor of at least 4")
    if values["beta_bracket"] is not None:
        bb = values["beta_bracket"]
        if not isinstance(bb, list) or len(bb) != 2 or not 0 <= bb[0] < bb[1]:
            raise ConfigError("beta_bracket", "must be [lo, hi] with 0 <= lo < hi")
    sig = values["sigma"]
    if not (sig in (None, "zeros") or (isinstance(sig, str) and sig.startswith("random:")) or isinstance(sig, list)):
        raise ConfigError("sigma", "must be a digit list, \"zeros\" or \"random:<seed>\"")
    if isinstance(sig, str) and sig.startswith("random:"):
        try:
            int(sig.split(":", 1)[1])
        except ValueError:
            raise ConfigError("sigma", f"bad seed in {sig!r}") from None
    return RunConfig(values)


# ----------------------------------------------------------------------------
# run records

@dataclass
class RunRecord:
    command: str
    config: dict
    seed: int
    version: str = __version__
    backend: str = BACKEND
    outputs: dict = field(default_factory=dict)
    tables: dict = field(default_factory=dict)      # file name -> list of row dicts
    texts: dict = field(default_factory=dict)       # file name -> raw text
    wall_seconds: float = 0.0
    replicates: int = 0
    passed: bool | None = None

    def digest(self) -> str:
        payload = json.dumps({"command": self.command, "config": self.config, "seed": self.seed,
                              "version": self.version}, sort_keys=True, default=str)
        return hashlib.sha1(payload.encode()).hexdigest()[:10]

    def as_dict(self) -> dict:
        return {"command": self.command, "config": self.config, "seed": self.seed, "version": self.version,
                "backend": self.backend, "python": platform.python_version(), "numpy": np.__version__,
                "outputs": self.outputs, "files": sorted(list(self.tables) + list(self.texts)),
                "wall_seconds": self.wall_seconds, "replicates": self.replicates, "passed": self.passed}


def csv_text(rows: list[dict]) -> str:
    buf = io.StringIO()
    if rows:
        w = csv.DictWriter(buf, fieldnames=list(rows[0].keys()), lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: _cell(v) for k, v in row.items()})
    return buf.getvalue()


def _cell(v):
    """Shortest round-tripping text for floats, plain text for numpy integers."""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return int(v)
    return v


def write_record(record: RunRecord, out_dir: str | Path) -> Path:
    stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%S%fZ")
    target = Path(out_dir) / "runs" / f"{stamp}-{record.digest()}"
    target.mkdir(parents=True, exist_ok=False)
    for name, rows in record.tables.items():
        (target / name).write_text(csv_text(rows))
    for name, text in record.texts.items():
        (target / name).write_text(text)
    (target / "record.json").write_text(json.dumps(record.as_dict(), indent=2, sort_keys=True, default=_json_default)
                                        + "\n")
    return target


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(f"cannot serialise {type(o).__name__}")


# ----------------------------------------------------------------------------
# commands

def _map(fn: Callable, items: list, threads: int) -> list:
    """Run independent experiment points, in a process pool when ``threads > 1``; order is preserved."""
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def _sides(cfg: RunConfig) -> list[int]:
    if cfg["sides"] is not None:
        return sorted(cfg["sides"])
    side = cfg["side"]
    return [max(4, side // 16), max(16, side // 4), side]


def cmd_betac(cfg: RunConfig, seed: int, threads: int = 1) -> RunRecord:
    from .estimators import estimate_beta_c

    params = cfg.params(0.0)
    kw = {}
    if cfg["beta_bracket"] is not None:
        kw = {"beta_lo": float(cfg["beta_bracket"][0]), "beta_hi": float(cfg["beta_bracket"][1])}
    res = estimate_beta_c(params, _sides(cfg), cfg["replicates"], seed, q=cfg["q"], max_widen=cfg["max_widen"], **kw)
    rec = RunRecord("betac", cfg.values, seed, replicates=cfg["replicates"])
    rec.outputs = res.as_dict()
    rec.tables["crossing.csv"] = [{"beta": row[0], **{f"m_side{s}": v for s, v in zip(res.sides, row[1:])}}
                                  for row in res.curve]
    return rec


def _resolve_beta(cfg: RunConfig, seed: int) -> tuple[list[float], dict | None]:
    from .estimators import estimate_beta_c

    if cfg["beta"] is None:
        res = estimate_beta_c(cfg.params(0.0), _sides(cfg), max(200, cfg["replicates"]), seed + 1, q=cfg["q"])
        return [res.beta_c], res.as_dict()
    betas = cfg["beta"] if isinstance(cfg["beta"], list) else [cfg["beta"]]
    return [float(b) for b in betas], None


def _critical_point(args):
    cfg_values, beta, seed, ghost = args
    from .estimators import critical_run

    cfg = RunConfig(cfg_values)
    return critical_run(cfg.params(beta), cfg["side"], cfg["replicates"], seed, radii=cfg["radii"],
                        ghost_ns=tuple(cfg["ghost_ns"]) if ghost else (), ghost_xmax=cfg["ghost_xmax"])


def cmd_twopoint(cfg: RunConfig, seed: int, threads: int = 1) -> RunRecord:
    betas, bc = _resolve_beta(cfg, seed)
    runs = _map(_critical_point, [(cfg.values, b, seed + k, False) for k, b in enumerate(betas)], threads)
    rec = RunRecord("twopoint", cfg.values, seed, replicates=cfg["replicates"] * len(betas))
    rec.outputs = {"beta_c": bc, "points": []}
    d, alpha = cfg["d"], cfg["alpha"]
    for k, (b, run) in enumerate(zip(betas, runs)):
        entry: dict = {"beta": b, "largest_cluster_fraction": run.largest_fraction}
        try:
            fit = run.two_point_fit()
            trend = run.trend()
            entry.update({"fit": fit.as_dict(), "mann_kendall_tau": trend.tau, "mann_kendall_p_upward": trend.p_upward,
                          "target_slope": -(d - alpha),
                          "pass_slope": abs(fit.exponent + (d - alpha)) <= 0.1, "pass_no_upward_trend":
                          not trend.significant(0.01)})
        except PercolabError as exc:
            entry["fit_error"] = str(exc)
        rec.outputs["points"].append(entry)
        rec.tables[f"twopoint_{k}.csv"] = [{"r[lattice]": int(x), "S[fraction]": v, "err[fraction]": e}
                                           for x, v, e in zip(run.two_point.x, run.two_point.value, run.two_point.err)]
    return rec


def cmd_tail(cfg: RunConfig, seed: int, threads: int = 1) -> RunRecord:
    from .estimators import tail_report

    betas, bc = _resolve_beta(cfg, seed)
    runs = _map(_critical_point, [(cfg.values, b, seed + k, True) for k, b in enumerate(betas)], threads)
    rec = RunRecord("tail", cfg.values, seed, replicates=cfg["replicates"] * len(betas))
    rec.outputs = {"beta_c": bc, "points": []}
    for k, (b, run) in enumerate(zip(betas, runs)):
        entry: dict = {"beta": b}
        try:
            tr = tail_report(run)
            entry.update(tr.as_dict())
            entry["pass_floor"] = tr.inverse_delta + 2 * tr.fit.stderr >= tr.floor
        except PercolabError as exc:
            entry["fit_error"] = str(exc)
        ghosts = [run.two_ghost(n) for n in cfg["ghost_ns"]]
        entry["two_ghost"] = [{"n": g.n, "lhs": g.lhs, "rhs": g.rhs, "A": g.A, "theta": g.theta,
                               "remainder": g.remainder, "passed": g.passed} for g in ghosts]
        rec.outputs["points"].append(entry)
        rec.tables[f"tail_{k}.csv"] = [{"n[vertices]": int(x), "tail[probability]": v, "err[probability]": e}
                                       for x, v, e in zip(run.tail.x, run.tail.value, run.tail.err)]
    return rec


def cmd_hier(cfg: RunConfig, seed: int, threads: int = 1) -> RunRecord:
    from .estimators import hierarchical_profile

    N = cfg["N"] or 6
    sigma = cfg.sigma(N)
    params = cfg.params(0.0)
    beta = None if cfg["beta"] is None else float(cfg["beta"])
    run = hierarchical_profile(params, sigma, N, cfg["replicates"], seed, beta=beta)
    rec = RunRecord("hier", cfg.values, seed, replicates=cfg["replicates"])
    rec.outputs = run.as_dict()
    rec.outputs["sigma"] = sigma.as_dict()
    rec.outputs["target_slope"] = -(cfg["d"] - cfg["alpha"])
    rec.outputs["pass_slope"] = abs(run.fit.exponent + cfg["d"] - cfg["alpha"]) <= 0.1
    rec.tables["hier_profile.csv"] = [{"r[hierarchical]": x, "S[fraction]": v, "err[fraction]": e}
                                      for x, v, e in zip(run.table.x, run.table.value, run.table.err)]
    return rec


def cmd_blocks(cfg: RunConfig, seed: int, threads: int = 1) -> RunRecord:
    from .observables import classify_good, collect_sibling_ensembles, mark_ancestral, tightness_report
    from .oracle import MAX_PARTITION_VERTICES, all_parent_blocks, exact_good_children

    side = cfg["side"]
    N = cfg.depth(side)
    sigma = cfg.sigma(N)
    beta = 0.0 if cfg["beta"] is None else float(cfg["beta"] if not isinstance(cfg["beta"], list) else cfg["beta"][0])
    params = cfg.params(beta)
    box = BoxGeometry(side, cfg["d"])
    max_level = cfg["max_level"] or N
    ens = collect_sibling_ensembles(params, sigma, box, max_level, cfg["replicates"], seed)
    reports = mark_ancestral([classify_good(children) for children in ens.by_parent.values()], sigma)
    rec = RunRecord("blocks", cfg.values, seed, replicates=cfg["replicates"])
    rec.tables["goodness.csv"] = [row for rep in reports for row in rep.csv_rows()]
    tight_rows, all_pass = [], True
    if cfg["replicates"] >= 100:
        for children in ens.by_parent.values():
            for e in children:
                tr = tightness_report(e, cfg["lambdas"], cfg["epsilons"])
                all_pass &= tr.passed
                tight_rows += tr.csv_rows()
        rec.tables["tightness.csv"] = tight_rows
    rec.outputs = {"sigma": sigma.as_dict(), "truncated": ens.truncated, "parents": len(reports),
                   "min_good_children": min((r.good_count for r in reports), default=None),
                   "tightness_passed": all_pass if tight_rows else None}
    if box.vertex_count <= MAX_PARTITION_VERTICES:
        exact_rows, exact_ok = [], True
        for parent in all_parent_blocks(sigma, box, max_level):
            g = exact_good_children(params, sigma, parent, box)
            exact_ok &= 2 * g.good_count >= parent.L ** parent.d
            exact_rows += [{"parent": parent.tag, "block": c.tag, "mean_max": m, "chi": x, "good": int(f)}
                           for c, m, x, f in zip(g.children, g.mean_max, g.susceptibility, g.good)]
        rec.tables["exact_goodness.csv"] = exact_rows
        rec.outputs["exact_half_good"] = exact_ok
    rec.passed = all_pass and rec.outputs.get("exact_half_good", True)
    return rec


def default_oracle_suite(seed: int, draws: int) -> list:
    from .oracle import verify_sampler

    const = ModelParams(1, 0.5, 1.0, math.log(2), 2, kernel=_unit_kernel)
    p1 = ModelParams(1, 0.5, 1.0, 1.0, 2)
    sigma = SigmaDecomposition.random(2, 1, 2, 11)
    box4 = BoxGeometry(4, 1)
    return [
        verify_sampler(const, BoxGeometry(3, 1), draws, seed),
        verify_sampler(p1, box4, draws, seed + 1),
        verify_sampler(p1, box4, draws, seed + 2, sigma=sigma, block=Block(0, (1,), 2, sigma.digest), max_level=2),
    ]


def _unit_kernel(z):
    """Constant kernel 1, which dominates ||z||^(-d-alpha) on nonzero displacements."""
    return np.ones(len(np.atleast_2d(z)))


def cmd_oracle_check(cfg: RunConfig, seed: int, threads: int = 1) -> RunRecord:
    reports = default_oracle_suite(seed, cfg["draws"])
    rec = RunRecord("oracle-check", cfg.values, seed, replicates=cfg["draws"] * len(reports))
    rows = [{"instance": rep.instance, "quantity": r.quantity, "exact": r.exact, "estimate": r.estimate,
             "stderr": r.stderr, "p_value": r.p_value, "passed": int(r.passed)}
            for rep in reports for r in rep.rows]
    rec.tables["oracle_check.csv"] = rows
    rec.passed = all(rep.passed for rep in reports)
    rec.outputs = {"instances": [rep.instance for rep in reports], "min_p_value": min(rep.min_p for rep in reports),
                   "passed": rec.passed}
    return rec


def cmd_sample(cfg: RunConfig, seed: int, threads: int = 1) -> RunRecord:
    side = cfg["side"]
    beta = 0.0 if cfg["beta"] is None else float(cfg["beta"])
    params = cfg.params(beta)
    box = BoxGeometry(side, cfg["d"])
    rng = rng_for(seed, 0)
    if cfg["layered"] or cfg["hierarchical"]:
        N = cfg.depth(side)
        sigma = cfg.sigma(N)
        fn = sample_hierarchical if cfg["hierarchical"] else sample_layered
        config = fn(params, sigma, box, cfg["max_level"] or N, rng, seed=seed, stream=0)
    else:
        config = sample_plain(params, box, rng, seed=seed, stream=0)
    rec = RunRecord("sample", cfg.values, seed, replicates=1)
    rec.texts["configuration.txt"] = config.dump()
    rec.outputs = {"edges": config.num_edges, "truncated": config.truncated}
    return rec


HANDLERS: dict[str, Callable[[RunConfig, int, int], RunRecord]] = {
    "betac": cmd_betac, "twopoint": cmd_twopoint, "tail": cmd_tail, "hier": cmd_hier,
    "blocks": cmd_blocks, "oracle-check": cmd_oracle_check, "sample": cmd_sample,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="percolab", description="Long-range percolation experiments.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", metavar="PATH", help="JSON configuration document")
    p.add_argument("--seed", type=int, default=None, help="64-bit master seed (overrides the config)")
    p.add_argument("--threads", type=int, default=1, help="worker processes for independent experiment points")
    p.add_argument("--out", metavar="DIR", default=".", help="output root; PERCOLAB_OUT takes precedence")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    out = os.environ.get("PERCOLAB_OUT") or args.out
    try:
        if args.threads < 1:
            raise ConfigError("--threads", "must be at least 1")
        cfg = load_config(args.config, args.command)
        seed = args.seed if args.seed is not None else int(cfg.values.get("seed", 0) or 0)
        if not 0 <= seed < 2 ** 64:
            raise ConfigError("--seed", "must be an unsigned 64-bit integer")
        cfg.values["seed"] = seed
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    start = time.perf_counter()
    try:
        record = HANDLERS[args.command](cfg, seed, args.threads)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (PercolabError, ArithmeticError, RuntimeError, ValueError) as exc:
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    record.wall_seconds = round(time.perf_counter() - start, 3)
    target = write_record(record, out)
    print(target)
    if record.passed is False:
        print("one or more checks failed; see record.json", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
