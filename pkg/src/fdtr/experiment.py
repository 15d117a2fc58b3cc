"""Config-driven experiment runner and command line entry point.

A config is a plain text file of ``key = value`` lines. Values are Python
literals (numbers, tuples, quoted strings); bare words are read as strings.
``#`` starts a comment.

Example::

    d0 = 4
    d1 = 4
    action_count = 6
    H = 15
    K = 5
    n_grid = (25, 50, 100, 200, 400)
    seeds = (0, 1, 2)
    variant = continuous     # bare word, read as a string
"""
from __future__ import annotations

import argparse
import ast
import csv
import dataclasses
import hashlib
import json
import os
import platform
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy

from .benchmarks import fit_qlearn, ldtr_mv, qlearn1_mv
from .evaluation import cross_validate_c, evaluate_exact, evaluate_mc, suboptimality
from .features import ConfigError
from .federated import FederatedFitInputs, fdtr_fit, site_projected_stats
from .mdp import BehaviorPolicy, collect_dataset, epsilon_greedy_on_truth, exact_optimal, sample_spec
from .pevi import PenaltyParams, ldtr_fit
from .transport import SocketTransport, TransportError, exchange_round, hub_address, parse_address

METHODS = ("FDTR", "LDTR", "LDTR-MV", "Qlearn-1", "Qlearn-1-MV", "Qlearn-H")
COLUMNS = (
    "method", "K", "n", "seed", "site", "c", "value_mean", "value_se",
    "subopt", "bound", "theta0_error", "wall_time",
)
REQUIRED = ("d0", "d1", "action_count", "H", "K", "n_grid", "seeds")
EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_TRANSPORT = 0, 2, 3, 4


@dataclass(frozen=True)
class ExperimentConfig:
    d0: int
    d1: int
    action_count: int
    H: int
    K: int
    n_grid: tuple
    seeds: tuple
    methods: tuple = METHODS
    lam: float = 1.0
    xi: float = 0.99
    c: float = 0.005
    c_grid: tuple = ()
    map_kind: str = "linear"
    variant: str = "continuous"
    n_states: int = 6
    reward_noise_sd: float = 0.1
    behavior: str = "uniform"
    epsilon: float = 0.3
    mc_rollouts: int = 300
    transport: str = "inprocess"
    hub_addr: str = ""
    output: str = "results.csv"

    def __post_init__(self):
        for name in ("d0", "d1", "action_count", "H", "K", "n_states", "mc_rollouts"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if not self.n_grid or any(n < 1 for n in self.n_grid):
            raise ConfigError("n_grid needs positive sample sizes")
        if list(self.n_grid) != sorted(self.n_grid):
            raise ConfigError("n_grid must be ascending")
        if not self.seeds:
            raise ConfigError("seeds must not be empty")
        if not 0 < self.xi < 1:
            raise ConfigError("xi must lie in (0, 1)")
        if self.lam <= 0 or self.c < 0:
            raise ConfigError("lam must be positive and c non-negative")
        unknown = set(self.methods) - set(METHODS)
        if unknown:
            raise ConfigError(f"unknown methods {sorted(unknown)}")
        if self.variant not in ("finite", "continuous"):
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.transport not in ("inprocess", "socket"):
            raise ConfigError(f"unknown transport {self.transport!r}")
        if self.behavior not in ("uniform", "epsilon_greedy"):
            raise ConfigError(f"unknown behavior {self.behavior!r}")

    def params(self) -> PenaltyParams:
        return PenaltyParams(lam=self.lam, c=self.c, xi=self.xi)

    def config_hash(self) -> str:
        return hashlib.sha256(serialize_config(self).encode()).hexdigest()[:16]


_FIELD_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def _coerce(name: str, value, line: int):
    kind = _FIELD_TYPES[name]
    try:
        if kind == "int":
            if isinstance(value, bool) or int(value) != value:
                raise ValueError
            return int(value)
        if kind == "float":
            return float(value)
        if kind == "str":
            if not isinstance(value, str):
                raise ValueError
            return value
        if kind == "tuple":
            if isinstance(value, (int, float, str)):
                value = (value,)
            return tuple(value)
    except (TypeError, ValueError):
        raise ConfigError(f"line {line}: {name} has invalid value {value!r}") from None
    return value


def parse_config(source) -> ExperimentConfig:
    """Parse a config from a path or from text."""
    if isinstance(source, Path) or (isinstance(source, str) and source.strip() and os.path.isfile(source)):
        text = Path(source).read_text()
    else:
        text = str(source)
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, rhs = line.partition("=")
        key, rhs = key.strip(), rhs.strip()
        if not sep:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        if key not in _FIELD_TYPES:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: {key} given twice")
        if not rhs:
            raise ConfigError(f"line {lineno}: {key} is empty")
        try:
            value = ast.literal_eval(rhs)
        except (ValueError, SyntaxError):
            value = rhs
        values[key] = _coerce(key, value, lineno)
    missing = [k for k in REQUIRED if k not in values]
    if missing:
        raise ConfigError(f"missing required key {missing[0]!r}")
    return ExperimentConfig(**values)


def serialize_config(config: ExperimentConfig) -> str:
    return "".join(f"{f.name} = {getattr(config, f.name)!r}\n" for f in fields(config))


# ---------------------------------------------------------------------------
# one (seed, n) cell


def _behavior(config: ExperimentConfig, spec):
    if config.behavior == "uniform":
        return BehaviorPolicy("uniform", config.action_count)
    return epsilon_greedy_on_truth(spec, config.epsilon)


def _transport(config: ExperimentConfig, override: str | None):
    kind = override or config.transport
    if kind == "inprocess":
        return "inprocess"
    addr = parse_address(config.hub_addr) if config.hub_addr else hub_address()
    return SocketTransport(addr)


def run_cell(config: ExperimentConfig, seed: int, n: int, transport_override: str | None = None):
    """Every method at one ``(seed, n)``. Returns ``(rows, round_manifest)``."""
    K, H = config.K, config.H
    spec = sample_spec(
        config.d0, config.d1, K, H, config.action_count, seed,
        variant=config.variant, n_states=config.n_states,
        reward_noise_sd=config.reward_noise_sd, map_kind=config.map_kind,
    )
    fmap = spec.fmap
    behavior = _behavior(config, spec)
    data_seed = int(np.random.SeedSequence([int(seed), int(n), 1]).generate_state(1)[0])
    datasets = [collect_dataset(spec, k, n, behavior, data_seed) for k in range(K)]
    params = config.params()
    if config.c_grid:
        params = params.with_c(cross_validate_c(datasets, fmap, config.c_grid, behavior, params, 5, seed))

    timings = {}
    t0 = time.perf_counter()
    local = [ldtr_fit(ds, fmap, params) for ds in datasets]
    timings["LDTR"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    stats = [site_projected_stats(ds, fmap, pol) for ds, pol in zip(datasets, local)]
    run_id = f"{config.config_hash()}-s{seed}-n{n}"
    snapshots, manifest = exchange_round(stats, fmap.d1, _transport(config, transport_override), run_id)
    N = sum(ds.n for ds in datasets)
    fed = [fdtr_fit(FederatedFitInputs(ds, fmap, params, snapshots[ds.site_id], N)) for ds in datasets]
    timings["FDTR"] = time.perf_counter() - t0 + timings["LDTR"]

    policies = {"FDTR": [f.policy for f in fed], "LDTR": local}
    if "LDTR-MV" in config.methods:
        policies["LDTR-MV"] = [ldtr_mv(local)] * K
    if {"Qlearn-1", "Qlearn-1-MV"} & set(config.methods):
        t0 = time.perf_counter()
        q1 = [fit_qlearn(ds, fmap, "One") for ds in datasets]
        timings["Qlearn-1"] = time.perf_counter() - t0
        policies["Qlearn-1"] = q1
        policies["Qlearn-1-MV"] = [qlearn1_mv(q1)] * K
    if "Qlearn-H" in config.methods:
        t0 = time.perf_counter()
        policies["Qlearn-H"] = [fit_qlearn(ds, fmap, "PerStep") for ds in datasets]
        timings["Qlearn-H"] = time.perf_counter() - t0

    theta_err = {
        "FDTR": [float(np.linalg.norm(f.theta0 - spec.theta0, axis=1).mean()) for f in fed],
        "LDTR": [float(np.linalg.norm(p.theta[:, : fmap.d0] - spec.theta0, axis=1).mean()) for p in local],
    }
    eval_seed = int(np.random.SeedSequence([int(seed), int(n), 2]).generate_state(1)[0])
    rows = []
    for method in config.methods:
        for k in range(K):
            pol = policies[method][k]
            subopt = bound = float("nan")
            if spec.variant == "finite":
                v = evaluate_exact(spec, k, pol)
                v_mean, v_se = float(v.mean()), 0.0
                v_star = exact_optimal(spec, k).V[0]
                subopt = float((v_star - v).mean())
                if hasattr(pol, "penalty_from_phi"):
                    bound = float(np.mean([suboptimality(spec, k, pol, x).bound for x in range(spec.n_states)]))
            else:
                est = evaluate_mc(spec, k, pol, config.mc_rollouts, eval_seed)
                v_mean, v_se = est.mean, est.std_error
            rows.append({
                "method": method, "K": K, "n": n, "seed": seed, "site": k, "c": params.c,
                "value_mean": v_mean, "value_se": v_se, "subopt": subopt, "bound": bound,
                "theta0_error": theta_err.get(method, [float("nan")] * K)[k],
                "wall_time": timings.get(method.replace("-MV", ""), float("nan")),
            })
    return rows, manifest


def _format(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass
class ExperimentReport:
    rows: list
    manifest: dict
    csv_path: Path | None = None


def run(config: ExperimentConfig, out_dir=None, workers: int = 1, transport_override: str | None = None) -> ExperimentReport:
    """Run every ``(seed, n)`` cell, writing CSV rows in sorted order as they complete."""
    cells = [(s, n) for s in sorted(config.seeds) for n in config.n_grid]
    out_path = None
    fh = writer = None
    if out_dir is not None:
        out_path = Path(out_dir) / Path(config.output).name
        out_path.parent.mkdir(parents=True, exist_ok=True)
        fh = open(out_path, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(COLUMNS)
    rows, rounds = [], []

    def consume(cell, result):
        cell_rows, manifest = result
        rows.extend(cell_rows)
        rounds.append(manifest.to_dict())
        if writer is not None:
            for r in cell_rows:
                writer.writerow([_format(r[c]) for c in COLUMNS])
            fh.flush()

    try:
        if workers > 1:
            with ProcessPoolExecutor(workers) as pool:
                futures = [pool.submit(run_cell, config, s, n, transport_override) for s, n in cells]
                for cell, fut in zip(cells, futures):
                    consume(cell, _with_context(cell, fut.result))
        else:
            for cell in cells:
                consume(cell, _with_context(cell, lambda: run_cell(config, *cell, transport_override)))
    finally:
        if fh is not None:
            fh.close()
    manifest = {
        "config_hash": config.config_hash(),
        "config": dataclasses.asdict(config),
        "versions": {
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
        },
        "rounds": rounds,
    }
    if out_path is not None:
        out_path.with_suffix(".manifest.json").write_text(json.dumps(manifest, indent=1, default=str))
    return ExperimentReport(rows, manifest, out_path)


def _with_context(cell, fn):
    try:
        return fn()
    except TransportError as exc:
        raise type(exc)(f"seed {cell[0]}, n {cell[1]}: {exc}") from exc


def summarize_rows(rows: Sequence[dict]) -> dict:
    """Seed-mean of the site-averaged value per ``(method, n)`` with 95% intervals."""
    out = {}
    keys = sorted({(r["method"], r["n"]) for r in rows})
    for method, n in keys:
        per_seed = {}
        for r in rows:
            if r["method"] == method and r["n"] == n:
                per_seed.setdefault(r["seed"], []).append(r["value_mean"])
        vals = np.array([np.mean(v) for v in per_seed.values()])
        se = float(vals.std(ddof=1) / np.sqrt(len(vals))) if len(vals) > 1 else 0.0
        m = float(vals.mean())
        out[(method, n)] = {"mean": m, "se": se, "ci95": (m - 1.96 * se, m + 1.96 * se)}
    return out


# ---------------------------------------------------------------------------
# command line


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fdtr-experiment", description="Run multi-site offline RL experiments.")
    p.add_argument("config", help="path to a key = value config file")
    p.add_argument("-o", "--out-dir", default=".", help="directory for the CSV and manifest")
    p.add_argument("-j", "--jobs", type=int, default=1, help="worker processes")
    p.add_argument("--transport", choices=("inprocess", "socket"), help="override the config transport")
    p.add_argument("--seed", type=int, action="append", help="run only these seeds (repeatable)")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = parse_config(Path(args.config))
        if args.seed:
            config = dataclasses.replace(config, seeds=tuple(args.seed))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    try:
        report = run(config, args.out_dir, args.jobs, args.transport)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TransportError as exc:
        print(f"transport error: {exc}", file=sys.stderr)
        return EXIT_TRANSPORT
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    for (method, n), s in sorted(summarize_rows(report.rows).items(), key=lambda kv: (kv[0][1], kv[0][0])):
        print(f"n={n:<5d} {method:<12s} {s['mean']:.4f} +/- {1.96 * s['se']:.4f}")
    print(f"wrote {report.csv_path}")
    return EXIT_OK


if __name__ == "__main__":
    raise SystemExit(main())
