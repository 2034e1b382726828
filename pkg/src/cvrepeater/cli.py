"""Experiment runner: presets, sweeps, optimization, machine-readable output.

Subcommands
-----------
eof        entanglement of formation vs distance (gamma -> 0 post-selection)
keyrate    secret key rate vs distance, parameters optimized per point
bounds     upper/lower(/numeric) bound comparison at fixed parameters
baselines  PLOB bound, optimized direct-transmission key, direct EOF
znp        expected-steps table Z_n(p) against a Monte-Carlo column
optimize   parameter search at a single distance, with trace

Output is a CSV with a '#'-prefixed header block (schema, config hash,
column notes) plus a JSON sidecar echoing the full configuration. Rows are
deterministic for a given config and seed: quadrature nodes are fixed and
reductions are ordered, so re-runs produce byte-identical CSV bodies.
All rates are Gaussian-CM-based bounds (see metrics module).

Exit codes: 0 success, 2 configuration error, 3 convergence/physicality
failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
from dataclasses import asdict, dataclass, field
from multiprocessing import Pool
from pathlib import Path

import numpy as np
from scipy.optimize import minimize

from .metrics import (CovarianceMatrixTM, KeyRateInputs, PhysicalityError,
                      direct_transmission_key, eof_gaussian,
                      eof_infinite_squeezing, holevo_reverse, mutual_info,
                      plob, raw_key)
from .rates import (StageProbabilities, repeater_rate, secret_key_rate,
                    simulate_z_steps, z_steps)
from .swap import (ChainConfig, ConvergenceError, IntractableConfigError,
                   chain_evaluate, ideal_chain_state)
from .fock import moments

SCHEMA_VERSION = "1"
WORKERS_ENV = "CVREPEATER_WORKERS"

#: per-round post-selection radii for the lower-bound path (first round first)
LOWER_GAMMA_PRESETS = {1: (0.5,), 2: (0.2, 0.45), 3: (0.06, 0.15, 0.4)}

RATE_COLUMNS = [
    "experiment", "distance_km", "n_links", "bound_mode", "protocol", "beta",
    "chi", "g", "gamma_max", "lambda_a", "lambda_b", "eta_link",
    "p_nla", "p_ps", "r_rep", "i_ab", "i_be", "raw_key", "secret_key_rate",
    "eof", "plob", "cutoff", "converged",
]
EOF_COLUMNS = [
    "experiment", "distance_km", "n_links", "chi", "g", "eof",
    "eof_direct_infinite", "cutoff", "converged",
]
BASELINE_COLUMNS = [
    "experiment", "distance_km", "eta_total", "plob", "direct_key",
    "direct_chi", "direct_hit_window_edge", "eof_direct_infinite",
]
ZNP_COLUMNS = ["experiment", "n", "p", "z_exact", "z_montecarlo",
               "rel_error", "trials", "seed"]
OPT_COLUMNS = [
    "experiment", "distance_km", "n_links", "stage", "eval_index", "chi", "g",
    "gamma_max", "lambda_a", "lambda_b", "secret_key_rate", "converged",
]


class ConfigError(ValueError):
    """Invalid experiment configuration."""


@dataclass
class ExperimentConfig:
    """Full description of one experiment run (echoed into the sidecar)."""

    kind: str
    distances_km: tuple[float, ...] = ()
    n_links: int = 2
    chi: float | None = None
    g: float | None = None
    gain_max: float = 20.0
    gamma_max: tuple[float, ...] | None = None
    beta: float = 0.95
    protocol: str = "hom"
    bound_mode: str = "numeric"
    cutoff: int | None = None
    chi_bounds: tuple[float, float] = (0.05, 0.6)
    g_bounds: tuple[float, float] = (1.0, 40.0)
    optimizer_maxfev: int = 60
    radial_nodes: int = 32
    attenuation_db_per_km: float = 0.2
    workers: int = 1
    seed: int = 2024
    trials: int = 1_000_000
    out: str = "results.csv"

    def n_levels(self) -> int:
        n = int(math.log2(self.n_links))
        if 2 ** n != self.n_links or n < 1:
            raise ConfigError(f"n_links must be one of 2, 4, 8, 16; got {self.n_links}")
        return n

    def resolved_gamma_max(self, bound_mode: str | None = None) -> tuple[float, ...]:
        n = self.n_levels()
        if self.gamma_max is not None:
            if len(self.gamma_max) == 1 and n > 1:
                return tuple(self.gamma_max) * n
            if len(self.gamma_max) != n:
                raise ConfigError(
                    f"need {n} gamma_max values (one per swapping round), "
                    f"got {len(self.gamma_max)}")
            return tuple(self.gamma_max)
        if (bound_mode or self.bound_mode) == "lower":
            if n not in LOWER_GAMMA_PRESETS:
                raise ConfigError(
                    "no lower-bound gamma_max preset for this link count; "
                    "pass --gamma-max per round")
            return LOWER_GAMMA_PRESETS[n]
        return (0.5,) * n

    def content_hash(self) -> str:
        payload = asdict(self)
        # identify the computation, not where it lands or how many workers
        payload.pop("out", None)
        payload.pop("workers", None)
        blob = json.dumps(payload, sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


# -- single evaluation points ---------------------------------------------------


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        if not math.isfinite(value):
            raise PhysicalityError(f"non-finite value in output row: {value}")
        return f"{value:.12g}"
    if isinstance(value, (tuple, list)):
        return ";".join(_fmt(v) for v in value)
    return str(value)


def rate_point(cfg: ExperimentConfig, distance_km: float, chi: float, g: float,
               bound_mode: str | None = None) -> dict:
    """Evaluate the full rate chain at fixed parameters; returns a row dict."""
    bound = bound_mode or cfg.bound_mode
    n = cfg.n_levels()
    chain = ChainConfig(
        n_levels=n, total_distance_km=distance_km, chi=chi, g=g,
        gamma_max=cfg.resolved_gamma_max(bound), beta=cfg.beta,
        protocol=cfg.protocol, bound_mode=bound, cutoff=cfg.cutoff,
        attenuation_db_per_km=cfg.attenuation_db_per_km,
        radial_nodes=cfg.radial_nodes)
    res = chain_evaluate(chain)
    V = res.cm
    V.validate()
    for p in (res.p_nla, *res.p_ps):
        if not 0.0 < p <= 1.0:
            raise PhysicalityError(f"stage probability {p} outside (0, 1]")
    inputs = KeyRateInputs(beta=cfg.beta, protocol=cfg.protocol)
    i_ab = mutual_info(V, cfg.protocol)
    i_be = holevo_reverse(V)
    key = raw_key(V, inputs)
    r_rep = repeater_rate(StageProbabilities(res.p_nla, res.p_ps), n)
    skr = secret_key_rate(key, r_rep)
    eta_total = 10.0 ** (-cfg.attenuation_db_per_km * distance_km / 10.0)
    return {
        "experiment": cfg.kind,
        "distance_km": distance_km,
        "n_links": cfg.n_links,
        "bound_mode": bound,
        "protocol": cfg.protocol,
        "beta": cfg.beta,
        "chi": chi,
        "g": g,
        "gamma_max": chain.gamma_max,
        "lambda_a": tuple(gn.lambda_a for gn in res.gains),
        "lambda_b": tuple(gn.lambda_b for gn in res.gains),
        "eta_link": res.link_eta,
        "p_nla": res.p_nla,
        "p_ps": res.p_ps,
        "r_rep": r_rep,
        "i_ab": i_ab,
        "i_be": i_be,
        "raw_key": key,
        "secret_key_rate": skr,
        "eof": eof_gaussian(V),
        "plob": plob(eta_total) if 0.0 < eta_total < 1.0 else None,
        "cutoff": res.cutoff,
        "converged": True,
    }


@dataclass(frozen=True)
class OptimizeResult:
    chi: float
    g: float
    lambda_a: tuple[float, ...]
    lambda_b: tuple[float, ...]
    gamma_max: tuple[float, ...]
    rate: float
    converged: bool
    trace: tuple[tuple[float, float, float], ...] = field(repr=False, default=())


def optimize(distance_km: float, n_links: int, constraints: ExperimentConfig,
             ) -> OptimizeResult:
    """Derivative-free maximization of the secret key rate over (chi, g).

    Deterministic schedule: coarse 3x3 scan of the bounded box, then
    Nelder-Mead from the best cell. Non-convergence within the budget is
    reported via ``converged`` (best found is still returned).
    """
    cfg = constraints
    trace: list[tuple[float, float, float]] = []
    chi_lo, chi_hi = cfg.chi_bounds
    g_lo, g_hi = cfg.g_bounds

    def objective(x) -> float:
        chi = float(np.clip(x[0], chi_lo, chi_hi))
        g = float(np.clip(x[1], g_lo, g_hi))
        try:
            row = rate_point(cfg, distance_km, chi, g)
        except (PhysicalityError, ConvergenceError):
            return 0.0
        trace.append((chi, g, row["secret_key_rate"]))
        return -row["secret_key_rate"]

    chis = np.linspace(chi_lo + 0.2 * (chi_hi - chi_lo), chi_hi - 0.2 * (chi_hi - chi_lo), 3)
    gs = np.linspace(g_lo + 0.15 * (g_hi - g_lo), g_hi - 0.35 * (g_hi - g_lo), 3)
    best_x, best_f = None, np.inf
    for chi in chis:
        for g in gs:
            f = objective((chi, g))
            if f < best_f:
                best_x, best_f = np.array([chi, g]), f
    res = minimize(objective, best_x, method="Nelder-Mead",
                   options={"maxfev": cfg.optimizer_maxfev,
                            "xatol": 1e-3, "fatol": 1e-4 * max(abs(best_f), 1e-12),
                            "initial_simplex": np.array([
                                best_x,
                                best_x + np.array([0.03, 0.0]),
                                best_x + np.array([0.0, 2.5]),
                            ])})
    x = res.x if res.fun <= best_f else best_x
    chi = float(np.clip(x[0], chi_lo, chi_hi))
    g = float(np.clip(x[1], g_lo, g_hi))
    row = rate_point(cfg, distance_km, chi, g)
    return OptimizeResult(
        chi=chi, g=g,
        lambda_a=row["lambda_a"], lambda_b=row["lambda_b"],
        gamma_max=row["gamma_max"], rate=row["secret_key_rate"],
        converged=bool(res.success or res.fun <= best_f),
        trace=tuple(trace))


def eof_point(cfg: ExperimentConfig, distance_km: float, gain_max: float) -> dict:
    """Best gamma -> 0 EOF at one distance with the gain capped at gain_max."""
    n = cfg.n_levels()
    chi = cfg.chi if cfg.chi is not None else 0.3

    def eof_of(g: float) -> float:
        chain = ChainConfig(
            n_levels=n, total_distance_km=distance_km, chi=chi, g=g,
            gamma_max=(0.5,) * n, bound_mode="upper", cutoff=cfg.cutoff,
            attenuation_db_per_km=cfg.attenuation_db_per_km)
        rho = ideal_chain_state(chain)
        mean, cov = moments(rho, ("A", "B"))
        return eof_gaussian(CovarianceMatrixTM.from_moments(mean, cov))

    # golden-section maximization over the allowed gain range
    lo, hi = 1.0, gain_max
    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    x1, x2 = hi - invphi * (hi - lo), lo + invphi * (hi - lo)
    f1, f2 = eof_of(x1), eof_of(x2)
    for _ in range(40):
        if hi - lo < 1e-4:
            break
        if f1 < f2:
            lo, x1, f1 = x1, x2, f2
            x2 = lo + invphi * (hi - lo)
            f2 = eof_of(x2)
        else:
            hi, x2, f2 = x2, x1, f1
            x1 = hi - invphi * (hi - lo)
            f1 = eof_of(x1)
    g_best = 0.5 * (lo + hi)
    value = eof_of(g_best)
    edge = eof_of(gain_max)
    if edge >= value:
        g_best, value = gain_max, edge
    eta_total = 10.0 ** (-cfg.attenuation_db_per_km * distance_km / 10.0)
    from .swap import auto_cutoff
    return {
        "experiment": cfg.kind,
        "distance_km": distance_km,
        "n_links": cfg.n_links,
        "chi": chi,
        "g": g_best,
        "eof": value,
        "eof_direct_infinite": eof_infinite_squeezing(eta_total),
        "cutoff": cfg.cutoff if cfg.cutoff is not None else auto_cutoff(chi),
        "converged": True,
    }


def baseline_point(cfg: ExperimentConfig, distance_km: float) -> dict:
    eta_total = 10.0 ** (-cfg.attenuation_db_per_km * distance_km / 10.0)
    direct = direct_transmission_key(distance_km, cfg.beta,
                                     attenuation_db_per_km=cfg.attenuation_db_per_km)
    return {
        "experiment": cfg.kind,
        "distance_km": distance_km,
        "eta_total": eta_total,
        "plob": plob(eta_total) if 0.0 < eta_total < 1.0 else None,
        "direct_key": direct.key,
        "direct_chi": direct.chi,
        "direct_hit_window_edge": direct.hit_window_edge,
        "eof_direct_infinite": eof_infinite_squeezing(eta_total),
    }


# -- experiment drivers -----------------------------------------------------------


def _pmap(fn, items, workers: int):
    if workers <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with Pool(processes=workers) as pool:
        return pool.map(fn, items)


def _keyrate_worker(args):
    cfg, d = args
    if cfg.chi is not None and cfg.g is not None:
        return rate_point(cfg, d, cfg.chi, cfg.g)
    opt = optimize(d, cfg.n_links, cfg)
    row = rate_point(cfg, d, opt.chi, opt.g)
    row["converged"] = opt.converged
    return row


def _bounds_worker(args):
    cfg, d = args
    chi = cfg.chi if cfg.chi is not None else 0.3
    g = cfg.g if cfg.g is not None else 6.0
    modes = ["upper", "lower"] + (["numeric"] if cfg.n_links == 2 else [])
    return [rate_point(cfg, d, chi, g, bound_mode=m) for m in modes]


def _eof_worker(args):
    cfg, d, gain_max = args
    return eof_point(cfg, d, gain_max)


def _baseline_worker(args):
    cfg, d = args
    return baseline_point(cfg, d)


def run(config: ExperimentConfig) -> int:
    """Run one experiment and write the CSV table plus its JSON sidecar."""
    kind = config.kind
    if kind in ("keyrate", "bounds", "eof", "baselines") and not config.distances_km:
        raise ConfigError("a distance grid is required (--distance-km)")
    for d in config.distances_km:
        if d < 0:
            raise ConfigError("distances must be >= 0")

    if kind == "keyrate":
        columns = RATE_COLUMNS
        rows = _pmap(_keyrate_worker,
                     [(config, d) for d in config.distances_km], config.workers)
    elif kind == "bounds":
        columns = RATE_COLUMNS
        nested = _pmap(_bounds_worker,
                       [(config, d) for d in config.distances_km], config.workers)
        rows = [row for group in nested for row in group]
    elif kind == "eof":
        columns = EOF_COLUMNS
        rows = _pmap(_eof_worker,
                     [(config, d, config.gain_max) for d in config.distances_km],
                     config.workers)
    elif kind == "baselines":
        columns = BASELINE_COLUMNS
        rows = _pmap(_baseline_worker,
                     [(config, d) for d in config.distances_km], config.workers)
    elif kind == "znp":
        columns = ZNP_COLUMNS
        rows = []
        rng = np.random.default_rng(config.seed)
        for n in (0, 1, 2, 3):
            for p in (0.01, 0.1, 0.5, 0.9):
                exact = z_steps(n, p)
                mc = simulate_z_steps(n, p, config.trials, rng)
                rows.append({
                    "experiment": kind, "n": n, "p": p, "z_exact": exact,
                    "z_montecarlo": mc, "rel_error": abs(mc - exact) / exact,
                    "trials": config.trials, "seed": config.seed,
                })
    elif kind == "optimize":
        columns = OPT_COLUMNS
        if len(config.distances_km) != 1:
            raise ConfigError("optimize takes exactly one --distance-km")
        d = config.distances_km[0]
        opt = optimize(d, config.n_links, config)
        rows = []
        for i, (chi, g, rate) in enumerate(opt.trace):
            rows.append({"experiment": kind, "distance_km": d,
                         "n_links": config.n_links, "stage": "trace",
                         "eval_index": i, "chi": chi, "g": g,
                         "gamma_max": opt.gamma_max, "lambda_a": (),
                         "lambda_b": (), "secret_key_rate": rate,
                         "converged": ""})
        rows.append({"experiment": kind, "distance_km": d,
                     "n_links": config.n_links, "stage": "best",
                     "eval_index": len(opt.trace), "chi": opt.chi, "g": opt.g,
                     "gamma_max": opt.gamma_max, "lambda_a": opt.lambda_a,
                     "lambda_b": opt.lambda_b, "secret_key_rate": opt.rate,
                     "converged": opt.converged})
    else:
        raise ConfigError(f"unknown experiment kind {kind!r}")

    _write_outputs(config, columns, rows)
    return 0


def _write_outputs(config: ExperimentConfig, columns, rows) -> None:
    out = Path(config.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    chash = config.content_hash()
    header = [
        f"# cvrepeater result table, schema {SCHEMA_VERSION}",
        f"# experiment: {config.kind}",
        f"# config_hash: {chash}",
        "# units: distances km, rates bits per channel use, eof ebits,",
        "#        covariances shot-noise units; multi-level cells are",
        "#        ';'-joined, first swapping round first",
        "# rates are Gaussian-CM-based bounds (Gaussian extremality)",
    ]
    lines = header + [",".join(columns)]
    for row in rows:
        lines.append(",".join(_fmt(row.get(col, "")) for col in columns))
    out.write_text("\n".join(lines) + "\n")
    sidecar = {
        "schema_version": SCHEMA_VERSION,
        "config": asdict(config),
        "config_hash": chash,
        "csv": out.name,
        "rows": len(rows),
    }
    out.with_suffix(out.suffix + ".json").write_text(
        json.dumps(sidecar, indent=2, sort_keys=True, default=str) + "\n")


# -- argument parsing ---------------------------------------------------------------


def _parse_distances(values: list[str]) -> tuple[float, ...]:
    """Accept repeated values and start:stop:step ranges (inclusive stop)."""
    out: list[float] = []
    for v in values:
        if ":" in v:
            parts = v.split(":")
            if len(parts) != 3:
                raise ConfigError(f"distance range must be start:stop:step, got {v!r}")
            start, stop, step = (float(p) for p in parts)
            if step <= 0:
                raise ConfigError("distance step must be > 0")
            n = int(math.floor((stop - start) / step + 1e-9)) + 1
            out.extend(start + k * step for k in range(max(n, 0)))
        else:
            out.append(float(v))
    return tuple(out)


def _load_config_file(path: str) -> dict:
    text = Path(path).read_bytes()
    if path.endswith(".json"):
        return json.loads(text)
    try:
        import tomllib as toml  # python >= 3.11
    except ModuleNotFoundError:
        import tomli as toml
    try:
        return toml.loads(text.decode())
    except toml.TOMLDecodeError:
        return json.loads(text)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cvrepeater",
        description="Quantum-scissor CV repeater: rates, bounds and baselines.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, doc in [
        ("eof", "entanglement of formation vs distance (gamma -> 0)"),
        ("keyrate", "secret key rate vs distance"),
        ("bounds", "upper/lower/numeric bound comparison"),
        ("baselines", "PLOB, optimized direct transmission, direct EOF"),
        ("znp", "expected-steps table vs Monte Carlo"),
        ("optimize", "parameter search at one distance"),
    ]:
        p = sub.add_parser(name, help=doc)
        p.add_argument("--links", type=int, default=2, choices=[2, 4, 8, 16])
        p.add_argument("--distance-km", action="append", default=[],
                       metavar="KM|START:STOP:STEP")
        p.add_argument("--chi", type=float, default=None)
        p.add_argument("--gain", type=float, default=None,
                       help="fix the scissor gain instead of optimizing")
        p.add_argument("--gain-max", type=float, default=20.0,
                       help="gain cap for eof optimization")
        p.add_argument("--gamma-max", action="append", type=float, default=None,
                       metavar="RADIUS", help="post-selection radius, repeat per round")
        p.add_argument("--beta", type=float, default=0.95)
        p.add_argument("--protocol", choices=["hom", "het"], default="hom")
        p.add_argument("--bound", choices=["numeric", "upper", "lower"],
                       default=None)
        p.add_argument("--cutoff", type=int, default=None)
        p.add_argument("--radial-nodes", type=int, default=32)
        p.add_argument("--workers", type=int,
                       default=int(os.environ.get(WORKERS_ENV, "1")))
        p.add_argument("--seed", type=int, default=2024)
        p.add_argument("--trials", type=int, default=1_000_000)
        p.add_argument("--out", type=str, default=None)
        p.add_argument("--config", type=str, default=None,
                       help="TOML or JSON file with the same keys")
    return parser


def config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    overrides = {}
    if args.config:
        overrides = _load_config_file(args.config)
    kind = args.command
    default_bound = "numeric" if args.links == 2 else "upper"
    cfg = ExperimentConfig(
        kind=kind,
        distances_km=_parse_distances(args.distance_km),
        n_links=args.links,
        chi=args.chi,
        g=args.gain,
        gain_max=args.gain_max,
        gamma_max=tuple(args.gamma_max) if args.gamma_max else None,
        beta=args.beta,
        protocol=args.protocol,
        bound_mode=args.bound or default_bound,
        cutoff=args.cutoff,
        radial_nodes=args.radial_nodes,
        workers=args.workers,
        seed=args.seed,
        trials=args.trials,
        out=args.out or f"{kind}.csv",
    )
    for key, value in overrides.items():
        if not hasattr(cfg, key):
            raise ConfigError(f"unknown config key {key!r}")
        if key in ("distances_km", "gamma_max") and value is not None:
            value = tuple(value)
        setattr(cfg, key, value)
    cfg.n_levels()            # validates n_links
    cfg.resolved_gamma_max()  # validates gamma list length / presets
    try:
        ChainConfig(n_levels=cfg.n_levels(), total_distance_km=0.0,
                    chi=cfg.chi if cfg.chi is not None else 0.3,
                    g=cfg.g if cfg.g is not None else 6.0,
                    gamma_max=cfg.resolved_gamma_max(), beta=cfg.beta,
                    protocol=cfg.protocol, bound_mode=cfg.bound_mode)
    except IntractableConfigError as exc:
        raise ConfigError(str(exc)) from exc
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = config_from_args(args)
        return run(cfg)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except (ConvergenceError, PhysicalityError) as exc:
        print(f"computation failed: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
