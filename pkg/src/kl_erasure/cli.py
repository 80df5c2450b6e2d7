"""Command-line front end.

Every subcommand writes its outputs under ``--out`` and embeds the resolved
configuration and its digest in the JSON report. Floats are written with
``repr`` (shortest round-trip form, at most 17 significant digits), so
reruns with the same configuration are byte-identical.

Exit codes: 0 success, 1 verification failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import json
import math
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path as FsPath

import numpy as np

from .chain_core import Distribution, PassiveRates, equilibrium, reliability_timescale
from .estimators import config_digest, mc_kl
from .kl_control import (
    LOG2,
    ClosedFormOptimal,
    Grid,
    Passive,
    controlled_marginal,
    cost_to_go,
    erasing_cost,
    expected_cost,
)
from .path_space import dump_paths, sample_paths
from .reversal import MC_FLOOR, MIN_CONCLUSIVE_SAMPLES, identity_residuals, verify_theorem1
from .thermo import free_energy, free_energy_gap, integrate_ledger, salamon_bound

CONFIG_SECTION = "run"
LEDGER_TOL = 1e-8
FREE_ENERGY_TOL = 1e-12


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    tau_e: float
    tau_r: float = 1.0
    k01: float | None = None
    k10: float | None = None
    samples: int = 100_000
    seed: int = 0
    steps: int = 12
    threads: int = 1
    out: str = "."
    kt: float = 1.0
    grid_points: int = 101
    ratios: str = "0.01,0.1,0.5,1,2,10"
    sigma: float = 1.0
    truncation: float = 0.2

    def __post_init__(self):
        for name in ("tau_e", "tau_r", "kt", "sigma"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise ConfigError(f"{name} must be positive and finite, got {v}")
        if (self.k01 is None) != (self.k10 is None):
            raise ConfigError("k01 and k10 must be given together")
        if self.samples < 1:
            raise ConfigError("samples must be >= 1")
        if self.steps < 1 or self.threads < 1 or self.grid_points < 2:
            raise ConfigError("steps and threads must be >= 1, grid_points >= 2")
        if not 0 < self.truncation < 1:
            raise ConfigError("truncation is a fraction of tau_e in (0, 1)")
        self.ratio_grid()

    @property
    def rates(self) -> PassiveRates:
        if self.k01 is not None:
            return PassiveRates(self.k01, self.k10)
        return PassiveRates.symmetric(self.tau_r)

    def ratio_grid(self) -> list[float]:
        try:
            grid = [float(x) for x in self.ratios.split(",") if x.strip()]
        except ValueError as exc:
            raise ConfigError(f"bad ratio grid {self.ratios!r}") from exc
        if not grid:
            raise ConfigError("ratio grid is empty")
        if any(not (math.isfinite(r) and r > 0) for r in grid):
            raise ConfigError("ratio grid values must be positive")
        return grid

    def as_dict(self) -> dict:
        return asdict(self)

    def computational(self) -> dict:
        """Everything that affects results; the output location does not."""
        d = self.as_dict()
        del d["out"]
        return d

    def to_ini(self) -> str:
        lines = [f"[{CONFIG_SECTION}]"]
        for f in fields(self):
            v = getattr(self, f.name)
            if v is not None:
                lines.append(f"{f.name} = {v!r}" if isinstance(v, float) else f"{f.name} = {v}")
        return "\n".join(lines) + "\n"


_TYPES = {
    "tau_e": float, "tau_r": float, "k01": float, "k10": float, "samples": int, "seed": int,
    "steps": int, "threads": int, "out": str, "kt": float, "grid_points": int, "ratios": str,
    "sigma": float, "truncation": float,
}


def _coerce(name: str, raw):
    try:
        return _TYPES[name](raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name}: cannot parse {raw!r}") from exc


def read_config_file(path: str) -> dict:
    parser = configparser.ConfigParser()
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not parser.has_section(CONFIG_SECTION):
        raise ConfigError(f"config {path} has no [{CONFIG_SECTION}] section")
    out = {}
    for key, raw in parser.items(CONFIG_SECTION):
        if key not in _TYPES:
            raise ConfigError(f"unknown config key {key!r}")
        out[key] = _coerce(key, raw)
    return out


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """File values, then command-line flags on top."""
    values = read_config_file(args.config) if args.config else {}
    for name in _TYPES:
        v = getattr(args, name, None)
        if v is not None:
            values[name] = v
    if "tau_e" not in values:
        raise ConfigError("tau_e is required (--tau-e or config file)")
    return RunConfig(**values)


# --------------------------------------------------------------------------
# output helpers


def _finite_or_none(x):
    x = float(x)
    return x if math.isfinite(x) else None


def _write_json(path: FsPath, payload: dict) -> None:
    path.write_text(json.dumps(payload, sort_keys=True, indent=1, allow_nan=False) + "\n")


def _report(config: RunConfig, body: dict) -> dict:
    cfg = config.computational()
    return {"config": cfg, "config_digest": config_digest(cfg), **body}


def _outdir(config: RunConfig) -> FsPath:
    out = FsPath(config.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _optimal(config: RunConfig) -> ClosedFormOptimal:
    return ClosedFormOptimal(config.rates, config.tau_e)


# --------------------------------------------------------------------------
# subcommands


def cmd_solve(config: RunConfig) -> dict:
    """Optimal protocol, cost-to-go and the controlled marginal on a grid."""
    rates = config.rates
    prot = _optimal(config)
    pi = equilibrium(rates)
    times = np.linspace(0.0, config.tau_e, config.grid_points)
    z = prot.z(times)
    u01, u10 = prot.rates(times)
    p0 = controlled_marginal(prot, pi, times)
    v = cost_to_go(prot.z, 0.0)
    body = {
        "cost_nats": expected_cost(prot.z, pi),
        "cost_kT": config.kt * expected_cost(prot.z, pi),
        "v0_0": _finite_or_none(v.v0),
        "v1_0": _finite_or_none(v.v1),
        "tau_r": reliability_timescale(rates),
        "z_grid": [[float(t), float(a), float(b)] for t, a, b in zip(times, z[0], z[1])],
        "protocol_grid": [
            [float(t), _finite_or_none(a), _finite_or_none(b)] for t, a, b in zip(times, u01, u10)
        ],
    }
    if rates.k01 == rates.k10:
        body["cost_closed_form"] = erasing_cost(reliability_timescale(rates), config.tau_e)
    report = _report(config, body)
    out = _outdir(config)
    _write_json(out / "solve.json", report)
    with open(out / "solve.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "u01", "u10", "p0", "p1"])
        for row in zip(times, u01, u10, p0, 1.0 - p0):
            w.writerow([repr(float(x)) for x in row])
    return report


def cmd_simulate(config: RunConfig) -> dict:
    """Sample optimal-protocol paths, dump them and estimate the KL cost."""
    rates = config.rates
    prot = _optimal(config)
    pi = equilibrium(rates)
    batch = sample_paths(prot, pi, config.samples, config.seed, config.threads)
    est = mc_kl(prot, Passive(rates, config.tau_e), pi, config.samples, config.seed, paths=batch)
    out = _outdir(config)
    with open(out / "paths.jsonl", "w") as fh:
        dump_paths(batch, fh)
    report = _report(
        config,
        {"mc_kl": est.mean, "mc_se": est.std_error, "n_samples": est.n_samples, "cost_nats": expected_cost(prot.z, pi)},
    )
    _write_json(out / "simulate.json", report)
    return report


def corrupt_reversal(kernels: np.ndarray) -> np.ndarray:
    """Negative-control hook: double the backward jump probabilities."""
    bad = kernels.copy()
    for a in (0, 1):
        bad[:, a, 1 - a] *= 2.0
        bad[:, a, a] = 1.0 - bad[:, a, 1 - a]
    return bad


def verification_protocols(config: RunConfig) -> list[tuple[str, object, Distribution]]:
    rates = config.rates
    pi = equilibrium(rates)
    return [
        ("passive_nonequilibrium", Passive(rates, config.tau_e), Distribution(0.9, 0.1)),
        ("quench", Grid.constant(4.0 * rates.k01, rates.k10, config.tau_e), pi),
        ("truncated_optimal", ClosedFormOptimal.truncated(rates, config.tau_e, config.truncation * config.tau_e), pi),
    ]


def cmd_verify(config: RunConfig, reversal_hook=None) -> dict:
    """Run the identity suite; ``report["failed"]`` names every failing term."""
    rates = config.rates
    pi = equilibrium(rates)
    checks = []
    inconclusive = []

    def check(name, value, tol, ok=None):
        passed = bool(value <= tol) if ok is None else bool(ok)
        checks.append({"name": name, "value": value, "tolerance": tol, "passed": passed})

    for name, prot, p in verification_protocols(config):
        h = prot.horizon / config.steps
        th = verify_theorem1(prot, rates, p, config.samples, config.seed, config.steps, config.threads)
        check(f"theorem1_discrete[{name}]", th.discrete_gap, th.discrete_tolerance)
        if th.mc_inconclusive:
            inconclusive.append(f"theorem1_mc[{name}]")
        else:
            check(f"theorem1_mc[{name}]", abs(th.mc_mean - th.ledger_S_tot), 3.0 * th.mc_std_error + MC_FLOOR)
        res = identity_residuals(prot, rates, p, h, config.steps, reversal_hook=reversal_hook)
        check(f"work_law[{name}]", res.work_law_residual, h)
        check(f"kl_cost_law[{name}]", res.kl_cost_law_residual, h)
        ledger = integrate_ledger(prot, rates, p)
        check(f"first_law[{name}]", ledger.first_law_residual, LEDGER_TOL)
        check(f"entropy_balance[{name}]", ledger.alternate_first_law_residual, LEDGER_TOL)

    ledger = integrate_ledger(_optimal(config), rates, pi)
    check("first_law[optimal]", ledger.first_law_residual, LEDGER_TOL)
    check("entropy_balance[optimal]", ledger.alternate_first_law_residual, LEDGER_TOL)

    p = Distribution(0.9, 0.1)
    gap = abs(free_energy(p, rates) - free_energy(pi, rates) - free_energy_gap(p, rates))
    check("free_energy_change", gap, FREE_ENERGY_TOL)

    prot = _optimal(config)
    cost = expected_cost(prot.z, pi)
    est = mc_kl(prot, Passive(rates, config.tau_e), pi, config.samples, config.seed, config.threads)
    if config.samples < MIN_CONCLUSIVE_SAMPLES:
        inconclusive.append("kl_cost_mc")
    else:
        check("kl_cost_mc", abs(est.mean - cost), 3.0 * est.std_error + MC_FLOOR)

    failed = [c["name"] for c in checks if not c["passed"]]
    report = _report(config, {"checks": checks, "inconclusive": inconclusive, "failed": failed, "passed": not failed})
    _write_json(_outdir(config) / "verify.json", report)
    return report


def sweep_rows(config: RunConfig) -> list[dict]:
    rows = []
    tau_r = config.tau_r
    rates = PassiveRates.symmetric(tau_r)
    pi = equilibrium(rates)
    for ratio in config.ratio_grid():
        tau_e = ratio * tau_r
        prot = ClosedFormOptimal(rates, tau_e)
        est = mc_kl(prot, Passive(rates, tau_e), pi, config.samples, config.seed, config.threads)
        try:
            bound = salamon_bound(tau_e, config.sigma)
        except ValueError:
            bound = math.nan
        rows.append(
            {
                "ratio": ratio,
                "cost_optimal": erasing_cost(tau_r, tau_e),
                "asymptote_half_log": 0.5 * math.log(2.0 * tau_r / tau_e),
                "floor_log2": LOG2,
                "salamon_bound": bound,
                "mc_estimate": est.mean,
                "mc_se": est.std_error,
            }
        )
    return rows


SWEEP_COLUMNS = ["ratio", "cost_optimal", "asymptote_half_log", "floor_log2", "salamon_bound", "mc_estimate", "mc_se"]


def cmd_sweep(config: RunConfig) -> dict:
    """Cost across ``tau_e / tau_r`` with asymptote, floor and comparison bound.

    The sweep uses symmetric rates from ``tau_r``.
    """
    rows = sweep_rows(config)
    out = _outdir(config)
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_COLUMNS)
        for r in rows:
            w.writerow([repr(float(r[c])) for c in SWEEP_COLUMNS])
    report = _report(config, {"rows": len(rows), "csv": "sweep.csv"})
    _write_json(out / "sweep.json", report)
    return report


def cmd_thermo_report(config: RunConfig) -> dict:
    """Thermodynamic ledger of the optimal erasure started at equilibrium."""
    rates = config.rates
    pi = equilibrium(rates)
    ledger = integrate_ledger(_optimal(config), rates, pi, times=np.linspace(0.0, config.tau_e, config.grid_points))
    out = _outdir(config)
    with open(out / "thermo.csv", "w", newline="") as fh:
        ledger.write_csv(fh, config.kt)
    totals = ledger.as_dict()
    energetic = ("delta_E", "W", "Q", "delta_F")
    body = {
        "ledger_nats": totals,
        "ledger_kT": {k: config.kt * totals[k] for k in energetic},
        "first_law_residual": ledger.first_law_residual,
        "entropy_balance_residual": ledger.alternate_first_law_residual,
        "kl_cost_nats": expected_cost(_optimal(config).z, pi),
        "landauer_nats": LOG2,
    }
    report = _report(config, body)
    _write_json(out / "thermo.json", report)
    return report


COMMANDS = {
    "solve": cmd_solve,
    "simulate": cmd_simulate,
    "verify": cmd_verify,
    "sweep": cmd_sweep,
    "thermo-report": cmd_thermo_report,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False, argument_default=None)
    g = common.add_argument_group("run configuration (flags override --config)")
    g.add_argument("--config", help="INI file with a [run] section using the keys below")
    g.add_argument("--tau-e", dest="tau_e", type=float, help="erasure horizon (required)")
    g.add_argument("--tau-r", dest="tau_r", type=float, help="reliability timescale; symmetric rates 1/(2 tau_r) (default 1.0)")
    g.add_argument("--k01", type=float, help="passive rate 0->1; overrides --tau-r together with --k10")
    g.add_argument("--k10", type=float, help="passive rate 1->0")
    g.add_argument("--samples", type=int, help="Monte Carlo paths (default 100000)")
    g.add_argument("--seed", type=int, help="RNG seed (default 0)")
    g.add_argument("--steps", type=int, help="clock ticks N for discrete checks (default 12)")
    g.add_argument("--threads", type=int, help="Monte Carlo worker threads (default 1)")
    g.add_argument("--out", help="output directory (default .)")
    g.add_argument("--kt", type=float, help="kT used to report energies (default 1.0)")
    g.add_argument("--grid-points", dest="grid_points", type=int, help="time grid size for CSV series (default 101)")
    g.add_argument("--ratios", help="comma-separated tau_e/tau_r grid for sweep (default 0.01,0.1,0.5,1,2,10)")
    g.add_argument("--sigma", type=float, help="heat conductivity for the finite-time comparison bound (default 1.0)")
    g.add_argument("--truncation", type=float, help="truncated-optimal cut as a fraction of tau_e (default 0.2)")
    parser = argparse.ArgumentParser(prog="kl-erasure", description="KL-optimal finite-time bit erasure.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        p = sub.add_parser(name, parents=[common], help=fn.__doc__.splitlines()[0])
        if name == "verify":
            p.add_argument("--corrupt-reversal", action="store_true", help=argparse.SUPPRESS)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = resolve_config(args)
    except (ConfigError, ValueError) as exc:
        parser.print_usage(sys.stderr)
        print(f"kl-erasure: error: {exc}", file=sys.stderr)
        return 2
    if args.command == "verify":
        report = cmd_verify(config, corrupt_reversal if args.corrupt_reversal else None)
        if report["inconclusive"]:
            print("statistically inconclusive: " + ", ".join(report["inconclusive"]), file=sys.stderr)
        if report["failed"]:
            print("verification failed: " + ", ".join(report["failed"]), file=sys.stderr)
            return 1
        return 0
    COMMANDS[args.command](config)
    return 0


if __name__ == "__main__":
    sys.exit(main())
