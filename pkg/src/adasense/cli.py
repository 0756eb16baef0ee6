"""Command-line front door: bounds tables, Monte Carlo sweeps, checks.

Commands
    bounds        analytic gain bounds and detectability coefficients per r
    sweep-lambda  first-stage fraction comparison (Monte Carlo vs bound vs
                  closed form) per r
    sweep-gain    simulated policy gains per r with the analytic bound column
    tail-check    empirical validation of the concentration bound
    trial         one seeded trial with the full state trajectory printed

Exit codes: 0 success, 1 runtime/numerical failure (machine-readable JSON on
stderr), 2 usage or validation error.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .bounds import gain_lower_bound
from .harness import ExperimentSpec, Policy, sweep, tail_check_lemma1
from .model import BeliefState, ModelConfig, observe, sample_signal, update_state
from .policies import second_stage_optimal

BOUNDS_CSV_HEADER = (
    "p,q,s,r_db,lambda_star,c0,cp_exact,cp_prop1,cp_prop1_weak,cp_prop2,"
    "gain_bound_db,undetermined_lambda"
)

_DEFAULTS = {
    "p": 0.01,
    "q": 2.0,
    "s": 16.0,
    "n_dim": 10000,
    "trials": 2000,
    "seed": 0,
    "r_db_min": -20.0,
    "r_db_max": 40.0,
    "r_db_step": None,  # per-command: 1 dB for bounds, 3 dB for sweeps
    "mc_samples": 100,
    "workers": 1,
    "policies": "optimal_two_stage,subopt_first_stage,nonadaptive,oracle",
    "bound_source": "auto",
    "epsilon": 0.02,
    "lambda_frac": 0.5,
    "r_db": 0.0,
    "policy": "optimal_two_stage",
    "figures": True,
}


class UsageError(ValueError):
    """Invalid flag value or configuration field; maps to exit code 2."""


@dataclass
class CliConfig:
    command: str
    out_dir: Path
    config_path: Optional[Path]
    verbosity: int
    params: dict = field(default_factory=dict)


def _add_common(sp, r_step_default):
    sp.add_argument("--config", dest="config_path", type=Path, default=None,
                    help="JSON experiment file; explicit flags override its fields")
    sp.add_argument("--out-dir", type=Path, default=None,
                    help="output directory (default: ./out/<command>)")
    sp.add_argument("--p", type=float, default=None,
                    help="mean fraction of nonzero components, in [0, 1]")
    sp.add_argument("--q", type=float, default=None,
                    help="loss exponent |estimate - x|**q, > 0 (2 = squared error)")
    sp.add_argument("--s", type=float, default=None,
                    help="prior certainty ratio mu**2/sigma**2, dimensionless > 0")
    sp.add_argument("--n-dim", type=int, default=None,
                    help="signal dimension N, count >= 1")
    sp.add_argument("--seed", type=int, default=None,
                    help="base seed; all randomness derives from it")
    sp.add_argument("--r-db-min", type=float, default=None,
                    help="lowest SNR-budget product r, in dB (10 log10 r)")
    sp.add_argument("--r-db-max", type=float, default=None,
                    help="highest r, in dB")
    sp.add_argument("--r-db-step", type=float, default=None,
                    help=f"grid step in dB (default {r_step_default})")
    sp.add_argument("--bound-source", choices=("auto", "quadrature", "prop1", "prop2"),
                    default=None,
                    help="coefficient source for analytic bounds; auto = prop2 "
                         "for q=2, prop1 otherwise")
    sp.add_argument("--no-figures", action="store_true",
                    help="skip rendering PNG figures next to the CSV output")
    sp.add_argument("-v", "--verbose", action="count", default=0,
                    help="print progress while running")
    sp.set_defaults(r_step_default=r_step_default)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="adasense",
        description="Two-stage adaptive sensing: analytic gain bounds and "
                    "seeded Monte Carlo validation sweeps.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="command")

    sp = sub.add_parser("bounds", help="analytic bound table per r (no Monte Carlo)")
    _add_common(sp, 1.0)

    sp = sub.add_parser("sweep-lambda", help="first-stage fraction comparison per r")
    _add_common(sp, 3.0)
    sp.add_argument("--mc-samples", type=int, default=None,
                    help="Monte Carlo samples per fraction in the exact sweep, count")
    sp.add_argument("--workers", type=int, default=None,
                    help="worker processes; results do not depend on this")

    sp = sub.add_parser("sweep-gain", help="simulated policy gains per r")
    _add_common(sp, 3.0)
    sp.add_argument("--trials", type=int, default=None,
                    help="Monte Carlo trials per grid point, count")
    sp.add_argument("--mc-samples", type=int, default=None,
                    help="Monte Carlo samples per fraction in the exact sweep, count")
    sp.add_argument("--workers", type=int, default=None,
                    help="worker processes; results do not depend on this")
    sp.add_argument("--policies", type=str, default=None,
                    help="comma-separated subset of: "
                         + ",".join(p.value for p in Policy))

    sp = sub.add_parser("tail-check", help="empirical concentration-bound check")
    _add_common(sp, 3.0)
    sp.add_argument("--trials", type=int, default=None,
                    help="simulated exploration rounds, count >= 100")
    sp.add_argument("--epsilon", type=float, default=None,
                    help="relative exceedance margin, dimensionless > 0")
    sp.add_argument("--lambda-frac", type=float, default=None,
                    help="uniform first-stage effort per component, in (0, 1]")
    sp.add_argument("--r-db", type=float, default=None,
                    help="single r value, in dB")

    sp = sub.add_parser("trial", help="run one seeded trial and print the trajectory")
    _add_common(sp, 3.0)
    sp.add_argument("--policy", type=str, default=None,
                    help="one of: " + ",".join(p.value for p in Policy))
    sp.add_argument("--lambda-frac", type=float, default=None,
                    help="first-stage budget fraction, in [0, 1]")
    sp.add_argument("--r-db", type=float, default=None,
                    help="single r value, in dB")
    return parser


def _load_config_file(path: Optional[Path]) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            data = json.load(fh)
    except OSError as exc:
        raise UsageError(f"config file unreadable: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise UsageError("config file must hold a JSON object")
    return data


def _resolve(name, cli_value, file_values, command=None):
    if cli_value is not None:
        return cli_value
    if name in file_values:
        return file_values[name]
    if name == "r_db_step":
        return None  # filled from the per-command default later
    return _DEFAULTS[name]


_VALIDATORS = {
    "p": (lambda v: 0.0 <= v <= 1.0, "in [0, 1]"),
    "q": (lambda v: v > 0, "> 0"),
    "s": (lambda v: v > 0, "> 0"),
    "n_dim": (lambda v: int(v) >= 1, "an integer >= 1"),
    "trials": (lambda v: int(v) >= 1, "an integer >= 1"),
    "mc_samples": (lambda v: int(v) >= 1, "an integer >= 1"),
    "workers": (lambda v: int(v) >= 1, "an integer >= 1"),
    "epsilon": (lambda v: v > 0, "> 0"),
    "lambda_frac": (lambda v: 0.0 <= v <= 1.0, "in [0, 1]"),
    "r_db_step": (lambda v: v > 0, "> 0"),
}


def parse_and_validate(argv) -> CliConfig:
    """Parse argv into a validated CliConfig; raises UsageError on bad input."""
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        raise UsageError("missing command\n" + parser.format_usage())
    file_values = _load_config_file(args.config_path)
    params = {}
    known = set(_DEFAULTS)
    for key in file_values:
        if key not in known and key not in ("base_seed",):
            raise UsageError(f"unknown config field {key!r}")
    names = ["p", "q", "s", "n_dim", "seed", "r_db_min", "r_db_max", "r_db_step",
             "bound_source"]
    if args.command in ("sweep-gain",):
        names += ["trials", "mc_samples", "workers", "policies"]
    if args.command in ("sweep-lambda",):
        names += ["mc_samples", "workers"]
    if args.command == "tail-check":
        names += ["trials", "epsilon", "lambda_frac", "r_db"]
    if args.command == "trial":
        names += ["policy", "lambda_frac", "r_db"]
    for name in names:
        cli_value = getattr(args, name, None)
        if name == "seed" and cli_value is None and "base_seed" in file_values:
            cli_value = file_values["base_seed"]
        value = _resolve(name, cli_value, file_values)
        if name == "r_db_step" and value is None:
            value = args.r_step_default
        if name in _VALIDATORS:
            ok, expected = _VALIDATORS[name]
            try:
                valid = ok(value)
            except TypeError:
                valid = False
            if not valid:
                raise UsageError(f"parameter {name}={value!r} is invalid; expected {expected}")
        params[name] = value
    if params["r_db_min"] > params["r_db_max"]:
        raise UsageError("parameter r_db_min exceeds r_db_max")
    if params["bound_source"] not in ("auto", "quadrature", "prop1", "prop2"):
        raise UsageError(
            f"parameter bound_source={params['bound_source']!r} is invalid; "
            "expected auto, quadrature, prop1 or prop2"
        )
    if "policies" in params:
        tokens = params["policies"]
        if isinstance(tokens, str):
            tokens = [tok.strip() for tok in tokens.split(",") if tok.strip()]
        try:
            params["policies"] = tuple(Policy(tok) for tok in tokens)
        except ValueError as exc:
            raise UsageError(f"parameter policies is invalid: {exc}") from exc
    if "policy" in params:
        try:
            params["policy"] = Policy(params["policy"])
        except ValueError as exc:
            raise UsageError(f"parameter policy is invalid: {exc}") from exc
    params["figures"] = not getattr(args, "no_figures", False)
    out_dir = args.out_dir if args.out_dir is not None else Path("out") / args.command
    return CliConfig(
        command=args.command,
        out_dir=out_dir,
        config_path=args.config_path,
        verbosity=args.verbose,
        params=params,
    )


def _r_grid_db(params) -> list:
    lo, hi, step = params["r_db_min"], params["r_db_max"], params["r_db_step"]
    count = int(math.floor((hi - lo) / step + 1e-9)) + 1
    return [lo + i * step for i in range(count)]


def _write_manifest(out_dir: Path, cli: CliConfig, extra=None) -> None:
    manifest = {
        "command": cli.command,
        "version": __version__,
        "params": {
            key: (value.value if isinstance(value, Policy)
                  else [v.value for v in value] if isinstance(value, tuple)
                  else value)
            for key, value in cli.params.items()
        },
    }
    if extra:
        manifest.update(extra)
    with open(out_dir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _fmt(value) -> str:
    if value is None:
        return "nan"
    return repr(float(value))


def _cmd_bounds(cli: CliConfig) -> int:
    params = cli.params
    source = params["bound_source"]
    if source == "auto":
        source = "quadrature"
    out_dir = cli.out_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "bounds.csv"
    t0 = time.perf_counter()
    with open(csv_path, "w", newline="") as fh:
        fh.write(BOUNDS_CSV_HEADER + "\n")
        for r_db in _r_grid_db(params):
            r = 10.0 ** (r_db / 10.0)
            config = ModelConfig.from_snr(params["p"], params["q"], params["s"], r,
                                          params["n_dim"])
            report = gain_lower_bound(config, source)
            fields = [
                _fmt(params["p"]), _fmt(params["q"]), _fmt(params["s"]), _fmt(r_db),
                _fmt(report.maximizing_lambda), _fmt(report.c0), _fmt(report.cp_exact),
                _fmt(report.cp_upper_prop1), _fmt(report.cp_upper_prop1_weak),
                _fmt(report.cp_upper_prop2),
                _fmt(10.0 * math.log10(report.gain_lower_bound)),
                str(report.undetermined_lambda).lower(),
            ]
            fh.write(",".join(fields) + "\n")
            if cli.verbosity:
                print(f"bounds: r={r_db:+.1f} dB done")
    _write_manifest(out_dir, cli, {"timings": {"total_s": time.perf_counter() - t0},
                                   "source": source})
    if params["figures"]:
        from .figures import render_bounds_csv

        render_bounds_csv(csv_path, out_dir / "bounds.png")
    print(f"wrote {csv_path}")
    return 0


def _build_spec(cli: CliConfig) -> ExperimentSpec:
    params = cli.params
    r_grid = [10.0 ** (db / 10.0) for db in _r_grid_db(params)]
    config = ModelConfig.from_snr(params["p"], params["q"], params["s"], r_grid[0],
                                  params["n_dim"])
    return ExperimentSpec(
        config=config,
        r_grid=tuple(r_grid),
        policies=params.get("policies", _DEFAULTS_POLICIES),
        trials=params.get("trials", 1),
        base_seed=params["seed"],
        mc_samples_first_stage=params.get("mc_samples", _DEFAULTS["mc_samples"]),
        bound_source=params["bound_source"],
    )


_DEFAULTS_POLICIES = tuple(Policy(tok) for tok in _DEFAULTS["policies"].split(","))


def _cmd_sweep(cli: CliConfig, include_gain: bool, include_lambda: bool) -> int:
    spec = _build_spec(cli)
    workers = cli.params.get("workers", 1)
    cli.out_dir.mkdir(parents=True, exist_ok=True)
    summary = sweep(spec, cli.out_dir, n_workers=workers, include_gain=include_gain,
                    include_lambda=include_lambda, figures=cli.params["figures"])
    _write_manifest(cli.out_dir, cli, {
        "spec_wall_time_s": summary.wall_time,
        "rows": len(summary.rows),
    })
    for name in ("gains.csv", "lambda.csv"):
        if (cli.out_dir / name).exists():
            print(f"wrote {cli.out_dir / name}")
    return 0


def _cmd_tail_check(cli: CliConfig) -> int:
    params = cli.params
    r = 10.0 ** (params["r_db"] / 10.0)
    config = ModelConfig.from_snr(params["p"], params["q"], params["s"], r,
                                  params["n_dim"])
    empirical, bound = tail_check_lemma1(
        config, params["lambda_frac"], params["epsilon"], params["trials"],
        seed=params["seed"],
    )
    status = "PASS" if empirical <= bound else "FAIL"
    print(f"empirical exceedance frequency: {empirical:.6g}")
    print(f"bound exceedance frequency:     {bound:.6g}")
    print(f"tail-check: {status}")
    cli.out_dir.mkdir(parents=True, exist_ok=True)
    _write_manifest(cli.out_dir, cli, {
        "empirical_freq": empirical,
        "bound_freq": bound,
        "status": status,
    })
    return 0


def _state_line(label: str, state: BeliefState) -> str:
    return (
        f"{label}: budget={state.budget_remaining:.6g} "
        f"probs[min/mean/max]={state.probs.min():.3e}/{state.probs.mean():.3e}/{state.probs.max():.3e} "
        f"var[mean]={state.variances.mean():.3e}"
    )


def _cmd_trial(cli: CliConfig) -> int:
    params = cli.params
    r = 10.0 ** (params["r_db"] / 10.0)
    config = ModelConfig.from_snr(params["p"], params["q"], params["s"], r,
                                  params["n_dim"])
    policy = params["policy"]
    lam = params["lambda_frac"]
    seed = params["seed"]
    signal = sample_signal(config, seed)
    print(f"trial: policy={policy.value} lambda={lam} r_db={params['r_db']} seed={seed}")
    print(f"signal: support size={int(signal.support.sum())} of N={config.n_dim}")
    state = BeliefState.initial(config)
    print(_state_line("stage 0", state))
    n = config.n_dim
    if lam > 0:
        efforts1 = np.full(n, lam)
        obs1 = observe(signal, efforts1, config.nu2, seed + 1)
        state = update_state(state, efforts1, obs1, config.nu2)
        print(_state_line("stage 1", state))
    budget2 = n * (1.0 - lam)
    if policy is Policy.ORACLE:
        efforts2 = np.zeros(n)
        k = int(signal.support.sum())
        if k:
            efforts2[signal.support] = budget2 / k
    elif policy is Policy.NONADAPTIVE:
        efforts2 = np.full(n, budget2 / n)
    else:
        efforts2 = second_stage_optimal(state, budget2, config.q, config.nu2).efforts
    funded = int(np.sum(efforts2 > 0))
    print(f"stage 2 allocation: funded={funded} max_effort={efforts2.max():.6g}")
    if funded:
        obs2 = observe(signal, efforts2, config.nu2, seed + 2)
        state = update_state(state, efforts2, obs2, config.nu2)
    print(_state_line("stage 2", state))
    err = float(np.sum(np.abs(state.means[signal.support]
                              - signal.amplitudes[signal.support]) ** config.q))
    print(f"support loss sum |estimate - x|^q: {err:.6g}")
    return 0


def dispatch(cli: CliConfig) -> int:
    """Run the selected command; returns the process exit code."""
    if cli.command == "bounds":
        return _cmd_bounds(cli)
    if cli.command == "sweep-gain":
        return _cmd_sweep(cli, include_gain=True, include_lambda=False)
    if cli.command == "sweep-lambda":
        return _cmd_sweep(cli, include_gain=False, include_lambda=True)
    if cli.command == "tail-check":
        return _cmd_tail_check(cli)
    if cli.command == "trial":
        return _cmd_trial(cli)
    raise UsageError(f"unknown command {cli.command!r}")


def main(argv=None) -> int:
    try:
        cli = parse_and_validate(sys.argv[1:] if argv is None else argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:
        # argparse already printed its message (--help or usage error)
        return int(exc.code or 0)
    try:
        return dispatch(cli)
    except (ValueError, KeyError) as exc:
        if isinstance(exc, UsageError):
            print(f"error: {exc}", file=sys.stderr)
            return 2
        print(json.dumps({"error": str(exc), "type": type(exc).__name__}),
              file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(json.dumps({"error": str(exc), "type": type(exc).__name__}),
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
