"""Seeded Monte Carlo engine for two-stage sensing experiments.

Runs full trials (sample signal, explore, re-allocate, exploit, estimate)
under each policy, aggregates mean losses and gains versus the analytic
uniform-sensing baseline, checks the concentration bound empirically, and
streams sweep tables over the SNR-budget grid to CSV with a JSON manifest.

Reproducibility contract: every trial's randomness comes from a seed derived
from (base_seed, r-index, trial-index), shared by all policies at that grid
point, so matched-seed policy comparisons are meaningful and results are
bit-identical for any worker count.  Aggregation always happens in trial-index
order.
"""

from __future__ import annotations

import json
import math
import multiprocessing
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__ as _pkg_version
from .bounds import ChernoffInputs, chernoff_exact, finite_n_probability, gain_lower_bound
from .model import BeliefState, ModelConfig
from .policies import (
    first_stage_asymptotic,
    first_stage_bound,
    first_stage_exact,
    nonadaptive_error,
    second_stage_optimal,
    second_stage_proportional,
)

__all__ = [
    "Policy",
    "ExperimentSpec",
    "TrialOutcome",
    "SummaryRow",
    "ExperimentSummary",
    "run_trial",
    "estimate_gain",
    "tail_check_lemma1",
    "sweep",
    "CSV_HEADER",
    "LAMBDA_CSV_HEADER",
]

CSV_HEADER = "policy,p,q,s,r_db,lambda,mean_error,std_error,gain_db,bound_gain_db,trials,seed"
LAMBDA_CSV_HEADER = (
    "p,q,s,r_db,lambda_exact,lambda_bound,lambda_asymptotic,"
    "exact_objective,exact_undetermined,bound_undetermined"
)

# Stream tags keeping the per-purpose seed substreams disjoint.
_TAG_LAMBDA = 1
_TAG_TRIAL = 2
_TAG_TAIL = 3

_TAIL_CHUNK = 128  # fixed chunk size keeps the tail check deterministic


class Policy(str, Enum):
    OPTIMAL_TWO_STAGE = "optimal_two_stage"
    SUBOPT_FIRST_STAGE = "subopt_first_stage"
    SUBOPT_SECOND_STAGE = "subopt_second_stage"
    LARGE_R_APPROX = "large_r_approx"
    NONADAPTIVE = "nonadaptive"
    ORACLE = "oracle"


@dataclass(frozen=True)
class ExperimentSpec:
    """Everything needed to reproduce one sweep bit for bit.

    r_grid holds the SNR-budget values (linear, not dB).  p_values / q_values
    optionally expand the sweep over several sparsity levels and loss
    exponents; when omitted the config's own p and q are used.
    """

    config: ModelConfig
    r_grid: tuple
    policies: tuple = (
        Policy.OPTIMAL_TWO_STAGE,
        Policy.SUBOPT_FIRST_STAGE,
        Policy.NONADAPTIVE,
        Policy.ORACLE,
    )
    trials: int = 2000
    base_seed: int = 0
    mc_samples_first_stage: int = 100
    bound_source: str = "auto"
    p_values: Optional[tuple] = None
    q_values: Optional[tuple] = None

    def __post_init__(self):
        object.__setattr__(self, "r_grid", tuple(float(r) for r in self.r_grid))
        object.__setattr__(self, "policies", tuple(Policy(p) for p in self.policies))
        if self.trials < 1:
            raise ValueError(f"trials must be >= 1, got {self.trials}")
        if len(self.r_grid) == 0:
            raise ValueError("r_grid must be nonempty")
        if any(r <= 0 for r in self.r_grid):
            raise ValueError("r_grid values must be positive")
        if self.mc_samples_first_stage < 1:
            raise ValueError(f"mc_samples_first_stage must be >= 1, got {self.mc_samples_first_stage}")
        if self.p_values is not None:
            object.__setattr__(self, "p_values", tuple(float(p) for p in self.p_values))
        if self.q_values is not None:
            object.__setattr__(self, "q_values", tuple(float(q) for q in self.q_values))

    def config_for(self, p: float, q: float, r: float) -> ModelConfig:
        base = self.config
        return ModelConfig(p=p, mu=base.mu, sigma2=base.sigma2,
                           nu2=base.sigma2 / r, n_dim=base.n_dim, q=q)


@dataclass(frozen=True)
class TrialOutcome:
    """One trial's realized loss over the true support, plus diagnostics.

    error is the primary readout, sum over the support of |estimate - x|**q;
    analytic_risk is the variance-reduced posterior form
    m_q * sum over the support of the final posterior sd**q.
    """

    error: float
    support_size: int
    lambda_used: float
    seed: int
    analytic_risk: float


def _trial_seed(base_seed: int, r_idx: int, trial_idx: int) -> int:
    seq = np.random.SeedSequence(entropy=(base_seed, _TAG_TRIAL, r_idx, trial_idx))
    return int(seq.generate_state(1, np.uint64)[0])


def run_trial(config: ModelConfig, policy: Policy, lambda_frac: float, seed) -> TrialOutcome:
    """One full two-stage trial under the given policy.

    Draws follow a fixed layout (support, amplitudes, stage-1 noise, stage-2
    noise) regardless of the policy, so different policies run on matched
    randomness when handed the same seed.  Components never observed keep
    their prior mean as the estimate.
    """
    if not 0.0 <= lambda_frac <= 1.0:
        raise ValueError(f"lambda_frac must be in [0, 1], got {lambda_frac}")
    policy = Policy(policy)
    n = config.n_dim
    p, mu, sigma2, nu2, q = config.p, config.mu, config.sigma2, config.nu2, config.q
    rng = np.random.default_rng(seed)
    u_support = rng.random(n)
    g_amp = rng.standard_normal(n)
    z1 = rng.standard_normal(n)
    z2 = rng.standard_normal(n)
    support = u_support < p
    x = np.where(support, mu + math.sqrt(sigma2) * g_amp, 0.0)

    from scipy.special import expit
    from .model import PROB_CEIL, PROB_FLOOR

    if 0.0 < p < 1.0:
        logit_p = math.log(p) - math.log1p(-p)
    else:
        logit_p = math.inf if p == 1.0 else -math.inf

    # Exploration stage: uniform effort, so all the posterior-update
    # constants are scalars.
    if lambda_frac > 0.0:
        v0 = nu2 / lambda_frac
        v1 = sigma2 + v0
        y1 = x + math.sqrt(v0) * z1
        llr = -0.5 * math.log(v1 / v0) - 0.5 * ((y1 - mu) ** 2 / v1 - y1 ** 2 / v0)
        probs = np.clip(expit(logit_p + llr), PROB_FLOOR, PROB_CEIL)
        shrink = lambda_frac * sigma2 / (nu2 + lambda_frac * sigma2)
        means = mu + shrink * (y1 - mu)
        var1 = nu2 * sigma2 / (nu2 + lambda_frac * sigma2)
        variances = np.full(n, var1)
    else:
        probs = np.full(n, p)
        means = np.full(n, mu)
        variances = np.full(n, sigma2)

    budget2 = n * (1.0 - lambda_frac)
    if policy is Policy.ORACLE:
        efforts2 = np.zeros(n)
        k = int(support.sum())
        if k > 0:
            efforts2[support] = budget2 / k
    elif policy is Policy.NONADAPTIVE:
        efforts2 = np.full(n, budget2 / n)
    else:
        state1 = BeliefState(probs, means, variances, budget2)
        if policy is Policy.SUBOPT_SECOND_STAGE:
            efforts2 = second_stage_proportional(state1, budget2, config.gamma).efforts
        else:
            efforts2 = second_stage_optimal(state1, budget2, q, nu2).efforts

    active = np.flatnonzero(efforts2 > 0)
    if active.size:
        lam = efforts2[active]
        v0a = nu2 / lam
        ya = x[active] + np.sqrt(v0a) * z2[active]
        va = variances[active]
        v1a = va + v0a
        llr = -0.5 * np.log(v1a / v0a) - 0.5 * ((ya - means[active]) ** 2 / v1a - ya ** 2 / v0a)
        with np.errstate(divide="ignore"):
            logit = np.log(probs[active]) - np.log1p(-probs[active])
        probs[active] = np.clip(expit(logit + llr), PROB_FLOOR, PROB_CEIL)
        denom = nu2 + lam * va
        means[active] = (nu2 * means[active] + lam * va * ya) / denom
        variances[active] = nu2 * va / denom

    err = float(np.sum(np.abs(means[support] - x[support]) ** q))
    risk = float(config.m_q * np.sum(variances[support] ** (q / 2.0)))
    seed_int = seed if isinstance(seed, (int, np.integer)) else -1
    return TrialOutcome(
        error=err,
        support_size=int(support.sum()),
        lambda_used=float(lambda_frac),
        seed=int(seed_int),
        analytic_risk=risk,
    )


@dataclass(frozen=True)
class SummaryRow:
    policy: str
    p: float
    q: float
    s: float
    r: float
    lambda_frac: float
    mean_error: float
    std_error: float
    gain_db: float
    bound_gain_db: float
    trials: int
    seed: int
    wall_time: float
    mean_analytic_risk: float
    lambda_undetermined: bool

    @property
    def r_db(self) -> float:
        return 10.0 * math.log10(self.r)

    def csv_fields(self) -> list:
        return [
            self.policy,
            repr(float(self.p)),
            repr(float(self.q)),
            repr(float(self.s)),
            repr(float(self.r_db)),
            repr(float(self.lambda_frac)),
            repr(float(self.mean_error)),
            repr(float(self.std_error)),
            repr(float(self.gain_db)),
            repr(float(self.bound_gain_db)),
            str(self.trials),
            str(self.seed),
        ]


@dataclass
class ExperimentSummary:
    spec: ExperimentSpec
    rows: list = field(default_factory=list)
    wall_time: float = 0.0

    def rows_for(self, policy, p: Optional[float] = None, q: Optional[float] = None) -> list:
        name = Policy(policy).value
        out = [row for row in self.rows if row.policy == name]
        if p is not None:
            out = [row for row in out if row.p == p]
        if q is not None:
            out = [row for row in out if row.q == q]
        return out

    def write_csv(self, fh) -> None:
        fh.write(CSV_HEADER + "\n")
        for row in self.rows:
            fh.write(",".join(row.csv_fields()) + "\n")


def _select_lambda(spec: ExperimentSpec, config: ModelConfig, policy: Policy, r_idx: int):
    """Per-policy first-stage fraction; deterministic given the spec."""
    if policy in (Policy.NONADAPTIVE, Policy.ORACLE):
        return 0.0, False
    if policy is Policy.SUBOPT_FIRST_STAGE:
        choice = first_stage_bound(config, spec.bound_source)
        return choice.lambda_frac, choice.undetermined
    if policy is Policy.LARGE_R_APPROX:
        choice = first_stage_asymptotic(config, "fixed_p")
        return choice.lambda_frac, False
    # optimal_two_stage and subopt_second_stage share the Monte Carlo sweep.
    seed_seq = np.random.SeedSequence(entropy=(spec.base_seed, _TAG_LAMBDA, r_idx))
    choice = first_stage_exact(
        config, mc_samples=spec.mc_samples_first_stage, seed=int(seed_seq.generate_state(1, np.uint64)[0])
    )
    return choice.lambda_frac, choice.undetermined


def _bound_gain_db(config: ModelConfig, source: str) -> float:
    src = source
    if src == "auto":
        src = "prop2" if config.q == 2.0 else "prop1"
    report = gain_lower_bound(config, src)
    return 10.0 * math.log10(report.gain_lower_bound)


def _point_task(args):
    """One (p, q, policy, r) grid point: pick lambda, run all trials, summarize."""
    spec, p, q, policy, r_idx = args
    r = spec.r_grid[r_idx]
    config = spec.config_for(p, q, r)
    start = time.perf_counter()
    lam, lam_undetermined = _select_lambda(spec, config, policy, r_idx)
    errors = np.empty(spec.trials)
    risks = np.empty(spec.trials)
    for t in range(spec.trials):
        outcome = run_trial(config, policy, lam, _trial_seed(spec.base_seed, r_idx, t))
        errors[t] = outcome.error
        risks[t] = outcome.analytic_risk
    mean_err = float(errors.mean())
    std_err = float(errors.std(ddof=1) / math.sqrt(spec.trials)) if spec.trials > 1 else float("nan")
    baseline = nonadaptive_error(config)
    gain_db = 10.0 * math.log10(baseline / mean_err) if mean_err > 0 else float("inf")
    bound_db = _bound_gain_db(config, spec.bound_source)
    return SummaryRow(
        policy=policy.value,
        p=p,
        q=q,
        s=config.s,
        r=r,
        lambda_frac=lam,
        mean_error=mean_err,
        std_error=std_err,
        gain_db=gain_db,
        bound_gain_db=bound_db,
        trials=spec.trials,
        seed=spec.base_seed,
        wall_time=time.perf_counter() - start,
        mean_analytic_risk=float(risks.mean()),
        lambda_undetermined=lam_undetermined,
    )


def _pq_pairs(spec: ExperimentSpec):
    ps = spec.p_values if spec.p_values is not None else (spec.config.p,)
    qs = spec.q_values if spec.q_values is not None else (spec.config.q,)
    return [(p, q) for p in ps for q in qs]


def estimate_gain(spec: ExperimentSpec, n_workers: int = 1, on_row=None) -> ExperimentSummary:
    """Run the policy-by-r grid and summarize mean losses and gains.

    The gain denominator is the analytic uniform-sensing loss, not the
    simulated one, which removes correlated ratio noise; the simulated
    uniform-sensing mean is still produced whenever the nonadaptive policy is
    in the roster.  Rows are produced in deterministic (p, q, policy, r)
    order whatever the worker count; on_row, when given, sees each row as it
    completes so partial results can be persisted.
    """
    tasks = [
        (spec, p, q, policy, r_idx)
        for (p, q) in _pq_pairs(spec)
        for policy in spec.policies
        for r_idx in range(len(spec.r_grid))
    ]
    start = time.perf_counter()
    summary = ExperimentSummary(spec=spec)
    if n_workers <= 1:
        results = map(_point_task, tasks)
        for row in results:
            summary.rows.append(row)
            if on_row is not None:
                on_row(row)
    else:
        with multiprocessing.get_context("fork").Pool(processes=n_workers) as pool:
            for row in pool.imap(_point_task, tasks, chunksize=1):
                summary.rows.append(row)
                if on_row is not None:
                    on_row(row)
    summary.wall_time = time.perf_counter() - start
    return summary


def tail_check_lemma1(config: ModelConfig, lambda_frac: float, epsilon: float,
                      trials: int, seed=0):
    """Empirical check of the concentration bound on the mean powered posterior.

    Simulates first-stage posteriors and counts how often the sample mean of
    p_i**gamma exceeds (1 + epsilon) times its expectation p**gamma * C, with
    the coefficient C from quadrature; returns (empirical_freq, bound_freq)
    where bound_freq = 1 - finite_n_probability(...).
    """
    if trials < 100:
        raise ValueError(f"trials must be >= 100, got {trials}")
    if not 0.0 < lambda_frac <= 1.0:
        raise ValueError(f"lambda_frac must be in (0, 1], got {lambda_frac}")
    if not epsilon > 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    p, gamma = config.p, config.gamma
    cp_gamma = chernoff_exact(ChernoffInputs.from_config(config, lambda_frac))
    cp_2gamma = None
    if gamma <= 0.5:
        cp_2gamma = chernoff_exact(
            ChernoffInputs.from_config(config, lambda_frac, gamma=2.0 * gamma)
        )
    threshold = (1.0 + epsilon) * p ** gamma * cp_gamma
    n = config.n_dim
    mu, sigma2, nu2 = config.mu, config.sigma2, config.nu2
    v0 = nu2 / lambda_frac
    v1 = sigma2 + v0
    if 0.0 < p < 1.0:
        logit_p = math.log(p) - math.log1p(-p)
    else:
        logit_p = math.inf if p == 1.0 else -math.inf
    log_ratio = 0.5 * math.log(v1 / v0)
    exceed = 0
    from scipy.special import expit

    for chunk_idx in range(0, trials, _TAIL_CHUNK):
        m = min(_TAIL_CHUNK, trials - chunk_idx)
        rng = np.random.default_rng(
            np.random.SeedSequence(entropy=(seed, _TAG_TAIL, chunk_idx))
        )
        present = rng.random((m, n)) < p
        amp = rng.standard_normal((m, n))
        z = rng.standard_normal((m, n))
        x = np.where(present, mu + math.sqrt(sigma2) * amp, 0.0)
        y = x + math.sqrt(v0) * z
        llr = -log_ratio - 0.5 * ((y - mu) ** 2 / v1 - y ** 2 / v0)
        probs = expit(logit_p + llr)
        stat = (probs ** gamma).mean(axis=1)
        exceed += int(np.sum(stat > threshold))
    empirical = exceed / trials
    bound = 1.0 - finite_n_probability(n, p, gamma, epsilon, cp_gamma, cp_2gamma)
    return empirical, bound


def _lambda_rows(spec: ExperimentSpec, p: float, q: float):
    """Per-r comparison of the three first-stage selectors at one (p, q)."""
    rows = []
    for r_idx, r in enumerate(spec.r_grid):
        config = spec.config_for(p, q, r)
        seed_seq = np.random.SeedSequence(entropy=(spec.base_seed, _TAG_LAMBDA, r_idx))
        exact = first_stage_exact(
            config, mc_samples=spec.mc_samples_first_stage,
            seed=int(seed_seq.generate_state(1, np.uint64)[0]),
        )
        bound = first_stage_bound(config, spec.bound_source)
        asym = first_stage_asymptotic(config, "fixed_p")
        rows.append({
            "p": p, "q": q, "s": config.s, "r": r,
            "lambda_exact": exact.lambda_frac,
            "lambda_bound": bound.lambda_frac,
            "lambda_asymptotic": asym.lambda_frac,
            "exact_objective": exact.objective_value,
            "exact_undetermined": exact.undetermined,
            "bound_undetermined": bound.undetermined,
        })
    return rows


def _lambda_rows_from_summary(summary_rows, p: float, q: float, spec: ExperimentSpec):
    """Assemble lambda-comparison rows reusing already-selected fractions."""
    by_r = {}
    for row in summary_rows:
        if row.p != p or row.q != q:
            continue
        entry = by_r.setdefault(row.r, {})
        if row.policy == Policy.OPTIMAL_TWO_STAGE.value:
            entry["lambda_exact"] = row.lambda_frac
            entry["exact_undetermined"] = row.lambda_undetermined
        elif row.policy == Policy.SUBOPT_FIRST_STAGE.value:
            entry["lambda_bound"] = row.lambda_frac
            entry["bound_undetermined"] = row.lambda_undetermined
    rows = []
    for r_idx, r in enumerate(spec.r_grid):
        entry = by_r.get(r, {})
        if "lambda_exact" not in entry or "lambda_bound" not in entry:
            return None
        config = spec.config_for(p, q, r)
        asym = first_stage_asymptotic(config, "fixed_p")
        rows.append({
            "p": p, "q": q, "s": config.s, "r": r,
            "lambda_exact": entry["lambda_exact"],
            "lambda_bound": entry["lambda_bound"],
            "lambda_asymptotic": asym.lambda_frac,
            "exact_objective": float("nan"),
            "exact_undetermined": entry.get("exact_undetermined", False),
            "bound_undetermined": entry.get("bound_undetermined", False),
        })
    return rows


def _lambda_csv_fields(row) -> list:
    return [
        repr(float(row["p"])),
        repr(float(row["q"])),
        repr(float(row["s"])),
        repr(10.0 * math.log10(row["r"])),
        repr(float(row["lambda_exact"])),
        repr(float(row["lambda_bound"])),
        repr(float(row["lambda_asymptotic"])),
        repr(float(row["exact_objective"])),
        str(bool(row["exact_undetermined"])).lower(),
        str(bool(row["bound_undetermined"])).lower(),
    ]


def _spec_manifest(spec: ExperimentSpec) -> dict:
    cfg = spec.config
    return {
        "config": {
            "p": cfg.p, "mu": cfg.mu, "sigma2": cfg.sigma2, "nu2": cfg.nu2,
            "n_dim": cfg.n_dim, "q": cfg.q,
        },
        "r_grid": list(spec.r_grid),
        "policies": [p.value for p in spec.policies],
        "trials": spec.trials,
        "base_seed": spec.base_seed,
        "mc_samples_first_stage": spec.mc_samples_first_stage,
        "bound_source": spec.bound_source,
        "p_values": list(spec.p_values) if spec.p_values is not None else None,
        "q_values": list(spec.q_values) if spec.q_values is not None else None,
    }


def sweep(spec: ExperimentSpec, out_path, n_workers: int = 1,
          include_gain: bool = True, include_lambda: bool = True,
          figures: bool = True) -> ExperimentSummary:
    """Full sweep over the r grid for every requested (p, q) pair.

    Streams gain rows to gains.csv as grid points complete, writes the
    first-stage selector comparison to lambda.csv, a manifest.json carrying
    the spec, package version and wall-clock timings, and (unless disabled)
    renders the corresponding figures next to the CSV output.  On failure the
    manifest records the partial state of whatever was written.
    """
    out_dir = Path(out_path)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "spec": _spec_manifest(spec),
        "version": _pkg_version,
        "workers": n_workers,
        "partial": True,
        "timings": {},
    }
    summary = ExperimentSummary(spec=spec)
    started = time.perf_counter()
    try:
        if include_gain:
            gains_path = out_dir / "gains.csv"
            with open(gains_path, "w", newline="") as fh:
                fh.write(CSV_HEADER + "\n")

                def _stream(row):
                    fh.write(",".join(row.csv_fields()) + "\n")
                    fh.flush()

                summary = estimate_gain(spec, n_workers=n_workers, on_row=_stream)
            manifest["timings"]["gain_sweep_s"] = summary.wall_time
        if include_lambda:
            t0 = time.perf_counter()
            lam_path = out_dir / "lambda.csv"
            with open(lam_path, "w", newline="") as fh:
                fh.write(LAMBDA_CSV_HEADER + "\n")
                for (p, q) in _pq_pairs(spec):
                    rows = None
                    if include_gain:
                        rows = _lambda_rows_from_summary(summary.rows, p, q, spec)
                    if rows is None:
                        rows = _lambda_rows(spec, p, q)
                    for row in rows:
                        fh.write(",".join(_lambda_csv_fields(row)) + "\n")
            manifest["timings"]["lambda_sweep_s"] = time.perf_counter() - t0
        if figures:
            from . import figures as _figures

            if include_gain and summary.rows:
                for (p, q) in _pq_pairs(spec):
                    rows = [r for r in summary.rows if r.p == p and r.q == q]
                    if rows:
                        _figures.render_gain_figure(
                            rows, out_dir / f"gain_p{p:g}_q{q:g}.png"
                        )
            if include_lambda and (out_dir / "lambda.csv").exists():
                _figures.render_lambda_csv(out_dir / "lambda.csv", out_dir)
        manifest["partial"] = False
    finally:
        manifest["timings"]["total_s"] = time.perf_counter() - started
        with open(out_dir / "manifest.json", "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return summary
