"""Detectability coefficients and the analytic gain guarantees built on them.

The contrast between the signal-present likelihood f1 and the marginal mixture
fp of a first-stage measurement is summarized by the overlap integral

    C_p^gamma = integral of f1(y)**gamma * fp(y)**(1-gamma) dy,

which at gamma = 1/2 is the Bhattacharyya coefficient.  Everything depends on
the dimensionless knobs (p, r*lambda, s, gamma): in units of the prior
amplitude scale, f0 = Normal(0, 1/(r*lambda)) and
f1 = Normal(sqrt(s), 1 + 1/(r*lambda)).

This module provides the exact coefficient by adaptive quadrature, the
closed-form signal-vs-noise coefficient C_0^gamma, two computable upper bounds
on C_p^gamma (one using Gaussian CDF region probabilities, one CDF-free, plus
a tighter Bhattacharyya-only variant), the resulting lower bound on the
adaptation gain with its maximizing first-stage fraction, the finite-N
confidence expression, and the high-SNR / vanishing-sparsity expansions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Optional, Tuple

import numpy as np
from scipy.integrate import quad
from scipy.special import ndtr

from ._scalaropt import golden_section
from .model import ModelConfig

__all__ = [
    "NumericalError",
    "ChernoffInputs",
    "RegionBoundaries",
    "BoundReport",
    "chernoff_closed_form_c0",
    "chernoff_exact",
    "region_boundaries",
    "region_probs",
    "prop1_upper",
    "prop2_upper",
    "coefficient_at",
    "maximize_detectability",
    "gain_lower_bound",
    "j0_upper_bound",
    "finite_n_probability",
    "theorem2_rate",
    "theorem3_gain",
    "high_snr_constants",
    "vanishing_p_constant",
]

COEFFICIENT_SOURCES = ("quadrature", "prop1", "prop2")

# Scan resolution for the first-stage-fraction maximization; the golden-section
# pass afterwards refines to LAMBDA_TOL.
_LAMBDA_SCAN = 33
LAMBDA_TOL = 1e-6


class NumericalError(RuntimeError):
    """Quadrature failed to converge at the requested tolerance."""


@dataclass(frozen=True)
class ChernoffInputs:
    """Dimensionless inputs of the overlap coefficient.

    p: mixture weight of the signal-present component, in [0, 1].
    r: SNR-budget product (>= 0).
    lambda_frac: first-stage budget fraction, in [0, 1].
    s: prior certainty ratio (> 0).
    gamma: overlap exponent; (0, 1) for the coefficient proper, gamma = 1
        is accepted and gives the trivial value 1 (used as the doubled
        exponent of the concentration bound when gamma = 1/2).
    """

    p: float
    r: float
    lambda_frac: float
    s: float
    gamma: float

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise ValueError(f"p must be in [0, 1], got {self.p}")
        if not self.r >= 0.0:
            raise ValueError(f"r must be nonnegative, got {self.r}")
        if not 0.0 <= self.lambda_frac <= 1.0:
            raise ValueError(f"lambda_frac must be in [0, 1], got {self.lambda_frac}")
        if not self.s > 0.0:
            raise ValueError(f"s must be positive, got {self.s}")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError(f"gamma must be in (0, 1], got {self.gamma}")

    @classmethod
    def from_config(cls, config: ModelConfig, lambda_frac: float,
                    gamma: Optional[float] = None) -> "ChernoffInputs":
        return cls(p=config.p, r=config.r, lambda_frac=lambda_frac,
                   s=config.s, gamma=config.gamma if gamma is None else gamma)

    @property
    def t(self) -> float:
        """Effective first-stage SNR product r * lambda."""
        return self.r * self.lambda_frac

    @property
    def eta(self) -> float:
        """Prior log odds against signal presence, log((1-p)/p)."""
        if not 0.0 < self.p < 1.0:
            raise ValueError(f"eta requires p in (0, 1), got p={self.p}")
        return math.log1p(-self.p) - math.log(self.p)


def chernoff_closed_form_c0(inputs: ChernoffInputs) -> float:
    """Closed-form overlap of f1 with f0 alone (the p -> 0 coefficient).

    sqrt((1+t)**(1-gamma) / (1 + (1-gamma) t)) *
    exp(-gamma (1-gamma) s t / (2 (1 + (1-gamma) t)))  with t = r * lambda,
    evaluated in log space.
    """
    t = inputs.t
    g = inputs.gamma
    if t == 0.0:
        return 1.0
    log_val = 0.5 * ((1.0 - g) * math.log1p(t) - math.log1p((1.0 - g) * t))
    log_val -= g * (1.0 - g) * inputs.s * t / (2.0 * (1.0 + (1.0 - g) * t))
    return math.exp(log_val)


def _log_density_pieces(y, t, s):
    """Log densities of f1 = N(sqrt(s), 1+1/t) and f0 = N(0, 1/t) at y."""
    v0 = 1.0 / t
    v1 = 1.0 + v0
    mu = math.sqrt(s)
    log_f0 = -0.5 * (math.log(2.0 * math.pi * v0) + y * y / v0)
    log_f1 = -0.5 * (math.log(2.0 * math.pi * v1) + (y - mu) ** 2 / v1)
    return log_f0, log_f1


def chernoff_exact(inputs: ChernoffInputs, rel_tol: float = 1e-10) -> float:
    """Overlap coefficient by adaptive quadrature of exp(g*log f1 + (1-g)*log fp).

    Integrates over a window of 12 pooled standard deviations around both
    component means, split at the narrow noise-only bump so the two scales
    present at high SNR are each resolved.
    """
    if not 0.0 < rel_tol <= 1e-3:
        raise ValueError(f"rel_tol must be in (0, 1e-3], got {rel_tol}")
    p, g = inputs.p, inputs.gamma
    t = inputs.t
    if g == 1.0 or p == 1.0 or t == 0.0:
        # fp = f1, or the exponent removes fp, or no information was collected.
        return 1.0
    log_p = math.log(p) if p > 0 else -math.inf
    log_1mp = math.log1p(-p)

    def integrand(y):
        log_f0, log_f1 = _log_density_pieces(y, t, s=inputs.s)
        log_fp = np.logaddexp(log_p + log_f1, log_1mp + log_f0)
        return math.exp(g * log_f1 + (1.0 - g) * log_fp)

    sd0 = math.sqrt(1.0 / t)
    sd1 = math.sqrt(1.0 + 1.0 / t)
    mu = math.sqrt(inputs.s)
    wide = 12.0 * max(sd0, sd1)
    lo = min(0.0, mu) - wide
    hi = max(0.0, mu) + wide
    # Integrate the narrow bump around zero separately when it is much
    # tighter than the overall window.
    cuts = sorted({lo, hi, max(lo, -8.0 * sd0), min(hi, 8.0 * sd0)})
    total = 0.0
    err = 0.0
    for a, b in zip(cuts[:-1], cuts[1:]):
        if b <= a:
            continue
        val, est = quad(integrand, a, b, epsabs=1e-300, epsrel=rel_tol / 10.0, limit=400)
        total += val
        err += est
    if not math.isfinite(total) or total <= 0.0 or err > rel_tol * max(total, 1e-300):
        raise NumericalError(
            f"quadrature did not converge: value={total}, error={err}, "
            f"requested rel_tol={rel_tol}, inputs={inputs}"
        )
    if total > 1.0 + max(1e-8, 10.0 * rel_tol):
        raise NumericalError(f"quadrature exceeded 1 by more than tolerance: {total}")
    return min(total, 1.0)


@dataclass(frozen=True)
class RegionBoundaries:
    """Decision boundaries where p*f1 crosses (1-p)*f0, with standardizations.

    has_boundary is False when the crossing equation has no real root; then
    p*f1 > (1-p)*f0 on the whole line and the region probabilities degenerate
    to {0, 1}.  z-values come as (minus, plus) pairs standardized against f1,
    the geometric-mean density f01, and f0 respectively.
    """

    has_boundary: bool
    y_minus: float
    y_plus: float
    z1: Tuple[float, float]
    z01: Tuple[float, float]
    z0: Tuple[float, float]


def _z_values(t: float, s: float, gamma: float, eta: float):
    """Standardized boundary points; None when no real boundary exists."""
    arg = 1.0 + (2.0 * eta + math.log1p(t)) / s
    if arg < 0.0:
        return None
    root = math.sqrt(arg)
    sqrt1t = math.sqrt(1.0 + t)
    a = math.sqrt(s / t)
    z1 = (a * (-sqrt1t - root), a * (sqrt1t - root))
    b = math.sqrt(s * (1.0 + (1.0 - gamma) * t) / t)
    center = -sqrt1t / (1.0 + (1.0 - gamma) * t)
    z01 = (b * (center - root), b * (center + root))
    big = math.sqrt((1.0 + t) * arg)
    z0 = (a * (-1.0 - big), a * (1.0 - big))
    y_minus = math.sqrt(s) / t * (-1.0 - big)
    y_plus = math.sqrt(s) / t * (-1.0 + big)
    return z1, z01, z0, y_minus, y_plus


def region_boundaries(inputs: ChernoffInputs) -> RegionBoundaries:
    """Boundary points of the noise-dominant region and their z-scores."""
    t = inputs.t
    if not t > 0.0:
        raise ValueError("region boundaries require r * lambda > 0")
    vals = _z_values(t, inputs.s, inputs.gamma, inputs.eta)
    if vals is None:
        nan = float("nan")
        return RegionBoundaries(False, nan, nan, (nan, nan), (nan, nan), (nan, nan))
    z1, z01, z0, y_minus, y_plus = vals
    return RegionBoundaries(True, y_minus, y_plus, z1, z01, z0)


def region_probs(inputs: ChernoffInputs) -> Tuple[float, float, float]:
    """(P1 of the signal region, P01 of the noise region, P0 of the signal region).

    P1 and P0 are tail masses of f1 and f0 outside [y-, y+]; P01 is the mass
    of the geometric-mean density inside it.  With no real boundary the
    signal-present weight dominates everywhere and the triple is (1, 0, 1).
    """
    rb = region_boundaries(inputs)
    if not rb.has_boundary:
        return 1.0, 0.0, 1.0
    p1 = ndtr(rb.z1[1]) + ndtr(rb.z1[0])
    p01 = ndtr(rb.z01[1]) - ndtr(rb.z01[0])
    p0 = ndtr(rb.z0[1]) + ndtr(rb.z0[0])
    return float(p1), float(p01), float(p0)


def prop1_upper(inputs: ChernoffInputs, clip: bool = True) -> Tuple[float, float]:
    """Two computable upper bounds on the overlap coefficient.

    Returns (strong, weak).  The strong bound weighs the closed-form
    coefficient with Gaussian-CDF region probabilities; the weak one is
    p**(1-g) + (1-p)**(1-g) * C0 and needs no CDF.  Both are capped at the
    trivial bound 1 unless clip=False, which exposes the raw expressions.
    """
    p, g = inputs.p, inputs.gamma
    if not 0.0 < p < 1.0:
        raise ValueError(
            f"bounds require p in (0, 1), got {p}; use the closed form at p=0 "
            "and the trivial value 1 at p=1"
        )
    if not 0.0 < g < 1.0:
        raise ValueError(f"gamma must be in (0, 1), got {g}")
    c0 = chernoff_closed_form_c0(inputs)
    if inputs.t == 0.0:
        # No-information limits of the region probabilities: for p < 1/2 the
        # noise-weighted density dominates near the (diverging) boundaries,
        # for p > 1/2 the signal-weighted one does, and at even odds the
        # boundary z-scores vanish.
        if p < 0.5:
            p1, p01, p0 = 0.0, 1.0, 0.0
        elif p > 0.5:
            p1, p01, p0 = 1.0, 0.0, 1.0
        else:
            p1, p01, p0 = 0.5, 0.5, 0.5
    else:
        p1, p01, p0 = region_probs(inputs)
    strong = p ** (1.0 - g) * (1.0 - g + g * p1) + (1.0 - p) ** (1.0 - g) * (
        p01 * c0 + (1.0 - g) * ((1.0 - p) / p) ** g * p0
    )
    weak = p ** (1.0 - g) + (1.0 - p) ** (1.0 - g) * c0
    if clip:
        return min(strong, 1.0), min(weak, 1.0)
    return strong, weak


def prop2_upper(inputs: ChernoffInputs, clip: bool = True) -> float:
    """Bhattacharyya-only upper bound, tighter than prop1 at small r*lambda.

    Only valid at gamma = 1/2.  The region probabilities are evaluated with
    zero log odds (the crossing of f1 and f0 themselves).
    """
    p, g = inputs.p, inputs.gamma
    if g != 0.5:
        raise ValueError(f"this bound requires gamma = 1/2 (q = 2), got gamma={g}")
    if not 0.0 < p < 1.0:
        raise ValueError(f"bound requires p in (0, 1), got {p}")
    c0 = chernoff_closed_form_c0(inputs)
    t = inputs.t
    if t == 0.0:
        p1, p01 = 0.0, 1.0
    else:
        vals = _z_values(t, inputs.s, 0.5, eta=0.0)
        # With eta = 0 the square-root argument is always positive.
        z1, z01, _, _, _ = vals
        p1 = float(ndtr(z1[1]) + ndtr(z1[0]))
        p01 = float(ndtr(z01[1]) - ndtr(z01[0]))
    sp = math.sqrt(p)
    sq = math.sqrt(1.0 - p)
    denom = sp + sq
    cross = math.sqrt(p * (1.0 - p))
    value = (p + cross * p1) / denom + c0 * ((1.0 - p) + cross * p01) / denom
    if clip:
        return min(value, 1.0)
    return value


def coefficient_at(config: ModelConfig, lambda_frac: float, source: str) -> float:
    """Overlap coefficient (or its chosen upper bound) at one budget fraction."""
    inputs = ChernoffInputs.from_config(config, lambda_frac)
    if source == "quadrature":
        return chernoff_exact(inputs)
    if source == "prop1":
        return prop1_upper(inputs)[0]
    if source == "prop2":
        return prop2_upper(inputs)
    raise ValueError(f"unknown coefficient source {source!r}; expected one of {COEFFICIENT_SOURCES}")


def _gain_objective(config: ModelConfig, source: str, epsilon: float):
    """Objective F(lambda) = ((1+eps)**-1 * C**(-1/(1-g)) - 1) * (1 - lambda)."""
    g = config.gamma
    shrink = 1.0 / (1.0 + epsilon)

    def f(lam: float) -> float:
        c = coefficient_at(config, lam, source)
        return (shrink * c ** (-1.0 / (1.0 - g)) - 1.0) * (1.0 - lam)

    return f


def maximize_detectability(config: ModelConfig, source: str = "quadrature",
                           epsilon: float = 0.0):
    """Maximize the detectability payoff over the first-stage fraction.

    Coarse 33-point scan over [0, 1] followed by golden-section refinement to
    LAMBDA_TOL; the scan guards against the kink where a clipped bound
    saturates at 1.  Returns (lambda_star, payoff, undetermined); when the
    payoff is numerically flat at zero for every lambda (a bound stuck at the
    trivial value 1, or r = 0) the fraction is reported as 0 with
    undetermined=True rather than an arbitrary interior point.
    """
    if source not in COEFFICIENT_SOURCES:
        raise ValueError(f"unknown coefficient source {source!r}; expected one of {COEFFICIENT_SOURCES}")
    if config.q != 2.0 and source == "prop2":
        raise ValueError("prop2 coefficient source requires q = 2 (gamma = 1/2)")
    f = _gain_objective(config, source, epsilon)
    xs = np.linspace(0.0, 1.0, _LAMBDA_SCAN)
    fs = np.array([f(x) for x in xs])
    if np.all(fs <= 1e-12):
        # Payoff indistinguishable from zero everywhere: either the bound is
        # stuck at the trivial value 1 or r is effectively zero.
        return 0.0, 0.0, True
    i = int(np.argmax(fs))
    lo = xs[max(i - 1, 0)]
    hi = xs[min(i + 1, _LAMBDA_SCAN - 1)]
    lam, neg = golden_section(lambda x: -f(x), lo, hi, LAMBDA_TOL)
    if -neg < fs[i]:
        lam, neg = xs[i], -fs[i]
    return float(lam), float(-neg), False


@dataclass(frozen=True)
class BoundReport:
    """Detectability coefficients and the resulting gain guarantee at one r."""

    c0: float
    cp_exact: Optional[float]
    cp_upper_prop1: Optional[float]
    cp_upper_prop1_weak: Optional[float]
    cp_upper_prop2: Optional[float]
    region_probs: Optional[Tuple[float, float, float]]
    z_values: Optional[Tuple[Tuple[float, float], Tuple[float, float], Tuple[float, float]]]
    gain_lower_bound: float
    maximizing_lambda: float
    undetermined_lambda: bool
    source: str


def gain_lower_bound(config: ModelConfig, source: str = "quadrature") -> BoundReport:
    """Lower bound on the adaptation gain of the optimal two-stage policy.

    [1 + r/(r+1) * max over lambda of (C**(-1/(1-gamma)) - 1) (1-lambda)]**(q/2)
    with C supplied by the chosen source; an upper bound on the coefficient
    yields a valid (weaker) gain guarantee.
    """
    if not 0.0 < config.p < 1.0:
        raise ValueError(f"gain bound requires p in (0, 1), got {config.p}")
    lam, payoff, undetermined = maximize_detectability(config, source)
    r = config.r
    gain = (1.0 + r / (r + 1.0) * max(payoff, 0.0)) ** (config.q / 2.0)
    inputs = ChernoffInputs.from_config(config, lam)
    c0 = chernoff_closed_form_c0(inputs)
    cp_exact = chernoff_exact(inputs)
    prop1_strong, prop1_weak = prop1_upper(inputs)
    prop2 = prop2_upper(inputs) if config.gamma == 0.5 else None
    if inputs.t > 0.0:
        probs = region_probs(inputs)
        rb = region_boundaries(inputs)
        zvals = (rb.z1, rb.z01, rb.z0) if rb.has_boundary else None
    else:
        probs = None
        zvals = None
    return BoundReport(
        c0=c0,
        cp_exact=cp_exact,
        cp_upper_prop1=prop1_strong,
        cp_upper_prop1_weak=prop1_weak,
        cp_upper_prop2=prop2,
        region_probs=probs,
        z_values=zvals,
        gain_lower_bound=gain,
        maximizing_lambda=lam,
        undetermined_lambda=undetermined,
        source=source,
    )


def j0_upper_bound(config: ModelConfig, epsilon: float = 0.0,
                   source: str = "quadrature") -> float:
    """Upper bound on the mean error of the optimal two-stage policy.

    m_q sigma**q N p / [1 + r + r * max over lambda of
    ((1+epsilon)**-1 C**(-1/(1-gamma)) - 1)(1-lambda)]**(q/2).  epsilon = 0
    gives the large-N limit; epsilon > 0 is the finite-N form whose confidence
    level comes from finite_n_probability.
    """
    if epsilon < 0:
        raise ValueError(f"epsilon must be nonnegative, got {epsilon}")
    if not 0.0 < config.p < 1.0:
        raise ValueError(f"error bound requires p in (0, 1), got {config.p}")
    _, payoff, _ = maximize_detectability(config, source, epsilon=epsilon)
    r = config.r
    denom = (1.0 + r + r * max(payoff, 0.0)) ** (config.q / 2.0)
    numer = config.m_q * config.sigma2 ** (config.q / 2.0) * config.n_dim * config.p
    return numer / denom


def finite_n_probability(N: int, p: float, gamma: float, epsilon: float,
                         cp_gamma: float, cp_2gamma: Optional[float] = None) -> float:
    """Confidence that the sample mean of the gamma-powered posteriors stays
    below (1 + epsilon) times its expectation.

    Bernstein-type expression 1 - exp(-...) with the variance term depending
    on the exponent branch: for gamma <= 1/2 the coefficient at the doubled
    exponent (cp_2gamma) is required; for gamma > 1/2 the second moment is
    bounded through the first.  The result is clamped to [0, 1].
    """
    if not N >= 1:
        raise ValueError(f"N must be >= 1, got {N}")
    if not 0.0 < p <= 1.0:
        raise ValueError(f"p must be in (0, 1], got {p}")
    if not 0.0 < gamma < 1.0:
        raise ValueError(f"gamma must be in (0, 1), got {gamma}")
    if not epsilon > 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    if gamma <= 0.5:
        if cp_2gamma is None:
            raise ValueError("cp_2gamma is required when gamma <= 1/2")
        var_term = p ** gamma * max(cp_2gamma - cp_gamma ** 2, 0.0)
    else:
        var_term = p ** (1.0 - gamma) - p ** gamma * cp_gamma ** 2
    numer = cp_gamma ** 2 * N * p ** gamma * epsilon ** 2
    denom = 2.0 * (max(var_term, 0.0) + epsilon * cp_gamma / 3.0)
    prob = 1.0 - math.exp(-numer / denom)
    return min(max(prob, 0.0), 1.0)


def high_snr_constants(q: float) -> Tuple[float, float]:
    """(A1, A2): gain-deficit and fraction constants of the high-SNR expansion.

    A1(q) = (q+3) (q+2)**((q+2)/(2(q+3))) / (2 q**(q/(2(q+3))))
    A2(q) = (q+2)**((q+2)/(2(q+3))) / q**(3(q+2)/(2(q+3)))
    """
    if not q > 0:
        raise ValueError(f"q must be positive, got {q}")
    e1 = (q + 2.0) / (2.0 * (q + 3.0))
    a1 = (q + 3.0) * (q + 2.0) ** e1 / (2.0 * q ** (q / (2.0 * (q + 3.0))))
    a2 = (q + 2.0) ** e1 / q ** (3.0 * (q + 2.0) / (2.0 * (q + 3.0)))
    return a1, a2


class HighSnrRate(NamedTuple):
    gain_leading: float
    lambda_star: float
    a1: float
    a2: float
    lambda_clamped: bool


def theorem2_rate(config: ModelConfig) -> HighSnrRate:
    """Leading high-SNR behavior of the optimal gain and first-stage fraction.

    gain -> (1/p)**(q/2) * (1 - A1 (1-p)**((q+1)/(q+3)) p**(-q/(q+3))
            e**(-s/(q+3)) r**(-1/(q+3)))
    with the matching fraction lambda* = A2 p**(-q/(q+3)) (1-p)**(-2/(q+3))
    e**(-s/(q+3)) r**(-1/(q+3)), clamped to [0, 1] and flagged when clamping
    was needed (r too small for the expansion to give a feasible fraction).
    """
    p, q, s, r = config.p, config.q, config.s, config.r
    if not 0.0 < p < 1.0:
        raise ValueError(f"rate requires p in (0, 1), got {p}")
    a1, a2 = high_snr_constants(q)
    decay = math.exp(-s / (q + 3.0)) * r ** (-1.0 / (q + 3.0))
    lam_raw = a2 * p ** (-q / (q + 3.0)) * (1.0 - p) ** (-2.0 / (q + 3.0)) * decay
    clamped = lam_raw > 1.0
    lam = min(max(lam_raw, 0.0), 1.0)
    deficit = a1 * (1.0 - p) ** ((q + 1.0) / (q + 3.0)) * p ** (-q / (q + 3.0)) * decay
    gain = (1.0 / p) ** (q / 2.0) * (1.0 - deficit)
    return HighSnrRate(gain, lam, a1, a2, clamped)


def vanishing_p_constant(q: float) -> float:
    """Prefactor of the sqrt(r) gain growth in the vanishing-sparsity regime.

    q**((3q+2)/4) / ((q+2)**((q+2)/4) (q+1)**((q+1)/2))
    """
    if not q > 0:
        raise ValueError(f"q must be positive, got {q}")
    return q ** ((3.0 * q + 2.0) / 4.0) / (
        (q + 2.0) ** ((q + 2.0) / 4.0) * (q + 1.0) ** ((q + 1.0) / 2.0)
    )


def theorem3_gain(config: ModelConfig, regime: str) -> float:
    """Asymptotic gain in the vanishing-sparsity regime (p -> 0, N p -> infinity).

    regime="low_r":  1 + (1-gamma) s r**2 / 8   (optimal fraction tends to 1/2)
    regime="high_r": C3(q) e**(s/2) sqrt(r)     (optimal fraction tends to 1/(q+1))
    """
    s, r, g, q = config.s, config.r, config.gamma, config.q
    if regime == "low_r":
        return 1.0 + (1.0 - g) * s * r ** 2 / 8.0
    if regime == "high_r":
        return vanishing_p_constant(q) * math.exp(s / 2.0) * math.sqrt(r)
    raise ValueError(f"unknown regime {regime!r}; expected 'low_r' or 'high_r'")
