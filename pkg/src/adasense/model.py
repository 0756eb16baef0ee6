"""Bernoulli-Gaussian sparse signal model with effort-scaled Gaussian observations.

Signal components are independent: each is present with probability p and, when
present, has amplitude drawn from Normal(mu, sigma2).  Observing component i
with effort lam > 0 returns y_i = x_i + n_i / sqrt(lam) where n_i is
Normal(0, nu2) noise; a component with zero effort is not observed.  Beliefs
stay conjugate per component: a presence probability, a conditional amplitude
mean and variance, plus the remaining effort budget.

Everything here is a pure function of its inputs and an explicit seed, so
values can be shared read-only across concurrent workers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

__all__ = [
    "PROB_FLOOR",
    "PROB_CEIL",
    "BUDGET_RTOL",
    "ConstraintViolation",
    "ModelConfig",
    "SignalRealization",
    "Observation",
    "BeliefState",
    "gaussian_moment",
    "sample_signal",
    "observe",
    "likelihood_triple",
    "update_state",
    "log_normal_pdf",
]

# Posterior probabilities are clamped here after each update so that
# gamma-powers and logs taken downstream stay finite.
PROB_FLOOR = 1e-300
PROB_CEIL = 1.0 - 1e-16

# Relative slack for budget checks; absorbs float drift in effort sums.
BUDGET_RTOL = 1e-9


class ConstraintViolation(ValueError):
    """An effort allocation overdraws the remaining sensing budget."""


def gaussian_moment(q: float) -> float:
    """qth absolute moment of a standard normal variable.

    Closed form 2**(q/2) * Gamma((q+1)/2) / sqrt(pi), evaluated through
    log-gamma so large q cannot overflow intermediate factors.
    """
    if not q > 0:
        raise ValueError(f"q must be positive, got {q}")
    return math.exp(
        0.5 * q * math.log(2.0) + math.lgamma(0.5 * (q + 1.0)) - 0.5 * math.log(math.pi)
    )


@dataclass(frozen=True)
class ModelConfig:
    """Prior and budget parameters for one experiment.

    The total sensing budget is normalized to n_dim (one unit of effort per
    component), which folds the budget into the noise variance: nu2 is the
    noise variance after that rescaling.

    Fields:
        p: mean fraction of nonzero components, in [0, 1].
        mu: prior mean of a nonzero amplitude.
        sigma2: prior variance of a nonzero amplitude (> 0).
        nu2: observation noise variance at unit effort (> 0).
        n_dim: signal dimension N (>= 1).
        q: exponent of the estimation loss |xhat - x|**q (> 0).

    Derived:
        r: SNR-budget product sigma2 / nu2.
        s: prior certainty ratio mu**2 / sigma2.
        gamma: 2 / (q + 2), the exponent weighting posterior probabilities.
        m_q: qth absolute moment of a standard normal.
    """

    p: float
    mu: float
    sigma2: float
    nu2: float
    n_dim: int
    q: float

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise ValueError(f"p must be in [0, 1], got {self.p}")
        if not self.sigma2 > 0:
            raise ValueError(f"sigma2 must be positive, got {self.sigma2}")
        if not self.nu2 > 0:
            raise ValueError(f"nu2 must be positive, got {self.nu2}")
        if not (isinstance(self.n_dim, (int, np.integer)) and self.n_dim >= 1):
            raise ValueError(f"n_dim must be an integer >= 1, got {self.n_dim}")
        if not self.q > 0:
            raise ValueError(f"q must be positive, got {self.q}")

    @classmethod
    def from_snr(cls, p: float, q: float, s: float, r: float, n_dim: int,
                 sigma2: float = 1.0) -> "ModelConfig":
        """Build a config from the dimensionless knobs (p, q, s, r).

        Uses sigma2 as the amplitude scale: mu = sqrt(s * sigma2) and
        nu2 = sigma2 / r.
        """
        if not r > 0:
            raise ValueError(f"r must be positive, got {r}")
        if not s >= 0:
            raise ValueError(f"s must be nonnegative, got {s}")
        return cls(p=p, mu=math.sqrt(s * sigma2), sigma2=sigma2,
                   nu2=sigma2 / r, n_dim=int(n_dim), q=q)

    @property
    def r(self) -> float:
        return self.sigma2 / self.nu2

    @property
    def s(self) -> float:
        return self.mu ** 2 / self.sigma2

    @property
    def gamma(self) -> float:
        return 2.0 / (self.q + 2.0)

    @property
    def m_q(self) -> float:
        return gaussian_moment(self.q)


@dataclass(frozen=True)
class SignalRealization:
    """One draw of the sparse signal: support indicators and amplitudes."""

    support: np.ndarray   # bool, shape (N,)
    amplitudes: np.ndarray  # float, shape (N,); zero off support


@dataclass(frozen=True)
class Observation:
    """Noisy measurements; values hold NaN wherever observed_mask is False."""

    values: np.ndarray
    observed_mask: np.ndarray


@dataclass(frozen=True)
class BeliefState:
    """Per-component posterior triple plus the remaining effort budget."""

    probs: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    budget_remaining: float

    @classmethod
    def initial(cls, config: ModelConfig) -> "BeliefState":
        n = config.n_dim
        return cls(
            probs=np.full(n, config.p),
            means=np.full(n, config.mu),
            variances=np.full(n, config.sigma2),
            budget_remaining=float(n),
        )

    @property
    def n_dim(self) -> int:
        return self.probs.shape[0]


def sample_signal(config: ModelConfig, seed) -> SignalRealization:
    """Draw a signal realization.

    Amplitude normals are consumed for every component, so the random stream
    layout does not depend on the support realization.
    """
    rng = np.random.default_rng(seed)
    n = config.n_dim
    support = rng.random(n) < config.p
    gauss = rng.standard_normal(n)
    amplitudes = np.where(support, config.mu + math.sqrt(config.sigma2) * gauss, 0.0)
    return SignalRealization(support=support, amplitudes=amplitudes)


def _efforts_array(alloc, n: int) -> np.ndarray:
    """Accept an Allocation-like object or a bare array of efforts."""
    efforts = np.asarray(getattr(alloc, "efforts", alloc), dtype=float)
    if efforts.shape != (n,):
        raise ValueError(f"effort vector has shape {efforts.shape}, expected ({n},)")
    return efforts


def observe(signal: SignalRealization, alloc, nu2: float, seed) -> Observation:
    """Measure the signal under a per-component effort vector.

    Components with positive effort lam see y = x + n / sqrt(lam) with
    n ~ Normal(0, nu2); zero-effort components are masked out.  nu2 = 0 is
    allowed here (exact observations) for testing.
    """
    n = signal.amplitudes.shape[0]
    efforts = _efforts_array(alloc, n)
    if np.any(efforts < 0):
        raise ValueError("effort entries must be nonnegative")
    if nu2 < 0:
        raise ValueError(f"nu2 must be nonnegative, got {nu2}")
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal(n)
    mask = efforts > 0
    values = np.full(n, np.nan)
    with np.errstate(divide="ignore"):
        scale = np.where(mask, np.sqrt(nu2) / np.sqrt(np.where(mask, efforts, 1.0)), 0.0)
    values[mask] = signal.amplitudes[mask] + scale[mask] * noise[mask]
    return Observation(values=values, observed_mask=mask)


def log_normal_pdf(y, mean, var):
    """Log density of Normal(mean, var) at y; vectorized."""
    y = np.asarray(y, dtype=float)
    return -0.5 * (np.log(2.0 * math.pi * var) + (y - mean) ** 2 / var)


def likelihood_triple(prob, mean, var, effort, nu2, y, log=False):
    """Component likelihoods for one measurement taken with the given effort.

    Returns (f0, f1, fp):
        f0 = density of y when the component is absent, Normal(0, nu2/effort)
        f1 = density when present, Normal(mean, var + nu2/effort)
        fp = prob * f1 + (1 - prob) * f0
    computed in log space; pass log=True to get the log densities.
    """
    if not effort > 0:
        raise ValueError(f"effort must be positive, got {effort}; mask zero-effort components instead")
    if not var > 0:
        raise ValueError(f"var must be positive, got {var}")
    if not nu2 > 0:
        raise ValueError(f"nu2 must be positive, got {nu2}")
    if not 0.0 <= prob <= 1.0:
        raise ValueError(f"prob must be in [0, 1], got {prob}")
    v0 = nu2 / effort
    log_f0 = log_normal_pdf(y, 0.0, v0)
    log_f1 = log_normal_pdf(y, mean, var + v0)
    with np.errstate(divide="ignore"):
        log_fp = np.logaddexp(np.log(prob) + log_f1, np.log1p(-prob) + log_f0)
    if log:
        return log_f0, log_f1, log_fp
    return np.exp(log_f0), np.exp(log_f1), np.exp(log_fp)


def _posterior_probs(probs, log_f1, log_f0):
    """Presence-probability update in log-likelihood-ratio form.

    Written as logistic(logit(p) + log f1 - log f0) to avoid catastrophic
    cancellation when p is near 0 or 1.  Exact 0 and 1 are fixed points and
    pass through unclamped; everything else is clamped to
    [PROB_FLOOR, PROB_CEIL].
    """
    with np.errstate(divide="ignore"):
        logit = np.log(probs) - np.log1p(-probs)
    updated = expit(logit + log_f1 - log_f0)
    updated = np.clip(updated, PROB_FLOOR, PROB_CEIL)
    updated = np.where(probs == 0.0, 0.0, updated)
    updated = np.where(probs == 1.0, 1.0, updated)
    return updated


def update_state(state: BeliefState, alloc, obs: Observation, nu2: float) -> BeliefState:
    """One Bayesian refresh of the belief state after a measurement stage.

    Components with zero effort keep their posterior triple; the budget is
    decremented by the total effort spent.
    """
    n = state.n_dim
    efforts = _efforts_array(alloc, n)
    if np.any(efforts < 0):
        raise ValueError("effort entries must be nonnegative")
    spent = float(efforts.sum())
    if spent > state.budget_remaining * (1.0 + BUDGET_RTOL) + 1e-12:
        raise ConstraintViolation(
            f"stage spends {spent}, exceeding remaining budget {state.budget_remaining}"
        )
    active = (efforts > 0) & obs.observed_mask
    probs = state.probs.copy()
    means = state.means.copy()
    variances = state.variances.copy()
    if np.any(active):
        y = obs.values[active]
        lam = efforts[active]
        v0 = nu2 / lam
        log_f0 = log_normal_pdf(y, 0.0, v0)
        log_f1 = log_normal_pdf(y, means[active], variances[active] + v0)
        probs[active] = _posterior_probs(probs[active], log_f1, log_f0)
        denom = nu2 + lam * variances[active]
        means[active] = (nu2 * means[active] + lam * variances[active] * y) / denom
        variances[active] = nu2 * variances[active] / denom
    return BeliefState(
        probs=probs,
        means=means,
        variances=variances,
        budget_remaining=state.budget_remaining - spent,
    )
