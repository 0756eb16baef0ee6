"""Two-stage adaptive sensing for sparse signals.

A library and CLI for allocating a sensing budget between an exploratory
uniform first stage and a posterior-driven second stage, together with the
analytic detectability bounds that certify the resulting gain over
non-adaptive sensing and a seeded Monte Carlo harness that validates them.
"""

__version__ = "0.1.0"

from .model import (
    BeliefState,
    ConstraintViolation,
    ModelConfig,
    Observation,
    SignalRealization,
    gaussian_moment,
    likelihood_triple,
    observe,
    sample_signal,
    update_state,
)
from .policies import (
    Allocation,
    FirstStageChoice,
    first_stage_asymptotic,
    first_stage_bound,
    first_stage_exact,
    nonadaptive_error,
    oracle_gain_bound,
    oracle_policy_error,
    second_stage_optimal,
    second_stage_proportional,
    stage_cost,
)
from .bounds import (
    BoundReport,
    ChernoffInputs,
    NumericalError,
    RegionBoundaries,
    chernoff_closed_form_c0,
    chernoff_exact,
    finite_n_probability,
    gain_lower_bound,
    j0_upper_bound,
    prop1_upper,
    prop2_upper,
    region_boundaries,
    theorem2_rate,
    theorem3_gain,
)
from .harness import (
    ExperimentSpec,
    ExperimentSummary,
    Policy,
    TrialOutcome,
    estimate_gain,
    run_trial,
    sweep,
    tail_check_lemma1,
)

__all__ = [
    "__version__",
    "BeliefState", "ConstraintViolation", "ModelConfig", "Observation",
    "SignalRealization", "gaussian_moment", "likelihood_triple", "observe",
    "sample_signal", "update_state",
    "Allocation", "FirstStageChoice", "first_stage_asymptotic",
    "first_stage_bound", "first_stage_exact", "nonadaptive_error",
    "oracle_gain_bound", "oracle_policy_error", "second_stage_optimal",
    "second_stage_proportional", "stage_cost",
    "BoundReport", "ChernoffInputs", "NumericalError", "RegionBoundaries",
    "chernoff_closed_form_c0", "chernoff_exact", "finite_n_probability",
    "gain_lower_bound", "j0_upper_bound", "prop1_upper", "prop2_upper",
    "region_boundaries", "theorem2_rate", "theorem3_gain",
    "ExperimentSpec", "ExperimentSummary", "Policy", "TrialOutcome",
    "estimate_gain", "run_trial", "sweep", "tail_check_lemma1",
]
