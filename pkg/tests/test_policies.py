"""Tests for the allocation policies and the first-stage fraction selectors."""

import math

import numpy as np
import pytest

from adasense.bounds import high_snr_constants
from adasense.model import BeliefState, ModelConfig, gaussian_moment, sample_signal
from adasense.policies import (
    Allocation,
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


def _state(probs, variances, budget=10.0):
    probs = np.asarray(probs, dtype=float)
    variances = np.asarray(variances, dtype=float)
    return BeliefState(probs=probs, means=np.zeros_like(probs), variances=variances,
                       budget_remaining=budget)


def _random_state(rng, n):
    return _state(
        rng.random(n),
        10.0 ** rng.uniform(-2, 1, n),
        budget=float(10.0 ** rng.uniform(-1, 2)),
    )


def _project_to_budget(vec, budget):
    """Euclidean projection onto the scaled simplex {v >= 0, sum v = budget}."""
    vec = np.asarray(vec, dtype=float)
    u = np.sort(vec)[::-1]
    css = np.cumsum(u) - budget
    idx = np.arange(1, vec.size + 1)
    cond = u - css / idx > 0
    rho = idx[cond][-1]
    theta = css[cond][-1] / rho
    return np.maximum(vec - theta, 0.0)


def _pgd_best_cost(state, budget, q, nu2, n_starts=50, iters=400, seed=0):
    """Projected gradient descent oracle from many random feasible starts."""
    rng = np.random.default_rng(seed)
    n = state.n_dim
    c = nu2 / state.variances
    p = state.probs

    def cost(lam):
        return float(nu2 ** (q / 2.0) * gaussian_moment(q) * np.sum(p / (c + lam) ** (q / 2.0)))

    best = math.inf
    for _ in range(n_starts):
        lam = rng.dirichlet(np.ones(n)) * budget
        step = budget / n + 1e-3
        prev = cost(lam)
        for _ in range(iters):
            grad = -(q / 2.0) * p / (c + lam) ** (q / 2.0 + 1.0)
            trial = _project_to_budget(lam - step * grad, budget)
            new = cost(trial)
            if new <= prev:
                lam, prev = trial, new
                step *= 1.2
            else:
                step *= 0.5
                if step < 1e-14 * budget:
                    break
        best = min(best, prev)
    return best


class TestSecondStageOptimal:
    def test_two_component_rank_cutoff(self):
        # keys sqrt(0.81)*1=0.9 and sqrt(0.01)*1=0.1; first breakpoint at 8,
        # so a budget of 5 funds only the strong component
        st = _state([0.81, 0.01], [1.0, 1.0], budget=5.0)
        alloc = second_stage_optimal(st, 5.0, q=2.0, nu2=1.0)
        np.testing.assert_allclose(alloc.efforts, [5.0, 0.0], atol=1e-12)

    def test_symmetric_state_splits_evenly(self):
        st = _state(np.full(8, 0.3), np.full(8, 2.0), budget=4.0)
        alloc = second_stage_optimal(st, 4.0, q=1.0, nu2=0.7)
        np.testing.assert_allclose(alloc.efforts, 0.5, rtol=1e-12)

    def test_zero_budget_allocates_nothing(self):
        st = _state([0.5, 0.1], [1.0, 1.0])
        alloc = second_stage_optimal(st, 0.0, q=2.0, nu2=1.0)
        assert np.all(alloc.efforts == 0.0)

    def test_negative_budget_rejected(self):
        st = _state([0.5, 0.1], [1.0, 1.0])
        with pytest.raises(ValueError):
            second_stage_optimal(st, -1.0, q=2.0, nu2=1.0)

    def test_budget_conservation_fuzz(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            st = _random_state(rng, int(rng.integers(1, 30)))
            budget = st.budget_remaining
            alloc = second_stage_optimal(st, budget, q=float(rng.choice([0.5, 1, 2, 4])),
                                         nu2=float(10 ** rng.uniform(-2, 1)))
            assert abs(alloc.efforts.sum() - budget) <= 1e-9 * budget
            assert np.all(alloc.efforts >= 0.0)

    def test_kkt_structure(self):
        # funded components share the multiplier; unfunded keys lie below the
        # funded minimum key
        rng = np.random.default_rng(3)
        for _ in range(50):
            n = int(rng.integers(2, 20))
            st = _random_state(rng, n)
            q = float(rng.choice([1.0, 2.0, 3.0]))
            nu2 = float(10 ** rng.uniform(-1, 1))
            gamma = 2.0 / (q + 2.0)
            alloc = second_stage_optimal(st, st.budget_remaining, q, nu2)
            funded = alloc.efforts > 1e-12 * st.budget_remaining / n
            if not funded.any():
                continue
            mult = (alloc.efforts[funded] + nu2 / st.variances[funded]) / st.probs[funded] ** gamma
            np.testing.assert_allclose(mult, mult.mean(), rtol=1e-6)
            keys = st.probs ** gamma * st.variances
            if (~funded).any():
                assert keys[~funded].max() <= keys[funded].min() * (1 + 1e-9)

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(11)
        st = _random_state(rng, 12)
        q, nu2 = 2.0, 0.5
        base = second_stage_optimal(st, st.budget_remaining, q, nu2).efforts
        perm = rng.permutation(12)
        st_perm = BeliefState(st.probs[perm], st.means[perm], st.variances[perm],
                              st.budget_remaining)
        permuted = second_stage_optimal(st_perm, st.budget_remaining, q, nu2).efforts
        np.testing.assert_allclose(permuted, base[perm], rtol=1e-12, atol=1e-15)

    def test_beats_random_feasible_allocations(self):
        rng = np.random.default_rng(19)
        for _ in range(10):
            n = int(rng.integers(2, 17))
            st = _random_state(rng, n)
            q = float(rng.choice([1.0, 2.0]))
            nu2 = float(10 ** rng.uniform(-1, 1))
            budget = st.budget_remaining
            alloc = second_stage_optimal(st, budget, q, nu2)
            c_opt = stage_cost(st, alloc, q, nu2)
            for _ in range(1000):
                rand = rng.dirichlet(np.ones(n)) * budget
                assert c_opt <= stage_cost(st, rand, q, nu2) * (1 + 1e-9)

    def test_matches_projected_gradient_oracle(self):
        rng = np.random.default_rng(23)
        for _ in range(50):
            n = int(rng.integers(2, 13))
            st = _random_state(rng, n)
            q = float(rng.choice([1.0, 2.0, 4.0]))
            nu2 = float(10 ** rng.uniform(-1, 1))
            budget = st.budget_remaining
            mine = stage_cost(st, second_stage_optimal(st, budget, q, nu2), q, nu2)
            oracle = _pgd_best_cost(st, budget, q, nu2, n_starts=10, seed=rng.integers(2**31))
            assert mine <= oracle * (1 + 1e-8)

    def test_uniform_and_general_paths_agree(self):
        # states with equal variances take a sort-only fast path; it must
        # match the generic ranked path
        rng = np.random.default_rng(31)
        for _ in range(20):
            n = int(rng.integers(2, 40))
            probs = rng.random(n)
            var = float(10 ** rng.uniform(-2, 1))
            budget = float(10 ** rng.uniform(-1, 2))
            st_uniform = _state(probs, np.full(n, var), budget)
            st_jitter = _state(probs, np.full(n, var) * (1 + 1e-13 * np.arange(1, n + 1)), budget)
            q = float(rng.choice([1.0, 2.0]))
            a = second_stage_optimal(st_uniform, budget, q, 0.5).efforts
            b = second_stage_optimal(st_jitter, budget, q, 0.5).efforts
            np.testing.assert_allclose(a, b, rtol=1e-6, atol=1e-12 * budget)


class TestSecondStageProportional:
    def test_two_component_example(self):
        st = _state([0.25, 0.01], [1.0, 1.0], budget=6.0)
        alloc = second_stage_proportional(st, 6.0, gamma=0.5)
        np.testing.assert_allclose(alloc.efforts, [5.0, 1.0], rtol=1e-12)

    def test_equal_posteriors_split_evenly(self):
        st = _state(np.full(5, 0.2), np.ones(5), budget=10.0)
        alloc = second_stage_proportional(st, 10.0, gamma=0.5)
        np.testing.assert_allclose(alloc.efforts, 2.0, rtol=1e-12)

    def test_all_zero_posteriors_rejected(self):
        st = _state(np.zeros(4), np.ones(4))
        with pytest.raises(ValueError):
            second_stage_proportional(st, 1.0, gamma=0.5)

    def test_never_beats_optimal(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            n = int(rng.integers(2, 20))
            st = _random_state(rng, n)
            q = float(rng.choice([1.0, 2.0]))
            nu2 = float(10 ** rng.uniform(-1, 1))
            gamma = 2.0 / (q + 2.0)
            budget = st.budget_remaining
            c_prop = stage_cost(st, second_stage_proportional(st, budget, gamma), q, nu2)
            c_opt = stage_cost(st, second_stage_optimal(st, budget, q, nu2), q, nu2)
            assert c_opt <= c_prop * (1 + 1e-9)

    def test_equals_optimal_when_nothing_thresholded(self):
        # symmetric state: the ranked solution funds everything and the two
        # rules coincide
        st = _state(np.full(6, 0.4), np.ones(6), budget=12.0)
        a = second_stage_proportional(st, 12.0, gamma=0.5).efforts
        b = second_stage_optimal(st, 12.0, q=2.0, nu2=1.0).efforts
        np.testing.assert_allclose(a, b, rtol=1e-12)


class TestStageCost:
    def test_zero_posteriors_zero_cost(self):
        st = _state(np.zeros(3), np.ones(3))
        assert stage_cost(st, np.ones(3), q=2.0, nu2=1.0) == 0.0

    def test_uniform_full_budget_matches_baseline(self):
        # spreading the whole normalized budget uniformly from the prior state
        # reproduces the non-adaptive loss formula
        cfg = ModelConfig.from_snr(p=0.1, q=2.0, s=16.0, r=3.0, n_dim=100)
        st = BeliefState.initial(cfg)
        cost = stage_cost(st, np.ones(100), cfg.q, cfg.nu2)
        assert cost == pytest.approx(nonadaptive_error(cfg), rel=1e-12)

    def test_matches_direct_formula(self):
        st = _state([0.3, 0.9], [0.5, 2.0])
        efforts = np.array([1.0, 3.0])
        got = stage_cost(st, efforts, q=1.0, nu2=0.5)
        m1 = gaussian_moment(1.0)
        want = m1 * math.sqrt(0.5) * (0.3 / (0.5 / 0.5 + 1.0) ** 0.5 + 0.9 / (0.5 / 2.0 + 3.0) ** 0.5)
        assert got == pytest.approx(want, rel=1e-12)


class TestFirstStageExact:
    CFG = ModelConfig.from_snr(p=0.05, q=2.0, s=16.0, r=30.0, n_dim=600)

    def test_deterministic(self):
        a = first_stage_exact(self.CFG, mc_samples=40, seed=5)
        b = first_stage_exact(self.CFG, mc_samples=40, seed=5)
        assert a.lambda_frac == b.lambda_frac
        assert a.objective_value == b.objective_value

    def test_argmin_beats_alternative_selectors_on_same_draws(self):
        # the chosen fraction must score no worse than the bound-based and
        # closed-form fractions under the identical cached draws
        from adasense.policies import _FirstStageDraws, _cost_to_go_samples

        choice = first_stage_exact(self.CFG, mc_samples=60, seed=11)
        draws = _FirstStageDraws(self.CFG, 60, 11)
        j_exact = _cost_to_go_samples(self.CFG, choice.lambda_frac, draws).mean()
        for other in (first_stage_bound(self.CFG).lambda_frac,
                      first_stage_asymptotic(self.CFG).lambda_frac):
            j_other = _cost_to_go_samples(self.CFG, float(other), draws).mean()
            assert j_exact <= j_other * (1 + 1e-9)

    def test_monte_carlo_consistency(self):
        # doubling the sample count moves the objective estimate by less than
        # three pooled standard errors
        a = first_stage_exact(self.CFG, mc_samples=80, seed=21)
        b = first_stage_exact(self.CFG, mc_samples=160, seed=22)
        pooled = math.hypot(a.objective_se, b.objective_se)
        assert abs(a.objective_value - b.objective_value) < 3.0 * pooled

    def test_flat_objective_reports_undetermined(self):
        cfg = ModelConfig.from_snr(p=0.05, q=2.0, s=16.0, r=1e-6, n_dim=400)
        choice = first_stage_exact(cfg, mc_samples=40, seed=3)
        assert choice.undetermined
        assert choice.lambda_frac == 0.0

    def test_objective_flatness_at_vanishing_r(self):
        # at r -> 0 the expected remaining cost varies by well under 0.1%
        from adasense.policies import _FirstStageDraws, _cost_to_go_samples

        cfg = ModelConfig.from_snr(p=0.05, q=2.0, s=16.0, r=1e-6, n_dim=400)
        draws = _FirstStageDraws(cfg, 40, 3)
        vals = [_cost_to_go_samples(cfg, lam, draws).mean() for lam in np.linspace(0, 1, 21)]
        assert (max(vals) - min(vals)) / abs(np.mean(vals)) < 1e-3

    def test_empty_grid_rejected(self):
        with pytest.raises(ValueError):
            first_stage_exact(self.CFG, grid=[], mc_samples=10, seed=0)

    def test_out_of_range_grid_rejected(self):
        with pytest.raises(ValueError):
            first_stage_exact(self.CFG, grid=[0.5, 1.5], mc_samples=10, seed=0)


class TestFirstStageBound:
    @pytest.mark.parametrize("source", ["prop1", "prop2"])
    def test_degenerate_coefficient_returns_zero_with_flag(self, source):
        # r = 0+ keeps every bound at the trivial value 1: nothing prefers any
        # fraction, so the tie-break returns 0 and flags it
        cfg = ModelConfig.from_snr(p=0.25, q=2.0, s=16.0, r=1e-9, n_dim=100)
        choice = first_stage_bound(cfg, source)
        assert choice.undetermined
        assert choice.lambda_frac == 0.0

    def test_prop2_requires_q2(self):
        cfg = ModelConfig.from_snr(p=0.1, q=1.0, s=16.0, r=10.0, n_dim=100)
        with pytest.raises(ValueError):
            first_stage_bound(cfg, "prop2")

    def test_high_snr_agrees_with_closed_form(self):
        cfg = ModelConfig.from_snr(p=0.01, q=2.0, s=16.0, r=1e4, n_dim=100)
        bound = first_stage_bound(cfg, "auto").lambda_frac
        asym = first_stage_asymptotic(cfg, "fixed_p").lambda_frac
        assert abs(bound - asym) / asym < 0.10

    def test_unknown_source_rejected(self):
        cfg = ModelConfig.from_snr(p=0.1, q=2.0, s=16.0, r=10.0, n_dim=100)
        with pytest.raises(ValueError):
            first_stage_bound(cfg, "oracle")


class TestFirstStageAsymptotic:
    def test_fixed_p_constant(self):
        # A2(2) = 2**(-2/5)
        _, a2 = high_snr_constants(2.0)
        assert a2 == pytest.approx(0.75785828325519904, rel=1e-12)

    def test_fixed_p_formula(self):
        cfg = ModelConfig.from_snr(p=0.01, q=2.0, s=16.0, r=1e4, n_dim=100)
        lam = first_stage_asymptotic(cfg, "fixed_p").lambda_frac
        _, a2 = high_snr_constants(2.0)
        want = a2 * 0.01 ** (-0.4) * 0.99 ** (-0.4) * math.exp(-16.0 / 5.0) * 1e4 ** (-0.2)
        assert lam == pytest.approx(want, rel=1e-12)

    def test_fixed_p_clamped_at_low_r(self):
        cfg = ModelConfig.from_snr(p=0.001, q=2.0, s=1.0, r=1e-3, n_dim=100)
        assert first_stage_asymptotic(cfg, "fixed_p").lambda_frac == 1.0

    def test_vanishing_p_limits(self):
        cfg1 = ModelConfig.from_snr(p=0.01, q=2.0, s=16.0, r=10.0, n_dim=100)
        assert first_stage_asymptotic(cfg1, "vanishing_p_high_r").lambda_frac == pytest.approx(1.0 / 3.0)
        assert first_stage_asymptotic(cfg1, "vanishing_p_low_r").lambda_frac == 0.5
        cfg2 = ModelConfig.from_snr(p=0.01, q=1.0, s=16.0, r=10.0, n_dim=100)
        assert first_stage_asymptotic(cfg2, "vanishing_p_high_r").lambda_frac == pytest.approx(0.5)

    def test_unknown_regime_rejected(self):
        cfg = ModelConfig.from_snr(p=0.01, q=2.0, s=16.0, r=10.0, n_dim=100)
        with pytest.raises(ValueError):
            first_stage_asymptotic(cfg, "bogus")


class TestNonadaptiveError:
    def test_worked_example(self):
        cfg = ModelConfig(p=0.1, mu=4.0, sigma2=1.0, nu2=1.0 / 3.0, n_dim=100, q=2.0)
        assert nonadaptive_error(cfg) == pytest.approx(2.5, rel=1e-12)

    def test_vanishing_r_is_prior_loss(self):
        cfg = ModelConfig(p=0.2, mu=1.0, sigma2=2.0, nu2=2e12, n_dim=50, q=2.0)
        prior = cfg.m_q * 2.0 ** 1.0 * 50 * 0.2
        assert nonadaptive_error(cfg) == pytest.approx(prior, rel=1e-9)

    def test_q1_example(self):
        cfg = ModelConfig(p=1.0, mu=0.0, sigma2=1.0, nu2=1e15, n_dim=10, q=1.0)
        assert nonadaptive_error(cfg) == pytest.approx(10 * gaussian_moment(1.0), rel=1e-6)


class TestOracleGainBound:
    def test_r_zero_is_one(self):
        cfg = ModelConfig(p=0.1, mu=4.0, sigma2=1.0, nu2=1e12, n_dim=10, q=2.0)
        assert oracle_gain_bound(cfg) == pytest.approx(1.0, rel=1e-9)

    def test_worked_example(self):
        cfg = ModelConfig.from_snr(p=0.01, q=2.0, s=16.0, r=1.0, n_dim=10)
        assert oracle_gain_bound(cfg) == pytest.approx(50.5, rel=1e-12)

    def test_high_r_limit(self):
        cfg = ModelConfig.from_snr(p=0.01, q=2.0, s=16.0, r=1e9, n_dim=10)
        assert oracle_gain_bound(cfg) == pytest.approx(100.0, rel=1e-4)

    def test_p_zero_rejected(self):
        cfg = ModelConfig(p=0.0, mu=4.0, sigma2=1.0, nu2=1.0, n_dim=10, q=2.0)
        with pytest.raises(ValueError):
            oracle_gain_bound(cfg)


class TestOraclePolicyError:
    def test_empty_support_zero(self):
        cfg = ModelConfig(p=0.0, mu=4.0, sigma2=1.0, nu2=1.0, n_dim=20, q=2.0)
        sig = sample_signal(cfg, 0)
        assert oracle_policy_error(cfg, sig) == 0.0

    def test_full_support_squared_error(self):
        cfg = ModelConfig(p=1.0, mu=4.0, sigma2=1.0, nu2=0.5, n_dim=30, q=2.0)
        sig = sample_signal(cfg, 0)
        # every component gets a unit share: posterior variance nu2/(nu2 + 1)
        want = 30 * 0.5 * 1.0 / (0.5 + 1.0)
        assert oracle_policy_error(cfg, sig) == pytest.approx(want, rel=1e-12)

    def test_mean_risk_respects_jensen_floor(self):
        cfg = ModelConfig.from_snr(p=0.1, q=2.0, s=16.0, r=2.0, n_dim=400)
        risks = np.array([oracle_policy_error(cfg, sample_signal(cfg, seed))
                          for seed in range(300)])
        floor = (cfg.m_q * cfg.sigma2 ** (cfg.q / 2) * cfg.n_dim * cfg.p
                 / (1.0 + cfg.r / cfg.p) ** (cfg.q / 2.0))
        se = risks.std(ddof=1) / math.sqrt(risks.size)
        assert risks.mean() >= floor - 3.0 * se


class TestAllocationInvariants:
    def test_negative_entries_rejected(self):
        with pytest.raises(ValueError):
            Allocation(efforts=np.array([1.0, -0.1]), stage_budget=0.9)

    def test_sum_mismatch_rejected(self):
        with pytest.raises(ValueError):
            Allocation(efforts=np.array([1.0, 1.0]), stage_budget=3.0)
