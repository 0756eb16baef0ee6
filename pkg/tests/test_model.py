"""Tests for the signal model, observation noise, and posterior recursion."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad

from adasense.model import (
    BeliefState,
    ConstraintViolation,
    ModelConfig,
    gaussian_moment,
    likelihood_triple,
    observe,
    sample_signal,
    update_state,
)


def _moment_by_quadrature(q: float) -> float:
    """Independent oracle: integrate |z|**q against the standard normal pdf."""
    val, _ = quad(lambda z: abs(z) ** q * math.exp(-0.5 * z * z) / math.sqrt(2 * math.pi),
                  -40, 40, limit=400)
    return val


class TestGaussianMoment:
    def test_q2_is_variance(self):
        assert gaussian_moment(2.0) == pytest.approx(1.0, abs=1e-12)

    def test_q4_closed_form(self):
        # 2**(q/2) Gamma((q+1)/2)/sqrt(pi) = 3 at q=4; quadrature agrees
        assert gaussian_moment(4.0) == pytest.approx(3.0, rel=1e-12)
        assert gaussian_moment(4.0) == pytest.approx(_moment_by_quadrature(4.0), rel=1e-9)

    def test_q1_matches_sqrt_two_over_pi(self):
        assert gaussian_moment(1.0) == pytest.approx(0.79788456080286535, rel=1e-12)

    @pytest.mark.parametrize("q", [0.3, 0.5, 1.7, 2.5, 6.0])
    def test_matches_quadrature(self, q):
        assert gaussian_moment(q) == pytest.approx(_moment_by_quadrature(q), rel=1e-8)

    @pytest.mark.parametrize("q", [0.0, -1.0])
    def test_nonpositive_rejected(self, q):
        with pytest.raises(ValueError):
            gaussian_moment(q)


class TestModelConfig:
    def test_derived_quantities(self):
        cfg = ModelConfig(p=0.1, mu=4.0, sigma2=1.0, nu2=0.5, n_dim=100, q=2.0)
        assert cfg.r == pytest.approx(2.0)
        assert cfg.s == pytest.approx(16.0)
        assert cfg.gamma == pytest.approx(0.5)
        assert cfg.m_q == pytest.approx(1.0)

    def test_from_snr_roundtrip(self):
        cfg = ModelConfig.from_snr(p=0.01, q=1.0, s=16.0, r=100.0, n_dim=50)
        assert cfg.r == pytest.approx(100.0)
        assert cfg.s == pytest.approx(16.0)
        assert cfg.gamma == pytest.approx(2.0 / 3.0)

    @pytest.mark.parametrize(
        "kwargs,field",
        [
            (dict(p=-0.1), "p"),
            (dict(p=1.1), "p"),
            (dict(sigma2=0.0), "sigma2"),
            (dict(nu2=-1.0), "nu2"),
            (dict(n_dim=0), "n_dim"),
            (dict(q=0.0), "q"),
        ],
    )
    def test_validation_names_field(self, kwargs, field):
        base = dict(p=0.1, mu=4.0, sigma2=1.0, nu2=1.0, n_dim=10, q=2.0)
        base.update(kwargs)
        with pytest.raises(ValueError, match=field):
            ModelConfig(**base)


class TestSampleSignal:
    def test_p_zero_gives_empty_support(self):
        cfg = ModelConfig(p=0.0, mu=4.0, sigma2=1.0, nu2=1.0, n_dim=500, q=2.0)
        sig = sample_signal(cfg, 0)
        assert not sig.support.any()
        assert np.all(sig.amplitudes == 0.0)

    def test_p_one_amplitude_mean(self):
        cfg = ModelConfig(p=1.0, mu=4.0, sigma2=1.0, nu2=1.0, n_dim=1000, q=2.0)
        sig = sample_signal(cfg, 1)
        assert sig.support.all()
        # law of large numbers: sample mean within 4 sigma / sqrt(N)
        assert abs(sig.amplitudes.mean() - 4.0) < 4.0 / math.sqrt(1000)

    def test_pooled_support_fraction(self):
        cfg = ModelConfig(p=0.1, mu=4.0, sigma2=1.0, nu2=1.0, n_dim=10000, q=2.0)
        count = sum(sample_signal(cfg, seed).support.sum() for seed in range(100))
        # binomial: SE of the pooled fraction is sqrt(p(1-p)/1e6) ~ 3e-4
        assert abs(count / 1e6 - 0.1) < 0.005

    def test_deterministic(self):
        cfg = ModelConfig(p=0.3, mu=1.0, sigma2=2.0, nu2=1.0, n_dim=64, q=2.0)
        a, b = sample_signal(cfg, 1234), sample_signal(cfg, 1234)
        assert np.array_equal(a.support, b.support)
        assert np.array_equal(a.amplitudes, b.amplitudes)

    def test_zeros_off_support(self):
        cfg = ModelConfig(p=0.5, mu=0.0, sigma2=1.0, nu2=1.0, n_dim=256, q=2.0)
        sig = sample_signal(cfg, 9)
        assert np.all(sig.amplitudes[~sig.support] == 0.0)


class TestObserve:
    def _signal(self, n=100, seed=0):
        cfg = ModelConfig(p=0.3, mu=2.0, sigma2=1.0, nu2=0.25, n_dim=n, q=2.0)
        return cfg, sample_signal(cfg, seed)

    def test_noiseless_is_exact(self):
        cfg, sig = self._signal()
        obs = observe(sig, np.ones(100), nu2=0.0, seed=5)
        assert np.array_equal(obs.values[obs.observed_mask], sig.amplitudes)

    def test_zero_effort_fully_masked(self):
        cfg, sig = self._signal()
        obs = observe(sig, np.zeros(100), nu2=0.25, seed=5)
        assert not obs.observed_mask.any()
        assert np.all(np.isnan(obs.values))

    def test_noise_scales_with_effort(self):
        # effort 4 on a zero signal: variance of y should be nu2/4 within 2%
        cfg = ModelConfig(p=0.0, mu=0.0, sigma2=1.0, nu2=0.36, n_dim=100000, q=2.0)
        sig = sample_signal(cfg, 0)
        obs = observe(sig, np.full(cfg.n_dim, 4.0), cfg.nu2, seed=11)
        assert obs.values.var() == pytest.approx(0.36 / 4.0, rel=0.02)

    def test_negative_effort_rejected(self):
        cfg, sig = self._signal()
        with pytest.raises(ValueError):
            observe(sig, np.full(100, -1.0), cfg.nu2, seed=0)

    def test_deterministic(self):
        cfg, sig = self._signal()
        efforts = np.linspace(0, 2, 100)
        a = observe(sig, efforts, cfg.nu2, seed=21)
        b = observe(sig, efforts, cfg.nu2, seed=21)
        assert np.array_equal(a.values[a.observed_mask], b.values[b.observed_mask])


class TestLikelihoodTriple:
    def test_prob_zero_collapses_to_f0(self):
        y = np.linspace(-5, 5, 11)
        f0, f1, fp = likelihood_triple(0.0, 2.0, 1.0, 0.5, 0.25, y)
        np.testing.assert_allclose(fp, f0, rtol=1e-14)

    def test_prob_one_collapses_to_f1(self):
        y = np.linspace(-5, 5, 11)
        f0, f1, fp = likelihood_triple(1.0, 2.0, 1.0, 0.5, 0.25, y)
        np.testing.assert_allclose(fp, f1, rtol=1e-14)

    def test_doubled_variance_at_origin(self):
        # mean 0 and var = nu2/effort makes f1 a doubled-variance copy of f0
        f0, f1, _ = likelihood_triple(0.5, 0.0, 0.5, 1.0, 0.5, 0.0)
        assert f1 == pytest.approx(f0 / math.sqrt(2.0), rel=1e-14)

    def test_log_flag_consistency(self):
        y = np.array([-1.0, 0.3, 4.2])
        lin = likelihood_triple(0.2, 1.0, 2.0, 0.7, 0.3, y)
        logd = likelihood_triple(0.2, 1.0, 2.0, 0.7, 0.3, y, log=True)
        for a, b in zip(lin, logd):
            np.testing.assert_allclose(a, np.exp(b), rtol=1e-13)

    def test_zero_effort_rejected(self):
        with pytest.raises(ValueError):
            likelihood_triple(0.5, 0.0, 1.0, 0.0, 0.25, 0.0)

    def test_mixture_between_components(self):
        y = np.linspace(-3, 8, 23)
        f0, f1, fp = likelihood_triple(0.3, 4.0, 1.0, 1.0, 1.0, y)
        assert np.all(fp >= np.minimum(f0, f1) - 1e-300)
        assert np.all(fp <= np.maximum(f0, f1) + 1e-300)


def _uniform_state(cfg: ModelConfig) -> BeliefState:
    return BeliefState.initial(cfg)


class TestUpdateState:
    CFG = ModelConfig(p=0.2, mu=3.0, sigma2=1.5, nu2=0.5, n_dim=40, q=2.0)

    def test_zero_effort_leaves_state_unchanged(self):
        state = _uniform_state(self.CFG)
        sig = sample_signal(self.CFG, 0)
        obs = observe(sig, np.zeros(40), self.CFG.nu2, 1)
        new = update_state(state, np.zeros(40), obs, self.CFG.nu2)
        assert np.array_equal(new.probs, state.probs)
        assert np.array_equal(new.means, state.means)
        assert np.array_equal(new.variances, state.variances)
        assert new.budget_remaining == state.budget_remaining

    def test_certain_presence_is_fixed_point(self):
        state = BeliefState(
            probs=np.ones(4), means=np.full(4, 3.0), variances=np.ones(4),
            budget_remaining=10.0,
        )
        cfg = self.CFG
        sig = sample_signal(ModelConfig(p=1.0, mu=3.0, sigma2=1.0, nu2=0.5, n_dim=4, q=2.0), 3)
        obs = observe(sig, np.ones(4), cfg.nu2, 4)
        new = update_state(state, np.ones(4), obs, cfg.nu2)
        assert np.all(new.probs == 1.0)

    def test_certain_absence_is_fixed_point(self):
        state = BeliefState(
            probs=np.zeros(4), means=np.zeros(4), variances=np.ones(4),
            budget_remaining=10.0,
        )
        sig = sample_signal(ModelConfig(p=0.0, mu=3.0, sigma2=1.0, nu2=0.5, n_dim=4, q=2.0), 3)
        obs = observe(sig, np.ones(4), 0.5, 4)
        new = update_state(state, np.ones(4), obs, 0.5)
        assert np.all(new.probs == 0.0)

    def test_variance_update_identity(self):
        # posterior precision adds effort/nu2 to the prior precision
        state = _uniform_state(self.CFG)
        sig = sample_signal(self.CFG, 7)
        efforts = np.linspace(0.05, 1.5, 40)
        obs = observe(sig, efforts, self.CFG.nu2, 8)
        new = update_state(state, efforts, obs, self.CFG.nu2)
        expected = 1.0 / (1.0 / state.variances + efforts / self.CFG.nu2)
        np.testing.assert_allclose(new.variances, expected, rtol=1e-12)

    def test_budget_overdraft_rejected(self):
        state = _uniform_state(self.CFG)
        sig = sample_signal(self.CFG, 7)
        efforts = np.full(40, 1.01 * state.budget_remaining / 40 + 1e-6)
        obs = observe(sig, efforts, self.CFG.nu2, 8)
        with pytest.raises(ConstraintViolation):
            update_state(state, efforts, obs, self.CFG.nu2)

    def test_budget_decrement(self):
        state = _uniform_state(self.CFG)
        sig = sample_signal(self.CFG, 7)
        efforts = np.full(40, 0.25)
        obs = observe(sig, efforts, self.CFG.nu2, 8)
        new = update_state(state, efforts, obs, self.CFG.nu2)
        assert new.budget_remaining == pytest.approx(40.0 - 10.0, abs=1e-9)

    def test_posteriors_stay_in_unit_interval_fuzz(self):
        rng = np.random.default_rng(42)
        for _ in range(50):
            n = 30
            state = BeliefState(
                probs=rng.random(n),
                means=rng.normal(0, 5, n),
                variances=10.0 ** rng.uniform(-3, 2, n),
                budget_remaining=1e6,
            )
            efforts = np.where(rng.random(n) < 0.3, 0.0, 10.0 ** rng.uniform(-3, 3, n))
            nu2 = 10.0 ** rng.uniform(-3, 2)
            y = np.where(efforts > 0, rng.normal(0, 20, n), np.nan)
            from adasense.model import Observation

            obs = Observation(values=y, observed_mask=efforts > 0)
            new = update_state(state, efforts, obs, nu2)
            assert np.all((new.probs >= 0.0) & (new.probs <= 1.0))
            assert np.all(new.variances > 0.0)

    @given(
        prior_var=st.floats(1e-6, 1e4),
        nu2=st.floats(1e-6, 1e4),
        lam_small=st.floats(1e-9, 1e3),
        lam_extra=st.floats(1e-9, 1e3),
    )
    @settings(max_examples=200, deadline=None)
    def test_variance_monotone_decreasing_in_effort(self, prior_var, nu2, lam_small, lam_extra):
        def post_var(lam):
            return nu2 * prior_var / (nu2 + lam * prior_var)

        assert post_var(lam_small + lam_extra) <= post_var(lam_small) <= prior_var

    def test_bit_reproducible(self):
        state = _uniform_state(self.CFG)
        sig = sample_signal(self.CFG, 7)
        efforts = np.full(40, 0.5)
        obs = observe(sig, efforts, self.CFG.nu2, 8)
        a = update_state(state, efforts, obs, self.CFG.nu2)
        b = update_state(state, efforts, obs, self.CFG.nu2)
        assert np.array_equal(a.probs, b.probs)
        assert np.array_equal(a.means, b.means)
        assert np.array_equal(a.variances, b.variances)


class TestFirstStagePosteriorMoments:
    """Distributional checks on one exploration round at uniform effort."""

    CFG = ModelConfig.from_snr(p=0.2, q=2.0, s=4.0, r=2.0, n_dim=100000)
    LAM = 0.6

    def _posteriors(self, seed=123):
        cfg = self.CFG
        sig = sample_signal(cfg, seed)
        efforts = np.full(cfg.n_dim, self.LAM)
        obs = observe(sig, efforts, cfg.nu2, seed + 1)
        state = update_state(BeliefState.initial(cfg), efforts, obs, cfg.nu2)
        return state.probs

    def test_mean_posterior_equals_prior(self):
        # law of total probability: E p_i(1) = p
        probs = self._posteriors()
        se = probs.std(ddof=1) / math.sqrt(probs.size)
        assert abs(probs.mean() - self.CFG.p) < 3.0 * se

    def test_mean_powered_posterior_matches_overlap_coefficient(self):
        # E p_i(1)**gamma = p**gamma * C with C the quadrature overlap value
        from adasense.bounds import ChernoffInputs, chernoff_exact

        probs = self._posteriors()
        stat = np.sqrt(probs)
        coeff = chernoff_exact(ChernoffInputs.from_config(self.CFG, self.LAM))
        expected = math.sqrt(self.CFG.p) * coeff
        se = stat.std(ddof=1) / math.sqrt(stat.size)
        assert abs(stat.mean() - expected) < 3.0 * se
