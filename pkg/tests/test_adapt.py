"""Step-size controller: predictor, weights, accumulator, budget, adaptation."""

import numpy as np
import pytest

from eevpd.adapt import (
    GAMMA_DEFAULT,
    AdaptationError,
    AdapterState,
    BiasBudget,
    EevpdAccumulator,
    adapter_step,
    budget_from_bias,
    budget_from_eevpd,
    budget_from_rmse,
    eevpd_update,
    predictor_xi,
    run_adaptation,
    weight,
)
from eevpd.gauss import GaussSpectrum, eevpd_exact, phi, phi_inv
from eevpd.targets import GaussTarget, make_rosenbrock_product, make_standard_gaussian


class TestEevpdAccumulator:
    def test_constant_stream_gives_zero(self):
        acc = EevpdAccumulator(dim=4)
        for _ in range(100):
            acc = eevpd_update(acc, 0.7)
        assert acc.estimate() == pytest.approx(0.0, abs=1e-15)

    def test_alternating_two_point(self):
        # stream {+a, -a}: variance a^2, EEVPD a^2/d
        a, d = 0.3, 5
        acc = EevpdAccumulator(dim=d)
        for k in range(1000):
            acc = eevpd_update(acc, a if k % 2 == 0 else -a)
        assert acc.estimate() == pytest.approx(a * a / d, rel=1e-12)

    def test_matches_numpy_variance(self):
        rng = np.random.default_rng(0)
        xs = rng.standard_normal(500) * 0.1 + 0.02
        acc = EevpdAccumulator(dim=3)
        for x in xs:
            acc = eevpd_update(acc, x)
        assert acc.estimate() == pytest.approx(np.var(xs) / 3, rel=1e-10)

    def test_merge_equals_concatenation(self):
        rng = np.random.default_rng(1)
        xs = rng.standard_normal(400)
        whole = EevpdAccumulator(dim=2)
        for x in xs:
            whole = whole.updated(x)
        a = EevpdAccumulator(dim=2)
        b = EevpdAccumulator(dim=2)
        for x in xs[:150]:
            a = a.updated(x)
        for x in xs[150:]:
            b = b.updated(x)
        merged = a.merge(b)
        assert merged.estimate() == pytest.approx(whole.estimate(), rel=1e-12)
        assert merged.count == whole.count

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            eevpd_update(EevpdAccumulator(dim=1), np.inf)

    def test_masked_update_skips(self):
        acc = EevpdAccumulator(dim=1, count=np.zeros(2), mean=np.zeros(2), mean_sq=np.zeros(2))
        acc = acc.update_masked(np.array([1.0, np.inf]), keep=np.array([True, False]))
        assert acc.count[0] == 1 and acc.count[1] == 0
        assert np.isfinite(acc.mean_sq).all()

    def test_pooled(self):
        acc = EevpdAccumulator(
            dim=2, count=np.array([100.0, 300.0]), mean=np.array([0.1, 0.2]),
            mean_sq=np.array([0.5, 0.6]),
        )
        pooled = acc.pooled()
        assert pooled.count == 400
        assert pooled.mean == pytest.approx((100 * 0.1 + 300 * 0.2) / 400)


class TestPredictor:
    def test_spec_point(self):
        # d=10, alpha=1e-3, eps=0.5, dH=0.01 -> 1e-4 / (10 * 1e-3 * 0.015625)
        assert predictor_xi(0.01, 0.5, 1e-3, 10) == pytest.approx(0.64)

    def test_fixed_point_scaling(self):
        # dH chosen so dH^2/d = alpha eps^6 gives xi = 1
        d, alpha, eps = 7, 2e-4, 0.3
        dh = np.sqrt(d * alpha * eps**6)
        assert predictor_xi(dh, eps, alpha, d) == pytest.approx(1.0)

    def test_doubling_delta_h(self):
        base = predictor_xi(0.01, 0.5, 1e-3, 10)
        assert predictor_xi(0.02, 0.5, 1e-3, 10) == pytest.approx(4 * base)
        # predicted eps shrinks by 4^(1/6)
        assert (4 * base) ** (-1 / 6) == pytest.approx(base ** (-1 / 6) / 4 ** (1 / 6))


class TestWeight:
    def test_peak_at_one(self):
        assert weight(1.0) == 1.0

    def test_one_sigma_point(self):
        sigma = 1.5
        assert weight(np.exp(sigma), sigma) == pytest.approx(np.exp(-0.5))

    def test_zero_limit(self):
        assert weight(0.0) == 0.0

    def test_symmetry_in_log(self):
        assert weight(2.0) == pytest.approx(weight(0.5))

    def test_rejects_negative(self):
        with pytest.raises(ValueError):
            weight(-1.0)


class TestAdapterStep:
    def test_forgetting_factor_default(self):
        assert GAMMA_DEFAULT == pytest.approx(49.0 / 51.0)
        # influence of an observation 100 steps old
        assert GAMMA_DEFAULT**100 == pytest.approx(0.0183, abs=2e-4)

    def test_forgetting_on_accumulators(self):
        # a xi pushed 100 updates ago carries weight gamma^100 in A
        state = AdapterState(alpha=1e-3, eps=0.5)
        xi0 = predictor_xi(0.01, state.eps, state.alpha, 10)
        state = adapter_step(state, 0.01, 10)
        a_first = state.A
        for _ in range(100):
            state = adapter_step(state, 1e-9, 10)  # negligible xi contributions
        assert state.A == pytest.approx(a_first * GAMMA_DEFAULT**100, rel=1e-6)
        assert xi0 > 0

    def test_deterministic_feedback_fixed_point(self):
        # dH(eps) = c eps^3 (the scaling law): the update converges so that
        # dH(eps*)^2 / d = alpha, i.e. the squared energy error per
        # dimension hits the target exactly.
        d, alpha, c = 4, 1e-4, 0.9
        state = AdapterState(alpha=alpha, eps=0.05)
        for _ in range(600):
            dh = c * state.eps**3
            state = adapter_step(state, dh, d)
        assert (c * state.eps**3) ** 2 / d == pytest.approx(alpha, rel=1e-6)

    def test_divergent_halves_and_skips(self):
        state = AdapterState(alpha=1e-3, eps=0.8, A=2.0, B=3.0)
        out = adapter_step(state, np.nan, 5)
        assert out.eps == pytest.approx(0.4)
        assert out.A == 2.0 and out.B == 3.0
        assert out.n_halvings == 1
        out2 = adapter_step(state, 0.5, 5, divergent=True)
        assert out2.eps == pytest.approx(0.4)

    def test_vectorized_matches_scalar(self):
        state = AdapterState(alpha=1e-3, eps=0.5).with_chains(3)
        dh = np.array([0.01, 0.02, np.inf])
        out = adapter_step(state, dh, 10)
        for c, dhc in enumerate(dh):
            solo = adapter_step(AdapterState(alpha=1e-3, eps=0.5), dhc if np.isfinite(dhc) else np.nan, 10)
            assert out.eps[c] == pytest.approx(solo.eps)

    def test_validation(self):
        with pytest.raises(ValueError):
            AdapterState(alpha=-1.0, eps=0.5)
        with pytest.raises(ValueError):
            AdapterState(alpha=1e-3, eps=0.0)
        with pytest.raises(ValueError):
            AdapterState(alpha=1e-3, eps=0.5, gamma=1.0)


class TestBiasBudget:
    def test_table_rows_to_two_significant_figures(self):
        for rmse, expected in [(0.5, 3.0e-2), (0.1, 3.3e-4), (0.05, 4.3e-5), (0.01, 3.5e-7)]:
            budget = budget_from_rmse(rmse)
            assert float(f"{budget.eevpd_target:.1e}") == expected
            assert budget.bias_tolerance == pytest.approx(rmse / np.sqrt(5.0))

    def test_ten_percent_row_values(self):
        b = budget_from_rmse(0.1)
        assert b.bias_tolerance == pytest.approx(0.045, abs=5e-4)
        assert b.eevpd_target == pytest.approx(3.3e-4, rel=0.02)

    def test_round_trip_inverse(self):
        for rmse in [0.02, 0.1, 0.4]:
            b = budget_from_rmse(rmse)
            assert phi_inv(b.eevpd_target) == pytest.approx(b.bias_tolerance**2, abs=1e-10)

    def test_small_bias_approximation(self):
        b = budget_from_bias(0.01)
        assert b.eevpd_target == pytest.approx(4 * 0.01**3, rel=0.03)

    def test_from_eevpd(self):
        b = budget_from_eevpd(3.3e-4)
        assert phi(b.bias_tolerance**2) == pytest.approx(3.3e-4, rel=1e-9)

    def test_invariant_enforced(self):
        with pytest.raises(ValueError):
            BiasBudget(rmse_tolerance=0.1, bias_tolerance=0.2, eevpd_target=1e-4)
        with pytest.raises(ValueError):
            budget_from_rmse(1.5)


class TestRunAdaptation:
    def test_gaussian_converges_to_target(self):
        # stationary 1-d Gaussian: measured EEVPD within 10% of alpha and
        # the tuned eps within 10% of the Lemma-1 inversion, quickly.
        target = make_standard_gaussian(1)
        alpha = 1e-3
        res = run_adaptation(target, "ulmc", alpha, init_eps=0.3, n_steps=2000, L=1.0, seed=3)
        assert res.measured_eevpd(tail_fraction=0.5) == pytest.approx(alpha, rel=0.10)
        assert eevpd_exact(GaussSpectrum([1.0]), res.eps) == pytest.approx(alpha, rel=0.35)

    def test_gaussian_d100_eps_matches_lemma_inversion(self):
        from scipy.optimize import brentq

        target = make_standard_gaussian(100)
        alpha = 3.3e-4
        spec = GaussSpectrum(np.ones(100))
        eps_star = brentq(lambda e: eevpd_exact(spec, e) - alpha, 1e-3, 1.99)
        res = run_adaptation(target, "ulmc", alpha, n_steps=4000, seed=4)
        assert res.eps == pytest.approx(eps_star, rel=0.10)

    def test_uhmc_kind_also_converges(self):
        target = make_standard_gaussian(4)
        res = run_adaptation(target, "uhmc", 1e-3, n_steps=3000, seed=5)
        assert res.measured_eevpd() == pytest.approx(1e-3, rel=0.25)

    def test_unreachable_alpha_exercises_halving_then_aborts(self):
        # an alpha whose target |dH| exceeds the divergence threshold keeps
        # the halving branch firing until the run aborts
        target = make_standard_gaussian(2)
        with pytest.raises(AdaptationError, match="halved"):
            run_adaptation(target, "ulmc", alpha=1e8, init_eps=1.0, n_steps=5000, seed=6)

    def test_scale_equivariance_of_eps_trace(self):
        # scaling the target's width, x0, and eps0 by s scales the eps trace
        # by s: dH (and hence the controller's information) is invariant
        s = 3.0
        a = run_adaptation(
            GaussTarget([1.0]), "ulmc", 1e-3, init_eps=0.3, n_steps=500, L=1.0, seed=7,
            x0=np.array([0.6]),
        )
        b = run_adaptation(
            GaussTarget([s * s]), "ulmc", 1e-3, init_eps=0.3 * s, n_steps=500, L=s, seed=7,
            x0=np.array([0.6 * s]),
        )
        np.testing.assert_allclose(b.eps_trace, s * a.eps_trace, rtol=1e-9)

    def test_rejects_adjusted_kind(self):
        with pytest.raises(ValueError):
            run_adaptation(make_standard_gaussian(2), "almc", 1e-3)

    def test_warm_start_state_returned(self):
        res = run_adaptation(make_standard_gaussian(3), "ulmc", 1e-3, n_steps=200, seed=8)
        assert res.state.x.shape == (3,)
        assert np.all(np.isfinite(res.state.x))
