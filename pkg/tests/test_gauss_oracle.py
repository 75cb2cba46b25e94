"""Closed-form Gaussian oracle: spectra, EEVPD, bias and Wasserstein bounds."""

import numpy as np
import pytest
from scipy.optimize import minimize_scalar

from eevpd import gauss
from eevpd.gauss import (
    GaussSpectrum,
    b2_exact,
    bound_report,
    eevpd_exact,
    energy_error_variance,
    optimal_bias_fraction,
    optimal_eps,
    phi,
    phi_inv,
    phi_w,
    phi_w_inv,
    stationary_spectrum,
    verlet_matrix_1d,
    wasserstein2_gauss,
    wasserstein_factor,
)


def random_spectrum(rng, max_dim=64, max_cond=1e4):
    d = int(rng.integers(1, max_dim + 1))
    cond = float(rng.uniform(1.0, max_cond))
    scale = float(rng.uniform(0.1, 10.0))
    ev = scale * np.exp(rng.uniform(0.0, np.log(cond), size=d))
    return GaussSpectrum(ev)


class TestSpectrum:
    def test_validation(self):
        with pytest.raises(ValueError):
            GaussSpectrum(np.array([1.0, -1.0]))
        with pytest.raises(ValueError):
            GaussSpectrum(np.array([]))
        with pytest.raises(ValueError):
            GaussSpectrum(np.array([1.0, np.inf]))

    def test_stability_predicate(self):
        spec = GaussSpectrum(np.array([1.0, 4.0]))
        assert spec.max_stable_eps() == 2.0
        assert spec.is_stable(1.99) and not spec.is_stable(2.0)


class TestStationarySpectrum:
    def test_small_eps_limit(self):
        spec = GaussSpectrum(np.array([1.0, 2.0, 5.0]))
        out = stationary_spectrum(spec, 1e-8)
        np.testing.assert_allclose(out.eigenvalues, spec.eigenvalues, rtol=1e-15)

    def test_unit_sigma_eps_one(self):
        out = stationary_spectrum(GaussSpectrum(np.array([1.0])), 1.0)
        np.testing.assert_allclose(out.eigenvalues, [4.0 / 3.0], rtol=1e-15)

    def test_unit_sigma_eps_half(self):
        out = stationary_spectrum(GaussSpectrum(np.array([1.0])), 0.5)
        np.testing.assert_allclose(out.eigenvalues, [16.0 / 15.0], rtol=1e-15)

    def test_instability_reports_eigenvalue(self):
        spec = GaussSpectrum(np.array([4.0, 0.25]))
        with pytest.raises(ValueError, match="0.25"):
            stationary_spectrum(spec, 1.0)


class TestEevpdExact:
    def test_zero(self):
        assert energy_error_variance(0.0) == 0.0

    def test_y_equal_one(self):
        np.testing.assert_allclose(energy_error_variance(1.0), 1.0 / 12.0, rtol=1e-15)

    def test_isotropic_d100(self):
        spec = GaussSpectrum(np.ones(100))
        v = eevpd_exact(spec, 0.5)
        np.testing.assert_allclose(v, 0.25**3 / (16 * (1 - 0.25 / 4)), rtol=1e-15)
        np.testing.assert_allclose(v, 1.0416667e-3, rtol=1e-6)


class TestB2Exact:
    def test_zero(self):
        assert b2_exact(GaussSpectrum(np.array([2.0])), 0.0) == 0.0

    def test_y_equal_one(self):
        v = b2_exact(GaussSpectrum(np.array([1.0])), 1.0)
        np.testing.assert_allclose(v, 1.0 / 9.0, rtol=1e-15)

    def test_isotropic_consistency_with_phi(self):
        # On isotropic spectra the bound is an identity: phi(b2) = EEVPD.
        spec = GaussSpectrum(np.full(7, 2.5))
        for eps in [0.1, 0.5, 1.0, 1.8]:
            np.testing.assert_allclose(
                phi(b2_exact(spec, eps)), eevpd_exact(spec, eps), rtol=1e-10
            )

    def test_matches_stationary_spectrum_definition(self):
        # b2_exact must agree with the diagonal covariance error of the
        # exact stationary spectrum.
        spec = GaussSpectrum(np.array([1.0, 3.0, 10.0]))
        eps = 0.9
        tilde = stationary_spectrum(spec, eps).eigenvalues
        direct = np.mean((1.0 - tilde / spec.eigenvalues) ** 2)
        np.testing.assert_allclose(b2_exact(spec, eps), direct, rtol=1e-14)


class TestPhi:
    def test_zero(self):
        assert phi(0.0) == 0.0

    def test_table_rows(self):
        # Bias tolerances b = rmse/sqrt(5) for rmse of 50%, 10%, 5%, 1%.
        for rmse, expected in [(0.5, 3.0e-2), (0.1, 3.3e-4), (0.05, 4.3e-5), (0.01, 3.5e-7)]:
            b = rmse / np.sqrt(5.0)
            v = phi(b * b)
            # match to two significant figures
            assert float(f"{v:.1e}") == expected

    def test_rounded_bias_values(self):
        np.testing.assert_allclose(phi(0.045**2), 3.3e-4, rtol=0.02)
        np.testing.assert_allclose(phi(0.0045**2), 3.5e-7, rtol=0.05)

    def test_small_x_approximation(self):
        # phi(b^2) ~ 4 b^3 for small bias
        b = 0.01
        np.testing.assert_allclose(phi(b * b), 4.0 * b**3, rtol=0.03)

    def test_monotone(self):
        xs = np.linspace(0.0, gauss.PHI_DOMAIN_MAX * 0.999, 200)
        vals = [phi(x) for x in xs]
        assert np.all(np.diff(vals) > 0)

    def test_domain_errors(self):
        with pytest.raises(ValueError):
            phi(gauss.PHI_DOMAIN_MAX + 1e-6)
        with pytest.raises(ValueError, match="0.397"):
            phi_inv(0.398)
        with pytest.raises(ValueError):
            phi_inv(-1e-9)

    def test_inverse_round_trip(self):
        for v in [1e-8, 3.3e-4, 1e-2, 0.3, 0.39]:
            x = phi_inv(v)
            np.testing.assert_allclose(phi(x), v, rtol=1e-10)


class TestWasserstein:
    def test_factor_small_y_limit(self):
        y = np.array([1e-10, 1e-8, 1e-6])
        np.testing.assert_allclose(wasserstein_factor(y), y / 64.0, rtol=1e-6)

    def test_factor_at_two(self):
        np.testing.assert_allclose(
            wasserstein_factor(2.0), 2.0 * (0.75 - np.sqrt(0.5)), rtol=1e-12
        )

    def test_scalar_case_matches_standard_deviation_gap(self):
        # d=1: W2 between N(0, s^2) and N(0, st^2) is |s - st|.
        sigma2, eps = 1.7, 0.8
        spec = GaussSpectrum(np.array([sigma2]))
        st2 = stationary_spectrum(spec, eps).eigenvalues[0]
        expected = (np.sqrt(sigma2) - np.sqrt(st2)) ** 2
        np.testing.assert_allclose(wasserstein2_gauss(spec, eps), expected, rtol=1e-12)

    def test_phi_w_boundary_value(self):
        # E(3) = 6.75 marks the edge of the proven region.
        np.testing.assert_allclose(energy_error_variance(3.0), 6.75, rtol=1e-15)
        with pytest.raises(ValueError, match="6.75"):
            phi_w_inv(6.76)

    def test_phi_w_inverse_round_trip(self):
        for v in [1e-9, 1e-4, 0.1, 3.0, 6.5]:
            x = phi_w_inv(v)
            np.testing.assert_allclose(phi_w(x), v, rtol=1e-9)

    def test_phi_w_continuity_at_zero(self):
        assert phi_w_inv(0.0) == 0.0
        # small-v asymptotics: E ~ y^3/16, W ~ y/64  =>  phi_w_inv ~ (16 v)^(1/3)/64
        v = 1e-12
        np.testing.assert_allclose(phi_w_inv(v), (16.0 * v) ** (1.0 / 3.0) / 64.0, rtol=1e-3)

    def test_isotropic_sharpness(self):
        # For isotropic spectra the Wasserstein bound is an identity.
        spec = GaussSpectrum(np.full(11, 0.7))
        for eps in [0.05, 0.4, 1.0]:
            lhs = eps * eps * phi_w_inv(eevpd_exact(spec, eps))
            rhs = wasserstein2_gauss(spec, eps) / spec.dim
            np.testing.assert_allclose(lhs, rhs, rtol=1e-8)


class TestBoundSweeps:
    # The bounds come from Jensen's inequality, so they are established only
    # while every eigendirection stays inside the convexity region; the
    # sweeps sample eps accordingly (see also the counterexample test below).

    def test_covariance_bound_on_random_spectra(self):
        rng = np.random.default_rng(20240601)
        checked = 0
        for _ in range(200):
            spec = random_spectrum(rng)
            eps_max = gauss.covariance_bound_max_eps(spec)
            for frac in rng.uniform(0.05, 0.999, size=5):
                eps = frac * eps_max
                v = eevpd_exact(spec, eps)
                if v >= 0.397:
                    continue
                checked += 1
                b2 = b2_exact(spec, eps)
                bound = phi_inv(v)
                assert b2 <= bound * (1 + 1e-12)
                if np.ptp(spec.eigenvalues) == 0:
                    np.testing.assert_allclose(b2, bound, atol=1e-9, rtol=1e-9)
                elif np.ptp(spec.eigenvalues) / spec.eigenvalues.min() > 1e-6:
                    assert b2 < bound
        assert checked > 300

    def test_covariance_bound_equality_on_isotropic(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            spec = GaussSpectrum(np.full(int(rng.integers(1, 64)), rng.uniform(0.1, 10.0)))
            eps = rng.uniform(0.05, 0.999) * gauss.covariance_bound_max_eps(spec)
            v = eevpd_exact(spec, eps)
            if v < 0.397:
                np.testing.assert_allclose(b2_exact(spec, eps), phi_inv(v), rtol=1e-9)

    def test_wasserstein_bound_on_random_spectra(self):
        rng = np.random.default_rng(987)
        checked = 0
        for _ in range(200):
            spec = random_spectrum(rng)
            eps_max = gauss.wasserstein_bound_max_eps(spec)
            for frac in rng.uniform(0.05, 0.999, size=5):
                eps = frac * eps_max
                v = eevpd_exact(spec, eps)
                if v >= 6.75:
                    continue
                checked += 1
                w2 = wasserstein2_gauss(spec, eps) / spec.dim
                assert w2 <= eps * eps * phi_w_inv(v) * (1 + 1e-12)
        assert checked > 300

    def test_aggregate_eevpd_condition_is_not_sufficient(self):
        # Regression note: with one direction outside the convexity region,
        # EEVPD < 0.397 alone does NOT imply the covariance bound.  This is
        # why the sweeps above restrict eps per spectrum.
        spec = GaussSpectrum(np.array([1.0] + [10.0] * 31))
        eps = 1.81
        v = eevpd_exact(spec, eps)
        assert v < 0.397
        assert eps > gauss.covariance_bound_max_eps(spec)
        np.testing.assert_allclose(v, 0.381794, rtol=1e-4)
        np.testing.assert_allclose(b2_exact(spec, eps), 0.647750, rtol=1e-4)
        assert b2_exact(spec, eps) > phi_inv(v)  # ratio ~1.61


class TestVerletMatrix:
    def test_determinant_one(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            sigma2 = float(rng.uniform(0.1, 10.0))
            eps = float(rng.uniform(0.0, 1.0)) * 2.0 * np.sqrt(sigma2) * 0.999
            A = verlet_matrix_1d(sigma2, eps)
            assert abs(np.linalg.det(A) - 1.0) < 1e-12

    def test_small_eps_rotation_limit(self):
        sigma2, eps = 1.0, 1e-4
        A = verlet_matrix_1d(sigma2, eps)
        h = eps / np.sqrt(sigma2)
        R = np.array([[np.cos(h), np.sin(h)], [-np.sin(h), np.cos(h)]])
        np.testing.assert_allclose(A, R, atol=1e-8)

    def test_unstable_raises(self):
        with pytest.raises(ValueError):
            verlet_matrix_1d(1.0, 2.0)

    def test_exact_flow_conserves_energy(self):
        # The continuous-time rotation (alpha -> 1 limit) keeps H constant.
        sigma2 = 2.0
        h = 0.3
        R = np.array(
            [
                [np.cos(h), np.sqrt(sigma2) * np.sin(h)],
                [-np.sin(h) / np.sqrt(sigma2), np.cos(h)],
            ]
        )
        z = np.array([1.3, -0.4])
        H = lambda z: 0.5 * z[1] ** 2 + 0.5 * z[0] ** 2 / sigma2
        for _ in range(100):
            z = R @ z
        np.testing.assert_allclose(H(z), H(np.array([1.3, -0.4])), rtol=1e-12)


class TestBoundReport:
    def test_fields_consistent(self):
        spec = GaussSpectrum(np.array([1.0, 2.0, 8.0]))
        rep = bound_report(spec, 0.6)
        assert rep.exact_b2 <= rep.b2_bound
        assert rep.exact_w2_per_dim <= rep.w2_bound_per_dim
        np.testing.assert_allclose(rep.eevpd, eevpd_exact(spec, 0.6), rtol=1e-15)


class TestOptimalStepSize:
    def test_fraction(self):
        assert optimal_bias_fraction() == 0.2

    def test_normalization_point(self):
        assert optimal_eps(4.0, 1.0) == pytest.approx(1.0, abs=1e-15)

    def test_matches_numeric_minimizer(self):
        rng = np.random.default_rng(11)
        for _ in range(20):
            c_v = float(rng.uniform(0.01, 10.0))
            c_b = float(rng.uniform(0.01, 10.0))
            rmse2 = lambda e: c_b * e**4 + c_v / e
            ref = optimal_eps(c_v, c_b)
            res = minimize_scalar(rmse2, bracket=(ref * 0.1, ref, ref * 10.0), tol=1e-14)
            np.testing.assert_allclose(ref, res.x, rtol=1e-6)

    def test_bias_fraction_at_optimum(self):
        c_v, c_b = 2.7, 0.31
        e = optimal_eps(c_v, c_b)
        bias2 = c_b * e**4
        total = c_b * e**4 + c_v / e
        assert abs(bias2 / total - 0.2) < 1e-9
