"""Single-subject model: residuals, design, likelihood, ML fits."""

import math

import numpy as np
import pytest
from scipy.optimize import minimize

from hingeaxes.errors import ConditioningError, ValidationError
from hingeaxes.rotations import AnatomicalAngles, cardan_compose_xzy, frame_st, frame_tt
from hingeaxes.simulate import simulate_subject
from hingeaxes.subject import (
    FitOptions,
    _beta_array,
    default_angles,
    design_matrix,
    design_matrix_reduced,
    design_vector,
    fit_subject,
    fit_subject_reduced,
    gamma0_from_axes,
    loglik,
    model_rotation,
    profile_loglik,
    residual_angles,
    residuals,
    score,
    sse,
    sse_gradient,
    sse_reduced,
)

BETA0 = _beta_array(default_angles())


def rich_motion(beta, n, rng, error_sd=0.0):
    """Frames spanning wide motion where all five angles are identified."""
    alpha = rng.uniform(-math.radians(60), math.radians(60), n)
    phi = rng.uniform(-math.radians(40), math.radians(40), n)
    clean = model_rotation(beta, alpha, phi)
    if error_sd == 0.0:
        return clean
    from hingeaxes.rotations import sample_error_rotation

    return clean @ sample_error_rotation(error_sd, rng=rng, size=n)


class TestResiduals:
    def test_error_free_residual_angle_is_offset(self):
        # theta depends only on the axes: any motion gives gamma0 exactly
        rng = np.random.default_rng(2)
        alpha = rng.uniform(-1.0, 1.0, 40)
        phi = rng.uniform(-0.7, 0.7, 40)
        rot = model_rotation(BETA0, alpha, phi)
        theta = residual_angles(rot, BETA0)
        assert np.abs(theta - BETA0[4]).max() < 1e-12
        assert np.abs(residuals(rot, BETA0)).max() < 1e-12
        assert sse(rot, BETA0) < 1e-24

    def test_identity_data_zero_angles(self):
        rot = np.broadcast_to(np.eye(3), (8, 3, 3)).copy()
        zero = np.zeros(5)
        assert np.abs(residual_angles(rot, zero)).max() == 0.0

    def test_formula_recomputation(self):
        rng = np.random.default_rng(3)
        rot = simulate_subject(BETA0, 20, rng, 0.02)
        a1 = frame_tt(BETA0[0], BETA0[1])[:, 0]
        b2 = frame_st(BETA0[2], BETA0[3])[:, 1]
        expected = -np.arcsin(np.einsum("i,nij,j->n", a1, rot, b2))
        assert np.allclose(residual_angles(rot, BETA0), expected, atol=1e-14)
        assert np.allclose(
            residuals(rot, BETA0),
            2.0 * np.sin((expected - BETA0[4]) / 2.0),
            atol=1e-14,
        )

    def test_residual_sd_matches_error_level(self):
        rng = np.random.default_rng(4)
        rot = simulate_subject(BETA0, 200, rng, math.radians(1.0))
        fit = fit_subject(rot)
        assert math.radians(0.8) < fit.residual_sd < math.radians(1.2)


class TestDesignMatrix:
    def test_matches_finite_differences(self):
        rng = np.random.default_rng(5)
        rot = simulate_subject(BETA0, 30, rng, math.radians(1.0))
        x = design_matrix(rot, BETA0)
        h = 1e-6
        fd = np.empty_like(x)
        for j in range(5):
            step = np.zeros(5)
            step[j] = h
            fd[:, j] = -(
                residuals(rot, BETA0 + step) - residuals(rot, BETA0 - step)
            ) / (2 * h)
        assert np.abs(x - fd).max() < 1e-5

    def test_offset_column_closed_form(self):
        rng = np.random.default_rng(6)
        rot = simulate_subject(BETA0, 25, rng, math.radians(1.0))
        x = design_matrix(rot, BETA0)
        theta = residual_angles(rot, BETA0)
        assert np.allclose(x[:, 4], np.cos((theta - BETA0[4]) / 2.0), atol=1e-14)

    def test_design_vector_matches_row(self):
        rng = np.random.default_rng(7)
        rot = simulate_subject(BETA0, 5, rng, math.radians(1.0))
        x = design_matrix(rot, BETA0)
        assert np.allclose(design_vector(rot[2], BETA0), x[2], atol=1e-15)

    def test_singular_direction_raises(self):
        # align the two axis directions: |A1^T R B2| = 1
        beta = np.array([0.0, 0.0, 0.0, 0.0, 0.0])
        a1 = frame_tt(0.0, 0.0)[:, 0]
        rot = np.eye(3)[None]
        # send B2 = e2 onto A1 = e1 with a -90 degree z rotation
        from hingeaxes.rotations import axis_rotation

        rot = axis_rotation(-math.pi / 2, "z")[None]
        assert abs(a1 @ rot[0] @ frame_st(0.0, 0.0)[:, 1]) > 1 - 1e-12
        with pytest.raises(ConditioningError):
            design_matrix(rot, beta)

    def test_well_conditioned_under_default_motion(self):
        rng = np.random.default_rng(8)
        rot = simulate_subject(BETA0, 50, rng, math.radians(1.0))
        x = design_matrix(rot, BETA0)
        assert np.linalg.cond(x) > 100.0


class TestScore:
    def test_matches_loglik_finite_differences(self):
        rng = np.random.default_rng(9)
        rot = simulate_subject(BETA0, 50, rng, math.radians(1.0))
        kappa = 1.0 / (2.0 * math.radians(1.0) ** 2)
        h = 1e-6
        worst = 0.0
        for _ in range(20):
            beta = BETA0 + rng.normal(0.0, math.radians(3.0), 5)
            s = score(rot, beta, kappa)
            fd = np.empty(5)
            for j in range(5):
                step = np.zeros(5)
                step[j] = h
                fd[j] = (
                    loglik(rot, beta + step, kappa)
                    - loglik(rot, beta - step, kappa)
                ) / (2 * h)
            worst = max(worst, np.linalg.norm(s - fd) / np.linalg.norm(s))
        assert worst < 1e-6

    def test_score_is_scaled_sse_gradient(self):
        rng = np.random.default_rng(10)
        rot = simulate_subject(BETA0, 30, rng, math.radians(1.0))
        kappa = 700.0
        assert np.allclose(
            score(rot, BETA0, kappa),
            -kappa * sse_gradient(rot, BETA0),
            atol=1e-12,
        )

    def test_near_zero_at_ml_estimate(self):
        rng = np.random.default_rng(11)
        rot = simulate_subject(BETA0, 60, rng, math.radians(1.0))
        fit = fit_subject(rot)
        g = sse_gradient(rot, fit.beta)
        assert np.abs(g).max() < 1e-8


class TestLikelihood:
    def test_profile_equals_plugin_kappa(self):
        rng = np.random.default_rng(12)
        rot = simulate_subject(BETA0, 40, rng, math.radians(1.0))
        n = rot.shape[0]
        kappa_hat = n / (2.0 * sse(rot, BETA0))
        assert profile_loglik(rot, BETA0) == pytest.approx(
            loglik(rot, BETA0, kappa_hat), rel=1e-12
        )

    def test_profiled_motion_angles_attain_residual_bound(self):
        # the concentrated exponent tr(Psi^T R) - 3 maximized over the
        # motion angles equals -4 sin^2((theta - gamma0) / 2)
        rng = np.random.default_rng(13)
        a = frame_tt(BETA0[0], BETA0[1])
        b = frame_st(BETA0[2], BETA0[3])
        grid = np.linspace(-math.pi, math.pi, 241)
        ga, gp = np.meshgrid(grid, grid, indexing="ij")
        for _ in range(3):
            rot = simulate_subject(BETA0, 1, rng, 0.02)[0]
            theta = residual_angles(rot[None], BETA0)[0]
            bound = -4.0 * math.sin((theta - BETA0[4]) / 2.0) ** 2
            psi = a @ cardan_compose_xzy(ga.ravel(), BETA0[4], gp.ravel()) @ b.T
            exponent = np.einsum("nij,ij->n", psi, rot) - 3.0
            assert exponent.max() <= bound + 1e-12
            assert bound - exponent.max() < 5e-3


class TestFitSubject:
    def test_error_free_recovery(self):
        rng = np.random.default_rng(14)
        rot = rich_motion(BETA0, 60, rng)
        init = AnatomicalAngles.from_array(BETA0 + np.radians([3, -2, 4, -3, 2]))
        fit = fit_subject(rot, init=init)
        assert fit.converged
        assert np.abs(fit.beta - BETA0).max() < 1e-8
        assert fit.sse < 1e-18

    def test_noisy_recovery_within_sampling_error(self):
        rng = np.random.default_rng(15)
        rot = simulate_subject(BETA0, 200, rng, math.radians(1.0))
        fit = fit_subject(rot)
        assert fit.converged
        assert np.abs(fit.beta - BETA0).max() < math.radians(3.0)

    def test_kappa_and_residual_sd_definitions(self):
        rng = np.random.default_rng(16)
        rot = simulate_subject(BETA0, 50, rng, math.radians(1.0))
        fit = fit_subject(rot)
        assert fit.kappa == pytest.approx(fit.n_frames / (2.0 * fit.sse), rel=1e-12)
        assert fit.residual_sd == pytest.approx(
            math.sqrt(fit.sse / fit.n_frames), rel=1e-12
        )

    def test_descent_from_scattered_starts(self):
        rng = np.random.default_rng(17)
        rot = simulate_subject(BETA0, 40, rng, math.radians(2.0))
        for _ in range(10):
            init = BETA0 + rng.normal(0.0, math.radians(10.0), 5)
            fit = fit_subject(rot, init=AnatomicalAngles.from_array(init))
            assert fit.sse <= sse(rot, init) * (1 + 1e-12)

    def test_grid_search_escapes_bad_start(self):
        rng = np.random.default_rng(18)
        truth = _beta_array(
            AnatomicalAngles.from_degrees(40.0, -10.0, 5.0, 30.0, 12.0)
        )
        rot = rich_motion(truth, 80, rng, error_sd=math.radians(0.3))
        opts = FitOptions(grid_search=True)
        fit = fit_subject(rot, options=opts)
        assert fit.converged
        assert np.abs(fit.beta - truth).max() < math.radians(2.0)

    def test_degenerate_motion_sets_ridge_flag(self):
        one = simulate_subject(BETA0, 1, np.random.default_rng(19), 0.0)
        rot = np.repeat(one, 10, axis=0)
        fit = fit_subject(rot, options=FitOptions(max_iter=3))
        assert fit.ridge_used
        assert fit.condition_number > 1e12

    def test_too_few_frames_rejected(self):
        rot = simulate_subject(BETA0, 5, np.random.default_rng(20), 0.0)
        with pytest.raises(ValidationError):
            fit_subject(rot)

    def test_summary_mentions_all_angles(self):
        rng = np.random.default_rng(21)
        fit = fit_subject(simulate_subject(BETA0, 30, rng, math.radians(1.0)))
        text = fit.summary()
        for name in ("t1", "t2", "s1", "s2", "gamma0", "residual sd"):
            assert name in text


class TestReducedModel:
    def test_gamma0_from_axes_closed_form(self):
        a1 = frame_tt(BETA0[0], BETA0[1])[:, 0]
        b2 = frame_st(BETA0[2], BETA0[3])[:, 1]
        expected = -math.asin(float(a1 @ b2))
        assert gamma0_from_axes(*BETA0[:4]) == pytest.approx(expected, abs=1e-15)

    def test_design_matches_finite_differences(self):
        rng = np.random.default_rng(22)
        rot = simulate_subject(BETA0, 25, rng, math.radians(1.0))
        beta4 = BETA0[:4]
        x = design_matrix_reduced(rot, beta4)
        h = 1e-6

        def resid4(b4):
            theta = residual_angles(rot, np.r_[b4, 0.0])
            return 2.0 * np.sin((theta - gamma0_from_axes(*b4)) / 2.0)

        for j in range(4):
            step = np.zeros(4)
            step[j] = h
            fd = -(resid4(beta4 + step) - resid4(beta4 - step)) / (2 * h)
            assert np.abs(x[:, j] - fd).max() < 1e-5

    def test_error_free_constrained_recovery(self):
        rng = np.random.default_rng(23)
        beta4 = BETA0[:4]
        truth = np.r_[beta4, gamma0_from_axes(*beta4)]
        rot = rich_motion(truth, 60, rng)
        init = AnatomicalAngles.from_array(truth + np.radians([2, -2, 3, -2, 0]))
        fit = fit_subject_reduced(rot, init=init)
        assert fit.converged
        assert fit.model == "reduced"
        assert np.abs(fit.beta[:4] - beta4).max() < 1e-6
        assert fit.angles.gamma0 == pytest.approx(truth[4], abs=1e-6)

    def test_derived_offset_consistency(self):
        rng = np.random.default_rng(24)
        rot = simulate_subject(BETA0, 40, rng, math.radians(1.0))
        fit = fit_subject_reduced(rot)
        assert fit.angles.gamma0 == pytest.approx(
            gamma0_from_axes(*fit.beta[:4]), abs=1e-12
        )
        assert fit.cov.shape == (4, 4)

    def test_matches_derivative_free_minimizer(self):
        rng = np.random.default_rng(25)
        beta4 = BETA0[:4]
        truth = np.r_[beta4, gamma0_from_axes(*beta4)]
        rot = rich_motion(truth, 60, rng, error_sd=math.radians(0.3))
        fit = fit_subject_reduced(rot)
        oracle = minimize(
            lambda b: sse_reduced(rot, b),
            fit.beta[:4] + 1e-3,
            method="Nelder-Mead",
            options={"xatol": 1e-10, "fatol": 1e-14, "maxiter": 4000},
        )
        assert fit.sse <= oracle.fun + 1e-10
        assert np.abs(fit.beta[:4] - oracle.x).max() < 1e-4

    def test_full_model_attains_lower_sse(self):
        rng = np.random.default_rng(26)
        rot = simulate_subject(BETA0, 50, rng, math.radians(1.0))
        full = fit_subject(rot)
        red = fit_subject_reduced(rot)
        assert full.sse <= red.sse * (1 + 1e-10)

    def test_too_few_frames_rejected(self):
        rot = simulate_subject(BETA0, 4, np.random.default_rng(27), 0.0)
        with pytest.raises(ValidationError):
            fit_subject_reduced(rot)
