"""Linear mixed-model solver: closed forms, dense references, recovery."""

import math
import warnings

import numpy as np
import pytest
from scipy.linalg import block_diag

from hingeaxes.errors import ValidationError
from hingeaxes.lmm import (
    SD_FLOOR,
    LmmData,
    LmmOptions,
    _blups,
    _BREAKDOWN,
    _neg2ll,
    _profile,
    _Stats,
    fit_lmm,
)


def intercept_data(m, n, mu, sd_b, sd_e, rng):
    """Balanced one-way random-intercept draw."""
    b = rng.normal(0.0, sd_b, m)
    x, z, y = [], [], []
    for i in range(m):
        x.append(np.ones((n, 1)))
        z.append(np.ones((n, 1)))
        y.append(mu + b[i] + rng.normal(0.0, sd_e, n))
    return LmmData(x, z, y)


def dense_reference(data, d_rel, method="ml"):
    """Direct GLS/likelihood evaluation with an explicit block V."""
    x = np.vstack(data.x)
    y = np.concatenate(data.y)
    n, p = x.shape
    v = block_diag(*[np.eye(zi.shape[0]) + zi @ d_rel @ zi.T for zi in data.z])
    vinv = np.linalg.inv(v)
    xtvx = x.T @ vinv @ x
    beta = np.linalg.solve(xtvx, x.T @ vinv @ y)
    r = y - x @ beta
    rss = float(r @ vinv @ r)
    _, logdet = np.linalg.slogdet(v)
    if method == "ml":
        neg2 = n * math.log(2 * math.pi * rss / n) + logdet + n
    else:
        _, ldx = np.linalg.slogdet(xtvx)
        neg2 = (
            (n - p) * math.log(2 * math.pi * rss / (n - p)) + logdet + ldx + (n - p)
        )
    return beta, rss, logdet, neg2


M_BAL, N_BAL = 20, 5


@pytest.fixture(scope="module")
def balanced():
    return intercept_data(M_BAL, N_BAL, 2.0, 1.5, 0.7, np.random.default_rng(42))


@pytest.fixture(scope="module")
def balanced_sums(balanced):
    y = np.vstack(balanced.y)
    gm = y.mean()
    means = y.mean(axis=1)
    ssw = float(((y - means[:, None]) ** 2).sum())
    ssb = N_BAL * float(((means - gm) ** 2).sum())
    return gm, ssw, ssb, means


class TestBalancedClosedForm:
    """One-way balanced ANOVA has explicit ML and REML solutions."""

    def test_ml_estimates(self, balanced, balanced_sums):
        gm, ssw, ssb, _ = balanced_sums
        m, n = M_BAL, N_BAL
        fit = fit_lmm(balanced)
        sigma2 = ssw / (m * (n - 1))
        theta = (ssb * (n - 1) / ssw - 1.0) / n
        assert theta > 0  # interior solution, otherwise the forms differ
        assert fit.beta[0] == pytest.approx(gm, abs=1e-8)
        assert fit.sigma2 == pytest.approx(sigma2, abs=1e-8)
        assert fit.random_sd[0] ** 2 == pytest.approx(sigma2 * theta, abs=1e-8)
        assert fit.se_beta[0] == pytest.approx(
            math.sqrt(sigma2 * (1 + n * theta) / (m * n)), abs=1e-8
        )
        neg2 = m * n * (math.log(2 * math.pi * sigma2) + 1) + m * math.log(
            1 + n * theta
        )
        assert fit.loglik == pytest.approx(-0.5 * neg2, abs=1e-8)
        assert fit.converged and not fit.boundary.any()

    def test_reml_matches_anova(self, balanced, balanced_sums):
        gm, ssw, ssb, _ = balanced_sums
        m, n = M_BAL, N_BAL
        fit = fit_lmm(balanced, options=LmmOptions(method="reml"))
        msw = ssw / (m * (n - 1))
        msb = ssb / (m - 1)
        assert fit.beta[0] == pytest.approx(gm, abs=1e-8)
        assert fit.sigma2 == pytest.approx(msw, abs=1e-7)
        assert fit.random_sd[0] ** 2 == pytest.approx((msb - msw) / n, abs=1e-7)

    def test_blups_shrink_group_means(self, balanced, balanced_sums):
        gm, _, _, means = balanced_sums
        fit = fit_lmm(balanced)
        n = N_BAL
        theta = fit.random_sd[0] ** 2 / fit.sigma2
        shrink = n * theta / (1 + n * theta)
        assert np.allclose(
            fit.blups[:, 0], shrink * (means - fit.beta[0]), atol=1e-8
        )
        assert abs(fit.blups[:, 0].mean()) < 1e-8


@pytest.fixture(scope="module")
def ragged():
    rng = np.random.default_rng(7)
    x, z, y = [], [], []
    for _ in range(12):
        n_i = rng.integers(3, 9)
        t = rng.normal(size=n_i)
        x.append(np.column_stack([np.ones(n_i), t, rng.normal(size=n_i)]))
        z.append(np.column_stack([np.ones(n_i), t]))
        y.append(rng.normal(size=n_i))
    return LmmData(x, z, y)


class TestAgainstDenseAlgebra:

    def test_profile_matches_dense(self, ragged):
        stats = _Stats(ragged)
        rng = np.random.default_rng(8)
        for _ in range(5):
            factor = np.diag(np.exp(rng.uniform(-2, 2, 2)))
            beta, rss, logdet, xtvx = _profile(stats, factor)
            d_beta, d_rss, d_logdet, _ = dense_reference(ragged, factor @ factor.T)
            assert np.allclose(beta, d_beta, rtol=1e-10)
            assert rss == pytest.approx(d_rss, rel=1e-10)
            assert logdet == pytest.approx(d_logdet, rel=1e-10)
            x = np.vstack(ragged.x)
            v = block_diag(
                *[np.eye(zi.shape[0]) + zi @ factor @ factor.T @ zi.T for zi in ragged.z]
            )
            assert np.allclose(xtvx, x.T @ np.linalg.solve(v, x), rtol=1e-10)

    def test_neg2ll_matches_dense(self, ragged):
        stats = _Stats(ragged)
        factor = np.diag([0.9, 1.7])
        for method in ("ml", "reml"):
            want = dense_reference(ragged, factor @ factor.T, method)[3]
            assert _neg2ll(stats, factor, method) == pytest.approx(want, rel=1e-10)

    def test_blups_match_dense_formula(self, ragged):
        stats = _Stats(ragged)
        factor = np.diag([1.2, 0.6])
        d_rel = factor @ factor.T
        beta, *_ = _profile(stats, factor)
        got = _blups(stats, factor, beta)
        for i, (xi, zi, yi) in enumerate(zip(ragged.x, ragged.z, ragged.y)):
            vi = np.eye(yi.size) + zi @ d_rel @ zi.T
            want = d_rel @ zi.T @ np.linalg.solve(vi, yi - xi @ beta)
            assert np.allclose(got[i], want, rtol=1e-10, atol=1e-12)

    def test_singular_gls_reported_as_penalty(self):
        # all-zero fixed-effect column: X'V^-1 X is exactly singular and
        # the objective must come back as a large finite penalty (an inf
        # or an exception would abort the optimizer's line search)
        bad = LmmData(
            [np.zeros((5, 1))], [np.ones((5, 1))], [np.arange(5.0)]
        )
        val = _neg2ll(_Stats(bad), np.eye(1), "ml")
        assert math.isfinite(val) and val == _BREAKDOWN


class TestBoundaryAndLimits:
    def test_zero_variance_component_flags_boundary(self):
        rng = np.random.default_rng(11)
        data = intercept_data(15, 8, 1.0, 0.0, 1.0, rng)
        fit = fit_lmm(data)
        y = np.concatenate(data.y)
        assert fit.boundary[0]
        assert fit.random_sd[0] <= 10 * SD_FLOOR
        # with D at zero GLS collapses to OLS
        assert fit.beta[0] == pytest.approx(y.mean(), abs=1e-6)
        assert fit.sigma2 == pytest.approx(y.var(), rel=1e-4)

    def test_diffuse_limit_weights_groups_equally(self):
        rng = np.random.default_rng(12)
        x, z, y = [], [], []
        for n_i in (3, 12, 25, 7, 40):
            x.append(np.ones((n_i, 1)))
            z.append(np.ones((n_i, 1)))
            y.append(rng.normal(rng.normal(), 0.5, n_i))
        data = LmmData(x, z, y)
        beta, *_ = _profile(_Stats(data), np.diag([1e4]))
        group_means = np.array([yi.mean() for yi in y])
        assert beta[0] == pytest.approx(group_means.mean(), abs=1e-5)

    def test_callback_sees_monotone_objective(self):
        rng = np.random.default_rng(13)
        data = intercept_data(25, 6, 0.5, 1.0, 0.8, rng)
        vals = []
        fit = fit_lmm(data, init_sd_rel=[15.0], callback=vals.append)
        assert fit.converged
        assert len(vals) >= 2
        assert all(b <= a + 1e-8 for a, b in zip(vals, vals[1:]))
        assert vals[-1] == pytest.approx(-2.0 * fit.loglik, abs=1e-8)


class TestUnstructured:
    def test_warns_and_nests_diagonal(self):
        rng = np.random.default_rng(14)
        cov_b = np.array([[1.0, 0.7], [0.7, 1.0]])
        chol = np.linalg.cholesky(cov_b)
        x, z, y = [], [], []
        for _ in range(40):
            t = rng.normal(size=8)
            zi = np.column_stack([np.ones(8), t])
            bi = chol @ rng.normal(size=2)
            x.append(zi)
            z.append(zi)
            y.append(zi @ (np.array([1.0, -0.5]) + bi) + rng.normal(0, 0.5, 8))
        data = LmmData(x, z, y)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            diag_fit = fit_lmm(data)
        with pytest.warns(UserWarning, match="experimental"):
            full_fit = fit_lmm(data, options=LmmOptions(cov_structure="unstructured"))
        # the diagonal model is nested, so the full ML fit cannot be worse
        assert full_fit.loglik >= diag_fit.loglik - 1e-6
        assert np.allclose(full_fit.random_cov, full_fit.random_cov.T)
        assert np.linalg.eigvalsh(full_fit.random_cov).min() >= -1e-12
        corr = full_fit.random_cov[0, 1] / (
            full_fit.random_sd[0] * full_fit.random_sd[1]
        )
        assert corr > 0.3


class TestRecovery:
    def test_replicated_estimates_center_on_truth(self):
        mu, slope, sd_b, sd_e = 1.0, -0.5, 0.8, 0.5
        rng = np.random.default_rng(15)
        est = []
        for _ in range(30):
            x, z, y = [], [], []
            b = rng.normal(0.0, sd_b, 100)
            for i in range(100):
                t = rng.normal(size=5)
                x.append(np.column_stack([np.ones(5), t]))
                z.append(np.ones((5, 1)))
                y.append(mu + b[i] + slope * t + rng.normal(0, sd_e, 5))
            fit = fit_lmm(LmmData(x, z, y))
            est.append([fit.beta[0], fit.beta[1], fit.random_sd[0], fit.residual_sd])
        est = np.asarray(est)
        truth = np.array([mu, slope, sd_b, sd_e])
        mc_se = est.std(axis=0, ddof=1) / math.sqrt(est.shape[0])
        assert np.all(np.abs(est.mean(axis=0) - truth) <= 3.0 * mc_se)

    def test_reported_se_tracks_sampling_scatter(self):
        # empirical variance of 200 draws has ~10% relative sd, hence the
        # wide band; the point is catching gross se miscalibration
        rng = np.random.default_rng(16)
        se, betas = [], []
        for _ in range(200):
            data = intercept_data(30, 5, 0.0, 1.0, 0.7, rng)
            fit = fit_lmm(data)
            betas.append(fit.beta[0])
            se.append(fit.se_beta[0])
        ratio = np.mean(np.square(se)) / np.var(betas, ddof=1)
        assert 0.7 < ratio < 1.3

    def test_cov_beta_consistent_with_se(self):
        data = intercept_data(10, 4, 0.0, 1.0, 1.0, np.random.default_rng(17))
        fit = fit_lmm(data)
        assert np.allclose(fit.se_beta, np.sqrt(np.diag(fit.cov_beta)), rtol=1e-12)


class TestValidation:
    def test_block_shape_mismatch(self):
        with pytest.raises(ValidationError, match="inconsistent"):
            LmmData([np.ones((3, 1))], [np.ones((4, 1))], [np.zeros(3)])

    def test_non_finite_rejected(self):
        y = np.array([0.0, np.nan, 1.0])
        with pytest.raises(ValidationError, match="non-finite"):
            LmmData([np.ones((3, 1))], [np.ones((3, 1))], [y])

    def test_needs_more_observations_than_parameters(self):
        with pytest.raises(ValidationError, match="observations"):
            LmmData([np.ones((2, 2))], [np.ones((2, 1))], [np.zeros(2)])

    def test_bad_options_and_init(self):
        with pytest.raises(ValidationError):
            LmmOptions(method="mle")
        with pytest.raises(ValidationError):
            LmmOptions(cov_structure="full")
        data = intercept_data(4, 3, 0.0, 1.0, 1.0, np.random.default_rng(18))
        with pytest.raises(ValidationError):
            fit_lmm(data, init_sd_rel=[-1.0])
        with pytest.raises(ValidationError):
            fit_lmm(data, init_sd_rel=[1.0, 1.0])
