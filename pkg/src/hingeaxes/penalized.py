"""Penalized single-subject fit with a Gaussian prior on the five angles.

The prior beta ~ N(beta0, Sigma0) is carried around as an upper-triangular
factor Delta0 scaled so that Sigma0 = Delta0^{-1} Delta0^{-T} / (2 kappa):
with that scaling the posterior mode minimizes

    pen_sse(beta) = SSE(beta) + |Delta0 (beta - beta0)|^2

and both terms live on the same scale, so the Gauss-Newton machinery of the
unpenalized fit carries over with the normal matrix sum X X^T + Delta0^T
Delta0, which is always invertible.  For a diagonal prior with angle
standard deviations sigma_j this means Delta0 = diag(resid_sd / sigma_j)
where resid_sd = 1 / sqrt(2 kappa).

The curvature-based posterior covariance is
(sum X X^T + Delta0^T Delta0)^{-1} / (2 kappa), evaluated at the mode.
"""

from __future__ import annotations

import dataclasses
import math
from typing import Optional

import numpy as np
import scipy.linalg

from .errors import ValidationError
from .rotations import AnatomicalAngles
from .subject import (
    DEFAULT_ANGLES_DEG,
    FitOptions,
    _beta_array,
    _check_enough_frames,
    _gauss_newton,
    design_matrix,
    sse,
)
from .validation import check_rotation_matrices

# Spread of axis orientations across healthy adults, same order as
# DEFAULT_ANGLES_DEG (degrees).
DEFAULT_PRIOR_SD_DEG = (7.0, 4.0, 9.0, 11.0, 11.0)


@dataclasses.dataclass(frozen=True)
class PriorSpec:
    """Gaussian prior N(beta0, Sigma0) plus the error concentration kappa.

    delta0 is upper triangular with positive diagonal and satisfies
    Sigma0 = delta0^{-1} delta0^{-T} / (2 kappa).
    """

    beta0: np.ndarray
    delta0: np.ndarray
    kappa: float

    def __post_init__(self):
        beta0 = np.asarray(self.beta0, dtype=float).ravel()
        delta0 = np.asarray(self.delta0, dtype=float)
        if beta0.size != 5 or delta0.shape != (5, 5):
            raise ValidationError("prior needs beta0 (5,) and delta0 (5, 5)")
        if not (np.all(np.isfinite(beta0)) and np.all(np.isfinite(delta0))):
            raise ValidationError("prior contains non-finite values")
        if np.any(np.abs(delta0[np.tril_indices(5, k=-1)]) > 0):
            raise ValidationError("delta0 must be upper triangular")
        if np.any(np.diag(delta0) <= 0):
            raise ValidationError("delta0 must have a positive diagonal")
        if not (math.isfinite(self.kappa) and self.kappa > 0):
            raise ValidationError(f"kappa must be positive, got {self.kappa}")
        object.__setattr__(self, "beta0", beta0)
        object.__setattr__(self, "delta0", delta0)

    @classmethod
    def from_moments(cls, beta0, sigma0, kappa: float) -> "PriorSpec":
        """Build from a covariance matrix or a vector of sds (radians)."""
        sigma0 = np.asarray(sigma0, dtype=float)
        if sigma0.ndim == 1:
            if np.any(sigma0 <= 0):
                raise ValidationError("prior sds must be positive")
            delta0 = np.diag(1.0 / (sigma0 * math.sqrt(2.0 * kappa)))
        else:
            # Sigma0 = delta0^{-1} delta0^{-T} / (2 kappa) means
            # delta0^T delta0 = (2 kappa Sigma0)^{-1}; take the upper
            # factor U with U^T U = precision.
            precision = np.linalg.inv(2.0 * kappa * sigma0)
            precision = 0.5 * (precision + precision.T)
            delta0 = scipy.linalg.cholesky(precision, lower=False)
        return cls(np.asarray(beta0, dtype=float), delta0, float(kappa))

    @classmethod
    def default(cls, residual_sd_deg: float = 1.0) -> "PriorSpec":
        """Typical-adult prior; residual_sd_deg sets kappa."""
        kappa = 1.0 / (2.0 * math.radians(residual_sd_deg) ** 2)
        return cls.from_moments(
            np.radians(DEFAULT_ANGLES_DEG),
            np.radians(DEFAULT_PRIOR_SD_DEG),
            kappa,
        )

    @property
    def precision_quad(self) -> np.ndarray:
        """delta0^T delta0, the penalty quadratic form."""
        return self.delta0.T @ self.delta0

    @property
    def sigma0(self) -> np.ndarray:
        """Prior covariance (5, 5), radians^2."""
        inv = np.linalg.inv(self.delta0)
        return (inv @ inv.T) / (2.0 * self.kappa)

    @property
    def residual_sd(self) -> float:
        return 1.0 / math.sqrt(2.0 * self.kappa)


@dataclasses.dataclass
class PosteriorResult:
    """Penalized-fit output.

    cov is the curvature covariance at the mode; kappa_refit is the
    plug-in concentration re-estimated from the residuals at the mode
    (reported for diagnostics, not fed back into the penalty).
    """

    angles: AnatomicalAngles
    cov: np.ndarray
    sse: float
    penalized_sse: float
    kappa_refit: float
    residual_sd: float
    n_frames: int
    n_iter: int
    converged: bool
    prior: PriorSpec

    @property
    def beta(self) -> np.ndarray:
        return self.angles.to_array()

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.cov), 0.0, None))


def penalized_sse(rotations: np.ndarray, angles, prior: PriorSpec) -> float:
    b = _beta_array(angles)
    d = prior.delta0 @ (b - prior.beta0)
    return sse(rotations, b) + float(d @ d)


def penalized_sse_gradient(
    rotations: np.ndarray, angles, prior: PriorSpec
) -> np.ndarray:
    """Gradient of penalized_sse: -2 sum r X + 2 delta0' delta0 (beta - beta0)."""
    b = _beta_array(angles)
    x, r = design_matrix(rotations, b, with_residuals=True)
    return -2.0 * (x.T @ r) + 2.0 * (prior.precision_quad @ (b - prior.beta0))


def posterior_covariance(
    rotations: np.ndarray, angles, prior: PriorSpec
) -> np.ndarray:
    """Curvature covariance (sum X X' + delta0' delta0)^{-1} / (2 kappa)."""
    x = design_matrix(rotations, angles)
    h = x.T @ x + prior.precision_quad
    return np.linalg.inv(h) / (2.0 * prior.kappa)


def fit_map(
    rotations: np.ndarray,
    prior: Optional[PriorSpec] = None,
    init=None,
    options: Optional[FitOptions] = None,
) -> PosteriorResult:
    """Posterior-mode fit of the five angles under a Gaussian prior.

    Parameters
    ----------
    rotations : ndarray, shape (n, 3, 3)
    prior : PriorSpec, optional
        Defaults to the typical-adult prior with a one-degree residual sd.
    init : optional starting point; defaults to the prior mean.
    options : FitOptions, optional

    Notes
    -----
    The update solves (sum X X' + delta0' delta0) d =
    sum r X - delta0' delta0 (beta - beta0); the penalty keeps the system
    positive definite even when a frame sequence leaves some direction
    unidentified, so no ridge fallback is needed here.
    """
    options = options or FitOptions()
    prior = prior or PriorSpec.default()
    if options.validate:
        rotations = check_rotation_matrices(rotations)
    else:
        rotations = np.asarray(rotations, dtype=float)
    _check_enough_frames(rotations)
    beta0 = _beta_array(init) if init is not None else prior.beta0.copy()
    quad = prior.precision_quad

    def objective(beta):
        return penalized_sse(rotations, beta, prior)

    def design_fn(beta):
        x, r = design_matrix(rotations, beta, with_residuals=True)
        # augment the least-squares system with the prior pseudo-data so the
        # shared loop solves (X'X + Q) d = X'r - Q (beta - beta0)
        x_aug = np.vstack([x, prior.delta0])
        r_aug = np.concatenate([r, -prior.delta0 @ (beta - prior.beta0)])
        return x_aug, r_aug

    beta, pen_sse, n_iter, converged, _ = _gauss_newton(
        objective, design_fn, beta0, options
    )

    n = rotations.shape[0]
    fit_sse = sse(rotations, beta)
    cov = posterior_covariance(rotations, beta, prior)
    kappa_refit = n / (2.0 * fit_sse) if fit_sse > 0 else math.inf
    return PosteriorResult(
        angles=AnatomicalAngles.from_array(beta),
        cov=cov,
        sse=fit_sse,
        penalized_sse=pen_sse,
        kappa_refit=kappa_refit,
        residual_sd=math.sqrt(fit_sse / n),
        n_frames=n,
        n_iter=n_iter,
        converged=converged,
        prior=prior,
    )
