"""Estimator-style wrappers around the fitting routines.

These follow the fit/attributes convention: constructor arguments are plain
hyperparameters (degrees at this level, matching the I/O convention),
``fit`` consumes rotation data and sets trailing-underscore attributes, and
``get_params``/``set_params`` work for free through ``BaseEstimator``, so
the wrappers compose with model-selection utilities.
"""

from __future__ import annotations

import math
from typing import Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator

from .errors import ValidationError
from .penalized import PriorSpec, fit_map
from .population import (
    PopulationModel,
    PopulationOptions,
    WaldTest,
    fit_population,
    wald_test,
)
from .rotations import AnatomicalAngles
from .subject import (
    FitOptions,
    fit_subject,
    fit_subject_reduced,
    residual_angles,
    residuals,
    profile_loglik,
)


def _angles_rad(values_deg) -> Optional[np.ndarray]:
    if values_deg is None:
        return None
    arr = np.asarray(values_deg, dtype=float).ravel()
    return np.radians(arr)


class SubjectAxes(BaseEstimator):
    """Maximum-likelihood axis estimation for a single subject.

    Parameters
    ----------
    model : {"full", "reduced"}
        Five free angles, or four with the offset tied to the axes.
    init_deg : sequence of 5 floats, optional
        Starting angles in degrees.
    grid_search : bool
        Coarse initial search over axis inclinations.
    tol, max_iter : Gauss-Newton controls.

    Attributes set by fit: ``angles_`` (AnatomicalAngles), ``angles_deg_``,
    ``cov_`` (radians^2), ``kappa_``, ``residual_sd_deg_``, ``result_``.
    """

    def __init__(
        self,
        model: str = "full",
        init_deg: Optional[Sequence[float]] = None,
        grid_search: bool = False,
        tol: float = 1e-10,
        max_iter: int = 100,
    ):
        self.model = model
        self.init_deg = init_deg
        self.grid_search = grid_search
        self.tol = tol
        self.max_iter = max_iter

    def _options(self) -> FitOptions:
        return FitOptions(
            tol=self.tol, max_iter=self.max_iter, grid_search=self.grid_search
        )

    def fit(self, X, y=None):
        if self.model not in ("full", "reduced"):
            raise ValidationError(f"model must be 'full' or 'reduced', got {self.model}")
        init = _angles_rad(self.init_deg)
        fitter = fit_subject if self.model == "full" else fit_subject_reduced
        result = fitter(X, init=init, options=self._options())
        self.result_ = result
        self.angles_ = result.angles
        self.angles_deg_ = result.angles.to_degrees()
        self.cov_ = result.cov
        self.kappa_ = result.kappa
        self.residual_sd_deg_ = math.degrees(result.residual_sd)
        self.converged_ = result.converged
        return self

    def transform(self, X) -> np.ndarray:
        """Per-frame residual chords at the fitted angles."""
        if self.model == "reduced":
            from .subject import residuals_reduced

            return residuals_reduced(np.asarray(X, float), self.angles_)
        return residuals(np.asarray(X, float), self.angles_)

    def predict(self, X) -> np.ndarray:
        """Per-frame offset angles theta (radians) at the fitted axes."""
        return residual_angles(np.asarray(X, float), self.angles_)

    def score(self, X, y=None) -> float:
        """Profile log-likelihood of new frames at the fitted angles."""
        return profile_loglik(np.asarray(X, float), self.angles_)


class PenalizedSubjectAxes(BaseEstimator):
    """Posterior-mode axis estimation under a Gaussian prior.

    Prior moments are given in degrees; residual_sd_deg fixes the error
    concentration (kappa = 1 / (2 sd^2) with sd in radians).  Attributes
    set by fit: ``angles_``, ``angles_deg_``, ``cov_``, ``se_deg_``,
    ``result_``.
    """

    def __init__(
        self,
        prior_mean_deg: Optional[Sequence[float]] = None,
        prior_sd_deg: Optional[Sequence[float]] = None,
        residual_sd_deg: float = 1.0,
        tol: float = 1e-10,
        max_iter: int = 100,
    ):
        self.prior_mean_deg = prior_mean_deg
        self.prior_sd_deg = prior_sd_deg
        self.residual_sd_deg = residual_sd_deg
        self.tol = tol
        self.max_iter = max_iter

    def _prior(self) -> PriorSpec:
        base = PriorSpec.default(self.residual_sd_deg)
        mean = _angles_rad(self.prior_mean_deg)
        sds = _angles_rad(self.prior_sd_deg)
        if mean is None and sds is None:
            return base
        return PriorSpec.from_moments(
            base.beta0 if mean is None else mean,
            np.sqrt(np.diag(base.sigma0)) if sds is None else sds,
            base.kappa,
        )

    def fit(self, X, y=None):
        result = fit_map(
            X,
            prior=self._prior(),
            options=FitOptions(tol=self.tol, max_iter=self.max_iter),
        )
        self.result_ = result
        self.angles_ = result.angles
        self.angles_deg_ = result.angles.to_degrees()
        self.cov_ = result.cov
        self.se_deg_ = np.degrees(result.se)
        self.converged_ = result.converged
        return self

    def transform(self, X) -> np.ndarray:
        return residuals(np.asarray(X, float), self.angles_)

    def score(self, X, y=None) -> float:
        return profile_loglik(np.asarray(X, float), self.angles_)


class PopulationAxes(BaseEstimator):
    """Mixed-effects axis estimation over many subjects.

    ``fit(X, y)`` takes X as a sequence of (n_i, 3, 3) arrays and y as
    optional 0/1 group codes (required for the two-sample design).
    Attributes set by fit: ``fixed_deg_``, ``se_deg_``, ``sigma0_deg_``,
    ``residual_sd_deg_``, ``param_names_``, ``result_``.
    """

    def __init__(
        self,
        algorithm: str = "plme",
        design: str = "one-sample",
        contrasts: Sequence[str] = ("s1", "s2"),
        max_outer: int = 100,
        tol_fixed: float = 1e-6,
    ):
        self.algorithm = algorithm
        self.design = design
        self.contrasts = contrasts
        self.max_outer = max_outer
        self.tol_fixed = tol_fixed

    def fit(self, X, y=None):
        model = PopulationModel(design=self.design, contrasts=tuple(self.contrasts))
        options = PopulationOptions(
            algorithm=self.algorithm,
            max_outer=self.max_outer,
            tol_fixed=self.tol_fixed,
        )
        result = fit_population(list(X), groups=y, model=model, options=options)
        self.result_ = result
        self.param_names_ = result.param_names
        self.fixed_deg_ = np.degrees(result.fixed)
        self.se_deg_ = np.degrees(result.se_fixed)
        self.sigma0_deg_ = np.degrees(result.sigma0)
        self.residual_sd_deg_ = math.degrees(result.residual_sd)
        self.converged_ = result.converged
        return self

    def wald(self, param) -> WaldTest:
        return wald_test(self.result_, param)
