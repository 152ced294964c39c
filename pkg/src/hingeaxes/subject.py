"""Single-subject model and maximum-likelihood fit.

Observation model
-----------------
A trial yields rotation matrices R_1, ..., R_n of the distal segment
relative to the proximal one.  With upper-axis frame A = frame_tt(t1, t2),
lower-axis frame B = frame_st(s1, s2) and per-frame motion angles
(alpha_i, phi_i) about the two hinges, the noise-free rotation is

    Psi_i = A Rx(alpha_i) Rz(gamma0) Ry(phi_i) B^T

and the data are R_i = Psi_i E_i with small error rotations E_i.  The
middle Cardan angle of A^T R_i B in the X-Z-Y convention,

    theta_i = -arcsin(A1^T R_i B2),

depends only on the axis directions and equals gamma0 for error-free data,
whatever the motion angles.  Fitting therefore minimizes the chord sum of
squares

    SSE(beta) = sum_i r_i^2,    r_i = 2 sin((theta_i - gamma0) / 2),

over beta = (t1, t2, s1, s2, gamma0).  Under an isotropic concentration
parameter kappa the approximate log-likelihood is
(n/2) log(kappa / pi) - kappa SSE, so the maximizer of the likelihood is
the minimizer of SSE and kappa_hat = n / (2 SSE).

The design vector X_i used by the Gauss-Newton loop is the negative
gradient of r_i, so first-order optimality reads sum_i r_i X_i = 0 and the
update is beta += (sum X X^T)^{-1} sum r X with step halving for global
monotone descent.

A reduced four-angle variant drops gamma0 as a free parameter and ties it
to the axes through gamma0 = -arcsin(A1^T B2), which is exact when the two
axis directions span the joint's resting orientation.
"""

from __future__ import annotations

import dataclasses
import math
from typing import Optional, Tuple

import numpy as np

from .errors import ConditioningError, DomainError, ValidationError
from .rotations import (
    AnatomicalAngles,
    fold_half_pi,
    frame_st,
    frame_tt,
)
from .validation import check_rotation_matrices

# Orientation means for a typical adult ankle, used as the default starting
# point (and as the default prior mean in the penalized fit): upper-axis
# inclination/deviation, lower-axis inclination/deviation, offset (degrees).
DEFAULT_ANGLES_DEG = (8.0, -6.0, 42.0, 23.0, 17.0)

# |A1^T R B2| above this bound makes the arcsin derivative blow up.
_DERIV_BOUND = 1.0 - 1e-9


def default_angles() -> AnatomicalAngles:
    return AnatomicalAngles.from_degrees(*DEFAULT_ANGLES_DEG)


@dataclasses.dataclass
class FitOptions:
    """Controls for the Gauss-Newton loops.

    tol is on the max-norm of the proposed (unhalved) update, radians.
    When cond(sum X X^T) exceeds cond_limit a ridge ridge_rel * tr/5 is
    added before solving and the result is flagged.  grid_search evaluates
    a coarse grid of axis inclinations around the starting point and starts
    from the best cell; useful when no subject-specific init is available.
    """

    tol: float = 1e-10
    max_iter: int = 200
    max_halvings: int = 10
    cond_limit: float = 1e12
    ridge_rel: float = 1e-8
    grid_search: bool = False
    validate: bool = True


@dataclasses.dataclass
class SubjectFitResult:
    """Fit output for one subject.

    cov is the estimated covariance of the angle estimates: for the full
    model (sse / n) (sum X X^T)^{-1}, shape (5, 5); for the reduced model
    the analogue over (t1, t2, s1, s2), shape (4, 4).  kappa is the
    plug-in concentration n / (2 sse) (inf for exactly noise-free data)
    and residual_sd = sqrt(sse / n) its standard-deviation counterpart in
    radians.
    """

    angles: AnatomicalAngles
    kappa: float
    residual_sd: float
    cov: np.ndarray
    sse: float
    n_frames: int
    n_iter: int
    converged: bool
    condition_number: float
    ridge_used: bool
    model: str = "full"

    @property
    def beta(self) -> np.ndarray:
        return self.angles.to_array()

    @property
    def se(self) -> np.ndarray:
        """Standard errors (radians) in parameter order."""
        return np.sqrt(np.clip(np.diag(self.cov), 0.0, None))

    def summary(self) -> str:
        names = ["t1", "t2", "s1", "s2", "gamma0"]
        if self.model == "reduced":
            param_names = names[:4]
        else:
            param_names = names
        deg = self.angles.to_degrees()
        se_deg = np.degrees(self.se)
        lines = [
            f"{self.model} model fit, {self.n_frames} frames, "
            f"{self.n_iter} iterations, converged={self.converged}"
        ]
        by_name = dict(zip(names, deg))
        se_by_name = dict(zip(param_names, se_deg))
        for name in names:
            se_txt = (
                f" (se {se_by_name[name]:7.3f})" if name in se_by_name else " (derived)"
            )
            lines.append(f"  {name:>6} = {by_name[name]:8.3f} deg{se_txt}")
        lines.append(f"  residual sd = {math.degrees(self.residual_sd):.4f} deg")
        lines.append(f"  condition number = {self.condition_number:.3e}")
        if self.ridge_used:
            lines.append("  note: ridge regularization was applied")
        return "\n".join(lines)


class _Geometry:
    """Frames and derivative coefficients for one parameter point."""

    __slots__ = ("A", "B", "ct1", "st1", "tt2", "dt2", "cs1", "ss1", "ts2", "ds2")

    def __init__(self, t1: float, t2: float, s1: float, s2: float):
        self.A = frame_tt(t1, t2)
        self.B = frame_st(s1, s2)
        self.ct1, self.st1, self.tt2 = math.cos(t1), math.sin(t1), math.tan(t2)
        self.dt2 = 1.0 + self.ct1**2 * self.tt2**2
        self.cs1, self.ss1, self.ts2 = math.cos(s1), math.sin(s1), math.tan(s2)
        self.ds2 = 1.0 + self.cs1**2 * self.ts2**2

    def axis_gradients(self, m: np.ndarray) -> np.ndarray:
        """Directional derivatives q_j = d(A1^T R B2)/d beta_j, j in 0..3.

        m holds A^T R B contractions, shape (n, 3, 3); returns (n, 4).
        """
        out = np.empty(m.shape[:-2] + (4,))
        out[..., 0] = (
            -(self.st1 * self.tt2 / self.dt2) * m[..., 1, 1]
            - m[..., 2, 1] / math.sqrt(self.dt2)
        )
        out[..., 1] = (self.ct1 * (1.0 + self.tt2**2) / self.dt2) * m[..., 1, 1]
        out[..., 2] = (
            (self.ss1 * self.ts2 / self.ds2) * m[..., 0, 0]
            + m[..., 0, 2] / math.sqrt(self.ds2)
        )
        out[..., 3] = -(self.cs1 * (1.0 + self.ts2**2) / self.ds2) * m[..., 0, 0]
        return out


def _beta_array(angles) -> np.ndarray:
    if isinstance(angles, AnatomicalAngles):
        return angles.to_array()
    arr = np.asarray(angles, dtype=float).ravel()
    if arr.size != 5:
        raise DomainError(f"expected 5 angles, got {arr.size}")
    return arr


def model_rotation(angles, alpha, phi) -> np.ndarray:
    """Noise-free rotation(s) Psi for motion angles alpha, phi (radians)."""
    from .rotations import cardan_compose_xzy

    b = _beta_array(angles)
    geo = _Geometry(b[0], b[1], b[2], b[3])
    inner = cardan_compose_xzy(np.asarray(alpha, float), b[4], np.asarray(phi, float))
    return geo.A @ inner @ geo.B.T


def residual_angles(rotations: np.ndarray, angles) -> np.ndarray:
    """Per-frame hinge-offset angles theta_i = -arcsin(A1^T R_i B2)."""
    b = _beta_array(angles)
    geo = _Geometry(b[0], b[1], b[2], b[3])
    c = (rotations @ geo.B[:, 1]) @ geo.A[:, 0]
    return -np.arcsin(np.clip(c, -1.0, 1.0))


def residuals(rotations: np.ndarray, angles) -> np.ndarray:
    """Chord residuals r_i = 2 sin((theta_i - gamma0) / 2)."""
    b = _beta_array(angles)
    return 2.0 * np.sin(0.5 * (residual_angles(rotations, b) - b[4]))


def sse(rotations: np.ndarray, angles) -> float:
    r = residuals(rotations, angles)
    return float(r @ r)


def loglik(rotations: np.ndarray, angles, kappa: float) -> float:
    """Approximate log-likelihood at fixed concentration kappa."""
    n = rotations.shape[0]
    return 0.5 * n * math.log(kappa / math.pi) - kappa * sse(rotations, angles)


def profile_loglik(rotations: np.ndarray, angles) -> float:
    """Log-likelihood with kappa profiled out, kappa_hat = n / (2 SSE)."""
    n = rotations.shape[0]
    s = sse(rotations, angles)
    if s <= 0.0:
        return math.inf
    return 0.5 * n * (math.log(n / (2.0 * math.pi * s)) - 1.0)


def design_matrix(
    rotations: np.ndarray, angles, with_residuals: bool = False
):
    """Design vectors X_i = -dr_i/dbeta stacked as rows, shape (n, 5).

    The fifth column is cos((theta_i - gamma0) / 2).  Raises
    ConditioningError when some |A1^T R_i B2| is within 1e-9 of 1, where
    the derivative of the arcsin is unbounded.
    """
    b = _beta_array(angles)
    geo = _Geometry(b[0], b[1], b[2], b[3])
    m = geo.A.T @ rotations @ geo.B
    c = m[:, 0, 1]
    worst = float(np.abs(c).max())
    if worst >= _DERIV_BOUND:
        raise ConditioningError(
            f"|A1^T R B2| reaches {worst:.12f}; axis derivative is singular"
        )
    s = np.sqrt(1.0 - c * c)
    theta = -np.arcsin(c)
    half = 0.5 * (theta - b[4])
    cosf = np.cos(half)
    w = cosf / s
    x = np.empty((rotations.shape[0], 5))
    x[:, :4] = w[:, None] * geo.axis_gradients(m)
    x[:, 4] = cosf
    if with_residuals:
        return x, 2.0 * np.sin(half)
    return x


def design_vector(rotation: np.ndarray, angles) -> np.ndarray:
    """Design vector for a single rotation matrix, shape (5,)."""
    return design_matrix(np.asarray(rotation, float)[None, :, :], angles)[0]


def score(rotations: np.ndarray, angles, kappa: float) -> np.ndarray:
    """Gradient of loglik w.r.t. beta: 2 kappa sum_i r_i X_i."""
    x, r = design_matrix(rotations, angles, with_residuals=True)
    return 2.0 * kappa * (x.T @ r)


def sse_gradient(rotations: np.ndarray, angles) -> np.ndarray:
    """Gradient of sse w.r.t. beta (the score up to the factor -2 kappa)."""
    x, r = design_matrix(rotations, angles, with_residuals=True)
    return -2.0 * (x.T @ r)


def _fold_beta(beta: np.ndarray) -> np.ndarray:
    return (beta + 0.5 * math.pi) % math.pi - 0.5 * math.pi


def _check_enough_frames(rotations: np.ndarray) -> None:
    # five free angles plus a residual scale need at least six frames
    if rotations.shape[0] < 6:
        raise ValidationError(
            f"need at least 6 frames to fit, got {rotations.shape[0]}"
        )


def _solve_normal(
    g: np.ndarray, rhs: np.ndarray, options: FitOptions
) -> Tuple[np.ndarray, float, bool]:
    cond = float(np.linalg.cond(g))
    ridge_used = not np.isfinite(cond) or cond > options.cond_limit
    if ridge_used:
        g = g + (options.ridge_rel * np.trace(g) / g.shape[0]) * np.eye(g.shape[0])
    try:
        delta = np.linalg.solve(g, rhs)
    except np.linalg.LinAlgError:
        raise ConditioningError("normal equations are singular even after ridge")
    return delta, cond, ridge_used


def _gauss_newton(objective, design_fn, beta0, options: FitOptions):
    """Shared descent loop; objective(beta) -> sse-like scalar,
    design_fn(beta) -> (X, r) with the update solve(X'X, X'r)."""
    beta = beta0.copy()
    current = objective(beta)
    n_iter = 0
    converged = False
    ridge_ever = False
    for n_iter in range(1, options.max_iter + 1):
        x, r = design_fn(beta)
        delta, _, ridge_used = _solve_normal(x.T @ x, x.T @ r, options)
        ridge_ever = ridge_ever or ridge_used
        if float(np.abs(delta).max()) < options.tol:
            converged = True
            break
        step = 1.0
        accepted = False
        for _ in range(options.max_halvings + 1):
            cand = _fold_beta(beta + step * delta)
            value = objective(cand)
            if value <= current * (1.0 + 1e-12) + 1e-300:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            # no decrease along the Gauss-Newton direction: stalled
            break
        beta, current = cand, value
    return beta, current, n_iter, converged, ridge_ever


def _grid_start(rotations: np.ndarray, beta0: np.ndarray, objective) -> np.ndarray:
    """Coarse search over axis inclinations around the default start."""
    best, best_val = beta0, objective(beta0)
    for t1 in np.radians([-45.0, 0.0, 45.0]):
        for s1 in np.radians([0.0, 30.0, 60.0]):
            cand = beta0.copy()
            cand[0], cand[2] = t1, s1
            val = objective(cand)
            if val < best_val:
                best, best_val = cand, val
    return best


def fit_subject(
    rotations: np.ndarray,
    init: Optional[AnatomicalAngles] = None,
    options: Optional[FitOptions] = None,
) -> SubjectFitResult:
    """Maximum-likelihood fit of the five angles for one subject.

    Parameters
    ----------
    rotations : ndarray, shape (n, 3, 3)
    init : AnatomicalAngles or length-5 array, optional
        Starting point; defaults to typical adult values.
    options : FitOptions, optional

    Returns
    -------
    SubjectFitResult
        converged=False (with the last iterate) when the loop hits
        max_iter or stalls before the update norm drops below tol.
    """
    options = options or FitOptions()
    if options.validate:
        rotations = check_rotation_matrices(rotations)
    else:
        rotations = np.asarray(rotations, dtype=float)
    _check_enough_frames(rotations)
    beta0 = _beta_array(init if init is not None else default_angles())

    def objective(beta):
        return sse(rotations, beta)

    def design_fn(beta):
        return design_matrix(rotations, beta, with_residuals=True)

    if options.grid_search:
        beta0 = _grid_start(rotations, beta0, objective)

    beta, final_sse, n_iter, converged, ridge_ever = _gauss_newton(
        objective, design_fn, beta0, options
    )

    n = rotations.shape[0]
    x_hat = design_matrix(rotations, beta)
    g = x_hat.T @ x_hat
    cond = float(np.linalg.cond(g))
    if final_sse > 0.0:
        kappa = n / (2.0 * final_sse)
        g_solve = g
        if cond > options.cond_limit:
            g_solve = g + (options.ridge_rel * np.trace(g) / 5.0) * np.eye(5)
        cov = (final_sse / n) * np.linalg.inv(g_solve)
    else:
        kappa = math.inf
        cov = np.zeros((5, 5))
    return SubjectFitResult(
        angles=AnatomicalAngles.from_array(beta),
        kappa=kappa,
        residual_sd=math.sqrt(final_sse / n),
        cov=cov,
        sse=final_sse,
        n_frames=n,
        n_iter=n_iter,
        converged=converged,
        condition_number=cond,
        ridge_used=ridge_ever,
        model="full",
    )


# ---------------------------------------------------------------------------
# reduced four-angle model: gamma0 tied to the axes


def gamma0_from_axes(t1: float, t2: float, s1: float, s2: float) -> float:
    """Offset implied by the axes alone: -arcsin(A1^T B2)."""
    geo = _Geometry(t1, t2, s1, s2)
    c = float(geo.A[:, 0] @ geo.B[:, 1])
    if abs(c) >= _DERIV_BOUND:
        raise DomainError(
            "axes are (anti)parallel: the implied offset is degenerate"
        )
    return -math.asin(c)


def _beta4_array(angles) -> np.ndarray:
    if isinstance(angles, AnatomicalAngles):
        return angles.to_array()[:4]
    arr = np.asarray(angles, dtype=float).ravel()
    if arr.size == 5:
        return arr[:4].copy()
    if arr.size != 4:
        raise DomainError(f"expected 4 angles, got {arr.size}")
    return arr


def residuals_reduced(rotations: np.ndarray, angles) -> np.ndarray:
    b = _beta4_array(angles)
    g0 = gamma0_from_axes(*b)
    theta = residual_angles(rotations, np.append(b, g0))
    return 2.0 * np.sin(0.5 * (theta - g0))


def sse_reduced(rotations: np.ndarray, angles) -> float:
    r = residuals_reduced(rotations, angles)
    return float(r @ r)


def design_matrix_reduced(
    rotations: np.ndarray, angles, with_residuals: bool = False
):
    """Design for the four-angle model, shape (n, 4).

    Columns are -dr_i/d(t1, t2, s1, s2) including the dependence of the
    tied offset on the axes.
    """
    b = _beta4_array(angles)
    geo = _Geometry(*b)
    n_mat = geo.A.T @ geo.B
    c_ab = n_mat[0, 1]
    if abs(c_ab) >= _DERIV_BOUND:
        raise DomainError(
            "axes are (anti)parallel: the tied-offset derivative is singular"
        )
    s_ab = math.sqrt(1.0 - c_ab * c_ab)
    g0 = -math.asin(c_ab)

    m = geo.A.T @ rotations @ geo.B
    c = m[:, 0, 1]
    worst = float(np.abs(c).max())
    if worst >= _DERIV_BOUND:
        raise ConditioningError(
            f"|A1^T R B2| reaches {worst:.12f}; axis derivative is singular"
        )
    s = np.sqrt(1.0 - c * c)
    theta = -np.arcsin(c)
    half = 0.5 * (theta - g0)
    cosf = np.cos(half)
    # same directional derivatives applied to R/s - I/s_ab, contracted in
    # the A/B frames
    scaled = m / s[:, None, None] - n_mat / s_ab
    x = cosf[:, None] * geo.axis_gradients(scaled)
    if with_residuals:
        return x, 2.0 * np.sin(half)
    return x


def fit_subject_reduced(
    rotations: np.ndarray,
    init: Optional[AnatomicalAngles] = None,
    options: Optional[FitOptions] = None,
) -> SubjectFitResult:
    """Maximum-likelihood fit of the reduced four-angle model.

    The returned angles include the derived offset; cov covers the four
    free angles only.
    """
    options = options or FitOptions()
    if options.validate:
        rotations = check_rotation_matrices(rotations)
    else:
        rotations = np.asarray(rotations, dtype=float)
    _check_enough_frames(rotations)
    beta0 = _beta4_array(init if init is not None else default_angles())

    def objective(beta):
        return sse_reduced(rotations, beta)

    def design_fn(beta):
        return design_matrix_reduced(rotations, beta, with_residuals=True)

    if options.grid_search:
        beta0 = _grid_start(rotations, beta0, objective)[:4]

    beta, final_sse, n_iter, converged, ridge_ever = _gauss_newton(
        objective, design_fn, beta0, options
    )

    n = rotations.shape[0]
    x_hat = design_matrix_reduced(rotations, beta)
    g = x_hat.T @ x_hat
    cond = float(np.linalg.cond(g))
    if final_sse > 0.0:
        kappa = n / (2.0 * final_sse)
        g_solve = g
        if cond > options.cond_limit:
            g_solve = g + (options.ridge_rel * np.trace(g) / 4.0) * np.eye(4)
        cov = (final_sse / n) * np.linalg.inv(g_solve)
    else:
        kappa = math.inf
        cov = np.zeros((4, 4))
    g0 = gamma0_from_axes(*beta)
    return SubjectFitResult(
        angles=AnatomicalAngles.from_array(np.append(beta, g0)),
        kappa=kappa,
        residual_sd=math.sqrt(final_sse / n),
        cov=cov,
        sse=final_sse,
        n_frames=n,
        n_iter=n_iter,
        converged=converged,
        condition_number=cond,
        ridge_used=ridge_ever,
        model="reduced",
    )
