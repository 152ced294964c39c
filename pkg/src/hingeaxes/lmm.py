"""Linear mixed-effects model estimated by maximum likelihood.

Model: grouped observations y_i = X_i beta + Z_i b_i + e_i for groups
i = 1..M, with b_i ~ N(0, Sigma_b), e_i ~ N(0, sigma^2 I) independent.
Writing Sigma_b = sigma^2 D in relative form, the marginal covariance of
group i is sigma^2 V_i with V_i = I + Z_i D Z_i^T.

Estimation profiles beta and sigma^2 out of the Gaussian likelihood: for
fixed D, generalized least squares gives beta(D) and the residual quadratic
form gives sigma^2(D), leaving a concentrated objective in D alone, which a
quasi-Newton optimizer (L-BFGS-B) minimizes over an unconstrained
log-scale parametrization.  All per-group quantities enter through the
sufficient statistics Z_i^T Z_i, Z_i^T X_i, Z_i^T y_i, X_i^T X_i,
X_i^T y_i, y_i^T y_i, so the cost per objective evaluation is O(M q^3)
independent of the number of observations, using the matrix determinant
lemma and the Woodbury identity:

    det V_i = det(I_q + L^T Z_i^T Z_i L),        D = L L^T,
    V_i^{-1} = I - Z_i L S_i^{-1} L^T Z_i^T,      S_i = I_q + L^T Z_i^T Z_i L.

Supported random-effect structures:

* ``diagonal`` (default): D = diag(d_1..d_q), optimized over log sds.
* ``unstructured``: D = L L^T over a log-Cholesky parametrization.  This
  is experimental; with few groups the correlation parameters are weakly
  identified and the variance estimates have not been validated for bias.
  A warning is emitted when it is selected.

REML is available through ``LmmOptions(method="reml")`` and changes only
the profiled sigma^2 denominator and the added log det(X^T V^{-1} X) term;
the default and the validated path is ML.

Relative standard deviations are floored at 1e-8; estimates that end up on
the floor (or whose absolute sd falls below it) are reported with a
per-component boundary flag rather than an error, since a zero variance
component is a legitimate boundary solution.
"""

from __future__ import annotations

import dataclasses
import math
import warnings
from typing import List, Optional, Sequence

import numpy as np
from scipy.optimize import minimize

from .errors import ValidationError

SD_FLOOR = 1e-8
_LOG_FLOOR = math.log(SD_FLOOR)
# relative sds above 1e4 are statistically indistinguishable from infinity,
# and capping there keeps the profiled objective computable in double
# precision all the way to the bound (at 1e8 the Woodbury subtractions
# cancel catastrophically, leaving a cliff that breaks the line search)
_LOG_CEIL = math.log(1e4)
# objective value substituted where the profiled likelihood is numerically
# unevaluable; finite (unlike inf) so the L-BFGS-B line search backtracks
# instead of aborting at its first trial point
_BREAKDOWN = 1e12


@dataclasses.dataclass
class LmmData:
    """Per-group design blocks.

    x[i]: (n_i, p) fixed-effects design, z[i]: (n_i, q) random-effects
    design, y[i]: (n_i,) response.
    """

    x: List[np.ndarray]
    z: List[np.ndarray]
    y: List[np.ndarray]

    def __post_init__(self):
        if not (len(self.x) == len(self.z) == len(self.y) >= 1):
            raise ValidationError("x, z, y must be equal-length nonempty lists")
        p = self.x[0].shape[1]
        q = self.z[0].shape[1]
        xs, zs, ys = [], [], []
        for i, (xi, zi, yi) in enumerate(zip(self.x, self.z, self.y)):
            xi = np.asarray(xi, float)
            zi = np.asarray(zi, float)
            yi = np.asarray(yi, float).ravel()
            n_i = yi.size
            if xi.shape != (n_i, p) or zi.shape != (n_i, q):
                raise ValidationError(f"group {i}: inconsistent block shapes")
            if n_i == 0:
                raise ValidationError(f"group {i}: empty group")
            if not (
                np.all(np.isfinite(xi))
                and np.all(np.isfinite(zi))
                and np.all(np.isfinite(yi))
            ):
                raise ValidationError(f"group {i}: non-finite values")
            xs.append(xi)
            zs.append(zi)
            ys.append(yi)
        self.x, self.z, self.y = xs, zs, ys
        if self.n_total <= p:
            raise ValidationError(
                f"need more than p={p} observations, got {self.n_total}"
            )

    @property
    def n_groups(self) -> int:
        return len(self.y)

    @property
    def n_total(self) -> int:
        return sum(yi.size for yi in self.y)

    @property
    def p(self) -> int:
        return self.x[0].shape[1]

    @property
    def q(self) -> int:
        return self.z[0].shape[1]


class _Stats:
    """Stacked sufficient statistics; everything downstream reads these."""

    def __init__(self, data: LmmData):
        self.p, self.q = data.p, data.q
        self.m = data.n_groups
        self.n = data.n_total
        self.ztz = np.stack([zi.T @ zi for zi in data.z])
        self.ztx = np.stack([zi.T @ xi for zi, xi in zip(data.z, data.x)])
        self.zty = np.stack([zi.T @ yi for zi, yi in zip(data.z, data.y)])
        self.xtx = sum(xi.T @ xi for xi in data.x)
        self.xty = sum(xi.T @ yi for xi, yi in zip(data.x, data.y))
        self.yty = float(sum(yi @ yi for yi in data.y))


def _unpack_factor(theta: np.ndarray, q: int, structure: str) -> np.ndarray:
    """Relative-covariance factor L with D = L L^T from optimizer params."""
    if structure == "diagonal":
        return np.diag(np.exp(theta))
    lower = np.zeros((q, q))
    idx = np.tril_indices(q)
    lower[idx] = theta
    lower[np.diag_indices(q)] = np.exp(np.diag(lower))
    return lower


def _pack_init(sd_rel: np.ndarray, q: int, structure: str) -> np.ndarray:
    logs = np.log(np.clip(sd_rel, SD_FLOOR, None))
    if structure == "diagonal":
        return logs
    lower = np.zeros((q, q))
    lower[np.diag_indices(q)] = logs
    return lower[np.tril_indices(q)]


def _profile(stats: _Stats, factor: np.ndarray):
    """GLS quantities at a fixed relative factor L.

    Returns (beta, rss, logdet_v, xtvx) with everything in relative scale.
    """
    lt = factor.T
    s = np.eye(stats.q) + lt @ stats.ztz @ factor
    chol = np.linalg.cholesky(s)
    logdet = 2.0 * np.sum(np.log(np.diagonal(chol, axis1=-2, axis2=-1)))
    p_blocks = lt @ stats.ztx
    u_blocks = (lt @ stats.zty[..., None])[..., 0]
    sinv_p = np.linalg.solve(s, p_blocks)
    sinv_u = np.linalg.solve(s, u_blocks[..., None])[..., 0]
    xtvx = stats.xtx - np.einsum("mqp,mqr->pr", p_blocks, sinv_p)
    xtvy = stats.xty - np.einsum("mqp,mq->p", p_blocks, sinv_u)
    ytvy = stats.yty - float(np.einsum("mq,mq->", u_blocks, sinv_u))
    beta = np.linalg.solve(xtvx, xtvy)
    rss = ytvy - float(beta @ xtvy)
    # a non-positive profiled RSS can only come from catastrophic
    # cancellation once X'V^-1 X degenerates; flag it as singular rather
    # than letting log(rss) reward the breakdown
    if rss <= 0.0 or not math.isfinite(rss) or not np.all(np.isfinite(beta)):
        raise np.linalg.LinAlgError("GLS normal equations numerically singular")
    return beta, rss, float(logdet), xtvx


def _neg2ll(stats: _Stats, factor: np.ndarray, method: str) -> float:
    # extreme trial factors can drive X'V^-1 X numerically singular (with
    # X spanned by Z the GLS information vanishes as D grows); treat those
    # points as worthless so the line search backs off
    try:
        _, rss, logdet, xtvx = _profile(stats, factor)
    except np.linalg.LinAlgError:
        return _BREAKDOWN
    n, p = stats.n, stats.p
    if method == "ml":
        sigma2 = rss / n
        return n * math.log(2.0 * math.pi * sigma2) + logdet + n
    sigma2 = rss / (n - p)
    sign, logdet_x = np.linalg.slogdet(xtvx)
    if sign <= 0:
        return _BREAKDOWN
    return (n - p) * math.log(2.0 * math.pi * sigma2) + logdet + logdet_x + (n - p)


@dataclasses.dataclass
class LmmOptions:
    method: str = "ml"
    cov_structure: str = "diagonal"
    max_iter: int = 500
    ftol: float = 1e-14
    gtol: float = 1e-11

    def __post_init__(self):
        if self.method not in ("ml", "reml"):
            raise ValidationError(f"method must be 'ml' or 'reml', got {self.method}")
        if self.cov_structure not in ("diagonal", "unstructured"):
            raise ValidationError(
                f"cov_structure must be 'diagonal' or 'unstructured', "
                f"got {self.cov_structure}"
            )


@dataclasses.dataclass
class LmmFit:
    """Mixed-model estimates.

    random_sd and random_cov are absolute (response-scale); boundary marks
    components whose sd collapsed to the floor.  loglik is the maximized
    (restricted) log-likelihood including constants, in the convention
    where REML omits the log det(X^T X) offset.
    """

    beta: np.ndarray
    se_beta: np.ndarray
    cov_beta: np.ndarray
    sigma2: float
    random_sd: np.ndarray
    random_cov: np.ndarray
    blups: np.ndarray
    loglik: float
    method: str
    cov_structure: str
    converged: bool
    n_iter: int
    boundary: np.ndarray
    n_groups: int
    n_total: int

    @property
    def residual_sd(self) -> float:
        return math.sqrt(self.sigma2)


def _blups(stats: _Stats, factor: np.ndarray, beta: np.ndarray) -> np.ndarray:
    """Posterior modes of the relative random effects, scale of y."""
    lt = factor.T
    s = np.eye(stats.q) + lt @ stats.ztz @ factor
    resid = stats.zty - (stats.ztx @ beta)
    corr = stats.ztz @ factor @ np.linalg.solve(s, (lt @ resid[..., None]))
    d_rel = factor @ lt
    return (d_rel @ (resid[..., None] - corr))[..., 0]


def fit_lmm(
    data: LmmData,
    init_sd_rel: Optional[Sequence[float]] = None,
    options: Optional[LmmOptions] = None,
    callback=None,
) -> LmmFit:
    """Fit the mixed model by (restricted) maximum likelihood.

    Parameters
    ----------
    data : LmmData
    init_sd_rel : length-q, optional
        Starting relative sds (random-effect sd / residual sd); default 1.
    options : LmmOptions, optional
    callback : callable, optional
        Called with the current -2 loglik after each accepted optimizer
        iterate (useful for monotonicity checks).

    Returns
    -------
    LmmFit
    """
    options = options or LmmOptions()
    if options.cov_structure == "unstructured":
        warnings.warn(
            "unstructured random-effect covariance is experimental: with few "
            "groups the correlations are weakly identified and the variance "
            "estimates are not validated for bias",
            UserWarning,
            stacklevel=2,
        )
    stats = _Stats(data)
    q = stats.q

    sd0 = np.ones(q) if init_sd_rel is None else np.asarray(init_sd_rel, float)
    if sd0.size != q or np.any(~np.isfinite(sd0)) or np.any(sd0 < 0):
        raise ValidationError("init_sd_rel must be q nonnegative finite values")
    theta0 = _pack_init(sd0, q, options.cov_structure)

    if options.cov_structure == "diagonal":
        bounds = [(_LOG_FLOOR, _LOG_CEIL)] * q
    else:
        bounds = []
        tril = list(zip(*np.tril_indices(q)))
        for i, j in tril:
            bounds.append((_LOG_FLOOR, _LOG_CEIL) if i == j else (None, None))

    def objective(theta):
        return _neg2ll(stats, _unpack_factor(theta, q, options.cov_structure),
                       options.method)

    cb = None
    if callback is not None:
        cb = lambda theta: callback(objective(theta))  # noqa: E731

    res = minimize(
        objective,
        theta0,
        method="L-BFGS-B",
        # central differences: forward-difference gradient noise stalls the
        # optimizer about two decades short of the achievable precision
        jac="3-point",
        bounds=bounds,
        callback=cb,
        options={
            "maxiter": options.max_iter,
            "ftol": options.ftol,
            "gtol": options.gtol,
        },
    )

    factor = _unpack_factor(res.x, q, options.cov_structure)
    beta, rss, _, xtvx = _profile(stats, factor)
    dof = stats.n if options.method == "ml" else stats.n - stats.p
    sigma2 = rss / dof
    cov_beta = np.linalg.inv(xtvx) * sigma2
    d_rel = factor @ factor.T
    random_cov = sigma2 * d_rel
    random_sd = np.sqrt(np.clip(np.diag(random_cov), 0.0, None))
    rel_sd = np.sqrt(np.clip(np.diag(d_rel), 0.0, None))
    # a random-effect sd below 1e-4 of the residual sd contributes under
    # 1e-8 of the variance; the profiled likelihood is flat there and the
    # optimizer can stop anywhere in that basin, so flag the whole region
    # as a boundary solution rather than just the exact floor
    boundary = (rel_sd <= 1e-4) | (random_sd <= SD_FLOOR)
    return LmmFit(
        beta=beta,
        se_beta=np.sqrt(np.clip(np.diag(cov_beta), 0.0, None)),
        cov_beta=cov_beta,
        sigma2=float(sigma2),
        random_sd=random_sd,
        random_cov=random_cov,
        blups=_blups(stats, factor, beta),
        loglik=-0.5 * float(res.fun),
        method=options.method,
        cov_structure=options.cov_structure,
        converged=bool(res.success),
        n_iter=int(res.nit),
        boundary=boundary,
        n_groups=stats.m,
        n_total=stats.n,
    )
