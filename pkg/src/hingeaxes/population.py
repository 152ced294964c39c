"""Population-level estimation of hinge axes across many subjects.

Subjects share a common mean orientation while their individual angles
scatter around it:

    beta_i ~ N(mu_i, Sigma0),    mu_i = F(group_i) delta,

with Sigma0 diagonal in the supported path and the per-frame residuals of
each subject governed by a common concentration kappa.  One-sample designs
have mu_i equal for everyone; two-sample designs add group-contrast columns
for a chosen subset of the five angles, so delta stacks the five baseline
angles plus one difference per contrast.

Two algorithms alternate between subject-level linearization and a linear
mixed model on the linearized (pseudo-) responses y_i = X_i beta_i* + r_i*,
where X_i and r_i* are the design and residuals at the linearization point
beta_i*:

* ``plme``: beta_i* is each subject's penalized (posterior-mode) estimate
  under the current population prior.  At a fixed point the posterior mode
  equals mu_i plus the mixed-model BLUP, which is what makes the
  alternation self-consistent.
* ``lme``: beta_i* is mu_i + BLUP_i from the previous round directly, with
  no inner penalized fits; cheaper per sweep, same fixed point.

Both update (delta, Sigma0, kappa) from the mixed model (kappa from the
residual variance of the pseudo-response) and stop when the fixed effects
and the log-likelihood settle.
"""

from __future__ import annotations

import dataclasses
import math
import warnings
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import norm

from .errors import ConvergenceError, HingeAxesError, ValidationError
from .lmm import LmmData, LmmFit, LmmOptions, fit_lmm
from .penalized import DEFAULT_PRIOR_SD_DEG, PriorSpec, fit_map
from .rotations import AnatomicalAngles
from .subject import (
    FitOptions,
    _beta_array,
    _fold_beta,
    default_angles,
    design_matrix,
    fit_subject,
    gamma0_from_axes,
)
from .validation import check_rotation_matrices

ANGLE_NAMES = ("t1", "t2", "s1", "s2", "gamma0")
_ANGLE_INDEX = {name: i for i, name in enumerate(ANGLE_NAMES)}

# group differences are only supported on the lower-axis orientation; the
# upper axis and the offset are treated as common across groups
CONTRAST_NAMES = ("s1", "s2")


def build_pseudo_response(
    rotations: np.ndarray, angles
) -> Tuple[np.ndarray, np.ndarray]:
    """Design matrix and linearized response at a parameter point.

    y = X beta* + r(beta*), so that y - X beta approximates the residual
    at any nearby beta and the mixed model can treat y as linear in beta.
    """
    beta = _beta_array(angles)
    x, r = design_matrix(rotations, beta, with_residuals=True)
    return x, x @ beta + r


@dataclasses.dataclass(frozen=True)
class PopulationModel:
    """Fixed-effects design across subjects.

    design "one-sample" fits a single mean vector; "two-sample" adds a
    group contrast column for each angle named in ``contrasts`` (defaults
    to the lower-axis angles).
    """

    design: str = "one-sample"
    contrasts: Tuple[str, ...] = ("s1", "s2")

    def __post_init__(self):
        if self.design not in ("one-sample", "two-sample"):
            raise ValidationError(f"unknown design {self.design!r}")
        for name in self.contrasts:
            if name not in CONTRAST_NAMES:
                raise ValidationError(
                    f"contrast must be one of {CONTRAST_NAMES}, got {name!r}"
                )
        if len(set(self.contrasts)) != len(self.contrasts):
            raise ValidationError(f"duplicate contrast in {self.contrasts}")
        if self.design == "two-sample" and not self.contrasts:
            raise ValidationError("two-sample design needs at least one contrast")

    @property
    def n_fixed(self) -> int:
        return 5 + (len(self.contrasts) if self.design == "two-sample" else 0)

    @property
    def param_names(self) -> Tuple[str, ...]:
        names = list(ANGLE_NAMES)
        if self.design == "two-sample":
            names += [f"d_{c}" for c in self.contrasts]
        return tuple(names)

    def fixed_design(self, x: np.ndarray, group: int) -> np.ndarray:
        """Expand a subject design (n, 5) to the fixed-effects columns."""
        if self.design == "one-sample":
            return x
        cols = [x]
        for name in self.contrasts:
            cols.append(group * x[:, [_ANGLE_INDEX[name]]])
        return np.hstack(cols)

    def subject_mean(self, fixed: np.ndarray, group: int) -> np.ndarray:
        """Mean angle vector (5,) for a subject of the given group."""
        mu = fixed[:5].copy()
        if self.design == "two-sample":
            for k, name in enumerate(self.contrasts):
                mu[_ANGLE_INDEX[name]] += group * fixed[5 + k]
        return mu


@dataclasses.dataclass
class PopulationOptions:
    algorithm: str = "plme"
    max_outer: int = 100
    tol_fixed: float = 1e-6
    tol_loglik: float = 1e-8
    map_options: Optional[FitOptions] = None
    lmm_options: Optional[LmmOptions] = None
    validate: bool = True

    def __post_init__(self):
        if self.algorithm not in ("plme", "lme"):
            raise ValidationError(
                f"algorithm must be 'plme' or 'lme', got {self.algorithm}"
            )


@dataclasses.dataclass
class PopulationFit:
    """Population-fit output.

    fixed holds the estimated fixed effects (radians) in the order of
    param_names; sigma0 the between-subject angle sds (radians); kappa the
    common concentration, with residual_sd = 1/sqrt(2 kappa) its
    per-frame counterpart.  subject_angles are the per-subject estimates
    at the final state (posterior modes for plme, mean + BLUP for lme);
    excluded lists subjects dropped after repeated inner-fit failures.
    fixed_step_history records the max-abs fixed-effect update of each
    outer sweep, which should contract towards zero near the fixed point.
    """

    model: PopulationModel
    algorithm: str
    fixed: np.ndarray
    se_fixed: np.ndarray
    cov_fixed: np.ndarray
    sigma0: np.ndarray
    kappa: float
    loglik: float
    n_outer: int
    converged: bool
    boundary: np.ndarray
    subject_angles: List[AnatomicalAngles]
    groups: np.ndarray
    excluded: List[int]
    messages: List[str]
    fixed_step_history: List[float]
    lmm: LmmFit

    @property
    def param_names(self) -> Tuple[str, ...]:
        return self.model.param_names

    @property
    def residual_sd(self) -> float:
        return 1.0 / math.sqrt(2.0 * self.kappa)

    @property
    def n_subjects(self) -> int:
        return len(self.subject_angles)

    def summary(self) -> str:
        lines = [
            f"{self.algorithm} population fit, {self.n_subjects} subjects, "
            f"{self.n_outer} outer iterations, converged={self.converged}"
        ]
        for name, est, se in zip(
            self.param_names, np.degrees(self.fixed), np.degrees(self.se_fixed)
        ):
            lines.append(f"  {name:>8} = {est:8.3f} deg (se {se:6.3f})")
        for name, sd, at_bound in zip(ANGLE_NAMES, np.degrees(self.sigma0),
                                      self.boundary):
            note = "  [boundary]" if at_bound else ""
            lines.append(f"  sd({name:>6}) = {sd:7.3f} deg{note}")
        lines.append(
            f"  residual sd = {math.degrees(self.residual_sd):.4f} deg, "
            f"log-likelihood = {self.loglik:.4f}"
        )
        if self.excluded:
            lines.append(f"  excluded subjects: {self.excluded}")
        return "\n".join(lines)


def _validate_inputs(subjects, groups, model, validate):
    if len(subjects) < 1:
        raise ValidationError("need at least one subject")
    cleaned = []
    for i, r in enumerate(subjects):
        if validate:
            r = check_rotation_matrices(r, name=f"subject {i}")
        else:
            r = np.asarray(r, dtype=float)
        if r.shape[0] < 6:
            raise ValidationError(
                f"subject {i} has {r.shape[0]} frames; need at least 6"
            )
        cleaned.append(r)
    if model.design == "two-sample":
        if groups is None:
            raise ValidationError("two-sample design requires groups")
        groups = np.asarray(groups, dtype=int).ravel()
        if groups.size != len(subjects):
            raise ValidationError("groups must have one entry per subject")
        if not set(np.unique(groups)) <= {0, 1}:
            raise ValidationError("groups must be coded 0/1")
        if len(np.unique(groups)) < 2:
            raise ValidationError("two-sample design needs both groups present")
    else:
        groups = np.zeros(len(subjects), dtype=int)
    if len(cleaned) == 1:
        warnings.warn(
            "population fit with a single subject: variance components are "
            "not identified and will sit on the boundary",
            UserWarning,
            stacklevel=3,
        )
    return cleaned, groups


def _initial_kappa(subjects, map_options) -> float:
    """Pool unpenalized per-subject fits into a starting concentration.

    Subjects whose individual fit fails are skipped; if none succeed the
    fallback corresponds to a one-degree residual sd.
    """
    total_sse = 0.0
    total_n = 0
    for r in subjects:
        try:
            res = fit_subject(r, options=map_options)
        except (HingeAxesError, np.linalg.LinAlgError):
            continue
        if res.converged and res.sse > 0.0:
            total_sse += res.sse
            total_n += res.n_frames
    if total_n == 0 or total_sse <= 0.0:
        return 1.0 / (2.0 * math.radians(1.0) ** 2)
    return total_n / (2.0 * total_sse)


def _lmm_state(
    subjects, groups, model, points, sigma0, kappa, lmm_options
) -> LmmFit:
    xs, zs, ys = [], [], []
    for r, g, point in zip(subjects, groups, points):
        z, y = build_pseudo_response(r, point)
        xs.append(model.fixed_design(z, g))
        zs.append(z)
        ys.append(y)
    resid_sd = 1.0 / math.sqrt(2.0 * kappa)
    init_rel = np.clip(sigma0 / resid_sd, 1e-6, 1e6)
    return fit_lmm(LmmData(xs, zs, ys), init_sd_rel=init_rel, options=lmm_options)


def fit_population(
    subjects: Sequence[np.ndarray],
    groups: Optional[Sequence[int]] = None,
    model: Optional[PopulationModel] = None,
    options: Optional[PopulationOptions] = None,
    init_fixed: Optional[np.ndarray] = None,
    init_sigma0: Optional[np.ndarray] = None,
    init_kappa: Optional[float] = None,
    init_subject_angles: Optional[Sequence[np.ndarray]] = None,
) -> PopulationFit:
    """Fit the population model to many subjects' rotation sequences.

    Parameters
    ----------
    subjects : sequence of (n_i, 3, 3) arrays
    groups : 0/1 codes per subject, required for two-sample designs.
    model, options : see PopulationModel, PopulationOptions.
    init_fixed, init_sigma0, init_kappa : optional warm start for the
        population state (radians; kappa in 1/radians^2).
    init_subject_angles : optional per-subject starting angles; for plme
        these seed the first round of posterior-mode fits, for lme they
        are the first linearization points.

    Returns
    -------
    PopulationFit
        With converged=False when max_outer sweeps did not settle; raises
        ConvergenceError only when no subject survives the inner fits.
    """
    model = model or PopulationModel()
    options = options or PopulationOptions()
    map_options = options.map_options or FitOptions(validate=False)
    lmm_options = options.lmm_options or LmmOptions()
    subjects, groups = _validate_inputs(subjects, groups, model, options.validate)
    m = len(subjects)

    fixed = np.zeros(model.n_fixed)
    fixed[:5] = default_angles().to_array()
    if init_fixed is not None:
        init_fixed = np.asarray(init_fixed, dtype=float).ravel()
        if init_fixed.size != model.n_fixed:
            raise ValidationError(
                f"init_fixed needs {model.n_fixed} entries, got {init_fixed.size}"
            )
        fixed = init_fixed.copy()
    sigma0 = (
        np.radians(DEFAULT_PRIOR_SD_DEG)
        if init_sigma0 is None
        else np.asarray(init_sigma0, dtype=float).ravel().copy()
    )
    kappa = _initial_kappa(subjects, map_options) if init_kappa is None else float(init_kappa)
    if sigma0.size != 5 or np.any(sigma0 <= 0) or kappa <= 0:
        raise ValidationError("init_sigma0 must be 5 positive sds, init_kappa > 0")

    points: List[np.ndarray] = [None] * m
    if init_subject_angles is not None:
        if len(init_subject_angles) != m:
            raise ValidationError("init_subject_angles needs one entry per subject")
        points = [_beta_array(a) for a in init_subject_angles]

    active = list(range(m))
    failures = [0] * m
    messages: List[str] = []
    step_history: List[float] = []
    loglik_prev = -math.inf
    lmm_fit = None
    converged = False
    n_outer = 0

    for n_outer in range(1, options.max_outer + 1):
        mus = {i: model.subject_mean(fixed, groups[i]) for i in active}

        if options.algorithm == "plme":
            sigma0_safe = np.clip(sigma0, 1e-8, None)
            still_active = []
            for i in active:
                prior = PriorSpec.from_moments(mus[i], sigma0_safe, kappa)
                init = points[i] if points[i] is not None else mus[i]
                try:
                    result = fit_map(
                        subjects[i], prior, init=init, options=map_options
                    )
                    if not result.converged:
                        # retry once from the population mean before giving up
                        result = fit_map(subjects[i], prior, options=map_options)
                except (HingeAxesError, np.linalg.LinAlgError):
                    # one degenerate subject must not take down the whole
                    # fit; treat it like a non-converged inner fit
                    result = None
                if result is not None and result.converged:
                    points[i] = result.beta
                    failures[i] = 0
                    still_active.append(i)
                    continue
                failures[i] += 1
                if failures[i] >= 2:
                    messages.append(
                        f"subject {i} excluded after repeated "
                        "non-convergence of the penalized fit"
                    )
                else:
                    # keep the subject one more sweep, linearized at the
                    # failed estimate or, lacking one, the population mean
                    points[i] = result.beta if result is not None else mus[i]
                    still_active.append(i)
            active = still_active
            if not active:
                raise ConvergenceError(
                    "all subjects failed the penalized fits; no usable data"
                )
        else:
            if lmm_fit is None:
                for i in active:
                    if points[i] is None:
                        points[i] = mus[i]
            else:
                for k, i in enumerate(active):
                    points[i] = _fold_beta(mus[i] + blups[k])

        lmm_fit = _lmm_state(
            [subjects[i] for i in active],
            [groups[i] for i in active],
            model,
            [points[i] for i in active],
            sigma0,
            kappa,
            lmm_options,
        )
        blups = lmm_fit.blups
        fixed_new = lmm_fit.beta
        sigma0 = lmm_fit.random_sd
        kappa = 1.0 / (2.0 * lmm_fit.sigma2)
        delta_fixed = float(np.abs(fixed_new - fixed).max())
        step_history.append(delta_fixed)
        fixed = fixed_new
        dl = abs(lmm_fit.loglik - loglik_prev)
        rel_dl = dl / (abs(lmm_fit.loglik) + 1.0)
        loglik_prev = lmm_fit.loglik
        if delta_fixed < options.tol_fixed and rel_dl < options.tol_loglik:
            converged = True
            break

    if options.algorithm == "lme":
        for k, i in enumerate(active):
            points[i] = _fold_beta(
                model.subject_mean(fixed, groups[i]) + lmm_fit.blups[k]
            )

    excluded = sorted(set(range(m)) - set(active))
    if m > 1 and len(active) == 1:
        messages.append("only one subject survived; variance components unreliable")

    subject_angles = [
        AnatomicalAngles.from_array(points[i]) for i in active
    ]
    return PopulationFit(
        model=model,
        algorithm=options.algorithm,
        fixed=fixed,
        se_fixed=lmm_fit.se_beta,
        cov_fixed=lmm_fit.cov_beta,
        sigma0=sigma0,
        kappa=kappa,
        loglik=lmm_fit.loglik,
        n_outer=n_outer,
        converged=converged,
        boundary=lmm_fit.boundary,
        subject_angles=subject_angles,
        groups=np.asarray([groups[i] for i in active], dtype=int),
        excluded=excluded,
        messages=messages,
        fixed_step_history=step_history,
        lmm=lmm_fit,
    )


@dataclasses.dataclass(frozen=True)
class WaldTest:
    param: str
    estimate: float
    se: float
    z: float
    p_value: float

    def __str__(self):
        return (
            f"{self.param}: estimate {math.degrees(self.estimate):.3f} deg, "
            f"se {math.degrees(self.se):.3f} deg, z = {self.z:.3f}, "
            f"p = {self.p_value:.4g}"
        )


def wald_z(estimate: float, se: float) -> Tuple[float, float]:
    """z statistic and two-sided normal p-value for estimate / se."""
    if se <= 0 or not math.isfinite(se):
        raise ValidationError(f"standard error must be positive, got {se!r}")
    z = estimate / se
    return z, float(2.0 * norm.sf(abs(z)))


def wald_test(fit: PopulationFit, param) -> WaldTest:
    """Two-sided normal-reference test of a fixed effect being zero.

    param may be a parameter name, an index into param_names, or a contrast
    vector c of length n_fixed, in which case the test is of c' delta = 0
    with variance c' cov_fixed c.
    """
    names = fit.param_names
    if isinstance(param, str):
        if param not in names:
            raise ValidationError(f"unknown parameter {param!r}; have {names}")
        idx = names.index(param)
    elif np.ndim(param) == 1:
        c = np.asarray(param, dtype=float)
        if c.shape != (len(names),):
            raise ValidationError(
                f"contrast vector needs length {len(names)}, got {c.shape}"
            )
        est = float(c @ fit.fixed)
        se = float(math.sqrt(max(c @ fit.cov_fixed @ c, 0.0)))
        z, p = wald_z(est, se)
        label = " + ".join(
            f"{w:g}*{n}" for w, n in zip(c, names) if w != 0.0
        )
        return WaldTest(param=label, estimate=est, se=se, z=z, p_value=p)
    else:
        idx = int(param)
        if not 0 <= idx < len(names):
            raise ValidationError(f"parameter index {idx} out of range")
    est = float(fit.fixed[idx])
    se = float(fit.se_fixed[idx])
    z, p = wald_z(est, se)
    return WaldTest(param=names[idx], estimate=est, se=se, z=z, p_value=p)


def flexibility_statistic(angles) -> float:
    """Offset in excess of the one implied by the axes (radians).

    gamma0 + arcsin(A1^T B2); zero when the reduced four-angle model holds
    exactly, so its distribution across subjects measures how much freedom
    the fifth angle is actually using.
    """
    if isinstance(angles, AnatomicalAngles):
        beta = angles.to_array()
    else:
        beta = _beta_array(angles)
    return float(beta[4] - gamma0_from_axes(*beta[:4]))


def flexibility_summary(subject_angles: Sequence) -> Tuple[float, float, np.ndarray]:
    """Mean, standard error and per-subject values of the flexibility
    statistic (radians)."""
    values = np.array([flexibility_statistic(a) for a in subject_angles])
    if values.size < 2:
        return float(values.mean()), math.nan, values
    return (
        float(values.mean()),
        float(values.std(ddof=1) / math.sqrt(values.size)),
        values,
    )
