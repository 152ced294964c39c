"""Monte Carlo harness for the population estimators.

Generates synthetic multi-subject data from the two-hinge model: subject
angles drawn from N(beta_mean, diag(sigma0^2)), motion angles about the two
hinges drawn i.i.d. normal per frame, and small error rotations applied on
the right, with axis z/|z| and angle |z| for z ~ N(0, error_sd^2 I3).
Each replicate is fitted with the population estimator and the study
reports bias, root-mean-square error and Monte Carlo uncertainty for the
fixed effects and the between-subject standard deviations, plus the
calibration of the reported variances against the empirical scatter.

Per-replicate generators are spawned from a single seed sequence, so runs
are reproducible and independent of the degree of parallelism.
"""

from __future__ import annotations

import dataclasses
import json
import math
import time
import warnings
from typing import Dict, List, Optional, Tuple

import numpy as np
from joblib import Parallel, delayed

from .errors import HingeAxesError, ValidationError
from .lmm import LmmOptions
from .population import (
    ANGLE_NAMES,
    CONTRAST_NAMES,
    PopulationModel,
    PopulationOptions,
    fit_population,
)
from .rotations import cardan_compose_xzy, frame_st, frame_tt, rotation_from_rotvec
from .subject import DEFAULT_ANGLES_DEG, FitOptions
from .validation import as_rng

# Between-subject sds matching the default prior (degrees).
DEFAULT_SIGMA0_DEG = (7.0, 4.0, 9.0, 11.0, 11.0)
# Typical walking-trial motion: means and sds of the two hinge angles (deg).
DEFAULT_MOTION_MEAN_DEG = (38.0, 14.0)
DEFAULT_MOTION_SD_DEG = (12.0, 10.5)


@dataclasses.dataclass
class SimConfig:
    """Study settings; angles in degrees here (converted internally)."""

    n_subjects: int = 30
    n_frames: int = 50
    replicates: int = 100
    beta_mean_deg: Tuple[float, ...] = DEFAULT_ANGLES_DEG
    sigma0_deg: Tuple[float, ...] = DEFAULT_SIGMA0_DEG
    error_sd_deg: float = 1.0
    motion_mean_deg: Tuple[float, float] = DEFAULT_MOTION_MEAN_DEG
    motion_sd_deg: Tuple[float, float] = DEFAULT_MOTION_SD_DEG
    # optional two-sample generation: angle name -> group difference (deg);
    # subjects n_subjects // 2 .. end belong to group 1
    group_effects_deg: Optional[Dict[str, float]] = None
    algorithm: str = "plme"
    seed: int = 0
    n_jobs: int = 1
    max_outer: int = 100
    tol_fixed: float = 1e-6

    def __post_init__(self):
        if self.n_subjects < 1 or self.n_frames < 6 or self.replicates < 1:
            raise ValidationError(
                "need n_subjects >= 1, n_frames >= 6, replicates >= 1"
            )
        if len(self.beta_mean_deg) != 5 or len(self.sigma0_deg) != 5:
            raise ValidationError("beta_mean_deg and sigma0_deg need 5 entries")
        if any(s <= 0 for s in self.sigma0_deg):
            raise ValidationError("sigma0_deg entries must be positive")
        if any(s <= 0 for s in self.motion_sd_deg):
            raise ValidationError("motion_sd_deg entries must be positive")
        if self.error_sd_deg < 0:
            raise ValidationError("error_sd_deg must be >= 0")
        if self.algorithm not in ("plme", "lme"):
            raise ValidationError(
                f"algorithm must be 'plme' or 'lme', got {self.algorithm}"
            )
        if self.group_effects_deg:
            for name in self.group_effects_deg:
                if name not in CONTRAST_NAMES:
                    raise ValidationError(
                        f"group effects are supported on {CONTRAST_NAMES}, "
                        f"got {name!r}"
                    )
            if self.n_subjects < 2:
                raise ValidationError("two-sample generation needs >= 2 subjects")

    @property
    def model(self) -> PopulationModel:
        if not self.group_effects_deg:
            return PopulationModel()
        return PopulationModel(
            design="two-sample", contrasts=tuple(self.group_effects_deg)
        )

    @property
    def true_fixed(self) -> np.ndarray:
        """True fixed effects in radians, same layout as the fit."""
        fixed = list(np.radians(self.beta_mean_deg))
        if self.group_effects_deg:
            fixed += [math.radians(v) for v in self.group_effects_deg.values()]
        return np.array(fixed)

    @property
    def groups(self) -> np.ndarray:
        g = np.zeros(self.n_subjects, dtype=int)
        if self.group_effects_deg:
            g[self.n_subjects // 2 :] = 1
        return g


def simulate_subject(
    angles, n_frames: int, rng, error_sd: float,
    motion_mean=None, motion_sd=None,
) -> np.ndarray:
    """Rotation sequence (n, 3, 3) for one subject.

    angles: AnatomicalAngles or length-5 array (radians); motion moments
    in radians, defaulting to the walking-trial values.
    """
    rng = as_rng(rng)
    beta = np.asarray(
        angles.to_array() if hasattr(angles, "to_array") else angles, float
    )
    mm = np.radians(DEFAULT_MOTION_MEAN_DEG) if motion_mean is None else motion_mean
    ms = np.radians(DEFAULT_MOTION_SD_DEG) if motion_sd is None else motion_sd
    alpha = rng.normal(mm[0], ms[0], size=n_frames)
    phi = rng.normal(mm[1], ms[1], size=n_frames)
    a = frame_tt(beta[0], beta[1])
    b = frame_st(beta[2], beta[3])
    psi = a @ cardan_compose_xzy(alpha, beta[4], phi) @ b.T
    if error_sd == 0.0:
        return psi
    errors = rotation_from_rotvec(rng.normal(0.0, error_sd, size=(n_frames, 3)))
    return psi @ errors


def simulate_dataset(config: SimConfig, rng):
    """One replicate: subjects' rotations, group codes, true angles."""
    rng = as_rng(rng)
    mean = np.radians(config.beta_mean_deg)
    sds = np.radians(config.sigma0_deg)
    mm = np.radians(config.motion_mean_deg)
    ms = np.radians(config.motion_sd_deg)
    error_sd = math.radians(config.error_sd_deg)
    groups = config.groups
    model = config.model
    true_fixed = config.true_fixed
    subjects, betas = [], []
    for i in range(config.n_subjects):
        mu = model.subject_mean(true_fixed, groups[i])
        beta = rng.normal(mu, sds)
        # axis angles live on [-pi/2, pi/2); reject-and-redraw keeps the
        # normal population model honest near the boundary
        while np.any(np.abs(beta) >= math.pi / 2):
            beta = rng.normal(mu, sds)
        betas.append(beta)
        subjects.append(
            simulate_subject(beta, config.n_frames, rng, error_sd, mm, ms)
        )
    return subjects, groups, np.array(betas)


def _fit_options(config: SimConfig) -> PopulationOptions:
    return PopulationOptions(
        algorithm=config.algorithm,
        max_outer=config.max_outer,
        tol_fixed=config.tol_fixed,
        map_options=FitOptions(validate=False),
        lmm_options=LmmOptions(),
        validate=False,
    )


def _one_replicate(config: SimConfig, seed: np.random.SeedSequence):
    rng = np.random.default_rng(seed)
    subjects, groups, _ = simulate_dataset(config, rng)
    model = config.model
    options = _fit_options(config)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            fit = fit_population(
                subjects,
                groups=groups if model.design == "two-sample" else None,
                model=model,
                options=options,
            )
    except (HingeAxesError, np.linalg.LinAlgError) as exc:
        return {"ok": False, "error": f"{type(exc).__name__}: {exc}"}
    return {
        "ok": True,
        "fixed": fit.fixed,
        "se_fixed": fit.se_fixed,
        "sigma0": fit.sigma0,
        "residual_sd": fit.residual_sd,
        "converged": fit.converged,
        "n_outer": fit.n_outer,
        "n_excluded": len(fit.excluded),
        "loglik": fit.loglik,
    }


@dataclasses.dataclass
class SimReport:
    """Aggregated study results; per-replicate arrays are kept so Monte
    Carlo uncertainty can be re-derived (angles in radians)."""

    config: SimConfig
    param_names: Tuple[str, ...]
    true_fixed: np.ndarray
    fixed_est: np.ndarray
    fixed_se: np.ndarray
    sd_est: np.ndarray
    true_sd: np.ndarray
    residual_sd: np.ndarray
    converged: np.ndarray
    n_outer: np.ndarray
    n_excluded: np.ndarray
    failures: List[str]
    runtime_s: float

    @property
    def n_ok(self) -> int:
        return self.fixed_est.shape[0]

    # --- fixed-effect summaries (degrees) ---

    @property
    def bias_deg(self) -> np.ndarray:
        return np.degrees(self.fixed_est.mean(axis=0) - self.true_fixed)

    @property
    def rmse_deg(self) -> np.ndarray:
        err = self.fixed_est - self.true_fixed
        return np.degrees(np.sqrt((err**2).mean(axis=0)))

    @property
    def mc_se_deg(self) -> np.ndarray:
        """Monte Carlo standard error of the bias estimates."""
        return np.degrees(self.fixed_est.std(axis=0, ddof=1) / math.sqrt(self.n_ok))

    @property
    def var_rel_bias_pct(self) -> np.ndarray:
        """Relative bias (%) of the reported variances against the
        empirical variance of the estimates."""
        reported = (self.fixed_se**2).mean(axis=0)
        empirical = self.fixed_est.var(axis=0, ddof=1)
        return 100.0 * (reported / empirical - 1.0)

    # --- between-subject sd summaries (degrees) ---

    @property
    def sd_bias_deg(self) -> np.ndarray:
        return np.degrees(self.sd_est.mean(axis=0) - self.true_sd)

    @property
    def sd_rmse_deg(self) -> np.ndarray:
        err = self.sd_est - self.true_sd
        return np.degrees(np.sqrt((err**2).mean(axis=0)))

    @property
    def sd_mc_se_deg(self) -> np.ndarray:
        return np.degrees(self.sd_est.std(axis=0, ddof=1) / math.sqrt(self.n_ok))

    def table_fixed(self) -> str:
        head = (
            f"{'param':>8} {'true':>8} {'bias':>8} {'mc se':>8} "
            f"{'rmse':>8} {'var bias %':>11}"
        )
        rows = [head]
        for j, name in enumerate(self.param_names):
            rows.append(
                f"{name:>8} {math.degrees(self.true_fixed[j]):8.2f} "
                f"{self.bias_deg[j]:8.3f} {self.mc_se_deg[j]:8.3f} "
                f"{self.rmse_deg[j]:8.3f} {self.var_rel_bias_pct[j]:11.1f}"
            )
        return "\n".join(rows)

    def table_sds(self) -> str:
        rows = [f"{'component':>10} {'true':>8} {'bias':>8} {'mc se':>8} {'rmse':>8}"]
        for j, name in enumerate(ANGLE_NAMES):
            rows.append(
                f"sd({name:>5}) {math.degrees(self.true_sd[j]):8.2f} "
                f"{self.sd_bias_deg[j]:8.3f} {self.sd_mc_se_deg[j]:8.3f} "
                f"{self.sd_rmse_deg[j]:8.3f}"
            )
        return "\n".join(rows)

    def summary(self) -> str:
        cfg = self.config
        lines = [
            f"{cfg.algorithm} study: {self.n_ok}/{cfg.replicates} replicates OK, "
            f"{cfg.n_subjects} subjects x {cfg.n_frames} frames, "
            f"error sd {cfg.error_sd_deg} deg, {self.runtime_s:.1f} s",
            f"mean residual sd estimate: "
            f"{math.degrees(self.residual_sd.mean()):.4f} deg",
            f"replicates converged: {int(self.converged.sum())}/{self.n_ok}"
            f", mean outer sweeps {self.n_outer.mean():.1f}",
            "",
            "fixed effects (degrees):",
            self.table_fixed(),
            "",
            "between-subject sds (degrees):",
            self.table_sds(),
        ]
        if self.failures:
            lines.append(f"failed replicates: {len(self.failures)}")
        return "\n".join(lines)

    def to_dict(self) -> dict:
        # summaries in degrees for reading, raw per-replicate arrays in
        # radians for downstream reprocessing; units live in the key names
        return {
            "config": dataclasses.asdict(self.config),
            "param_names": list(self.param_names),
            "true_fixed_deg": np.degrees(self.true_fixed).tolist(),
            "bias_deg": self.bias_deg.tolist(),
            "mc_se_deg": self.mc_se_deg.tolist(),
            "rmse_deg": self.rmse_deg.tolist(),
            "var_rel_bias_pct": self.var_rel_bias_pct.tolist(),
            "true_sd_deg": np.degrees(self.true_sd).tolist(),
            "sd_bias_deg": self.sd_bias_deg.tolist(),
            "sd_mc_se_deg": self.sd_mc_se_deg.tolist(),
            "sd_rmse_deg": self.sd_rmse_deg.tolist(),
            "n_ok": self.n_ok,
            "n_converged": int(self.converged.sum()),
            "mean_residual_sd_deg": float(np.degrees(self.residual_sd.mean())),
            "failures": self.failures,
            "runtime_s": self.runtime_s,
            "true_fixed_rad": self.true_fixed.tolist(),
            "true_sd_rad": self.true_sd.tolist(),
            "fixed_est_rad": self.fixed_est.tolist(),
            "fixed_se_rad": self.fixed_se.tolist(),
            "sd_est_rad": self.sd_est.tolist(),
            "residual_sd_rad": self.residual_sd.tolist(),
            "n_outer": self.n_outer.tolist(),
            "n_excluded": self.n_excluded.tolist(),
        }

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), **kwargs)


def run_study(config: SimConfig) -> SimReport:
    """Run the full study and aggregate the replicate fits."""
    t0 = time.perf_counter()
    seeds = np.random.SeedSequence(config.seed).spawn(config.replicates)
    if config.n_jobs == 1:
        raw = [_one_replicate(config, s) for s in seeds]
    else:
        raw = Parallel(n_jobs=config.n_jobs)(
            delayed(_one_replicate)(config, s) for s in seeds
        )
    ok = [r for r in raw if r["ok"]]
    failures = [r["error"] for r in raw if not r["ok"]]
    if not ok:
        raise HingeAxesError(
            f"all {config.replicates} replicates failed; first: {failures[0]}"
        )
    return SimReport(
        config=config,
        param_names=config.model.param_names,
        true_fixed=config.true_fixed,
        fixed_est=np.array([r["fixed"] for r in ok]),
        fixed_se=np.array([r["se_fixed"] for r in ok]),
        sd_est=np.array([r["sigma0"] for r in ok]),
        true_sd=np.radians(config.sigma0_deg),
        residual_sd=np.array([r["residual_sd"] for r in ok]),
        converged=np.array([r["converged"] for r in ok], dtype=bool),
        n_outer=np.array([r["n_outer"] for r in ok]),
        n_excluded=np.array([r["n_excluded"] for r in ok]),
        failures=failures,
        runtime_s=time.perf_counter() - t0,
    )
