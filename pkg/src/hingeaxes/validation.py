"""Input validation helpers for rotation data and angle parameters.

Validation happens at package boundaries (file loading, estimator ``fit``,
CLI); internal numerical code assumes its inputs were checked once and does
not re-validate on every call.
"""

from __future__ import annotations

from typing import Optional, Union

import numpy as np

from .errors import ValidationError

# A matrix whose Frobenius defect from orthonormality is below REPAIR_TOL is
# accepted (after polar re-orthonormalization when above STRICT_TOL); anything
# worse is rejected as data corruption rather than roundoff.
STRICT_TOL = 1e-12
REPAIR_TOL = 1e-6

ArrayLike = Union[np.ndarray, list, tuple]


def orthonormality_defect(matrices: np.ndarray) -> np.ndarray:
    """Frobenius norm of R^T R - I for one (3, 3) or a batch (n, 3, 3)."""
    m = np.asarray(matrices, dtype=float)
    gram = np.swapaxes(m, -1, -2) @ m
    gram = gram - np.eye(3)
    return np.sqrt(np.sum(gram**2, axis=(-2, -1)))


def _polar_project(matrices: np.ndarray) -> np.ndarray:
    """Closest orthogonal matrix in Frobenius norm, via SVD."""
    u, _, vt = np.linalg.svd(matrices)
    return u @ vt


def check_rotation_matrices(
    matrices: ArrayLike,
    name: str = "rotations",
    repair: bool = True,
) -> np.ndarray:
    """Validate a batch of rotation matrices.

    Parameters
    ----------
    matrices : array-like, shape (n, 3, 3) or (3, 3)
        Candidate rotation matrices.
    name : str
        Label used in error messages.
    repair : bool
        If True, matrices whose orthonormality defect lies in
        (STRICT_TOL, REPAIR_TOL] are replaced by their polar projection.

    Returns
    -------
    ndarray, shape (n, 3, 3)
        Validated (possibly re-orthonormalized) float64 copies. A single
        (3, 3) input comes back with shape (1, 3, 3).

    Raises
    ------
    ValidationError
        For wrong shape, non-finite entries, orthonormality defect beyond
        REPAIR_TOL, or determinant not +1 (reflections are rejected).
    """
    arr = np.asarray(matrices, dtype=float)
    if arr.ndim == 2:
        arr = arr[None, :, :]
    if arr.ndim != 3 or arr.shape[-2:] != (3, 3):
        raise ValidationError(
            f"{name}: expected shape (n, 3, 3), got {np.shape(matrices)}"
        )
    if arr.shape[0] == 0:
        raise ValidationError(f"{name}: empty sequence")
    if not np.all(np.isfinite(arr)):
        bad = np.where(~np.isfinite(arr).all(axis=(1, 2)))[0]
        raise ValidationError(f"{name}: non-finite entries at index {bad[0]}")

    arr = arr.copy()
    defect = orthonormality_defect(arr)
    worst = float(defect.max())
    if worst > REPAIR_TOL:
        bad = int(np.argmax(defect))
        raise ValidationError(
            f"{name}[{bad}]: orthonormality defect {worst:.3e} exceeds "
            f"{REPAIR_TOL:.0e}; not a rotation matrix"
        )
    needs_repair = defect > STRICT_TOL
    if np.any(needs_repair):
        if not repair:
            bad = int(np.argmax(defect))
            raise ValidationError(
                f"{name}[{bad}]: orthonormality defect {worst:.3e} exceeds "
                f"{STRICT_TOL:.0e} and repair is disabled"
            )
        arr[needs_repair] = _polar_project(arr[needs_repair])

    det = np.linalg.det(arr)
    if np.any(det < 0.5):
        bad = int(np.argmin(det))
        raise ValidationError(
            f"{name}[{bad}]: determinant {det[bad]:+.3f}; reflections and "
            "degenerate matrices are not valid rotations"
        )
    return arr


def check_angles(
    values: ArrayLike,
    name: str = "angles",
    size: Optional[int] = None,
) -> np.ndarray:
    """Coerce to a finite 1-d float array, optionally of fixed size."""
    arr = np.asarray(values, dtype=float).ravel()
    if size is not None and arr.size != size:
        raise ValidationError(f"{name}: expected {size} values, got {arr.size}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name}: non-finite entries")
    return arr


def check_positive(value: float, name: str) -> float:
    value = float(value)
    if not np.isfinite(value) or value <= 0.0:
        raise ValidationError(f"{name} must be a positive finite number, got {value}")
    return value


def as_rng(seed: Union[None, int, np.random.Generator]) -> np.random.Generator:
    """Coerce a seed or Generator into a Generator."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)
