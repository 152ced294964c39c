"""Rotation algebra for a two-hinge joint model.

The joint is modelled as two successive hinges: an upper axis fixed in the
proximal segment and a lower axis fixed in the distal segment.  Axis
orientations are written with two anatomical angles each, inclination and
deviation, measured in a right-handed body frame whose x axis points right,
y forward and z up.

Angles are radians everywhere in this package; degrees appear only at I/O
boundaries.  Cardan angles use the X-Z-Y convention, i.e.
``R = axis_rotation(alpha, "x") @ axis_rotation(gamma, "z") @
axis_rotation(phi, "y")``.
"""

from __future__ import annotations

import dataclasses
import math
from typing import NamedTuple, Union

import numpy as np

from .errors import DomainError, GimbalLockError
from .validation import as_rng

HALF_PI = math.pi / 2.0

# Inclination/deviation angles this close to +/- pi/2 sit on a tangent or
# gimbal singularity and are rejected rather than silently folded.
SINGULARITY_TOL = 1e-9

_AXIS_INDEX = {"x": 0, "y": 1, "z": 2}

Scalar = Union[float, np.ndarray]


def fold_half_pi(angle: float) -> float:
    """Fold an angle into [-pi/2, pi/2) modulo pi."""
    return (float(angle) + HALF_PI) % math.pi - HALF_PI


class CardanAngles(NamedTuple):
    """X-Z-Y Cardan triple (radians)."""

    alpha: float
    gamma: float
    phi: float


@dataclasses.dataclass(frozen=True)
class AnatomicalAngles:
    """Axis orientations and offset of the two-hinge model.

    Parameters
    ----------
    t1, t2 : float
        Inclination and deviation of the upper axis (radians).
    s1, s2 : float
        Inclination and deviation of the lower axis (radians).
    gamma0 : float
        Fixed rotation offset about the z axis between the two hinge frames
        (radians).

    All five angles live on [-pi/2, pi/2); construction folds them into that
    range modulo pi (axis directions are sign-free, so folding preserves the
    geometry).  Non-finite values are rejected.
    """

    t1: float
    t2: float
    s1: float
    s2: float
    gamma0: float

    def __post_init__(self):
        for name in ("t1", "t2", "s1", "s2", "gamma0"):
            value = getattr(self, name)
            if not math.isfinite(value):
                raise DomainError(f"{name} must be finite, got {value}")
            object.__setattr__(self, name, fold_half_pi(value))

    @classmethod
    def from_array(cls, values) -> "AnatomicalAngles":
        values = np.asarray(values, dtype=float).ravel()
        if values.size != 5:
            raise DomainError(f"expected 5 angles, got {values.size}")
        return cls(*values)

    @classmethod
    def from_degrees(cls, t1, t2, s1, s2, gamma0) -> "AnatomicalAngles":
        return cls(*(math.radians(v) for v in (t1, t2, s1, s2, gamma0)))

    def to_array(self) -> np.ndarray:
        return np.array([self.t1, self.t2, self.s1, self.s2, self.gamma0])

    def to_degrees(self) -> np.ndarray:
        return np.degrees(self.to_array())


def axis_rotation(angle: Scalar, axis: str) -> np.ndarray:
    """Right-handed rotation about a coordinate axis.

    Parameters
    ----------
    angle : float or ndarray, shape (n,)
        Rotation angle(s) in radians.
    axis : {"x", "y", "z"}

    Returns
    -------
    ndarray, shape (3, 3) for scalar input, (n, 3, 3) for array input.
    """
    try:
        k = _AXIS_INDEX[axis]
    except KeyError:
        raise DomainError(f"axis must be one of 'x', 'y', 'z', got {axis!r}")
    a = np.asarray(angle, dtype=float)
    c, s = np.cos(a), np.sin(a)
    out = np.zeros(a.shape + (3, 3))
    i, j = (k + 1) % 3, (k + 2) % 3
    out[..., k, k] = 1.0
    out[..., i, i] = c
    out[..., j, j] = c
    out[..., j, i] = s
    out[..., i, j] = -s
    return out


def cardan_compose_xzy(alpha: Scalar, gamma: Scalar, phi: Scalar) -> np.ndarray:
    """Rotation matrix from X-Z-Y Cardan angles; broadcasts over arrays."""
    return (
        axis_rotation(alpha, "x")
        @ axis_rotation(gamma, "z")
        @ axis_rotation(phi, "y")
    )


def cardan_decompose_xzy(matrix: np.ndarray) -> CardanAngles:
    """Recover X-Z-Y Cardan angles from a rotation matrix.

    Raises
    ------
    GimbalLockError
        When |R[0, 1]| is within SINGULARITY_TOL of 1, where the alpha/phi
        split is not identifiable.
    """
    m = np.asarray(matrix, dtype=float)
    s = -m[0, 1]
    if abs(s) >= 1.0 - SINGULARITY_TOL:
        raise GimbalLockError(
            f"|sin(gamma)| = {abs(s):.12f}: alpha and phi are not separable"
        )
    gamma = math.asin(s)
    # atan2 yields (-pi, pi]; fold the closed end so angles live in [-pi, pi)
    alpha = math.atan2(m[2, 1], m[1, 1])
    phi = math.atan2(m[0, 2], m[0, 0])
    if alpha == math.pi:
        alpha = -math.pi
    if phi == math.pi:
        phi = -math.pi
    return CardanAngles(alpha, gamma, phi)


def _check_incl_dev(a1: float, a2: float, who: str) -> None:
    for label, v in ((f"{who} inclination", a1), (f"{who} deviation", a2)):
        if not (-HALF_PI - SINGULARITY_TOL <= v < HALF_PI):
            raise DomainError(f"{label} {v!r} outside [-pi/2, pi/2)")
    if abs(abs(a2) - HALF_PI) <= SINGULARITY_TOL:
        raise DomainError(f"{who} deviation within {SINGULARITY_TOL} of +/-pi/2")


def unit_vector_tt(t1: float, t2: float) -> np.ndarray:
    """Unit direction of the upper hinge axis.

    ``(cos t1, cos t1 tan t2, -sin t1) / sqrt(1 + cos^2 t1 tan^2 t2)``.
    At t1 = -pi/2 the limit (0, 0, 1) is returned regardless of t2.
    """
    _check_incl_dev(t1, t2, "upper axis")
    c, tn = math.cos(t1), math.tan(t2)
    d = math.sqrt(1.0 + c * c * tn * tn)
    return np.array([c, c * tn, -math.sin(t1)]) / d


def unit_vector_st(s1: float, s2: float) -> np.ndarray:
    """Unit direction of the lower hinge axis.

    ``(-cos s1 tan s2, cos s1, sin s1) / sqrt(1 + cos^2 s1 tan^2 s2)``.
    """
    _check_incl_dev(s1, s2, "lower axis")
    c, tn = math.cos(s1), math.tan(s2)
    d = math.sqrt(1.0 + c * c * tn * tn)
    return np.array([-c * tn, c, math.sin(s1)]) / d


def frame_tt(t1: float, t2: float) -> np.ndarray:
    """Orthonormal frame whose first column is ``unit_vector_tt(t1, t2)``.

    Equal to ``axis_rotation(t1, "y") @ axis_rotation(j, "z")`` with
    ``j = arctan(cos t1 tan t2)``.
    """
    _check_incl_dev(t1, t2, "upper axis")
    c1, s1v = math.cos(t1), math.sin(t1)
    j = math.atan2(c1 * math.tan(t2), 1.0)
    cj, sj = math.cos(j), math.sin(j)
    return np.array(
        [
            [c1 * cj, -c1 * sj, s1v],
            [sj, cj, 0.0],
            [-s1v * cj, s1v * sj, c1],
        ]
    )


def frame_st(s1: float, s2: float) -> np.ndarray:
    """Orthonormal frame whose second column is ``unit_vector_st(s1, s2)``.

    Equal to ``axis_rotation(s1, "x") @ axis_rotation(k, "z")`` with
    ``k = arctan(cos s1 tan s2)``.
    """
    _check_incl_dev(s1, s2, "lower axis")
    c1, s1v = math.cos(s1), math.sin(s1)
    k = math.atan2(c1 * math.tan(s2), 1.0)
    ck, sk = math.cos(k), math.sin(k)
    return np.array(
        [
            [ck, -sk, 0.0],
            [c1 * sk, c1 * ck, -s1v],
            [s1v * sk, s1v * ck, c1],
        ]
    )


def unit_vector_tt_jacobian(t1: float, t2: float) -> np.ndarray:
    """(3, 2) Jacobian of the upper axis direction w.r.t. (t1, t2).

    Both columns are tangent to the unit sphere, expressed in the
    ``frame_tt`` basis: d/dt1 = -(sin t1 tan t2 / D^2) a2 - a3 / D and
    d/dt2 = (cos t1 (1 + tan^2 t2) / D^2) a2, with D^2 = 1 + cos^2 t1
    tan^2 t2 and a2, a3 the second and third frame columns.
    """
    frame = frame_tt(t1, t2)
    c1, s1v, tn = math.cos(t1), math.sin(t1), math.tan(t2)
    d2 = 1.0 + c1 * c1 * tn * tn
    col1 = -(s1v * tn / d2) * frame[:, 1] - frame[:, 2] / math.sqrt(d2)
    col2 = (c1 * (1.0 + tn * tn) / d2) * frame[:, 1]
    return np.column_stack([col1, col2])


def unit_vector_st_jacobian(s1: float, s2: float) -> np.ndarray:
    """(3, 2) Jacobian of the lower axis direction w.r.t. (s1, s2)."""
    frame = frame_st(s1, s2)
    c1, s1v, tn = math.cos(s1), math.sin(s1), math.tan(s2)
    d2 = 1.0 + c1 * c1 * tn * tn
    col1 = (s1v * tn / d2) * frame[:, 0] + frame[:, 2] / math.sqrt(d2)
    col2 = -(c1 * (1.0 + tn * tn) / d2) * frame[:, 0]
    return np.column_stack([col1, col2])


def rotation_from_rotvec(vec: np.ndarray) -> np.ndarray:
    """Rotation(s) about axis vec/|vec| by angle |vec| (Rodrigues).

    Accepts shape (3,) or (n, 3); |vec| = 0 returns the identity.
    """
    v = np.asarray(vec, dtype=float)
    single = v.ndim == 1
    v = np.atleast_2d(v)
    angle = np.linalg.norm(v, axis=1)
    # sinc-style series near zero keeps the map smooth at the identity
    small = angle < 1e-12
    safe = np.where(small, 1.0, angle)
    k = v / safe[:, None]
    kx, ky, kz = k[:, 0], k[:, 1], k[:, 2]
    zeros = np.zeros_like(kx)
    cross = np.stack(
        [
            np.stack([zeros, -kz, ky], axis=-1),
            np.stack([kz, zeros, -kx], axis=-1),
            np.stack([-ky, kx, zeros], axis=-1),
        ],
        axis=-2,
    )
    sin_a = np.sin(angle)[:, None, None]
    cos_a = np.cos(angle)[:, None, None]
    out = np.eye(3) + sin_a * cross + (1.0 - cos_a) * (cross @ cross)
    out[small] = np.eye(3)
    if single:
        return out[0]
    return out


def sample_error_rotation(
    sigma: float, rng=None, size: int = None
) -> np.ndarray:
    """Small random rotations with axis z/|z|, angle |z|, z ~ N(0, sigma^2 I3).

    The expected rotation angle is sigma * sqrt(8 / pi).  ``sigma = 0``
    returns exact identities.

    Parameters
    ----------
    sigma : float >= 0
        Scale of the latent Gaussian vector, radians.
    rng : Generator or int seed, optional
    size : int, optional
        Number of samples; None gives a single (3, 3) matrix.
    """
    if sigma < 0 or not math.isfinite(sigma):
        raise DomainError(f"sigma must be >= 0, got {sigma}")
    rng = as_rng(rng)
    n = 1 if size is None else int(size)
    z = rng.normal(0.0, 1.0, size=(n, 3)) * sigma
    out = rotation_from_rotvec(z)
    if size is None:
        return out[0]
    return out


def rotation_angle(matrix: np.ndarray) -> Scalar:
    """Geodesic rotation angle(s) of (batched) rotation matrices."""
    m = np.asarray(matrix, dtype=float)
    tr = np.trace(m, axis1=-2, axis2=-1)
    return np.arccos(np.clip((tr - 1.0) / 2.0, -1.0, 1.0))
