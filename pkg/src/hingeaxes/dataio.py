"""File formats and small data utilities.

Two CSV layouts are supported, distinguished by their header:

* rotation-matrix rows:
  ``subject_id,group_id,frame_index,r11,r12,r13,r21,r22,r23,r31,r32,r33``
  with r_ij the entry in row i, column j of the rotation matrix.
* Cardan rows: ``subject_id,group_id,frame_index,alpha_deg,gamma_deg,phi_deg``
  holding X-Z-Y Cardan angles in degrees, composed into matrices on load.

group_id may be left empty when there is no grouping; when present it must
be constant within a subject and coded 0/1.  Frames are ordered by
frame_index within each subject, subjects by first appearance.

Config files are plain ``key = value`` lines with ``#`` comments; values
stay strings and are coerced where they are used.
"""

from __future__ import annotations

import csv
import dataclasses
import math
from pathlib import Path
from typing import Dict, List, Optional, Union

import numpy as np

from .errors import DataError, ValidationError
from .rotations import cardan_compose_xzy, cardan_decompose_xzy
from .validation import check_rotation_matrices

MATRIX_COLUMNS = [
    "subject_id", "group_id", "frame_index",
    "r11", "r12", "r13", "r21", "r22", "r23", "r31", "r32", "r33",
]
CARDAN_COLUMNS = [
    "subject_id", "group_id", "frame_index", "alpha_deg", "gamma_deg", "phi_deg",
]


@dataclasses.dataclass
class Dataset:
    """Rotation sequences for one or more subjects.

    source records where the data came from (the file path on load);
    frequency_hz the capture rate when known; stride the cumulative
    subsampling factor relative to the original recording, so the
    effective rate is frequency_hz / stride.
    """

    subjects: List[np.ndarray]
    subject_ids: List[str]
    groups: Optional[np.ndarray] = None
    source: str = ""
    frequency_hz: Optional[float] = None
    stride: int = 1

    def __post_init__(self):
        if len(self.subjects) != len(self.subject_ids):
            raise ValidationError("one id per subject required")
        if self.groups is not None:
            self.groups = np.asarray(self.groups, dtype=int).ravel()
            if self.groups.size != len(self.subjects):
                raise ValidationError("one group code per subject required")
        if self.stride < 1:
            raise ValidationError(f"stride must be >= 1, got {self.stride}")

    @property
    def n_subjects(self) -> int:
        return len(self.subjects)

    @property
    def n_frames(self) -> List[int]:
        return [r.shape[0] for r in self.subjects]

    def subsample(self, step: int) -> "Dataset":
        """Every step-th frame of every subject; a cheap guard against
        serially correlated errors in densely sampled trials."""
        step = int(step)
        if step < 1:
            raise ValidationError(f"subsample step must be >= 1, got {step}")
        kept = [r[::step].copy() for r in self.subjects]
        for sid, r in zip(self.subject_ids, kept):
            if r.shape[0] < 6:
                raise ValidationError(
                    f"subsampling by {step} leaves subject {sid!r} with "
                    f"{r.shape[0]} frames; need at least 6"
                )
        return Dataset(
            kept,
            list(self.subject_ids),
            None if self.groups is None else self.groups.copy(),
            source=self.source,
            frequency_hz=self.frequency_hz,
            stride=self.stride * step,
        )


def lag1_autocorrelation(values: np.ndarray) -> float:
    """Lag-one autocorrelation; nan for fewer than three values."""
    x = np.asarray(values, dtype=float).ravel()
    if x.size < 3:
        return math.nan
    x = x - x.mean()
    denom = float(x @ x)
    if denom == 0.0:
        return 0.0
    return float(x[:-1] @ x[1:] / denom)


def _parse_float(text: str, where: str) -> float:
    try:
        return float(text)
    except ValueError:
        raise DataError(f"{where}: expected a number, got {text!r}")


def _parse_rows(path: Union[str, Path]):
    path = Path(path)
    try:
        handle = path.open(newline="")
    except OSError as exc:
        raise DataError(f"cannot open {path}: {exc}")
    with handle:
        reader = csv.reader(handle)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file")
        header = [h.strip() for h in header]
        if header == MATRIX_COLUMNS:
            kind = "matrix"
        elif header == CARDAN_COLUMNS:
            kind = "cardan"
        else:
            raise DataError(
                f"{path}: unrecognized header {header!r}; expected "
                f"{MATRIX_COLUMNS} or {CARDAN_COLUMNS}"
            )
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(header):
                raise DataError(
                    f"{path}:{lineno}: expected {len(header)} fields, "
                    f"got {len(row)}"
                )
            rows.append((lineno, [cell.strip() for cell in row]))
    if not rows:
        raise DataError(f"{path}: no data rows")
    return kind, rows


def load_dataset(path: Union[str, Path], validate: bool = True) -> Dataset:
    """Read either supported CSV layout into a Dataset.

    Raises DataError for parse problems and ValidationError for semantic
    ones (inconsistent group codes, duplicate frames, invalid rotations).
    """
    kind, rows = _parse_rows(path)
    by_subject: Dict[str, dict] = {}
    order: List[str] = []
    for lineno, row in rows:
        where = f"{path}:{lineno}"
        sid, gid = row[0], row[1]
        try:
            frame = int(row[2])
        except ValueError:
            raise DataError(f"{where}: frame_index must be an integer")
        values = [_parse_float(cell, where) for cell in row[3:]]
        if kind == "matrix":
            matrix = np.array(values).reshape(3, 3)
        else:
            alpha, gamma, phi = np.radians(values)
            matrix = cardan_compose_xzy(alpha, gamma, phi)
        if sid not in by_subject:
            by_subject[sid] = {"group": gid, "frames": {}}
            order.append(sid)
        entry = by_subject[sid]
        if entry["group"] != gid:
            raise ValidationError(
                f"{where}: subject {sid!r} has inconsistent group codes"
            )
        if frame in entry["frames"]:
            raise ValidationError(f"{where}: duplicate frame {frame} for {sid!r}")
        entry["frames"][frame] = matrix

    group_codes = [by_subject[sid]["group"] for sid in order]
    has_groups = any(code != "" for code in group_codes)
    groups = None
    if has_groups:
        parsed = []
        for sid, code in zip(order, group_codes):
            if code == "":
                raise ValidationError(f"subject {sid!r} is missing a group code")
            try:
                parsed.append(int(code))
            except ValueError:
                raise ValidationError(
                    f"subject {sid!r}: group code {code!r} is not an integer"
                )
        groups = np.array(parsed, dtype=int)

    subjects = []
    for sid in order:
        frames = by_subject[sid]["frames"]
        stacked = np.stack([frames[k] for k in sorted(frames)])
        if validate:
            stacked = check_rotation_matrices(stacked, name=f"subject {sid!r}")
        subjects.append(stacked)
    return Dataset(subjects, order, groups, source=str(path))


def write_dataset(
    path: Union[str, Path], dataset: Dataset, layout: str = "matrix"
) -> None:
    """Write a Dataset in either CSV layout."""
    if layout not in ("matrix", "cardan"):
        raise ValidationError(f"layout must be 'matrix' or 'cardan', got {layout!r}")
    path = Path(path)
    with path.open("w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(MATRIX_COLUMNS if layout == "matrix" else CARDAN_COLUMNS)
        for i, (sid, rot) in enumerate(zip(dataset.subject_ids, dataset.subjects)):
            gid = "" if dataset.groups is None else str(int(dataset.groups[i]))
            for k in range(rot.shape[0]):
                if layout == "matrix":
                    tail = [f"{v:.17g}" for v in rot[k].ravel()]
                else:
                    angles = cardan_decompose_xzy(rot[k])
                    tail = [f"{math.degrees(v):.17g}" for v in angles]
                writer.writerow([sid, gid, k] + tail)


def read_config(path: Union[str, Path]) -> Dict[str, str]:
    """Parse a key = value config file; later keys override earlier ones."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise DataError(f"cannot open {path}: {exc}")
    out: Dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise DataError(f"{path}:{lineno}: expected 'key = value'")
        key, value = stripped.split("=", 1)
        key = key.strip()
        if not key:
            raise DataError(f"{path}:{lineno}: empty key")
        out[key] = value.strip()
    return out
