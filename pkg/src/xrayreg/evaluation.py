"""Registration accuracy metrics: mTRE and success rates over landmark sets."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .lie import Pose


@dataclass
class LandmarkSet:
    """Named 3D landmarks (mm, volume frame), stored as a 3 x m matrix."""

    points: np.ndarray
    labels: list[str]

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float)
        if self.points.ndim != 2 or self.points.shape[0] != 3 or self.points.shape[1] < 1:
            raise ValueError("landmarks must form a 3 x m matrix with m >= 1")
        if not np.all(np.isfinite(self.points)):
            raise ValueError("landmark coordinates must be finite")
        if len(self.labels) != self.points.shape[1]:
            raise ValueError("one label per landmark required")

    @property
    def m(self) -> int:
        return self.points.shape[1]


def mtre(
    K: np.ndarray,
    T_true: Pose,
    T_est: Pose,
    landmarks: LandmarkSet,
    mode: str = "frobenius",
) -> float:
    """Target registration error between two poses over a landmark set.

    mode="frobenius" evaluates (1/m) ||K ([R|t] - [R'|t']) M||_F directly;
    mode="per_landmark" is the field convention, the mean of per-landmark
    distances ||K (R M_i + t) - K (R' M_i + t')||. The two differ by a factor
    of up to sqrt(m).
    """
    K = np.asarray(K, dtype=float)
    M = landmarks.points
    diff = K @ ((T_true.R - T_est.R) @ M + (T_true.t - T_est.t)[:, None])
    if mode == "frobenius":
        return float(np.linalg.norm(diff) / landmarks.m)
    if mode == "per_landmark":
        return float(np.linalg.norm(diff, axis=0).mean())
    raise ValueError(f"unknown mTRE mode {mode!r}")


@dataclass
class SuccessStats:
    fraction: float
    median: float
    mean: float
    std: float
    n: int


def smsr(errors, threshold: float = 1.0) -> SuccessStats:
    """Fraction of registrations strictly below the error threshold (mm),
    with summary statistics of the error distribution."""
    errors = np.asarray(list(errors), dtype=float)
    if errors.size == 0:
        raise ValueError("no registration results supplied")
    return SuccessStats(
        fraction=float(np.mean(errors < threshold)),
        median=float(np.median(errors)),
        mean=float(np.mean(errors)),
        std=float(np.std(errors)),
        n=int(errors.size),
    )


def save_landmarks(path, landmarks: LandmarkSet) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["label", "x", "y", "z"])
        for i, label in enumerate(landmarks.labels):
            writer.writerow([label] + [repr(float(x)) for x in landmarks.points[:, i]])


def load_landmarks(path) -> LandmarkSet:
    labels = []
    points = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if [h.strip().lower() for h in header[:4]] != ["label", "x", "y", "z"]:
            raise ValueError(f"{path}: expected header label,x,y,z")
        for row in reader:
            if not row:
                continue
            labels.append(row[0])
            points.append([float(row[1]), float(row[2]), float(row[3])])
    if not points:
        raise ValueError(f"{path}: no landmarks")
    return LandmarkSet(np.array(points).T, labels)
