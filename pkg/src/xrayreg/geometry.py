"""Pinhole X-ray camera model.

The canonical renderer frame places the source at (f/2, 0, 0) looking down
the negative x axis; the detector plane sits at x = -f/2. Image columns run
along +y and rows run along -z, so row index increases downward.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .lie import Pose, compose, inverse

# axis permutation taking the imaging-system frame (camera at origin looking
# down -z) to the renderer frame (camera on +x looking down -x)
_AXIS_PERM = np.array(
    [
        [0.0, 0.0, -1.0, 0.0],
        [0.0, 1.0, 0.0, 0.0],
        [1.0, 0.0, 0.0, 0.0],
        [0.0, 0.0, 0.0, 1.0],
    ]
)


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole intrinsics: focal lengths and principal point in pixels,
    pixel spacings in mm/pixel, detector dims in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    delta_x: float
    delta_y: float
    height: int
    width: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0 or self.delta_x <= 0 or self.delta_y <= 0:
            raise ValueError("focal lengths and pixel spacings must be positive")
        if self.height < 2 or self.width < 2:
            raise ValueError("detector must be at least 2x2 pixels")

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])


@dataclass(frozen=True)
class Detector:
    """Source point and per-pixel ray targets in the canonical frame.

    pixel_targets is (H*W, 3), row-major with the top-left pixel first.
    """

    focal_length: float
    principal_offset: tuple[float, float]
    delta_x: float
    delta_y: float
    height: int
    width: int
    source: np.ndarray
    pixel_targets: np.ndarray

    @property
    def n_pixels(self) -> int:
        return self.height * self.width


def parse_intrinsics(intr: Intrinsics) -> tuple[float, tuple[float, float]]:
    """Reduce pixel-unit intrinsics to a metric focal length and principal
    offset on the detector plane."""
    f = 0.5 * (intr.fx * intr.delta_x + intr.fy * intr.delta_y)
    cpx = intr.delta_x * (intr.width / 2.0 - intr.cx)
    cpy = intr.delta_y * (intr.height / 2.0 - intr.cy)
    return f, (cpx, cpy)


def make_detector(
    focal_length: float,
    principal_offset: tuple[float, float],
    delta_x: float,
    delta_y: float,
    height: int,
    width: int,
) -> Detector:
    """Build the canonical source point and pixel-center target grid."""
    if focal_length <= 0 or delta_x <= 0 or delta_y <= 0:
        raise ValueError("focal length and spacings must be positive")
    if height < 1 or width < 1:
        raise ValueError("detector dims must be positive")
    cpx, cpy = principal_offset
    source = np.array([focal_length / 2.0, 0.0, 0.0])
    cols = (np.arange(width) - (width - 1) / 2.0) * delta_x + cpx
    rows = ((height - 1) / 2.0 - np.arange(height)) * delta_y + cpy
    yy, zz = np.meshgrid(cols, rows)  # zz[i, j] is the row-i plane coordinate
    targets = np.stack(
        [np.full(height * width, -focal_length / 2.0), yy.ravel(), zz.ravel()], axis=1
    )
    return Detector(
        focal_length=focal_length,
        principal_offset=(float(cpx), float(cpy)),
        delta_x=float(delta_x),
        delta_y=float(delta_y),
        height=int(height),
        width=int(width),
        source=source,
        pixel_targets=targets,
    )


def detector_from_intrinsics(intr: Intrinsics) -> Detector:
    f, cp = parse_intrinsics(intr)
    return make_detector(f, cp, intr.delta_x, intr.delta_y, intr.height, intr.width)


def convert_extrinsic(T: Pose, focal_length: float) -> Pose:
    """Map an imaging-system extrinsic matrix into the renderer frame."""
    B = np.eye(4)
    B[0, 3] = -focal_length / 2.0
    M = inverse(T).matrix() @ _AXIS_PERM @ B
    return Pose.from_matrix(M)


def invert_extrinsic_conversion(T_tilde: Pose, focal_length: float) -> Pose:
    """Algebraic inverse of convert_extrinsic."""
    B = np.eye(4)
    B[0, 3] = -focal_length / 2.0
    M = T_tilde.matrix() @ np.linalg.inv(B) @ np.linalg.inv(_AXIS_PERM)
    return inverse(Pose.from_matrix(M))


def project_landmarks(K: np.ndarray, T: Pose, M: np.ndarray) -> np.ndarray:
    """Homogeneous-weighted projection K (R M + t), returned as 3 x m.

    No perspective division is applied; use project_landmarks_2d for
    image-plane coordinates.
    """
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != 3 or M.shape[1] < 1:
        raise ValueError("landmarks must be a 3 x m array with m >= 1")
    return np.asarray(K, dtype=float) @ (T.R @ M + T.t[:, None])


def project_landmarks_2d(K: np.ndarray, T: Pose, M: np.ndarray) -> np.ndarray:
    """Perspective-divided 2D projections (2 x m), for visualization."""
    P = project_landmarks(K, T, M)
    return P[:2] / P[2]


# ---------------------------------------------------------------------------
# intrinsics sidecar: "key = value" lines
# ---------------------------------------------------------------------------

_INTR_FIELDS = ("fx", "fy", "cx", "cy", "delta_x", "delta_y", "height", "width")


def save_intrinsics(path, intr: Intrinsics) -> None:
    with open(path, "w") as fh:
        for name in _INTR_FIELDS:
            fh.write(f"{name} = {getattr(intr, name)!r}\n")


def load_intrinsics(path) -> Intrinsics:
    fields = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            fields[key.strip()] = value.strip()
    missing = [n for n in _INTR_FIELDS if n not in fields]
    if missing:
        raise ValueError(f"{path}: missing intrinsics fields {missing}")
    return Intrinsics(
        fx=float(fields["fx"]),
        fy=float(fields["fy"]),
        cx=float(fields["cx"]),
        cy=float(fields["cy"]),
        delta_x=float(fields["delta_x"]),
        delta_y=float(fields["delta_y"]),
        height=int(fields["height"]),
        width=int(fields["width"]),
    )
