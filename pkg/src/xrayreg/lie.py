"""SE(3)/SO(3) group operations, geodesic distances, and pose parameterizations.

Conventions used throughout:
  * A rigid pose is a rotation matrix ``R`` (3x3) plus a translation ``t``
    in millimeters, acting on column vectors as ``x -> R @ x + t``.
  * Tangent vectors are 6-arrays laid out ``[wx, wy, wz, ux, uy, uz]``:
    rotational part first (radians), translational part last (mm).
  * Euler angles are intrinsic Z-Y-X (yaw, pitch, roll); quaternions are
    scalar-first (w, x, y, z).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import IllConditionedError

# Below this rotation angle the closed-form exp/log coefficients are
# evaluated by their Taylor series to avoid 0/0 cancellation.
SMALL_ANGLE = 1e-6
# Logarithms are refused within this margin of the branch cut at angle pi.
PI_MARGIN = 1e-6


@dataclass(frozen=True)
class Pose:
    """Rigid transform: rotation matrix plus translation in mm."""

    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.R, dtype=float)
        t = np.asarray(self.t, dtype=float).reshape(3)
        if R.shape != (3, 3) or not np.all(np.isfinite(R)) or not np.all(np.isfinite(t)):
            raise ValueError("pose requires a finite 3x3 rotation and 3-vector translation")
        if np.max(np.abs(R.T @ R - np.eye(3))) > 1e-9 or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise ValueError("rotation matrix is not special orthogonal (tol 1e-9)")
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    def matrix(self) -> np.ndarray:
        """4x4 homogeneous matrix."""
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.t
        return T

    @classmethod
    def from_matrix(cls, T: np.ndarray) -> "Pose":
        T = np.asarray(T, dtype=float)
        if T.shape != (4, 4):
            raise ValueError("expected a 4x4 matrix")
        return cls(T[:3, :3], T[:3, 3])

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))


def hat(w: np.ndarray) -> np.ndarray:
    """3-vector -> skew-symmetric matrix such that hat(w) @ x = w x x."""
    wx, wy, wz = w
    return np.array([[0.0, -wz, wy], [wz, 0.0, -wx], [-wy, wx, 0.0]])


def _check_finite(v, name):
    v = np.asarray(v, dtype=float)
    if not np.all(np.isfinite(v)):
        raise ValueError(f"{name} contains non-finite entries")
    return v


def _rot_coeffs(theta: float, taylor: bool) -> tuple[float, float, float]:
    """Coefficients (sin t/t, (1-cos t)/t^2, (t-sin t)/t^3) with Taylor branch."""
    if taylor:
        t2 = theta * theta
        return 1.0 - t2 / 6.0, 0.5 - t2 / 24.0, 1.0 / 6.0 - t2 / 120.0
    t2 = theta * theta
    return (
        math.sin(theta) / theta,
        (1.0 - math.cos(theta)) / t2,
        (theta - math.sin(theta)) / (t2 * theta),
    )


def _exp_se3_branched(v: np.ndarray, taylor: bool) -> Pose:
    w = v[:3]
    u = v[3:]
    theta = float(np.linalg.norm(w))
    a, b, c = _rot_coeffs(theta, taylor)
    W = hat(w)
    W2 = W @ W
    R = np.eye(3) + a * W + b * W2
    V = np.eye(3) + b * W + c * W2
    return Pose(R, V @ u)


def exp_so3(w: np.ndarray) -> np.ndarray:
    """Rodrigues formula: rotation vector (rad) -> rotation matrix."""
    w = _check_finite(w, "rotation vector").reshape(3)
    theta = float(np.linalg.norm(w))
    a, b, _ = _rot_coeffs(theta, theta < SMALL_ANGLE)
    W = hat(w)
    return np.eye(3) + a * W + b * (W @ W)


def log_so3(R: np.ndarray) -> np.ndarray:
    """Rotation matrix -> rotation vector; errors within PI_MARGIN of angle pi."""
    R = np.asarray(R, dtype=float)
    # vee of the antisymmetric part has norm sin(theta); atan2 is better
    # conditioned near pi than arccos of the trace.
    s = 0.5 * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    sin_theta = float(np.linalg.norm(s))
    cos_theta = 0.5 * (float(np.trace(R)) - 1.0)
    theta = math.atan2(sin_theta, cos_theta)
    if theta > math.pi - PI_MARGIN:
        raise IllConditionedError(
            f"rotation angle {theta:.9f} is within {PI_MARGIN} of pi; the log branch is ill-conditioned"
        )
    if theta < SMALL_ANGLE:
        return s * (1.0 + theta * theta / 6.0)
    return s * (theta / sin_theta)


def exp_se3(v: np.ndarray) -> Pose:
    """Closed-form exponential map from a 6-vector [w, u] to a pose."""
    v = _check_finite(v, "tangent").reshape(6)
    theta = float(np.linalg.norm(v[:3]))
    return _exp_se3_branched(v, theta < SMALL_ANGLE)


def log_se3(T: Pose) -> np.ndarray:
    """Inverse of exp_se3 on the canonical branch (angle < pi)."""
    w = log_so3(T.R)
    theta = float(np.linalg.norm(w))
    _, b, c = _rot_coeffs(theta, theta < SMALL_ANGLE)
    W = hat(w)
    V = np.eye(3) + b * W + c * (W @ W)
    u = np.linalg.solve(V, T.t)
    return np.concatenate([w, u])


def compose(A: Pose, B: Pose) -> Pose:
    """Pose product A o B (apply B first, then A)."""
    return Pose(A.R @ B.R, A.R @ B.t + A.t)


def inverse(T: Pose) -> Pose:
    return Pose(T.R.T, -T.R.T @ T.t)


def transform_points(T: Pose, X: np.ndarray) -> np.ndarray:
    """Apply a pose to an n x 3 array of points."""
    X = np.asarray(X, dtype=float)
    return X @ T.R.T + T.t


def geodesic_so3(RA: np.ndarray, RB: np.ndarray) -> float:
    """Angular distance between two rotations, in [0, pi]."""
    arg = 0.5 * (float(np.trace(np.asarray(RA).T @ np.asarray(RB))) - 1.0)
    return math.acos(min(1.0, max(-1.0, arg)))


def geodesic_log_se3(TA: Pose, TB: Pose) -> float:
    """Norm of the relative pose's tangent vector (rad and mm mixed)."""
    return float(np.linalg.norm(log_se3(compose(inverse(TA), TB))))


def double_geodesic(TA: Pose, TB: Pose, focal_length: float) -> float:
    """Length-valued pose distance: rotation arc at radius f/2 plus translation."""
    if focal_length <= 0:
        raise ValueError("focal length must be positive")
    d_theta = 0.5 * focal_length * geodesic_so3(TA.R, TB.R)
    d_t = float(np.linalg.norm(TA.t - TB.t))
    return math.hypot(d_theta, d_t)


# ---------------------------------------------------------------------------
# Euclidean parameterizations of SE(3)
# ---------------------------------------------------------------------------

PARAM_KINDS = ("se3", "axis_angle", "euler", "quaternion", "rotation6d")

# number of rotational parameters per kind (translation adds 3 more)
_ROT_DIMS = {"se3": 3, "axis_angle": 3, "euler": 3, "quaternion": 4, "rotation6d": 6}


@dataclass
class PoseParam:
    """Flat parameter vector for a pose: rotation entries first, translation last."""

    kind: str
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.kind not in PARAM_KINDS:
            raise ValueError(f"unknown parameterization {self.kind!r}")
        v = _check_finite(self.values, "parameters").reshape(-1)
        expect = _ROT_DIMS[self.kind] + 3
        if v.size != expect:
            raise ValueError(f"{self.kind} expects {expect} values, got {v.size}")
        self.values = v

    @property
    def rot_dim(self) -> int:
        return _ROT_DIMS[self.kind]


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Unit quaternion (w, x, y, z) -> rotation matrix; normalizes its input."""
    q = np.asarray(q, dtype=float)
    n = float(np.linalg.norm(q))
    if n < 1e-12:
        raise ValueError("zero-norm quaternion")
    w, x, y, z = q / n
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_quat(R: np.ndarray) -> np.ndarray:
    """Rotation matrix -> unit quaternion (w, x, y, z), w >= 0."""
    R = np.asarray(R, dtype=float)
    # Shepperd's method: pick the largest of the four squared components.
    tr = np.trace(R)
    cand = [tr, R[0, 0], R[1, 1], R[2, 2]]
    i = int(np.argmax(cand))
    if i == 0:
        s = math.sqrt(tr + 1.0) * 2
        q = np.array([0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s])
    elif i == 1:
        s = math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2
        q = np.array([(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s])
    elif i == 2:
        s = math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2
        q = np.array([(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s])
    else:
        s = math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2
        q = np.array([(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s])
    q /= np.linalg.norm(q)
    return -q if q[0] < 0 else q


def euler_zyx_to_matrix(angles: np.ndarray) -> np.ndarray:
    """Intrinsic Z-Y-X angles (yaw, pitch, roll) -> rotation matrix."""
    a, b, c = angles
    ca, sa = math.cos(a), math.sin(a)
    cb, sb = math.cos(b), math.sin(b)
    cc, sc = math.cos(c), math.sin(c)
    return np.array(
        [
            [ca * cb, ca * sb * sc - sa * cc, ca * sb * cc + sa * sc],
            [sa * cb, sa * sb * sc + ca * cc, sa * sb * cc - ca * sc],
            [-sb, cb * sc, cb * cc],
        ]
    )


def matrix_to_euler_zyx(R: np.ndarray) -> np.ndarray:
    """Rotation matrix -> intrinsic Z-Y-X angles; degenerate at |pitch| = pi/2."""
    R = np.asarray(R, dtype=float)
    b = -math.asin(min(1.0, max(-1.0, R[2, 0])))
    a = math.atan2(R[1, 0], R[0, 0])
    c = math.atan2(R[2, 1], R[2, 2])
    return np.array([a, b, c])


def rotation6d_to_matrix(r6: np.ndarray) -> np.ndarray:
    """Two 3-vectors -> rotation matrix via Gram-Schmidt; columns of R."""
    r6 = np.asarray(r6, dtype=float)
    a1, a2 = r6[:3], r6[3:]
    n1 = float(np.linalg.norm(a1))
    if n1 < 1e-12:
        raise ValueError("degenerate rotation6d: first vector has zero norm")
    b1 = a1 / n1
    a2p = a2 - np.dot(b1, a2) * b1
    n2 = float(np.linalg.norm(a2p))
    if n2 < 1e-12:
        raise ValueError("degenerate rotation6d: vectors are parallel")
    b2 = a2p / n2
    return np.column_stack([b1, b2, np.cross(b1, b2)])


def matrix_to_rotation6d(R: np.ndarray) -> np.ndarray:
    R = np.asarray(R, dtype=float)
    return np.concatenate([R[:, 0], R[:, 1]])


def param_to_pose(p: PoseParam) -> Pose:
    """Decode a parameter vector into a pose."""
    rot = p.values[: p.rot_dim]
    t = p.values[p.rot_dim :]
    if p.kind == "se3":
        return exp_se3(p.values)
    if p.kind == "axis_angle":
        return Pose(exp_so3(rot), t)
    if p.kind == "euler":
        return Pose(euler_zyx_to_matrix(rot), t)
    if p.kind == "quaternion":
        return Pose(quat_to_matrix(rot), t)
    return Pose(rotation6d_to_matrix(rot), t)


def pose_to_param(T: Pose, kind: str) -> PoseParam:
    """Encode a pose in the requested parameterization."""
    if kind == "se3":
        return PoseParam(kind, log_se3(T))
    if kind == "axis_angle":
        rot = log_so3(T.R)
    elif kind == "euler":
        rot = matrix_to_euler_zyx(T.R)
    elif kind == "quaternion":
        rot = matrix_to_quat(T.R)
    elif kind == "rotation6d":
        rot = matrix_to_rotation6d(T.R)
    else:
        raise ValueError(f"unknown parameterization {kind!r}")
    return PoseParam(kind, np.concatenate([rot, T.t]))


# ---------------------------------------------------------------------------
# Pose file format: 4x4 row-major matrix, or a single-line 6-vector tangent
# ---------------------------------------------------------------------------


def save_pose(path, T: Pose) -> None:
    np.savetxt(path, T.matrix(), fmt="%.17g")


def load_pose(path) -> Pose:
    vals = np.loadtxt(path, dtype=float)
    if vals.shape == (4, 4):
        return Pose.from_matrix(vals)
    if vals.reshape(-1).size == 6:
        return exp_se3(vals.reshape(6))
    raise ValueError(f"{path}: expected a 4x4 matrix or a 6-vector tangent")
