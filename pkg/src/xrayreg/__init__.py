"""Differentiable 2D/3D rigid registration of X-ray images to CT volumes."""

from .errors import DegenerateInputError, IllConditionedError
from .lie import (
    Pose,
    PoseParam,
    compose,
    double_geodesic,
    exp_se3,
    exp_so3,
    geodesic_log_se3,
    geodesic_so3,
    inverse,
    log_se3,
    log_so3,
    param_to_pose,
    pose_to_param,
    transform_points,
)

__all__ = [
    "DegenerateInputError",
    "IllConditionedError",
    "Pose",
    "PoseParam",
    "compose",
    "double_geodesic",
    "exp_se3",
    "exp_so3",
    "geodesic_log_se3",
    "geodesic_so3",
    "inverse",
    "log_se3",
    "log_so3",
    "param_to_pose",
    "pose_to_param",
    "transform_points",
]
