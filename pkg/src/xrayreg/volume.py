"""CT volume container: raw-file IO, isocenter pose, bone-contrast augmentation.

Volumes hold linear attenuation coefficients (1/mm). The raw file layout is
x-fastest: element (ix, iy, iz) lives at offset ix + bx*(iy + by*iz).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .lie import Pose

_DTYPES = {"f32": np.dtype(np.float32), "f64": np.dtype(np.float64)}

BONE_HU_THRESHOLD = 350.0
BONE_FALLBACK_PERCENTILE = 85.0


@dataclass
class Volume:
    """Voxel grid of attenuation values with per-axis spacing in mm."""

    data: np.ndarray
    spacing: np.ndarray
    origin: np.ndarray = field(default_factory=lambda: np.zeros(3))
    hu: np.ndarray | None = None

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float64)
        self.spacing = np.asarray(self.spacing, dtype=float).reshape(3)
        self.origin = np.asarray(self.origin, dtype=float).reshape(3)
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise ValueError("volume data must be a non-empty 3D grid")
        if np.any(self.spacing <= 0):
            raise ValueError("voxel spacings must be positive")
        if not np.all(np.isfinite(self.data)) or np.any(self.data < 0):
            raise ValueError("attenuation values must be finite and nonnegative")
        if self.hu is not None and self.hu.shape != self.data.shape:
            raise ValueError("HU grid dims must match the volume")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape

    def extent(self) -> np.ndarray:
        """Physical size (mm) along each axis."""
        return np.array(self.data.shape) * self.spacing


def isocenter_pose(v: Volume) -> Pose:
    """Identity-rotation pose centered on the volume."""
    center = v.origin + 0.5 * v.extent()
    return Pose(np.eye(3), center)


def bone_augment(
    v: Volume,
    c: float,
    hu: np.ndarray | None = None,
    threshold: float = BONE_HU_THRESHOLD,
) -> Volume:
    """Scale bone-like voxels by c >= 1, leaving the rest unchanged.

    Bone is HU > threshold when an HU grid is available (the volume's own, or
    one passed in); otherwise voxels above the 85th intensity percentile.
    """
    if c < 1.0:
        raise ValueError("bone attenuation multiplier must be >= 1")
    if hu is None:
        hu = v.hu
    if hu is not None:
        if hu.shape != v.data.shape:
            raise ValueError("HU grid dims must match the volume")
        mask = hu > threshold
    else:
        mask = v.data > np.percentile(v.data, BONE_FALLBACK_PERCENTILE)
    data = v.data.copy()
    data[mask] *= c
    return Volume(data, v.spacing.copy(), v.origin.copy(), hu=None if v.hu is None else v.hu.copy())


def sample_bone_multiplier(rng: np.random.Generator) -> float:
    """Draw a bone attenuation multiplier uniformly from [1, 10]."""
    return float(rng.uniform(1.0, 10.0))


# ---------------------------------------------------------------------------
# raw + sidecar IO
# ---------------------------------------------------------------------------


def _parse_meta(path) -> dict[str, str]:
    fields = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            fields[key.strip()] = value.strip()
    return fields


def load_volume(raw_path, meta_path) -> Volume:
    """Load a volume from a raw scalar file plus its metadata sidecar."""
    meta = _parse_meta(meta_path)
    for key in ("dims", "spacing", "dtype"):
        if key not in meta:
            raise ValueError(f"{meta_path}: missing '{key}'")
    dims = tuple(int(x) for x in meta["dims"].split())
    spacing = np.array([float(x) for x in meta["spacing"].split()])
    if len(dims) != 3 or len(spacing) != 3:
        raise ValueError(f"{meta_path}: dims and spacing must have 3 entries")
    if np.any(spacing <= 0):
        raise ValueError(f"{meta_path}: nonpositive spacing")
    if meta["dtype"] not in _DTYPES:
        raise ValueError(f"{meta_path}: unknown scalar type {meta['dtype']!r}")
    dtype = _DTYPES[meta["dtype"]]
    byteorder = meta.get("byteorder", "little")
    if byteorder not in ("little", "big"):
        raise ValueError(f"{meta_path}: unknown byte order {byteorder!r}")
    dtype = dtype.newbyteorder("<" if byteorder == "little" else ">")
    origin = np.array([float(x) for x in meta.get("origin", "0 0 0").split()])

    raw = np.fromfile(raw_path, dtype=dtype)
    n_expected = dims[0] * dims[1] * dims[2]
    if raw.size != n_expected:
        raise ValueError(
            f"{raw_path}: holds {raw.size} elements but metadata declares {n_expected}"
        )
    # file is x-fastest; arrange as data[ix, iy, iz]
    data = raw.astype(np.float64).reshape(dims[::-1]).transpose(2, 1, 0)

    hu = None
    if "rescale_slope" in meta or "rescale_intercept" in meta:
        slope = float(meta.get("rescale_slope", 1.0))
        intercept = float(meta.get("rescale_intercept", 0.0))
        hu = data.copy()
        data = slope * data + intercept
        if np.any(data < 0):
            warnings.warn("negative attenuation after rescale clamped to 0")
            data = np.maximum(data, 0.0)
    return Volume(np.ascontiguousarray(data), spacing, origin, hu=hu)


def save_volume(raw_path, meta_path, v: Volume, dtype: str = "f32") -> None:
    """Write the raw file (x-fastest) and its metadata sidecar."""
    if dtype not in _DTYPES:
        raise ValueError(f"unknown scalar type {dtype!r}")
    out = v.data.transpose(2, 1, 0).astype(_DTYPES[dtype].newbyteorder("<"))
    out.tofile(raw_path)
    bx, by, bz = v.dims
    sx, sy, sz = (float(x) for x in v.spacing)
    ox, oy, oz = (float(x) for x in v.origin)
    with open(meta_path, "w") as fh:
        fh.write(f"dims = {bx} {by} {bz}\n")
        fh.write(f"spacing = {sx!r} {sy!r} {sz!r}\n")
        fh.write(f"dtype = {dtype}\n")
        fh.write("byteorder = little\n")
        fh.write(f"origin = {ox!r} {oy!r} {oz!r}\n")
