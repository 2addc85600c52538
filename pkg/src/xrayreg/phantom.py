"""Synthetic attenuation phantoms standing in for clinical CT volumes.

Attenuation magnitudes are loosely soft-tissue/bone-like: 0.02/mm background,
0.04-0.09/mm features. Every generator also produces a default landmark set:
the eight volume corners plus the centroid.
"""

from __future__ import annotations

import numpy as np

from .evaluation import LandmarkSet
from .volume import Volume

BACKGROUND_MU = 0.02
FEATURE_MU = 0.04


def _corner_landmarks(v: Volume) -> LandmarkSet:
    ext = v.extent()
    pts = [v.origin + ext * np.array([i, j, k]) for i in (0, 1) for j in (0, 1) for k in (0, 1)]
    pts.append(v.origin + 0.5 * ext)
    labels = [f"corner_{i}" for i in range(8)] + ["centroid"]
    return LandmarkSet(np.array(pts).T, labels)


def _grid(dims, spacing):
    """Voxel-center coordinates (mm) along each axis."""
    return [spacing[a] * (np.arange(dims[a]) + 0.5) for a in range(3)]


def cube(dims=(64, 64, 64), spacing=(1.0, 1.0, 1.0)) -> tuple[Volume, LandmarkSet]:
    """Soft-tissue background with a centered denser block of half extent."""
    data = np.full(dims, BACKGROUND_MU)
    lo = [d // 4 for d in dims]
    hi = [d - d // 4 for d in dims]
    data[lo[0] : hi[0], lo[1] : hi[1], lo[2] : hi[2]] = FEATURE_MU
    v = Volume(data, spacing)
    return v, _corner_landmarks(v)


def spheres(dims=(64, 64, 64), spacing=(1.0, 1.0, 1.0), seed: int = 0) -> tuple[Volume, LandmarkSet]:
    """Several non-overlapping dense spheres at asymmetric positions.

    The layout intentionally breaks every rotational symmetry so that camera
    pose is identifiable from a single projection.
    """
    rng = np.random.default_rng(seed)
    ext = np.array(dims) * np.array(spacing)
    # base fractional positions keep the spheres apart; jitter stays small
    base = np.array(
        [
            [0.32, 0.35, 0.30],
            [0.68, 0.62, 0.42],
            [0.42, 0.70, 0.68],
            [0.62, 0.30, 0.66],
            [0.50, 0.50, 0.50],
        ]
    )
    radii_frac = np.array([0.11, 0.09, 0.075, 0.06, 0.045])
    mus = np.array([0.05, 0.09, 0.07, 0.11, 0.13])
    centers = (base + rng.uniform(-0.015, 0.015, size=base.shape)) * ext

    data = np.full(dims, BACKGROUND_MU)
    xs, ys, zs = _grid(dims, spacing)
    X, Y, Z = np.meshgrid(xs, ys, zs, indexing="ij")
    for c, rf, mu in zip(centers, radii_frac, mus):
        r = rf * ext.min()
        inside = (X - c[0]) ** 2 + (Y - c[1]) ** 2 + (Z - c[2]) ** 2 <= r * r
        data[inside] = mu
    v = Volume(data, spacing)
    return v, _corner_landmarks(v)


def hip(dims=(64, 64, 64), spacing=(1.0, 1.0, 1.0)) -> tuple[Volume, LandmarkSet]:
    """Stylized pelvis: a thick-walled ring plus two femoral-head spheres."""
    data = np.full(dims, BACKGROUND_MU)
    ext = np.array(dims) * np.array(spacing)
    xs, ys, zs = _grid(dims, spacing)
    X, Y, Z = np.meshgrid(xs, ys, zs, indexing="ij")
    cx, cy, cz = 0.5 * ext
    # ring in the x-y plane around the volume center
    rho = np.sqrt((X - cx) ** 2 + (Y - cy) ** 2)
    r_out, r_in = 0.34 * ext.min(), 0.24 * ext.min()
    ring = (rho <= r_out) & (rho >= r_in) & (np.abs(Z - cz) <= 0.12 * ext[2])
    data[ring] = 0.06
    for sx, mu in ((0.22, 0.09), (0.78, 0.08)):
        c = np.array([sx * ext[0], 0.5 * ext[1], 0.32 * ext[2]])
        r = 0.10 * ext.min()
        ball = (X - c[0]) ** 2 + (Y - c[1]) ** 2 + (Z - c[2]) ** 2 <= r * r
        data[ball] = mu
    v = Volume(data, spacing)
    return v, _corner_landmarks(v)


def random_blocks(
    dims=(16, 16, 16), spacing=(1.0, 1.0, 1.0), n_blocks: int = 4, seed: int = 0
) -> Volume:
    """Random axis-aligned blocks of random attenuation on a soft background.

    Handy as a randomized-but-piecewise-constant target for quadrature
    cross-checks of the line integral.
    """
    rng = np.random.default_rng(seed)
    data = np.full(dims, 0.01 + 0.02 * rng.random())
    for _ in range(n_blocks):
        lo = [rng.integers(0, d - 1) for d in dims]
        hi = [rng.integers(l + 1, d) + 1 for l, d in zip(lo, dims)]
        data[lo[0] : hi[0], lo[1] : hi[1], lo[2] : hi[2]] = 0.01 + 0.05 * rng.random()
    return Volume(data, spacing)


def random_smooth(
    dims=(16, 16, 16),
    spacing=(1.0, 1.0, 1.0),
    lo: float = 0.02,
    hi: float = 0.028,
    seed: int = 0,
) -> Volume:
    """Random volume with small voxel-to-voxel jumps.

    A coarse random grid is trilinearly upsampled, so adjacent voxels differ
    by at most (hi - lo) / min(dims). Midpoint quadrature along rays through
    such a field converges fast enough to serve as a tight oracle for the
    exact plane-crossing integral.
    """
    from scipy.ndimage import zoom

    rng = np.random.default_rng(seed)
    coarse = rng.uniform(lo, hi, size=(2, 2, 2))
    factors = [d / 2 for d in dims]
    data = zoom(coarse, factors, order=1, mode="nearest", grid_mode=True)
    return Volume(np.clip(data, lo, hi), spacing)


GENERATORS = {"cube": cube, "spheres": spheres, "hip": hip}
