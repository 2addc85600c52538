"""Differentiable DRR renderer.

Rays are cast from the pose-transformed source through every pose-transformed
detector pixel target. Each ray's attenuation integral is evaluated exactly on
the voxel grid by enumerating the ray's crossings of the grid planes (a
three-way sorted merge across the axis families) and accumulating
voxel-value x segment-length, scaled by the ray length.

Pixel derivatives are taken with respect to a left-multiplicative body
perturbation of the pose: d/d eps of I(exp(eps) o T) at eps = 0, with the
six components ordered [wx, wy, wz, ux, uy, uz]. Forward-mode tangents are
threaded through ray setup (`Dual6`) and through the plane-crossing
parameters inside the integration kernel; the voxel lookup itself is
piecewise constant and contributes no derivative.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit, prange

from .geometry import Detector
from .lie import Pose, transform_points
from .volume import Volume

# segments shorter than this (in ray-parameter units) are collapsed; they
# arise when a ray passes through a grid edge or corner
_EPS_SEG = 1e-12


# ---------------------------------------------------------------------------
# forward-mode duals
# ---------------------------------------------------------------------------


@dataclass
class Dual6:
    """Value with a 6-vector of partials (trailing tangent axis).

    value has any shape S; tangent has shape S + (6,). Arithmetic follows the
    chain rule, so expressions built from Dual6 terms carry exact derivatives
    with respect to the six perturbation coordinates.
    """

    value: np.ndarray
    tangent: np.ndarray

    def __post_init__(self):
        self.value = np.asarray(self.value, dtype=float)
        self.tangent = np.asarray(self.tangent, dtype=float)
        if self.tangent.shape != self.value.shape + (6,):
            raise ValueError("tangent must have shape value.shape + (6,)")

    @classmethod
    def constant(cls, value) -> "Dual6":
        value = np.asarray(value, dtype=float)
        return cls(value, np.zeros(value.shape + (6,)))

    def __add__(self, other):
        if isinstance(other, Dual6):
            return Dual6(self.value + other.value, self.tangent + other.tangent)
        return Dual6(self.value + other, self.tangent)

    __radd__ = __add__

    def __neg__(self):
        return Dual6(-self.value, -self.tangent)

    def __sub__(self, other):
        if isinstance(other, Dual6):
            return Dual6(self.value - other.value, self.tangent - other.tangent)
        return Dual6(self.value - other, self.tangent)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if isinstance(other, Dual6):
            return Dual6(
                self.value * other.value,
                self.tangent * other.value[..., None] + other.tangent * self.value[..., None],
            )
        other = np.asarray(other, dtype=float)
        return Dual6(self.value * other, self.tangent * other[..., None])

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Dual6):
            inv = 1.0 / other.value
            val = self.value * inv
            tan = (self.tangent - other.tangent * val[..., None]) * inv[..., None]
            return Dual6(val, tan)
        other = np.asarray(other, dtype=float)
        return Dual6(self.value / other, self.tangent / other[..., None])

    def sqrt(self) -> "Dual6":
        root = np.sqrt(self.value)
        return Dual6(root, self.tangent * (0.5 / root)[..., None])

    def sum(self, axis) -> "Dual6":
        return Dual6(self.value.sum(axis=axis), self.tangent.sum(axis=axis))


def pose_points_dual(T: Pose, points: np.ndarray) -> Dual6:
    """Transform points by T, seeding tangents of the left perturbation.

    For y = exp(eps) T x, dy/deps_j at eps = 0 is e_j x y for the three
    rotational coordinates and e_j for the translational ones.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    y = transform_points(T, pts)
    tan = np.zeros(y.shape + (6,))
    eye = np.eye(3)
    for j in range(3):
        tan[:, :, j] = np.cross(eye[j], y)
        tan[:, :, 3 + j] = eye[j]
    return Dual6(y, tan)


# ---------------------------------------------------------------------------
# images and patch sets
# ---------------------------------------------------------------------------


@dataclass
class Image:
    """2D scalar grid in absorption units, with an optional rendered-pixel mask."""

    pixels: np.ndarray
    mask: np.ndarray | None = None

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 2:
            raise ValueError("image must be 2D")
        if self.mask is not None:
            self.mask = np.asarray(self.mask, dtype=bool)
            if self.mask.shape != self.pixels.shape:
                raise ValueError("mask shape must match pixels")

    @property
    def shape(self):
        return self.pixels.shape


@dataclass
class PatchSet:
    """Patch centers (row, col) with a common odd patch size."""

    centers: np.ndarray
    patch_size: int

    def __post_init__(self):
        self.centers = np.atleast_2d(np.asarray(self.centers, dtype=np.int64))
        if self.centers.ndim != 2 or self.centers.shape[1] != 2:
            raise ValueError("centers must be an n x 2 array of (row, col)")
        if self.patch_size < 1 or self.patch_size % 2 == 0:
            raise ValueError("patch size must be odd")

    def mask(self, height: int, width: int) -> np.ndarray:
        """Boolean union of all patches, clipped to the image bounds."""
        m = np.zeros((height, width), dtype=bool)
        h = self.patch_size // 2
        for r, c in self.centers:
            r0, r1 = max(0, r - h), min(height, r + h + 1)
            c0, c1 = max(0, c - h), min(width, c + h + 1)
            if r0 < r1 and c0 < c1:
                m[r0:r1, c0:c1] = True
        return m


# ---------------------------------------------------------------------------
# integration kernels
# ---------------------------------------------------------------------------


@njit(cache=True)
def _ray_integral(data, sp0, sp1, sp2, o0, o1, o2, s0, s1, s2, p0, p1, p2):
    nx, ny, nz = data.shape
    d0 = p0 - s0
    d1 = p1 - s1
    d2 = p2 - s2

    # clip to the volume's bounding box (slab method)
    alo = 0.0
    ahi = 1.0
    for k in range(3):
        if k == 0:
            dk, sk, ok, ext = d0, s0, o0, nx * sp0
        elif k == 1:
            dk, sk, ok, ext = d1, s1, o1, ny * sp1
        else:
            dk, sk, ok, ext = d2, s2, o2, nz * sp2
        if dk == 0.0:
            if sk <= ok or sk >= ok + ext:
                return 0.0
        else:
            a1 = (ok - sk) / dk
            a2 = (ok + ext - sk) / dk
            if a1 > a2:
                a1, a2 = a2, a1
            if a1 > alo:
                alo = a1
            if a2 < ahi:
                ahi = a2
    if alo >= ahi:
        return 0.0

    # first plane crossing beyond alo, per axis
    an0 = an1 = an2 = 1e300
    st0 = st1 = st2 = 0.0
    if d0 != 0.0:
        q = (s0 + alo * d0 - o0) / sp0
        j = math.floor(q) + 1 if d0 > 0 else math.ceil(q) - 1
        an0 = (o0 + j * sp0 - s0) / d0
        st0 = sp0 / abs(d0)
        while an0 <= alo:
            an0 += st0
    if d1 != 0.0:
        q = (s1 + alo * d1 - o1) / sp1
        j = math.floor(q) + 1 if d1 > 0 else math.ceil(q) - 1
        an1 = (o1 + j * sp1 - s1) / d1
        st1 = sp1 / abs(d1)
        while an1 <= alo:
            an1 += st1
    if d2 != 0.0:
        q = (s2 + alo * d2 - o2) / sp2
        j = math.floor(q) + 1 if d2 > 0 else math.ceil(q) - 1
        an2 = (o2 + j * sp2 - s2) / d2
        st2 = sp2 / abs(d2)
        while an2 <= alo:
            an2 += st2

    acc = 0.0
    a_cur = alo
    while True:
        a_nxt = ahi
        kk = -1
        if an0 < a_nxt:
            a_nxt = an0
            kk = 0
        if an1 < a_nxt:
            a_nxt = an1
            kk = 1
        if an2 < a_nxt:
            a_nxt = an2
            kk = 2
        if a_nxt - a_cur > _EPS_SEG:
            amid = 0.5 * (a_cur + a_nxt)
            q0 = (s0 + amid * d0 - o0) / sp0
            q1 = (s1 + amid * d1 - o1) / sp1
            q2 = (s2 + amid * d2 - o2) / sp2
            i0 = int(math.floor(q0))
            i1 = int(math.floor(q1))
            i2 = int(math.floor(q2))
            # midpoints landing exactly on a face resolve to the lower voxel
            if q0 == i0:
                i0 -= 1
            if q1 == i1:
                i1 -= 1
            if q2 == i2:
                i2 -= 1
            if 0 <= i0 < nx and 0 <= i1 < ny and 0 <= i2 < nz:
                acc += data[i0, i1, i2] * (a_nxt - a_cur)
        if kk == -1:
            break
        if an0 <= a_nxt:
            an0 += st0
        if an1 <= a_nxt:
            an1 += st1
        if an2 <= a_nxt:
            an2 += st2
        a_cur = a_nxt
        if a_cur >= ahi - _EPS_SEG:
            break

    return math.sqrt(d0 * d0 + d1 * d1 + d2 * d2) * acc


@njit(parallel=True, cache=True)
def _raycast_batch(data, spacing, origin, src, tgt, out):
    for i in prange(tgt.shape[0]):
        out[i] = _ray_integral(
            data,
            spacing[0], spacing[1], spacing[2],
            origin[0], origin[1], origin[2],
            src[0], src[1], src[2],
            tgt[i, 0], tgt[i, 1], tgt[i, 2],
        )


@njit(cache=True)
def _ray_jacobian(
    data, sp0, sp1, sp2, o0, o1, o2,
    s0, s1, s2, p0, p1, p2, s_tan, p_tan, grad,
):
    """Accumulate the 6 partials of one ray's integral into grad.

    s_tan and p_tan are (3, 6): tangents of the source and target points.
    The integral's derivative is regrouped per plane crossing: crossing m
    between segments with voxel values (Vl, Vr) contributes
    (Vl - Vr) * dalpha_m, with Vl = 0 before entry and Vr = 0 after exit.
    """
    nx, ny, nz = data.shape
    d0 = p0 - s0
    d1 = p1 - s1
    d2 = p2 - s2
    for j in range(6):
        grad[j] = 0.0

    alo = 0.0
    ahi = 1.0
    ax_lo = -1
    ax_hi = -1
    for k in range(3):
        if k == 0:
            dk, sk, ok, ext = d0, s0, o0, nx * sp0
        elif k == 1:
            dk, sk, ok, ext = d1, s1, o1, ny * sp1
        else:
            dk, sk, ok, ext = d2, s2, o2, nz * sp2
        if dk == 0.0:
            if sk <= ok or sk >= ok + ext:
                return 0.0
        else:
            a1 = (ok - sk) / dk
            a2 = (ok + ext - sk) / dk
            if a1 > a2:
                a1, a2 = a2, a1
            if a1 > alo:
                alo = a1
                ax_lo = k
            if a2 < ahi:
                ahi = a2
                ax_hi = k
    if alo >= ahi:
        return 0.0

    an0 = an1 = an2 = 1e300
    st0 = st1 = st2 = 0.0
    if d0 != 0.0:
        q = (s0 + alo * d0 - o0) / sp0
        j = math.floor(q) + 1 if d0 > 0 else math.ceil(q) - 1
        an0 = (o0 + j * sp0 - s0) / d0
        st0 = sp0 / abs(d0)
        while an0 <= alo:
            an0 += st0
    if d1 != 0.0:
        q = (s1 + alo * d1 - o1) / sp1
        j = math.floor(q) + 1 if d1 > 0 else math.ceil(q) - 1
        an1 = (o1 + j * sp1 - s1) / d1
        st1 = sp1 / abs(d1)
        while an1 <= alo:
            an1 += st1
    if d2 != 0.0:
        q = (s2 + alo * d2 - o2) / sp2
        j = math.floor(q) + 1 if d2 > 0 else math.ceil(q) - 1
        an2 = (o2 + j * sp2 - s2) / d2
        st2 = sp2 / abs(d2)
        while an2 <= alo:
            an2 += st2

    dacc = np.zeros(6)
    acc = 0.0
    last_v = 0.0
    pend_alpha = alo
    pend_axis = ax_lo
    a_cur = alo
    while True:
        a_nxt = ahi
        kk = -1
        if an0 < a_nxt:
            a_nxt = an0
            kk = 0
        if an1 < a_nxt:
            a_nxt = an1
            kk = 1
        if an2 < a_nxt:
            a_nxt = an2
            kk = 2
        if a_nxt - a_cur > _EPS_SEG:
            amid = 0.5 * (a_cur + a_nxt)
            q0 = (s0 + amid * d0 - o0) / sp0
            q1 = (s1 + amid * d1 - o1) / sp1
            q2 = (s2 + amid * d2 - o2) / sp2
            i0 = int(math.floor(q0))
            i1 = int(math.floor(q1))
            i2 = int(math.floor(q2))
            if q0 == i0:
                i0 -= 1
            if q1 == i1:
                i1 -= 1
            if q2 == i2:
                i2 -= 1
            v = 0.0
            if 0 <= i0 < nx and 0 <= i1 < ny and 0 <= i2 < nz:
                v = data[i0, i1, i2]
            acc += v * (a_nxt - a_cur)
            # emit the pending crossing with coefficient (left V - right V)
            if pend_axis >= 0 and last_v != v:
                if pend_axis == 0:
                    dk = d0
                elif pend_axis == 1:
                    dk = d1
                else:
                    dk = d2
                coeff = (last_v - v) / dk
                for j in range(6):
                    dacc[j] += coeff * (
                        -s_tan[pend_axis, j]
                        - pend_alpha * (p_tan[pend_axis, j] - s_tan[pend_axis, j])
                    )
            last_v = v
            pend_alpha = a_nxt
            pend_axis = kk if kk != -1 else ax_hi
        if kk == -1:
            break
        if an0 <= a_nxt:
            an0 += st0
        if an1 <= a_nxt:
            an1 += st1
        if an2 <= a_nxt:
            an2 += st2
        a_cur = a_nxt
        if a_cur >= ahi - _EPS_SEG:
            break

    # exit crossing: right-hand value is 0
    if pend_axis >= 0 and last_v != 0.0:
        if pend_axis == 0:
            dk = d0
        elif pend_axis == 1:
            dk = d1
        else:
            dk = d2
        coeff = last_v / dk
        for j in range(6):
            dacc[j] += coeff * (
                -s_tan[pend_axis, j]
                - pend_alpha * (p_tan[pend_axis, j] - s_tan[pend_axis, j])
            )

    length = math.sqrt(d0 * d0 + d1 * d1 + d2 * d2)
    for j in range(6):
        dlen = (
            d0 * (p_tan[0, j] - s_tan[0, j])
            + d1 * (p_tan[1, j] - s_tan[1, j])
            + d2 * (p_tan[2, j] - s_tan[2, j])
        ) / length
        grad[j] = dlen * acc + length * dacc[j]
    return length * acc


@njit(parallel=True, cache=True)
def _raycast_jac_batch(data, spacing, origin, src, src_tan, tgt, tgt_tan, out_grad):
    for i in prange(tgt.shape[0]):
        _ray_jacobian(
            data,
            spacing[0], spacing[1], spacing[2],
            origin[0], origin[1], origin[2],
            src[0], src[1], src[2],
            tgt[i, 0], tgt[i, 1], tgt[i, 2],
            src_tan, tgt_tan[i],
            out_grad[i],
        )


# ---------------------------------------------------------------------------
# public API
# ---------------------------------------------------------------------------


def siddon_raycast(v: Volume, s: np.ndarray, p: np.ndarray) -> float:
    """Attenuation line integral from s to p (mm), 0 if the ray misses."""
    s = np.asarray(s, dtype=float).reshape(3)
    p = np.asarray(p, dtype=float).reshape(3)
    if not (np.all(np.isfinite(s)) and np.all(np.isfinite(p))):
        raise ValueError("ray endpoints must be finite")
    if np.array_equal(s, p):
        raise ValueError("degenerate ray: source equals target")
    return float(
        _ray_integral(
            v.data,
            v.spacing[0], v.spacing[1], v.spacing[2],
            v.origin[0], v.origin[1], v.origin[2],
            s[0], s[1], s[2], p[0], p[1], p[2],
        )
    )


def _world_rays(v: Volume, T: Pose, det: Detector, patches: PatchSet | None):
    """Pose-transformed source/targets and the pixel index set to render."""
    if patches is None:
        mask = None
        idx = np.arange(det.n_pixels)
    else:
        mask = patches.mask(det.height, det.width)
        idx = np.flatnonzero(mask.ravel())
    src = transform_points(T, det.source[None, :])[0]
    tgt = transform_points(T, det.pixel_targets[idx])
    return src, tgt, idx, mask


def render(v: Volume, T: Pose, det: Detector, patches: PatchSet | None = None) -> Image:
    """Render a DRR at pose T; with patches, only patch pixels are computed."""
    src, tgt, idx, mask = _world_rays(v, T, det, patches)
    out = np.zeros(idx.shape[0])
    _raycast_batch(v.data, v.spacing, v.origin, src, tgt, out)
    pixels = np.zeros(det.n_pixels)
    pixels[idx] = out
    return Image(pixels.reshape(det.height, det.width), mask)


def render_with_jacobian(
    v: Volume, T: Pose, det: Detector, patches: PatchSet | None = None
) -> tuple[Image, np.ndarray]:
    """Render plus per-pixel gradients w.r.t. the left pose perturbation.

    Returns (image, grad) with grad of shape (H, W, 6); rows of unrendered
    pixels are zero. The image is computed by the same kernel as render(),
    so its pixels match bit for bit.
    """
    image = render(v, T, det, patches)
    if patches is None:
        idx = np.arange(det.n_pixels)
    else:
        idx = np.flatnonzero(image.mask.ravel())
    src_d = pose_points_dual(T, det.source[None, :])
    tgt_d = pose_points_dual(T, det.pixel_targets[idx])
    out_grad = np.zeros((idx.shape[0], 6))
    _raycast_jac_batch(
        v.data, v.spacing, v.origin,
        src_d.value[0], src_d.tangent[0],
        np.ascontiguousarray(tgt_d.value), np.ascontiguousarray(tgt_d.tangent),
        out_grad,
    )
    grad = np.zeros((det.n_pixels, 6))
    grad[idx] = out_grad
    return image, grad.reshape(det.height, det.width, 6)


def preprocess_xray(raw: np.ndarray, I0: float | None = None, crop: int = 0) -> Image:
    """Convert a raw intensity X-ray into absorption units.

    Crops `crop` pixels from every side, estimates the unattenuated intensity
    as the cropped maximum unless I0 is given, floors intensities at
    1e-12 * I0 so dead pixels stay finite, and returns log I0 - log I.
    """
    raw = np.asarray(raw, dtype=float)
    if raw.ndim != 2:
        raise ValueError("expected a 2D intensity image")
    if crop < 0 or 2 * crop >= min(raw.shape):
        raise ValueError("crop too large for the image")
    if crop:
        raw = raw[crop:-crop, crop:-crop]
    if I0 is None:
        I0 = float(raw.max())
    if I0 <= 0:
        raise ValueError("I0 must be positive")
    clamped = np.maximum(raw, 1e-12 * I0)
    return Image(np.log(I0) - np.log(clamped))


# ---------------------------------------------------------------------------
# image files: raw f32 grid + sidecar, mask as raw u8, PGM export
# ---------------------------------------------------------------------------


def save_image(raw_path, meta_path, img: Image) -> None:
    img.pixels.astype("<f4").tofile(raw_path)
    h, w = img.pixels.shape
    mask_line = ""
    if img.mask is not None:
        mask_path = str(raw_path) + ".mask"
        img.mask.astype(np.uint8).tofile(mask_path)
        mask_line = f"mask = {mask_path}\n"
    with open(meta_path, "w") as fh:
        fh.write(f"height = {h}\nwidth = {w}\ndtype = f32\nbyteorder = little\n{mask_line}")


def load_image(raw_path, meta_path) -> Image:
    fields = {}
    with open(meta_path) as fh:
        for line in fh:
            key, _, value = line.partition("=")
            if value:
                fields[key.strip()] = value.strip()
    h, w = int(fields["height"]), int(fields["width"])
    pix = np.fromfile(raw_path, dtype="<f4")
    if pix.size != h * w:
        raise ValueError(f"{raw_path}: holds {pix.size} values, expected {h * w}")
    mask = None
    if "mask" in fields:
        mask = np.fromfile(fields["mask"], dtype=np.uint8).reshape(h, w).astype(bool)
    return Image(pix.astype(np.float64).reshape(h, w), mask)


def write_pgm(path, img: Image) -> None:
    """16-bit PGM export, min-max scaled, for quick visual inspection."""
    pix = img.pixels
    lo, hi = float(pix.min()), float(pix.max())
    scale = 65535.0 / (hi - lo) if hi > lo else 0.0
    data = ((pix - lo) * scale).astype(">u2")
    with open(path, "wb") as fh:
        fh.write(f"P5\n{pix.shape[1]} {pix.shape[0]}\n65535\n".encode())
        fh.write(data.tobytes())
