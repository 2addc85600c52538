"""Image similarity metrics: global/local/multiscale/sparse NCC, MSE, MAE.

All NCC statistics are population statistics (divide by the pixel count).
Metric functions return raw values; the evaluate()/evaluate_grad()
dispatchers convert everything to a similarity score (higher is better), so
MSE and MAE come back negated there.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateInputError
from .render import Image, PatchSet

# windows with standard deviation at or below this carry no usable signal
EPS_STD = 1e-8

METRIC_KINDS = ("global_ncc", "local_ncc", "mncc", "sparse_mncc", "mse", "mae")


@dataclass
class MetricConfig:
    kind: str = "sparse_mncc"
    patch_size: int = 13
    scales: tuple = (13, None)  # None means the full image
    n_patches: int = 100

    def __post_init__(self):
        if self.kind not in METRIC_KINDS:
            raise ValueError(f"unknown metric kind {self.kind!r}")
        if self.patch_size < 3 or self.patch_size % 2 == 0:
            raise ValueError("patch size must be odd and >= 3")
        if self.n_patches < 1:
            raise ValueError("n_patches must be >= 1")


def _check_same_shape(A, B):
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    if A.shape != B.shape:
        raise ValueError(f"image shapes differ: {A.shape} vs {B.shape}")
    return A, B


def _zstats(X):
    mu = X.mean()
    sigma = X.std()
    return mu, sigma


def ncc(A, B) -> float:
    """Global normalized cross correlation in [-1, 1]."""
    A, B = _check_same_shape(A, B)
    mu_a, sd_a = _zstats(A)
    mu_b, sd_b = _zstats(B)
    if sd_a <= EPS_STD or sd_b <= EPS_STD:
        raise DegenerateInputError("near-zero variance image in NCC")
    val = float(np.mean((A - mu_a) * (B - mu_b)) / (sd_a * sd_b))
    return min(1.0, max(-1.0, val))


def ncc_grad(A, B):
    """(ncc, d ncc / dB)."""
    A, B = _check_same_shape(A, B)
    mu_a, sd_a = _zstats(A)
    mu_b, sd_b = _zstats(B)
    if sd_a <= EPS_STD or sd_b <= EPS_STD:
        raise DegenerateInputError("near-zero variance image in NCC")
    za = (A - mu_a) / sd_a
    zb = (B - mu_b) / sd_b
    val = float(np.mean(za * zb))
    grad = (za - val * zb) / (B.size * sd_b)
    return min(1.0, max(-1.0, val)), grad


def _box_sums(X, k):
    """Sums over every k x k window; output (H-k+1, W-k+1)."""
    c = np.cumsum(np.cumsum(X, axis=0), axis=1)
    c = np.pad(c, ((1, 0), (1, 0)))
    return c[k:, k:] - c[:-k, k:] - c[k:, :-k] + c[:-k, :-k]


def _window_stats(A, B, k):
    n = k * k
    mu_a = _box_sums(A, k) / n
    mu_b = _box_sums(B, k) / n
    var_a = np.maximum(_box_sums(A * A, k) / n - mu_a**2, 0.0)
    var_b = np.maximum(_box_sums(B * B, k) / n - mu_b**2, 0.0)
    sd_a = np.sqrt(var_a)
    sd_b = np.sqrt(var_b)
    cov = _box_sums(A * B, k) / n - mu_a * mu_b
    valid = (sd_a > EPS_STD) & (sd_b > EPS_STD)
    return mu_a, mu_b, sd_a, sd_b, cov, valid


def local_ncc(A, B, patch_size: int = 13) -> float:
    """Mean NCC over all overlapping patches at stride 1.

    Patches where either image has (near) zero variance are skipped; if every
    patch is skipped the input is degenerate.
    """
    A, B = _check_same_shape(A, B)
    if min(A.shape) < patch_size:
        raise ValueError("image smaller than the patch size")
    _, _, sd_a, sd_b, cov, valid = _window_stats(A, B, patch_size)
    if not valid.any():
        raise DegenerateInputError("all patches have near-zero variance")
    vals = cov[valid] / (sd_a[valid] * sd_b[valid])
    return float(np.clip(vals, -1.0, 1.0).mean())


def local_ncc_grad(A, B, patch_size: int = 13):
    """(local_ncc, d local_ncc / dB), via per-window closed forms.

    d NCC_w / dB_i = (ZA_i - NCC_w ZB_i) / (n sd_B) for i in window w; the
    per-window coefficient maps are scattered back onto pixels with a box
    filter.
    """
    A, B = _check_same_shape(A, B)
    if min(A.shape) < patch_size:
        raise ValueError("image smaller than the patch size")
    k = patch_size
    n = k * k
    mu_a, mu_b, sd_a, sd_b, cov, valid = _window_stats(A, B, k)
    if not valid.any():
        raise DegenerateInputError("all patches have near-zero variance")
    nw = int(valid.sum())
    nccs = np.zeros_like(cov)
    nccs[valid] = cov[valid] / (sd_a[valid] * sd_b[valid])
    val = float(np.clip(nccs[valid], -1.0, 1.0).mean())

    P = np.zeros_like(cov)
    Q = np.zeros_like(cov)
    Rm = np.zeros_like(cov)
    S = np.zeros_like(cov)
    P[valid] = 1.0 / (n * sd_a[valid] * sd_b[valid])
    Q[valid] = mu_a[valid] * P[valid]
    Rm[valid] = nccs[valid] / (n * sd_b[valid] ** 2)
    S[valid] = mu_b[valid] * Rm[valid]

    def scatter(X):
        return _box_sums(np.pad(X, k - 1), k)

    grad = (A * scatter(P) - scatter(Q) - B * scatter(Rm) + scatter(S)) / nw
    return val, grad


def mncc(A, B, scales=(13, None)) -> float:
    """Multiscale NCC: mean of local NCC over each scale; None = global."""
    vals = [ncc(A, B) if s is None else local_ncc(A, B, s) for s in scales]
    return float(np.mean(vals))


def mncc_grad(A, B, scales=(13, None)):
    vals = []
    grads = []
    for s in scales:
        v, g = ncc_grad(A, B) if s is None else local_ncc_grad(A, B, s)
        vals.append(v)
        grads.append(g)
    return float(np.mean(vals)), np.mean(grads, axis=0)


def mse(A, B) -> float:
    A, B = _check_same_shape(A, B)
    return float(np.mean((A - B) ** 2))


def mae(A, B) -> float:
    A, B = _check_same_shape(A, B)
    return float(np.mean(np.abs(A - B)))


def sample_patch_centers(
    height: int,
    width: int,
    n: int,
    patch_size: int,
    rng: np.random.Generator,
    weights: np.ndarray | None = None,
) -> PatchSet:
    """Draw n patch centers (with replacement) with every patch fully inside
    the image; uniform by default, else proportional to the weight map."""
    if n < 1:
        raise ValueError("need at least one patch")
    h = patch_size // 2
    r0, r1 = h, height - h  # half-open valid center range
    c0, c1 = h, width - h
    if r1 <= r0 or c1 <= c0:
        raise ValueError("patch size exceeds the image")
    if weights is None:
        rows = rng.integers(r0, r1, size=n)
        cols = rng.integers(c0, c1, size=n)
    else:
        weights = np.asarray(weights, dtype=float)
        if weights.shape != (height, width):
            raise ValueError("weight map shape must match the image")
        if np.any(weights < 0):
            raise ValueError("weights must be nonnegative")
        w = weights[r0:r1, c0:c1].ravel()
        total = w.sum()
        if total <= 0:
            raise ValueError("weight map is all zero over valid centers")
        flat = rng.choice(w.size, size=n, p=w / total)
        rows, cols = np.unravel_index(flat, (r1 - r0, c1 - c0))
        rows = rows + r0
        cols = cols + c0
    return PatchSet(np.stack([rows, cols], axis=1), patch_size)


def _patch_values_grad(A, B, patches: PatchSet, want_grad: bool):
    k = patches.patch_size
    h = k // 2
    n = k * k
    vals = []
    grad = np.zeros_like(B) if want_grad else None
    for r, c in patches.centers:
        sl = (slice(r - h, r + h + 1), slice(c - h, c + h + 1))
        pa, pb = A[sl], B[sl]
        mu_a, sd_a = _zstats(pa)
        mu_b, sd_b = _zstats(pb)
        if sd_a <= EPS_STD or sd_b <= EPS_STD:
            continue
        za = (pa - mu_a) / sd_a
        zb = (pb - mu_b) / sd_b
        v = float(np.mean(za * zb))
        vals.append(min(1.0, max(-1.0, v)))
        if want_grad:
            grad[sl] += (za - v * zb) / (n * sd_b)
    if want_grad and vals:
        grad /= len(vals)
    return vals, grad


def sparse_mncc(fixed, moving: Image, patches: PatchSet) -> float:
    """Multiscale NCC estimated from rendered patches only.

    Mean of (a) the average patch NCC and (b) the global NCC computed over
    the union of rendered pixels, z-normalized over that set alone.
    """
    val, _ = _sparse_mncc_impl(fixed, moving, patches, want_grad=False)
    return val


def sparse_mncc_grad(fixed, moving: Image, patches: PatchSet):
    return _sparse_mncc_impl(fixed, moving, patches, want_grad=True)


def _sparse_mncc_impl(fixed, moving: Image, patches: PatchSet, want_grad: bool):
    A = np.asarray(fixed, dtype=float)
    B = moving.pixels
    if A.shape != B.shape:
        raise ValueError(f"image shapes differ: {A.shape} vs {B.shape}")
    if moving.mask is None:
        raise ValueError("sparse mNCC requires a rendered-pixel mask")
    mask = moving.mask
    patch_mask = patches.mask(*B.shape)
    if not mask[patch_mask].all():
        raise ValueError("moving image mask does not cover every patch")

    vals, patch_grad = _patch_values_grad(A, B, patches, want_grad)
    if not vals:
        raise DegenerateInputError("all sampled patches have near-zero variance")
    patch_term = float(np.mean(vals))

    a = A[mask]
    b = B[mask]
    mu_a, sd_a = _zstats(a)
    mu_b, sd_b = _zstats(b)
    if sd_a <= EPS_STD or sd_b <= EPS_STD:
        raise DegenerateInputError("near-zero variance over rendered pixels")
    za = (a - mu_a) / sd_a
    zb = (b - mu_b) / sd_b
    global_term = min(1.0, max(-1.0, float(np.mean(za * zb))))

    val = 0.5 * (patch_term + global_term)
    if not want_grad:
        return val, None
    grad = 0.5 * patch_grad
    gg = (za - global_term * zb) / (a.size * sd_b)
    grad[mask] += 0.5 * gg
    return val, grad


# ---------------------------------------------------------------------------
# similarity dispatchers (higher = better)
# ---------------------------------------------------------------------------


def evaluate(cfg: MetricConfig, fixed, moving: Image, patches: PatchSet | None = None) -> float:
    """Similarity score for the configured metric; MSE/MAE are negated."""
    A = np.asarray(fixed, dtype=float)
    B = moving.pixels
    if cfg.kind == "global_ncc":
        return ncc(A, B)
    if cfg.kind == "local_ncc":
        return local_ncc(A, B, cfg.patch_size)
    if cfg.kind == "mncc":
        return mncc(A, B, cfg.scales)
    if cfg.kind == "sparse_mncc":
        if patches is None:
            raise ValueError("sparse_mncc needs a PatchSet")
        return sparse_mncc(A, moving, patches)
    if cfg.kind == "mse":
        return -mse(A, B)
    return -mae(A, B)


def evaluate_grad(cfg: MetricConfig, fixed, moving: Image, patches: PatchSet | None = None):
    """(similarity, d similarity / d moving pixels)."""
    A = np.asarray(fixed, dtype=float)
    B = moving.pixels
    if cfg.kind == "global_ncc":
        return ncc_grad(A, B)
    if cfg.kind == "local_ncc":
        return local_ncc_grad(A, B, cfg.patch_size)
    if cfg.kind == "mncc":
        return mncc_grad(A, B, cfg.scales)
    if cfg.kind == "sparse_mncc":
        if patches is None:
            raise ValueError("sparse_mncc needs a PatchSet")
        return sparse_mncc_grad(A, moving, patches)
    if cfg.kind == "mse":
        _, B2 = _check_same_shape(A, B)
        diff = B2 - A
        return -float(np.mean(diff**2)), -2.0 * diff / diff.size
    _, B2 = _check_same_shape(A, B)
    diff = B2 - A
    return -float(np.mean(np.abs(diff))), -np.sign(diff) / diff.size
