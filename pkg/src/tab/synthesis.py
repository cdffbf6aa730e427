"""Synthetic defect generation: paired (normal, anomaly, mask) training samples.

Four methods: ``nsa`` (crop, rescale, seamless-clone via a Poisson solve),
``cutpaste`` (hard paste), ``mask`` (flat-color rectangle), ``perlin``
(noise-perturbed blob from thresholded gradient noise). All are pure
functions of (inputs, rng); images are uint8 RGB, internally float32 in
[0, 1], rounded half-to-even on the way back.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import ndimage

from tab.errors import ConfigError, DataError, DimensionError

_CROSS = ndimage.generate_binary_structure(2, 1)
_BOX = ndimage.generate_binary_structure(2, 2)


@dataclass(frozen=True)
class SynthConfig:
    method: str = "nsa"
    patch_scale: tuple[float, float] = (0.06, 0.35)
    repeats: tuple[int, int] = (1, 4)
    resize_scale: tuple[float, float] = (0.5, 2.0)
    perlin_cell_size: int = 8
    perlin_octaves: int = 2
    perlin_threshold: Optional[float] = None
    diff_threshold: float = 8.0 / 255.0
    min_area_frac: float = 0.005
    max_area_frac: float = 0.80
    blend_tol: float = 1e-4
    blend_max_iters: int = 5000
    retries: int = 10

    def __post_init__(self):
        if self.method not in ("nsa", "cutpaste", "perlin", "mask"):
            raise ConfigError(f"unknown synthesis method {self.method!r}")
        for name in ("patch_scale", "resize_scale"):
            lo, hi = getattr(self, name)
            if not (0 < lo <= hi):
                raise ConfigError(f"{name} range ({lo}, {hi}) is empty or nonpositive")
        lo, hi = self.repeats
        if not (1 <= lo <= hi):
            raise ConfigError(f"repeats range ({lo}, {hi}) is empty")
        if not (0 <= self.min_area_frac < self.max_area_frac <= 1):
            raise ConfigError("area fraction bounds must satisfy 0 <= min < max <= 1")
        if self.perlin_cell_size < 1 or self.perlin_octaves < 1:
            raise ConfigError("perlin cell size and octaves must be positive")


@dataclass
class SynthSample:
    image_n: np.ndarray  # H x W x 3 uint8
    image_a: np.ndarray  # H x W x 3 uint8
    mask: np.ndarray  # H x W uint8, 1 = synthetic defect
    noop: bool
    method: str
    meta: dict = field(default_factory=dict)


def _to_f32(img: np.ndarray) -> np.ndarray:
    return img.astype(np.float32) / np.float32(255.0)


def _to_u8(img: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def _check_rgb(img: np.ndarray, name: str) -> None:
    if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
        raise DimensionError(f"{name} must be H x W x 3 uint8, got {img.shape} {img.dtype}")


# ---------------------------------------------------------------------------
# perlin noise
# ---------------------------------------------------------------------------


def _perlin_octave(width: int, height: int, cell: int, rng: np.random.Generator) -> np.ndarray:
    ny = height // cell + 2
    nx = width // cell + 2
    g = rng.standard_normal((ny, nx, 2))
    g /= np.maximum(np.linalg.norm(g, axis=2, keepdims=True), 1e-12)
    ys = np.arange(height, dtype=np.float64)[:, None] / cell
    xs = np.arange(width, dtype=np.float64)[None, :] / cell
    j0 = ys.astype(np.int64)
    i0 = xs.astype(np.int64)
    ty = np.broadcast_to(ys - j0, (height, width))
    tx = np.broadcast_to(xs - i0, (height, width))
    j0 = np.broadcast_to(j0, (height, width))
    i0 = np.broadcast_to(i0, (height, width))

    def dot(dj, di, oy, ox):
        grad = g[j0 + dj, i0 + di]
        return grad[..., 0] * (ty - oy) + grad[..., 1] * (tx - ox)

    n00 = dot(0, 0, 0.0, 0.0)
    n01 = dot(0, 1, 0.0, 1.0)
    n10 = dot(1, 0, 1.0, 0.0)
    n11 = dot(1, 1, 1.0, 1.0)
    uy = ty * ty * ty * (ty * (ty * 6.0 - 15.0) + 10.0)
    ux = tx * tx * tx * (tx * (tx * 6.0 - 15.0) + 10.0)
    top = n00 + ux * (n01 - n00)
    bot = n10 + ux * (n11 - n10)
    return top + uy * (bot - top)


def perlin_field(
    width: int, height: int, cell_size: int, octaves: int, rng: np.random.Generator
) -> np.ndarray:
    """Gradient-lattice noise, octave amplitudes halving, normalized to [-1, 1]."""
    total = np.zeros((height, width), dtype=np.float64)
    amp_sum = 0.0
    cell = cell_size
    amp = 1.0
    for _ in range(octaves):
        total += amp * _perlin_octave(width, height, max(cell, 1), rng)
        amp_sum += amp
        amp *= 0.5
        cell = max(cell // 2, 1)
    return total / amp_sum


# ---------------------------------------------------------------------------
# poisson solver
# ---------------------------------------------------------------------------


def _laplacian(u: np.ndarray) -> np.ndarray:
    # 4u - sum of 4-neighbors; valid only away from the array border
    out = 4.0 * u.astype(np.float64)
    out[1:] -= u[:-1]
    out[:-1] -= u[1:]
    out[:, 1:] -= u[:, :-1]
    out[:, :-1] -= u[:, 1:]
    return out


def poisson_blend(
    target: np.ndarray,
    source: np.ndarray,
    mask: np.ndarray,
    max_iters: int = 5000,
    tol: float = 1e-4,
) -> tuple[np.ndarray, bool]:
    """Seamless cloning: match the source Laplacian inside the mask, keep the
    target on the boundary. Returns (result, converged). Non-convergence
    within max_iters returns the best iterate with converged=False.
    """
    if target.shape != source.shape:
        raise DimensionError(f"target {target.shape} and source {source.shape} differ")
    if mask.shape != target.shape[:2]:
        raise DimensionError(f"mask {mask.shape} does not match image {target.shape[:2]}")
    interior = mask.astype(bool).copy()
    interior[0, :] = interior[-1, :] = interior[:, 0] = interior[:, -1] = False
    if not interior.any():
        raise DataError("mask interior is empty")

    tgt = target.astype(np.float64)
    src = source.astype(np.float64)
    if tgt.ndim == 2:
        tgt, src = tgt[..., None], src[..., None]
        squeeze = True
    else:
        squeeze = False

    b = np.stack([_laplacian(src[..., c]) for c in range(src.shape[2])], axis=-1)
    x = tgt.copy()
    ii, jj = np.nonzero(interior)
    red = interior & (((np.arange(x.shape[0])[:, None] + np.arange(x.shape[1])[None, :]) % 2) == 0)
    black = interior & ~red

    def neighbor_sum():
        s = np.zeros_like(x)
        s[1:] += x[:-1]
        s[:-1] += x[1:]
        s[:, 1:] += x[:, :-1]
        s[:, :-1] += x[:, 1:]
        return s

    converged = False
    for _ in range(max_iters):
        resid = 4.0 * x[ii, jj] - neighbor_sum()[ii, jj] - b[ii, jj]
        if np.max(np.abs(resid)) < tol:
            converged = True
            break
        x[red] = (neighbor_sum()[red] + b[red]) / 4.0
        x[black] = (neighbor_sum()[black] + b[black]) / 4.0
    else:
        resid = 4.0 * x[ii, jj] - neighbor_sum()[ii, jj] - b[ii, jj]
        converged = bool(np.max(np.abs(resid)) < tol)

    out = x[..., 0] if squeeze else x
    return out, converged


# ---------------------------------------------------------------------------
# NSA
# ---------------------------------------------------------------------------


def _sample_patch_hw(h: int, w: int, cfg: SynthConfig, rng: np.random.Generator) -> tuple[int, int]:
    area = rng.uniform(*cfg.patch_scale) * h * w
    aspect = np.exp(rng.uniform(np.log(0.5), np.log(2.0)))
    ph = int(round(np.sqrt(area * aspect)))
    pw = int(round(np.sqrt(area / aspect)))
    return max(ph, 2), max(pw, 2)


def _resize_patch(patch: np.ndarray, factor: float) -> np.ndarray:
    out = ndimage.zoom(patch, (factor, factor, 1.0), order=1, mode="nearest")
    return np.clip(out, 0.0, 1.0)


def nsa_paste(
    x_a: np.ndarray,
    x_src: np.ndarray,
    src_yx: tuple[int, int],
    dst_yx: tuple[int, int],
    patch_hw: tuple[int, int],
    resize: float,
    cfg: SynthConfig,
) -> tuple[np.ndarray, tuple[int, int, int, int], bool]:
    """One seamless paste; float32 [0,1] images in and out.

    Returns (image, (dy, dx, ph, pw), converged). The pasted rectangle must
    leave a 1-pixel margin so the solve has a Dirichlet boundary.
    """
    h, w = x_a.shape[:2]
    sy, sx = src_yx
    ph, pw = patch_hw
    patch = x_src[sy : sy + ph, sx : sx + pw]
    if resize != 1.0:
        patch = _resize_patch(patch, resize)
    ph, pw = patch.shape[:2]
    dy, dx = dst_yx
    if dy < 1 or dx < 1 or dy + ph > h - 1 or dx + pw > w - 1:
        raise DataError("paste rectangle leaves no boundary margin")
    win = x_a[dy - 1 : dy + ph + 1, dx - 1 : dx + pw + 1]
    src_win = win.copy()
    src_win[1:-1, 1:-1] = patch
    m = np.zeros(win.shape[:2], dtype=bool)
    m[1:-1, 1:-1] = True
    blended, converged = poisson_blend(win, src_win, m, cfg.blend_max_iters, cfg.blend_tol)
    out = x_a.copy()
    out[dy - 1 : dy + ph + 1, dx - 1 : dx + pw + 1] = np.clip(blended, 0.0, 1.0)
    return out, (dy, dx, ph, pw), converged


def _finish_sample(
    image_n: np.ndarray,
    x_n: np.ndarray,
    x_a: np.ndarray,
    cfg: SynthConfig,
    method: str,
    meta: dict,
) -> SynthSample:
    """Difference-threshold mask, close, then snap pixels outside the dilated
    mask back to the normal image so locality is exact."""
    diff = np.max(np.abs(x_a - x_n), axis=2)
    raw = diff > cfg.diff_threshold
    mask = ndimage.binary_closing(raw, structure=_BOX)
    image_a = _to_u8(x_a)
    dilated = ndimage.binary_dilation(mask, structure=_BOX)
    image_a[~dilated] = image_n[~dilated]
    area = int(mask.sum())
    h, w = mask.shape
    in_bounds = cfg.min_area_frac * h * w <= area <= cfg.max_area_frac * h * w
    noop = area == 0
    if noop:
        image_a = image_n.copy()
    meta = dict(meta, area=area, in_bounds=bool(in_bounds))
    return SynthSample(
        image_n=image_n.copy(),
        image_a=image_a,
        mask=mask.astype(np.uint8),
        noop=noop or not in_bounds,
        method=method,
        meta=meta,
    )


def synth_nsa(
    image_n: np.ndarray, image_src: np.ndarray, cfg: SynthConfig, rng: np.random.Generator
) -> SynthSample:
    _check_rgb(image_n, "image_n")
    _check_rgb(image_src, "image_src")
    if image_src.shape != image_n.shape:
        raise DimensionError("source image shape differs from normal image")
    h, w = image_n.shape[:2]
    x_n = _to_f32(image_n)
    x_a = x_n.copy()
    rects = []
    n_rep = int(rng.integers(cfg.repeats[0], cfg.repeats[1] + 1))
    x_src = _to_f32(image_src)
    for _ in range(n_rep):
        for _ in range(cfg.retries):
            ph, pw = _sample_patch_hw(h, w, cfg, rng)
            factor = float(rng.uniform(*cfg.resize_scale))
            rh, rw = int(round(ph * factor)), int(round(pw * factor))
            if not (2 <= rh <= h - 2 and 2 <= rw <= w - 2 and ph <= h and pw <= w):
                continue
            sy = int(rng.integers(0, h - ph + 1))
            sx = int(rng.integers(0, w - pw + 1))
            dy = int(rng.integers(1, h - rh))
            dx = int(rng.integers(1, w - rw))
            x_a, rect, _ = nsa_paste(x_a, x_src, (sy, sx), (dy, dx), (ph, pw), factor, cfg)
            rects.append(rect)
            break
    return _finish_sample(image_n, x_n, x_a, cfg, "nsa", {"rects": rects, "repeats": n_rep})


# ---------------------------------------------------------------------------
# simple methods (cutpaste / mask / perlin)
# ---------------------------------------------------------------------------


def _synth_cutpaste(image_n, x_n, cfg, rng) -> SynthSample:
    h, w = x_n.shape[:2]
    ph, pw = _sample_patch_hw(h, w, cfg, rng)
    ph, pw = min(ph, h), min(pw, w)
    sy = int(rng.integers(0, h - ph + 1))
    sx = int(rng.integers(0, w - pw + 1))
    dy = int(rng.integers(0, h - ph + 1))
    dx = int(rng.integers(0, w - pw + 1))
    x_a = x_n.copy()
    x_a[dy : dy + ph, dx : dx + pw] = x_n[sy : sy + ph, sx : sx + pw]
    meta = {"src": (sy, sx), "dst": (dy, dx), "patch": (ph, pw)}
    sample = _finish_sample(image_n, x_n, x_a, cfg, "cutpaste", meta)
    if (sy, sx) == (dy, dx):
        sample.noop = True
    return sample


def _synth_mask(image_n, x_n, cfg, rng) -> SynthSample:
    h, w = x_n.shape[:2]
    ph, pw = _sample_patch_hw(h, w, cfg, rng)
    ph, pw = min(ph, h), min(pw, w)
    dy = int(rng.integers(0, h - ph + 1))
    dx = int(rng.integers(0, w - pw + 1))
    color = rng.integers(0, 256, size=3)
    image_a = image_n.copy()
    image_a[dy : dy + ph, dx : dx + pw] = color.astype(np.uint8)
    mask = np.zeros((h, w), dtype=np.uint8)
    mask[dy : dy + ph, dx : dx + pw] = 1
    area = int(mask.sum())
    in_bounds = cfg.min_area_frac * h * w <= area <= cfg.max_area_frac * h * w
    return SynthSample(
        image_n=image_n.copy(),
        image_a=image_a,
        mask=mask,
        noop=not in_bounds,
        method="mask",
        meta={"rect": (dy, dx, ph, pw), "color": color.tolist(), "area": area},
    )


def _synth_perlin(image_n, x_n, cfg, rng) -> SynthSample:
    h, w = x_n.shape[:2]
    blob = None
    for _ in range(2):
        fld = perlin_field(w, h, cfg.perlin_cell_size, cfg.perlin_octaves, rng)
        if cfg.perlin_threshold is not None:
            thr = cfg.perlin_threshold
        else:
            frac = rng.uniform(*cfg.patch_scale)
            thr = np.quantile(fld, 1.0 - frac)
        cand = fld >= thr
        if cand.any():
            blob = cand
            break
    if blob is None:
        return SynthSample(image_n.copy(), image_n.copy(), np.zeros((h, w), np.uint8),
                           True, "perlin", {"reason": "empty blob"})
    sigma = rng.uniform(0.15, 0.45)
    noise = rng.normal(0.0, sigma, size=x_n.shape).astype(np.float32)
    x_a = x_n.copy()
    x_a[blob] = np.clip(x_n[blob] + noise[blob], 0.0, 1.0)
    meta = {"noise_sigma": float(sigma), "blob_area": int(blob.sum())}
    return _finish_sample(image_n, x_n, x_a, cfg, "perlin", meta)


def synth_simple(image_n: np.ndarray, cfg: SynthConfig, rng: np.random.Generator) -> SynthSample:
    _check_rgb(image_n, "image_n")
    if cfg.method == "nsa":
        raise ConfigError("synth_simple handles cutpaste/mask/perlin; use synth_nsa for nsa")
    x_n = _to_f32(image_n)
    if cfg.method == "cutpaste":
        return _synth_cutpaste(image_n, x_n, cfg, rng)
    if cfg.method == "mask":
        return _synth_mask(image_n, x_n, cfg, rng)
    return _synth_perlin(image_n, x_n, cfg, rng)


def synthesize(
    image_n: np.ndarray,
    image_src: np.ndarray,
    cfg: SynthConfig,
    rng: np.random.Generator,
    max_attempts: int = 5,
) -> SynthSample:
    """Method dispatch with retry-on-noop; returns the last attempt if all fail."""
    sample = None
    for _ in range(max_attempts):
        if cfg.method == "nsa":
            sample = synth_nsa(image_n, image_src, cfg, rng)
        else:
            sample = synth_simple(image_n, cfg, rng)
        if not sample.noop:
            return sample
    return sample


# ---------------------------------------------------------------------------
# seam metric
# ---------------------------------------------------------------------------


def seam_gradient(image: np.ndarray, mask: np.ndarray) -> float:
    """Mean gradient magnitude over the one-pixel band straddling the mask
    boundary; 0.0 when the mask is empty or full."""
    m = mask.astype(bool)
    if not m.any() or m.all():
        return 0.0
    gray = _to_f32(image).mean(axis=2) if image.dtype == np.uint8 else np.asarray(image, np.float64).mean(axis=2)
    band = ndimage.binary_dilation(m, structure=_CROSS) & ~ndimage.binary_erosion(m, structure=_CROSS)
    gy, gx = np.gradient(gray.astype(np.float64))
    mag = np.hypot(gy, gx)
    return float(mag[band].mean())
