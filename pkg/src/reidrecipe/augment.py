"""Training-time image transforms on ``[3,H,W]`` float arrays."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import ValidationError


@dataclass(frozen=True)
class CutoutSchedule:
    f_start: float = 0.0
    f_end: float = 0.4
    total_iters: int = 1024

    def __post_init__(self):
        if not 0.0 <= self.f_start <= self.f_end <= 0.5:
            raise ValidationError("cut-out schedule needs 0 <= f_start <= f_end <= 0.5")
        if self.total_iters < 1:
            raise ValidationError("cut-out schedule needs total_iters >= 1")


def schedule_value(s: CutoutSchedule, it: int) -> float:
    """Maximum cut-out area fraction at triplet iteration ``it`` (linear ramp)."""
    if it < 0:
        raise ValidationError("iteration must be >= 0")
    return s.f_start + (s.f_end - s.f_start) * min(it / s.total_iters, 1.0)


@lru_cache(maxsize=512)
def _interp_table(n_in, n_out):
    # half-pixel-centre bilinear sampling positions
    pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    pos = np.clip(pos, 0.0, n_in - 1)
    lo = np.floor(pos).astype(np.intp)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = (pos - lo).astype(np.float32)
    return lo, hi, frac


def resize(image, out_h, out_w):
    """Bilinear resize of ``[C,H,W]`` to ``[C,out_h,out_w]``."""
    _, h, w = image.shape
    if (h, w) == (out_h, out_w):
        return image.copy()
    lo, hi, fr = _interp_table(h, out_h)
    rows = image[:, lo, :] * (1 - fr)[None, :, None] + image[:, hi, :] * fr[None, :, None]
    lo, hi, fr = _interp_table(w, out_w)
    out = rows[:, :, lo] * (1 - fr)[None, None, :] + rows[:, :, hi] * fr[None, None, :]
    return out.astype(image.dtype, copy=False)


def largest_side_shape(h, w, m):
    if h >= w:
        return m, max(1, int(round(w * m / h)))
    return max(1, int(round(h * m / w))), m


def resize_largest_side(image, m: int):
    """Scale so ``max(H,W) == m`` keeping the aspect ratio."""
    if m < 16:
        raise ValidationError("largest side must be >= 16 pixels")
    _, h, w = image.shape
    return resize(image, *largest_side_shape(h, w, m))


def cutout_rect(h, w, max_area_frac, rng):
    """Sample ``(r0, r1, c0, c1)``; ``None`` when the rectangle is empty."""
    if not 0.0 <= max_area_frac <= 0.5:
        raise ValidationError("cut-out area fraction must lie in [0, 0.5]")
    if max_area_frac == 0:
        return None
    area = rng.uniform(0.0, max_area_frac) * h * w
    aspect = rng.uniform(0.3, 3.3)  # height / width
    rh = min(h, int(round(np.sqrt(area * aspect))))
    rw = min(w, int(round(np.sqrt(area / aspect))))
    r0 = int(rng.integers(0, h - rh + 1))
    c0 = int(rng.integers(0, w - rw + 1))
    if rh == 0 or rw == 0:
        return None
    return r0, r0 + rh, c0, c0 + rw


def cutout(image, max_area_frac: float, rng, return_rect=False):
    """Replace one random rectangle with uniform [0,1] noise."""
    out = image.copy()
    c, h, w = image.shape
    rect = cutout_rect(h, w, max_area_frac, rng)
    if rect is not None:
        r0, r1, c0, c1 = rect
        out[:, r0:r1, c0:c1] = rng.random((c, r1 - r0, c1 - c0), dtype=np.float32)
    return (out, rect) if return_rect else out


def hflip(image):
    return image[:, :, ::-1].copy()


def random_crop(image, min_keep_frac: float, rng):
    """Keep a sub-rectangle (each side >= sqrt(min_keep_frac)) and resize back."""
    if not 0.0 < min_keep_frac <= 1.0:
        raise ValidationError("min_keep_frac must lie in (0, 1]")
    _, h, w = image.shape
    if min_keep_frac == 1.0:
        return image.copy()
    lo = np.sqrt(min_keep_frac)
    ch = max(1, int(round(h * rng.uniform(lo, 1.0))))
    cw = max(1, int(round(w * rng.uniform(lo, 1.0))))
    r0 = int(rng.integers(0, h - ch + 1))
    c0 = int(rng.integers(0, w - cw + 1))
    return resize(image[:, r0:r0 + ch, c0:c0 + cw], h, w)


def random_resized_crop(image, side: int, rng, scale=(0.5, 1.0), ratio=(0.75, 1.333)):
    """Random-area, random-aspect crop resized (with distortion) to ``side x side``."""
    _, h, w = image.shape
    for _ in range(10):
        area = rng.uniform(*scale) * h * w
        r = np.exp(rng.uniform(np.log(ratio[0]), np.log(ratio[1]))) * (w / h)
        cw = int(round(np.sqrt(area * r)))
        ch = int(round(np.sqrt(area / r)))
        if 1 <= cw <= w and 1 <= ch <= h:
            r0 = int(rng.integers(0, h - ch + 1))
            c0 = int(rng.integers(0, w - cw + 1))
            return resize(image[:, r0:r0 + ch, c0:c0 + cw], side, side)
    return resize(image, side, side)
