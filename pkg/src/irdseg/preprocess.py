"""IR normalization and enhancement, center cropping and missing-pixel masks.

The default pipeline order is normalize -> equalize -> gamma.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

DEFAULT_GAMMA = 0.8


@dataclass
class RawFrame:
    ir: np.ndarray
    depth: np.ndarray

    def __post_init__(self):
        if self.ir.shape != self.depth.shape:
            raise ValueError(f"IR {self.ir.shape} and depth {self.depth.shape} differ in extent")
        if np.any(self.ir < 0) or np.any(self.depth < 0):
            raise ValueError("IR and depth must be nonnegative")


def percentile_nearest_rank(values: np.ndarray, q: float) -> float:
    """The ceil(q/100 * N)-th smallest value (1-based)."""
    flat = np.sort(np.asarray(values, dtype=np.float64).reshape(-1))
    if flat.size == 0:
        raise ValueError("percentile of an empty image")
    rank = max(1, math.ceil(q / 100.0 * flat.size))
    return float(flat[rank - 1])


def normalize_ir(ir: np.ndarray) -> np.ndarray:
    """Clip at the 99th percentile and stretch [min, p99] onto [0, 255]."""
    ir = np.asarray(ir, dtype=np.float64)
    if ir.size == 0:
        raise ValueError("cannot normalize an empty image")
    p99 = percentile_nearest_rank(ir, 99.0)
    lo = float(ir.min())
    if p99 <= lo:
        return np.zeros_like(ir)
    return (np.minimum(ir, p99) - lo) / (p99 - lo) * 255.0


def histogram_equalize(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.size == 0 or img.min() < 0 or img.max() > 255:
        raise ValueError("histogram_equalize expects values in [0, 255]")
    bins = np.clip(np.floor(img), 0, 255).astype(np.int64)
    cdf = np.cumsum(np.bincount(bins.reshape(-1), minlength=256))
    n = img.size
    cdf_min = cdf[bins.min()]
    if cdf_min == n:
        # single occupied bin: nothing to spread
        return img.copy()
    lut = np.rint(255.0 * (cdf - cdf_min) / (n - cdf_min))
    return np.clip(lut, 0, 255)[bins]


def gamma_correct(img: np.ndarray, gamma: float = DEFAULT_GAMMA) -> np.ndarray:
    if gamma <= 0:
        raise ValueError(f"gamma must be positive, got {gamma}")
    img = np.asarray(img, dtype=np.float64)
    return 255.0 * (img / 255.0) ** gamma


def center_crop(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Centered window; odd margins drop the extra row/column at the bottom/right."""
    h, w = img.shape[:2]
    if out_h > h or out_w > w or out_h < 0 or out_w < 0:
        raise ValueError(f"crop {out_h}x{out_w} does not fit image {h}x{w}")
    top = (h - out_h) // 2
    left = (w - out_w) // 2
    return img[top : top + out_h, left : left + out_w]


def missing_mask(depth: np.ndarray) -> np.ndarray:
    return (np.asarray(depth) == 0).astype(np.float64)


def enhance_ir(ir: np.ndarray, equalize: bool = True, gamma: float | None = DEFAULT_GAMMA) -> np.ndarray:
    out = normalize_ir(ir)
    if equalize:
        out = histogram_equalize(out)
    if gamma is not None:
        out = gamma_correct(out, gamma)
    return out
