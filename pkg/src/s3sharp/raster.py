"""Raster container, normalization, graying and windowed statistics.

Planes are 2-D float arrays ``(H, W)``; multiband images are ``(B, H, W)``.
The windowed statistics use a box filter whose window shrinks to its
intersection with the image at the borders, so every output pixel is an
honest mean of real samples.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

SUPPORTED_BIT_DEPTHS = (8, 11, 14, 16)


@dataclass(frozen=True)
class StatConfig:
    """Box-filter window side length and the stabilizer added under sqrt."""

    window: int = 31
    eps: float = 1e-10

    def __post_init__(self):
        if self.window < 1 or self.window % 2 == 0:
            raise ValueError(f"window must be a positive odd integer, got {self.window}")
        if not self.eps > 0:
            raise ValueError(f"eps must be > 0, got {self.eps}")

    @property
    def radius(self) -> int:
        return self.window // 2


@dataclass
class Raster:
    """Planar multiband image with a resolution-level tag.

    ``data`` is ``(bands, height, width)``. Level 0 is the PAN grid, level 1
    the MS grid, level 2 the MS grid reduced once more.
    """

    data: np.ndarray
    level: int = 0
    bit_depth: int | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim == 2:
            data = data[None]
        if data.ndim != 3 or min(data.shape) < 1:
            raise ValueError(f"raster data must be (bands, height, width), got shape {data.shape}")
        if not np.issubdtype(data.dtype, np.number):
            raise TypeError(f"raster data must be numeric, got {data.dtype}")
        if np.issubdtype(data.dtype, np.floating) and not np.all(np.isfinite(data)):
            band, y, x = np.argwhere(~np.isfinite(data))[0]
            raise ValueError(f"non-finite sample in band {band} at pixel ({y}, {x})")
        self.data = data

    @property
    def bands(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    def plane(self, band: int = 0) -> np.ndarray:
        return self.data[band]

    def __array__(self, dtype=None, copy=None):
        return self.data if dtype is None else self.data.astype(dtype)


def as_stack(x) -> np.ndarray:
    """Return ``x`` as a float64 ``(B, H, W)`` array (planes gain a band axis)."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise ValueError(f"expected a plane or a multiband image, got shape {arr.shape}")
    return arr


def as_plane(x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 3 and arr.shape[0] == 1:
        arr = arr[0]
    if arr.ndim != 2:
        raise ValueError(f"expected a single plane, got shape {arr.shape}")
    return arr


def normalize(raster: Raster, bit_depth: int) -> Raster:
    """Scale integer-valued samples of the given bit depth into [0, 1]."""
    if bit_depth not in SUPPORTED_BIT_DEPTHS:
        raise ValueError(f"unsupported bit depth {bit_depth}; expected one of {SUPPORTED_BIT_DEPTHS}")
    top = 2**bit_depth - 1
    data = np.asarray(raster.data, dtype=np.float64)
    bad = (data < 0) | (data > top)
    if bad.any():
        band, y, x = np.argwhere(bad)[0]
        raise ValueError(
            f"sample {data[band, y, x]!r} in band {band} at pixel ({y}, {x}) "
            f"is outside [0, {top}] for {bit_depth}-bit data"
        )
    return Raster(data / top, level=raster.level, bit_depth=bit_depth, meta=dict(raster.meta))


def gray(ms) -> np.ndarray:
    """Unweighted per-pixel mean across bands."""
    return as_stack(ms).mean(axis=0)


@lru_cache(maxsize=64)
def _window_bounds(n: int, radius: int) -> tuple[np.ndarray, np.ndarray]:
    idx = np.arange(n)
    lo, hi = np.clip(idx - radius, 0, n), np.clip(idx + radius + 1, 0, n)
    lo.setflags(write=False)
    hi.setflags(write=False)
    return lo, hi


def box_sum(x: np.ndarray, radius: int) -> np.ndarray:
    """Windowed sum over the last two axes via a summed-area table.

    The window is clipped to the image; accumulation is in float64.
    """
    x = np.asarray(x, dtype=np.float64)
    h, w = x.shape[-2:]
    sat = np.zeros(x.shape[:-2] + (h + 1, w + 1))
    sat[..., 1:, 1:] = x.cumsum(axis=-2).cumsum(axis=-1)
    y0, y1 = _window_bounds(h, radius)
    x0, x1 = _window_bounds(w, radius)
    rows_hi = sat[..., y1, :]
    rows_lo = sat[..., y0, :]
    return rows_hi[..., x1] - rows_lo[..., x1] - rows_hi[..., x0] + rows_lo[..., x0]


def window_counts(shape: tuple[int, int], radius: int) -> np.ndarray:
    """Number of in-image pixels under each (clipped) window."""
    return _window_counts(tuple(shape), radius)


@lru_cache(maxsize=64)
def _window_counts(shape: tuple[int, int], radius: int) -> np.ndarray:
    y0, y1 = _window_bounds(shape[0], radius)
    x0, x1 = _window_bounds(shape[1], radius)
    counts = np.outer(y1 - y0, x1 - x0).astype(np.float64)
    counts.setflags(write=False)
    return counts


def window_mean(x, cfg: StatConfig = StatConfig()) -> np.ndarray:
    """Box-filter mean with border-shrinking windows (works on stacks too)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim < 2 or x.size == 0:
        raise ValueError(f"window_mean needs a nonempty plane, got shape {x.shape}")
    # Centering keeps the summed-area table small; the box mean commutes with it.
    center = x.mean(axis=(-2, -1), keepdims=True)
    sums = box_sum(x - center, cfg.radius)
    return sums / window_counts(x.shape[-2:], cfg.radius) + center


def window_mean_adjoint(y, cfg: StatConfig = StatConfig()) -> np.ndarray:
    """Transpose of :func:`window_mean` as a linear operator.

    The clipped box sum is symmetric but the per-pixel normalization is not,
    so the adjoint divides before summing.
    """
    y = np.asarray(y, dtype=np.float64)
    return box_sum(y / window_counts(y.shape[-2:], cfg.radius), cfg.radius)


def _check_same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")


def window_cov(a, b, cfg: StatConfig = StatConfig()) -> np.ndarray:
    """Windowed covariance ``m(a*b) - m(a)*m(b)``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_same_shape(a, b)
    # The product is symmetric so the result is exactly symmetric in (a, b).
    return window_mean(a * b, cfg) - window_mean(a, cfg) * window_mean(b, cfg)


def window_std(x, cfg: StatConfig = StatConfig()) -> np.ndarray:
    """Stabilized windowed standard deviation ``sqrt(|cov(x, x)| + eps)``."""
    return np.sqrt(np.abs(window_cov(x, x, cfg)) + cfg.eps)
