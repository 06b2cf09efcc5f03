"""Windowed correlation between a grayed MS image and PAN, and the map S."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .raster import StatConfig, as_plane, gray, window_cov, window_std


@dataclass(frozen=True)
class CorrParams:
    gamma: float = 4.0
    stat: StatConfig = field(default_factory=StatConfig)

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValueError(f"gamma must be > 0, got {self.gamma}")


@dataclass(frozen=True)
class CorrMap:
    """Per-pixel weight in [0, 1]; treated as a constant by the loss."""

    s: np.ndarray

    def __post_init__(self):
        s = as_plane(self.s)
        if not np.all((s >= 0) & (s <= 1)):
            raise ValueError("correlation map samples must lie in [0, 1]")
        s.setflags(write=False)
        object.__setattr__(self, "s", s)

    @classmethod
    def ones(cls, shape) -> "CorrMap":
        return cls(np.ones(shape))

    @property
    def shape(self):
        return self.s.shape

    def __array__(self, dtype=None, copy=None):
        return self.s if dtype is None else self.s.astype(dtype)


def correlation(m_gray, pan, params: CorrParams = CorrParams()) -> np.ndarray:
    """Windowed Pearson correlation, clamped to [-1, 1]."""
    a = as_plane(m_gray)
    b = as_plane(pan)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    cov = window_cov(a, b, params.stat)
    # std(a)*std(b) is evaluated as one product so swapping a and b is exact.
    denom = window_std(a, params.stat) * window_std(b, params.stat)
    return np.clip(cov / denom, -1.0, 1.0)


def corr_map(ms, pan, params: CorrParams = CorrParams()) -> CorrMap:
    """S = |corr(gray(ms), pan)| ** gamma."""
    corr = correlation(gray(ms), pan, params)
    return CorrMap(np.abs(corr) ** params.gamma)
