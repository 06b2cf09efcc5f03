"""Spectral-spatial structure loss and its analytic gradient.

The total is ``l_s3 = l_c + w_a * l_a`` where

* ``l_c`` sums ``|g - m| * S`` over every band and pixel, and
* ``l_a`` sums ``|grad(gray(g)) - grad(pan)| * (2 - S)`` over pixels, with
  ``grad(x) = (x - mean(x)) / std(x)`` built from the windowed statistics.

Losses are plain sums (no averaging). ``S`` is a constant: no gradient flows
into the correlation map.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .corrmap import CorrParams
from .raster import (
    StatConfig,
    as_plane,
    as_stack,
    gray,
    window_cov,
    window_mean,
    window_mean_adjoint,
    window_std,
)


@dataclass(frozen=True)
class LossConfig:
    w_a: float = 1.0
    corr: CorrParams = field(default_factory=CorrParams)
    use_corr_map: bool = True
    stat: StatConfig = field(default_factory=StatConfig)

    def __post_init__(self):
        if not self.w_a >= 0:
            raise ValueError(f"w_a must be >= 0, got {self.w_a}")


@dataclass(frozen=True)
class LossBreakdown:
    l_c: float
    l_a: float
    l_s3: float
    c_plane: np.ndarray | None = None
    a_plane: np.ndarray | None = None


@dataclass(frozen=True)
class LossGrad:
    d_g: np.ndarray


def _weight_plane(s, spatial_shape, cfg: LossConfig) -> np.ndarray:
    if not cfg.use_corr_map:
        return np.ones(spatial_shape)
    s = as_plane(s)
    if s.shape != tuple(spatial_shape):
        raise ValueError(f"correlation map shape {s.shape} does not match image {spatial_shape}")
    return s


def _check_pair(g: np.ndarray, m: np.ndarray) -> None:
    if g.shape != m.shape:
        raise ValueError(f"shape mismatch between output {g.shape} and target {m.shape}")


def _check_pan(g: np.ndarray, pan: np.ndarray) -> None:
    if g.shape[1:] != pan.shape:
        raise ValueError(f"shape mismatch between output {g.shape[1:]} and PAN {pan.shape}")


def grad_map(x, cfg: StatConfig = StatConfig()) -> np.ndarray:
    x = as_plane(x)
    return (x - window_mean(x, cfg)) / window_std(x, cfg)


def spectral_contributions(g, m_target, s, cfg: LossConfig = LossConfig()) -> np.ndarray:
    """Per-pixel spectral term, summed over bands."""
    g, m = as_stack(g), as_stack(m_target)
    _check_pair(g, m)
    weight = _weight_plane(s, g.shape[1:], cfg)
    return (np.abs(g - m) * weight).sum(axis=0)


def spatial_contributions(g, pan, s, cfg: LossConfig = LossConfig()) -> np.ndarray:
    g, pan = as_stack(g), as_plane(pan)
    _check_pan(g, pan)
    weight = _weight_plane(s, pan.shape, cfg)
    diff = grad_map(gray(g), cfg.stat) - grad_map(pan, cfg.stat)
    return np.abs(diff) * (2.0 - weight)


def spectral_loss(g, m_target, s, cfg: LossConfig = LossConfig()) -> float:
    return float(spectral_contributions(g, m_target, s, cfg).sum())


def spatial_loss(g, pan, s, cfg: LossConfig = LossConfig()) -> float:
    return float(spatial_contributions(g, pan, s, cfg).sum())


def s3_loss(g, m_target, pan, s, cfg: LossConfig = LossConfig(), planes: bool = False) -> LossBreakdown:
    c_plane = spectral_contributions(g, m_target, s, cfg)
    a_plane = spatial_contributions(g, pan, s, cfg)
    l_c = float(c_plane.sum())
    l_a = float(a_plane.sum())
    return LossBreakdown(
        l_c=l_c,
        l_a=l_a,
        l_s3=l_c + cfg.w_a * l_a,
        c_plane=c_plane if planes else None,
        a_plane=a_plane if planes else None,
    )


def _structure(x: np.ndarray, stat: StatConfig):
    mu = window_mean(x, stat)
    cov = window_cov(x, x, stat)
    sigma = np.sqrt(np.abs(cov) + stat.eps)
    return (x - mu) / sigma, mu, cov, sigma


def s3_value_and_grad(g, m_target, pan, s, cfg: LossConfig = LossConfig(), pan_grad=None):
    """Loss breakdown and gradient with respect to ``g`` in one pass.

    ``pan_grad`` may carry a precomputed ``grad_map(pan, cfg.stat)``.
    Subgradients use sign(0) = 0 for both L1 terms and for the ``|cov|``
    inside the windowed std.
    """
    g, m, pan = as_stack(g), as_stack(m_target), as_plane(pan)
    _check_pair(g, m)
    _check_pan(g, pan)
    weight = _weight_plane(s, pan.shape, cfg)
    stat = cfg.stat
    if pan_grad is None:
        pan_grad = grad_map(pan, stat)

    resid = g - m
    l_c = float((np.abs(resid) * weight).sum(axis=0).sum())
    d_g = np.sign(resid) * weight

    x = g.mean(axis=0)
    z, mu, cov, sigma = _structure(x, stat)
    diff = z - pan_grad
    l_a = float((np.abs(diff) * (2.0 - weight)).sum())
    breakdown = LossBreakdown(l_c=l_c, l_a=l_a, l_s3=l_c + cfg.w_a * l_a)
    if cfg.w_a == 0:
        return breakdown, LossGrad(d_g)

    upstream = np.sign(diff) * (2.0 - weight)
    # z = (x - mu) / sigma: direct path, through the mean, through sigma.
    t = upstream / sigma
    d_cov = -upstream * (x - mu) * np.sign(cov) / (2.0 * sigma**3)
    d_x = (
        t
        - window_mean_adjoint(t, stat)
        + 2.0 * x * window_mean_adjoint(d_cov, stat)
        - 2.0 * window_mean_adjoint(d_cov * mu, stat)
    )
    return breakdown, LossGrad(d_g + (cfg.w_a / g.shape[0]) * d_x[None])


def s3_loss_grad(g, m_target, pan, s, cfg: LossConfig = LossConfig()) -> LossGrad:
    """Gradient of ``l_s3`` with respect to every sample of ``g``."""
    return s3_value_and_grad(g, m_target, pan, s, cfg)[1]
