"""Two-scale protocol and a synthetic misaligned-scene generator.

Levels: 0 is the PAN grid, 1 the MS grid (``scale`` times coarser), 2 the
MS grid reduced once more. Training uses ``(m2, p1) -> m1``; inference at
the original scale feeds ``(m1, p0)`` and produces ``g0``.

Decimation keeps the top-left sample of every ``scale x scale`` block, so
level-1 pixel ``i`` sits at level-0 coordinate ``scale * i``; :func:`upsample`
uses the same phase.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from .raster import as_stack, gray

MAX_MISALIGNMENT = 8


def _restore_kind(stack: np.ndarray, like) -> np.ndarray:
    return stack[0] if np.ndim(like) == 2 else stack


def degrade(x, scale: int) -> np.ndarray:
    """Gaussian low-pass (sigma = scale/2, radius ceil(3 sigma), reflect) then decimate."""
    if int(scale) != scale or scale < 2:
        raise ValueError(f"scale must be an integer >= 2, got {scale}")
    scale = int(scale)
    stack = as_stack(x)
    h, w = stack.shape[1:]
    if h % scale or w % scale:
        raise ValueError(f"dimensions {h}x{w} are not divisible by scale {scale}")
    sigma = scale / 2.0
    radius = math.ceil(3 * sigma)
    blurred = ndimage.gaussian_filter(
        stack, sigma=(0, sigma, sigma), mode="reflect", radius=(0, radius, radius)
    )
    return _restore_kind(blurred[:, ::scale, ::scale].copy(), x)


def _cubic_weights(t: np.ndarray, a: float = -0.5) -> np.ndarray:
    """Catmull-Rom weights for the four taps at offsets -1, 0, 1, 2."""
    d = np.stack([1 + t, t, 1 - t, 2 - t], axis=-1)
    near = (a + 2) * d**3 - (a + 3) * d**2 + 1
    far = a * d**3 - 5 * a * d**2 + 8 * a * d - 4 * a
    return np.where(d <= 1, near, far)


def cubic_matrix(n_in: int, scale: int) -> np.ndarray:
    """``(n_in * scale, n_in)`` matrix of 1-D bicubic interpolation weights."""
    pos = np.arange(n_in * scale) / scale
    base = np.floor(pos).astype(int)
    weights = _cubic_weights(pos - base)
    mat = np.zeros((n_in * scale, n_in))
    rows = np.arange(n_in * scale)
    for k, offset in enumerate((-1, 0, 1, 2)):
        cols = np.clip(base + offset, 0, n_in - 1)
        np.add.at(mat, (rows, cols), weights[:, k])
    return mat


def upsample(x, scale: int) -> np.ndarray:
    """Separable bicubic (Catmull-Rom, edge-clamped) enlargement by ``scale``."""
    if int(scale) != scale or scale < 2:
        raise ValueError(f"scale must be an integer >= 2, got {scale}")
    stack = as_stack(x)
    rows = cubic_matrix(stack.shape[1], int(scale))
    cols = cubic_matrix(stack.shape[2], int(scale))
    out = np.einsum("yh,bhw,xw->byx", rows, stack, cols, optimize=True)
    return _restore_kind(out, x)


@dataclass
class ScenePair:
    """Co-registered rasters across levels for one scene."""

    p0: np.ndarray
    m1: np.ndarray
    scale: int = 4
    p1: np.ndarray | None = None
    m2: np.ndarray | None = None
    g1: np.ndarray | None = None
    g0: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.p0 = np.asarray(self.p0, dtype=np.float64)
        self.m1 = as_stack(self.m1)
        if self.p0.ndim != 2:
            raise ValueError(f"p0 must be a plane, got shape {self.p0.shape}")
        expected = tuple(self.scale * n for n in self.m1.shape[1:])
        if self.p0.shape != expected:
            raise ValueError(f"p0 is {self.p0.shape}, expected {expected} for scale {self.scale}")
        if self.g0 is not None and as_stack(self.g0).shape != (self.bands,) + self.p0.shape:
            raise ValueError("g0 must have PAN dimensions and MS band count")
        if self.g1 is not None and as_stack(self.g1).shape != self.m1.shape:
            raise ValueError("g1 must match m1")

    @property
    def bands(self) -> int:
        return self.m1.shape[0]


def make_training_pair(sp: ScenePair) -> ScenePair:
    """Fill ``p1`` and ``m2`` by degrading ``p0`` and ``m1``; the target is ``m1``."""
    return replace(sp, p1=degrade(sp.p0, sp.scale), m2=degrade(sp.m1, sp.scale))


@dataclass(frozen=True)
class Mover:
    """A rectangular object that sits at different places in PAN and MS."""

    size: tuple[int, int]
    displacement: tuple[float, float]
    position: tuple[int, int] | None = None


@dataclass(frozen=True)
class SynthConfig:
    """Synthetic scene recipe.

    ``size`` is the level-1 side length; the PAN grid is ``scale * size``.
    Shifts and displacements are ``(dx, dy)`` in level-0 pixels.
    """

    size: int = 128
    scale: int = 4
    global_shift: tuple[float, float] = (0.0, 0.0)
    movers: tuple[Mover, ...] = ()
    seed: int = 0
    band_gains: tuple[float, ...] = (0.85, 1.0, 1.15)
    window: int = 31
    texture: float = 1.0
    relief: float = 0.12
    buildings: int = 14

    def __post_init__(self):
        if self.size < 4 * self.window:
            raise ValueError(f"size {self.size} must be at least 4x the window {self.window}")
        if self.scale < 2:
            raise ValueError("scale must be >= 2")
        offsets = [self.global_shift] + [m.displacement for m in self.movers]
        if any(max(abs(d) for d in off) > MAX_MISALIGNMENT for off in offsets):
            raise ValueError(f"misalignments must stay within {MAX_MISALIGNMENT} level-0 pixels")


_PAD = 24


def _smooth_noise(rng: np.random.Generator, shape, sigma: float) -> np.ndarray:
    """Periodic Gaussian-smoothed white noise, scaled to unit std."""
    spectrum = np.fft.rfft2(rng.standard_normal(shape))
    field_ = np.fft.irfft2(ndimage.fourier_gaussian(spectrum, sigma, n=shape[-1], axis=-1), s=shape[-2:])
    return field_ / (field_.std() + 1e-12)


def _render_base(cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    """Colored level-0 canvas, padded by ``_PAD`` on each side, without movers."""
    n = cfg.size * cfg.scale + 2 * _PAD
    bands = len(cfg.band_gains)
    canvas = 0.45 + cfg.relief * _smooth_noise(rng, (n, n), n / 12)
    tint = np.zeros((bands, n, n))
    for _ in range(cfg.buildings):
        h, w = rng.integers(12, n // 5, size=2)
        y, x = rng.integers(0, n - h), rng.integers(0, n - w)
        canvas[y : y + h, x : x + w] += rng.uniform(-0.25, 0.25)
        tint[:, y : y + h, x : x + w] = rng.uniform(-0.06, 0.06, size=(bands, 1, 1))
    canvas = canvas + cfg.texture * 0.05 * _smooth_noise(rng, (n, n), 1.2)
    chroma = 0.04 * np.stack([_smooth_noise(rng, (n, n), n / 8) for _ in range(bands)])
    gains = np.asarray(cfg.band_gains, dtype=np.float64)[:, None, None]
    return gains * canvas[None] + chroma + tint


def _paint(canvas: np.ndarray, top_left, size, color) -> None:
    y, x = (int(round(v)) + _PAD for v in top_left)
    h, w = size
    canvas[:, y : y + h, x : x + w] = color[:, None, None]


def synth_scene(cfg: SynthConfig) -> ScenePair:
    """Render a seeded scene: aligned PAN at level 0, shifted MS at level 1.

    ``meta`` keeps the planted offsets and ``truth0``, the PAN-aligned colored
    scene at level 0 (an ideal sharpened output).
    """
    rng = np.random.default_rng(cfg.seed)
    n0 = cfg.size * cfg.scale
    base = _render_base(cfg, rng)
    bands = base.shape[0]

    movers = []
    for mv in cfg.movers:
        h, w = mv.size
        if mv.position is None:
            room = 2 * MAX_MISALIGNMENT
            pos = (
                int(rng.integers(room, n0 - h - room)),
                int(rng.integers(room, n0 - w - room)),
            )
        else:
            pos = tuple(int(v) for v in mv.position)
        dx, dy = mv.displacement
        for y, x in (pos, (pos[0] + dy + cfg.global_shift[1], pos[1] + dx + cfg.global_shift[0])):
            if y < 0 or x < 0 or y + h > n0 or x + w > n0:
                raise ValueError(f"mover of size {mv.size} at {pos} leaves the canvas")
        color = np.clip(rng.uniform(0.0, 1.0) + rng.uniform(-0.15, 0.15, size=bands), 0.02, 0.98)
        movers.append((pos, mv, color))

    aligned = base.copy()
    for pos, mv, color in movers:
        _paint(aligned, pos, mv.size, color)

    gx, gy = cfg.global_shift
    if gx == int(gx) and gy == int(gy):
        shifted = np.roll(base, (int(gy), int(gx)), axis=(1, 2))
    else:
        shifted = ndimage.shift(base, (0, gy, gx), order=3, mode="nearest")
    for pos, mv, color in movers:
        dx, dy = mv.displacement
        _paint(shifted, (pos[0] + dy + gy, pos[1] + dx + gx), mv.size, color)

    crop = (slice(None), slice(_PAD, _PAD + n0), slice(_PAD, _PAD + n0))
    truth0 = np.clip(aligned[crop], 0.0, 1.0)
    ms0 = np.clip(shifted[crop], 0.0, 1.0)
    meta = {
        "seed": cfg.seed,
        "global_shift": [float(gx), float(gy)],
        "movers": [
            {"position": list(pos), "size": list(mv.size), "displacement": [float(d) for d in mv.displacement]}
            for pos, mv, _ in movers
        ],
        "truth0": truth0,
    }
    return ScenePair(p0=gray(truth0), m1=degrade(ms0, cfg.scale), scale=cfg.scale, meta=meta)


def mover_footprint(sp: ScenePair, level: int = 1) -> np.ndarray:
    """Boolean mask covering each mover at both its PAN and MS positions."""
    n0 = sp.p0.shape
    mask = np.zeros(n0, dtype=bool)
    gx, gy = sp.meta.get("global_shift", (0.0, 0.0))
    for mv in sp.meta.get("movers", []):
        (y, x), (h, w), (dx, dy) = mv["position"], mv["size"], mv["displacement"]
        mask[y : y + h, x : x + w] = True
        y2, x2 = int(round(y + dy + gy)), int(round(x + dx + gx))
        mask[y2 : y2 + h, x2 : x2 + w] = True
    if level == 0:
        return mask
    f = sp.scale**level
    return mask.reshape(n0[0] // f, f, n0[1] // f, f).any(axis=(1, 3))
