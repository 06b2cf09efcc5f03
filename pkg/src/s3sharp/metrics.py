"""Pan-sharpening quality metrics: ERGAS, SCC and translation-searched n-ERGAS.

Level conventions for an original-scale output ``g0``:

* ``scc0``: SCC between ``g0`` and the PAN input ``p0``;
* ``ergas1``: ERGAS between ``degrade(g0)`` and the MS input ``m1``;
* ``scc1``: SCC between ``degrade(g0)`` and ``degrade(p0)``;
* ``n_ergas1``: the smallest ERGAS over integer translations of ``g0``.

``ergas1`` is reported on the same margin-cropped support as ``n_ergas1`` so
the two are directly comparable and ``n_ergas1 <= ergas1`` always holds.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .raster import as_stack, gray
from .scalepipe import ScenePair, degrade

LAPLACIAN = np.array([[-1.0, -1.0, -1.0], [-1.0, 8.0, -1.0], [-1.0, -1.0, -1.0]]) / 8.0
METRIC_COLUMNS = ("ergas1", "scc1", "scc0", "n_ergas1")


def ergas(test, reference, resolution_ratio: float) -> float:
    """100 * ratio * sqrt(mean over bands of (RMSE_b / mean_b)^2); lower is better."""
    t, r = as_stack(test), as_stack(reference)
    if t.shape != r.shape:
        raise ValueError(f"shape mismatch: {t.shape} vs {r.shape}")
    if not resolution_ratio > 0:
        raise ValueError("resolution_ratio must be positive")
    means = r.mean(axis=(1, 2))
    for band, mean in enumerate(means):
        if abs(mean) < 1e-6:
            raise ValueError(f"reference band {band} has near-zero mean {mean!r}")
    rmse = np.sqrt(((t - r) ** 2).mean(axis=(1, 2)))
    return float(100.0 * resolution_ratio * np.sqrt(np.mean((rmse / means) ** 2)))


def highpass(x) -> np.ndarray:
    """3x3 Laplacian response over the valid interior of the last two axes."""
    x = np.asarray(x, dtype=np.float64)
    h, w = x.shape[-2:]
    out = np.zeros(x.shape[:-2] + (h - 2, w - 2))
    for dy in range(3):
        for dx in range(3):
            out += LAPLACIAN[dy, dx] * x[..., dy : dy + h - 2, dx : dx + w - 2]
    return out


def _pearson(a: np.ndarray, b: np.ndarray) -> float:
    a = a - a.mean()
    b = b - b.mean()
    na, nb = np.sqrt((a * a).sum()), np.sqrt((b * b).sum())
    if na == 0 or nb == 0:
        raise ValueError("high-pass plane has zero variance; SCC is undefined")
    return float(np.clip((a * b).sum() / (na * nb), -1.0, 1.0))


def scc(a, b, mode: str = "gray") -> float:
    """Spatial correlation coefficient of Laplacian high-passes.

    ``mode="gray"`` grays multiband inputs first; ``mode="band"`` scores each
    band (a plane is broadcast against the other input's bands) and averages.
    """
    a, b = as_stack(a), as_stack(b)
    if a.shape[1:] != b.shape[1:]:
        raise ValueError(f"spatial dimension mismatch: {a.shape[1:]} vs {b.shape[1:]}")
    if mode == "gray":
        return _pearson(highpass(gray(a)), highpass(gray(b)))
    if mode != "band":
        raise ValueError(f"unknown SCC mode {mode!r}")
    if a.shape[0] != b.shape[0] and 1 not in (a.shape[0], b.shape[0]):
        raise ValueError(f"band count mismatch: {a.shape[0]} vs {b.shape[0]}")
    bands = max(a.shape[0], b.shape[0])
    ha, hb = highpass(a), highpass(b)
    return float(np.mean([_pearson(ha[k % a.shape[0]], hb[k % b.shape[0]]) for k in range(bands)]))


@dataclass(frozen=True)
class TranslationSearch:
    """Integer ``(dx, dy)`` offsets, in level-0 pixels, tried by n-ERGAS."""

    max_shift: int = 6
    offsets: tuple[tuple[int, int], ...] | None = None

    def __post_init__(self):
        if self.max_shift < 0:
            raise ValueError("max_shift must be >= 0")
        if self.offsets is None:
            r = range(-self.max_shift, self.max_shift + 1)
            offsets = tuple((dx, dy) for dx in r for dy in r)
        else:
            offsets = tuple(sorted({(int(dx), int(dy)) for dx, dy in self.offsets}))
        if (0, 0) not in offsets:
            raise ValueError("the zero offset must be part of the search")
        if any(max(abs(dx), abs(dy)) > self.max_shift for dx, dy in offsets):
            raise ValueError(f"offsets must lie within +-{self.max_shift}")
        object.__setattr__(self, "offsets", offsets)

    @classmethod
    def zero_only(cls, max_shift: int = 6) -> "TranslationSearch":
        return cls(max_shift=max_shift, offsets=((0, 0),))


def level1_margin(max_shift: int, scale: int) -> int:
    """Level-1 crop margin covering the shift plus the degradation kernel."""
    radius = math.ceil(3 * scale / 2)
    return math.ceil((max_shift + radius) / scale)


def translate(x, dx: int, dy: int, pad: int) -> np.ndarray:
    """Move content by ``(dx, dy)`` pixels; exposed borders are reflect-filled."""
    stack = as_stack(x)
    h, w = stack.shape[1:]
    padded = np.pad(stack, ((0, 0), (pad, pad), (pad, pad)), mode="reflect")
    return padded[:, pad - dy : pad - dy + h, pad - dx : pad - dx + w]


def _check_levels(ps0: np.ndarray, ms1: np.ndarray, scale: int, margin: int) -> None:
    if ps0.shape[0] != ms1.shape[0]:
        raise ValueError(f"band count mismatch: {ps0.shape[0]} vs {ms1.shape[0]}")
    if tuple(scale * n for n in ms1.shape[1:]) != ps0.shape[1:]:
        raise ValueError(f"ps0 {ps0.shape[1:]} is not {scale}x ms1 {ms1.shape[1:]}")
    if min(ms1.shape[1:]) - 2 * margin < 1:
        raise ValueError(f"image of {ms1.shape[1:]} level-1 pixels is too small for a {margin}-pixel margin")


def n_ergas(ps0, ms1, scale: int, search: TranslationSearch = TranslationSearch()):
    """Smallest ERGAS over translations of ``ps0``; returns ``(score, (dx, dy))``.

    Every candidate is scored on the same margin-cropped level-1 support.
    Ties go to the lexicographically smallest offset.
    """
    ps0, ms1 = as_stack(ps0), as_stack(ms1)
    margin = level1_margin(search.max_shift, scale)
    _check_levels(ps0, ms1, scale, margin)
    h1, w1 = ms1.shape[1:]
    ref = ms1[:, margin : h1 - margin, margin : w1 - margin]

    # Degrading a translated image equals sampling the blurred image at
    # shifted positions, because the margin keeps every tap on real data.
    sigma = scale / 2.0
    radius = math.ceil(3 * sigma)
    blurred = ndimage.gaussian_filter(
        ps0, sigma=(0, sigma, sigma), mode="reflect", radius=(0, radius, radius)
    )
    m0 = margin * scale
    best = (math.inf, (0, 0))
    for dx, dy in search.offsets:
        ys = slice(m0 - dy, m0 - dy + scale * ref.shape[1], scale)
        xs = slice(m0 - dx, m0 - dx + scale * ref.shape[2], scale)
        score = ergas(blurred[:, ys, xs], ref, 1.0 / scale)
        if score < best[0]:
            best = (score, (dx, dy))
    return best


def n_ergas_direct(ps0, ms1, scale: int, search: TranslationSearch = TranslationSearch()):
    """Reference route for :func:`n_ergas`: translate, degrade, crop, score."""
    ps0, ms1 = as_stack(ps0), as_stack(ms1)
    margin = level1_margin(search.max_shift, scale)
    _check_levels(ps0, ms1, scale, margin)
    h1, w1 = ms1.shape[1:]
    crop = (slice(None), slice(margin, h1 - margin), slice(margin, w1 - margin))
    scores = {
        off: ergas(degrade(translate(ps0, *off, pad=search.max_shift), scale)[crop], ms1[crop], 1.0 / scale)
        for off in search.offsets
    }
    best = min(scores, key=lambda off: (scores[off], off))
    return scores[best], best


@dataclass
class MetricReport:
    """Per-scene metric rows with mean and standard-error aggregation."""

    rows: list[dict] = field(default_factory=list)
    name: str = ""

    def add(self, row: dict) -> None:
        self.rows.append(row)

    def column(self, key: str) -> np.ndarray:
        return np.array([row[key] for row in self.rows], dtype=np.float64)

    def mean(self, key: str) -> float:
        return float(self.column(key).mean())

    def stderr(self, key: str) -> float:
        values = self.column(key)
        if len(values) < 2 or np.ptp(values) == 0:
            return 0.0
        return float(values.std(ddof=1) / np.sqrt(len(values)))

    def summary(self) -> dict:
        out = {}
        for key in METRIC_COLUMNS:
            out[key] = self.mean(key)
            out[f"{key}_se"] = self.stderr(key)
        return out

    def to_csv(self) -> str:
        fields = ["scene", *METRIC_COLUMNS, "best_dx", "best_dy"]
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(fields)
        for row in self.rows:
            writer.writerow([row["scene"], *(_fmt(row[k]) for k in METRIC_COLUMNS), row["best_dx"], row["best_dy"]])
        summary = self.summary()
        writer.writerow(["mean", *(_fmt(summary[k]) for k in METRIC_COLUMNS), "", ""])
        writer.writerow(["stderr", *(_fmt(summary[f"{k}_se"]) for k in METRIC_COLUMNS), "", ""])
        return buf.getvalue()


def _fmt(value: float) -> str:
    return f"{value:.6f}"


def evaluate_scene(
    sp: ScenePair,
    search: TranslationSearch = TranslationSearch(),
    scc_mode: str = "gray",
    name: str = "",
) -> dict:
    """The four original-scale metrics for one scene with a ``g0`` result."""
    if sp.g0 is None:
        raise ValueError(f"scene {name or '?'} has no g0 result to evaluate")
    g0 = as_stack(sp.g0)
    g1_down = degrade(g0, sp.scale)
    p1 = sp.p1 if sp.p1 is not None else degrade(sp.p0, sp.scale)
    zero = n_ergas(g0, sp.m1, sp.scale, TranslationSearch.zero_only(search.max_shift))[0]
    score, (dx, dy) = n_ergas(g0, sp.m1, sp.scale, search)
    return {
        "scene": name,
        "ergas1": zero,
        "scc1": scc(g1_down, p1, scc_mode),
        "scc0": scc(g0, sp.p0, scc_mode),
        "n_ergas1": score,
        "best_dx": dx,
        "best_dy": dy,
    }


def evaluate_scenes(scenes, search: TranslationSearch = TranslationSearch(), scc_mode: str = "gray",
                    names=None, report_name: str = "") -> MetricReport:
    report = MetricReport(name=report_name)
    names = names or [f"scene{i:03d}" for i in range(len(scenes))]
    for sp, name in zip(scenes, names):
        report.add(evaluate_scene(sp, search, scc_mode, name))
    return report
