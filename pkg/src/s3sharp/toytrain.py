"""A small differentiable pan-sharpener and its training loop.

The model keeps a bicubic path and adds learned detail::

    G = up(M) + alpha_b * highpass(P) + conv2(tanh(conv1([up(M), P]) + b1)) + b2

where ``highpass(P) = P - window_mean(P)`` over a small window and both
convolutions are 3x3 with edge padding. ``alpha``, ``conv2`` and the biases
start at zero, so an untrained model returns the bicubic upsample.

The same operator runs at both scales: ``(m2, p1) -> g1`` for training and
``(m1, p0) -> g0`` for original-scale inference.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .corrmap import CorrMap, corr_map
from .metrics import MetricReport, TranslationSearch, evaluate_scene, METRIC_COLUMNS
from .raster import StatConfig, as_plane, as_stack, window_mean
from .s3loss import LossConfig, grad_map, s3_value_and_grad
from .scalepipe import Mover, ScenePair, SynthConfig, make_training_pair, synth_scene, upsample

log = logging.getLogger(__name__)

PARAM_NAMES = ("alpha", "w1", "b1", "w2", "b2")
LOSS_MODES = ("spectral_l2", "s3")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class ToyModelParams:
    alpha: np.ndarray
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    scale: int = 4
    hp_window: int = 5

    @classmethod
    def init(cls, bands: int = 3, hidden: int = 8, scale: int = 4, hp_window: int = 5, seed: int = 0):
        rng = np.random.default_rng(seed)
        fan_in, fan_out = (bands + 1) * 9, hidden * 9
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        return cls(
            alpha=np.zeros(bands),
            w1=rng.uniform(-limit, limit, size=(hidden, bands + 1, 3, 3)),
            b1=np.zeros(hidden),
            w2=np.zeros((bands, hidden, 3, 3)),
            b2=np.zeros(bands),
            scale=scale,
            hp_window=hp_window,
        )

    @property
    def bands(self) -> int:
        return self.alpha.shape[0]

    @property
    def hidden(self) -> int:
        return self.b1.shape[0]

    def arrays(self) -> dict:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def vector(self) -> np.ndarray:
        return np.concatenate([getattr(self, n).ravel() for n in PARAM_NAMES])

    def with_vector(self, vec: np.ndarray) -> "ToyModelParams":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.size != self.count():
            raise ValueError(f"expected {self.count()} parameters, got {vec.size}")
        parts, start = {}, 0
        for name in PARAM_NAMES:
            ref = getattr(self, name)
            parts[name] = vec[start : start + ref.size].reshape(ref.shape).copy()
            start += ref.size
        return replace(self, **parts)

    def count(self) -> int:
        return sum(getattr(self, n).size for n in PARAM_NAMES)


def _im2col(x: np.ndarray) -> np.ndarray:
    """``(C, H, W)`` -> ``(C * 9, H * W)`` columns of edge-padded 3x3 patches."""
    c, h, w = x.shape
    padded = np.pad(x, ((0, 0), (1, 1), (1, 1)), mode="edge")
    cols = np.empty((c, 3, 3, h, w))
    for dy in range(3):
        for dx in range(3):
            cols[:, dy, dx] = padded[:, dy : dy + h, dx : dx + w]
    return cols.reshape(c * 9, h * w)


def _conv_input_grad(upstream: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Gradient of an edge-padded 3x3 conv with respect to its input."""
    c_out, h, w = upstream.shape
    c_in = weights.shape[1]
    d_cols = (weights.reshape(c_out, -1).T @ upstream.reshape(c_out, h * w)).reshape(c_in, 3, 3, h, w)
    d_pad = np.zeros((c_in, h + 2, w + 2))
    for dy in range(3):
        for dx in range(3):
            d_pad[:, dy : dy + h, dx : dx + w] += d_cols[:, dy, dx]
    # Edge padding replicates the outer rows and columns; fold them back.
    d_pad[:, 1] += d_pad[:, 0]
    d_pad[:, -2] += d_pad[:, -1]
    d_pad[:, :, 1] += d_pad[:, :, 0]
    d_pad[:, :, -2] += d_pad[:, :, -1]
    return d_pad[:, 1:-1, 1:-1]


@dataclass
class _Inputs:
    """Per-scene features that do not depend on the parameters."""

    up: np.ndarray
    highpass: np.ndarray
    cols1: np.ndarray


def prepare_inputs(params: ToyModelParams, m_low, pan) -> _Inputs:
    m_low, pan = as_stack(m_low), as_plane(pan)
    expected = tuple(params.scale * n for n in m_low.shape[1:])
    if pan.shape != expected:
        raise ValueError(f"PAN is {pan.shape}, expected {expected} for scale {params.scale}")
    if m_low.shape[0] != params.bands:
        raise ValueError(f"model has {params.bands} bands, input has {m_low.shape[0]}")
    up = upsample(m_low, params.scale)
    hp = pan - window_mean(pan, StatConfig(params.hp_window))
    return _Inputs(up=up, highpass=hp, cols1=_im2col(np.concatenate([up, pan[None]])))


def _forward(params: ToyModelParams, x: _Inputs):
    _, h, w = x.up.shape
    pre = params.w1.reshape(params.hidden, -1) @ x.cols1 + params.b1[:, None]
    act = np.tanh(pre).reshape(params.hidden, h, w)
    cols2 = _im2col(act)
    detail = (params.w2.reshape(params.bands, -1) @ cols2).reshape(params.bands, h, w)
    out = x.up + params.alpha[:, None, None] * x.highpass[None] + detail + params.b2[:, None, None]
    return out, (act, cols2)


def _backward(params: ToyModelParams, x: _Inputs, cache, upstream: np.ndarray) -> dict:
    act, cols2 = cache
    b, h, w = upstream.shape
    up_flat = upstream.reshape(b, h * w)
    d_act = _conv_input_grad(upstream, params.w2)
    d_pre = (d_act * (1.0 - act * act)).reshape(params.hidden, h * w)
    return {
        "alpha": (upstream * x.highpass[None]).sum(axis=(1, 2)),
        "w1": (d_pre @ x.cols1.T).reshape(params.w1.shape),
        "b1": d_pre.sum(axis=1),
        "w2": (up_flat @ cols2.T).reshape(params.w2.shape),
        "b2": upstream.sum(axis=(1, 2)),
    }


def forward(params: ToyModelParams, m_low, pan) -> np.ndarray:
    """Sharpen ``m_low`` with ``pan`` (one level finer) into a PAN-grid image."""
    return _forward(params, prepare_inputs(params, m_low, pan))[0]


def backward(params: ToyModelParams, m_low, pan, upstream) -> dict:
    """Gradient of ``sum(upstream * forward(...))`` with respect to each parameter array."""
    x = prepare_inputs(params, m_low, pan)
    out, cache = _forward(params, x)
    upstream = np.asarray(getattr(upstream, "d_g", upstream), dtype=np.float64)
    if upstream.shape != out.shape:
        raise ValueError(f"upstream gradient {upstream.shape} does not match output {out.shape}")
    return _backward(params, x, cache, upstream)


@dataclass(frozen=True)
class TrainConfig:
    loss_mode: str = "s3"
    iterations: int = 2000
    lr: float = 2e-3
    weight_decay: float = 1e-4
    drop_at: int | None = None
    drop_factor: float = 10.0
    batch_size: int = 2
    seed: int = 0
    hidden: int = 8
    hp_window: int = 5
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if self.loss_mode not in LOSS_MODES:
            raise ValueError(f"loss_mode must be one of {LOSS_MODES}, got {self.loss_mode!r}")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.lr < 0:
            raise ValueError("learning rate must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    @property
    def drop_iteration(self) -> int:
        return self.iterations // 2 if self.drop_at is None else self.drop_at


class AdamW:
    """Adam with weight decay decoupled from the gradient moments."""

    def __init__(self, size: int, lr: float, weight_decay: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.weight_decay = lr, weight_decay
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, theta: np.ndarray, grad: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1**self.t)
        v_hat = self.v / (1 - self.beta2**self.t)
        return theta - self.lr * (m_hat / (np.sqrt(v_hat) + self.eps) + self.weight_decay * theta)


@dataclass
class _Sample:
    inputs: _Inputs
    target: np.ndarray
    pan: np.ndarray
    s: CorrMap | None
    pan_grad: np.ndarray | None = None


def sample_loss(params: ToyModelParams, sample: _Sample, cfg: TrainConfig, want_grad: bool = True):
    out, cache = _forward(params, sample.inputs)
    if cfg.loss_mode == "spectral_l2":
        resid = out - sample.target
        value = float((resid * resid).sum())
        d_out = 2.0 * resid
    else:
        breakdown, loss_grad = s3_value_and_grad(
            out, sample.target, sample.pan, sample.s, cfg.loss, pan_grad=sample.pan_grad
        )
        value, d_out = breakdown.l_s3, loss_grad.d_g
    if not want_grad:
        return value, None
    grads = _backward(params, sample.inputs, cache, d_out)
    return value, np.concatenate([grads[n].ravel() for n in PARAM_NAMES])


def prepare_samples(dataset, params: ToyModelParams, cfg: TrainConfig) -> list[_Sample]:
    samples = []
    for sp in dataset:
        if sp.m2 is None or sp.p1 is None:
            sp = make_training_pair(sp)
        pan = as_plane(sp.p1)
        s = pan_grad = None
        if cfg.loss_mode == "s3":
            s = sp.meta.get("s1")
            s = corr_map(sp.m1, pan, cfg.loss.corr) if s is None else CorrMap(s)
            pan_grad = grad_map(pan, cfg.loss.stat)
        samples.append(_Sample(prepare_inputs(params, sp.m2, pan), sp.m1, pan, s, pan_grad))
    return samples


@dataclass
class TrainResult:
    params: ToyModelParams
    losses: np.ndarray

    def curve_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["iteration", "loss"])
        for i, value in enumerate(self.losses):
            writer.writerow([i, repr(float(value))])
        return buf.getvalue()


def train(dataset, cfg: TrainConfig = TrainConfig(), params: ToyModelParams | None = None) -> TrainResult:
    """Minimize the configured loss over ``dataset`` with AdamW.

    Each iteration sums the loss over ``batch_size`` scenes drawn from a
    seeded cyclic permutation. Learning rate and weight decay drop by
    ``drop_factor`` at ``drop_iteration``.
    """
    dataset = list(dataset)
    if not dataset:
        raise ValueError("training needs at least one scene")
    scale = dataset[0].scale
    if params is None:
        params = ToyModelParams.init(dataset[0].bands, cfg.hidden, scale, cfg.hp_window, cfg.seed)
    samples = prepare_samples(dataset, params, cfg)
    rng = np.random.default_rng(cfg.seed)
    order: list[int] = []
    theta = params.vector()
    opt = AdamW(theta.size, cfg.lr, cfg.weight_decay, cfg.beta1, cfg.beta2, cfg.adam_eps)
    losses = np.empty(cfg.iterations)
    for it in range(cfg.iterations):
        if it == cfg.drop_iteration and it > 0:
            opt.lr /= cfg.drop_factor
            opt.weight_decay /= cfg.drop_factor
        current = params.with_vector(theta)
        total, grad = 0.0, np.zeros_like(theta)
        for _ in range(cfg.batch_size):
            if not order:
                order = list(rng.permutation(len(samples)))
            value, g = sample_loss(current, samples[order.pop()], cfg)
            total += value
            grad += g
        if not (math.isfinite(total) and np.all(np.isfinite(grad))):
            last = losses[it - 1] if it else float("nan")
            raise TrainingDiverged(f"non-finite loss at iteration {it} (previous loss {last!r})")
        losses[it] = total
        theta = opt.step(theta, grad)
        if it % 500 == 0:
            log.debug("iteration %d loss %.6g", it, total)
    return TrainResult(params.with_vector(theta), losses)


def sharpen_scene(params: ToyModelParams, sp: ScenePair) -> ScenePair:
    """Original-scale inference: ``g0 = forward(params, m1, p0)``."""
    return replace(sp, g0=forward(params, sp.m1, sp.p0))


def compare_modes(testset, params_spectral: ToyModelParams, params_s3: ToyModelParams,
                  search: TranslationSearch = TranslationSearch(), scc_mode: str = "gray", names=None):
    """Evaluate both models at the original scale; returns two MetricReports."""
    testset = list(testset)
    names = names or [f"scene{i:03d}" for i in range(len(testset))]
    reports = []
    for label, params in (("spectral_l2", params_spectral), ("s3", params_s3)):
        report = MetricReport(name=label)
        for sp, name in zip(testset, names):
            report.add(evaluate_scene(sharpen_scene(params, sp), search, scc_mode, name))
        reports.append(report)
    return tuple(reports)


def side_by_side_csv(spectral: MetricReport, s3: MetricReport) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["scene", *(f"{k}_{tag}" for tag in ("spectral", "s3") for k in METRIC_COLUMNS)])
    for a, b in zip(spectral.rows, s3.rows):
        writer.writerow([a["scene"], *(f"{r[k]:.6f}" for r in (a, b) for k in METRIC_COLUMNS)])
    for label, fn in (("mean", MetricReport.mean), ("stderr", MetricReport.stderr)):
        writer.writerow([label, *(f"{fn(r, k):.6f}" for r in (spectral, s3) for k in METRIC_COLUMNS)])
    return buf.getvalue()


def benchmark_scenes(seed: int, count: int, misaligned: bool = True, size: int = 128,
                     movers: int = 10) -> list[ScenePair]:
    """Seeded synthetic scenes; misaligned ones get random shifts and moving cars.

    Aligned scenes keep the cars but plant no offsets at all.
    """
    rng = np.random.default_rng(seed)
    scenes = []
    for _ in range(count):
        if misaligned:
            shift = tuple(int(v) for v in rng.integers(-6, 7, size=2))
            disp = [tuple(int(v) for v in rng.integers(-6, 7, size=2)) for _ in range(movers)]
        else:
            shift = (0, 0)
            disp = [(0, 0)] * movers
        sizes = [(int(rng.integers(6, 10)), int(rng.integers(12, 20))) for _ in range(movers)]
        cfg = SynthConfig(
            size=size,
            global_shift=shift,
            movers=tuple(Mover(sz, d) for sz, d in zip(sizes, disp)),
            seed=int(rng.integers(2**31)),
        )
        scenes.append(make_training_pair(synth_scene(cfg)))
    return scenes


def params_to_bytes(params: ToyModelParams) -> tuple[bytes, str]:
    """Little-endian float64 parameter vector and its text manifest."""
    manifest = [f"scale={params.scale}", f"hp_window={params.hp_window}"]
    manifest += [f"{n}={','.join(str(d) for d in getattr(params, n).shape)}" for n in PARAM_NAMES]
    return params.vector().astype("<f8").tobytes(), "\n".join(manifest) + "\n"


def params_from_bytes(payload: bytes, manifest: str) -> ToyModelParams:
    info = dict(line.split("=", 1) for line in manifest.splitlines() if "=" in line)
    try:
        shapes = {n: tuple(int(d) for d in info[n].split(",")) for n in PARAM_NAMES}
        scale, hp_window = int(info["scale"]), int(info["hp_window"])
    except (KeyError, ValueError) as exc:
        raise ValueError(f"malformed parameter manifest ({exc})") from None
    template = ToyModelParams(**{n: np.zeros(shapes[n]) for n in PARAM_NAMES}, scale=scale, hp_window=hp_window)
    vec = np.frombuffer(payload, dtype="<f8")
    return template.with_vector(vec)


def config_from_mapping(mapping: dict, base: TrainConfig = TrainConfig()) -> TrainConfig:
    """Build a TrainConfig from flat keys (unknown keys are an error)."""
    known = {f.name for f in fields(TrainConfig)} - {"loss"}
    loss_keys = {"w_a", "gamma", "window", "eps", "use_corr_map"}
    unknown = set(mapping) - known - loss_keys
    if unknown:
        raise ValueError(f"unknown training config keys: {sorted(unknown)}")
    cfg = replace(base, **{k: v for k, v in mapping.items() if k in known})
    if loss_keys & set(mapping):
        loss = cfg.loss
        stat = StatConfig(mapping.get("window", loss.stat.window), mapping.get("eps", loss.stat.eps))
        corr = replace(loss.corr, gamma=mapping.get("gamma", loss.corr.gamma), stat=stat)
        loss = LossConfig(w_a=mapping.get("w_a", loss.w_a), corr=corr,
                          use_corr_map=mapping.get("use_corr_map", loss.use_corr_map), stat=stat)
        cfg = replace(cfg, loss=loss)
    return cfg
