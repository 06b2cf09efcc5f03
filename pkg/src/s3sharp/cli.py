"""Command-line interface: ``s3sharp <command> [options]``.

Scene directories hold one raw raster per layer (``p0.raw``, ``m1.raw`` and
optionally ``p1``, ``m2``, ``g0``, ``truth0``) plus a ``scene.json``
manifest. A scene set is either one scene directory or a directory whose
subdirectories are scenes, visited in sorted order.

Failures print one JSON line ``{"error": ..., "message": ..., "path": ...}``
to stderr and exit nonzero. ``S3SHARP_THREADS`` caps the BLAS/OpenMP thread
count when set before the first numpy import.
"""

from __future__ import annotations

import os

THREADS_ENV = "S3SHARP_THREADS"
_threads = os.environ.get(THREADS_ENV)
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

import argparse  # noqa: E402
import csv  # noqa: E402
import io  # noqa: E402
import json  # noqa: E402
import sys  # noqa: E402
from dataclasses import replace  # noqa: E402
from pathlib import Path  # noqa: E402

import numpy as np  # noqa: E402

from .corrmap import CorrMap, CorrParams, corr_map  # noqa: E402
from .metrics import METRIC_COLUMNS, MetricReport, TranslationSearch, evaluate_scenes  # noqa: E402
from .raster import Raster, StatConfig, normalize  # noqa: E402
from .rasterfile import RasterFormatError, atomic_write_bytes, atomic_write_text, load_raster, save_heatmap, save_raster  # noqa: E402
from .s3loss import LossConfig, s3_loss  # noqa: E402
from .scalepipe import Mover, ScenePair, SynthConfig, degrade, make_training_pair, synth_scene, upsample  # noqa: E402
from .toytrain import (  # noqa: E402
    TrainConfig,
    TrainingDiverged,
    benchmark_scenes,
    compare_modes,
    config_from_mapping,
    params_from_bytes,
    params_to_bytes,
    sharpen_scene,
    side_by_side_csv,
    train,
)

PROG = "s3sharp"
SCENE_MANIFEST = "scene.json"
LAYER_LEVELS = {"p0": 0, "m1": 1, "p1": 1, "m2": 2, "g0": 0, "truth0": 0}
RASTER_SUFFIXES = (".raw", ".tif", ".tiff", ".png")


class CliError(Exception):
    def __init__(self, code: str, message: str, path=None):
        super().__init__(message)
        self.code, self.message = code, message
        self.path = None if path is None else str(path)

    def line(self) -> str:
        return json.dumps({"error": self.code, "message": self.message, "path": self.path}, sort_keys=True)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", f"{self.prog}: {message}")


class _Formatter(argparse.ArgumentDefaultsHelpFormatter):
    pass


class _Knob(argparse.Action):
    """Stores a value and remembers that the flag was given explicitly."""

    def __call__(self, parser, namespace, values, option_string=None):
        setattr(namespace, self.dest, values)
        explicit = set(getattr(namespace, "explicit", ()))
        explicit.add(self.dest)
        namespace.explicit = explicit


class _KnobFlag(_Knob):
    def __init__(self, option_strings, dest, **kwargs):
        kwargs.setdefault("default", False)
        super().__init__(option_strings, dest, nargs=0, **kwargs)

    def __call__(self, parser, namespace, values, option_string=None):
        super().__call__(parser, namespace, True, option_string)


# ---------------------------------------------------------------- arguments


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text!r}")
    return value


def _add_stat(p):
    p.add_argument("--window", type=_positive_int, default=31, action=_Knob, help="odd statistics window side")
    p.add_argument("--eps", type=float, default=1e-10, action=_Knob, help="variance floor inside the square root")


def _add_corr(p):
    p.add_argument("--gamma", type=float, default=4.0, action=_Knob, help="correlation-map exponent")
    _add_stat(p)


def _add_loss(p):
    _add_corr(p)
    p.add_argument("--wa", type=float, default=1.0, action=_Knob, help="spatial loss weight")
    p.add_argument("--no-corr-map", action=_KnobFlag, help="replace the correlation map with ones")


def _add_search(p):
    p.add_argument("--max-shift", type=int, default=6, help="n-ERGAS translation search radius in level-0 pixels")
    p.add_argument("--scc-mode", choices=("gray", "band"), default="gray", help="SCC on grayed images or per band")


def _add_bit_depth(p):
    p.add_argument("--bit-depth", type=int, choices=(8, 11, 14, 16), default=None,
                   help="bit depth for normalizing 16-bit TIFF/PNG inputs (default: the file's container depth)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog=PROG,
        description="Correlation-weighted spectral-spatial loss, metrics and a toy pan-sharpener.",
        epilog="Defaults: gamma=4, window=31, eps=1e-10, wa=1, scale=4, max-shift=6. "
        f"Set {THREADS_ENV} to cap numeric threads.",
        formatter_class=_Formatter,
    )
    sub = parser.add_subparsers(dest="command", metavar="command", required=True, parser_class=_Parser)

    def command(name, help_text):
        return sub.add_parser(name, help=help_text, description=help_text, formatter_class=_Formatter)

    p = command("synth", "write a synthetic scene (or a benchmark set) with planted misalignment")
    p.add_argument("--out", required=True, type=Path, help="output scene directory")
    p.add_argument("--seed", type=int, default=0, help="random seed")
    p.add_argument("--size", type=_positive_int, default=128, help="level-1 side length")
    p.add_argument("--scale", type=_positive_int, default=4, help="resolution ratio between levels")
    p.add_argument("--shift", type=float, nargs=2, metavar=("DX", "DY"), default=(0.0, 0.0),
                   help="global MS shift in level-0 pixels")
    p.add_argument("--movers", type=int, default=0, action=_Knob, help="number of moving objects")
    p.add_argument("--mover-size", type=int, nargs=2, metavar=("H", "W"), default=(8, 16), help="mover size")
    p.add_argument("--mover-shift", type=float, nargs=2, metavar=("DX", "DY"), default=(0.0, 0.0),
                   help="mover displacement between PAN and MS")
    p.add_argument("--texture", type=float, default=1.0, help="background texture amplitude")
    p.add_argument("--relief", type=float, default=0.12, help="large-scale brightness relief amplitude")
    p.add_argument("--buildings", type=int, default=14, help="number of static buildings")
    p.add_argument("--window", type=_positive_int, default=31, help="statistics window the scene must accommodate")
    p.add_argument("--benchmark", choices=("misaligned", "aligned"), default=None,
                   help="write COUNT randomized benchmark scenes into OUT/sceneNNN instead")
    p.add_argument("--count", type=_positive_int, default=1, help="benchmark scene count")

    p = command("degrade", "blur and decimate a raster by the scale ratio")
    p.add_argument("--input", required=True, type=Path, help="input raster")
    p.add_argument("--out", required=True, type=Path, help="output raw raster")
    p.add_argument("--scale", type=_positive_int, default=4, help="resolution ratio between levels")
    _add_bit_depth(p)

    p = command("pair", "add lower-scale training inputs p1 and m2 to each scene")
    p.add_argument("--scenes", required=True, type=Path, help="scene directory or set")
    p.add_argument("--scale", type=_positive_int, default=4, help="ratio used when a scene has no manifest")

    p = command("corr-map", "compute the correlation map S of an MS/PAN pair")
    p.add_argument("--ms", required=True, type=Path, help="multiband raster")
    p.add_argument("--pan", required=True, type=Path, help="PAN plane at the same resolution")
    p.add_argument("--out", required=True, type=Path, help="output raw plane")
    p.add_argument("--heatmap", type=Path, default=None, help="optional 8-bit PNG rendering of S")
    _add_corr(p)
    _add_bit_depth(p)

    p = command("loss", "evaluate the loss terms for an output, its target and the PAN")
    p.add_argument("--g", required=True, type=Path, help="sharpened output")
    p.add_argument("--ms", required=True, type=Path, help="spectral target at the output's resolution")
    p.add_argument("--pan", required=True, type=Path, help="PAN plane at the output's resolution")
    p.add_argument("--s", type=Path, default=None, help="precomputed correlation map (default: computed)")
    p.add_argument("--out", type=Path, default=None, help="CSV output (default: stdout)")
    p.add_argument("--heatmaps", default=None, metavar="PREFIX",
                   help="write PREFIX_spectral.png and PREFIX_spatial.png contribution maps")
    _add_loss(p)
    _add_bit_depth(p)

    p = command("eval", "score original-scale outputs with ERGAS, SCC and n-ERGAS")
    p.add_argument("--scenes", required=True, type=Path, help="scene directory or set")
    source = p.add_mutually_exclusive_group()
    source.add_argument("--params", type=Path, default=None, help="sharpen with a trained toy model")
    source.add_argument("--bicubic", action="store_true", help="score the bicubic upsample of m1")
    p.add_argument("--out", required=True, type=Path, help="CSV output")
    _add_search(p)

    p = command("train-toy", "train the toy sharpener at the lower scale")
    p.add_argument("--scenes", required=True, type=Path, help="training scene directory or set")
    p.add_argument("--config", type=Path, default=None, help="JSON file of training settings")
    p.add_argument("--out", required=True, type=Path, help="parameter file (a .manifest sidecar is added)")
    p.add_argument("--curve", required=True, type=Path, help="loss-curve CSV")
    p.add_argument("--loss-mode", choices=("s3", "spectral_l2"), default="s3", action=_Knob, help="training objective")
    p.add_argument("--iterations", type=_positive_int, default=2000, action=_Knob, help="optimizer steps")
    p.add_argument("--lr", type=float, default=2e-3, action=_Knob, help="initial learning rate")
    p.add_argument("--weight-decay", type=float, default=1e-4, action=_Knob, help="initial decoupled weight decay")
    p.add_argument("--batch-size", type=_positive_int, default=2, action=_Knob, help="scenes per step")
    p.add_argument("--seed", type=int, default=0, action=_Knob, help="initialization and sampling seed")
    p.add_argument("--hidden", type=_positive_int, default=8, action=_Knob, help="hidden channels")
    _add_loss(p)

    p = command("compare", "evaluate spectral-trained and S3-trained models side by side")
    p.add_argument("--spectral", required=True, type=Path, help="parameters trained with the spectral loss")
    p.add_argument("--s3", required=True, type=Path, help="parameters trained with the S3 loss")
    p.add_argument("--scenes", required=True, type=Path, help="test scene directory or set")
    p.add_argument("--out", required=True, type=Path, help="CSV output")
    _add_search(p)

    p = command("report", "summarize eval CSVs as mean +- standard error per method")
    p.add_argument("inputs", nargs="+", type=Path, help="CSV files written by eval")
    p.add_argument("--labels", nargs="+", default=None, help="method names (default: file stems)")
    p.add_argument("--out", type=Path, default=None, help="CSV output (default: stdout)")
    return parser


# ---------------------------------------------------------------- file helpers


def _read_raster(path: Path, bit_depth: int | None = None) -> Raster:
    try:
        raster = load_raster(path)
    except FileNotFoundError:
        raise CliError("missing_file", f"no such raster: {path}", path) from None
    except RasterFormatError as exc:
        raise CliError("bad_format", str(exc), path) from None
    if raster.bit_depth is not None:
        try:
            raster = normalize(raster, bit_depth or raster.bit_depth)
        except ValueError as exc:
            raise CliError("invalid_input", str(exc), path) from None
    return raster


def _read_stack(path: Path, bit_depth=None) -> np.ndarray:
    return np.asarray(_read_raster(path, bit_depth).data, dtype=np.float64)


def _read_plane(path: Path, bit_depth=None) -> np.ndarray:
    data = _read_stack(path, bit_depth)
    if data.shape[0] != 1:
        raise CliError("invalid_input", f"expected a single-band plane, found {data.shape[0]} bands", path)
    return data[0]


def _write_raster(data, path: Path, level: int) -> None:
    save_raster(Raster(np.asarray(data, dtype=np.float64), level=level), path)


def _to_json(value):
    if isinstance(value, dict):
        return {str(k): _to_json(v) for k, v in value.items() if not isinstance(v, np.ndarray)}
    if isinstance(value, (list, tuple)):
        return [_to_json(v) for v in value]
    if isinstance(value, np.generic):
        return value.item()
    return value


def _layer_file(directory: Path, name: str) -> Path | None:
    for suffix in RASTER_SUFFIXES:
        candidate = directory / f"{name}{suffix}"
        if candidate.is_file():
            return candidate
    return None


def _is_scene(directory: Path) -> bool:
    return (directory / SCENE_MANIFEST).is_file() or _layer_file(directory, "p0") is not None


def write_scene(sp: ScenePair, directory: Path) -> None:
    """Write every present layer as a raw raster plus the JSON manifest."""
    layers = {name: getattr(sp, name, None) for name in LAYER_LEVELS}
    layers["truth0"] = sp.meta.get("truth0")
    files = {}
    for name, data in layers.items():
        if data is None:
            continue
        _write_raster(data, directory / f"{name}.raw", LAYER_LEVELS[name])
        files[name] = f"{name}.raw"
    manifest = {"format": "s3scene", "scale": sp.scale, "files": files, "meta": _to_json(sp.meta)}
    atomic_write_text(directory / SCENE_MANIFEST, json.dumps(manifest, sort_keys=True, indent=2) + "\n")


def read_scene(directory: Path, default_scale: int = 4) -> ScenePair:
    manifest_path = directory / SCENE_MANIFEST
    manifest = {}
    if manifest_path.is_file():
        try:
            manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise CliError("bad_format", f"malformed scene manifest ({exc})", manifest_path) from None
    files = manifest.get("files", {})
    layers = {}
    for name in LAYER_LEVELS:
        path = directory / files[name] if name in files else _layer_file(directory, name)
        if path is None:
            continue
        layers[name] = _read_stack(path)
    for name in ("p0", "m1"):
        if name not in layers:
            raise CliError("missing_file", f"scene is missing its {name} raster", directory / f"{name}.raw")
    meta = dict(manifest.get("meta", {}))
    if "truth0" in layers:
        meta["truth0"] = layers.pop("truth0")
    try:
        return ScenePair(
            p0=layers.pop("p0")[0],
            m1=layers.pop("m1"),
            scale=int(manifest.get("scale", default_scale)),
            p1=layers["p1"][0] if "p1" in layers else None,
            m2=layers.get("m2"),
            g0=layers.get("g0"),
            meta=meta,
        )
    except ValueError as exc:
        raise CliError("invalid_input", str(exc), directory) from None


def scene_dirs(root: Path) -> list[Path]:
    if not root.exists():
        raise CliError("missing_file", f"no such scene directory: {root}", root)
    if _is_scene(root):
        return [root]
    found = sorted(p for p in root.iterdir() if p.is_dir() and _is_scene(p))
    if not found:
        raise CliError("missing_file", f"no scenes found under {root}", root)
    return found


def read_scenes(root: Path, default_scale: int = 4):
    dirs = scene_dirs(root)
    return [read_scene(d, default_scale) for d in dirs], [d.name for d in dirs]


def _manifest_path(params_path: Path) -> Path:
    return params_path.with_name(params_path.name + ".manifest")


def _read_params(path: Path):
    manifest = _manifest_path(path)
    for p in (path, manifest):
        if not p.is_file():
            raise CliError("missing_file", f"no such parameter file: {p}", p)
    try:
        return params_from_bytes(path.read_bytes(), manifest.read_text(encoding="utf-8"))
    except ValueError as exc:
        raise CliError("bad_format", str(exc), path) from None


def _emit(text: str, path: Path | None) -> None:
    if path is None:
        sys.stdout.write(text)
    else:
        atomic_write_text(path, text)


def _loss_config(args) -> LossConfig:
    stat = StatConfig(args.window, args.eps)
    return LossConfig(w_a=args.wa, corr=CorrParams(args.gamma, stat), use_corr_map=not args.no_corr_map, stat=stat)


# ---------------------------------------------------------------- commands


def cmd_synth(args) -> None:
    if args.benchmark:
        movers = args.movers if "movers" in getattr(args, "explicit", ()) else 10
        scenes = benchmark_scenes(args.seed, args.count, args.benchmark == "misaligned", args.size, movers)
        for i, sp in enumerate(scenes):
            write_scene(sp, args.out / f"scene{i:03d}")
        return
    movers = tuple(Mover(tuple(args.mover_size), tuple(args.mover_shift)) for _ in range(args.movers))
    cfg = SynthConfig(
        size=args.size,
        scale=args.scale,
        global_shift=tuple(args.shift),
        movers=movers,
        seed=args.seed,
        window=args.window,
        texture=args.texture,
        relief=args.relief,
        buildings=args.buildings,
    )
    write_scene(synth_scene(cfg), args.out)


def cmd_degrade(args) -> None:
    raster = _read_raster(args.input, args.bit_depth)
    try:
        out = degrade(np.asarray(raster.data, dtype=np.float64), args.scale)
    except ValueError as exc:
        raise CliError("invalid_input", str(exc), args.input) from None
    _write_raster(out, args.out, raster.level + 1)


def cmd_pair(args) -> None:
    for directory in scene_dirs(args.scenes):
        write_scene(make_training_pair(read_scene(directory, args.scale)), directory)


def cmd_corr_map(args) -> None:
    ms, pan = _read_stack(args.ms, args.bit_depth), _read_plane(args.pan, args.bit_depth)
    s = corr_map(ms, pan, CorrParams(args.gamma, StatConfig(args.window, args.eps)))
    _write_raster(s.s, args.out, _read_raster(args.pan, args.bit_depth).level)
    if args.heatmap is not None:
        save_heatmap(s.s, args.heatmap, vmax=1.0)


def cmd_loss(args) -> None:
    cfg = _loss_config(args)
    g, m = _read_stack(args.g, args.bit_depth), _read_stack(args.ms, args.bit_depth)
    pan = _read_plane(args.pan, args.bit_depth)
    if args.no_corr_map:
        s = CorrMap.ones(pan.shape)
    elif args.s is not None:
        s = CorrMap(_read_plane(args.s))
    else:
        s = corr_map(m, pan, cfg.corr)
    out = s3_loss(g, m, pan, s, cfg, planes=args.heatmaps is not None)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["l_c", "l_a", "l_s3", "w_a", "use_corr_map"])
    writer.writerow([repr(out.l_c), repr(out.l_a), repr(out.l_s3), repr(cfg.w_a), int(cfg.use_corr_map)])
    _emit(buf.getvalue(), args.out)
    if args.heatmaps is not None:
        save_heatmap(out.c_plane, Path(f"{args.heatmaps}_spectral.png"))
        save_heatmap(out.a_plane, Path(f"{args.heatmaps}_spatial.png"))


def cmd_eval(args) -> None:
    scenes, names = read_scenes(args.scenes)
    if args.params is not None:
        params = _read_params(args.params)
        scenes = [sharpen_scene(params, sp) for sp in scenes]
    elif args.bicubic:
        scenes = [replace(sp, g0=upsample(sp.m1, sp.scale)) for sp in scenes]
    for sp, name in zip(scenes, names):
        if sp.g0 is None:
            raise CliError("missing_file", f"scene {name} has no g0 result", args.scenes / name / "g0.raw")
    report = evaluate_scenes(scenes, TranslationSearch(args.max_shift), args.scc_mode, names)
    atomic_write_text(args.out, report.to_csv())


_TRAIN_FLAGS = {
    "loss_mode": "loss_mode",
    "iterations": "iterations",
    "lr": "lr",
    "weight_decay": "weight_decay",
    "batch_size": "batch_size",
    "seed": "seed",
    "hidden": "hidden",
    "gamma": "gamma",
    "window": "window",
    "eps": "eps",
    "wa": "w_a",
}


def train_config(args) -> TrainConfig:
    """Defaults, then the JSON config file, then explicitly given flags."""
    mapping = {}
    if args.config is not None:
        if not args.config.is_file():
            raise CliError("missing_file", f"no such config file: {args.config}", args.config)
        try:
            loaded = json.loads(args.config.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise CliError("bad_format", f"malformed config ({exc})", args.config) from None
        if not isinstance(loaded, dict):
            raise CliError("bad_format", "config must be a JSON object", args.config)
        mapping.update(loaded)
    explicit = getattr(args, "explicit", set())
    for dest, key in _TRAIN_FLAGS.items():
        if dest in explicit or key not in mapping:
            mapping[key] = getattr(args, dest)
    if "no_corr_map" in explicit or "use_corr_map" not in mapping:
        mapping["use_corr_map"] = not args.no_corr_map
    try:
        return config_from_mapping(mapping)
    except (TypeError, ValueError) as exc:
        raise CliError("invalid_config", str(exc), args.config) from None


def cmd_train_toy(args) -> None:
    cfg = train_config(args)
    scenes, _ = read_scenes(args.scenes)
    result = train(scenes, cfg)
    payload, manifest = params_to_bytes(result.params)
    atomic_write_bytes(args.out, payload)
    atomic_write_text(_manifest_path(args.out), manifest)
    atomic_write_text(args.curve, result.curve_csv())


def cmd_compare(args) -> None:
    spectral, s3 = _read_params(args.spectral), _read_params(args.s3)
    scenes, names = read_scenes(args.scenes)
    reports = compare_modes(scenes, spectral, s3, TranslationSearch(args.max_shift), args.scc_mode, names)
    atomic_write_text(args.out, side_by_side_csv(*reports))


def _read_eval_csv(path: Path) -> MetricReport:
    if not path.is_file():
        raise CliError("missing_file", f"no such CSV: {path}", path)
    report = MetricReport(name=path.stem)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [k for k in ("scene", *METRIC_COLUMNS) if k not in (reader.fieldnames or [])]
        if missing:
            raise CliError("bad_format", f"missing columns {missing}", path)
        for row in reader:
            if row["scene"] in ("mean", "stderr"):
                continue
            try:
                report.add({"scene": row["scene"], **{k: float(row[k]) for k in METRIC_COLUMNS}})
            except ValueError as exc:
                raise CliError("bad_format", str(exc), path) from None
    if not report.rows:
        raise CliError("bad_format", "no scene rows", path)
    return report


def cmd_report(args) -> None:
    labels = args.labels or [p.stem for p in args.inputs]
    if len(labels) != len(args.inputs):
        raise CliError("usage", "--labels must name every input")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["method", *METRIC_COLUMNS, "scenes"])
    for label, path in zip(labels, args.inputs):
        report = _read_eval_csv(path)
        cells = [f"{report.mean(k):.4f} ± {report.stderr(k):.4f}" for k in METRIC_COLUMNS]
        writer.writerow([label, *cells, len(report.rows)])
    _emit(buf.getvalue(), args.out)


COMMANDS = {
    "synth": cmd_synth,
    "degrade": cmd_degrade,
    "pair": cmd_pair,
    "corr-map": cmd_corr_map,
    "loss": cmd_loss,
    "eval": cmd_eval,
    "train-toy": cmd_train_toy,
    "compare": cmd_compare,
    "report": cmd_report,
}


def main(argv=None) -> int:
    try:
        if _threads is not None and not _threads.isdigit():
            raise CliError("usage", f"{THREADS_ENV} must be a positive integer, got {_threads!r}")
        args = build_parser().parse_args(argv)
        COMMANDS[args.command](args)
    except CliError as exc:
        print(exc.line(), file=sys.stderr)
        return 2 if exc.code == "usage" else 1
    except FileNotFoundError as exc:
        print(CliError("missing_file", str(exc), exc.filename).line(), file=sys.stderr)
        return 1
    except TrainingDiverged as exc:
        print(CliError("diverged", str(exc)).line(), file=sys.stderr)
        return 1
    except (ValueError, OSError) as exc:
        print(CliError("invalid_input", str(exc), getattr(exc, "filename", None)).line(), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
