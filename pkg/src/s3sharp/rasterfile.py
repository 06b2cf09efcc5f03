"""Raster files.

Raw format: ``name.raw`` holds little-endian float32 samples, band-planar
(band 0 rows first), and ``name.hdr`` is a sidecar of ``key=value`` lines::

    format=s3raw
    width=128
    height=128
    bands=3
    level=1
    bit_depth=none

16-bit imagery is read and written as TIFF (any band count, planar) or PNG
(single band). Heatmaps are 8-bit grayscale PNG.
"""

from __future__ import annotations

import io
import os
import tempfile
from pathlib import Path

import numpy as np
import tifffile
from PIL import Image

from .raster import Raster

RAW_DTYPE = np.dtype("<f4")
_HEADER_KEYS = ("format", "width", "height", "bands", "level", "bit_depth")


class RasterFormatError(ValueError):
    """A raster file is missing, malformed, or inconsistent with its header."""


def atomic_write_bytes(path, payload: bytes) -> None:
    """Write ``payload`` to ``path`` through a temp file and rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def infer_format(path) -> str:
    suffix = Path(path).suffix.lower()
    if suffix in (".raw", ".hdr"):
        return "raw"
    if suffix in (".tif", ".tiff"):
        return "tif"
    if suffix == ".png":
        return "png"
    raise RasterFormatError(f"cannot infer raster format from {str(path)!r}")


def header_path(path) -> Path:
    return Path(path).with_suffix(".hdr")


def _format_header(raster: Raster) -> str:
    bit_depth = "none" if raster.bit_depth is None else str(raster.bit_depth)
    lines = [
        "format=s3raw",
        f"width={raster.width}",
        f"height={raster.height}",
        f"bands={raster.bands}",
        f"level={raster.level}",
        f"bit_depth={bit_depth}",
    ]
    return "\n".join(lines) + "\n"


def _parse_header(text: str, source) -> dict:
    fields = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise RasterFormatError(f"{source}:{lineno}: expected key=value, got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        fields[key] = value
    missing = [k for k in _HEADER_KEYS if k not in fields]
    if missing:
        raise RasterFormatError(f"{source}: header missing keys {missing}")
    if fields["format"] != "s3raw":
        raise RasterFormatError(f"{source}: unknown format {fields['format']!r}")
    try:
        parsed = {k: int(fields[k]) for k in ("width", "height", "bands", "level")}
        bd = fields["bit_depth"]
        parsed["bit_depth"] = None if bd.lower() == "none" else int(bd)
    except ValueError as exc:
        raise RasterFormatError(f"{source}: bad numeric header value ({exc})") from None
    if min(parsed["width"], parsed["height"], parsed["bands"]) < 1:
        raise RasterFormatError(f"{source}: dimensions must be positive")
    return parsed


def save_raster(raster: Raster, path, fmt: str | None = None) -> None:
    fmt = fmt or infer_format(path)
    path = Path(path)
    if fmt == "raw":
        samples = np.ascontiguousarray(raster.data, dtype=RAW_DTYPE)
        atomic_write_bytes(path.with_suffix(".raw"), samples.tobytes())
        atomic_write_text(header_path(path), _format_header(raster))
    elif fmt in ("tif", "png"):
        data = np.asarray(raster.data)
        if not np.all((data >= 0) & (data <= 65535) & (data == np.round(data))):
            raise RasterFormatError("16-bit image formats need integer samples in [0, 65535]")
        data = data.astype("<u2")
        buf = io.BytesIO()
        if fmt == "tif":
            tifffile.imwrite(buf, data, photometric="minisblack", planarconfig="separate")
        else:
            if raster.bands != 1:
                raise RasterFormatError(f"PNG holds a single band, raster has {raster.bands}")
            Image.fromarray(data[0]).save(buf, format="PNG")
        atomic_write_bytes(path, buf.getvalue())
    else:
        raise RasterFormatError(f"unknown raster format {fmt!r}")


def load_raster(path, fmt: str | None = None) -> Raster:
    fmt = fmt or infer_format(path)
    path = Path(path)
    if fmt == "raw":
        raw_path, hdr = path.with_suffix(".raw"), header_path(path)
        for p in (raw_path, hdr):
            if not p.is_file():
                raise FileNotFoundError(f"raster file not found: {p}")
        info = _parse_header(hdr.read_text(encoding="utf-8"), hdr)
        payload = raw_path.read_bytes()
        expected = info["bands"] * info["height"] * info["width"] * RAW_DTYPE.itemsize
        if len(payload) != expected:
            kind = "truncated" if len(payload) < expected else "oversized"
            raise RasterFormatError(
                f"{raw_path}: {kind} payload, {len(payload)} bytes, header implies {expected}"
            )
        data = np.frombuffer(payload, dtype=RAW_DTYPE).reshape(
            info["bands"], info["height"], info["width"]
        )
        return Raster(data.copy(), level=info["level"], bit_depth=info["bit_depth"])
    if not path.is_file():
        raise FileNotFoundError(f"raster file not found: {path}")
    if fmt == "tif":
        try:
            data = tifffile.imread(path)
        except Exception as exc:
            raise RasterFormatError(f"{path}: unreadable TIFF ({exc})") from None
    elif fmt == "png":
        try:
            with Image.open(path) as im:
                data = np.array(im)
        except Exception as exc:
            raise RasterFormatError(f"{path}: unreadable PNG ({exc})") from None
    else:
        raise RasterFormatError(f"unknown raster format {fmt!r}")
    if data.ndim == 2:
        data = data[None]
    if data.ndim != 3:
        raise RasterFormatError(f"{path}: expected planar bands, got shape {data.shape}")
    bit_depth = 16 if data.dtype.itemsize == 2 else 8 * data.dtype.itemsize
    return Raster(data.astype(np.uint16 if bit_depth == 16 else data.dtype), bit_depth=bit_depth)


def save_heatmap(plane, path, vmax: float | None = None) -> None:
    """Write a nonnegative plane as an 8-bit grayscale PNG scaled by ``vmax``."""
    plane = np.asarray(plane, dtype=np.float64)
    if vmax is None:
        vmax = float(plane.max()) if plane.size else 1.0
    scaled = np.clip(plane / vmax, 0.0, 1.0) if vmax > 0 else np.zeros_like(plane)
    img = np.round(scaled * 255.0).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(img).save(buf, format="PNG")
    atomic_write_bytes(path, buf.getvalue())
