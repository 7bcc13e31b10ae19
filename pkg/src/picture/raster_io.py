"""Raw float32 rasters with a JSON sidecar.

``name.f32`` holds the row-major little-endian payload and ``name.json``
describes it::

    {"shape": [rows, cols], "dtype": "f32", "byte_order": "little",
     "semantic": "strain", "spacing": [1.0, 1.0], "frequencies": null}

The two files are paired by their common stem.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

SEMANTICS = ("rf", "disp_axial", "disp_lateral", "strain", "epr")
_DTYPE = np.dtype("<f4")


class RasterFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Raster:
    data: np.ndarray
    header: dict

    @property
    def spacing(self) -> tuple[float, float]:
        sp = self.header.get("spacing") or (1.0, 1.0)
        return float(sp[0]), float(sp[1])

    @property
    def frequencies(self) -> dict | None:
        return self.header.get("frequencies")


def _stem(path) -> Path:
    p = Path(path)
    return p.with_suffix("") if p.suffix in (".f32", ".json") else p


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def write_raster(path, data, semantic: str, spacing=(1.0, 1.0), frequencies=None) -> tuple[Path, Path]:
    """Write ``data`` as ``<stem>.f32`` + ``<stem>.json``; returns both paths."""
    if semantic not in SEMANTICS:
        raise RasterFormatError(f"unknown semantic {semantic!r}; expected one of {SEMANTICS}")
    arr = np.asarray(data)
    if arr.ndim != 2:
        raise RasterFormatError("rasters must be 2D")
    stem = _stem(path)
    payload = stem.with_suffix(".f32")
    sidecar = stem.with_suffix(".json")
    header = {
        "shape": [int(arr.shape[0]), int(arr.shape[1])],
        "dtype": "f32",
        "byte_order": "little",
        "semantic": semantic,
        "spacing": [float(spacing[0]), float(spacing[1])],
        "frequencies": frequencies,
    }
    atomic_write_bytes(payload, np.ascontiguousarray(arr, dtype=_DTYPE).tobytes())
    atomic_write_text(sidecar, dumps(header))
    return payload, sidecar


def read_raster(path) -> Raster:
    stem = _stem(path)
    sidecar = stem.with_suffix(".json")
    try:
        header = json.loads(sidecar.read_text())
    except json.JSONDecodeError as exc:
        raise RasterFormatError(f"{sidecar}: invalid JSON sidecar ({exc})") from exc
    if header.get("dtype") != "f32" or header.get("byte_order") != "little":
        raise RasterFormatError(f"{sidecar}: only little-endian f32 payloads are supported")
    payload = stem.with_suffix(".f32")
    raw = payload.read_bytes()
    rows, cols = (int(v) for v in header["shape"])
    if len(raw) != rows * cols * 4:
        raise RasterFormatError(
            f"{payload}: {len(raw)} bytes does not match shape {rows}x{cols} (expected {rows * cols * 4})"
        )
    data = np.frombuffer(raw, dtype=_DTYPE).reshape(rows, cols).copy()
    return Raster(data, header)


def git_blob_hash(data: bytes) -> str:
    """Content hash computed the way ``git hash-object`` does."""
    h = hashlib.sha1()
    h.update(b"blob %d\0" % len(data))
    h.update(data)
    return h.hexdigest()

