"""Framework-neutral checkpoint files.

``model.bin`` holds the magic ``PZOO``, a little-endian u32 format version,
a u64 parameter count and then the parameters as little-endian float32 in
layout order. ``layout.json`` next to it describes how the flat vector maps
onto layers.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .nn import LayoutEntry, ParameterVector

MAGIC = b"PZOO"
VERSION = 1
_HEADER = struct.Struct("<4sIQ")


class CheckpointFormatError(ValueError):
    """Wrong magic or unsupported version."""


class CheckpointCorruptError(ValueError):
    """File length or parameter count does not match the sidecar layout."""


def quantize(params: ParameterVector) -> ParameterVector:
    """The vector as it will read back from disk (float32 at rest)."""
    return params.with_values(params.values.astype("<f4").astype(np.float64))


def to_bytes(params: ParameterVector) -> bytes:
    if len(params) < 1:
        raise ValueError("refusing to write an empty parameter vector")
    return _HEADER.pack(MAGIC, VERSION, len(params)) + params.values.astype("<f4").tobytes()


def save_checkpoint(directory: str | Path, params: ParameterVector) -> Path:
    """Write ``model.bin`` and ``layout.json`` into ``directory``."""
    directory = Path(directory)
    payload = to_bytes(params)
    directory.mkdir(parents=True, exist_ok=True)
    layout = {"count": len(params), "entries": params.layout_json()}
    (directory / "layout.json").write_text(json.dumps(layout, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    (directory / "model.bin").write_bytes(payload)
    return directory


def load_checkpoint(directory: str | Path) -> ParameterVector:
    directory = Path(directory)
    sidecar = json.loads((directory / "layout.json").read_text(encoding="utf-8"))
    blob = (directory / "model.bin").read_bytes()
    if len(blob) < _HEADER.size:
        raise CheckpointCorruptError(f"{directory}: file shorter than header ({len(blob)} bytes)")
    magic, version, count = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise CheckpointFormatError(f"{directory}: bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointFormatError(f"{directory}: unsupported version {version}")
    if count != sidecar["count"]:
        raise CheckpointCorruptError(f"{directory}: header says {count} parameters, layout says {sidecar['count']}")
    if len(blob) != _HEADER.size + 4 * count:
        raise CheckpointCorruptError(f"{directory}: expected {_HEADER.size + 4 * count} bytes, found {len(blob)}")
    values = np.frombuffer(blob, dtype="<f4", offset=_HEADER.size).astype(np.float64)
    layout = tuple(LayoutEntry(e["layer"], e["kind"], tuple(e["shape"]), e["offset"]) for e in sidecar["entries"])
    return ParameterVector(values, layout)
