"""Manifest + payload file pairs.

Every on-disk artifact is a UTF-8 JSON manifest next to a raw little-endian
binary payload. The manifest records the payload file name, a format
version, byte offsets of each section, and whatever metadata the artifact
needs. Arrays are written C-order with explicit little-endian dtypes so the
bytes are identical across platforms.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1

_DTYPES = {"f8": "<f8", "u1": "u1"}


def dump_json(obj, path) -> None:
    """Write canonical JSON: sorted keys, 2-space indent, trailing newline."""
    text = json.dumps(obj, sort_keys=True, indent=2)
    Path(path).write_text(text + "\n", encoding="utf-8")


def load_json(path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def write_payload(path, sections) -> dict:
    """Write named arrays back to back; return {name: {offset, dtype, shape}}.

    ``sections`` is an ordered list of (name, array, dtype_tag) with
    dtype_tag in {"f8", "u1"}.
    """
    layout = {}
    offset = 0
    with open(path, "wb") as fh:
        for name, arr, tag in sections:
            data = np.ascontiguousarray(arr).astype(_DTYPES[tag]).tobytes(order="C")
            fh.write(data)
            layout[name] = {"offset": offset, "dtype": tag, "shape": list(np.shape(arr))}
            offset += len(data)
    return layout


def read_payload(path, layout) -> dict:
    """Read every section described by ``layout`` back into arrays."""
    raw = Path(path).read_bytes()
    out = {}
    for name, meta in layout.items():
        dtype = np.dtype(_DTYPES[meta["dtype"]])
        shape = tuple(meta["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = meta["offset"]
        arr = np.frombuffer(raw, dtype=dtype, count=count, offset=start)
        out[name] = arr.reshape(shape).astype(np.float64 if meta["dtype"] == "f8" else np.uint8)
    return out
