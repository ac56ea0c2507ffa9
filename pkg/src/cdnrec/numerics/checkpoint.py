"""Single-file parameter checkpoints.

Layout (all integers little-endian)::

    8 bytes   magic  b"CDNCKPT1"
    8 bytes   uint64 header length H
    H bytes   UTF-8 JSON header:
                {"arrays": [{"name", "shape", "offset", "nbytes"}, ...],
                 "meta": {...}}
    ...       raw float64 ('<f8', C order) array payloads; ``offset`` counts
              from the first payload byte

Arrays are written in sorted name order and the header is serialized with
sorted keys, so identical contents give identical bytes.
"""
from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"CDNCKPT1"


def save_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> Path:
    path = Path(path)
    entries = []
    payloads = []
    offset = 0
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name], dtype="<f8")
        entries.append({"name": name, "shape": list(a.shape), "offset": offset, "nbytes": a.nbytes})
        payloads.append(a.tobytes())
        offset += a.nbytes
    header = json.dumps({"arrays": entries, "meta": meta or {}}, sort_keys=True).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for chunk in payloads:
            fh.write(chunk)
    os.replace(tmp, path)
    return path


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16 : 16 + hlen].decode("utf-8"))
    base = 16 + hlen
    arrays = {}
    for e in header["arrays"]:
        start = base + e["offset"]
        buf = data[start : start + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(buf, dtype="<f8").reshape(e["shape"]).astype(np.float64)
    return arrays, header["meta"]
