"""Checkpoint container: a flat list of ``(name, shape, values)`` records.

File layout (JSON, UTF-8)::

    {"format": "mgalign-checkpoint", "version": 1,
     "meta": {...},
     "records": [{"name": str, "shape": [int, ...], "values": [hex, ...]}, ...]}

Values are float64 in row-major order, each written with ``float.hex`` so
that a save/load round trip is bit-exact.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

FORMAT = "mgalign-checkpoint"
VERSION = 1


def save_checkpoint(path, state: dict[str, np.ndarray], meta: dict | None = None) -> None:
    records = []
    for name in sorted(state):
        arr = np.asarray(state[name], dtype=np.float64)
        records.append({"name": name, "shape": list(arr.shape),
                        "values": [float(v).hex() for v in arr.reshape(-1)]})
    doc = {"format": FORMAT, "version": VERSION, "meta": meta or {}, "records": records}
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != FORMAT:
        raise ValueError(f"{path}: not an {FORMAT} file")
    if doc.get("version") != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {doc.get('version')}")
    state = {}
    for rec in doc["records"]:
        values = np.array([float.fromhex(v) for v in rec["values"]], dtype=np.float64)
        state[rec["name"]] = values.reshape(rec["shape"])
    return state, doc.get("meta", {})
