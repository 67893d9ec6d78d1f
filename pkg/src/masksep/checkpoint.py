"""Versioned checkpoint container: JSON wrapping base64 raw array bytes.

Round-trips are bit-exact because array payloads are the little-endian raw
bytes, not decimal renderings. The same container holds separator models,
alignment heads and audio-embedder parameters, distinguished by ``kind``.
"""

from __future__ import annotations

import base64
import json
from pathlib import Path

import numpy as np

MAGIC = "masksep-checkpoint"
VERSION = 1


def _encode_array(arr: np.ndarray) -> dict:
    arr = np.ascontiguousarray(arr)
    le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
    return {
        "dtype": le.dtype.str,
        "shape": list(arr.shape),
        "data": base64.b64encode(le.tobytes()).decode("ascii"),
    }


def _decode_array(obj: dict) -> np.ndarray:
    raw = base64.b64decode(obj["data"])
    arr = np.frombuffer(raw, dtype=np.dtype(obj["dtype"]))
    return arr.reshape(obj["shape"]).copy()


def save_checkpoint(path, kind: str, hparams: dict, arrays: dict) -> None:
    payload = {
        "container": MAGIC,
        "version": VERSION,
        "kind": kind,
        "hparams": hparams,
        "arrays": {name: _encode_array(a) for name, a in sorted(arrays.items())},
    }
    Path(path).write_text(json.dumps(payload, sort_keys=True, indent=1))


def load_checkpoint(path):
    """Returns (kind, hparams, arrays)."""
    payload = json.loads(Path(path).read_text())
    if payload.get("container") != MAGIC:
        raise ValueError(f"{path} is not a recognized checkpoint file")
    if payload.get("version") != VERSION:
        raise ValueError(
            f"{path}: unsupported checkpoint version {payload.get('version')}"
        )
    arrays = {name: _decode_array(obj) for name, obj in payload["arrays"].items()}
    return payload["kind"], payload["hparams"], arrays
