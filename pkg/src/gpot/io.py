"""Binary checkpoints: a JSON header followed by a flat little-endian float64 payload.

Layout on disk::

    8 bytes   header length N (little-endian uint64)
    N bytes   UTF-8 JSON header (must contain "payload_count")
    8*K bytes float64 payload, little-endian
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

_LEN = struct.Struct("<Q")


def save_checkpoint(path, header: dict, payload) -> Path:
    path = Path(path)
    flat = np.ascontiguousarray(np.asarray(payload, dtype="<f8").ravel())
    header = dict(header)
    header["payload_count"] = int(flat.size)
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_LEN.pack(len(raw)))
        fh.write(raw)
        fh.write(flat.tobytes())
    return path


def load_checkpoint(path) -> tuple[dict, np.ndarray]:
    data = Path(path).read_bytes()
    if len(data) < _LEN.size:
        raise ValueError(f"{path}: truncated checkpoint")
    (n,) = _LEN.unpack_from(data)
    header = json.loads(data[_LEN.size : _LEN.size + n].decode("utf-8"))
    payload = np.frombuffer(data[_LEN.size + n :], dtype="<f8").astype(np.float64)
    if payload.size != header.get("payload_count"):
        raise ValueError(
            f"{path}: payload has {payload.size} values, header says {header.get('payload_count')}"
        )
    return header, payload


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
