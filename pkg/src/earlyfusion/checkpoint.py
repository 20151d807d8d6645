"""Versioned binary checkpoints.

Byte layout (all integers little-endian)::

    offset 0   8 bytes   magic  b"EFCKPT\\x00\\x00"
    offset 8   uint32    format version (1)
    offset 12  uint32    header length H in bytes
    offset 16  H bytes   UTF-8 JSON header
    offset 16+H          payload: arrays back to back, C order, little-endian

The header is ``{"config": {...}, "tensors": [{"name", "dtype", "shape",
"offset", "nbytes"}, ...]}`` where ``offset`` is relative to the payload
start and ``dtype`` is a numpy dtype string such as ``"<f4"``.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError, IoError

MAGIC = b"EFCKPT\x00\x00"
VERSION = 1


def encode_checkpoint(arrays: dict[str, np.ndarray], config: dict) -> bytes:
    entries, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = le.tobytes()
        entries.append({"name": name, "dtype": le.dtype.str, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"config": config, "tensors": entries}, sort_keys=True).encode("utf-8")
    return MAGIC + struct.pack("<II", VERSION, len(header)) + header + b"".join(chunks)


def decode_checkpoint(buf: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if len(buf) < 16 or buf[:8] != MAGIC:
        raise FormatError("not a checkpoint (bad magic)")
    version, hlen = struct.unpack("<II", buf[8:16])
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    try:
        header = json.loads(buf[16 : 16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt checkpoint header: {exc}") from exc
    payload = memoryview(buf)[16 + hlen :]
    arrays = {}
    for e in header["tensors"]:
        end = e["offset"] + e["nbytes"]
        if end > len(payload):
            raise FormatError(f"tensor {e['name']!r} runs past end of file")
        arr = np.frombuffer(payload[e["offset"] : end], dtype=np.dtype(e["dtype"]))
        arrays[e["name"]] = arr.reshape(e["shape"]).astype(np.dtype(e["dtype"]).newbyteorder("="))
    return header["config"], arrays


def save_checkpoint(path, arrays: dict[str, np.ndarray], config: dict) -> str:
    """Write the checkpoint and return its SHA-256 hex digest."""
    buf = encode_checkpoint(arrays, config)
    try:
        Path(path).write_bytes(buf)
    except OSError as exc:
        raise IoError(f"cannot write checkpoint {path}: {exc}") from exc
    return hashlib.sha256(buf).hexdigest()


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read checkpoint {path}: {exc}") from exc
    return decode_checkpoint(buf)
