"""Checkpoint container: training state persisted as one binary file.

Layout: magic "CVTR", u32 format version, a text header of key=value lines
(configs, epoch, best-metric bookkeeping), then named flat buffers as
(u16 name length, name, u64 element count, u8 precision tag, little-endian
raw values), and a trailing 64-bit checksum over all preceding bytes.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import IntegrityError, UnsupportedVersionError
from .fileio import Reader, digest64, format_text_header, parse_text_header, verify_checksum

MAGIC = b"CVTR"
VERSION = 1

_TAG_OF_DTYPE = {"float32": 1, "float64": 2, "int64": 3, "uint8": 4}
_DTYPE_OF_TAG = {1: "<f4", 2: "<f8", 3: "<i8", 4: "u1"}


@dataclass
class Checkpoint:
    header: dict = field(default_factory=dict)
    buffers: dict = field(default_factory=dict)  # name -> flat ndarray

    def get_int(self, key: str) -> int:
        return int(self.header[key])

    def get_float(self, key: str) -> float:
        return float(self.header[key])


def checkpoint_save(ckpt: Checkpoint, path) -> None:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    header = format_text_header(ckpt.header)
    parts.append(struct.pack("<Q", len(header)))
    parts.append(header)
    parts.append(struct.pack("<I", len(ckpt.buffers)))
    for name, arr in ckpt.buffers.items():
        arr = np.asarray(arr)
        tag = _TAG_OF_DTYPE.get(arr.dtype.name)
        if tag is None:
            raise TypeError(f"buffer {name!r} has unsupported dtype {arr.dtype}")
        raw = np.ascontiguousarray(arr.reshape(-1), dtype=_DTYPE_OF_TAG[tag]).tobytes()
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<QB", arr.size, tag))
        parts.append(raw)
    body = b"".join(parts)
    Path(path).write_bytes(body + digest64(body))


def checkpoint_load(path) -> Checkpoint:
    blob = Path(path).read_bytes()
    name = str(path)
    body = verify_checksum(blob, name)
    r = Reader(body, name)
    if r.take(4) != MAGIC:
        raise IntegrityError(f"{name}: bad magic, not a checkpoint file")
    version = r.u32()
    if version != VERSION:
        raise UnsupportedVersionError(f"{name}: format version {version}, expected {VERSION}")
    header = parse_text_header(r.take(r.u64()), name)
    buffers = {}
    for _ in range(r.u32()):
        buf_name = r.take(r.u16()).decode("utf-8")
        count = r.u64()
        tag = r.u8()
        if tag not in _DTYPE_OF_TAG:
            raise IntegrityError(f"{name}: unknown precision tag {tag}")
        dtype = np.dtype(_DTYPE_OF_TAG[tag])
        raw = r.take(count * dtype.itemsize)
        buffers[buf_name] = np.frombuffer(raw, dtype=dtype).copy()
    r.expect_consumed()
    return Checkpoint(header=header, buffers=buffers)
