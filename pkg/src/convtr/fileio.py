"""Helpers shared by the binary file containers (checkpoints, scenes)."""

from __future__ import annotations

import hashlib
import struct

from .errors import IntegrityError

CHECKSUM_BYTES = 8


def digest64(payload: bytes) -> bytes:
    return hashlib.blake2b(payload, digest_size=CHECKSUM_BYTES).digest()


class Reader:
    """Cursor over an in-memory file image; any overrun is an integrity error."""

    def __init__(self, blob: bytes, name: str):
        self.blob = blob
        self.pos = 0
        self.name = name

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.blob):
            raise IntegrityError(f"{self.name}: truncated (wanted {n} bytes at {self.pos})")
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def expect_consumed(self) -> None:
        if self.pos != len(self.blob):
            raise IntegrityError(f"{self.name}: {len(self.blob) - self.pos} trailing bytes")


def verify_checksum(blob: bytes, name: str) -> bytes:
    """Split off and verify the trailing checksum; returns the body."""
    if len(blob) < CHECKSUM_BYTES:
        raise IntegrityError(f"{name}: file shorter than its checksum")
    body, tail = blob[:-CHECKSUM_BYTES], blob[-CHECKSUM_BYTES:]
    if digest64(body) != tail:
        raise IntegrityError(f"{name}: checksum mismatch")
    return body


def parse_text_header(raw: bytes, name: str) -> dict:
    header = {}
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise IntegrityError(f"{name}: header is not valid UTF-8") from exc
    for line in text.splitlines():
        if not line.strip():
            continue
        if "=" not in line:
            raise IntegrityError(f"{name}: malformed header line {line!r}")
        key, value = line.split("=", 1)
        header[key.strip()] = value.strip()
    return header


def format_text_header(header: dict) -> bytes:
    lines = [f"{k}={header[k]}" for k in sorted(header)]
    return ("\n".join(lines) + "\n").encode("utf-8")
