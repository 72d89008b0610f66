"""Canonical byte serialization: fixed field order, little-endian integers,
u32 length prefixes on variable-length byte strings."""

from __future__ import annotations

import hashlib
import struct

DIGEST_SIZE = 32
ZERO_DIGEST = bytes(DIGEST_SIZE)


def digest(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


class DecodeError(ValueError):
    pass


class Writer:
    def __init__(self):
        self._parts: list[bytes] = []

    def u8(self, v: int) -> "Writer":
        self._parts.append(struct.pack("<B", v))
        return self

    def u32(self, v: int) -> "Writer":
        self._parts.append(struct.pack("<I", v))
        return self

    def u64(self, v: int) -> "Writer":
        self._parts.append(struct.pack("<Q", v))
        return self

    def f64(self, v: float) -> "Writer":
        self._parts.append(struct.pack("<d", v))
        return self

    def raw(self, b: bytes) -> "Writer":
        self._parts.append(bytes(b))
        return self

    def blob(self, b: bytes) -> "Writer":
        self.u32(len(b))
        self._parts.append(bytes(b))
        return self

    def text(self, s: str) -> "Writer":
        return self.blob(s.encode("utf-8"))

    def getvalue(self) -> bytes:
        return b"".join(self._parts)


class Reader:
    def __init__(self, data: bytes):
        self._data = memoryview(bytes(data))
        self._pos = 0

    def _take(self, n: int) -> bytes:
        if self._pos + n > len(self._data):
            raise DecodeError(f"truncated input: wanted {n} bytes at offset {self._pos}")
        out = self._data[self._pos:self._pos + n].tobytes()
        self._pos += n
        return out

    def u8(self) -> int:
        return self._take(1)[0]

    def u32(self) -> int:
        return struct.unpack("<I", self._take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self._take(8))[0]

    def f64(self) -> float:
        return struct.unpack("<d", self._take(8))[0]

    def raw(self, n: int) -> bytes:
        return self._take(n)

    def blob(self) -> bytes:
        return self._take(self.u32())

    def text(self) -> str:
        try:
            return self.blob().decode("utf-8")
        except UnicodeDecodeError as exc:
            raise DecodeError(str(exc)) from exc

    def bool(self) -> bool:
        v = self.u8()
        if v > 1:
            raise DecodeError(f"invalid boolean byte {v}")
        return bool(v)

    @property
    def remaining(self) -> int:
        return len(self._data) - self._pos

    def done(self) -> None:
        if self.remaining:
            raise DecodeError(f"{self.remaining} trailing bytes")
