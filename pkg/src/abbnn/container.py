"""Little-endian binary container plumbing shared by the ABNN and ABCK formats.

Layout: 4-byte magic, u32 version, u8 frac_bits/flags fields chosen by the
caller, a body, and a trailing IEEE CRC32 over every preceding byte.
"""
from __future__ import annotations

import struct
import zlib
from contextlib import contextmanager

import numpy as np

from .errors import FormatError, IntegrityError, TruncatedError


class Writer:
    def __init__(self):
        self._parts: list[bytes] = []

    def raw(self, b: bytes):
        self._parts.append(bytes(b))

    def pack(self, fmt: str, *values):
        self._parts.append(struct.pack("<" + fmt, *values))

    def u8(self, v):
        self.pack("B", v)

    def i8(self, v):
        self.pack("b", v)

    def u16(self, v):
        self.pack("H", v)

    def u32(self, v):
        self.pack("I", v)

    def array(self, a: np.ndarray, dtype: str):
        self._parts.append(np.ascontiguousarray(a, dtype=np.dtype(dtype).newbyteorder("<")).tobytes())

    def text(self, s: str):
        b = s.encode("utf-8")
        self.u32(len(b))
        self.raw(b)

    def getvalue(self) -> bytes:
        return b"".join(self._parts)

    def __len__(self):
        return sum(len(p) for p in self._parts)

    def finish(self) -> bytes:
        body = self.getvalue()
        return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


class Reader:
    """Cursor over a byte buffer; reads past ``limit`` raise TruncatedError for the current section."""

    def __init__(self, data: bytes, section: str = "header"):
        self.data = data
        self.pos = 0
        self.limit = len(data)
        self.section = section

    @contextmanager
    def sub(self, section: str, length: int | None = None):
        """Scope reads to a named section, optionally of a fixed byte length."""
        outer_section, outer_limit = self.section, self.limit
        self.section = section
        if length is not None:
            end = self.pos + length
            if end > outer_limit:
                raise TruncatedError(section)
            self.limit = end
        try:
            yield self
            if length is not None and self.pos != self.limit:
                raise FormatError(f"section '{section}' has {self.limit - self.pos} unread trailing bytes")
        finally:
            self.section, self.limit = outer_section, outer_limit

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > self.limit:
            raise TruncatedError(self.section)
        b = self.data[self.pos : self.pos + n]
        self.pos += n
        return b

    def unpack(self, fmt: str):
        fmt = "<" + fmt
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def u8(self):
        return self.unpack("B")[0]

    def i8(self):
        return self.unpack("b")[0]

    def u16(self):
        return self.unpack("H")[0]

    def u32(self):
        return self.unpack("I")[0]

    def array(self, dtype: str, count: int) -> np.ndarray:
        dt = np.dtype(dtype).newbyteorder("<")
        return np.frombuffer(self.take(dt.itemsize * count), dtype=dt).astype(np.dtype(dtype).newbyteorder("="))

    def text(self) -> str:
        n = self.u32()
        try:
            return self.take(n).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"section '{self.section}' holds invalid UTF-8") from exc

    @property
    def remaining(self) -> int:
        return self.limit - self.pos


def split_crc(data: bytes, min_body: int) -> tuple[bytes, int]:
    if len(data) < min_body + 4:
        raise TruncatedError("header")
    return data[:-4], struct.unpack("<I", data[-4:])[0]


def check_crc(body: bytes, stored: int, section: str = "body"):
    found = zlib.crc32(body) & 0xFFFFFFFF
    if found != stored:
        raise IntegrityError(section, stored, found)
