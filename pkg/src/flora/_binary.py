"""Little-endian binary helpers used by every on-disk format."""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .errors import FormatError


class Writer:
    def __init__(self):
        self._parts: list[bytes] = []

    def magic(self, tag: bytes) -> None:
        assert len(tag) == 4
        self._parts.append(tag)

    def u8(self, v: int) -> None:
        self._parts.append(struct.pack("<B", v))

    def u32(self, v: int) -> None:
        self._parts.append(struct.pack("<I", v))

    def u64(self, v: int) -> None:
        self._parts.append(struct.pack("<Q", v))

    def array(self, a: np.ndarray, dtype: str) -> None:
        self._parts.append(np.ascontiguousarray(a, dtype=dtype).tobytes())

    def raw(self, b: bytes) -> None:
        self._parts.append(b)

    def getvalue(self) -> bytes:
        return b"".join(self._parts)


class Reader:
    """Cursor over a byte buffer; every failure reports the byte offset."""

    def __init__(self, buf: bytes, offset: int = 0, path=None):
        self.buf = memoryview(buf)
        self.offset = offset
        self.path = path

    def fail(self, message: str, offset: int | None = None):
        raise FormatError(message, self.offset if offset is None else offset, self.path)

    def _take(self, n: int) -> memoryview:
        if n < 0 or self.offset + n > len(self.buf):
            self.fail(f"truncated input: need {n} bytes, {len(self.buf) - self.offset} left")
        chunk = self.buf[self.offset:self.offset + n]
        self.offset += n
        return chunk

    def magic(self, tag: bytes) -> None:
        start = self.offset
        got = bytes(self._take(4))
        if got != tag:
            self.fail(f"bad magic {got!r}, expected {tag!r}", start)

    def version(self, supported: int) -> int:
        start = self.offset
        v = self.u32()
        if v != supported:
            self.fail(f"unsupported format version {v}", start)
        return v

    def u8(self) -> int:
        return struct.unpack("<B", self._take(1))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self._take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self._take(8))[0]

    def array(self, dtype: str, count: int) -> np.ndarray:
        itemsize = np.dtype(dtype).itemsize
        chunk = self._take(count * itemsize)
        return np.frombuffer(chunk, dtype=dtype, count=count).copy()

    def at_end(self) -> None:
        if self.offset != len(self.buf):
            self.fail(f"{len(self.buf) - self.offset} trailing bytes")


def atomic_write(path, data: bytes | str) -> None:
    """Write via a temp file in the target directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, mode) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_bytes(path) -> bytes:
    with open(path, "rb") as fh:
        return fh.read()
