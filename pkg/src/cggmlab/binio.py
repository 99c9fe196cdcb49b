"""Little-endian binary read/write helpers shared by the checkpoint and dataset formats."""

import json
import struct

import numpy as np

from .errors import FormatError, UnsupportedVersionError


class Writer:
    def __init__(self):
        self._parts = []

    def raw(self, b: bytes):
        self._parts.append(b)

    def u8(self, v):
        self._parts.append(struct.pack("<B", v))

    def u16(self, v):
        self._parts.append(struct.pack("<H", v))

    def u32(self, v):
        self._parts.append(struct.pack("<I", v))

    def text(self, s: str):
        b = s.encode("utf-8")
        self.u16(len(b))
        self.raw(b)

    def record(self, obj):
        """JSON record with sorted keys, u32 length prefix."""
        b = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")
        self.u32(len(b))
        self.raw(b)

    def f64_array(self, arr, ndim=None):
        """u32 shape prefix (one u32 per axis) followed by float64 data."""
        a = np.ascontiguousarray(arr, dtype="<f8")
        if ndim is not None and a.ndim != ndim:
            raise ValueError(f"expected rank {ndim}, got {a.ndim}")
        for n in a.shape:
            self.u32(n)
        self.raw(a.tobytes())

    def u32_array(self, arr):
        a = np.ascontiguousarray(arr, dtype="<u4")
        self.u32(a.size)
        self.raw(a.tobytes())

    def getvalue(self) -> bytes:
        return b"".join(self._parts)


class Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def _take(self, n, what):
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated file while reading {what}", self.pos)
        b = self.buf[self.pos:self.pos + n]
        self.pos += n
        return b

    def magic(self, expected: bytes):
        got = self._take(len(expected), "magic")
        if got != expected:
            raise FormatError(f"bad magic {got!r}, expected {expected!r}", 0)

    def version(self, supported: int):
        start = self.pos
        v = self.u16("version")
        if v != supported:
            raise UnsupportedVersionError(f"unsupported format version {v} (supported: {supported})", start)
        return v

    def u8(self, what="u8"):
        return struct.unpack("<B", self._take(1, what))[0]

    def u16(self, what="u16"):
        return struct.unpack("<H", self._take(2, what))[0]

    def u32(self, what="u32"):
        return struct.unpack("<I", self._take(4, what))[0]

    def text(self, what="string"):
        n = self.u16(what)
        start = self.pos
        try:
            return self._take(n, what).decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError(f"invalid utf-8 in {what}", start) from None

    def record(self, what="record"):
        n = self.u32(what)
        start = self.pos
        try:
            return json.loads(self._take(n, what).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"malformed {what}: {exc}", start) from None

    def f64_array(self, ndim, what="array"):
        shape = tuple(self.u32(f"{what} shape") for _ in range(ndim))
        count = int(np.prod(shape)) if shape else 1
        data = self._take(8 * count, what)
        return np.frombuffer(data, dtype="<f8").astype(np.float64).reshape(shape)

    def u32_array(self, what="index array"):
        n = self.u32(what)
        data = self._take(4 * n, what)
        return np.frombuffer(data, dtype="<u4").astype(np.int64)

    def expect_end(self):
        if self.pos != len(self.buf):
            raise FormatError(f"{len(self.buf) - self.pos} trailing bytes", self.pos)
