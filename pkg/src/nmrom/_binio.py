"""Little-endian binary read/write helpers with byte-offset error reporting."""

import json
import struct

import numpy as np

from .errors import FormatError

_U64 = struct.Struct("<Q")
# refuse element counts whose byte size could not exist on disk
MAX_ELEMENTS = 1 << 40


class Reader:
    def __init__(self, buf):
        self.buf = memoryview(buf)
        self.pos = 0

    def _take(self, n, what):
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated file while reading {what}", self.pos)
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def magic(self, expected):
        start = self.pos
        got = bytes(self._take(len(expected), "magic"))
        if got != expected:
            raise FormatError(f"bad magic {got!r}, expected {expected!r}", start)

    def u64(self, what="integer"):
        return _U64.unpack(self._take(8, what))[0]

    def count(self, what, limit=MAX_ELEMENTS):
        start = self.pos
        n = self.u64(what)
        if n > limit:
            raise FormatError(f"{what} = {n} exceeds limit {limit}", start)
        return n

    def f64_array(self, n, what):
        if n > MAX_ELEMENTS:
            raise FormatError(f"{what} element count {n} overflows", self.pos)
        return np.frombuffer(self._take(8 * n, what), dtype="<f8").astype(np.float64)

    def u64_array(self, n, what):
        if n > MAX_ELEMENTS:
            raise FormatError(f"{what} element count {n} overflows", self.pos)
        return np.frombuffer(self._take(8 * n, what), dtype="<u8").astype(np.int64)

    def text(self, what):
        n = self.count(f"{what} length", limit=1 << 30)
        start = self.pos
        raw = bytes(self._take(n, what))
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"{what} is not UTF-8", start) from exc

    def json(self, what):
        start = self.pos
        raw = self.text(what)
        try:
            return json.loads(raw)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{what} is not valid JSON", start) from exc

    def end(self):
        if self.pos != len(self.buf):
            raise FormatError("trailing bytes after end of data", self.pos)


class Writer:
    def __init__(self):
        self.parts = []

    def raw(self, b):
        self.parts.append(bytes(b))

    def u64(self, n):
        self.parts.append(_U64.pack(int(n)))

    def f64_array(self, a):
        self.parts.append(np.ascontiguousarray(a, dtype="<f8").tobytes())

    def u64_array(self, a):
        self.parts.append(np.ascontiguousarray(a, dtype="<u8").tobytes())

    def text(self, s):
        raw = s.encode("utf-8")
        self.u64(len(raw))
        self.parts.append(raw)

    def json(self, obj):
        self.text(json.dumps(obj, sort_keys=True))

    def getvalue(self):
        return b"".join(self.parts)
