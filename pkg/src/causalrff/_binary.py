# Little-endian binary writer/reader used by the model blob and the wire codec.
import struct

import numpy as np

from .errors import ProtocolError


class Writer:
    def __init__(self):
        self._parts = []

    def u8(self, v):
        self._parts.append(struct.pack("<B", v))

    def u16(self, v):
        self._parts.append(struct.pack("<H", v))

    def u32(self, v):
        self._parts.append(struct.pack("<I", v))

    def i64(self, v):
        self._parts.append(struct.pack("<q", v))

    def f64(self, v):
        self._parts.append(struct.pack("<d", v))

    def raw(self, b):
        self._parts.append(bytes(b))

    def blob(self, b):
        self.u32(len(b))
        self.raw(b)

    def text(self, s):
        self.blob(s.encode("utf-8"))

    def array(self, a):
        """ndim, dims, then float64 data row-major."""
        a = np.ascontiguousarray(a, dtype="<f8")
        self.u8(a.ndim)
        for n in a.shape:
            self.u32(n)
        self.raw(a.tobytes(order="C"))

    def getvalue(self):
        return b"".join(self._parts)


class Reader:
    def __init__(self, buf, offset=0):
        self.buf = memoryview(buf)
        self.pos = offset

    def _take(self, fmt):
        try:
            (v,) = struct.unpack_from(fmt, self.buf, self.pos)
        except struct.error as exc:
            raise ProtocolError(f"truncated payload at byte {self.pos}") from exc
        self.pos += struct.calcsize(fmt)
        return v

    def u8(self):
        return self._take("<B")

    def u16(self):
        return self._take("<H")

    def u32(self):
        return self._take("<I")

    def i64(self):
        return self._take("<q")

    def f64(self):
        return self._take("<d")

    def raw(self, n):
        if self.pos + n > len(self.buf):
            raise ProtocolError(f"truncated payload at byte {self.pos}")
        out = bytes(self.buf[self.pos:self.pos + n])
        self.pos += n
        return out

    def blob(self):
        return self.raw(self.u32())

    def text(self):
        return self.blob().decode("utf-8")

    def array(self):
        ndim = self.u8()
        shape = tuple(self.u32() for _ in range(ndim))
        count = int(np.prod(shape)) if shape else 1
        data = self.raw(8 * count)
        return np.frombuffer(data, dtype="<f8").astype(np.float64).reshape(shape)

    def done(self):
        return self.pos >= len(self.buf)
