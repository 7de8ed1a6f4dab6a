"""Little-endian binary helpers for dataset and checkpoint files."""

import struct
from typing import Tuple

import numpy as np

from services.errors import FormatError


class BinaryWriter:
    def __init__(self) -> None:
        self._chunks: list[bytes] = []

    def raw(self, data: bytes) -> None:
        self._chunks.append(data)

    def u8(self, value: int) -> None:
        self._chunks.append(struct.pack("<B", value))

    def u16(self, value: int) -> None:
        self._chunks.append(struct.pack("<H", value))

    def u32(self, value: int) -> None:
        self._chunks.append(struct.pack("<I", value))

    def u64(self, value: int) -> None:
        self._chunks.append(struct.pack("<Q", value))

    def i64(self, value: int) -> None:
        self._chunks.append(struct.pack("<q", value))

    def f64(self, value: float) -> None:
        self._chunks.append(struct.pack("<d", value))

    def text(self, value: str, width: str = "u16") -> None:
        data = value.encode("utf-8")
        getattr(self, width)(len(data))
        self._chunks.append(data)

    def array(self, values: np.ndarray, dtype: str = "<f8") -> None:
        self._chunks.append(np.ascontiguousarray(values, dtype=dtype).tobytes())

    def getvalue(self) -> bytes:
        return b"".join(self._chunks)


class BinaryReader:
    """Cursor over a byte buffer; every short read becomes a FormatError."""

    def __init__(self, data: bytes, label: str) -> None:
        self._data = data
        self._pos = 0
        self._label = label

    def take(self, n: int) -> bytes:
        end = self._pos + n
        if n < 0 or end > len(self._data):
            raise FormatError(
                f"{self._label}: truncated at byte {self._pos} "
                f"(needed {n} more bytes, {len(self._data) - self._pos} available)"
            )
        chunk = self._data[self._pos:end]
        self._pos = end
        return chunk

    def _unpack(self, fmt: str) -> Tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def u8(self) -> int:
        return self._unpack("<B")[0]

    def u16(self) -> int:
        return self._unpack("<H")[0]

    def u32(self) -> int:
        return self._unpack("<I")[0]

    def u64(self) -> int:
        return self._unpack("<Q")[0]

    def i64(self) -> int:
        return self._unpack("<q")[0]

    def f64(self) -> float:
        return self._unpack("<d")[0]

    def text(self, width: str = "u16") -> str:
        n = getattr(self, width)()
        try:
            return self.take(n).decode("utf-8")
        except UnicodeDecodeError as e:
            raise FormatError(f"{self._label}: invalid UTF-8 text: {e}")

    def array(self, shape: Tuple[int, ...], dtype: str = "<f8") -> np.ndarray:
        itemsize = np.dtype(dtype).itemsize
        count = int(np.prod(shape)) if shape else 1
        buf = self.take(count * itemsize)
        return np.frombuffer(buf, dtype=dtype).astype(np.float64 if dtype == "<f8" else dtype).reshape(shape)

    def expect_magic(self, magic: bytes) -> None:
        found = self.take(len(magic))
        if found != magic:
            raise FormatError(f"{self._label}: bad magic {found!r}, expected {magic!r}")

    def expect_version(self, version: int) -> None:
        found = self.u16()
        if found != version:
            raise FormatError(f"{self._label}: version mismatch, found {found}, expected {version}")

    def at_end(self) -> bool:
        return self._pos == len(self._data)
