"""Little-endian binary containers shared by checkpoints, artifacts and datasets.

Every file is ``magic (8 bytes) | u32 format version | body | u32 CRC32``
where the CRC covers all preceding bytes.
"""
from __future__ import annotations

import hashlib
import json
import struct
import zlib
from pathlib import Path

import numpy as np


class FormatError(ValueError):
    pass


class UnsupportedVersionError(FormatError):
    pass


def seal(magic: bytes, version: int, body: bytes) -> bytes:
    assert len(magic) == 8
    head = magic + struct.pack("<I", version) + body
    return head + struct.pack("<I", zlib.crc32(head) & 0xFFFFFFFF)


def open_sealed(magic: bytes, data: bytes, max_version: int) -> tuple[int, bytes]:
    if len(data) < 16:
        raise FormatError("file truncated")
    if data[:8] != magic:
        raise FormatError(f"bad magic {data[:8]!r}, expected {magic!r}")
    (crc,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(data[:-4]) & 0xFFFFFFFF != crc:
        raise FormatError("CRC32 mismatch (file corrupted or truncated)")
    (version,) = struct.unpack("<I", data[8:12])
    if version > max_version:
        raise UnsupportedVersionError(f"format version {version} is newer than supported {max_version}")
    return version, data[12:-4]


class Writer:
    def __init__(self):
        self._parts: list[bytes] = []

    def u32(self, v: int):
        self._parts.append(struct.pack("<I", v))

    def u64(self, v: int):
        self._parts.append(struct.pack("<Q", v))

    def blob(self, b: bytes):
        self.u64(len(b))
        self._parts.append(b)

    def text(self, s: str):
        self.blob(s.encode("utf-8"))

    def json(self, obj):
        self.text(json.dumps(obj, sort_keys=True, separators=(",", ":")))

    def f64(self, arr):
        arr = np.ascontiguousarray(arr, dtype="<f8")
        self._parts.append(arr.tobytes())

    def array(self, arr, dtype="<f8"):
        """Length-prefixed n-d array: u32 ndim, u64 dims, raw data."""
        arr = np.ascontiguousarray(arr, dtype=dtype)
        self.u32(arr.ndim)
        for n in arr.shape:
            self.u64(n)
        self._parts.append(arr.tobytes())

    def getvalue(self) -> bytes:
        return b"".join(self._parts)


class Reader:
    def __init__(self, data: bytes):
        self._data = memoryview(data)
        self._pos = 0

    def _take(self, n: int) -> bytes:
        if self._pos + n > len(self._data):
            raise FormatError("unexpected end of data")
        out = self._data[self._pos:self._pos + n]
        self._pos += n
        return bytes(out)

    def u32(self) -> int:
        return struct.unpack("<I", self._take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self._take(8))[0]

    def blob(self) -> bytes:
        return self._take(self.u64())

    def text(self) -> str:
        try:
            return self.blob().decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError("header is not valid UTF-8") from exc

    def json(self):
        try:
            return json.loads(self.text())
        except json.JSONDecodeError as exc:
            raise FormatError("header is not valid JSON") from exc

    def f64(self, count: int) -> np.ndarray:
        return np.frombuffer(self._take(8 * count), dtype="<f8").astype(np.float64)

    def array(self, dtype="<f8") -> np.ndarray:
        ndim = self.u32()
        if ndim > 8:
            raise FormatError(f"implausible array rank {ndim}")
        shape = tuple(self.u64() for _ in range(ndim))
        itemsize = np.dtype(dtype).itemsize
        count = int(np.prod(shape, dtype=np.int64))
        raw = self._take(itemsize * count)
        return np.frombuffer(raw, dtype=dtype).reshape(shape).astype(np.dtype(dtype).newbyteorder("="))

    def done(self):
        if self._pos != len(self._data):
            raise FormatError(f"{len(self._data) - self._pos} trailing bytes")


def write_file(path, data: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()
