"""DPLX1 named-tensor container.

Layout (all integers little-endian):

    magic   5 bytes  b"DPLX1"
    endian  1 byte   b"L"
    count   uint32
    then per tensor:
        name_len uint16, name utf-8 bytes
        dtype    1 byte (b"f" float32, b"d" float64, b"q" int64)
        rank     uint8
        extents  rank * uint32
        payload  raw little-endian scalars, C order

Round-trips are bit-exact; any structural damage raises FormatError.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import FormatError

MAGIC = b"DPLX1"
_DTYPE_CODES = {
    np.dtype("<f4"): b"f",
    np.dtype("<f8"): b"d",
    np.dtype("<i8"): b"q",
}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


def save_tensors(path, tensors: dict[str, np.ndarray]) -> None:
    chunks = [MAGIC, b"L", struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<")
        if dt not in _DTYPE_CODES:
            raise FormatError(f"unsupported dtype {arr.dtype} for tensor {name!r}")
        nb = name.encode("utf-8")
        if len(nb) > 0xFFFF:
            raise FormatError(f"tensor name too long ({len(nb)} bytes)")
        chunks.append(struct.pack("<H", len(nb)))
        chunks.append(nb)
        chunks.append(_DTYPE_CODES[dt])
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise FormatError("truncated tensor file")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out


def load_tensors(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        rd = _Reader(fh.read())
    if rd.take(5) != MAGIC:
        raise FormatError(f"bad magic in {path}")
    if rd.take(1) != b"L":
        raise FormatError(f"unsupported endianness tag in {path}")
    (count,) = struct.unpack("<I", rd.take(4))
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", rd.take(2))
        name = rd.take(name_len).decode("utf-8")
        code = rd.take(1)
        if code not in _CODE_DTYPES:
            raise FormatError(f"unknown dtype code {code!r} for tensor {name!r}")
        dt = _CODE_DTYPES[code]
        (rank,) = struct.unpack("<B", rd.take(1))
        shape = struct.unpack(f"<{rank}I", rd.take(4 * rank))
        n_items = int(np.prod(shape, dtype=np.int64)) if rank else 1
        payload = rd.take(n_items * dt.itemsize)
        arr = np.frombuffer(payload, dtype=dt).reshape(shape).copy()
        out[name] = arr
    if rd.pos != len(rd.blob):
        raise FormatError(f"{len(rd.blob) - rd.pos} trailing bytes in {path}")
    return out
