"""Binary tensor container and named-tensor archives.

Single-tensor layout (little-endian): magic b"EPF2", u8 dtype code
(0 = f32, 1 = f64), u8 rank, rank x u64 dims, raw row-major data.
Archives prepend a text header and store a name-indexed list of tensors.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"EPF2"
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


class FormatError(ValueError):
    """Raised on malformed container bytes; message carries the byte offset."""


def write_tensor(fh, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr)
    if arr.dtype not in _CODES:
        arr = arr.astype(np.float32)
    fh.write(MAGIC)
    fh.write(struct.pack("<BB", _CODES[arr.dtype], arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    fh.write(arr.astype(arr.dtype.newbyteorder("<")).tobytes())


def read_tensor(fh) -> np.ndarray:
    start = fh.tell()
    magic = fh.read(4)
    if magic != MAGIC:
        raise FormatError(f"bad tensor magic {magic!r} at byte offset {start}")
    head = fh.read(2)
    if len(head) < 2:
        raise FormatError(f"truncated tensor header at byte offset {fh.tell()}")
    code, rank = struct.unpack("<BB", head)
    if code not in _DTYPES:
        raise FormatError(f"unknown dtype code {code} at byte offset {start + 4}")
    raw = fh.read(8 * rank)
    if len(raw) < 8 * rank:
        raise FormatError(f"truncated dims at byte offset {fh.tell()}")
    dims = struct.unpack(f"<{rank}Q", raw)
    dtype = _DTYPES[code]
    nbytes = int(np.prod(dims)) * dtype.itemsize if rank else dtype.itemsize
    payload = fh.read(nbytes)
    if len(payload) < nbytes:
        raise FormatError(f"truncated tensor payload at byte offset {fh.tell()}")
    return np.frombuffer(payload, dtype=dtype).reshape(dims).copy()


def write_archive(fh, header_text: str, tensors: dict[str, np.ndarray]) -> None:
    """Text header + named tensors, each in the single-tensor container format."""
    header = header_text.encode("utf-8")
    fh.write(struct.pack("<I", len(header)))
    fh.write(header)
    fh.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        nb = name.encode("utf-8")
        fh.write(struct.pack("<H", len(nb)))
        fh.write(nb)
        write_tensor(fh, arr)


def read_archive(fh) -> tuple[str, dict[str, np.ndarray]]:
    raw = fh.read(4)
    if len(raw) < 4:
        raise FormatError("truncated archive header length at byte offset 0")
    (hlen,) = struct.unpack("<I", raw)
    header = fh.read(hlen)
    if len(header) < hlen:
        raise FormatError(f"truncated archive header at byte offset {fh.tell()}")
    raw = fh.read(4)
    if len(raw) < 4:
        raise FormatError(f"truncated tensor count at byte offset {fh.tell()}")
    (count,) = struct.unpack("<I", raw)
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        raw = fh.read(2)
        if len(raw) < 2:
            raise FormatError(f"truncated tensor name length at byte offset {fh.tell()}")
        (nlen,) = struct.unpack("<H", raw)
        name = fh.read(nlen).decode("utf-8")
        tensors[name] = read_tensor(fh)
    return header.decode("utf-8"), tensors
