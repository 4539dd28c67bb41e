"""Little-endian binary container shared by the bundle, cache, and
checkpoint formats.

Layout:

    magic (4 bytes) | version u32 | format header bytes | n_records u64
    | index entries | payload region

Each index entry is {name_len u32, name utf-8, dtype u8, rank u8,
dims u64 x rank, payload_offset u64} where dtype 0 is a float32 tensor
(payload 4 * prod(dims) bytes) and dtype 1 is a raw byte blob (rank 1,
dims[0] bytes). Offsets are absolute. Malformed input of any kind raises
FormatError with the byte offset at which decoding failed.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import FormatError

DTYPE_F32 = 0
DTYPE_BYTES = 1

_MAX_RANK = 8
_MAX_NAME = 4096


class Cursor:
    """Bounds-checked little-endian reader over a bytes object."""

    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def fail(self, why: str):
        raise FormatError(f"{why} at byte offset {self.pos} (file size {len(self.data)})")

    def take(self, n: int, what: str) -> bytes:
        if n < 0 or self.pos + n > len(self.data):
            self.fail(f"truncated while reading {what} ({n} bytes)")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u8(self, what: str) -> int:
        return self.take(1, what)[0]

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def u64(self, what: str) -> int:
        return struct.unpack("<Q", self.take(8, what))[0]

    def utf8(self, n: int, what: str) -> str:
        raw = self.take(n, what)
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError:
            self.fail(f"invalid utf-8 in {what}")


class Record:
    __slots__ = ("name", "dtype", "shape", "offset", "nbytes")

    def __init__(self, name, dtype, shape, offset, nbytes):
        self.name = name
        self.dtype = dtype
        self.shape = shape
        self.offset = offset
        self.nbytes = nbytes


def open_container(data: bytes, magic: bytes, version: int) -> Cursor:
    """Validate magic and version; return a cursor positioned after them."""
    cur = Cursor(data)
    got = cur.take(4, "magic")
    if got != magic:
        cur.pos = 0
        cur.fail(f"bad magic {got!r}, expected {magic!r}")
    ver = cur.u32("version")
    if ver != version:
        cur.pos -= 4
        cur.fail(f"unsupported version {ver}, expected {version}")
    return cur


def read_index(cur: Cursor) -> dict[str, Record]:
    """Read the record index starting at the cursor; validate payload bounds."""
    n_records = cur.u64("record count")
    if n_records > len(cur.data):
        cur.fail(f"implausible record count {n_records}")
    records: dict[str, Record] = {}
    for i in range(n_records):
        name_len = cur.u32(f"record {i} name length")
        if name_len == 0 or name_len > _MAX_NAME:
            cur.fail(f"record {i} has invalid name length {name_len}")
        name = cur.utf8(name_len, f"record {i} name")
        if name in records:
            cur.fail(f"duplicate record name {name!r}")
        dtype = cur.u8(f"record {i} dtype")
        if dtype not in (DTYPE_F32, DTYPE_BYTES):
            cur.fail(f"record {name!r} has unknown dtype {dtype}")
        rank = cur.u8(f"record {i} rank")
        if rank < 1:
            cur.fail(f"record {name!r} has rank 0; tensors are rank >= 1")
        if rank > _MAX_RANK:
            cur.fail(f"record {name!r} has implausible rank {rank}")
        if dtype == DTYPE_BYTES and rank != 1:
            cur.fail(f"byte record {name!r} must be rank 1, got {rank}")
        dims = tuple(cur.u64(f"record {name!r} dim {k}") for k in range(rank))
        offset = cur.u64(f"record {name!r} payload offset")
        n_elems = 1
        for dim in dims:
            n_elems *= dim
            if n_elems > len(cur.data):
                cur.fail(f"record {name!r} extent {dims} exceeds file size")
        nbytes = n_elems * (4 if dtype == DTYPE_F32 else 1)
        if offset + nbytes > len(cur.data):
            cur.pos = min(offset, len(cur.data))
            cur.fail(f"record {name!r} payload ({nbytes} bytes) runs past end of file")
        records[name] = Record(name, dtype, dims, offset, nbytes)
    return records


def record_array(cur: Cursor, rec: Record) -> np.ndarray:
    if rec.dtype != DTYPE_F32:
        cur.pos = rec.offset
        cur.fail(f"record {rec.name!r} is not a float32 tensor")
    raw = cur.data[rec.offset : rec.offset + rec.nbytes]
    arr = np.frombuffer(raw, dtype="<f4").reshape(rec.shape)
    return np.ascontiguousarray(arr, dtype=np.float32)


def record_bytes(cur: Cursor, rec: Record) -> bytes:
    if rec.dtype != DTYPE_BYTES:
        cur.pos = rec.offset
        cur.fail(f"record {rec.name!r} is not a byte blob")
    return cur.data[rec.offset : rec.offset + rec.nbytes]


class Builder:
    """Accumulates records, then emits the container deterministically."""

    def __init__(self, magic: bytes, version: int, header: bytes = b""):
        assert len(magic) == 4
        self.magic = magic
        self.version = version
        self.header = header
        self._entries: list[tuple[str, int, tuple[int, ...], bytes]] = []
        self._names: set[str] = set()

    def add_array(self, name: str, arr: np.ndarray):
        if name in self._names:
            raise ValueError(f"duplicate record name {name!r}")
        arr = np.ascontiguousarray(arr, dtype=np.float32)
        if arr.ndim < 1:
            raise ValueError(f"record {name!r}: tensors must be rank >= 1")
        self._names.add(name)
        self._entries.append((name, DTYPE_F32, arr.shape, arr.astype("<f4").tobytes()))

    def add_bytes(self, name: str, payload: bytes):
        if name in self._names:
            raise ValueError(f"duplicate record name {name!r}")
        self._names.add(name)
        self._entries.append((name, DTYPE_BYTES, (len(payload),), bytes(payload)))

    def tobytes(self) -> bytes:
        index_size = 0
        for name, _, shape, _ in self._entries:
            index_size += 4 + len(name.encode("utf-8")) + 1 + 1 + 8 * len(shape) + 8
        preamble = 4 + 4 + len(self.header) + 8
        payload_start = preamble + index_size

        parts = [self.magic, struct.pack("<I", self.version), self.header,
                 struct.pack("<Q", len(self._entries))]
        offset = payload_start
        for name, dtype, shape, payload in self._entries:
            encoded = name.encode("utf-8")
            parts.append(struct.pack("<I", len(encoded)))
            parts.append(encoded)
            parts.append(struct.pack("<BB", dtype, len(shape)))
            parts.append(struct.pack(f"<{len(shape)}Q", *shape))
            parts.append(struct.pack("<Q", offset))
            offset += len(payload)
        for _, _, _, payload in self._entries:
            parts.append(payload)
        return b"".join(parts)
