"""Writer/reader for the MFFB feature-bundle wire format.

Layout (little-endian): magic "MFFB", version u32 (= 1), n_records u64,
then an index of {name_len u32, name utf-8, dtype u8 (0 float32 tensor /
1 byte blob), rank u8 (>= 1), dims u64 x rank, payload_offset u64}
followed by the payload region. Record names: "meta" (JSON blob), "labels",
"text", and per item "item/<id>/low<layer>", "item/<id>/high", with
optional "item/<id>/aug<k>/..." augmented views.

This module implements the format directly from its specification; the
consuming package reads the same bytes with its own independent reader.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"MFFB"
VERSION = 1
DTYPE_F32 = 0
DTYPE_BYTES = 1


class BundleFormatError(ValueError):
    pass


@dataclass
class BundleData:
    """In-memory form of a bundle file."""

    item_ids: list[str]
    labels: np.ndarray
    class_names: list[str]
    encoder_tag: str
    geometry_layers: dict[int, tuple[int, int, int]]
    dim: int
    text: np.ndarray
    low_maps: dict[str, dict[int, np.ndarray]]
    high: dict[str, np.ndarray]
    aug_low: dict[str, list[dict[int, np.ndarray]]] = field(default_factory=dict)
    aug_high: dict[str, list[np.ndarray]] = field(default_factory=dict)
    extra_meta: dict = field(default_factory=dict)


def write_bundle(data: BundleData, path) -> None:
    records: list[tuple[str, int, tuple[int, ...], bytes]] = []

    def add_array(name, arr):
        arr = np.ascontiguousarray(arr, dtype="<f4")
        records.append((name, DTYPE_F32, arr.shape, arr.tobytes()))

    meta = dict(data.extra_meta)
    meta.update(
        {
            "encoder_tag": data.encoder_tag,
            "class_names": list(data.class_names),
            "item_ids": list(data.item_ids),
            "geometry": {
                "layers": {str(l): list(s) for l, s in sorted(data.geometry_layers.items())},
                "dim": data.dim,
            },
            "aug_counts": {iid: len(v) for iid, v in data.aug_low.items() if v},
        }
    )
    meta_blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    records.append(("meta", DTYPE_BYTES, (len(meta_blob),), meta_blob))
    add_array("labels", np.asarray(data.labels, np.float32))
    add_array("text", data.text)
    for iid in data.item_ids:
        for lid in sorted(data.low_maps[iid]):
            add_array(f"item/{iid}/low{lid}", data.low_maps[iid][lid])
        add_array(f"item/{iid}/high", data.high[iid])
        for vi, view in enumerate(data.aug_low.get(iid, [])):
            for lid in sorted(view):
                add_array(f"item/{iid}/aug{vi}/low{lid}", view[lid])
            add_array(f"item/{iid}/aug{vi}/high", data.aug_high[iid][vi])

    index_size = sum(4 + len(n.encode("utf-8")) + 2 + 8 * len(shape) + 8
                     for n, _, shape, _ in records)
    offset = 4 + 4 + 8 + index_size
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<Q", len(records))]
    for name, dtype, shape, payload in records:
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<I", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<BB", dtype, len(shape)))
        parts.append(struct.pack(f"<{len(shape)}Q", *shape))
        parts.append(struct.pack("<Q", offset))
        offset += len(payload)
    parts.extend(payload for _, _, _, payload in records)
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def read_bundle(path) -> BundleData:
    with open(path, "rb") as fh:
        blob = fh.read()

    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(blob):
            raise BundleFormatError(f"truncated while reading {what} at byte offset {pos}")
        out = blob[pos : pos + n]
        pos += n
        return out

    if take(4, "magic") != MAGIC:
        raise BundleFormatError("bad magic at byte offset 0")
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != VERSION:
        raise BundleFormatError(f"unsupported version {version} at byte offset 4")
    (n_records,) = struct.unpack("<Q", take(8, "record count"))
    if n_records > len(blob):
        raise BundleFormatError(f"implausible record count {n_records}")

    index = {}
    for i in range(n_records):
        (name_len,) = struct.unpack("<I", take(4, f"record {i} name length"))
        if name_len == 0 or name_len > 4096:
            raise BundleFormatError(f"record {i}: bad name length {name_len} at offset {pos - 4}")
        name = take(name_len, f"record {i} name").decode("utf-8", errors="strict")
        dtype, rank = struct.unpack("<BB", take(2, f"record {name!r} header"))
        if dtype not in (DTYPE_F32, DTYPE_BYTES):
            raise BundleFormatError(f"record {name!r}: unknown dtype {dtype}")
        if rank < 1 or rank > 8:
            raise BundleFormatError(f"record {name!r}: bad rank {rank}")
        dims = struct.unpack(f"<{rank}Q", take(8 * rank, f"record {name!r} dims"))
        (off,) = struct.unpack("<Q", take(8, f"record {name!r} offset"))
        n_elems = 1
        for d in dims:
            n_elems *= d
            if n_elems > len(blob):
                raise BundleFormatError(f"record {name!r}: extent {dims} exceeds file size")
        nbytes = n_elems * (4 if dtype == DTYPE_F32 else 1)
        if off + nbytes > len(blob):
            raise BundleFormatError(
                f"record {name!r}: payload runs past end of file at offset {off}"
            )
        index[name] = (dtype, dims, off, nbytes)

    def blob_of(name):
        if name not in index:
            raise BundleFormatError(f"missing record {name!r}")
        dtype, dims, off, nbytes = index[name]
        return blob[off : off + nbytes]

    def array_of(name):
        dtype, dims, off, nbytes = index.get(name, (None,) * 4)
        if dtype != DTYPE_F32:
            raise BundleFormatError(f"record {name!r} is missing or not a float32 tensor")
        return np.frombuffer(blob[off : off + nbytes], dtype="<f4").reshape(dims).copy()

    try:
        meta = json.loads(blob_of("meta").decode("utf-8"))
        item_ids = [str(s) for s in meta["item_ids"]]
        class_names = [str(s) for s in meta["class_names"]]
        geometry_layers = {
            int(l): tuple(int(x) for x in s) for l, s in meta["geometry"]["layers"].items()
        }
        dim = int(meta["geometry"]["dim"])
        aug_counts = {str(k): int(v) for k, v in meta.get("aug_counts", {}).items()}
        encoder_tag = str(meta["encoder_tag"])
    except BundleFormatError:
        raise
    except Exception as exc:
        raise BundleFormatError(f"malformed meta record: {exc}") from exc

    labels = array_of("labels")
    text = array_of("text")
    low_maps, high, aug_low, aug_high = {}, {}, {}, {}
    for iid in item_ids:
        low_maps[iid] = {lid: array_of(f"item/{iid}/low{lid}") for lid in geometry_layers}
        high[iid] = array_of(f"item/{iid}/high")
        if aug_counts.get(iid):
            aug_low[iid] = [
                {lid: array_of(f"item/{iid}/aug{vi}/low{lid}") for lid in geometry_layers}
                for vi in range(aug_counts[iid])
            ]
            aug_high[iid] = [
                array_of(f"item/{iid}/aug{vi}/high") for vi in range(aug_counts[iid])
            ]

    known = {"encoder_tag", "class_names", "item_ids", "geometry", "aug_counts"}
    return BundleData(
        item_ids=item_ids,
        labels=labels,
        class_names=class_names,
        encoder_tag=encoder_tag,
        geometry_layers=geometry_layers,
        dim=dim,
        text=text,
        low_maps=low_maps,
        high=high,
        aug_low=aug_low,
        aug_high=aug_high,
        extra_meta={k: v for k, v in meta.items() if k not in known},
    )
