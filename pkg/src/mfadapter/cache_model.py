"""Frozen support-set knowledge: per-layer induced unit matrices, the
one-hot label matrix, and the global (high-level + text) embedding cache.

Rows are L2-normalized at build time, so querying needs only a similarity
product. Row i of every per-layer matrix and row i of the label matrix
refer to the same support item; row order follows the order the support
items are presented in (episode samplers emit class-major order).
"""

from __future__ import annotations

import hashlib
import json
import struct

import numpy as np
from dataclasses import dataclass, field

from . import _container as container
from .dataio import FeatureBundle, validate_bundle
from .errors import FormatError, ValidationError
from .meta_feature import build_meta_feature, induce_mf_unit
from .numerics import as_f32, l2_normalize_rows

CACHE_MAGIC = b"MFUC"
CACHE_VERSION = 1

CACHE_LAYERS = (3, 4)


@dataclass
class MFUnitCache:
    """Flattened, row-normalized induced units per layer plus labels."""

    per_layer: dict[int, np.ndarray]   # layer_id -> [NK x 2*ms_l]
    labels_onehot: np.ndarray          # [NK x N]
    n_classes: int
    n_shots: int
    scale: int
    per_layer_ms: dict[int, int] = field(default_factory=dict)

    @property
    def layers(self) -> tuple[int, ...]:
        return tuple(sorted(self.per_layer))


@dataclass
class GlobalCache:
    high_features: np.ndarray  # [NK x D], unit rows
    text_features: np.ndarray  # [N x D], unit rows

    @property
    def dim(self) -> int:
        return self.high_features.shape[1]


def one_hot(labels, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.ndim != 1:
        raise ValidationError(f"labels must be rank-1, got rank {labels.ndim}")
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValidationError(f"labels outside [0, {n_classes})")
    out = np.zeros((labels.size, n_classes), dtype=np.float32)
    out[np.arange(labels.size), labels] = 1.0
    return out


def build_cache(support: FeatureBundle, scale: int,
                layers=CACHE_LAYERS) -> tuple[MFUnitCache, GlobalCache]:
    """Build the frozen caches from a bundle restricted to support items.

    Per layer: unfold to a meta-feature, induce the 2-channel unit, flatten
    each item to a row, L2-normalize. Requires exactly K items per class.
    """
    validate_bundle(support)
    layers = tuple(sorted(set(int(l) for l in layers)))
    if not layers:
        raise ValidationError("at least one layer is required")
    if not set(layers) <= set(CACHE_LAYERS):
        raise ValidationError(f"layers must be a subset of {CACHE_LAYERS}, got {layers}")
    missing = [l for l in layers if l not in support.geometry.layers]
    if missing:
        raise ValidationError(f"bundle lacks requested layers {missing}")

    n = support.n_classes
    labels = support.labels()
    counts = np.bincount(labels, minlength=n)
    if counts.min() < 1 or counts.min() != counts.max():
        raise ValidationError(
            f"support set must hold the same shot count for every class, got "
            f"{dict(enumerate(counts.tolist()))}"
        )
    k = int(counts[0])

    per_layer = {}
    per_layer_ms = {}
    for lid in layers:
        maps = np.stack([it.low_maps[lid] for it in support.items])
        unit = induce_mf_unit(build_meta_feature(maps, scale, lid))
        rows = unit.values.reshape(unit.values.shape[0], -1)
        per_layer[lid] = l2_normalize_rows(as_f32(rows))
        per_layer_ms[lid] = unit.values.shape[2]

    cache = MFUnitCache(
        per_layer=per_layer,
        labels_onehot=one_hot(labels, n),
        n_classes=n,
        n_shots=k,
        scale=scale,
        per_layer_ms=per_layer_ms,
    )
    global_cache = GlobalCache(
        high_features=l2_normalize_rows(as_f32(np.stack([it.high for it in support.items]))),
        text_features=l2_normalize_rows(as_f32(support.text_features)),
    )
    return cache, global_cache


# ---------------------------------------------------------------------------
# MFUC serialization


def serialize_cache(cache: MFUnitCache, global_cache: GlobalCache | None = None,
                    support_item_ids: list[str] | None = None) -> bytes:
    """Pack the cache (and optionally the global cache plus the support
    item ids it was built from) into the versioned MFUC container."""
    layer_ids = sorted(cache.per_layer)
    header = struct.pack(
        "<IIII", cache.n_classes, cache.n_shots, cache.scale, len(layer_ids)
    )
    for lid in layer_ids:
        header += struct.pack("<IQ", lid, cache.per_layer_ms[lid])

    builder = container.Builder(CACHE_MAGIC, CACHE_VERSION, header)
    for lid in layer_ids:
        builder.add_array(f"layer{lid}", cache.per_layer[lid])
    builder.add_array("labels_onehot", cache.labels_onehot)
    if global_cache is not None:
        builder.add_array("high_features", global_cache.high_features)
        builder.add_array("text_features", global_cache.text_features)
    if support_item_ids is not None:
        builder.add_bytes(
            "meta", json.dumps({"support_item_ids": support_item_ids},
                               sort_keys=True).encode("utf-8")
        )
    return builder.tobytes()


def deserialize_cache(data: bytes) -> tuple[MFUnitCache, GlobalCache | None, list[str] | None]:
    cur = container.open_container(data, CACHE_MAGIC, CACHE_VERSION)
    n = cur.u32("class count")
    k = cur.u32("shot count")
    scale = cur.u32("scale")
    n_layers = cur.u32("layer count")
    if n_layers == 0 or n_layers > 16:
        cur.fail(f"implausible layer count {n_layers}")
    layer_ms = {}
    for _ in range(n_layers):
        lid = cur.u32("layer id")
        layer_ms[lid] = cur.u64("layer window extent")
    records = container.read_index(cur)

    def need(name):
        if name not in records:
            cur.fail(f"missing required record {name!r}")
        return records[name]

    per_layer = {}
    for lid, ms in layer_ms.items():
        arr = container.record_array(cur, need(f"layer{lid}"))
        if arr.shape != (n * k, 2 * ms):
            cur.fail(f"layer {lid} matrix shape {arr.shape} != ({n * k}, {2 * ms})")
        per_layer[lid] = arr
    labels_onehot = container.record_array(cur, need("labels_onehot"))
    if labels_onehot.shape != (n * k, n):
        cur.fail(f"labels_onehot shape {labels_onehot.shape} != ({n * k}, {n})")

    cache = MFUnitCache(
        per_layer=per_layer,
        labels_onehot=labels_onehot,
        n_classes=n,
        n_shots=k,
        scale=scale,
        per_layer_ms={lid: int(ms) for lid, ms in layer_ms.items()},
    )

    global_cache = None
    if "high_features" in records and "text_features" in records:
        high = container.record_array(cur, records["high_features"])
        text = container.record_array(cur, records["text_features"])
        if high.ndim != 2 or high.shape[0] != n * k:
            cur.fail(f"high_features shape {high.shape} != ({n * k}, D)")
        if text.shape != (n, high.shape[1]):
            cur.fail(f"text_features shape {text.shape} != ({n}, {high.shape[1]})")
        global_cache = GlobalCache(high_features=high, text_features=text)

    support_item_ids = None
    if "meta" in records:
        try:
            meta = json.loads(container.record_bytes(cur, records["meta"]).decode("utf-8"))
            support_item_ids = [str(s) for s in meta["support_item_ids"]]
        except FormatError:
            raise
        except Exception as exc:
            raise FormatError(f"malformed cache meta record: {exc}") from exc
        if len(support_item_ids) != n * k:
            cur.fail(f"support id count {len(support_item_ids)} != NK = {n * k}")
    return cache, global_cache, support_item_ids


def write_cache(path, cache: MFUnitCache, global_cache: GlobalCache | None = None,
                support_item_ids: list[str] | None = None) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize_cache(cache, global_cache, support_item_ids))


def read_cache(path) -> tuple[MFUnitCache, GlobalCache | None, list[str] | None]:
    with open(path, "rb") as fh:
        return deserialize_cache(fh.read())


def cache_checksum(cache: MFUnitCache, global_cache: GlobalCache | None = None) -> str:
    """SHA-256 over the serialized caches; used to assert the frozen-cache
    contract around training."""
    return hashlib.sha256(serialize_cache(cache, global_cache)).hexdigest()
