"""Feature-bundle file format, split manifests, seeded K-shot episode
sampling, and a synthetic bundle generator for desk-scale verification.

A bundle decouples the classification engine from any encoder: it carries
per-item low-level maps (one per tapped layer), a global embedding per
item, per-class text embeddings, labels, and geometry metadata. Bundles
round-trip bit-exactly through the "MFFB" container.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from . import _container as container
from .errors import FormatError, ValidationError
from .numerics import as_f32, l2_normalize_rows

BUNDLE_MAGIC = b"MFFB"
BUNDLE_VERSION = 1

SUPPORT_TAG = "support"
TEST_TAG = "test"

ALLOWED_SHOTS = (1, 2, 4, 8, 16)


@dataclass(frozen=True)
class LayerGeometry:
    channels: int
    height: int
    width: int

    def __post_init__(self):
        if self.channels < 1:
            raise ValidationError(f"channels must be >= 1, got {self.channels}")
        if self.height < 2 or self.width < 2:
            raise ValidationError(
                f"maps must be at least 2x2 for the 2x2 window kernel, got "
                f"{self.height}x{self.width}"
            )

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.channels, self.height, self.width)


@dataclass(frozen=True)
class BundleGeometry:
    layers: dict[int, LayerGeometry]
    dim: int

    def __post_init__(self):
        if not self.layers:
            raise ValidationError("geometry needs at least one low-level layer")
        if self.dim < 1:
            raise ValidationError(f"embedding dim must be >= 1, got {self.dim}")


# Standard stage shapes for the two supported backbones at 224x224 input.
RN50_PROFILE = BundleGeometry(
    layers={3: LayerGeometry(1024, 14, 14), 4: LayerGeometry(2048, 7, 7)}, dim=1024
)
RN101_PROFILE = BundleGeometry(
    layers={3: LayerGeometry(1024, 14, 14), 4: LayerGeometry(2048, 7, 7)}, dim=512
)

GEOMETRY_PROFILES = {"RN50": RN50_PROFILE, "RN101": RN101_PROFILE}


@dataclass
class AugmentedView:
    """Pre-exported augmented encoding of one support image."""

    low_maps: dict[int, np.ndarray]
    high: np.ndarray


@dataclass
class BundleItem:
    item_id: str
    label: int
    low_maps: dict[int, np.ndarray]
    high: np.ndarray
    augmented_views: list[AugmentedView] = field(default_factory=list)


@dataclass
class FeatureBundle:
    items: list[BundleItem]
    class_names: list[str]
    text_features: np.ndarray
    encoder_tag: str
    geometry: BundleGeometry

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def labels(self) -> np.ndarray:
        return np.array([it.label for it in self.items], dtype=np.int64)

    def item_ids(self) -> list[str]:
        return [it.item_id for it in self.items]

    def subset(self, indices) -> "FeatureBundle":
        return FeatureBundle(
            items=[self.items[i] for i in indices],
            class_names=self.class_names,
            text_features=self.text_features,
            encoder_tag=self.encoder_tag,
            geometry=self.geometry,
        )


def validate_bundle(bundle: FeatureBundle) -> None:
    """Check the structural invariants every consumer relies on."""
    n = bundle.n_classes
    if bundle.text_features.shape != (n, bundle.geometry.dim):
        raise ValidationError(
            f"text_features shape {bundle.text_features.shape} != ({n}, {bundle.geometry.dim})"
        )
    layer_ids = set(bundle.geometry.layers)
    for it in bundle.items:
        if not 0 <= it.label < n:
            raise ValidationError(f"item {it.item_id!r} label {it.label} outside [0, {n})")
        if set(it.low_maps) != layer_ids:
            raise ValidationError(
                f"item {it.item_id!r} has layers {sorted(it.low_maps)}, expected {sorted(layer_ids)}"
            )
        for lid, geo in bundle.geometry.layers.items():
            views = [it.low_maps[lid]] + [v.low_maps[lid] for v in it.augmented_views]
            for m in views:
                if m.shape != geo.shape:
                    raise ValidationError(
                        f"item {it.item_id!r} layer {lid} map shape {m.shape} != {geo.shape}"
                    )
        for h in [it.high] + [v.high for v in it.augmented_views]:
            if h.shape != (bundle.geometry.dim,):
                raise ValidationError(
                    f"item {it.item_id!r} embedding shape {h.shape} != ({bundle.geometry.dim},)"
                )


def matches_profile(geometry: BundleGeometry, profile: BundleGeometry) -> bool:
    return geometry == profile


# ---------------------------------------------------------------------------
# MFFB container


def _geometry_to_json(geometry: BundleGeometry) -> dict:
    return {
        "layers": {str(lid): list(g.shape) for lid, g in sorted(geometry.layers.items())},
        "dim": geometry.dim,
    }


def _geometry_from_json(obj: dict) -> BundleGeometry:
    layers = {int(lid): LayerGeometry(*shape) for lid, shape in obj["layers"].items()}
    return BundleGeometry(layers=layers, dim=int(obj["dim"]))


def bundle_to_bytes(bundle: FeatureBundle) -> bytes:
    validate_bundle(bundle)
    builder = container.Builder(BUNDLE_MAGIC, BUNDLE_VERSION)
    meta = {
        "encoder_tag": bundle.encoder_tag,
        "class_names": list(bundle.class_names),
        "item_ids": bundle.item_ids(),
        "geometry": _geometry_to_json(bundle.geometry),
        "aug_counts": {
            it.item_id: len(it.augmented_views)
            for it in bundle.items
            if it.augmented_views
        },
    }
    builder.add_bytes("meta", json.dumps(meta, sort_keys=True).encode("utf-8"))
    builder.add_array("labels", bundle.labels().astype(np.float32))
    builder.add_array("text", as_f32(bundle.text_features))
    for it in bundle.items:
        for lid in sorted(it.low_maps):
            builder.add_array(f"item/{it.item_id}/low{lid}", as_f32(it.low_maps[lid]))
        builder.add_array(f"item/{it.item_id}/high", as_f32(it.high))
        for vi, view in enumerate(it.augmented_views):
            for lid in sorted(view.low_maps):
                builder.add_array(f"item/{it.item_id}/aug{vi}/low{lid}", as_f32(view.low_maps[lid]))
            builder.add_array(f"item/{it.item_id}/aug{vi}/high", as_f32(view.high))
    return builder.tobytes()


def bundle_from_bytes(data: bytes) -> FeatureBundle:
    cur = container.open_container(data, BUNDLE_MAGIC, BUNDLE_VERSION)
    records = container.read_index(cur)

    def need(name: str) -> container.Record:
        if name not in records:
            cur.fail(f"missing required record {name!r}")
        return records[name]

    try:
        meta = json.loads(container.record_bytes(cur, need("meta")).decode("utf-8"))
        item_ids = list(meta["item_ids"])
        class_names = list(meta["class_names"])
        encoder_tag = str(meta["encoder_tag"])
        geometry = _geometry_from_json(meta["geometry"])
        aug_counts = {str(k): int(v) for k, v in meta.get("aug_counts", {}).items()}
    except FormatError:
        raise
    except Exception as exc:
        raise FormatError(f"malformed meta record: {exc}") from exc

    labels = container.record_array(cur, need("labels"))
    if labels.shape != (len(item_ids),):
        cur.fail(f"labels extent {labels.shape} != item count {len(item_ids)}")
    text = container.record_array(cur, need("text"))

    items = []
    for idx, item_id in enumerate(item_ids):
        low_maps = {
            lid: container.record_array(cur, need(f"item/{item_id}/low{lid}"))
            for lid in sorted(geometry.layers)
        }
        high = container.record_array(cur, need(f"item/{item_id}/high"))
        views = []
        for vi in range(aug_counts.get(item_id, 0)):
            views.append(
                AugmentedView(
                    low_maps={
                        lid: container.record_array(cur, need(f"item/{item_id}/aug{vi}/low{lid}"))
                        for lid in sorted(geometry.layers)
                    },
                    high=container.record_array(cur, need(f"item/{item_id}/aug{vi}/high")),
                )
            )
        items.append(
            BundleItem(
                item_id=item_id,
                label=int(labels[idx]),
                low_maps=low_maps,
                high=high,
                augmented_views=views,
            )
        )

    bundle = FeatureBundle(
        items=items,
        class_names=class_names,
        text_features=text,
        encoder_tag=encoder_tag,
        geometry=geometry,
    )
    try:
        validate_bundle(bundle)
    except ValidationError as exc:
        raise FormatError(f"bundle fails validation after decode: {exc}") from exc
    return bundle


def write_bundle(bundle: FeatureBundle, path) -> None:
    data = bundle_to_bytes(bundle)
    with open(path, "wb") as fh:
        fh.write(data)


def read_bundle(path) -> FeatureBundle:
    with open(path, "rb") as fh:
        return bundle_from_bytes(fh.read())


def bundle_checksum(bundle: FeatureBundle) -> str:
    """SHA-256 over the serialized bundle; stable across processes."""
    return hashlib.sha256(bundle_to_bytes(bundle)).hexdigest()


# ---------------------------------------------------------------------------
# Split manifests and episode sampling


def write_manifest(manifest: dict[str, str], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=0)
        fh.write("\n")


def read_manifest(path) -> dict[str, str]:
    with open(path, encoding="utf-8") as fh:
        obj = json.load(fh)
    if not isinstance(obj, dict) or not all(
        isinstance(k, str) and isinstance(v, str) for k, v in obj.items()
    ):
        raise FormatError(f"manifest {path} is not a string-to-string mapping")
    return obj


def split_indices(bundle: FeatureBundle, manifest: dict[str, str], tag: str) -> np.ndarray:
    """Bundle indices of the items the manifest assigns to `tag`."""
    return np.array(
        [i for i, it in enumerate(bundle.items) if manifest.get(it.item_id) == tag],
        dtype=np.int64,
    )


@dataclass(frozen=True)
class EpisodeSpec:
    n_shots: int
    seed: int
    support_tag: str = SUPPORT_TAG
    test_tag: str = TEST_TAG

    def __post_init__(self):
        if self.n_shots not in ALLOWED_SHOTS:
            raise ValidationError(f"n_shots must be one of {ALLOWED_SHOTS}, got {self.n_shots}")


def sample_episode(bundle: FeatureBundle, spec: EpisodeSpec,
                   manifest: dict[str, str]) -> tuple[np.ndarray, np.ndarray]:
    """Draw exactly K support items per class (seeded, without replacement)
    from the support split; return (support_indices, test_indices).

    The test split passes through untouched, in bundle order.
    """
    by_class: dict[int, list[int]] = {c: [] for c in range(bundle.n_classes)}
    test_indices = []
    for idx, it in enumerate(bundle.items):
        tag = manifest.get(it.item_id)
        if tag == spec.support_tag:
            by_class[it.label].append(idx)
        elif tag == spec.test_tag:
            test_indices.append(idx)

    deficient = {c: len(v) for c, v in by_class.items() if len(v) < spec.n_shots}
    if deficient:
        raise ValidationError(
            f"classes with fewer than {spec.n_shots} support candidates: {deficient}"
        )

    rng = np.random.default_rng(spec.seed)
    support = []
    for c in range(bundle.n_classes):
        picked = rng.choice(len(by_class[c]), size=spec.n_shots, replace=False)
        support.extend(by_class[c][i] for i in sorted(picked))
    return np.array(support, dtype=np.int64), np.array(test_indices, dtype=np.int64)


# ---------------------------------------------------------------------------
# Synthetic bundles

DEFAULT_SYNTH_GEOMETRY = BundleGeometry(
    layers={3: LayerGeometry(2, 10, 10), 4: LayerGeometry(4, 7, 7)}, dim=32
)


def generate_synthetic(n_classes: int, shots: int, test_per_class: int,
                       geometry: BundleGeometry = DEFAULT_SYNTH_GEOMETRY,
                       separation: float = 10.0,
                       seed: int = 0) -> tuple[FeatureBundle, dict[str, str]]:
    """Gaussian cluster bundle: per class, one center per layer plus one
    high-level center; items are center + unit-scale noise, and class
    centers sit `separation` apart (in units of the noise scale).

    The separation is enforced per retrieval atom: high-level center
    coordinates are drawn at scale separation / sqrt(2 * dim), so embedding
    centers sit `separation` apart, and each map's center coordinates at
    separation / sqrt(2 * 4 * channels), so the class contrast seen by one
    2x2 window (4 * channels coordinates) is also `separation`.

    Text embeddings are the normalized high-level class centers. Returns
    the bundle and a split manifest. Fully deterministic per seed.
    """
    if n_classes < 1 or shots < 1 or test_per_class < 0:
        raise ValidationError("n_classes and shots must be >= 1, test_per_class >= 0")
    if separation < 0:
        raise ValidationError(f"separation must be >= 0, got {separation}")

    rng = np.random.default_rng(seed)
    layer_ids = sorted(geometry.layers)
    scale_high = separation / np.sqrt(2.0 * geometry.dim)
    scale_low = {
        lid: separation / np.sqrt(2.0 * 4.0 * geometry.layers[lid].channels)
        for lid in layer_ids
    }

    centers_low = []
    centers_high = []
    for _ in range(n_classes):
        centers_low.append(
            {
                lid: scale_low[lid] * rng.standard_normal(geometry.layers[lid].shape)
                for lid in layer_ids
            }
        )
        centers_high.append(scale_high * rng.standard_normal(geometry.dim))

    text = l2_normalize_rows(as_f32(np.stack(centers_high)))

    items = []
    manifest: dict[str, str] = {}

    def draw_item(cls: int, item_id: str) -> BundleItem:
        low = {
            lid: as_f32(centers_low[cls][lid] + rng.standard_normal(geometry.layers[lid].shape))
            for lid in layer_ids
        }
        high = as_f32(centers_high[cls] + rng.standard_normal(geometry.dim))
        return BundleItem(item_id=item_id, label=cls, low_maps=low, high=high)

    for cls in range(n_classes):
        for i in range(shots):
            item_id = f"c{cls:03d}_s{i:03d}"
            items.append(draw_item(cls, item_id))
            manifest[item_id] = SUPPORT_TAG
    for cls in range(n_classes):
        for i in range(test_per_class):
            item_id = f"c{cls:03d}_t{i:03d}"
            items.append(draw_item(cls, item_id))
            manifest[item_id] = TEST_TAG

    bundle = FeatureBundle(
        items=items,
        class_names=[f"class_{c}" for c in range(n_classes)],
        text_features=text,
        encoder_tag="synthetic",
        geometry=geometry,
    )
    return bundle, manifest
