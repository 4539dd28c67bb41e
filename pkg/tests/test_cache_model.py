import numpy as np
import pytest

from mfadapter.adapter import local_logits
from mfadapter.cache_model import (
    build_cache,
    cache_checksum,
    deserialize_cache,
    one_hot,
    serialize_cache,
)
from mfadapter.dataio import (
    BundleGeometry,
    BundleItem,
    FeatureBundle,
    LayerGeometry,
    generate_synthetic,
)
from mfadapter.errors import DimensionError, FormatError, ValidationError
from mfadapter.meta_feature import build_meta_feature


def map_bundle(labels, maps_by_item, n_classes=None, dim=4, seed=0):
    """Single-layer bundle (layer 3) from explicit 1-channel 3x3 maps."""
    n = n_classes or (max(labels) + 1)
    rng = np.random.default_rng(seed)
    geometry = BundleGeometry(layers={3: LayerGeometry(1, 3, 3)}, dim=dim)
    items = [
        BundleItem(
            item_id=f"item{i}",
            label=lab,
            low_maps={3: np.asarray(m, np.float32).reshape(1, 3, 3)},
            high=rng.standard_normal(dim).astype(np.float32),
        )
        for i, (lab, m) in enumerate(zip(labels, maps_by_item))
    ]
    return FeatureBundle(
        items=items,
        class_names=[f"c{k}" for k in range(n)],
        text_features=rng.standard_normal((n, dim)).astype(np.float32),
        encoder_tag="test",
        geometry=geometry,
    )


class TestOneHot:
    def test_example(self):
        np.testing.assert_array_equal(
            one_hot([0, 1, 1, 0], 2), [[1, 0], [0, 1], [0, 1], [1, 0]]
        )

    def test_rows_sum_to_one(self):
        out = one_hot([2, 0, 1], 3)
        np.testing.assert_array_equal(out.sum(axis=1), 1.0)
        assert np.all((out == 0) | (out == 1))

    def test_out_of_range(self):
        with pytest.raises(ValidationError):
            one_hot([0, 3], 3)


class TestBuildCache:
    def test_geometry_two_classes_one_shot(self):
        rng = np.random.default_rng(1)
        bundle = map_bundle([0, 1], rng.standard_normal((2, 9)))
        cache, _ = build_cache(bundle, scale=2, layers=(3,))
        # (3-1)^2 + (3-2)^2 = 5 windows, 2 channels -> 10 columns
        assert cache.per_layer[3].shape == (2, 10)
        assert cache.per_layer_ms[3] == 5
        assert cache.n_classes == 2 and cache.n_shots == 1

    def test_row_normalization(self):
        rng = np.random.default_rng(2)
        bundle = map_bundle([0, 0, 1, 1], rng.standard_normal((4, 9)))
        cache, global_cache = build_cache(bundle, scale=1, layers=(3,))
        norms = np.linalg.norm(cache.per_layer[3].astype(np.float64), axis=1)
        np.testing.assert_allclose(norms, 1.0, atol=1e-6)
        np.testing.assert_allclose(
            np.linalg.norm(global_cache.high_features.astype(np.float64), axis=1), 1.0, atol=1e-6
        )
        np.testing.assert_allclose(
            np.linalg.norm(global_cache.text_features.astype(np.float64), axis=1), 1.0, atol=1e-6
        )

    def test_rows_match_pipeline(self):
        # cache row = flatten(induce(meta)) then normalize, in item order
        rng = np.random.default_rng(3)
        maps = rng.standard_normal((2, 9))
        bundle = map_bundle([0, 1], maps)
        cache, _ = build_cache(bundle, scale=2, layers=(3,))
        from mfadapter.meta_feature import induce_mf_unit
        from mfadapter.numerics import l2_normalize_rows

        stacked = np.stack([it.low_maps[3] for it in bundle.items])
        unit = induce_mf_unit(build_meta_feature(stacked, 2, 3))
        expected = l2_normalize_rows(unit.values.reshape(2, -1))
        np.testing.assert_array_equal(cache.per_layer[3], expected)

    def test_duplicate_support_items_identical_rows(self):
        m = np.arange(9, dtype=np.float32)
        bundle = map_bundle([0, 0, 1, 1], [m, m, m + 3, m + 3])
        cache, _ = build_cache(bundle, scale=2, layers=(3,))
        np.testing.assert_array_equal(cache.per_layer[3][0], cache.per_layer[3][1])
        np.testing.assert_array_equal(cache.per_layer[3][2], cache.per_layer[3][3])

    def test_labels_onehot_preserves_item_order(self):
        rng = np.random.default_rng(4)
        bundle = map_bundle([0, 1, 1, 0], rng.standard_normal((4, 9)))
        cache, _ = build_cache(bundle, scale=1, layers=(3,))
        np.testing.assert_array_equal(
            cache.labels_onehot, [[1, 0], [0, 1], [0, 1], [1, 0]]
        )

    def test_deterministic(self):
        bundle, manifest = generate_synthetic(3, 2, 0, seed=5)
        c1, g1 = build_cache(bundle, scale=2)
        c2, g2 = build_cache(bundle, scale=2)
        assert cache_checksum(c1, g1) == cache_checksum(c2, g2)

    def test_class_permutation_equivariance(self):
        rng = np.random.default_rng(6)
        maps = rng.standard_normal((4, 9))
        bundle = map_bundle([0, 1, 1, 0], maps, seed=7)
        perm = [1, 0]  # relabel 0 -> 1, 1 -> 0
        permuted = map_bundle([perm[l] for l in [0, 1, 1, 0]], maps, seed=7)
        cache, _ = build_cache(bundle, scale=2, layers=(3,))
        cache_p, _ = build_cache(permuted, scale=2, layers=(3,))
        np.testing.assert_array_equal(cache.per_layer[3], cache_p.per_layer[3])
        np.testing.assert_array_equal(cache.labels_onehot[:, perm], cache_p.labels_onehot)

    def test_unbalanced_shots_lists_counts(self):
        rng = np.random.default_rng(8)
        bundle = map_bundle([0, 0, 1], rng.standard_normal((3, 9)))
        with pytest.raises(ValidationError, match="shot count"):
            build_cache(bundle, scale=1, layers=(3,))

    def test_missing_layer(self):
        rng = np.random.default_rng(9)
        bundle = map_bundle([0, 1], rng.standard_normal((2, 9)))
        with pytest.raises(ValidationError, match="lacks requested layers"):
            build_cache(bundle, scale=1, layers=(3, 4))

    def test_layers_outside_taps_rejected(self):
        rng = np.random.default_rng(10)
        bundle = map_bundle([0, 1], rng.standard_normal((2, 9)))
        with pytest.raises(ValidationError, match="subset"):
            build_cache(bundle, scale=1, layers=(2,))


class TestCacheSerialization:
    def test_round_trip_bitwise(self):
        bundle, _ = generate_synthetic(3, 2, 0, seed=11)
        cache, global_cache = build_cache(bundle, scale=2)
        ids = bundle.item_ids()
        blob = serialize_cache(cache, global_cache, ids)
        cache2, global2, ids2 = deserialize_cache(blob)
        assert ids2 == ids
        assert serialize_cache(cache2, global2, ids2) == blob
        for lid in cache.per_layer:
            np.testing.assert_array_equal(cache.per_layer[lid], cache2.per_layer[lid])
        np.testing.assert_array_equal(cache.labels_onehot, cache2.labels_onehot)
        np.testing.assert_array_equal(global_cache.high_features, global2.high_features)
        assert (cache2.n_classes, cache2.n_shots, cache2.scale) == (3, 2, 2)

    def test_without_global_cache(self):
        bundle, _ = generate_synthetic(2, 2, 0, seed=12)
        cache, _ = build_cache(bundle, scale=1)
        cache2, global2, ids2 = deserialize_cache(serialize_cache(cache))
        assert global2 is None and ids2 is None
        np.testing.assert_array_equal(cache.labels_onehot, cache2.labels_onehot)

    def test_corrupted_magic(self):
        bundle, _ = generate_synthetic(2, 2, 0, seed=13)
        cache, _ = build_cache(bundle, scale=1)
        blob = serialize_cache(cache)
        with pytest.raises(FormatError, match="magic"):
            deserialize_cache(b"NOPE" + blob[4:])

    def test_truncation(self):
        bundle, _ = generate_synthetic(2, 2, 0, seed=14)
        cache, _ = build_cache(bundle, scale=1)
        blob = serialize_cache(cache)
        with pytest.raises(FormatError):
            deserialize_cache(blob[: len(blob) // 2])

    def test_scale_mismatch_query_is_dimension_error(self):
        bundle, _ = generate_synthetic(2, 2, 0, seed=15)
        cache, _ = build_cache(bundle, scale=2)
        cache2, _, _ = deserialize_cache(serialize_cache(cache))
        geometry = bundle.geometry.layers[3]
        maps = np.stack([it.low_maps[3] for it in bundle.items])
        from mfadapter.meta_feature import induce_mf_unit

        unit = induce_mf_unit(build_meta_feature(maps, 3, 3))  # scale 3, cache is scale 2
        with pytest.raises(DimensionError, match="width"):
            local_logits(unit.values, cache2, 3)


class TestFrozenContract:
    def test_checksum_stable_across_queries(self):
        bundle, manifest = generate_synthetic(3, 4, 2, seed=16)
        cache, global_cache = build_cache(bundle.subset(range(12)), scale=2)
        before = cache_checksum(cache, global_cache)
        from mfadapter.fusion import evaluate

        evaluate(bundle, None, cache, global_cache)
        assert cache_checksum(cache, global_cache) == before
