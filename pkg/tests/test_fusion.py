import numpy as np
import pytest

from mfadapter.adapter import TrainConfig, train
from mfadapter.cache_model import GlobalCache, build_cache, one_hot
from mfadapter.dataio import EpisodeSpec, generate_synthetic, sample_episode
from mfadapter.errors import DimensionError, ValidationError
from mfadapter.fusion import (
    BranchWeights,
    evaluate,
    fuse,
    high_logits,
    result_records,
    text_logits,
)
from mfadapter.numerics import l2_normalize_rows


def orthonormal_cache(n_rows, dim, labels, n_classes):
    assert n_rows <= dim
    high = np.eye(n_rows, dim, dtype=np.float32)
    return GlobalCache(
        high_features=high,
        text_features=l2_normalize_rows(
            np.random.default_rng(0).standard_normal((n_classes, dim)).astype(np.float32)
        ),
    ), one_hot(labels, n_classes)


class TestHighLogits:
    def test_query_matching_one_row_wins(self):
        global_cache, onehot = orthonormal_cache(4, 8, [0, 0, 1, 1], 2)
        query = global_cache.high_features[2:3]  # class-1 support row
        lg = high_logits(query, global_cache, onehot)
        assert lg.shape == (1, 2)
        # class 1 collects e^1 + e^0, class 0 collects 2 * e^0
        assert lg[0, 1] == pytest.approx(np.e + 1.0, rel=1e-6)
        assert lg[0, 0] == pytest.approx(2.0, rel=1e-6)
        assert lg[0].argmax() == 1

    def test_orthogonal_query_uniform(self):
        global_cache, onehot = orthonormal_cache(3, 8, [0, 1, 2], 3)
        query = np.zeros((1, 8), np.float32)
        query[0, 7] = 1.0
        lg = high_logits(query, global_cache, onehot)
        np.testing.assert_allclose(lg, 1.0, rtol=1e-6)  # e^0 per class, K = 1

    def test_duplicated_row_doubles_contribution(self):
        rng = np.random.default_rng(1)
        row = l2_normalize_rows(rng.standard_normal((1, 6)).astype(np.float32))
        single = GlobalCache(high_features=row, text_features=row)
        double = GlobalCache(high_features=np.vstack([row, row]), text_features=row)
        query = l2_normalize_rows(rng.standard_normal((3, 6)).astype(np.float32))
        lg1 = high_logits(query, single, one_hot([0], 1))
        lg2 = high_logits(query, double, one_hot([0, 0], 1))
        np.testing.assert_allclose(lg2, 2.0 * lg1, rtol=1e-6)

    def test_dim_mismatch(self):
        global_cache, onehot = orthonormal_cache(2, 8, [0, 1], 2)
        with pytest.raises(DimensionError):
            high_logits(np.zeros((1, 5), np.float32), global_cache, onehot)


class TestTextLogits:
    def test_self_similarity_is_one(self):
        rng = np.random.default_rng(2)
        text = l2_normalize_rows(rng.standard_normal((4, 9)).astype(np.float32))
        lg = text_logits(text[1:2], text)
        assert lg[0, 1] == pytest.approx(1.0, abs=1e-6)
        assert lg[0].argmax() == 1

    def test_orthogonal_query_zero_row(self):
        text = np.eye(3, 6, dtype=np.float32)
        query = np.zeros((1, 6), np.float32)
        query[0, 5] = 1.0
        np.testing.assert_array_equal(text_logits(query, text), 0.0)

    def test_cosine_bounds(self):
        rng = np.random.default_rng(3)
        query = l2_normalize_rows(rng.standard_normal((20, 7)).astype(np.float32))
        text = l2_normalize_rows(rng.standard_normal((5, 7)).astype(np.float32))
        lg = text_logits(query, text)
        assert np.all(lg >= -1 - 1e-5) and np.all(lg <= 1 + 1e-5)

    def test_dim_mismatch(self):
        with pytest.raises(DimensionError):
            text_logits(np.zeros((1, 4), np.float32), np.zeros((3, 5), np.float32))


class TestFuse:
    def test_sum_and_predictions(self):
        rng = np.random.default_rng(4)
        lg3, lg4, high, text = (rng.standard_normal((5, 3)).astype(np.float32) for _ in range(4))
        report = fuse({3: lg3, 4: lg4}, high, text)
        np.testing.assert_allclose(report.lg_final, lg3 + lg4 + high + text, atol=1e-5)
        np.testing.assert_array_equal(report.predictions, report.lg_final.argmax(axis=1))

    def test_text_isolation_matches_zero_shot(self):
        rng = np.random.default_rng(5)
        high = rng.standard_normal((6, 4)).astype(np.float32)
        text = rng.standard_normal((6, 4)).astype(np.float32)
        local = rng.standard_normal((6, 4)).astype(np.float32)
        weights = BranchWeights.isolate(["text"], [3])
        report = fuse({3: local}, high, text, weights)
        np.testing.assert_array_equal(report.lg_final, text)
        np.testing.assert_array_equal(report.predictions, text.argmax(axis=1))

    def test_identical_branches_triple(self):
        rng = np.random.default_rng(6)
        branch = rng.standard_normal((4, 3)).astype(np.float32)
        report = fuse({3: branch}, branch, branch)
        np.testing.assert_allclose(report.lg_final, 3.0 * branch, rtol=1e-6)

    def test_linearity_in_each_branch(self):
        rng = np.random.default_rng(7)
        a, b, high, text = (rng.standard_normal((3, 4)).astype(np.float32) for _ in range(4))
        zeros = np.zeros_like(high)
        combined = fuse({3: a + b}, zeros, zeros).lg_final
        split = fuse({3: a}, zeros, zeros).lg_final + fuse({3: b}, zeros, zeros).lg_final
        np.testing.assert_allclose(combined, split, atol=1e-6)

    def test_tie_breaks_to_lowest_class(self):
        logits = np.array([[2.0, 2.0, 1.0]], np.float32)
        zeros = np.zeros_like(logits)
        report = fuse({3: logits}, zeros, zeros)
        assert report.predictions[0] == 0

    def test_constant_shift_keeps_predictions(self):
        rng = np.random.default_rng(8)
        lg = rng.standard_normal((6, 5)).astype(np.float32)
        zeros = np.zeros_like(lg)
        base = fuse({3: lg}, zeros, zeros).predictions
        shifted = fuse({3: lg + 10.0}, zeros, zeros).predictions
        np.testing.assert_array_equal(base, shifted)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            fuse({3: np.zeros((2, 3), np.float32)}, np.zeros((2, 4), np.float32),
                 np.zeros((2, 4), np.float32))

    def test_missing_weight_layer(self):
        lg = np.zeros((1, 2), np.float32)
        with pytest.raises(ValidationError, match="missing"):
            fuse({3: lg, 4: lg}, lg, lg, BranchWeights(local={3: 1.0}))

    def test_isolate_unknown_branch(self):
        with pytest.raises(ValidationError, match="unknown"):
            BranchWeights.isolate(["nonsense"], [3, 4])

    def test_branch_agreement_stats(self):
        rng = np.random.default_rng(9)
        lg = rng.standard_normal((8, 3)).astype(np.float32)
        zeros = np.zeros_like(lg)
        report = fuse({3: lg}, zeros, zeros)
        stats = report.branch_agreement()
        assert stats["local3"] == 1.0  # fused == only nonzero branch
        assert set(stats) == {"local3", "high", "text"}


def episode(seed=0, n_classes=3, shots=4, test_per_class=4, separation=10.0):
    bundle, manifest = generate_synthetic(
        n_classes, shots, test_per_class, separation=separation, seed=seed
    )
    support_idx, test_idx = sample_episode(bundle, EpisodeSpec(n_shots=shots, seed=seed), manifest)
    support = bundle.subset(support_idx)
    cache, global_cache = build_cache(support, scale=2)
    return bundle, support, test_idx, cache, global_cache


class TestEvaluate:
    def test_well_separated_perfect_untrained(self):
        bundle, _, test_idx, cache, global_cache = episode(separation=50.0)
        result = evaluate(bundle, test_idx, cache, global_cache)
        assert result.accuracy == 1.0

    def test_duplicated_item_identical_rows(self):
        bundle, _, test_idx, cache, global_cache = episode(seed=1)
        idx = [int(test_idx[0])] * 5
        result = evaluate(bundle, idx, cache, global_cache)
        for row in result.report.lg_final[1:]:
            np.testing.assert_array_equal(result.report.lg_final[0], row)

    def test_training_improves_support_accuracy(self):
        bundle, support, _, cache, global_cache = episode(seed=2, separation=3.0)
        config = TrainConfig(batch_size=4, epochs=30, seed=2)
        untrained = train(support, cache, global_cache, TrainConfig(batch_size=4, epochs=0, seed=2))
        acc_untrained = evaluate(
            support, None, cache, global_cache, params=untrained.params
        ).accuracy
        trained = train(support, cache, global_cache, config)
        acc_trained = evaluate(support, None, cache, global_cache, params=trained.params).accuracy
        assert acc_trained >= acc_untrained

    def test_text_isolation_reproduces_zero_shot(self):
        bundle, _, test_idx, cache, global_cache = episode(seed=3)
        weights = BranchWeights.isolate(["text"], cache.layers)
        result = evaluate(bundle, test_idx, cache, global_cache, weights=weights)
        items = [bundle.items[i] for i in test_idx]
        query = l2_normalize_rows(np.stack([it.high for it in items]).astype(np.float32))
        zero_shot = (query @ global_cache.text_features.T).argmax(axis=1)
        np.testing.assert_array_equal(result.report.predictions, zero_shot)

    def test_class_permutation_equivariance_end_to_end(self):
        # relabel classes by a permutation; predictions permute identically
        bundle, manifest = generate_synthetic(3, 4, 4, separation=5.0, seed=4)
        perm = np.array([2, 0, 1])  # old label -> new label
        permuted = _permute_classes(bundle, perm)
        spec = EpisodeSpec(n_shots=4, seed=0)  # exhaustive draw, order-independent
        sup1, test1 = sample_episode(bundle, spec, manifest)
        sup2, test2 = sample_episode(permuted, spec, manifest)
        c1, g1 = build_cache(bundle.subset(sup1), scale=2)
        c2, g2 = build_cache(permuted.subset(sup2), scale=2)
        r1 = evaluate(bundle, test1, c1, g1)
        r2 = evaluate(permuted, test2, c2, g2)
        np.testing.assert_array_equal(perm[r1.report.predictions], r2.report.predictions)
        assert r1.accuracy == r2.accuracy

    def test_empty_selection_rejected(self):
        bundle, _, _, cache, global_cache = episode(seed=5)
        with pytest.raises(ValidationError, match="empty"):
            evaluate(bundle, [], cache, global_cache)

    def test_records_export(self):
        bundle, _, test_idx, cache, global_cache = episode(seed=6)
        result = evaluate(bundle, test_idx, cache, global_cache)
        records = result_records(result)
        assert len(records) == result.n_items
        first = records[0]
        assert set(first) == {
            "item_id", "label", "prediction", "lg_final", "lg_high", "lg_text",
            "lg_local3", "lg_local4",
        }
        assert first["prediction"] == int(result.report.predictions[0])


def _permute_classes(bundle, perm):
    from mfadapter.dataio import BundleItem, FeatureBundle

    inverse = np.argsort(perm)
    items = [
        BundleItem(
            item_id=it.item_id,
            label=int(perm[it.label]),
            low_maps=it.low_maps,
            high=it.high,
            augmented_views=it.augmented_views,
        )
        for it in bundle.items
    ]
    return FeatureBundle(
        items=items,
        class_names=[bundle.class_names[int(inverse[c])] for c in range(bundle.n_classes)],
        text_features=bundle.text_features[inverse],
        encoder_tag=bundle.encoder_tag,
        geometry=bundle.geometry,
    )
