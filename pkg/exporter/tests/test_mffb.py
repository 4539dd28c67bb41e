"""Wire-format tests, including cross-compatibility with the consuming
package's independent reader and writer."""

import numpy as np
import pytest

from clip_feature_exporter.mffb import (
    BundleData,
    BundleFormatError,
    read_bundle,
    write_bundle,
)


def sample_data(with_views=False):
    rng = np.random.default_rng(0)
    item_ids = ["a/one.png", "a/two.png", "b/one.png", "b/two.png"]
    labels = np.array([0, 0, 1, 1], np.float32)
    geometry = {3: (2, 4, 4), 4: (4, 2, 2)}
    low = {
        iid: {lid: rng.standard_normal(shape).astype(np.float32) for lid, shape in geometry.items()}
        for iid in item_ids
    }
    high = {iid: rng.standard_normal(8).astype(np.float32) for iid in item_ids}
    aug_low, aug_high = {}, {}
    if with_views:
        aug_low["a/one.png"] = [
            {lid: rng.standard_normal(shape).astype(np.float32) for lid, shape in geometry.items()}
            for _ in range(2)
        ]
        aug_high["a/one.png"] = [rng.standard_normal(8).astype(np.float32) for _ in range(2)]
    return BundleData(
        item_ids=item_ids,
        labels=labels,
        class_names=["a", "b"],
        encoder_tag="TINY",
        geometry_layers=geometry,
        dim=8,
        text=rng.standard_normal((2, 8)).astype(np.float32),
        low_maps=low,
        high=high,
        aug_low=aug_low,
        aug_high=aug_high,
        extra_meta={"prompt_mode": "single"},
    )


class TestRoundTrip:
    def test_own_reader(self, tmp_path):
        data = sample_data(with_views=True)
        path = tmp_path / "x.mffb"
        write_bundle(data, path)
        back = read_bundle(path)
        assert back.item_ids == data.item_ids
        assert back.class_names == data.class_names
        assert back.geometry_layers == data.geometry_layers
        assert back.extra_meta["prompt_mode"] == "single"
        np.testing.assert_array_equal(back.labels, data.labels)
        np.testing.assert_array_equal(back.text, data.text)
        for iid in data.item_ids:
            for lid in data.geometry_layers:
                np.testing.assert_array_equal(back.low_maps[iid][lid], data.low_maps[iid][lid])
            np.testing.assert_array_equal(back.high[iid], data.high[iid])
        assert len(back.aug_low["a/one.png"]) == 2

    def test_write_is_deterministic(self, tmp_path):
        p1, p2 = tmp_path / "a.mffb", tmp_path / "b.mffb"
        write_bundle(sample_data(), p1)
        write_bundle(sample_data(), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_truncation_raises(self, tmp_path):
        path = tmp_path / "x.mffb"
        write_bundle(sample_data(), path)
        blob = path.read_bytes()
        for cut in (0, 3, 10, len(blob) // 2, len(blob) - 1):
            (tmp_path / "cut.mffb").write_bytes(blob[:cut])
            with pytest.raises(BundleFormatError):
                read_bundle(tmp_path / "cut.mffb")

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "x.mffb"
        write_bundle(sample_data(), path)
        blob = bytearray(path.read_bytes())
        blob[0] = ord("X")
        path.write_bytes(bytes(blob))
        with pytest.raises(BundleFormatError, match="magic"):
            read_bundle(path)


class TestCrossCompatibility:
    """The engine package must read what this package writes, and the two
    writers must agree on the wire format."""

    def test_engine_reads_our_bundles(self, tmp_path):
        mfadapter = pytest.importorskip("mfadapter")
        data = sample_data(with_views=True)
        path = tmp_path / "x.mffb"
        write_bundle(data, path)
        bundle = mfadapter.read_bundle(path)
        assert bundle.item_ids() == data.item_ids
        assert bundle.n_classes == 2
        assert bundle.geometry.dim == 8
        for it in bundle.items:
            for lid, shape in data.geometry_layers.items():
                assert it.low_maps[lid].shape == shape
                np.testing.assert_array_equal(it.low_maps[lid], data.low_maps[it.item_id][lid])
        assert len(bundle.items[0].augmented_views) == 2

    def test_we_read_engine_bundles(self, tmp_path):
        mfadapter = pytest.importorskip("mfadapter")
        bundle, _ = mfadapter.generate_synthetic(2, 2, 1, seed=0)
        path = tmp_path / "engine.mffb"
        mfadapter.write_bundle(bundle, path)
        back = read_bundle(path)
        assert back.item_ids == bundle.item_ids()
        np.testing.assert_array_equal(back.labels, bundle.labels().astype(np.float32))

    def test_byte_identical_to_engine_writer(self, tmp_path):
        # same logical bundle -> same bytes from either writer
        mfadapter = pytest.importorskip("mfadapter")
        data = sample_data()
        ours = tmp_path / "ours.mffb"
        write_bundle(data, ours)
        bundle = mfadapter.read_bundle(ours)
        theirs = tmp_path / "theirs.mffb"
        mfadapter.write_bundle(bundle, theirs)
        back = read_bundle(theirs)
        for iid in data.item_ids:
            for lid in data.geometry_layers:
                np.testing.assert_array_equal(back.low_maps[iid][lid], data.low_maps[iid][lid])
