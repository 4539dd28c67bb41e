import numpy as np
import pytest
import torch

from clip_feature_exporter.model import (
    RN50_CONFIG,
    RN101_CONFIG,
    TINY_CONFIG,
    DualEncoder,
    build_model,
    config_from_state_dict,
    load_state_dict,
)


class TestConfigRecovery:
    def test_tiny_round_trip(self):
        torch.manual_seed(0)
        model = DualEncoder(TINY_CONFIG)
        assert config_from_state_dict(model.state_dict()) == TINY_CONFIG

    def test_rn_configs_differ_in_embed_dim(self):
        assert RN50_CONFIG.embed_dim == 1024
        assert RN101_CONFIG.embed_dim == 512
        assert RN101_CONFIG.vision_layers == (3, 4, 23, 3)


class TestForward:
    def test_stage_geometry_tiny(self, tiny_encoder):
        x = torch.randn(2, 3, 128, 128)
        maps, pooled = tiny_encoder.encode_images(x)
        assert maps[3].shape == (2, 128, 8, 8)
        assert maps[4].shape == (2, 256, 4, 4)
        assert pooled.shape == (2, 16)

    def test_rn50_stage_geometry(self):
        # the full-size tower produces the standard 14x14 / 7x7 stage maps
        torch.manual_seed(1)
        model = DualEncoder(RN50_CONFIG).eval()
        captured = {}
        model.visual.layer3.register_forward_hook(lambda m, i, o: captured.__setitem__(3, o))
        model.visual.layer4.register_forward_hook(lambda m, i, o: captured.__setitem__(4, o))
        with torch.no_grad():
            emb = model.encode_image(torch.randn(1, 3, 224, 224))
        assert tuple(captured[3].shape) == (1, 1024, 14, 14)
        assert tuple(captured[4].shape) == (1, 2048, 7, 7)
        assert tuple(emb.shape) == (1, 1024)

    def test_deterministic_in_eval_mode(self, tiny_encoder):
        x = torch.randn(3, 3, 128, 128, generator=torch.Generator().manual_seed(5))
        maps1, pooled1 = tiny_encoder.encode_images(x)
        maps2, pooled2 = tiny_encoder.encode_images(x)
        np.testing.assert_array_equal(pooled1, pooled2)
        for lid in (3, 4):
            np.testing.assert_array_equal(maps1[lid], maps2[lid])

    def test_text_encoding_shape(self, tiny_encoder):
        out = tiny_encoder.encode_prompts(["a photo of a dog.", "a photo of a church."])
        assert out.shape == (2, 16)
        assert np.isfinite(out).all()


class TestCheckpointLoading:
    def test_state_dict_round_trip(self, tiny_weights):
        state = load_state_dict(tiny_weights)
        model = build_model(state)
        assert model.config == TINY_CONFIG
        assert not model.training  # eval mode after build

    def test_wrapped_state_dict(self, tmp_path, tiny_weights):
        wrapped = tmp_path / "wrapped.pt"
        torch.save({"state_dict": torch.load(tiny_weights, weights_only=True)}, wrapped)
        model = build_model(load_state_dict(wrapped))
        assert model.config == TINY_CONFIG

    def test_loaded_model_matches_source(self, tiny_weights):
        torch.manual_seed(7)
        source = DualEncoder(TINY_CONFIG).eval()
        source.load_state_dict(torch.load(tiny_weights, weights_only=True))
        rebuilt = build_model(load_state_dict(tiny_weights))
        x = torch.randn(2, 3, 128, 128, generator=torch.Generator().manual_seed(9))
        with torch.no_grad():
            np.testing.assert_array_equal(
                source.encode_image(x).numpy(), rebuilt.encode_image(x).numpy()
            )

    def test_garbage_file_rejected(self, tmp_path):
        bad = tmp_path / "bad.pt"
        bad.write_bytes(b"not a checkpoint")
        with pytest.raises(RuntimeError, match="cannot read weights"):
            load_state_dict(bad)
