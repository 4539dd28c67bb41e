import json

import numpy as np
import pytest
import torch
from PIL import Image

from clip_feature_exporter.export import Encoder
from clip_feature_exporter.model import TINY_CONFIG, DualEncoder
from clip_feature_exporter.tokenizer import WordHashTokenizer

CLASS_NAMES = ("church", "dog", "tractor")


@pytest.fixture(scope="session")
def tiny_weights(tmp_path_factory):
    torch.manual_seed(7)
    model = DualEncoder(TINY_CONFIG)
    path = tmp_path_factory.mktemp("weights") / "tiny.pt"
    torch.save(model.state_dict(), path)
    return path


@pytest.fixture(scope="session")
def tiny_encoder(tiny_weights):
    torch.manual_seed(7)
    model = DualEncoder(TINY_CONFIG)
    model.load_state_dict(torch.load(tiny_weights, weights_only=True))
    model.eval()
    return Encoder(model, WordHashTokenizer(TINY_CONFIG.vocab_size), tag="TINY")


@pytest.fixture(scope="session")
def image_folder(tmp_path_factory):
    """Three classes, four images each, mixed sizes; class index drives the
    dominant color so zero-shot style checks have some signal to find."""
    root = tmp_path_factory.mktemp("dataset")
    rng = np.random.default_rng(3)
    for label, cls in enumerate(CLASS_NAMES):
        cls_dir = root / cls
        cls_dir.mkdir()
        for i in range(4):
            h, w = int(rng.integers(70, 100)), int(rng.integers(70, 100))
            arr = rng.integers(0, 80, size=(h, w, 3), dtype=np.uint8)
            arr[..., label % 3] += 120
            Image.fromarray(arr, "RGB").save(cls_dir / f"img{i}.png")
    return root


@pytest.fixture(scope="session")
def split_manifest(image_folder, tmp_path_factory):
    manifest = {}
    for cls in CLASS_NAMES:
        for i in range(4):
            manifest[f"{cls}/img{i}.png"] = "support" if i < 2 else "test"
    path = tmp_path_factory.mktemp("manifest") / "splits.json"
    path.write_text(json.dumps(manifest, sort_keys=True))
    return path
