"""Dataset -> feature bundle export.

Runs the frozen dual encoder over an image-folder dataset (one
subdirectory per class), tapping the visual tower's stage-3 and stage-4
outputs with forward hooks, attention-pooling the global embedding, and
encoding per-class prompts. Low-level maps are exported raw (all
normalization happens downstream); global and text embeddings are
L2-normalized. Test items get deterministic preprocessing; support items
can additionally carry seeded augmented views. The bundle is written once,
at the end, by a single writer.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np
import torch
from PIL import Image

from .mffb import BundleData, write_bundle
from .model import BACKBONE_CONFIGS, DualEncoder, build_model, load_state_dict
from .prompts import prompts_for_class, templates_for
from .tokenizer import SimpleTokenizer, WordHashTokenizer

IMAGE_MEAN = (0.48145466, 0.4578275, 0.40821073)
IMAGE_STD = (0.26862954, 0.26130258, 0.27577711)

IMAGE_EXTENSIONS = (".jpg", ".jpeg", ".png", ".bmp", ".webp")

STAGE_LAYERS = (3, 4)


@dataclass
class ExportConfig:
    dataset_path: str
    output_path: str
    weights_path: str | None = None
    backbone: str = "RN50"
    prompt_mode: str = "single"
    manifest_path: str | None = None
    aug_views: int = 0
    seed: int = 0
    batch_size: int = 32
    device: str = "cpu"
    bpe_path: str | None = None

    def __post_init__(self):
        if self.backbone not in BACKBONE_CONFIGS:
            raise ValueError(
                f"backbone must be one of {sorted(BACKBONE_CONFIGS)}, got {self.backbone!r}"
            )
        if self.prompt_mode not in ("single", "ensemble"):
            raise ValueError(f"prompt mode must be single or ensemble, got {self.prompt_mode!r}")
        if self.aug_views < 0:
            raise ValueError("aug_views must be >= 0")


class Encoder:
    """Frozen model + tokenizer, exposing stage maps and embeddings."""

    def __init__(self, model: DualEncoder, tokenizer, tag: str, device: str = "cpu"):
        self.model = model.to(device).eval()
        self.tokenizer = tokenizer
        self.tag = tag
        self.device = device
        self.image_size = model.config.image_resolution
        self._captured: dict[int, torch.Tensor] = {}
        for lid in STAGE_LAYERS:
            getattr(model.visual, f"layer{lid}").register_forward_hook(self._keep(lid))

    def _keep(self, lid):
        def hook(_module, _inputs, output):
            self._captured[lid] = output

        return hook

    @torch.no_grad()
    def encode_images(self, batch: torch.Tensor):
        """-> ({layer: [B x C x h x w]}, [B x D] attention-pooled embedding)."""
        self._captured.clear()
        pooled = self.model.encode_image(batch.to(self.device))
        maps = {lid: self._captured[lid].cpu().numpy() for lid in STAGE_LAYERS}
        return maps, pooled.cpu().numpy()

    @torch.no_grad()
    def encode_prompts(self, prompts: list[str]) -> np.ndarray:
        tokens = self.tokenizer.tokenize(prompts, self.model.context_length)
        return self.model.encode_text(tokens.to(self.device)).cpu().numpy()


def load_encoder(config: ExportConfig) -> Encoder:
    """Build the pretrained encoder; fails descriptively before any writes
    when the weights or the merges file are missing."""
    if config.weights_path is None:
        raise FileNotFoundError(
            "no --weights given: exporting needs a pretrained checkpoint "
            "(state dict or TorchScript archive)"
        )
    if not os.path.exists(config.weights_path):
        raise FileNotFoundError(f"weights not found: {config.weights_path}")
    state_dict = load_state_dict(config.weights_path)
    model = build_model(state_dict)
    expected = BACKBONE_CONFIGS[config.backbone]
    if model.config != expected:
        raise ValueError(
            f"checkpoint architecture {model.config} does not match backbone "
            f"{config.backbone} ({expected})"
        )
    if config.backbone == "TINY":
        tokenizer = WordHashTokenizer(model.config.vocab_size)
    else:
        if config.bpe_path is None or not os.path.exists(config.bpe_path or ""):
            raise FileNotFoundError(
                "tokenizer merges file not found; pass --bpe bpe_simple_vocab_16e6.txt.gz"
            )
        tokenizer = SimpleTokenizer(config.bpe_path)
    return Encoder(model, tokenizer, tag=config.backbone, device=config.device)


# ---------------------------------------------------------------------------
# Dataset scanning and preprocessing


@dataclass
class DatasetItem:
    item_id: str
    path: str
    label: int


def scan_image_folder(root) -> tuple[list[DatasetItem], list[str]]:
    """Deterministic scan of a class-per-subdirectory image tree."""
    if not os.path.isdir(root):
        raise FileNotFoundError(f"dataset directory not found: {root}")
    class_names = sorted(
        d for d in os.listdir(root) if os.path.isdir(os.path.join(root, d))
    )
    if not class_names:
        raise FileNotFoundError(f"no class subdirectories under {root}")
    items = []
    for label, cls in enumerate(class_names):
        cls_dir = os.path.join(root, cls)
        for name in sorted(os.listdir(cls_dir)):
            if name.lower().endswith(IMAGE_EXTENSIONS):
                items.append(
                    DatasetItem(item_id=f"{cls}/{name}", path=os.path.join(cls_dir, name), label=label)
                )
    if not items:
        raise FileNotFoundError(f"no images under {root}")
    return items, class_names


def _to_tensor(image: Image.Image) -> torch.Tensor:
    arr = np.asarray(image, dtype=np.float32) / 255.0
    arr = (arr - np.array(IMAGE_MEAN, np.float32)) / np.array(IMAGE_STD, np.float32)
    return torch.from_numpy(arr.transpose(2, 0, 1))


def preprocess_center(image: Image.Image, size: int) -> torch.Tensor:
    """Deterministic eval preprocessing: shorter side to `size` (bicubic),
    center crop, normalize."""
    image = image.convert("RGB")
    w, h = image.size
    scale = size / min(w, h)
    image = image.resize((max(size, round(w * scale)), max(size, round(h * scale))),
                         Image.BICUBIC)
    w, h = image.size
    left, top = (w - size) // 2, (h - size) // 2
    return _to_tensor(image.crop((left, top, left + size, top + size)))


def preprocess_augmented(image: Image.Image, size: int, rng: np.random.Generator) -> torch.Tensor:
    """Seeded random resized crop plus horizontal flip."""
    image = image.convert("RGB")
    w, h = image.size
    area = w * h
    for _ in range(10):
        target = area * rng.uniform(0.6, 1.0)
        ratio = np.exp(rng.uniform(np.log(3 / 4), np.log(4 / 3)))
        cw = int(round(np.sqrt(target * ratio)))
        ch = int(round(np.sqrt(target / ratio)))
        if 0 < cw <= w and 0 < ch <= h:
            left = int(rng.integers(0, w - cw + 1))
            top = int(rng.integers(0, h - ch + 1))
            image = image.crop((left, top, left + cw, top + ch))
            break
    image = image.resize((size, size), Image.BICUBIC)
    if rng.random() < 0.5:
        image = image.transpose(Image.FLIP_LEFT_RIGHT)
    return _to_tensor(image)


# ---------------------------------------------------------------------------
# Export


def _l2_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x.astype(np.float64), axis=-1, keepdims=True)
    return (x / np.maximum(norms, 1e-12)).astype(np.float32)


def encode_class_prompts(encoder: Encoder, class_names: list[str], mode: str) -> np.ndarray:
    """One embedding per class: templates encoded, each normalized, then
    (for the ensemble) averaged and re-normalized."""
    rows = []
    for cls in class_names:
        embeddings = _l2_rows(encoder.encode_prompts(prompts_for_class(cls, mode)))
        rows.append(_l2_rows(embeddings.mean(axis=0, keepdims=True))[0])
    return np.stack(rows)


def export(config: ExportConfig, encoder: Encoder | None = None) -> BundleData:
    """Run the full export and write the bundle to config.output_path."""
    if encoder is None:
        encoder = load_encoder(config)
    items, class_names = scan_image_folder(config.dataset_path)

    manifest = None
    if config.manifest_path:
        with open(config.manifest_path, encoding="utf-8") as fh:
            manifest = json.load(fh)

    size = encoder.image_size
    low_maps: dict[str, dict[int, np.ndarray]] = {}
    high: dict[str, np.ndarray] = {}
    aug_low: dict[str, list[dict[int, np.ndarray]]] = {}
    aug_high: dict[str, list[np.ndarray]] = {}

    def run_batch(tensors, keys, sink_low, sink_high):
        maps, pooled = encoder.encode_images(torch.stack(tensors))
        pooled = _l2_rows(pooled)
        for i, key in enumerate(keys):
            sink_low(key, {lid: maps[lid][i] for lid in maps})
            sink_high(key, pooled[i])

    batch, keys = [], []
    for item in items:
        with Image.open(item.path) as img:
            batch.append(preprocess_center(img, size))
        keys.append(item.item_id)
        if len(batch) == config.batch_size:
            run_batch(batch, keys, low_maps.__setitem__, high.__setitem__)
            batch, keys = [], []
    if batch:
        run_batch(batch, keys, low_maps.__setitem__, high.__setitem__)

    if config.aug_views > 0:
        root_rng = np.random.default_rng(config.seed)
        for item in items:
            if manifest is not None and manifest.get(item.item_id) != "support":
                continue
            aug_low[item.item_id] = []
            aug_high[item.item_id] = []
            with Image.open(item.path) as img:
                tensors = [
                    preprocess_augmented(img, size, root_rng) for _ in range(config.aug_views)
                ]
            run_batch(
                tensors,
                [item.item_id] * config.aug_views,
                lambda key, m: aug_low[key].append(m),
                lambda key, h: aug_high[key].append(h),
            )

    text = encode_class_prompts(encoder, class_names, config.prompt_mode)

    sample = low_maps[items[0].item_id]
    data = BundleData(
        item_ids=[it.item_id for it in items],
        labels=np.array([it.label for it in items], np.float32),
        class_names=class_names,
        encoder_tag=encoder.tag,
        geometry_layers={lid: tuple(sample[lid].shape) for lid in sample},
        dim=text.shape[1],
        text=text,
        low_maps=low_maps,
        high=high,
        aug_low=aug_low,
        aug_high=aug_high,
        extra_meta={
            "prompt_mode": config.prompt_mode,
            "prompt_templates": templates_for(config.prompt_mode),
            "export_seed": config.seed,
        },
    )
    write_bundle(data, config.output_path)
    return data
