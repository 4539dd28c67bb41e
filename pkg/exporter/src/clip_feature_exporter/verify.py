"""Consistency checks over an exported bundle: geometry against the known
backbone profiles, embedding row norms, label coverage, and a zero-shot
smoke test through the text embeddings.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .mffb import read_bundle

# per-layer (channels, h, w) and embedding width for the known backbones
GEOMETRY_PROFILES = {
    "RN50": ({3: (1024, 14, 14), 4: (2048, 7, 7)}, 1024),
    "RN101": ({3: (1024, 14, 14), 4: (2048, 7, 7)}, 512),
}

NORM_TOLERANCE = 1e-3


@dataclass
class VerifyReport:
    checks: list[tuple[str, bool, str]] = field(default_factory=list)
    zero_shot_accuracy: float | None = None

    def record(self, name: str, ok: bool, detail: str = ""):
        self.checks.append((name, ok, detail))

    @property
    def ok(self) -> bool:
        return all(ok for _, ok, _ in self.checks)

    def failed(self) -> list[str]:
        return [name for name, ok, _ in self.checks if not ok]


def verify_bundle(path, manifest_path=None, expected_zero_shot=None) -> VerifyReport:
    report = VerifyReport()
    data = read_bundle(path)

    profile = GEOMETRY_PROFILES.get(data.encoder_tag)
    if profile is None:
        report.record("geometry-profile", True, f"no registered profile for {data.encoder_tag!r}")
    else:
        layers, dim = profile
        ok = data.geometry_layers == layers and data.dim == dim
        report.record(
            "geometry-profile", ok,
            f"got layers {data.geometry_layers}, dim {data.dim}",
        )

    shape_ok = all(
        data.low_maps[iid][lid].shape == tuple(data.geometry_layers[lid])
        and data.high[iid].shape == (data.dim,)
        for iid in data.item_ids
        for lid in data.geometry_layers
    )
    report.record("per-item-geometry", shape_ok, "every item matches the recorded shapes")

    high = np.stack([data.high[iid] for iid in data.item_ids])
    high_norms = np.linalg.norm(high.astype(np.float64), axis=1)
    text_norms = np.linalg.norm(data.text.astype(np.float64), axis=1)
    report.record(
        "high-row-norms",
        bool(np.all(np.abs(high_norms - 1.0) <= NORM_TOLERANCE)),
        f"max deviation {np.abs(high_norms - 1.0).max():.2e}",
    )
    report.record(
        "text-row-norms",
        bool(np.all(np.abs(text_norms - 1.0) <= NORM_TOLERANCE)),
        f"max deviation {np.abs(text_norms - 1.0).max():.2e}",
    )

    labels = data.labels.astype(np.int64)
    n = len(data.class_names)
    in_range = bool(np.all((labels >= 0) & (labels < n)))
    coverage = np.bincount(labels[(labels >= 0) & (labels < n)], minlength=n)
    report.record(
        "label-coverage",
        in_range and bool(coverage.min() >= 1),
        f"{int((coverage >= 1).sum())}/{n} classes populated",
    )
    report.record(
        "text-rows-match-classes", data.text.shape[0] == n,
        f"text rows {data.text.shape[0]}, classes {n}",
    )

    # zero-shot smoke test through the text branch
    selected = np.arange(len(data.item_ids))
    if manifest_path:
        with open(manifest_path, encoding="utf-8") as fh:
            manifest = json.load(fh)
        selected = np.array(
            [i for i, iid in enumerate(data.item_ids) if manifest.get(iid) == "test"],
            dtype=np.int64,
        )
    if selected.size:
        sims = high[selected] @ data.text.T
        accuracy = float(np.mean(sims.argmax(axis=1) == labels[selected]))
        report.zero_shot_accuracy = accuracy
        if expected_zero_shot is not None:
            report.record(
                "zero-shot-band",
                abs(100 * accuracy - expected_zero_shot) <= 1.0,
                f"{100 * accuracy:.2f} vs expected {expected_zero_shot:.2f} +/- 1.0",
            )
    return report
