"""Combines the per-layer local retrieval logits with the high-level
retrieval and text-similarity branches into the final prediction.

The default fusion is an unweighted elementwise sum; per-branch weights
exist so a branch can be isolated or re-balanced in ablation runs without
touching the math of any branch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .adapter import (
    DEFAULT_TIP_BETA,
    AdapterParams,
    adapter_forward,
    affinity_weights,
    local_logits,
)
from .cache_model import GlobalCache, MFUnitCache
from .dataio import FeatureBundle
from .errors import DimensionError, ValidationError
from .meta_feature import build_meta_feature, induce_mf_unit
from .numerics import as_f32, l2_normalize_rows, matmul

BRANCH_HIGH = "high"
BRANCH_TEXT = "text"


@dataclass(frozen=True)
class BranchWeights:
    """Multipliers applied at fusion; all 1.0 reproduces the plain sum."""

    local: dict[int, float]
    high: float = 1.0
    text: float = 1.0

    @classmethod
    def uniform(cls, layer_ids) -> "BranchWeights":
        return cls(local={int(l): 1.0 for l in layer_ids})

    @classmethod
    def isolate(cls, branches, layer_ids) -> "BranchWeights":
        """Weights that keep only the named branches ('local', 'local3',
        'local4', 'high', 'text'); everything else is zeroed."""
        branches = set(branches)
        known = {"local", BRANCH_HIGH, BRANCH_TEXT} | {f"local{l}" for l in layer_ids}
        unknown = branches - known
        if unknown:
            raise ValidationError(f"unknown branches {sorted(unknown)}; choose from {sorted(known)}")
        local = {
            int(l): 1.0 if ("local" in branches or f"local{l}" in branches) else 0.0
            for l in layer_ids
        }
        return cls(
            local=local,
            high=1.0 if BRANCH_HIGH in branches else 0.0,
            text=1.0 if BRANCH_TEXT in branches else 0.0,
        )

    def to_json(self) -> dict:
        return {"local": {str(l): w for l, w in sorted(self.local.items())},
                "high": self.high, "text": self.text}

    @classmethod
    def from_json(cls, obj: dict) -> "BranchWeights":
        return cls(
            local={int(l): float(w) for l, w in obj["local"].items()},
            high=float(obj["high"]),
            text=float(obj["text"]),
        )


@dataclass
class LogitsReport:
    """Per-branch and fused logits for a batch, plus argmax predictions."""

    lg_local: dict[int, np.ndarray]
    lg_high: np.ndarray
    lg_text: np.ndarray
    lg_final: np.ndarray
    predictions: np.ndarray

    def branch_agreement(self) -> dict[str, float]:
        """Fraction of items where each branch's own argmax matches the
        fused prediction."""
        out = {}
        for lid, lg in sorted(self.lg_local.items()):
            out[f"local{lid}"] = float(np.mean(lg.argmax(axis=1) == self.predictions))
        out[BRANCH_HIGH] = float(np.mean(self.lg_high.argmax(axis=1) == self.predictions))
        out[BRANCH_TEXT] = float(np.mean(self.lg_text.argmax(axis=1) == self.predictions))
        return out


def high_logits(query_high: np.ndarray, global_cache: GlobalCache,
                labels_onehot: np.ndarray, affinity: str = "exp",
                beta: float = DEFAULT_TIP_BETA) -> np.ndarray:
    """Retrieval over the support set's global embeddings: weight the
    [B x NK] similarities and aggregate through the one-hot labels.
    Both operand sides must carry L2-normalized rows."""
    q = np.asarray(query_high)
    if q.ndim != 2:
        raise DimensionError(f"expected [B x D] query embeddings, got rank {q.ndim}")
    if q.shape[1] != global_cache.dim:
        raise DimensionError(
            f"query dim {q.shape[1]} does not match cache dim {global_cache.dim}"
        )
    sims = matmul(q, global_cache.high_features.T)
    return matmul(affinity_weights(sims, affinity, beta), labels_onehot)


def text_logits(query_high: np.ndarray, text_features: np.ndarray) -> np.ndarray:
    """Plain cosine-similarity logits against the per-class text embeddings
    (no exponential, no label aggregation); this branch in isolation is the
    zero-shot classifier."""
    q = np.asarray(query_high)
    t = np.asarray(text_features)
    if q.ndim != 2 or t.ndim != 2:
        raise DimensionError("text_logits expects rank-2 operands")
    if q.shape[1] != t.shape[1]:
        raise DimensionError(f"query dim {q.shape[1]} does not match text dim {t.shape[1]}")
    return matmul(q, t.T)


def fuse(lg_local: dict[int, np.ndarray], lg_high: np.ndarray, lg_text: np.ndarray,
         weights: BranchWeights | None = None) -> LogitsReport:
    """Weighted elementwise sum of all branches (default weights 1.0) and
    argmax predictions; ties break to the lowest class index."""
    lg_high = np.asarray(lg_high)
    lg_text = np.asarray(lg_text)
    shape = lg_high.shape
    if lg_high.ndim != 2 or lg_text.shape != shape:
        raise DimensionError(
            f"branch shapes disagree: high {lg_high.shape}, text {lg_text.shape}"
        )
    for lid, lg in lg_local.items():
        if np.asarray(lg).shape != shape:
            raise DimensionError(f"local layer {lid} shape {np.asarray(lg).shape} != {shape}")
    if weights is None:
        weights = BranchWeights.uniform(lg_local.keys())
    missing = set(lg_local) - set(weights.local)
    if missing:
        raise ValidationError(f"branch weights missing local layers {sorted(missing)}")

    final = weights.high * lg_high + weights.text * lg_text
    for lid, lg in sorted(lg_local.items()):
        final = final + weights.local[lid] * np.asarray(lg)
    return LogitsReport(
        lg_local={lid: np.asarray(lg) for lid, lg in lg_local.items()},
        lg_high=lg_high,
        lg_text=lg_text,
        lg_final=final,
        predictions=final.argmax(axis=1),
    )


@dataclass
class EvalResult:
    accuracy: float
    n_items: int
    per_branch_accuracy: dict[str, float]
    report: LogitsReport
    item_ids: list[str]
    labels: np.ndarray


def evaluate(bundle: FeatureBundle, indices, cache: MFUnitCache,
             global_cache: GlobalCache, params: AdapterParams | None = None,
             weights: BranchWeights | None = None, affinity: str = "exp",
             beta: float = DEFAULT_TIP_BETA, batch_size: int = 256) -> EvalResult:
    """Top-1 accuracy of the fused prediction over the given bundle items.

    With `params` the local branches run through the adapter; without, they
    use the parameter-free max/mean induction (the pure retrieval path).
    Results are independent of the batch partition.
    """
    if indices is None:
        indices = np.arange(len(bundle.items))
    indices = np.asarray(indices, dtype=np.int64)
    if indices.size == 0:
        raise ValidationError("nothing to evaluate: empty index set")

    items = [bundle.items[i] for i in indices]
    layer_ids = list(cache.layers)
    if params is not None:
        missing = [l for l in layer_ids if l not in params.per_layer]
        if missing:
            raise ValidationError(f"adapter checkpoint lacks layers {missing}")

    local_parts = {lid: [] for lid in layer_ids}
    high_parts = []
    text_parts = []
    for start in range(0, len(items), batch_size):
        chunk = items[start : start + batch_size]
        for lid in layer_ids:
            maps = np.stack([it.low_maps[lid] for it in chunk])
            mf = build_meta_feature(maps, cache.scale, lid)
            if params is not None:
                adapted = adapter_forward(mf, params.per_layer[lid])
            else:
                adapted = induce_mf_unit(mf).values
            local_parts[lid].append(local_logits(adapted, cache, lid, affinity, beta))
        q_high = l2_normalize_rows(as_f32(np.stack([it.high for it in chunk])))
        high_parts.append(high_logits(q_high, global_cache, cache.labels_onehot, affinity, beta))
        text_parts.append(text_logits(q_high, global_cache.text_features))

    lg_local = {lid: np.concatenate(parts) for lid, parts in local_parts.items()}
    report = fuse(lg_local, np.concatenate(high_parts), np.concatenate(text_parts), weights)

    labels = np.array([it.label for it in items], dtype=np.int64)
    per_branch = {
        f"local{lid}": float(np.mean(lg.argmax(axis=1) == labels))
        for lid, lg in sorted(lg_local.items())
    }
    per_branch[BRANCH_HIGH] = float(np.mean(report.lg_high.argmax(axis=1) == labels))
    per_branch[BRANCH_TEXT] = float(np.mean(report.lg_text.argmax(axis=1) == labels))
    return EvalResult(
        accuracy=float(np.mean(report.predictions == labels)),
        n_items=len(items),
        per_branch_accuracy=per_branch,
        report=report,
        item_ids=[it.item_id for it in items],
        labels=labels,
    )


def result_records(result: EvalResult) -> list[dict]:
    """Line-delimited-record form of an evaluation: one dict per item with
    its per-branch logits, prediction, and label."""
    records = []
    for i, item_id in enumerate(result.item_ids):
        rec = {
            "item_id": item_id,
            "label": int(result.labels[i]),
            "prediction": int(result.report.predictions[i]),
            "lg_final": [float(x) for x in result.report.lg_final[i]],
            "lg_high": [float(x) for x in result.report.lg_high[i]],
            "lg_text": [float(x) for x in result.report.lg_text[i]],
        }
        for lid, lg in sorted(result.report.lg_local.items()):
            rec[f"lg_local{lid}"] = [float(x) for x in lg[i]]
        records.append(rec)
    return records
