"""The single trainable layer: a per-layer pointwise 1-D convolution that
maps meta-features (c channels) to the 2-channel unit shape, plus its
hand-written reverse-mode gradients and the training loop.

Everything else in the pipeline is frozen; gradients flow only to the
convolution weights and biases. The backward pass chains through
label-matmul, the similarity weighting, the similarity product (cache side
constant), row L2-normalization (full Jacobian), the flatten, and the
convolution itself.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

from . import _container as container
from .cache_model import GlobalCache, MFUnitCache, cache_checksum
from .dataio import FeatureBundle
from .errors import DimensionError, FormatError, StateError, ValidationError
from .meta_feature import MAX_SCALE, MetaFeature, MFUnit, build_meta_feature
from .numerics import (
    NORM_EPS,
    adam_step,
    as_f32,
    init_adam_state,
    l2_normalize_rows,
    matmul,
    softmax_cross_entropy,
)

if TYPE_CHECKING:  # pragma: no cover - type-only import, avoids a cycle
    from .fusion import BranchWeights

CHECKPOINT_MAGIC = b"MFAD"
CHECKPOINT_VERSION = 1

# Similarity-to-weight mappings for the retrieval branches. "exp" is the
# plain exponential of the cosine similarity; "tip" is the scaled variant
# exp(-beta * (1 - sim)) common in cache-model adapters, kept behind a flag
# for reproduction studies.
AFFINITY_KINDS = ("exp", "tip")
DEFAULT_TIP_BETA = 5.5


def affinity_weights(sims: np.ndarray, kind: str = "exp",
                     beta: float = DEFAULT_TIP_BETA) -> np.ndarray:
    if kind == "exp":
        return np.exp(sims)
    if kind == "tip":
        return np.exp(-beta * (1.0 - sims))
    raise ValidationError(f"unknown affinity kind {kind!r}, expected one of {AFFINITY_KINDS}")


@dataclass
class LayerParams:
    """Weights of one layer's convolution: weight [2 x c x 1], bias [2]."""

    weight: np.ndarray
    bias: np.ndarray

    @property
    def channels(self) -> int:
        return self.weight.shape[1]


@dataclass
class AdapterParams:
    per_layer: dict[int, LayerParams]
    kernel_width: int = 1

    def copy(self) -> "AdapterParams":
        return AdapterParams(
            per_layer={
                lid: LayerParams(weight=p.weight.copy(), bias=p.bias.copy())
                for lid, p in self.per_layer.items()
            },
            kernel_width=self.kernel_width,
        )


def init_adapter_params(layer_channels: dict[int, int], seed: int = 0,
                        warm_start: bool = False) -> AdapterParams:
    """Fan-in scaled uniform init, uniform(-1/sqrt(c), 1/sqrt(c)).

    With warm_start, channel 1 is set to exact mean-induction weights
    (1/c everywhere, zero bias); channel 0 stays random since the max
    reduction has no linear representation.
    """
    rng = np.random.default_rng(seed)
    per_layer = {}
    for lid in sorted(layer_channels):
        c = int(layer_channels[lid])
        if c < 1:
            raise ValidationError(f"layer {lid}: channel count must be >= 1, got {c}")
        bound = 1.0 / np.sqrt(c)
        weight = rng.uniform(-bound, bound, size=(2, c, 1)).astype(np.float32)
        bias = rng.uniform(-bound, bound, size=(2,)).astype(np.float32)
        if warm_start:
            weight[1, :, 0] = 1.0 / c
            bias[1] = 0.0
        per_layer[lid] = LayerParams(weight=weight, bias=bias)
    return AdapterParams(per_layer=per_layer)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 256
    epochs: int = 100
    seed: int = 0
    scale: int = 2
    layers: tuple[int, ...] = (3, 4)
    weights: "BranchWeights | None" = None
    affinity: str = "exp"
    affinity_beta: float = DEFAULT_TIP_BETA
    warm_start: bool = False

    def __post_init__(self):
        if self.lr < 0:
            raise ValidationError(f"lr must be >= 0, got {self.lr}")
        if self.batch_size < 1:
            raise ValidationError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ValidationError(f"epochs must be >= 0, got {self.epochs}")
        if not 1 <= self.scale <= MAX_SCALE:
            raise ValidationError(f"scale must be in [1, {MAX_SCALE}], got {self.scale}")
        layers = tuple(sorted(set(int(l) for l in self.layers)))
        if not layers or not set(layers) <= {3, 4}:
            raise ValidationError(f"layers must be a nonempty subset of (3, 4), got {self.layers}")
        object.__setattr__(self, "layers", layers)
        if self.affinity not in AFFINITY_KINDS:
            raise ValidationError(f"affinity must be one of {AFFINITY_KINDS}, got {self.affinity}")


def _values(mf) -> np.ndarray:
    if isinstance(mf, (MetaFeature, MFUnit)):
        return mf.values
    return np.asarray(mf)


def adapter_forward(mf, params: LayerParams) -> np.ndarray:
    """Pointwise convolution along the window axis:
    out[b, o, j] = bias[o] + sum_i weight[o, i, 0] * mf[b, i, j]."""
    v = _values(mf)
    if v.ndim != 3:
        raise DimensionError(f"expected [B x c x ms] meta-feature values, got rank {v.ndim}")
    if v.shape[1] != params.channels:
        raise DimensionError(
            f"meta-feature has {v.shape[1]} channels but the adapter expects {params.channels}"
        )
    out = np.einsum("oi,bij->boj", params.weight[:, :, 0], v)
    out += params.bias.astype(out.dtype)[None, :, None]
    return out


def local_logits(adapted, cache: MFUnitCache, layer_id: int,
                 affinity: str = "exp", beta: float = DEFAULT_TIP_BETA) -> np.ndarray:
    """Similarity retrieval against one layer's cache: flatten, normalize
    rows, weight the [B x NK] similarities, aggregate through the one-hot
    label matrix into [B x N] logits."""
    v = _values(adapted)
    if v.ndim != 3:
        raise DimensionError(f"expected [B x 2 x ms] adapted values, got rank {v.ndim}")
    if layer_id not in cache.per_layer:
        raise ValidationError(f"cache holds layers {cache.layers}, not {layer_id}")
    rows = cache.per_layer[layer_id]
    flat = v.reshape(v.shape[0], -1)
    if flat.shape[1] != rows.shape[1]:
        raise DimensionError(
            f"layer {layer_id}: flattened width {flat.shape[1]} does not match "
            f"cache width {rows.shape[1]} (scale or geometry mismatch)"
        )
    q = l2_normalize_rows(flat)
    sims = matmul(q, rows.T)
    return matmul(affinity_weights(sims, affinity, beta), cache.labels_onehot)


# ---------------------------------------------------------------------------
# Forward with retained intermediates + manual backward


@dataclass
class _LayerTape:
    layer_id: int
    inputs: np.ndarray        # [B x c x ms] meta-feature values
    inv_norm: np.ndarray      # [B] 1 / max(||row||, eps), in working dtype
    active: np.ndarray        # [B] rows with ||row|| > eps
    norms: np.ndarray         # [B] float64 row norms
    normed: np.ndarray        # [B x 2ms] normalized rows
    sim_weights: np.ndarray   # [B x NK] affinity-weighted similarities
    sim_grad_factor: float    # d(weight)/d(sim) = factor * weight


@dataclass
class ForwardState:
    """Intermediates retained by forward_local for one backward call."""

    tapes: dict[int, _LayerTape]
    cache: MFUnitCache
    consumed: bool = False


def forward_local(mf_by_layer: dict[int, np.ndarray], params: AdapterParams,
                  cache: MFUnitCache, affinity: str = "exp",
                  beta: float = DEFAULT_TIP_BETA) -> tuple[dict[int, np.ndarray], ForwardState]:
    """Adapter forward through every layer, keeping what backward needs.

    Returns per-layer local logits and the retained state.
    """
    logits = {}
    tapes = {}
    for lid in sorted(mf_by_layer):
        if lid not in params.per_layer:
            raise ValidationError(f"adapter has no parameters for layer {lid}")
        v = _values(mf_by_layer[lid])
        adapted = adapter_forward(v, params.per_layer[lid])
        flat = adapted.reshape(adapted.shape[0], -1)
        rows = cache.per_layer.get(lid)
        if rows is None:
            raise ValidationError(f"cache holds layers {cache.layers}, not {lid}")
        if flat.shape[1] != rows.shape[1]:
            raise DimensionError(
                f"layer {lid}: flattened width {flat.shape[1]} does not match "
                f"cache width {rows.shape[1]}"
            )
        norms = np.sqrt(np.einsum("ij,ij->i", flat, flat, dtype=np.float64))
        inv_norm = (1.0 / np.maximum(norms, NORM_EPS)).astype(flat.dtype)
        normed = flat * inv_norm[:, None]
        sims = matmul(normed, rows.T)
        weights = affinity_weights(sims, affinity, beta)
        logits[lid] = matmul(weights, cache.labels_onehot)
        tapes[lid] = _LayerTape(
            layer_id=lid,
            inputs=v,
            inv_norm=inv_norm,
            active=norms > NORM_EPS,
            norms=norms,
            normed=normed,
            sim_weights=weights,
            sim_grad_factor=1.0 if affinity == "exp" else beta,
        )
    return logits, ForwardState(tapes=tapes, cache=cache)


@dataclass
class LayerGrads:
    weight: np.ndarray  # [2 x c x 1]
    bias: np.ndarray    # [2]


def backward(grad_logits: np.ndarray, state: ForwardState,
             local_weights: dict[int, float] | None = None) -> dict[int, LayerGrads]:
    """Chain the loss gradient at the fused logits back to every layer's
    weight and bias. The cache is a constant and receives no gradient.

    `grad_logits` is d(loss)/d(fused logits) [B x N]; with branch weights,
    each layer sees its weight times that. The state is single-use.
    """
    if state.consumed:
        raise StateError("forward intermediates already consumed by a previous backward call")
    if not state.tapes:
        raise StateError("no forward intermediates retained; run forward_local first")
    state.consumed = True

    grad_logits = np.asarray(grad_logits)
    grads = {}
    for lid, tape in state.tapes.items():
        w_branch = 1.0 if local_weights is None else float(local_weights.get(lid, 1.0))
        g = grad_logits * np.asarray(w_branch, dtype=grad_logits.dtype)
        rows = state.cache.per_layer[lid]
        # label aggregation: lg = weights @ L
        d_weights = matmul(g, state.cache.labels_onehot.T)
        # similarity weighting: d/d(sim) = factor * weight
        d_sims = d_weights * tape.sim_weights * tape.sim_grad_factor
        # similarity product: sims = normed @ rows^T
        d_normed = matmul(d_sims, rows)
        # row normalization q = f / max(||f||, eps):
        #   dL/df = dq / m - q (q . dq) / ||f||   (||f|| > eps)
        #   dL/df = dq / eps                      (zero rows: m = eps)
        q_dot = np.einsum("ij,ij->i", tape.normed, d_normed, dtype=np.float64)
        coef = np.where(tape.active, q_dot / np.maximum(tape.norms, NORM_EPS), 0.0)
        d_flat = d_normed * tape.inv_norm[:, None] - tape.normed * coef[:, None].astype(
            d_normed.dtype
        )
        # flatten + pointwise convolution
        d_adapted = d_flat.reshape(d_flat.shape[0], 2, -1)
        d_w = np.einsum("boj,bij->oi", d_adapted, tape.inputs)[:, :, None]
        d_b = d_adapted.sum(axis=(0, 2))
        grads[lid] = LayerGrads(weight=d_w, bias=d_b)
    return grads


# ---------------------------------------------------------------------------
# Training


@dataclass
class TrainResult:
    params: AdapterParams
    loss_history: list[float]
    config: TrainConfig


def _stack_variants(items, layer_ids, scale):
    """Precompute meta-features and normalized embeddings for every item
    variant (the base encoding plus any pre-exported augmented views)."""
    variant_mfs = []   # per item: dict layer -> [n_var x c x ms]
    variant_high = []  # per item: [n_var x D]
    for it in items:
        sources = it.augmented_views if it.augmented_views else [it]
        mfs = {
            lid: np.stack(
                [build_meta_feature(s.low_maps[lid][None], scale, lid).values[0] for s in sources]
            )
            for lid in layer_ids
        }
        variant_mfs.append(mfs)
        variant_high.append(l2_normalize_rows(as_f32(np.stack([s.high for s in sources]))))
    return variant_mfs, variant_high


def train(support: FeatureBundle, cache: MFUnitCache, global_cache: GlobalCache,
          config: TrainConfig = TrainConfig()) -> TrainResult:
    """Train the adapter on the support set against its own frozen cache.

    Each epoch shuffles the NK items (seeded), batches them, runs the three
    branches, takes cross-entropy on the fused logits, backpropagates into
    the convolution parameters only, and applies Adam. Deterministic given
    the seed; verifies the caches are byte-identical afterwards.
    """
    from .fusion import BranchWeights, fuse, high_logits, text_logits

    if config.scale != cache.scale:
        raise ValidationError(
            f"config scale {config.scale} does not match cache scale {cache.scale}"
        )
    if tuple(config.layers) != cache.layers:
        raise ValidationError(
            f"config layers {config.layers} do not match cache layers {cache.layers}"
        )

    frozen_before = cache_checksum(cache, global_cache)

    layer_ids = list(cache.layers)
    labels = support.labels()
    n_items = len(support.items)
    if n_items != cache.labels_onehot.shape[0]:
        raise ValidationError(
            f"support set has {n_items} items but the cache holds "
            f"{cache.labels_onehot.shape[0]} rows"
        )

    variant_mfs, variant_high = _stack_variants(support.items, layer_ids, config.scale)
    n_variants = np.array([h.shape[0] for h in variant_high])
    static_variants = bool(np.all(n_variants == 1))

    seed_seq = np.random.SeedSequence(config.seed)
    init_seed, loop_seed = seed_seq.spawn(2)
    params = init_adapter_params(
        {lid: variant_mfs[0][lid].shape[1] for lid in layer_ids},
        seed=init_seed,
        warm_start=config.warm_start,
    )
    weights = config.weights if config.weights is not None else BranchWeights.uniform(layer_ids)

    if static_variants:
        mf_all = {lid: np.concatenate([m[lid] for m in variant_mfs]) for lid in layer_ids}
        high_all = np.concatenate(variant_high)

    opt = {
        lid: {
            "weight": init_adam_state(params.per_layer[lid].weight, lr=config.lr),
            "bias": init_adam_state(params.per_layer[lid].bias, lr=config.lr),
        }
        for lid in layer_ids
    }

    rng = np.random.default_rng(loop_seed)
    loss_history: list[float] = []
    for _ in range(config.epochs):
        order = rng.permutation(n_items)
        if not static_variants:
            chosen = np.array([rng.integers(nv) for nv in n_variants])
        epoch_loss = 0.0
        for start in range(0, n_items, config.batch_size):
            batch = order[start : start + config.batch_size]
            if static_variants:
                mf_batch = {lid: mf_all[lid][batch] for lid in layer_ids}
                high_batch = high_all[batch]
            else:
                mf_batch = {
                    lid: np.stack([variant_mfs[i][lid][chosen[i]] for i in batch])
                    for lid in layer_ids
                }
                high_batch = np.stack([variant_high[i][chosen[i]] for i in batch])

            lg_local, fwd_state = forward_local(
                mf_batch, params, cache, config.affinity, config.affinity_beta
            )
            lg_high = high_logits(
                high_batch, global_cache, cache.labels_onehot,
                affinity=config.affinity, beta=config.affinity_beta,
            )
            lg_text = text_logits(high_batch, global_cache.text_features)
            report = fuse(lg_local, lg_high, lg_text, weights)
            loss, grad = softmax_cross_entropy(report.lg_final, labels[batch])
            grads = backward(grad, fwd_state, local_weights=weights.local)
            for lid in layer_ids:
                p = params.per_layer[lid]
                new_w, opt[lid]["weight"] = adam_step(p.weight, grads[lid].weight, opt[lid]["weight"])
                new_b, opt[lid]["bias"] = adam_step(p.bias, grads[lid].bias, opt[lid]["bias"])
                params.per_layer[lid] = LayerParams(weight=new_w, bias=new_b)
            epoch_loss += loss * len(batch)
        loss_history.append(epoch_loss / n_items)

    if cache_checksum(cache, global_cache) != frozen_before:
        raise StateError("training mutated the frozen cache")
    return TrainResult(params=params, loss_history=loss_history, config=config)


# ---------------------------------------------------------------------------
# MFAD checkpoints


def _config_to_json(config: TrainConfig) -> dict:
    from .fusion import BranchWeights  # noqa: F401  (type round-trip below)

    weights = None
    if config.weights is not None:
        weights = config.weights.to_json()
    return {
        "lr": config.lr,
        "batch_size": config.batch_size,
        "epochs": config.epochs,
        "seed": config.seed,
        "scale": config.scale,
        "layers": list(config.layers),
        "weights": weights,
        "affinity": config.affinity,
        "affinity_beta": config.affinity_beta,
        "warm_start": config.warm_start,
    }


def _config_from_json(obj: dict) -> TrainConfig:
    from .fusion import BranchWeights

    weights = obj.get("weights")
    return TrainConfig(
        lr=float(obj["lr"]),
        batch_size=int(obj["batch_size"]),
        epochs=int(obj["epochs"]),
        seed=int(obj["seed"]),
        scale=int(obj["scale"]),
        layers=tuple(obj["layers"]),
        weights=None if weights is None else BranchWeights.from_json(weights),
        affinity=str(obj.get("affinity", "exp")),
        affinity_beta=float(obj.get("affinity_beta", DEFAULT_TIP_BETA)),
        warm_start=bool(obj.get("warm_start", False)),
    )


def serialize_checkpoint(params: AdapterParams, config: TrainConfig) -> bytes:
    layer_ids = sorted(params.per_layer)
    header = struct.pack("<I", len(layer_ids))
    for lid in layer_ids:
        header += struct.pack("<IQ", lid, params.per_layer[lid].channels)
    builder = container.Builder(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, header)
    for lid in layer_ids:
        builder.add_array(f"layer{lid}/weight", params.per_layer[lid].weight)
        builder.add_array(f"layer{lid}/bias", params.per_layer[lid].bias)
    builder.add_bytes(
        "train_config", json.dumps(_config_to_json(config), sort_keys=True).encode("utf-8")
    )
    return builder.tobytes()


def deserialize_checkpoint(data: bytes) -> tuple[AdapterParams, TrainConfig]:
    cur = container.open_container(data, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)
    n_layers = cur.u32("layer count")
    if n_layers == 0 or n_layers > 16:
        cur.fail(f"implausible layer count {n_layers}")
    channels = {}
    for _ in range(n_layers):
        lid = cur.u32("layer id")
        channels[lid] = cur.u64("channel count")
    records = container.read_index(cur)

    def need(name):
        if name not in records:
            cur.fail(f"missing required record {name!r}")
        return records[name]

    per_layer = {}
    for lid, c in channels.items():
        weight = container.record_array(cur, need(f"layer{lid}/weight"))
        bias = container.record_array(cur, need(f"layer{lid}/bias"))
        if weight.shape != (2, c, 1):
            cur.fail(f"layer {lid} weight shape {weight.shape} != (2, {c}, 1)")
        if bias.shape != (2,):
            cur.fail(f"layer {lid} bias shape {bias.shape} != (2,)")
        per_layer[lid] = LayerParams(weight=weight, bias=bias)
    try:
        config = _config_from_json(
            json.loads(container.record_bytes(cur, need("train_config")).decode("utf-8"))
        )
    except FormatError:
        raise
    except Exception as exc:
        raise FormatError(f"malformed train_config record: {exc}") from exc
    if not np.all([np.isfinite(p.weight).all() and np.isfinite(p.bias).all()
                   for p in per_layer.values()]):
        raise FormatError("checkpoint holds non-finite parameters")
    return AdapterParams(per_layer=per_layer), config


def save_checkpoint(path, params: AdapterParams, config: TrainConfig) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize_checkpoint(params, config))


def load_checkpoint(path) -> tuple[AdapterParams, TrainConfig]:
    with open(path, "rb") as fh:
        return deserialize_checkpoint(fh.read())
