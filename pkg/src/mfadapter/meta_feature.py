"""Multi-scale 2x2 sliding-window unfolding and channel max/mean induction.

A feature map [B x C x h x w] is unfolded with a dilated 2x2 kernel
(stride 1, no padding) into windows; unfoldings at dilations 1..scale are
concatenated along the window axis into a meta-feature [B x c x ms] with
c = 4*C. Reducing the channel axis by max and by mean yields the 2-channel
unit representation that the support cache and the adapter both target.

The tap ordering inside a window is channel-major, then row-major over the
2x2 taps: c0@(0,0), c0@(0,1), c0@(1,0), c0@(1,1), c1@(0,0), ...
This ordering is normative for the file formats: trained adapter weights
and serialized caches are only meaningful against it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, GeometryError, ValidationError

KERNEL = (2, 2)
STRIDE = 1
PADDING = 0
MAX_SCALE = 5


@dataclass(frozen=True)
class UnfoldSpec:
    """Window geometry. Kernel, stride and padding are fixed; only the
    dilation list varies (dilations 1..scale, ascending)."""

    dilations: tuple[int, ...]
    kernel: tuple[int, int] = KERNEL
    stride: int = STRIDE
    padding: int = PADDING

    def __post_init__(self):
        if self.kernel != KERNEL:
            raise ValidationError(f"kernel is fixed at {KERNEL}, got {self.kernel}")
        if self.stride != STRIDE or self.padding != PADDING:
            raise ValidationError("stride is fixed at 1 and padding at 0")
        if not self.dilations:
            raise ValidationError("dilations must be nonempty")
        if any(int(d) != d or d < 1 for d in self.dilations):
            raise ValidationError(f"dilations must be positive integers, got {self.dilations}")
        if list(self.dilations) != sorted(set(self.dilations)):
            raise ValidationError(f"dilations must be strictly increasing, got {self.dilations}")
        if max(self.dilations) > MAX_SCALE:
            raise ValidationError(f"dilations are capped at {MAX_SCALE}, got {self.dilations}")

    @classmethod
    def for_scale(cls, scale: int) -> "UnfoldSpec":
        if int(scale) != scale or not 1 <= scale <= MAX_SCALE:
            raise ValidationError(f"scale must be an integer in [1, {MAX_SCALE}], got {scale}")
        return cls(dilations=tuple(range(1, scale + 1)))


@dataclass
class MetaFeature:
    """Concatenated multi-scale window tensor [B x c x ms]."""

    values: np.ndarray
    layer_id: int
    per_scale_widths: tuple[int, ...]

    @property
    def channels(self) -> int:
        return self.values.shape[1]

    @property
    def window_extent(self) -> int:
        return self.values.shape[2]


@dataclass
class MFUnit:
    """2-channel (max, mean) induction of a meta-feature, [B x 2 x ms]."""

    values: np.ndarray
    layer_id: int
    per_scale_widths: tuple[int, ...]


def window_count(h: int, w: int, d: int) -> int:
    """Number of valid 2x2 windows at dilation d, stride 1, no padding."""
    return (h - d) * (w - d)


def window_extent(h: int, w: int, scale: int) -> int:
    """Total window count ms across dilations 1..scale."""
    return sum(window_count(h, w, d) for d in range(1, scale + 1))


def unfold(feature_map: np.ndarray, d: int, spec: UnfoldSpec | None = None,
           layer_id: int | None = None) -> np.ndarray:
    """Gather every dilated 2x2 window of a [B x C x h x w] map.

    Output is [B x 4C x m_d] with m_d = (h-d)*(w-d); window j = r*(w-d)+col
    holds input positions {(r + dr*d, col + dc*d) : dr, dc in {0, 1}}.
    Pure gather, no arithmetic.
    """
    if spec is not None and d not in spec.dilations:
        raise ValidationError(f"dilation {d} not listed in {spec.dilations}")
    m = np.asarray(feature_map)
    if m.ndim != 4:
        raise DimensionError(f"expected a [B x C x h x w] map, got rank {m.ndim}")
    n_batch, n_chan, h, w = m.shape
    if h - d < 1 or w - d < 1:
        where = f"layer {layer_id}: " if layer_id is not None else ""
        raise GeometryError(
            f"{where}map {h}x{w} too small for dilation {d} "
            f"(needs h > {d} and w > {d} with a 2x2 kernel)"
        )
    taps = np.stack(
        (
            m[:, :, : h - d, : w - d],  # (0, 0)
            m[:, :, : h - d, d:],       # (0, 1)
            m[:, :, d:, : w - d],       # (1, 0)
            m[:, :, d:, d:],            # (1, 1)
        ),
        axis=2,
    )
    return np.ascontiguousarray(taps.reshape(n_batch, n_chan * 4, (h - d) * (w - d)))


def build_meta_feature(feature_map: np.ndarray, scale: int, layer_id: int) -> MetaFeature:
    """Unfold at every dilation 1..scale and concatenate along the window
    axis in ascending dilation order."""
    spec = UnfoldSpec.for_scale(scale)
    m = np.asarray(feature_map)
    if m.ndim != 4:
        raise DimensionError(f"expected a [B x C x h x w] map, got rank {m.ndim}")
    h, w = m.shape[2], m.shape[3]
    pieces = [unfold(m, d, spec, layer_id=layer_id) for d in spec.dilations]
    widths = tuple(window_count(h, w, d) for d in spec.dilations)
    values = pieces[0] if len(pieces) == 1 else np.concatenate(pieces, axis=2)
    return MetaFeature(values=np.ascontiguousarray(values), layer_id=layer_id,
                       per_scale_widths=widths)


def induce_mf_unit(mf: MetaFeature) -> MFUnit:
    """Reduce the channel axis by max and by mean independently per window
    position; channel 0 is the max, channel 1 the mean."""
    v = mf.values
    mx = v.max(axis=1)
    mn = v.mean(axis=1, dtype=np.float64).astype(v.dtype)
    return MFUnit(
        values=np.ascontiguousarray(np.stack((mx, mn), axis=1)),
        layer_id=mf.layer_id,
        per_scale_widths=mf.per_scale_widths,
    )
