"""Few-shot image classification on precomputed encoder features.

The pipeline: low-level feature maps are unfolded into multi-scale window
meta-features and reduced (max/mean) into 2-channel units; a frozen
support-set cache of those units, global embeddings, and one-hot labels is
queried by cosine similarity; a single trainable pointwise convolution
adapts query meta-features into the unit space; local, high-level, and
text logits sum into the final prediction.
"""

from .adapter import (
    AdapterParams,
    LayerParams,
    TrainConfig,
    TrainResult,
    adapter_forward,
    backward,
    forward_local,
    init_adapter_params,
    load_checkpoint,
    local_logits,
    save_checkpoint,
    train,
)
from .cache_model import (
    GlobalCache,
    MFUnitCache,
    build_cache,
    cache_checksum,
    deserialize_cache,
    one_hot,
    read_cache,
    serialize_cache,
    write_cache,
)
from .dataio import (
    RN50_PROFILE,
    RN101_PROFILE,
    AugmentedView,
    BundleGeometry,
    BundleItem,
    EpisodeSpec,
    FeatureBundle,
    LayerGeometry,
    bundle_checksum,
    generate_synthetic,
    read_bundle,
    read_manifest,
    sample_episode,
    write_bundle,
    write_manifest,
)
from .errors import (
    DimensionError,
    FormatError,
    GeometryError,
    NonFiniteError,
    StateError,
    ValidationError,
)
from .fusion import (
    BranchWeights,
    EvalResult,
    LogitsReport,
    evaluate,
    fuse,
    high_logits,
    result_records,
    text_logits,
)
from .meta_feature import (
    MetaFeature,
    MFUnit,
    UnfoldSpec,
    build_meta_feature,
    induce_mf_unit,
    unfold,
    window_count,
    window_extent,
)
from .numerics import (
    AdamState,
    adam_step,
    init_adam_state,
    l2_normalize_rows,
    matmul,
    softmax_cross_entropy,
)

__version__ = "0.1.0"
