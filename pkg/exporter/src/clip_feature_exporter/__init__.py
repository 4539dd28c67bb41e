"""Offline feature exporter: runs a frozen contrastive dual encoder over
image datasets and writes MFFB feature bundles for the classification
engine."""

from .export import Encoder, ExportConfig, export, load_encoder, scan_image_folder
from .mffb import BundleData, BundleFormatError, read_bundle, write_bundle
from .model import (
    BACKBONE_CONFIGS,
    RN50_CONFIG,
    RN101_CONFIG,
    TINY_CONFIG,
    DualEncoder,
    build_model,
    config_from_state_dict,
)
from .tokenizer import SimpleTokenizer, WordHashTokenizer
from .verify import VerifyReport, verify_bundle

__version__ = "0.1.0"
