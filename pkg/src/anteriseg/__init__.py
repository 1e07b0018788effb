"""Batch toolkit for anterior-segment screening datasets.

Quality scoring and relabeling, preprocessing and augmentation,
contrastive and weighted-classification loss math, evaluation metrics
and statistics, and regional attention auditing, all behind one
deterministic CLI.
"""

__version__ = "0.1.0"

from .errors import TensorFormatError, ValidationError
from .imgcore import (
    BitMask,
    ImageGray8,
    ImageRGB8,
    Tensor32,
    load_image,
    read_tensor,
    rgb_to_hsv,
    rgb_to_lab,
    save_image,
    to_grayscale,
    write_tensor,
)
from .pipeline import (
    CLASSES,
    GAZES,
    PROVENANCES,
    SPLITS,
    DatasetManifest,
    ManifestRecord,
    derive_rng,
    read_manifest,
    stratified_split,
    write_manifest,
)
from .quality import QualityFeatures, inflammation_score, score_image

__all__ = [
    "__version__",
    "ValidationError",
    "TensorFormatError",
    "ImageRGB8",
    "ImageGray8",
    "BitMask",
    "Tensor32",
    "load_image",
    "save_image",
    "read_tensor",
    "write_tensor",
    "rgb_to_hsv",
    "rgb_to_lab",
    "to_grayscale",
    "CLASSES",
    "GAZES",
    "SPLITS",
    "PROVENANCES",
    "ManifestRecord",
    "DatasetManifest",
    "read_manifest",
    "write_manifest",
    "derive_rng",
    "stratified_split",
    "QualityFeatures",
    "inflammation_score",
    "score_image",
]
