"""Instance-segmentation dataset tooling and COCO-style evaluation.

Masks are run-length encoded (:mod:`segeval.masks`), datasets are immutable
dataclasses (:mod:`segeval.model`), and the pipeline stages live in
:mod:`segeval.augment`, :mod:`segeval.split` and :mod:`segeval.evaluate`.
:mod:`segeval.synth` generates scenes with exact ground truth for testing.
"""

from __future__ import annotations

__version__ = "0.1.0"

from .evaluate import COCO_THRESHOLDS, EvalConfig, EvalReport, evaluate, match_instances
from .masks import RleMask, bbox_iou, mask_iou, polygon_to_mask, rle_decode, rle_encode
from .model import (
    DEFAULT_TAXONOMY,
    AnnotatedFrame,
    BoundingBox,
    CategoryId,
    Dataset,
    InstanceMask,
    TransformSpec,
    validate_dataset,
)

__all__ = [
    "COCO_THRESHOLDS",
    "DEFAULT_TAXONOMY",
    "AnnotatedFrame",
    "BoundingBox",
    "CategoryId",
    "Dataset",
    "EvalConfig",
    "EvalReport",
    "InstanceMask",
    "RleMask",
    "TransformSpec",
    "bbox_iou",
    "evaluate",
    "mask_iou",
    "match_instances",
    "polygon_to_mask",
    "rle_decode",
    "rle_encode",
    "validate_dataset",
]
