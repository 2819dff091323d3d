"""defectforge: two-stage surface-defect inspection built on a hand-rolled
float64 tensor engine. Stage 1 screens multi-scale patches with a compact
single-shot detector; stage 2 segments defects in the surviving patches with
a pyramid-feature network, deformable sampling and region-aligned heads.
"""

from .geometry import (
    Box,
    DefaultBoxSet,
    PatchGrid,
    SlicingConfig,
    decode_offsets,
    default_boxes_for_patch,
    encode_offsets,
    jaccard,
    jaccard_matrix,
    match_boxes,
    nms,
    slice_image,
)
from .data import (
    CheckpointError,
    DatasetError,
    DatasetRecord,
    SyntheticSpec,
    generate_synthetic,
    load_checkpoint,
    load_dataset,
    rle_decode,
    rle_encode,
    save_checkpoint,
)
from .config import ConfigError, PipelineConfig, load_config, parse_config
from .evaluate import (
    EvalItem,
    EvalReport,
    area_bin,
    bin_by_defect_area,
    build_report,
    mask_iou,
    pixel_accuracy,
    scale_sweep,
    stratified_split,
)
from .pipeline import (
    InspectionResult,
    Pipeline,
    evaluate_pipeline,
    inspect_image,
    load_pipeline,
    render_overlay,
    save_pipeline,
    train_and_score,
    train_pipeline,
)
from .screening import SSDNet, multibox_loss, select_patches
from .segmenter import (
    FeaturePyramid,
    LossBreakdown,
    Proposal,
    SegmenterConfig,
    SegmenterNet,
    combined_loss,
    deformable_conv2d,
    patch_loss,
    roi_align,
    segment_patch,
)
from .tensor import ConvKernel, ShapeMismatchError, Tensor

__version__ = "0.1.0"

__all__ = [
    "Box",
    "CheckpointError",
    "ConfigError",
    "ConvKernel",
    "DatasetError",
    "DatasetRecord",
    "DefaultBoxSet",
    "EvalItem",
    "EvalReport",
    "FeaturePyramid",
    "InspectionResult",
    "LossBreakdown",
    "PatchGrid",
    "Pipeline",
    "PipelineConfig",
    "Proposal",
    "SSDNet",
    "SegmenterConfig",
    "SegmenterNet",
    "ShapeMismatchError",
    "SlicingConfig",
    "SyntheticSpec",
    "Tensor",
    "area_bin",
    "bin_by_defect_area",
    "build_report",
    "combined_loss",
    "decode_offsets",
    "default_boxes_for_patch",
    "deformable_conv2d",
    "encode_offsets",
    "evaluate_pipeline",
    "generate_synthetic",
    "inspect_image",
    "jaccard",
    "jaccard_matrix",
    "load_checkpoint",
    "load_config",
    "load_dataset",
    "load_pipeline",
    "mask_iou",
    "match_boxes",
    "multibox_loss",
    "nms",
    "parse_config",
    "patch_loss",
    "pixel_accuracy",
    "render_overlay",
    "rle_decode",
    "rle_encode",
    "roi_align",
    "save_checkpoint",
    "save_pipeline",
    "scale_sweep",
    "segment_patch",
    "select_patches",
    "slice_image",
    "stratified_split",
    "train_and_score",
    "train_pipeline",
]
