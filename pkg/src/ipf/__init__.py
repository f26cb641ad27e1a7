"""Instance-prompt visual token compression for multi-shot video features.

Slices of 8 frames are compressed to ``8*2X + V`` tokens (160 at the
defaults X=5, V=80) by cross-attending learnable queries, optimized by
adding frame-level and instance-level anchor vectors, over the slice's
full token set.
"""

from .align import (
    AlignConfig,
    AlignedSliceTokens,
    AlignParams,
    align_forward,
    assemble_anchors,
    frame_tokens,
    init_params,
    token_budget,
    toy_fit,
)
from .boxes import InstanceFeature, ScoredBox, iou, nms, retain_top_m, roi_pool
from .errors import InputFormatError, NumericError, ShapeError, ToleranceError
from .fileio import RunConfig, load_params, parse_config, read_tensors, save_params, write_tensors
from .grouping import (
    InstanceGroup,
    InstancePromptSet,
    aggregate_group,
    build_prompt_set,
    canonical_order,
    cosine_similarity,
    group_instances,
)
from .pipeline import (
    FilterDecision,
    SliceStream,
    SyntheticScene,
    generate_scene,
    run_pipeline,
    selection_filter,
    slice_frames,
)
from .scoring import CategoryScores, QARecord, score
from .tensor import Tape, Tensor, grad_check

__version__ = "0.1.0"

__all__ = [
    "AlignConfig",
    "AlignParams",
    "AlignedSliceTokens",
    "CategoryScores",
    "FilterDecision",
    "InputFormatError",
    "InstanceFeature",
    "InstanceGroup",
    "InstancePromptSet",
    "NumericError",
    "QARecord",
    "RunConfig",
    "ScoredBox",
    "ShapeError",
    "SliceStream",
    "SyntheticScene",
    "Tape",
    "Tensor",
    "ToleranceError",
    "aggregate_group",
    "align_forward",
    "assemble_anchors",
    "build_prompt_set",
    "canonical_order",
    "cosine_similarity",
    "frame_tokens",
    "generate_scene",
    "grad_check",
    "group_instances",
    "init_params",
    "iou",
    "load_params",
    "nms",
    "parse_config",
    "read_tensors",
    "retain_top_m",
    "roi_pool",
    "run_pipeline",
    "save_params",
    "score",
    "selection_filter",
    "slice_frames",
    "token_budget",
    "toy_fit",
    "write_tensors",
]
