"""Region-proposal post-processing: IoU, NMS, top-M retention, RoI pooling.

Proposals come from an external detector; this module only filters them and
pools patch-grid features into per-instance vectors. Coordinates are
normalized to [0, 1]; the patch grid is row-major (16x16 at the default
256 tokens per frame).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .tensor import Tensor


@dataclass(frozen=True)
class ScoredBox:
    """Normalized box with localization score. Padded boxes are all-zero."""

    x1: float
    y1: float
    x2: float
    y2: float
    score: float
    frame: int = 0
    padded: bool = False

    def __post_init__(self):
        if self.padded:
            if (self.x1, self.y1, self.x2, self.y2, self.score) != (0.0, 0.0, 0.0, 0.0, 0.0):
                raise ValueError("padded boxes must have zero coordinates and score")
            return
        if not (0.0 <= self.x1 <= self.x2 <= 1.0 and 0.0 <= self.y1 <= self.y2 <= 1.0):
            raise ValueError(
                f"box corners must satisfy 0 <= x1 <= x2 <= 1 and 0 <= y1 <= y2 <= 1, "
                f"got ({self.x1}, {self.y1}, {self.x2}, {self.y2})"
            )
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must lie in [0, 1], got {self.score}")

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)


def padded_box(frame: int = 0) -> ScoredBox:
    return ScoredBox(0.0, 0.0, 0.0, 0.0, 0.0, frame=frame, padded=True)


@dataclass
class InstanceFeature:
    """Pooled feature vector for one box; padding-origin features are zero."""

    vector: np.ndarray
    frame: int
    box: ScoredBox
    valid: bool = True


def iou(a: ScoredBox, b: ScoredBox) -> float:
    """Intersection over union; 0 when the union has zero area."""
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    inter = max(0.0, iw) * max(0.0, ih)
    union = a.area + b.area - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def nms(boxes: list[ScoredBox], iou_threshold: float) -> list[ScoredBox]:
    """Greedy non-maximum suppression.

    Candidates are visited by descending score (ties broken by input index,
    earlier wins); a box is kept iff its IoU with every already-kept box is
    <= the threshold. Kept order is descending score.
    """
    if not 0.0 < iou_threshold <= 1.0:
        raise ValueError(f"iou_threshold must lie in (0, 1], got {iou_threshold}")
    order = sorted(range(len(boxes)), key=lambda i: (-boxes[i].score, i))
    kept: list[ScoredBox] = []
    for i in order:
        candidate = boxes[i]
        if all(iou(candidate, k) <= iou_threshold for k in kept):
            kept.append(candidate)
    return kept


def retain_top_m(boxes: list[ScoredBox], m: int, frame: int = 0) -> list[ScoredBox]:
    """Exactly ``m`` boxes: the top-m by score, zero-padded when fewer exist.

    ``frame`` tags the padding records when the input is empty.
    """
    if m < 1:
        raise ValueError(f"m must be at least 1, got {m}")
    order = sorted(range(len(boxes)), key=lambda i: (-boxes[i].score, i))
    kept = [boxes[i] for i in order[:m]]
    pad_frame = kept[0].frame if kept else frame
    while len(kept) < m:
        kept.append(padded_box(frame=pad_frame))
    return kept


def roi_pool(frame_features: Tensor | np.ndarray, box: ScoredBox) -> InstanceFeature:
    """Average the patch-grid cells whose centers fall inside the box.

    ``frame_features`` holds the patch tokens of one frame, row-major over a
    square grid (256xD -> 16x16xD). If no cell center falls inside the box,
    the single cell containing the box center is used, so zero-area boxes
    still pool. A padded box yields the zero vector with ``valid=False``.
    """
    arr = frame_features.data if isinstance(frame_features, Tensor) else np.asarray(frame_features)
    if arr.ndim != 2:
        raise ShapeError(f"frame features must be 2-D (tokens x D), got shape {arr.shape}")
    n_cells, d = arr.shape
    side = math.isqrt(n_cells)
    if side * side != n_cells:
        raise ShapeError(f"{n_cells} patch tokens do not form a square grid")

    if box.padded:
        return InstanceFeature(np.zeros(d, dtype=arr.dtype), box.frame, box, valid=False)

    grid = arr.reshape(side, side, d)
    centers = (np.arange(side) + 0.5) / side
    cols = np.nonzero((centers >= box.x1) & (centers <= box.x2))[0]
    rows = np.nonzero((centers >= box.y1) & (centers <= box.y2))[0]
    if cols.size and rows.size:
        pooled = grid[np.ix_(rows, cols)].reshape(-1, d).mean(axis=0)
    else:
        col = min(side - 1, int((box.x1 + box.x2) / 2 * side))
        row = min(side - 1, int((box.y1 + box.y2) / 2 * side))
        pooled = grid[row, col]
    return InstanceFeature(np.array(pooled), box.frame, box, valid=True)
