"""Test-time flip merging and Soft-NMS filtering.

Detections from the horizontally flipped view are mapped back into the
original frame, pooled with the original detections, and filtered with
Soft-NMS, which decays overlapping scores instead of deleting boxes
outright.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Literal, Sequence

from .geometry import bbox_from_extremes, flip_horizontal, iou
from .grouping import Detection, sort_key


@dataclass(frozen=True, slots=True)
class SoftNmsConfig:
    """Decay law and floor for Soft-NMS.

    ``gaussian`` decays every overlapping score by exp(-iou^2 / sigma);
    ``linear`` scales by (1 - iou) once the overlap exceeds
    ``linear_iou_threshold``. Detections whose score falls below
    ``score_floor`` are dropped.
    """

    sigma: float = 0.5
    score_floor: float = 0.001
    method: Literal["gaussian", "linear"] = "gaussian"
    linear_iou_threshold: float = 0.3

    def __post_init__(self) -> None:
        if self.sigma <= 0.0:
            raise ValueError(f"sigma must be > 0, got {self.sigma}")
        if self.score_floor < 0.0:
            raise ValueError(f"score_floor must be >= 0, got {self.score_floor}")
        if self.method not in ("gaussian", "linear"):
            raise ValueError(f"unknown method {self.method!r}")
        if not 0.0 <= self.linear_iou_threshold <= 1.0:
            raise ValueError("linear_iou_threshold must lie in [0, 1]")


def unflip_detections(
    detections: Sequence[Detection], image_width: float
) -> list[Detection]:
    """Map detections made on a flipped image back to the original frame.

    Geometry mirrors through ``flip_horizontal`` (left and right roles
    swap), scores are untouched, and each detection is tagged as coming
    from the flipped view.
    """
    out = []
    for det in detections:
        extremes = flip_horizontal(det.extremes, image_width)
        out.append(
            Detection(
                extremes=extremes,
                score=det.score,
                bbox=bbox_from_extremes(extremes),
                source="flipped",
            )
        )
    return out


def soft_nms(
    detections: Sequence[Detection], cfg: SoftNmsConfig = SoftNmsConfig()
) -> list[Detection]:
    """Score-decay non-maximum suppression.

    Repeatedly selects the highest-scoring remaining detection, decays every
    other remaining score according to its overlap with the selection, and
    drops detections once their score falls below the floor. The output
    comes out sorted by final score descending; the top detection's score is
    never changed.
    """
    remaining = [d for d in detections if d.score >= cfg.score_floor]
    out: list[Detection] = []
    while remaining:
        best = min(remaining, key=sort_key)
        remaining.remove(best)
        out.append(best)
        decayed = []
        for det in remaining:
            overlap = iou(best.bbox, det.bbox)
            if cfg.method == "gaussian":
                factor = math.exp(-(overlap * overlap) / cfg.sigma)
            else:
                factor = (1.0 - overlap) if overlap > cfg.linear_iou_threshold else 1.0
            score = det.score * factor
            if score >= cfg.score_floor:
                decayed.append(replace(det, score=score))
        remaining = decayed
    return out


def fuse_tta(
    dets_original: Sequence[Detection],
    dets_flipped_raw: Sequence[Detection],
    image_width: float,
    cfg: SoftNmsConfig = SoftNmsConfig(),
) -> list[Detection]:
    """Pool original and un-flipped detections, then Soft-NMS the pool."""
    pooled = list(dets_original) + unflip_detections(dets_flipped_raw, image_width)
    return soft_nms(pooled, cfg)
