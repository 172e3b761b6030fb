"""Box overlap, greedy NMS and proposal labelling by IoU."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

POSITIVE_IOU = 0.5
BACKGROUND_IOU = 0.2


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(c) and c >= 0 for c in coords):
            raise ValueError(f"box coordinates must be finite and >= 0: {coords}")
        if not (self.x2 > self.x1 and self.y2 > self.y1):
            raise ValueError(f"degenerate box: {coords}")

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    def as_list(self) -> list[float]:
        return [self.x1, self.y1, self.x2, self.y2]

    @classmethod
    def from_seq(cls, seq: Sequence[float]) -> "Box":
        if len(seq) != 4:
            raise ValueError(f"box needs 4 coordinates, got {len(seq)}")
        return cls(*(float(v) for v in seq))


@dataclass(frozen=True)
class Detection:
    box: Box
    label: str
    score: float


def iou(a: Box, b: Box) -> float:
    if not isinstance(a, Box) or not isinstance(b, Box):
        raise TypeError("iou expects Box instances")
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def boxes_array(boxes: Sequence[Box]) -> np.ndarray:
    return np.array([b.as_list() for b in boxes], dtype=np.float64).reshape(-1, 4)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between (n, 4) and (m, 4) arrays, same arithmetic as :func:`iou`."""
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.where((iw > 0) & (ih > 0), iw * ih, 0.0)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    return inter / (area_a[:, None] + area_b[None, :] - inter)


def greedy_nms(dets: Sequence[Detection], iou_threshold: float = 0.4) -> list[Detection]:
    """Keep the highest-scoring box, drop everything overlapping it by more
    than ``iou_threshold``, repeat. Equal scores keep input order."""
    if not dets:
        return []
    labels = {d.label for d in dets}
    if len(labels) > 1:
        raise ValueError(f"greedy_nms expects a single class, got {sorted(labels)}")
    scores = np.array([d.score for d in dets])
    order = np.argsort(-scores, kind="stable")
    overlaps = iou_matrix(boxes_array([d.box for d in dets]), boxes_array([d.box for d in dets]))
    suppressed = np.zeros(len(dets), dtype=bool)
    keep = []
    for i in order:
        if suppressed[i]:
            continue
        keep.append(dets[i])
        suppressed |= overlaps[i] > iou_threshold
    return keep


@dataclass(frozen=True)
class Assignment:
    kind: str  # "positive" | "background" | "discard"
    label: str | None = None


DISCARD = Assignment("discard")
BACKGROUND_BOX = Assignment("background")


def assign_training_label(proposal: Box, ground_truth: Sequence[tuple[Box, str]],
                          zero_iou_background: bool = False) -> Assignment:
    """Label a proposal from its best ground-truth overlap.

    IoU > 0.5 takes the ground-truth class, 0 < IoU < 0.2 is background,
    the band in between is discarded. IoU = 0 is background only when
    ``zero_iou_background`` (the random-negative sampler asks for it).
    """
    if ground_truth:
        overlaps = [iou(proposal, g) for g, _ in ground_truth]
        best = int(np.argmax(overlaps))
        m = overlaps[best]
    else:
        m = 0.0
    if m > POSITIVE_IOU:
        return Assignment("positive", ground_truth[best][1])
    if 0 < m < BACKGROUND_IOU:
        return BACKGROUND_BOX
    if m == 0:
        return BACKGROUND_BOX if zero_iou_background else DISCARD
    return DISCARD
