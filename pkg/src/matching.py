# ##################################################################
# matching
# fixed iou-threshold assignment for the baseline and per-object anchor bags

import logging
from dataclasses import dataclass

import numpy as np

from .errors import GeometryError
from .geometry import iou_matrix

logger = logging.getLogger(__name__)

NEGATIVE = -1
IGNORE = -2


# ##################################################################
# anchor bag
# top-k anchors of one object, descending iou, ties by lower anchor index
@dataclass(frozen=True)
class AnchorBag:
    object_index: int
    anchor_indices: np.ndarray
    ious: np.ndarray

    def __len__(self) -> int:
        return len(self.anchor_indices)

    @property
    def empty(self) -> bool:
        return len(self.anchor_indices) == 0


# ##################################################################
# assignment
# one label per anchor: object index, NEGATIVE or IGNORE
@dataclass(frozen=True)
class Assignment:
    labels: np.ndarray

    def positives(self) -> np.ndarray:
        return np.flatnonzero(self.labels >= 0)

    def negatives(self) -> np.ndarray:
        return np.flatnonzero(self.labels == NEGATIVE)

    def ignored(self) -> np.ndarray:
        return np.flatnonzero(self.labels == IGNORE)


def _iou_table(anchors: np.ndarray, gt_boxes: np.ndarray) -> np.ndarray:
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    return iou_matrix(anchors, gt_boxes)


# ##################################################################
# assign baseline
# retinanet-style thresholds plus a low-quality rescue of each object's
# best anchor. ious may be passed in when the caller already has them
def assign_baseline(
    anchors: np.ndarray,
    gt_boxes: np.ndarray,
    pos_thr: float,
    neg_upper: float,
    ious: np.ndarray | None = None,
) -> Assignment:
    if not 0.0 <= neg_upper <= pos_thr <= 1.0:
        raise GeometryError(f"need 0 <= neg_upper <= pos_thr <= 1, got {neg_upper} and {pos_thr}")
    num_anchors = len(anchors)
    if ious is None:
        ious = _iou_table(anchors, gt_boxes)
    if ious.shape[1] == 0:
        return Assignment(np.full(num_anchors, NEGATIVE, dtype=np.int64))

    best_gt = np.argmax(ious, axis=1)
    best_iou = ious[np.arange(num_anchors), best_gt]
    labels = np.full(num_anchors, IGNORE, dtype=np.int64)
    labels[best_iou < neg_upper] = NEGATIVE
    positive = best_iou >= pos_thr
    labels[positive] = best_gt[positive]

    # argmax returns the lowest anchor index among ties
    for gt_index in range(ious.shape[1]):
        anchor = int(np.argmax(ious[:, gt_index]))
        if ious[anchor, gt_index] > 0.0:
            labels[anchor] = gt_index
    return Assignment(labels)


# ##################################################################
# build bags
# one bag per object with its k best-overlapping anchors (iou > 0)
def build_bags(anchors: np.ndarray, gt_boxes: np.ndarray, k: int, ious: np.ndarray | None = None) -> list[AnchorBag]:
    if k < 1:
        raise GeometryError(f"bag size k must be at least 1, got {k}")
    if ious is None:
        ious = _iou_table(anchors, gt_boxes)
    bags = []
    for gt_index in range(ious.shape[1]):
        column = ious[:, gt_index]
        candidates = np.flatnonzero(column > 0.0)
        order = np.lexsort((candidates, -column[candidates]))[:k]
        chosen = candidates[order]
        if len(chosen) == 0:
            logger.warning("object %d overlaps no anchor; its bag is empty", gt_index)
        bags.append(AnchorBag(gt_index, chosen, column[chosen]))
    return bags


# ##################################################################
# mal negatives
# anchors whose best iou over all objects is below neg_upper
def mal_negatives(
    anchors: np.ndarray, gt_boxes: np.ndarray, neg_upper: float, ious: np.ndarray | None = None
) -> np.ndarray:
    if ious is None:
        ious = _iou_table(anchors, gt_boxes)
    if ious.shape[1] == 0:
        return np.arange(len(anchors), dtype=np.int64)
    return np.flatnonzero(ious.max(axis=1) < neg_upper)
