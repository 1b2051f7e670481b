# ##################################################################
# geometry
# half-open corner boxes (x1, y1, x2, y2) in image pixels, iou, anchors,
# box delta coding and nms

import math
from dataclasses import dataclass

import numpy as np

from .config import DEFAULT_MAX_LOG_RATIO, AnchorGridConfig
from .errors import GeometryError


# ##################################################################
# box
# axis-aligned rectangle; construction validates x1 < x2, y1 < y2, finite
@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(c) for c in coords):
            raise GeometryError(f"box has non-finite coordinates: {coords}")
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise GeometryError(f"box needs x1 < x2 and y1 < y2, got {coords}")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def aspect(self) -> float:
        # elongation max(w/h, h/w); 1 for squares
        return max(self.width / self.height, self.height / self.width)

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)

    @classmethod
    def from_array(cls, values) -> "Box":
        x1, y1, x2, y2 = (float(v) for v in values)
        return cls(x1, y1, x2, y2)


# ##################################################################
# detection
# one scored, classed box; the record nms and evaluation work on
@dataclass(frozen=True)
class Detection:
    box: Box
    class_id: int
    score: float

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise GeometryError(f"detection score must be in [0, 1], got {self.score}")
        if self.class_id < 0:
            raise GeometryError(f"class_id must be non-negative, got {self.class_id}")


# ##################################################################
# boxes to array
# stacks boxes into an (n, 4) array, keeping the (0, 4) shape when empty
def boxes_to_array(boxes) -> np.ndarray:
    if len(boxes) == 0:
        return np.zeros((0, 4), dtype=np.float64)
    return np.stack([b.as_array() for b in boxes])


def box_areas(boxes: np.ndarray) -> np.ndarray:
    return (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])


# ##################################################################
# iou matrix
# pairwise iou between (n, 4) and (m, 4) box arrays
def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    xx1 = np.maximum(a[:, None, 0], b[None, :, 0])
    yy1 = np.maximum(a[:, None, 1], b[None, :, 1])
    xx2 = np.minimum(a[:, None, 2], b[None, :, 2])
    yy2 = np.minimum(a[:, None, 3], b[None, :, 3])
    inter = np.maximum(0.0, xx2 - xx1) * np.maximum(0.0, yy2 - yy1)
    union = box_areas(a)[:, None] + box_areas(b)[None, :] - inter
    return inter / union


# ##################################################################
# iou
# intersection over union of two valid boxes
def iou(a: Box, b: Box) -> float:
    for box in (a, b):
        if not isinstance(box, Box):
            raise GeometryError(f"iou expects Box values, got {type(box).__name__}")
    return float(iou_matrix(a.as_array(), b.as_array())[0, 0])


# ##################################################################
# anchor set
# flat anchor array with the level, cell and shape each anchor came from
@dataclass(frozen=True)
class AnchorSet:
    boxes: np.ndarray
    level: np.ndarray
    row: np.ndarray
    col: np.ndarray
    shape: np.ndarray
    anchors_per_cell: int
    level_slices: tuple[slice, ...]

    def __len__(self) -> int:
        return len(self.boxes)

    def box(self, index: int) -> Box:
        return Box.from_array(self.boxes[index])


# ##################################################################
# anchor shapes
# (width, height) per cell shape, scale-major and ratio-minor
def anchor_shapes(base_size: float, scales, ratios) -> np.ndarray:
    shapes = []
    for scale in scales:
        for ratio in ratios:
            root = math.sqrt(ratio)
            shapes.append((base_size * scale * root, base_size * scale / root))
    return np.array(shapes, dtype=np.float64)


# ##################################################################
# generate anchors
# tiles every level's cells with its anchor shapes; level-major, row-major
# cells, then scale-major / ratio-minor shapes. ratio r scales width by
# sqrt(r) and height by 1/sqrt(r)
def generate_anchors(cfg: AnchorGridConfig) -> AnchorSet:
    per_cell = cfg.anchors_per_cell
    boxes, levels, rows, cols, shapes, slices = [], [], [], [], [], []
    start = 0
    for index, level_cfg in enumerate(cfg.levels):
        height, width = cfg.feature_size(index)
        wh = anchor_shapes(level_cfg.base_size, cfg.octave_scales, cfg.aspect_ratios)
        cy = (np.arange(height, dtype=np.float64) + 0.5) * level_cfg.stride
        cx = (np.arange(width, dtype=np.float64) + 0.5) * level_cfg.stride
        grid_y, grid_x = np.meshgrid(cy, cx, indexing="ij")
        centers_x = grid_x[:, :, None]
        centers_y = grid_y[:, :, None]
        half_w = wh[None, None, :, 0] / 2
        half_h = wh[None, None, :, 1] / 2
        level_boxes = np.stack(
            np.broadcast_arrays(centers_x - half_w, centers_y - half_h, centers_x + half_w, centers_y + half_h),
            axis=-1,
        ).reshape(-1, 4)
        count = len(level_boxes)
        boxes.append(level_boxes)
        levels.append(np.full(count, index, dtype=np.int64))
        rows.append(np.repeat(np.arange(height), width * per_cell))
        cols.append(np.tile(np.repeat(np.arange(width), per_cell), height))
        shapes.append(np.tile(np.arange(per_cell), height * width))
        slices.append(slice(start, start + count))
        start += count
    return AnchorSet(
        boxes=np.concatenate(boxes),
        level=np.concatenate(levels),
        row=np.concatenate(rows),
        col=np.concatenate(cols),
        shape=np.concatenate(shapes),
        anchors_per_cell=per_cell,
        level_slices=tuple(slices),
    )


def _centers_and_sizes(boxes: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    w = boxes[:, 2] - boxes[:, 0]
    h = boxes[:, 3] - boxes[:, 1]
    return boxes[:, 0] + 0.5 * w, boxes[:, 1] + 0.5 * h, w, h


# ##################################################################
# encode boxes
# deltas (tx, ty, tw, th): center offsets over anchor size, log size ratios
def encode_boxes(anchors: np.ndarray, targets: np.ndarray) -> np.ndarray:
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    targets = np.asarray(targets, dtype=np.float64).reshape(-1, 4)
    if anchors.shape != targets.shape:
        raise GeometryError(f"encode needs matching shapes, got {anchors.shape} and {targets.shape}")
    ax, ay, aw, ah = _centers_and_sizes(anchors)
    tx, ty, tw, th = _centers_and_sizes(targets)
    if np.any(aw <= 0) or np.any(ah <= 0) or np.any(tw <= 0) or np.any(th <= 0):
        raise GeometryError("encode needs boxes with positive width and height")
    return np.stack([(tx - ax) / aw, (ty - ay) / ah, np.log(tw / aw), np.log(th / ah)], axis=1)


# ##################################################################
# decode boxes
# inverse of encode_boxes; log-size deltas are clamped before exp
def decode_boxes(anchors: np.ndarray, deltas: np.ndarray, max_log_ratio: float = DEFAULT_MAX_LOG_RATIO) -> np.ndarray:
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    deltas = np.asarray(deltas, dtype=np.float64).reshape(-1, 4)
    if not np.all(np.isfinite(deltas)):
        raise GeometryError("decode got non-finite deltas")
    ax, ay, aw, ah = _centers_and_sizes(anchors)
    cx = ax + deltas[:, 0] * aw
    cy = ay + deltas[:, 1] * ah
    w = aw * np.exp(np.minimum(deltas[:, 2], max_log_ratio))
    h = ah * np.exp(np.minimum(deltas[:, 3], max_log_ratio))
    return np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=1)


def encode_box(anchor: Box, target: Box) -> np.ndarray:
    return encode_boxes(anchor.as_array(), target.as_array())[0]


def decode_box(anchor: Box, deltas, max_log_ratio: float = DEFAULT_MAX_LOG_RATIO) -> Box:
    return Box.from_array(decode_boxes(anchor.as_array(), deltas, max_log_ratio)[0])


# ##################################################################
# clip boxes
# clamps box corners to the image; used at inference only
def clip_boxes(boxes: np.ndarray, width: float, height: float) -> np.ndarray:
    clipped = np.array(boxes, dtype=np.float64, copy=True)
    clipped[:, [0, 2]] = np.clip(clipped[:, [0, 2]], 0.0, width)
    clipped[:, [1, 3]] = np.clip(clipped[:, [1, 3]], 0.0, height)
    return clipped


# ##################################################################
# score order
# indices by descending score; equal scores keep lower index first
def score_order(scores: np.ndarray) -> np.ndarray:
    scores = np.asarray(scores, dtype=np.float64)
    return np.lexsort((np.arange(len(scores)), -scores))


# ##################################################################
# nms indices
# greedy per-class suppression over arrays; returns kept indices in
# descending score order
def nms_indices(boxes: np.ndarray, scores: np.ndarray, classes: np.ndarray, iou_threshold: float) -> np.ndarray:
    if not 0.0 < iou_threshold < 1.0:
        raise GeometryError(f"nms threshold must be in (0, 1), got {iou_threshold}")
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    classes = np.asarray(classes)
    order = score_order(scores)
    rank = np.empty(len(order), dtype=np.int64)
    rank[order] = np.arange(len(order))
    areas = box_areas(boxes)

    keep = []
    for class_id in np.unique(classes):
        pending = order[classes[order] == class_id]
        while pending.size > 0:
            i = pending[0]
            keep.append(i)
            rest = pending[1:]
            xx1 = np.maximum(boxes[i, 0], boxes[rest, 0])
            yy1 = np.maximum(boxes[i, 1], boxes[rest, 1])
            xx2 = np.minimum(boxes[i, 2], boxes[rest, 2])
            yy2 = np.minimum(boxes[i, 3], boxes[rest, 3])
            inter = np.maximum(0.0, xx2 - xx1) * np.maximum(0.0, yy2 - yy1)
            overlap = inter / (areas[i] + areas[rest] - inter)
            pending = rest[overlap <= iou_threshold]

    keep = np.array(keep, dtype=np.int64)
    return keep[np.argsort(rank[keep], kind="stable")]


# ##################################################################
# nms
# record-level wrapper over nms_indices
def nms(dets: list[Detection], iou_threshold: float) -> list[Detection]:
    if not 0.0 < iou_threshold < 1.0:
        raise GeometryError(f"nms threshold must be in (0, 1), got {iou_threshold}")
    if not dets:
        return []
    boxes = boxes_to_array([d.box for d in dets])
    scores = np.array([d.score for d in dets], dtype=np.float64)
    classes = np.array([d.class_id for d in dets], dtype=np.int64)
    return [dets[i] for i in nms_indices(boxes, scores, classes, iou_threshold)]
