# ##################################################################
# evaluation
# plain-forward inference plus coco-style ap, localization error share and
# score/iou correlation; area tertiles stand in for small, medium and large

import logging
import math
import sys
from collections.abc import Callable, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import spearmanr
from tqdm import tqdm

from .config import AnchorGridConfig, EvalConfig, TrainConfig
from .errors import ReportError, ShapeError
from .geometry import (
    AnchorSet,
    Box,
    Detection,
    boxes_to_array,
    clip_boxes,
    decode_boxes,
    generate_anchors,
    iou_matrix,
    nms_indices,
    score_order,
)
from .model import FeatureMap, ScorerParams, feature_channels, forward, render_features
from .scenes import GroundTruthObject, Scene

logger = logging.getLogger(__name__)

IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
RECALL_POINTS = np.linspace(0.0, 1.0, 101)
LOC_IOU_RANGE = (0.1, 0.5)
ASPECT_BUCKETS = (("regular", 1.0, 2.0), ("elongated", 2.0, 4.0), ("slender", 4.0, math.inf))


def aspect_bucket(box: Box) -> str:
    for name, low, high in ASPECT_BUCKETS:
        if low <= box.aspect < high:
            return name
    return ASPECT_BUCKETS[-1][0]


# ##################################################################
# candidates
# decoded, clipped, score-filtered (anchor, class) pairs before nms, the
# top pre_nms_top_n per class by score
def candidates(
    features: FeatureMap,
    params: ScorerParams,
    anchors: AnchorSet,
    cfg: EvalConfig,
    image_width: float,
    image_height: float,
    max_log_ratio: float,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    predictions, _ = forward(features, params)
    if len(predictions.probs) != len(anchors):
        raise ShapeError(f"scorer produced {len(predictions.probs)} rows for {len(anchors)} anchors")
    boxes = clip_boxes(decode_boxes(anchors.boxes, predictions.deltas, max_log_ratio), image_width, image_height)
    valid = (boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1])
    rows, classes = np.nonzero((predictions.probs > cfg.score_threshold) & valid[:, None])
    scores = predictions.probs[rows, classes]

    keep = []
    for class_id in np.unique(classes):
        members = np.flatnonzero(classes == class_id)
        keep.append(members[score_order(scores[members])[: cfg.pre_nms_top_n]])
    keep = np.sort(np.concatenate(keep)) if keep else np.zeros(0, dtype=np.int64)
    return boxes[rows[keep]], scores[keep], classes[keep]


# ##################################################################
# detect
# plain forward, decode, clip, score filter, top-n, per-class nms, cap
def detect(
    features: FeatureMap,
    params: ScorerParams,
    anchors: AnchorSet,
    cfg: EvalConfig,
    image_width: float,
    image_height: float,
    max_log_ratio: float,
) -> list[Detection]:
    boxes, scores, classes = candidates(features, params, anchors, cfg, image_width, image_height, max_log_ratio)
    kept = nms_indices(boxes, scores, classes, cfg.nms_threshold)[: cfg.max_detections]
    return [Detection(Box.from_array(boxes[i]), int(classes[i]), float(scores[i])) for i in kept]


def _gt_arrays(gts: Sequence[GroundTruthObject]) -> tuple[np.ndarray, np.ndarray]:
    return boxes_to_array([g.box for g in gts]), np.array([g.class_id for g in gts], dtype=np.int64)


# ##################################################################
# match result
# per detection in input order: tp flag and matched gt index (-1 if none)
@dataclass(frozen=True)
class MatchResult:
    tp: np.ndarray
    gt_index: np.ndarray


# ##################################################################
# match detections
# greedy by descending score; each detection takes the unmatched same-class
# gt of highest iou >= iou_thr, ties to the lower gt index
def match_detections(dets: Sequence[Detection], gts: Sequence[GroundTruthObject], iou_thr: float) -> MatchResult:
    tp = np.zeros(len(dets), dtype=bool)
    gt_index = np.full(len(dets), -1, dtype=np.int64)
    if not dets or not gts:
        return MatchResult(tp, gt_index)
    gt_boxes, gt_classes = _gt_arrays(gts)
    ious = iou_matrix(boxes_to_array([d.box for d in dets]), gt_boxes)
    taken = np.zeros(len(gts), dtype=bool)
    for i in score_order(np.array([d.score for d in dets])):
        eligible = (gt_classes == dets[i].class_id) & ~taken & (ious[i] >= iou_thr)
        if not eligible.any():
            continue
        j = int(np.argmax(np.where(eligible, ious[i], -1.0)))
        taken[j] = True
        tp[i] = True
        gt_index[i] = j
    return MatchResult(tp, gt_index)


def _interpolated_ap(tp: np.ndarray, scores: np.ndarray, num_gts: int) -> float:
    if len(tp) == 0:
        return 0.0
    order = score_order(scores)
    hits = tp[order].astype(np.float64)
    tp_sum = np.cumsum(hits)
    fp_sum = np.cumsum(1.0 - hits)
    recall = tp_sum / num_gts
    precision = tp_sum / (tp_sum + fp_sum)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    positions = np.searchsorted(recall, RECALL_POINTS, side="left")
    sampled = np.where(positions < len(envelope), envelope[np.minimum(positions, len(envelope) - 1)], 0.0)
    return float(sampled.mean())


# ##################################################################
# average precision
# per class over all images, then the mean over classes with ground truth;
# None when no class has any. keep_gt / keep_det restrict the evaluation
# to a subset: detections matched to a dropped gt, and unmatched detections
# that keep_det rejects, count as neither tp nor fp
def average_precision(
    dets: Sequence[Sequence[Detection]],
    gts: Sequence[Sequence[GroundTruthObject]],
    iou_thr: float,
    keep_gt: Callable[[GroundTruthObject], bool] | None = None,
    keep_det: Callable[[Detection], bool] | None = None,
) -> float | None:
    if len(dets) != len(gts):
        raise ShapeError(f"{len(dets)} detection lists for {len(gts)} images")
    per_class: dict[int, list[tuple[float, bool]]] = {}
    num_gts: dict[int, int] = {}
    for image_dets, image_gts in zip(dets, gts):
        kept_gt = [keep_gt is None or keep_gt(g) for g in image_gts]
        for g, kept in zip(image_gts, kept_gt):
            if kept:
                num_gts[g.class_id] = num_gts.get(g.class_id, 0) + 1
        match = match_detections(image_dets, image_gts, iou_thr)
        for det, hit, j in zip(image_dets, match.tp, match.gt_index):
            if hit and not kept_gt[j]:
                continue
            if not hit and keep_det is not None and not keep_det(det):
                continue
            per_class.setdefault(det.class_id, []).append((det.score, bool(hit)))

    values = []
    for class_id, count in sorted(num_gts.items()):
        rows = per_class.get(class_id, [])
        scores = np.array([s for s, _ in rows], dtype=np.float64)
        tp = np.array([h for _, h in rows], dtype=bool)
        values.append(_interpolated_ap(tp, scores, count))
    return float(np.mean(values)) if values else None


@dataclass(frozen=True)
class ApSweep:
    ap: float | None
    ap50: float | None
    ap75: float | None
    per_threshold: dict[float, float | None]
    ap_small: float | None = None
    ap_medium: float | None = None
    ap_large: float | None = None


def _mean_or_none(values: list[float | None]) -> float | None:
    if not values or any(v is None for v in values):
        return None
    return float(np.mean(values))


def area_tertiles(gts: Sequence[Sequence[GroundTruthObject]]) -> tuple[float, float] | None:
    areas = [g.box.area for image in gts for g in image]
    if not areas:
        return None
    low, high = np.quantile(areas, [1 / 3, 2 / 3])
    return float(low), float(high)


def _area_sweep(dets, gts, low: float, high: float) -> float | None:
    def inside(box: Box) -> bool:
        return low <= box.area < high

    return _mean_or_none(
        [
            average_precision(dets, gts, thr, keep_gt=lambda g: inside(g.box), keep_det=lambda d: inside(d.box))
            for thr in IOU_THRESHOLDS
        ]
    )


# ##################################################################
# ap sweep
# mean ap over the ten thresholds, ap50, ap75 and the area-tertile breakdown
def ap_sweep(dets: Sequence[Sequence[Detection]], gts: Sequence[Sequence[GroundTruthObject]]) -> ApSweep:
    per_threshold = {thr: average_precision(dets, gts, thr) for thr in IOU_THRESHOLDS}
    sizes = {}
    tertiles = area_tertiles(gts)
    if tertiles is not None:
        low, high = tertiles
        sizes = {
            "ap_small": _area_sweep(dets, gts, 0.0, low),
            "ap_medium": _area_sweep(dets, gts, low, high),
            "ap_large": _area_sweep(dets, gts, high, math.inf),
        }
    return ApSweep(
        ap=_mean_or_none(list(per_threshold.values())),
        ap50=per_threshold[0.5],
        ap75=per_threshold[0.75],
        per_threshold=per_threshold,
        **sizes,
    )


@dataclass(frozen=True)
class LocalizationShare:
    overall: float
    per_bucket: dict[str, float | None]
    loc_errors: int
    false_positives: int


# ##################################################################
# localization error share
# a false positive at iou 0.5 is a localization error when a same-class gt
# that stayed unmatched overlaps it with iou in [0.1, 0.5). each false
# positive is bucketed by the aspect of its best same-class gt when that
# overlap is at least 0.1, else by its own box
def localization_error_share(
    dets: Sequence[Sequence[Detection]], gts: Sequence[Sequence[GroundTruthObject]]
) -> LocalizationShare:
    low, high = LOC_IOU_RANGE
    loc_by_bucket = {name: 0 for name, _, _ in ASPECT_BUCKETS}
    fp_by_bucket = {name: 0 for name, _, _ in ASPECT_BUCKETS}
    for image_dets, image_gts in zip(dets, gts):
        match = match_detections(image_dets, image_gts, 0.5)
        matched = set(match.gt_index[match.tp].tolist())
        gt_boxes, gt_classes = _gt_arrays(image_gts)
        for i, det in enumerate(image_dets):
            if match.tp[i]:
                continue
            bucket = aspect_bucket(det.box)
            is_loc = False
            if len(image_gts):
                ious = iou_matrix(det.box.as_array(), gt_boxes)[0]
                same = gt_classes == det.class_id
                if same.any():
                    best = int(np.argmax(np.where(same, ious, -1.0)))
                    if ious[best] >= low:
                        bucket = aspect_bucket(image_gts[best].box)
                    free = same & np.array([j not in matched for j in range(len(image_gts))])
                    candidates_iou = np.where(free & (ious >= low) & (ious < high), ious, -1.0)
                    if candidates_iou.max() >= low:
                        is_loc = True
                        bucket = aspect_bucket(image_gts[int(np.argmax(candidates_iou))].box)
            fp_by_bucket[bucket] += 1
            loc_by_bucket[bucket] += int(is_loc)

    total_fp = sum(fp_by_bucket.values())
    total_loc = sum(loc_by_bucket.values())
    per_bucket = {name: (loc_by_bucket[name] / count if count else None) for name, count in fp_by_bucket.items()}
    return LocalizationShare(
        overall=total_loc / total_fp if total_fp else 0.0,
        per_bucket=per_bucket,
        loc_errors=total_loc,
        false_positives=total_fp,
    )


# ##################################################################
# localization ap gap
# ap at iou 0.1 minus ap at 0.5 per aspect bucket: the precision lost only
# to loose boxes
def localization_ap_gap(
    dets: Sequence[Sequence[Detection]], gts: Sequence[Sequence[GroundTruthObject]]
) -> dict[str, float | None]:
    gaps: dict[str, float | None] = {}
    for name, _, _ in ASPECT_BUCKETS:

        def in_bucket(box: Box, name=name) -> bool:
            return aspect_bucket(box) == name

        loose = average_precision(dets, gts, LOC_IOU_RANGE[0], lambda g: in_bucket(g.box), lambda d: in_bucket(d.box))
        strict = average_precision(dets, gts, 0.5, lambda g: in_bucket(g.box), lambda d: in_bucket(d.box))
        gaps[name] = None if loose is None or strict is None else loose - strict
    return gaps


# ##################################################################
# score iou correlation
# spearman rank correlation between a detection's score and its iou with
# the best same-class gt, over detections that overlap one. None below two
# samples or when either side is constant
def score_iou_correlation(
    dets: Sequence[Sequence[Detection]], gts: Sequence[Sequence[GroundTruthObject]]
) -> float | None:
    scores, overlaps = [], []
    for image_dets, image_gts in zip(dets, gts):
        if not image_dets or not image_gts:
            continue
        gt_boxes, gt_classes = _gt_arrays(image_gts)
        ious = iou_matrix(boxes_to_array([d.box for d in image_dets]), gt_boxes)
        for i, det in enumerate(image_dets):
            same = ious[i][gt_classes == det.class_id]
            if same.size and same.max() > 0.0:
                scores.append(det.score)
                overlaps.append(float(same.max()))
    if len(scores) < 2:
        return None
    if np.ptp(scores) == 0.0 or np.ptp(overlaps) == 0.0:
        return None
    coefficient = spearmanr(scores, overlaps).statistic
    return None if not np.isfinite(coefficient) else float(coefficient)


# ##################################################################
# eval report
# ordered flat metrics; None values print as NA
@dataclass
class EvalReport:
    metrics: dict[str, float | int | None] = field(default_factory=dict)

    def to_text(self) -> str:
        return "".join(f"{key} {_format_value(value)}\n" for key, value in self.metrics.items())

    def to_tsv(self) -> str:
        rows = ["metric\tvalue"] + [f"{key}\t{_format_value(value)}" for key, value in self.metrics.items()]
        return "\n".join(rows) + "\n"


def _format_value(value: float | int | None) -> str:
    if value is None:
        return "NA"
    if isinstance(value, int):
        return str(value)
    return f"{value:.6f}"


def read_table(path: Path | str) -> dict[str, float | None]:
    try:
        rows = Path(path).read_text().splitlines()
    except OSError as e:
        raise ReportError(f"cannot read metrics table {path}: {e.strerror}") from e
    if not rows or rows[0] != "metric\tvalue":
        raise ReportError(f"{path} is not a metrics table")
    table = {}
    for number, row in enumerate(rows[1:], start=2):
        try:
            key, value = row.split("\t")
            table[key] = None if value == "NA" else float(value)
        except ValueError as e:
            raise ReportError(f"{path}:{number}: malformed metrics row {row!r}") from e
    return table


def build_report(
    dets: Sequence[Sequence[Detection]],
    pre_nms: Sequence[Sequence[Detection]],
    gts: Sequence[Sequence[GroundTruthObject]],
) -> EvalReport:
    sweep = ap_sweep(dets, gts)
    share = localization_error_share(dets, gts)
    gaps = localization_ap_gap(dets, gts)
    metrics: dict[str, float | int | None] = {
        "ap": sweep.ap,
        "ap50": sweep.ap50,
        "ap75": sweep.ap75,
        "ap_small": sweep.ap_small,
        "ap_medium": sweep.ap_medium,
        "ap_large": sweep.ap_large,
    }
    for thr, value in sweep.per_threshold.items():
        metrics[f"ap@{thr:.2f}"] = value
    metrics["loc_share"] = share.overall
    for name, value in share.per_bucket.items():
        metrics[f"loc_share_{name}"] = value
    for name, value in gaps.items():
        metrics[f"loc_gap_{name}"] = value
    metrics["score_iou_corr"] = score_iou_correlation(pre_nms, gts)
    metrics["images"] = len(gts)
    metrics["detections"] = sum(len(d) for d in dets)
    metrics["ground_truth"] = sum(len(g) for g in gts)
    return EvalReport(metrics)


# ##################################################################
# evaluate
# renders each scene, runs detect, and scores the split. checkpoints and
# datasets must agree on class count and image size
def evaluate(
    scenes: Sequence[Scene],
    params: ScorerParams,
    train_cfg: TrainConfig,
    eval_cfg: EvalConfig,
    num_classes: int,
    grid: AnchorGridConfig | None = None,
    progress: bool = False,
    noise_level: float = 0.0,
) -> EvalReport:
    if params.num_classes != num_classes:
        raise ShapeError(f"checkpoint scores {params.num_classes} classes, dataset has {num_classes}")
    if params.channels != feature_channels(num_classes, train_cfg.render):
        raise ShapeError(f"checkpoint expects {params.channels} feature channels")
    if scenes:
        grid = grid or train_cfg.grid_for(scenes[0].image_width, scenes[0].image_height)
        if (grid.image_width, grid.image_height) != (scenes[0].image_width, scenes[0].image_height):
            raise ShapeError(
                f"checkpoint anchors cover {grid.image_width}x{grid.image_height}, "
                f"scenes are {scenes[0].image_width}x{scenes[0].image_height}"
            )
        if grid.anchors_per_cell != params.anchors_per_cell:
            raise ShapeError(
                f"checkpoint has {params.anchors_per_cell} anchors per cell, grid has {grid.anchors_per_cell}"
            )
        anchors = generate_anchors(grid)

    def one(scene: Scene) -> tuple[list[Detection], list[Detection]]:
        features = render_features(scene, grid, train_cfg.render, num_classes, noise_level)
        boxes, scores, classes = candidates(
            features, params, anchors, eval_cfg, scene.image_width, scene.image_height, train_cfg.max_log_ratio
        )
        pre = [Detection(Box.from_array(b), int(c), float(s)) for b, s, c in zip(boxes, scores, classes)]
        kept = nms_indices(boxes, scores, classes, eval_cfg.nms_threshold)[: eval_cfg.max_detections]
        return [pre[i] for i in kept], pre

    items = list(scenes)
    bar = tqdm(total=len(items), desc="eval", file=sys.stderr, disable=not progress)
    if eval_cfg.workers > 1:
        with ThreadPoolExecutor(max_workers=eval_cfg.workers) as pool:
            results = []
            for result in pool.map(one, items):
                results.append(result)
                bar.update()
    else:
        results = []
        for scene in items:
            results.append(one(scene))
            bar.update()
    bar.close()
    report = build_report([r[0] for r in results], [r[1] for r in results], [s.objects for s in items])
    logger.info("evaluated %d scenes: ap %s, ap50 %s", len(items), report.metrics["ap"], report.metrics["ap50"])
    return report
