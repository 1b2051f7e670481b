# ##################################################################
# mal
# selection-depression training and the fixed-assignment baseline, sharing
# one loop, loss and momentum sgd optimizer

import json
import logging
import math
import sys
from collections.abc import Callable, Iterator, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO

import numpy as np
from tqdm import tqdm

from .config import AnchorGridConfig, DepressionSchedule, TrainConfig
from .errors import DatasetError, TrainingError
from .geometry import AnchorSet, decode_boxes, encode_boxes, generate_anchors, iou_matrix
from .losses import LossBreakdown, LossTargets, detection_loss, joint_confidences
from .matching import AnchorBag, Assignment, assign_baseline, build_bags, mal_negatives
from .model import (
    FeatureMap,
    ForwardCache,
    OptimizerState,
    ScorerParams,
    backward,
    feature_channels,
    forward,
    learning_rate,
    render_features,
    sgd_step,
)
from .scenes import Scene

logger = logging.getLogger(__name__)

RANK_EPSILON = 1e-9


# ##################################################################
# train state
# iteration counter and optimizer buffers; lam = t / T is the progress
@dataclass
class TrainState:
    t: int
    total: int
    seed: int = 0
    optimizer: OptimizerState = field(default_factory=OptimizerState)

    def __post_init__(self):
        if self.total <= 0 or not 0 <= self.t <= self.total:
            raise TrainingError(f"train state needs 0 <= t <= T and T > 0, got t={self.t} T={self.total}")

    @property
    def lam(self) -> float:
        return self.t / self.total


def _check_lambda(lam: float) -> None:
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"training progress must be in [0, 1], got {lam}")


# ##################################################################
# selection count
# bag * (1 - lam) + 1 anchors, clamped to the bag; one anchor at lam = 1
def selection_count(lam: float, bag_size: int) -> int:
    _check_lambda(lam)
    if bag_size == 0:
        return 0
    return min(bag_size, math.floor(bag_size * (1.0 - lam) + 1.0 + RANK_EPSILON))


def strategy_count(lam: float, bag_size: int, strategy: str) -> int:
    if strategy == "all":
        return bag_size
    if strategy == "top1":
        return min(1, bag_size)
    return selection_count(lam, bag_size)


def _selection_order(bag: AnchorBag, confidences: np.ndarray) -> np.ndarray:
    confidences = np.asarray(confidences, dtype=np.float64)
    if confidences.shape != (len(bag),):
        raise ValueError(f"need one confidence per bag anchor, got {confidences.shape} for {len(bag)}")
    return np.lexsort((np.arange(len(bag)), -confidences))


# ##################################################################
# select anchors
# the count bag anchors with the highest joint confidence; ties keep the
# higher-iou bag rank, which already orders equal ious by anchor index
def select_anchors(bag: AnchorBag, confidences: np.ndarray, count: int) -> np.ndarray:
    if not 0 <= count <= len(bag):
        raise ValueError(f"cannot select {count} anchors from a bag of {len(bag)}")
    return bag.anchor_indices[_selection_order(bag, confidences)[:count]]


# ##################################################################
# attention map
# channel weights from global average pooling, then a weighted channel sum
def attention_map(level: np.ndarray) -> np.ndarray:
    weights = level.mean(axis=(1, 2))
    return np.tensordot(weights, level, axes=1)


# ##################################################################
# depression mask
# the ceil(fraction * H * W) largest attention positions, ties row-major
def depression_mask(attention: np.ndarray, fraction: float) -> np.ndarray:
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"depression fraction must be in [0, 1], got {fraction}")
    cells = attention.size
    count = min(cells, max(0, math.ceil(fraction * cells - RANK_EPSILON)))
    order = np.argsort(-attention.ravel(), kind="stable")
    mask = np.zeros(cells, dtype=bool)
    mask[order[:count]] = True
    return mask.reshape(attention.shape)


# ##################################################################
# depress
# V = (1 + M') * U with M' the attention map zeroed on the depressed cells
def depress(level: np.ndarray, attention: np.ndarray, fraction: float) -> np.ndarray:
    kept = np.where(depression_mask(attention, fraction), 0.0, attention)
    return (1.0 + kept)[None, :, :] * level


def depress_features(features: FeatureMap, fraction: float) -> FeatureMap:
    return features.map(lambda level: depress(level, attention_map(level), fraction))


# ##################################################################
# depression fraction
# share of attention cells left unmodulated at progress lam
def depression_fraction(lam: float, schedule: DepressionSchedule) -> float:
    _check_lambda(lam)
    peak, steps = schedule.peak_fraction, schedule.step_count
    if schedule.variant == "none":
        return 0.0
    if schedule.variant == "constant":
        return peak
    if schedule.variant == "step":
        return peak * math.floor(lam * steps + RANK_EPSILON) / steps
    rising = 2.0 * lam if lam <= 0.5 else 2.0 * (1.0 - lam)
    return peak * math.floor(rising * steps + RANK_EPSILON) / steps


# ##################################################################
# scene cache
# everything about a training scene that does not depend on the params
@dataclass(frozen=True)
class SceneCache:
    scene: Scene
    features: FeatureMap
    gt_boxes: np.ndarray
    gt_classes: np.ndarray
    bags: list[AnchorBag]
    negatives: np.ndarray
    assignment: Assignment


# ##################################################################
# training context
# anchors, per-scene caches and the worker pool shared by every iteration
class TrainingContext:
    def __init__(self, scenes: Sequence[Scene], cfg: TrainConfig, num_classes: int, noise_level: float = 0.0):
        if not scenes:
            raise DatasetError("no training scenes to fit")
        self.cfg = cfg
        self.num_classes = num_classes
        self.noise_level = noise_level
        self.grid: AnchorGridConfig = cfg.grid_for(scenes[0].image_width, scenes[0].image_height)
        self.anchors: AnchorSet = generate_anchors(self.grid)
        self._pool = ThreadPoolExecutor(max_workers=cfg.workers) if cfg.workers > 1 else None
        self.caches = self.map(self._prepare, list(scenes))
        logger.debug("prepared %d scenes over %d anchors", len(self.caches), len(self.anchors))

    def __enter__(self) -> "TrainingContext":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def close(self) -> None:
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None

    def map(self, fn: Callable, items: list) -> list:
        if self._pool is None:
            return [fn(item) for item in items]
        return list(self._pool.map(fn, items))

    def _prepare(self, scene: Scene) -> SceneCache:
        cfg = self.cfg
        gt_boxes = scene.gt_boxes()
        ious = iou_matrix(self.anchors.boxes, gt_boxes)
        return SceneCache(
            scene=scene,
            features=render_features(scene, self.grid, cfg.render, self.num_classes, self.noise_level),
            gt_boxes=gt_boxes,
            gt_classes=scene.gt_classes(),
            bags=build_bags(self.anchors.boxes, gt_boxes, cfg.bag_size, ious=ious),
            negatives=mal_negatives(self.anchors.boxes, gt_boxes, cfg.neg_iou, ious=ious),
            assignment=assign_baseline(self.anchors.boxes, gt_boxes, cfg.pos_iou, cfg.neg_iou, ious=ious),
        )

    def init_params(self) -> ScorerParams:
        cfg = self.cfg
        return ScorerParams.init(
            np.random.default_rng(cfg.seed),
            feature_channels(self.num_classes, cfg.render),
            cfg.hidden_dim,
            self.grid.anchors_per_cell,
            self.num_classes,
            std=cfg.init_std,
            prior_prob=cfg.prior_prob,
        )


@dataclass(frozen=True)
class SceneStep:
    scene_id: int
    grads: ScorerParams
    breakdown: LossBreakdown
    counts: list[int]
    selected_confidence: list[float]
    empty_bags: int


def _checked_forward(features: FeatureMap, params: ScorerParams, scene_id: int):
    predictions, cache = forward(features, params)
    if not (np.all(np.isfinite(predictions.probs)) and np.all(np.isfinite(predictions.deltas))):
        raise TrainingError(f"non-finite predictions on scene {scene_id}", scene_id=scene_id)
    return predictions, cache


def _finish_step(
    ctx: TrainingContext,
    cache: SceneCache,
    params: ScorerParams,
    predictions,
    fcache: ForwardCache,
    targets: LossTargets,
    counts: list[int],
    selected_confidence: list[float],
    empty_bags: int,
) -> SceneStep:
    scene_id = cache.scene.id
    breakdown, grad_probs, grad_deltas = detection_loss(
        predictions.probs, predictions.deltas, targets, ctx.cfg.loss, num_objects=len(cache.scene.objects)
    )
    if not math.isfinite(breakdown.total):
        raise TrainingError(f"non-finite loss on scene {scene_id}", scene_id=scene_id)
    return SceneStep(
        scene_id=scene_id,
        grads=backward(grad_probs, grad_deltas, fcache, params),
        breakdown=breakdown,
        counts=counts,
        selected_confidence=selected_confidence,
        empty_bags=empty_bags,
    )


def _positive_deltas(anchors: AnchorSet, anchor_idx: np.ndarray, gt_boxes: np.ndarray) -> np.ndarray:
    if len(anchor_idx) == 0:
        return np.zeros((0, 4), dtype=np.float64)
    return encode_boxes(anchors.boxes[anchor_idx], gt_boxes)


# ##################################################################
# mal scene step
# depress, forward, score each bag by joint confidence and keep the best
def _mal_scene_step(ctx: TrainingContext, cache: SceneCache, params: ScorerParams, lam: float, fraction: float):
    cfg = ctx.cfg
    features = depress_features(cache.features, fraction) if fraction > 0.0 else cache.features
    predictions, fcache = _checked_forward(features, params, cache.scene.id)

    anchors, classes, deltas, confidences, counts = [], [], [], [], []
    empty = 0
    for bag in cache.bags:
        if bag.empty:
            empty += 1
            continue
        class_id = int(cache.gt_classes[bag.object_index])
        gt_box = cache.gt_boxes[bag.object_index]
        idx = bag.anchor_indices
        pred_boxes = decode_boxes(ctx.anchors.boxes[idx], predictions.deltas[idx], cfg.max_log_ratio)
        scores = joint_confidences(predictions.probs[idx, class_id], pred_boxes, gt_box, cfg.loss.beta)
        count = strategy_count(lam, len(bag), cfg.selection)
        order = _selection_order(bag, scores)[:count]
        chosen = idx[order]
        anchors.append(chosen)
        classes.append(np.full(count, class_id, dtype=np.int64))
        deltas.append(_positive_deltas(ctx.anchors, chosen, np.repeat(gt_box[None, :], count, axis=0)))
        confidences.extend(scores[order].tolist())
        counts.append(count)

    targets = LossTargets(
        pos_anchors=np.concatenate(anchors) if anchors else np.zeros(0, dtype=np.int64),
        pos_classes=np.concatenate(classes) if classes else np.zeros(0, dtype=np.int64),
        pos_deltas=np.concatenate(deltas) if deltas else np.zeros((0, 4), dtype=np.float64),
        neg_anchors=cache.negatives,
    )
    return _finish_step(ctx, cache, params, predictions, fcache, targets, counts, confidences, empty)


def _baseline_scene_step(ctx: TrainingContext, cache: SceneCache, params: ScorerParams, fraction: float):
    features = depress_features(cache.features, fraction) if fraction > 0.0 else cache.features
    predictions, fcache = _checked_forward(features, params, cache.scene.id)
    positives = cache.assignment.positives()
    owners = cache.assignment.labels[positives]
    targets = LossTargets(
        pos_anchors=positives,
        pos_classes=cache.gt_classes[owners] if len(owners) else np.zeros(0, dtype=np.int64),
        pos_deltas=_positive_deltas(ctx.anchors, positives, cache.gt_boxes[owners]),
        neg_anchors=cache.assignment.negatives(),
    )
    return _finish_step(ctx, cache, params, predictions, fcache, targets, [], [], 0)


def _mean(values) -> float | None:
    values = list(values)
    return float(np.mean(values)) if values else None


# ##################################################################
# apply steps
# merges per-scene gradients in batch order, takes one sgd step and builds
# the iteration's metrics record
def _apply_steps(
    state: TrainState, steps: list[SceneStep], params: ScorerParams, ctx: TrainingContext, fraction: float
) -> tuple[ScorerParams, TrainState, dict]:
    cfg = ctx.cfg
    grads = params.zeros_like()
    for step in steps:
        grads.add_(step.grads)
    grads = grads.map(lambda g: g / len(steps))
    lr = learning_rate(state.t, cfg)
    try:
        new_params, optimizer = sgd_step(params, grads, state.optimizer, lr, cfg.momentum, cfg.weight_decay)
    except TrainingError as e:
        raise TrainingError(f"iteration {state.t}: {e.detail}", iteration=state.t) from e

    counts = [c for step in steps for c in step.counts]
    record = {
        "iteration": state.t,
        "lambda": state.lam,
        "depression": fraction,
        "lr": lr,
        "loss": _mean(s.breakdown.total for s in steps),
        "cls_pos": _mean(s.breakdown.cls_pos for s in steps),
        "cls_neg": _mean(s.breakdown.cls_neg for s in steps),
        "reg": _mean(s.breakdown.reg for s in steps),
        "num_pos": sum(s.breakdown.num_pos for s in steps),
        "selection_count": _mean(counts),
        "mean_selected_f": _mean(f for s in steps for f in s.selected_confidence),
        "empty_bags": sum(s.empty_bags for s in steps),
        "warnings": sum(1 for s in steps if s.breakdown.no_positive_warning) + sum(s.empty_bags for s in steps),
        "scenes": [s.scene_id for s in steps],
    }
    new_state = TrainState(t=state.t + 1, total=state.total, seed=state.seed, optimizer=optimizer)
    return new_params, new_state, record


def _checked_iteration(state: TrainState) -> None:
    if state.t >= state.total:
        raise TrainingError(f"training already finished at iteration {state.t}", iteration=state.t)


def _run_scene(fn: Callable[[SceneCache], SceneStep], state: TrainState) -> Callable[[SceneCache], SceneStep]:
    def run(cache: SceneCache) -> SceneStep:
        try:
            return fn(cache)
        except TrainingError as e:
            raise TrainingError(f"iteration {state.t}: {e.detail}", iteration=state.t, scene_id=e.scene_id) from e

    return run


# ##################################################################
# train iteration
# one selection-depression step over a batch of prepared scenes
def train_iteration(
    state: TrainState, batch: list[SceneCache], params: ScorerParams, ctx: TrainingContext
) -> tuple[ScorerParams, TrainState, dict]:
    _checked_iteration(state)
    lam = state.lam
    fraction = depression_fraction(lam, ctx.cfg.depression)
    steps = ctx.map(_run_scene(lambda cache: _mal_scene_step(ctx, cache, params, lam, fraction), state), batch)
    return _apply_steps(state, steps, params, ctx, fraction)


# ##################################################################
# train baseline iteration
# same loop with iou-threshold positives and no bags or selection. the
# depression schedule still applies unless its variant is none
def train_baseline_iteration(
    state: TrainState, batch: list[SceneCache], params: ScorerParams, ctx: TrainingContext
) -> tuple[ScorerParams, TrainState, dict]:
    _checked_iteration(state)
    fraction = depression_fraction(state.lam, ctx.cfg.depression)
    steps = ctx.map(_run_scene(lambda cache: _baseline_scene_step(ctx, cache, params, fraction), state), batch)
    return _apply_steps(state, steps, params, ctx, fraction)


# ##################################################################
# scene stream
# endless seeded permutations of the scene indices, one per epoch
def scene_stream(count: int, seed: int) -> Iterator[int]:
    rng = np.random.default_rng([seed, count])
    while True:
        yield from rng.permutation(count).tolist()


# ##################################################################
# hidden attention
# attention map of the learned hidden activations, one (H, W) map per level
def hidden_attention(cache: SceneCache, params: ScorerParams, ctx: TrainingContext) -> list[np.ndarray]:
    _, fcache = forward(cache.features, params)
    maps = []
    for index, hidden in enumerate(fcache.hidden):
        height, width = ctx.grid.feature_size(index)
        maps.append(attention_map(hidden.T.reshape(-1, height, width)))
    return maps


def _snapshot_iterations(cfg: TrainConfig) -> dict[int, float]:
    return {min(cfg.iterations - 1, math.floor(p * cfg.iterations)): p for p in cfg.attention_snapshots}


def _write_snapshot(directory: Path, iteration: int, progress: float, maps: list[np.ndarray]) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    record = {"iteration": iteration, "progress": progress, "levels": [m.round(6).tolist() for m in maps]}
    (directory / f"attention-{iteration:06d}.json").write_text(json.dumps(record, sort_keys=True) + "\n")


@dataclass
class FitResult:
    params: ScorerParams
    state: TrainState
    metrics: list[dict]
    grid: AnchorGridConfig


# ##################################################################
# fit
# runs cfg.iterations steps from a seeded init; each metrics record is
# appended to metrics_out as one json line. noise_level comes from the dataset
def fit(
    scenes: Sequence[Scene],
    cfg: TrainConfig,
    num_classes: int,
    metrics_out: IO[str] | None = None,
    snapshot_dir: Path | None = None,
    progress: bool = False,
    noise_level: float = 0.0,
) -> FitResult:
    if cfg.effective_warmup < cfg.warmup_iters:
        logger.warning("warmup clamped from %d to %d iterations", cfg.warmup_iters, cfg.effective_warmup)
    step = train_iteration if cfg.method == "mal" else train_baseline_iteration
    snapshots = _snapshot_iterations(cfg) if snapshot_dir is not None else {}

    with TrainingContext(scenes, cfg, num_classes, noise_level) as ctx:
        params = ctx.init_params()
        state = TrainState(t=0, total=cfg.iterations, seed=cfg.seed)
        stream = scene_stream(len(ctx.caches), cfg.seed)
        metrics = []
        for _ in tqdm(range(cfg.iterations), desc=f"train {cfg.method}", file=sys.stderr, disable=not progress):
            batch = [ctx.caches[next(stream)] for _ in range(cfg.batch_size)]
            params, state, record = step(state, batch, params, ctx)
            metrics.append(record)
            if metrics_out is not None:
                metrics_out.write(json.dumps(record, sort_keys=True) + "\n")
            if record["iteration"] in snapshots:
                maps = hidden_attention(ctx.caches[0], params, ctx)
                _write_snapshot(snapshot_dir, record["iteration"], snapshots[record["iteration"]], maps)
        logger.info("trained %s for %d iterations; final loss %.4f", cfg.method, cfg.iterations, metrics[-1]["loss"])
        return FitResult(params=params, state=state, metrics=metrics, grid=ctx.grid)
