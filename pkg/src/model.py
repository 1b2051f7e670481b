# ##################################################################
# model
# deterministic scene renderer and the hand-differentiated scorer: one
# softplus hidden layer feeding shared classification and regression heads

import json
import logging
import math
from collections.abc import Callable, Iterator
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
from scipy.special import expit

from .config import AnchorGridConfig, RenderConfig, TrainConfig
from .errors import CheckpointError, ShapeError, TrainingError

logger = logging.getLogger(__name__)

GEOMETRY_CHANNELS = 4
CHECKPOINT_MAGIC = b"MALCKPT 1\n"
CHECKPOINT_VERSION = 1


# ##################################################################
# feature map
# one (channels, height, width) array per pyramid level
@dataclass(frozen=True)
class FeatureMap:
    levels: tuple[np.ndarray, ...]

    @property
    def channels(self) -> int:
        return self.levels[0].shape[0]

    def map(self, fn: Callable[[np.ndarray], np.ndarray]) -> "FeatureMap":
        return FeatureMap(tuple(fn(level) for level in self.levels))


def feature_channels(num_classes: int, render: RenderConfig) -> int:
    return num_classes + GEOMETRY_CHANNELS + render.noise_channels


def _raised_cosine(centers: np.ndarray, middle: float, half_extent: float) -> np.ndarray:
    u = (centers - middle) / half_extent
    return np.where(np.abs(u) < 1.0, 0.5 * (1.0 + np.cos(np.pi * u)), 0.0)


# ##################################################################
# render features
# deterministic scene -> pyramid features. channel layout per level:
# [presence per class, dx, dy, log w, log h, noise...]. the geometry
# channels are the bump-weighted average over objects. noise_level is the
# dataset's feature noise std, seeded per scene and level
def render_features(
    scene, grid: AnchorGridConfig, render: RenderConfig, num_classes: int, noise_level: float = 0.0
) -> FeatureMap:
    mean_scale = math.exp(np.mean(np.log(grid.octave_scales)))
    channels = feature_channels(num_classes, render)
    levels = []
    for index, level_cfg in enumerate(grid.levels):
        height, width = grid.feature_size(index)
        ys = (np.arange(height) + 0.5) * level_cfg.stride
        xs = (np.arange(width) + 0.5) * level_cfg.stride
        level = np.zeros((channels, height, width), dtype=np.float64)
        geometry = np.zeros((GEOMETRY_CHANNELS, height, width), dtype=np.float64)
        weight = np.zeros((height, width), dtype=np.float64)
        typical = level_cfg.base_size * mean_scale
        pad = render.support_pad * level_cfg.stride

        for obj in scene.objects:
            box = obj.box
            cx, cy = (box.x1 + box.x2) / 2, (box.y1 + box.y2) / 2
            size = math.sqrt(box.area)
            match = math.exp(-(math.log2(size / typical) ** 2) / (2 * render.level_match_sigma**2))
            bump = np.outer(
                _raised_cosine(ys, cy, box.height / 2 + pad),
                _raised_cosine(xs, cx, box.width / 2 + pad),
            )
            painted = match * bump
            level[obj.class_id] += painted
            base = level_cfg.base_size
            geometry[0] += painted * (cx - xs[None, :]) / base
            geometry[1] += painted * (cy - ys[:, None]) / base
            geometry[2] += painted * math.log(box.width / base)
            geometry[3] += painted * math.log(box.height / base)
            weight += painted

        level[num_classes : num_classes + GEOMETRY_CHANNELS] = geometry / (weight + 1e-2)
        if noise_level > 0.0:
            rng = np.random.default_rng([scene.seed, index])
            level += rng.normal(scale=noise_level, size=level.shape)
        levels.append(level)
    return FeatureMap(tuple(levels))


# ##################################################################
# scorer params
# hidden transform plus the two heads; gradients share this layout
@dataclass
class ScorerParams:
    w_hidden: np.ndarray
    b_hidden: np.ndarray
    w_cls: np.ndarray
    b_cls: np.ndarray
    w_reg: np.ndarray
    b_reg: np.ndarray

    @property
    def channels(self) -> int:
        return self.w_hidden.shape[1]

    @property
    def hidden_dim(self) -> int:
        return self.w_hidden.shape[0]

    @property
    def anchors_per_cell(self) -> int:
        return self.w_reg.shape[0] // 4

    @property
    def num_classes(self) -> int:
        return self.w_cls.shape[0] // self.anchors_per_cell

    def items(self) -> Iterator[tuple[str, np.ndarray]]:
        for field in fields(self):
            yield field.name, getattr(self, field.name)

    def map(self, fn: Callable[[np.ndarray], np.ndarray]) -> "ScorerParams":
        return ScorerParams(**{name: fn(value) for name, value in self.items()})

    def copy(self) -> "ScorerParams":
        return self.map(np.copy)

    def zeros_like(self) -> "ScorerParams":
        return self.map(np.zeros_like)

    def add_(self, other: "ScorerParams") -> "ScorerParams":
        for name, value in self.items():
            value += getattr(other, name)
        return self

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(value)) for _, value in self.items())

    @classmethod
    def zeros(cls, channels: int, hidden_dim: int, anchors_per_cell: int, num_classes: int) -> "ScorerParams":
        return cls(
            w_hidden=np.zeros((hidden_dim, channels)),
            b_hidden=np.zeros(hidden_dim),
            w_cls=np.zeros((anchors_per_cell * num_classes, hidden_dim)),
            b_cls=np.zeros(anchors_per_cell * num_classes),
            w_reg=np.zeros((anchors_per_cell * 4, hidden_dim)),
            b_reg=np.zeros(anchors_per_cell * 4),
        )

    @classmethod
    def init(
        cls,
        rng: np.random.Generator,
        channels: int,
        hidden_dim: int,
        anchors_per_cell: int,
        num_classes: int,
        std: float = 0.01,
        prior_prob: float = 0.01,
    ) -> "ScorerParams":
        params = cls.zeros(channels, hidden_dim, anchors_per_cell, num_classes)
        # hidden layer: fan-in scaled normal
        params.w_hidden[...] = rng.normal(scale=1.0 / math.sqrt(channels), size=params.w_hidden.shape)
        params.w_cls[...] = rng.normal(scale=std, size=params.w_cls.shape)
        params.w_reg[...] = rng.normal(scale=std, size=params.w_reg.shape)
        params.b_cls[...] = -math.log((1.0 - prior_prob) / prior_prob)
        return params


# ##################################################################
# predictions
# per anchor: class logits and sigmoid probabilities (n, k), deltas (n, 4)
@dataclass(frozen=True)
class Predictions:
    logits: np.ndarray
    probs: np.ndarray
    deltas: np.ndarray


@dataclass(frozen=True)
class ForwardCache:
    inputs: tuple[np.ndarray, ...]
    pre_activations: tuple[np.ndarray, ...]
    hidden: tuple[np.ndarray, ...]
    probs: np.ndarray
    level_sizes: tuple[int, ...]


# ##################################################################
# forward
# per cell: hidden = softplus(w_h x + b_h); heads give a_per_cell blocks of
# logits and deltas, flattened in generate_anchors order
def forward(features: FeatureMap, params: ScorerParams) -> tuple[Predictions, ForwardCache]:
    per_cell = params.anchors_per_cell
    num_classes = params.num_classes
    inputs, pre, hidden, logits, deltas, sizes = [], [], [], [], [], []
    for level in features.levels:
        if level.ndim != 3 or level.shape[0] != params.channels:
            raise ShapeError(f"feature level has shape {level.shape}, scorer expects {params.channels} channels")
        x = level.reshape(level.shape[0], -1).T
        z = x @ params.w_hidden.T + params.b_hidden
        h = np.logaddexp(0.0, z)
        inputs.append(x)
        pre.append(z)
        hidden.append(h)
        logits.append((h @ params.w_cls.T + params.b_cls).reshape(-1, num_classes))
        deltas.append((h @ params.w_reg.T + params.b_reg).reshape(-1, 4))
        sizes.append(x.shape[0] * per_cell)
    all_logits = np.concatenate(logits)
    probs = expit(all_logits)
    predictions = Predictions(logits=all_logits, probs=probs, deltas=np.concatenate(deltas))
    cache = ForwardCache(tuple(inputs), tuple(pre), tuple(hidden), probs, tuple(sizes))
    return predictions, cache


# ##################################################################
# backward
# exact gradients w.r.t. the scorer params given upstream gradients on
# probabilities and deltas
def backward(
    grad_probs: np.ndarray, grad_deltas: np.ndarray, cache: ForwardCache | None, params: ScorerParams
) -> ScorerParams:
    if cache is None:
        raise ShapeError("backward needs the cache produced by forward")
    if grad_probs.shape != cache.probs.shape or grad_deltas.shape != (cache.probs.shape[0], 4):
        raise ShapeError(f"upstream gradients {grad_probs.shape}/{grad_deltas.shape} do not match predictions")
    grads = params.zeros_like()
    grad_logits = grad_probs * cache.probs * (1.0 - cache.probs)
    start = 0
    for x, z, h, size in zip(cache.inputs, cache.pre_activations, cache.hidden, cache.level_sizes):
        cells = x.shape[0]
        g_cls = grad_logits[start : start + size].reshape(cells, -1)
        g_reg = grad_deltas[start : start + size].reshape(cells, -1)
        start += size
        grads.w_cls += g_cls.T @ h
        grads.b_cls += g_cls.sum(axis=0)
        grads.w_reg += g_reg.T @ h
        grads.b_reg += g_reg.sum(axis=0)
        g_hidden = (g_cls @ params.w_cls + g_reg @ params.w_reg) * expit(z)
        grads.w_hidden += g_hidden.T @ x
        grads.b_hidden += g_hidden.sum(axis=0)
    return grads


# ##################################################################
# optimizer state
# momentum buffers; created lazily on the first step
@dataclass
class OptimizerState:
    velocity: ScorerParams | None = None
    steps: int = 0


# ##################################################################
# sgd step
# velocity = momentum * velocity + grad + wd * param; param -= lr * velocity
def sgd_step(
    params: ScorerParams,
    grads: ScorerParams,
    state: OptimizerState,
    lr: float,
    momentum: float,
    weight_decay: float,
) -> tuple[ScorerParams, OptimizerState]:
    if not grads.all_finite():
        bad = [name for name, value in grads.items() if not np.all(np.isfinite(value))]
        raise TrainingError(f"non-finite gradients in {', '.join(bad)}; step aborted")
    velocity = state.velocity if state.velocity is not None else params.zeros_like()
    new_velocity = ScorerParams(
        **{
            name: momentum * getattr(velocity, name) + grad + weight_decay * getattr(params, name)
            for name, grad in grads.items()
        }
    )
    new_params = ScorerParams(
        **{name: value - lr * getattr(new_velocity, name) for name, value in params.items()}
    )
    return new_params, OptimizerState(velocity=new_velocity, steps=state.steps + 1)


# ##################################################################
# learning rate
# linear warmup over the first iterations, then x factor at each decay point
def learning_rate(t: int, cfg: TrainConfig) -> float:
    lr = cfg.lr
    warmup = cfg.effective_warmup
    if warmup > 0 and t < warmup:
        lr *= (t + 1) / warmup
    for fraction in cfg.lr_decay_fractions:
        if t >= fraction * cfg.iterations:
            lr *= cfg.lr_decay_factor
    return lr


# ##################################################################
# finite difference check
# largest relative error per parameter group between analytic gradients and
# central differences of loss_fn. max_entries samples entries per group
def finite_difference_check(
    loss_fn: Callable[[ScorerParams], float],
    params: ScorerParams,
    analytic: ScorerParams,
    eps: float = 1e-5,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
    floor: float = 1e-6,
) -> dict[str, float]:
    rng = rng or np.random.default_rng(0)
    worst = {}
    for name, value in params.items():
        indices = list(np.ndindex(value.shape))
        if max_entries is not None and len(indices) > max_entries:
            picks = rng.choice(len(indices), size=max_entries, replace=False)
            indices = [indices[i] for i in picks]
        err = 0.0
        for index in indices:
            original = value[index]
            value[index] = original + eps
            up = loss_fn(params)
            value[index] = original - eps
            down = loss_fn(params)
            value[index] = original
            numeric = (up - down) / (2 * eps)
            exact = getattr(analytic, name)[index]
            err = max(err, abs(numeric - exact) / max(abs(numeric), abs(exact), floor))
        worst[name] = err
    return worst


# ##################################################################
# save checkpoint
# magic line, json header line, then row-major little-endian float64 blobs
def save_checkpoint(path: Path | str, params: ScorerParams, meta: dict | None = None) -> None:
    groups = [{"name": name, "shape": list(value.shape)} for name, value in params.items()]
    header = {
        "format": "MALCKPT",
        "version": CHECKPOINT_VERSION,
        "dtype": "<f8",
        "groups": groups,
        "meta": meta or {},
    }
    payload = b"".join(np.ascontiguousarray(value, dtype="<f8").tobytes() for _, value in params.items())
    blob = CHECKPOINT_MAGIC + json.dumps(header, sort_keys=True).encode() + b"\n" + payload
    Path(path).write_bytes(blob)


def _check_header(path: Path, header: object) -> list[dict]:
    if not isinstance(header, dict):
        raise CheckpointError(f"{path} header is not a json object")
    if header.get("format") != "MALCKPT" or header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path} header is not MALCKPT version {CHECKPOINT_VERSION}")
    if not isinstance(header.get("meta", {}), dict):
        raise CheckpointError(f"{path} header meta is not a json object")
    groups = header.get("groups")
    if not isinstance(groups, list):
        raise CheckpointError(f"{path} header has no groups list")
    for i, group in enumerate(groups):
        if not isinstance(group, dict) or not isinstance(group.get("name"), str):
            raise CheckpointError(f"{path} group {i} has no name")
        shape = group.get("shape")
        if not isinstance(shape, list) or not all(isinstance(n, int) and n >= 0 for n in shape):
            raise CheckpointError(f"{path} group '{group['name']}' has no valid shape")
    return groups


# ##################################################################
# load checkpoint
# inverse of save_checkpoint; bit-exact
def load_checkpoint(path: Path | str) -> tuple[ScorerParams, dict]:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e.strerror}") from e
    if not blob.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path} is not a MALCKPT version {CHECKPOINT_VERSION} file")
    rest = blob[len(CHECKPOINT_MAGIC) :]
    newline = rest.find(b"\n")
    if newline < 0:
        raise CheckpointError(f"{path} has no header line")
    try:
        header = json.loads(rest[:newline])
    except json.JSONDecodeError as e:
        raise CheckpointError(f"{path} has a malformed header: {e.msg}") from e
    groups = _check_header(path, header)
    payload = rest[newline + 1 :]
    arrays = {}
    offset = 0
    for group in groups:
        shape = tuple(group["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        end = offset + count * 8
        if end > len(payload):
            raise CheckpointError(f"{path} is truncated inside group {group['name']}")
        arrays[group["name"]] = np.frombuffer(payload[offset:end], dtype="<f8").reshape(shape).astype(np.float64)
        offset = end
    if offset != len(payload):
        raise CheckpointError(f"{path} has {len(payload) - offset} trailing bytes")
    try:
        params = ScorerParams(**arrays)
    except TypeError as e:
        raise CheckpointError(f"{path} does not hold scorer params: {e}") from e
    return params, header.get("meta", {})
