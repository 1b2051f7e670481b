# ##################################################################
# config
# pydantic models that forbid unknown keys and are frozen once built

import hashlib
import json
import math
from pathlib import Path
from typing import Literal, TypeVar

from pydantic import BaseModel, ConfigDict, Field, PositiveFloat, PositiveInt, ValidationError, model_validator

from .errors import ConfigError

DEFAULT_MAX_LOG_RATIO = math.log(1000.0 / 16.0)


# ##################################################################
# strict model
# shared pydantic base: unknown keys are errors, instances are immutable
class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class LevelSpec(StrictModel):
    stride: PositiveInt
    base_size: PositiveFloat


# ##################################################################
# anchor grid config
# pyramid levels plus the per-cell anchor shapes tiled on every level
class AnchorGridConfig(StrictModel):
    levels: list[LevelSpec] = Field(min_length=1)
    octave_scales: list[PositiveFloat] = Field(default=[1.0, 2 ** (1 / 3), 2 ** (2 / 3)], min_length=1)
    aspect_ratios: list[PositiveFloat] = Field(default=[0.5, 1.0, 2.0], min_length=1)
    image_width: PositiveInt
    image_height: PositiveInt

    @property
    def anchors_per_cell(self) -> int:
        return len(self.octave_scales) * len(self.aspect_ratios)

    def feature_size(self, level: int) -> tuple[int, int]:
        stride = self.levels[level].stride
        return -(-self.image_height // stride), -(-self.image_width // stride)

    @classmethod
    def desk(cls, image_width: int = 128, image_height: int = 128) -> "AnchorGridConfig":
        levels = [LevelSpec(stride=s, base_size=2 * s) for s in (8, 16, 32)]
        return cls(levels=levels, image_width=image_width, image_height=image_height)

    @classmethod
    def retinanet(cls, image_size: int = 800) -> "AnchorGridConfig":
        levels = [LevelSpec(stride=2**p, base_size=2 ** (p + 2)) for p in range(3, 8)]
        return cls(levels=levels, image_width=image_size, image_height=image_size)


class RenderConfig(StrictModel):
    noise_channels: int = Field(default=2, ge=0)
    # width of the level-match gaussian, in octaves
    level_match_sigma: PositiveFloat = 0.75
    # support of an object's bump extends this many strides past its box
    support_pad: float = Field(default=0.5, ge=0.0)


class LossConfig(StrictModel):
    beta: float = Field(default=0.75, ge=0.0)
    alpha_focal: float = Field(default=0.25, gt=0.0, lt=1.0)
    gamma_focal: float = Field(default=2.0, ge=0.0)
    smooth_l1_delta: PositiveFloat = 1.0 / 9.0
    prob_clamp: float = Field(default=1e-7, gt=0.0, lt=0.5)


class DepressionSchedule(StrictModel):
    variant: Literal["none", "constant", "step", "symmetric_step"] = "symmetric_step"
    peak_fraction: float = Field(default=0.5, ge=0.0, le=1.0)
    step_count: PositiveInt = 5


# ##################################################################
# dataset config
# knobs for the seeded synthetic scene generator
class DatasetConfig(StrictModel):
    scene_count: int = Field(default=10, ge=0)
    class_count: PositiveInt = 3
    min_objects: int = Field(default=1, ge=0)
    max_objects: int = Field(default=4, ge=0)
    min_size: PositiveFloat = 12.0
    max_size: PositiveFloat = 72.0
    min_aspect: float = Field(default=1.0, ge=1.0)
    max_aspect: float = Field(default=8.0, ge=1.0, le=8.0)
    slender_fraction: float = Field(default=0.3, ge=0.0, le=1.0)
    slender_min_aspect: float = Field(default=4.0, ge=1.0)
    max_pairwise_iou: float = Field(default=0.3, ge=0.0, le=1.0)
    min_area: PositiveFloat = 64.0
    noise_level: float = Field(default=0.02, ge=0.0)
    image_width: PositiveInt = 128
    image_height: PositiveInt = 128
    seed: int = Field(default=0, ge=0)
    max_retries: PositiveInt = 200
    workers: PositiveInt = 1

    @model_validator(mode="after")
    def _check_ranges(self) -> "DatasetConfig":
        if self.min_objects > self.max_objects:
            raise ValueError("min_objects must not exceed max_objects")
        if self.min_size > self.max_size:
            raise ValueError("min_size must not exceed max_size")
        if self.min_aspect > self.max_aspect:
            raise ValueError("min_aspect must not exceed max_aspect")
        if self.min_area > self.max_size**2:
            raise ValueError("min_area is larger than any box max_size allows")
        if self.min_size * math.sqrt(self.min_aspect) > min(self.image_width, self.image_height):
            raise ValueError("even the smallest object cannot fit inside the image")
        return self


# ##################################################################
# train config
# everything a training run needs besides the dataset itself
class TrainConfig(StrictModel):
    method: Literal["mal", "baseline"] = "mal"
    iterations: PositiveInt = 2000
    batch_size: PositiveInt = 4
    lr: PositiveFloat = 0.01
    warmup_iters: int = Field(default=500, ge=0)
    momentum: float = Field(default=0.9, ge=0.0, lt=1.0)
    weight_decay: float = Field(default=1e-4, ge=0.0)
    lr_decay_fractions: list[float] = Field(default=[2 / 3, 8 / 9])
    lr_decay_factor: float = Field(default=0.1, gt=0.0, le=1.0)
    bag_size: PositiveInt = 50
    pos_iou: float = Field(default=0.5, ge=0.0, le=1.0)
    neg_iou: float = Field(default=0.4, ge=0.0, le=1.0)
    selection: Literal["all", "all_top1", "top1"] = "all_top1"
    depression: DepressionSchedule = DepressionSchedule()
    loss: LossConfig = LossConfig()
    render: RenderConfig = RenderConfig()
    anchors: AnchorGridConfig | None = None
    hidden_dim: PositiveInt = 32
    init_std: float = Field(default=0.01, ge=0.0)
    prior_prob: float = Field(default=0.01, gt=0.0, lt=1.0)
    max_log_ratio: PositiveFloat = DEFAULT_MAX_LOG_RATIO
    seed: int = Field(default=0, ge=0)
    workers: PositiveInt = 1
    attention_snapshots: list[float] = Field(default=[])

    @model_validator(mode="after")
    def _check_thresholds(self) -> "TrainConfig":
        if self.neg_iou > self.pos_iou:
            raise ValueError("neg_iou must not exceed pos_iou")
        if any(not 0.0 < f < 1.0 for f in self.lr_decay_fractions):
            raise ValueError("lr_decay_fractions must lie strictly between 0 and 1")
        if any(not 0.0 <= f <= 1.0 for f in self.attention_snapshots):
            raise ValueError("attention_snapshots are progress values in [0, 1]")
        return self

    @property
    def effective_warmup(self) -> int:
        return min(self.warmup_iters, self.iterations // 10)

    def grid_for(self, image_width: int, image_height: int) -> AnchorGridConfig:
        return self.anchors or AnchorGridConfig.desk(image_width, image_height)


class EvalConfig(StrictModel):
    split: Literal["train", "val"] = "val"
    nms_threshold: float = Field(default=0.5, gt=0.0, lt=1.0)
    score_threshold: float = Field(default=0.05, ge=0.0, lt=1.0)
    pre_nms_top_n: PositiveInt = 1000
    max_detections: PositiveInt = 100
    workers: PositiveInt = 1


# ##################################################################
# ablation grid
# axes of the ablation cross-product; every cell shares dataset and seed
class AblationGrid(StrictModel):
    # baseline cells ignore bag size and selection but keep the depression axis
    methods: list[Literal["mal", "baseline"]] = Field(default=["mal"], min_length=1)
    bag_sizes: list[PositiveInt] = Field(default=[40, 50, 60], min_length=1)
    selections: list[Literal["all", "all_top1", "top1"]] = Field(default=["all", "all_top1"], min_length=1)
    depressions: list[Literal["none", "constant", "step", "symmetric_step"]] = Field(
        default=["none", "constant", "step", "symmetric_step"], min_length=1
    )
    seeds: list[int] = Field(default=[0], min_length=1)
    train: TrainConfig = TrainConfig()
    eval: EvalConfig = EvalConfig()


ModelT = TypeVar("ModelT", bound=BaseModel)


# ##################################################################
# describe validation error
# turns the first pydantic error into a one-line message naming the key
def describe_validation_error(err: ValidationError) -> str:
    first = err.errors()[0]
    key = ".".join(str(part) for part in first["loc"]) or "<root>"
    if first["type"] == "extra_forbidden":
        return f"unknown config key '{key}'"
    return f"invalid value for '{key}': {first['msg']}"


# ##################################################################
# load config
# reads a json file into the given strict model
def load_config(path: Path | str, model_type: type[ModelT]) -> ModelT:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path} is not valid json (line {e.lineno}): {e.msg}") from e
    return parse_config(data, model_type)


def parse_config(data: object, model_type: type[ModelT]) -> ModelT:
    try:
        return model_type.model_validate(data)
    except ValidationError as e:
        raise ConfigError(describe_validation_error(e)) from e


# ##################################################################
# config hash
# sha-256 of the canonical json form, stable across runs and key order
def config_hash(model: BaseModel) -> str:
    canonical = json.dumps(model.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()
