# ##################################################################
# scenes
# seeded synthetic scenes and their line-per-scene file format; per-scene
# seeds come from the master seed through splitmix64

import logging
import math
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Literal

import numpy as np
from pydantic import (
    BaseModel,
    ConfigDict,
    NonNegativeInt,
    PositiveInt,
    ValidationError,
    field_serializer,
    field_validator,
    model_validator,
)

from .config import DatasetConfig, describe_validation_error
from .errors import DatasetError
from .geometry import Box, iou_matrix

logger = logging.getLogger(__name__)

DATASET_FORMAT = "mal-scenes"
DATASET_VERSION = 1
MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15


# ##################################################################
# splitmix64
# one output of the splitmix64 mixer for a 64-bit state
def splitmix64(state: int) -> int:
    z = state & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


# ##################################################################
# scene seed
# the (index + 1)-th output of a splitmix64 stream started at the master seed,
# kept to 63 bits so it stays a signed 64-bit json integer
def scene_seed(master_seed: int, index: int) -> int:
    return splitmix64(master_seed + (index + 1) * GOLDEN_GAMMA) >> 1


class _Record(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class GroundTruthObject(_Record):
    class_id: NonNegativeInt
    box: Box

    @field_validator("box", mode="before")
    @classmethod
    def _box_from_list(cls, value):
        if isinstance(value, (list, tuple)):
            if len(value) != 4:
                raise ValueError("box needs four coordinates [x1, y1, x2, y2]")
            return Box(*(float(v) for v in value))
        return value

    @field_serializer("box")
    def _box_to_list(self, box: Box) -> list[float]:
        return [box.x1, box.y1, box.x2, box.y2]


# ##################################################################
# scene
# one image's worth of objects; boxes must sit inside the image
class Scene(_Record):
    id: NonNegativeInt
    split: Literal["train", "val"]
    image_width: PositiveInt
    image_height: PositiveInt
    seed: NonNegativeInt
    objects: list[GroundTruthObject]

    @model_validator(mode="after")
    def _inside_image(self) -> "Scene":
        for obj in self.objects:
            b = obj.box
            if b.x1 < 0 or b.y1 < 0 or b.x2 > self.image_width or b.y2 > self.image_height:
                raise ValueError(f"object box {[b.x1, b.y1, b.x2, b.y2]} leaves the image")
        return self

    def gt_boxes(self) -> np.ndarray:
        if not self.objects:
            return np.zeros((0, 4), dtype=np.float64)
        return np.stack([obj.box.as_array() for obj in self.objects])

    def gt_classes(self) -> np.ndarray:
        return np.array([obj.class_id for obj in self.objects], dtype=np.int64)


class DatasetHeader(_Record):
    format: Literal["mal-scenes"] = DATASET_FORMAT
    version: Literal[1] = DATASET_VERSION
    class_count: PositiveInt
    image_width: PositiveInt
    image_height: PositiveInt
    noise_level: float


# ##################################################################
# dataset
# header fields plus every scene; train / val views by the split tag
class Dataset(_Record):
    class_count: PositiveInt
    image_width: PositiveInt
    image_height: PositiveInt
    noise_level: float = 0.0
    scenes: list[Scene] = []

    @model_validator(mode="after")
    def _consistent(self) -> "Dataset":
        seen = set()
        for scene in self.scenes:
            if scene.id in seen:
                raise ValueError(f"duplicate scene id {scene.id}")
            seen.add(scene.id)
            for obj in scene.objects:
                if obj.class_id >= self.class_count:
                    raise ValueError(f"scene {scene.id} uses class {obj.class_id} of {self.class_count}")
        return self

    @property
    def train(self) -> list[Scene]:
        return self.split("train")

    @property
    def val(self) -> list[Scene]:
        return self.split("val")

    def split(self, name: str) -> list[Scene]:
        return [scene for scene in self.scenes if scene.split == name]

    def header(self) -> DatasetHeader:
        return DatasetHeader(
            class_count=self.class_count,
            image_width=self.image_width,
            image_height=self.image_height,
            noise_level=self.noise_level,
        )


def _aspect_range(cfg: DatasetConfig, slender: bool) -> tuple[float, float]:
    cut = min(max(cfg.slender_min_aspect, cfg.min_aspect), cfg.max_aspect)
    return (cut, cfg.max_aspect) if slender else (cfg.min_aspect, cut)


# ##################################################################
# generate scene
# rejection-samples each object on a 0.1 pixel grid until it fits the image,
# the area floor and the pairwise iou cap
def _generate_scene(cfg: DatasetConfig, index: int, split: str) -> Scene:
    seed = scene_seed(cfg.seed, index)
    rng = np.random.default_rng(seed)
    count = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    width10, height10 = cfg.image_width * 10, cfg.image_height * 10
    objects: list[GroundTruthObject] = []
    for number in range(count):
        rejections: Counter[str] = Counter()
        for _ in range(cfg.max_retries):
            class_id = int(rng.integers(cfg.class_count))
            low, high = _aspect_range(cfg, bool(rng.random() < cfg.slender_fraction))
            aspect = float(rng.uniform(low, high)) if high > low else low
            size = math.exp(rng.uniform(math.log(cfg.min_size), math.log(cfg.max_size)))
            w10 = max(1, round(size * math.sqrt(aspect) * 10))
            h10 = max(1, round(size / math.sqrt(aspect) * 10))
            if rng.random() < 0.5:
                w10, h10 = h10, w10
            if w10 > width10 or h10 > height10:
                rejections["image_size"] += 1
                continue
            if w10 * h10 / 100 < cfg.min_area:
                rejections["min_area"] += 1
                continue
            x10 = int(rng.integers(0, width10 - w10 + 1))
            y10 = int(rng.integers(0, height10 - h10 + 1))
            box = Box(x10 / 10, y10 / 10, (x10 + w10) / 10, (y10 + h10) / 10)
            if objects:
                existing = np.stack([o.box.as_array() for o in objects])
                if iou_matrix(box.as_array(), existing).max() > cfg.max_pairwise_iou:
                    rejections["max_pairwise_iou"] += 1
                    continue
            objects.append(GroundTruthObject(class_id=class_id, box=box))
            break
        else:
            constraint = rejections.most_common(1)[0][0] if rejections else "unknown"
            raise DatasetError(
                f"scene {index}: object {number} not placed within {cfg.max_retries} tries; "
                f"infeasible constraint '{constraint}'"
            )
    return Scene(
        id=index,
        split=split,
        image_width=cfg.image_width,
        image_height=cfg.image_height,
        seed=seed,
        objects=objects,
    )


def train_count(scene_count: int) -> int:
    return scene_count - scene_count // 5


# ##################################################################
# generate dataset
# deterministic from the master seed; first 80% of indices train, rest val
def generate_dataset(cfg: DatasetConfig) -> Dataset:
    cut = train_count(cfg.scene_count)

    def one(index: int) -> Scene:
        return _generate_scene(cfg, index, "train" if index < cut else "val")

    if cfg.workers > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            scenes = list(pool.map(one, range(cfg.scene_count)))
    else:
        scenes = [one(index) for index in range(cfg.scene_count)]
    objects = sum(len(s.objects) for s in scenes)
    logger.info("generated %d scenes (%d train) with %d objects", len(scenes), cut, objects)
    return Dataset(
        class_count=cfg.class_count,
        image_width=cfg.image_width,
        image_height=cfg.image_height,
        noise_level=cfg.noise_level,
        scenes=scenes,
    )


# ##################################################################
# save dataset
# header record line, then one json scene record per line
def save_dataset(dataset: Dataset, path: Path | str) -> None:
    lines = [dataset.header().model_dump_json()]
    lines.extend(scene.model_dump_json() for scene in dataset.scenes)
    Path(path).write_text("\n".join(lines) + "\n")


# ##################################################################
# load dataset
# strict inverse of save_dataset; errors name the offending line
def load_dataset(path: Path | str) -> Dataset:
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as e:
        raise DatasetError(f"cannot read dataset {path}: {e.strerror}") from e
    if not lines:
        raise DatasetError(f"{path}:1: missing dataset header")
    try:
        header = DatasetHeader.model_validate_json(lines[0])
    except ValidationError as e:
        raise DatasetError(f"{path}:1: bad header: {_first_problem(e)}") from e

    scenes = []
    for number, line in enumerate(lines[1:], start=2):
        try:
            scenes.append(Scene.model_validate_json(line))
        except ValidationError as e:
            raise DatasetError(f"{path}:{number}: bad scene record: {_first_problem(e)}") from e
    try:
        return Dataset(**header.model_dump(exclude={"format", "version"}), scenes=scenes)
    except ValidationError as e:
        raise DatasetError(f"{path}: {_first_problem(e)}") from e


def _first_problem(err: ValidationError) -> str:
    first = err.errors()[0]
    if first["type"] == "json_invalid":
        return f"invalid json ({first['msg']})"
    if first["type"] == "extra_forbidden":
        return f"unknown field '{first['loc'][-1]}'"
    return describe_validation_error(err)


def dataset_summary(dataset: Dataset) -> dict[str, object]:
    aspects = [obj.box.aspect for scene in dataset.scenes for obj in scene.objects]
    return {
        "scenes": len(dataset.scenes),
        "train": len(dataset.train),
        "val": len(dataset.val),
        "objects": len(aspects),
        "slender_objects": sum(1 for a in aspects if a >= 4.0),
    }
