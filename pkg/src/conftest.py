import numpy as np
import pytest

from .config import AnchorGridConfig, DatasetConfig, LevelSpec, RenderConfig, TrainConfig
from .geometry import Box, generate_anchors
from .scenes import GroundTruthObject, Scene, generate_dataset


# ##################################################################
# rng fixture
# a fresh seeded generator per test
@pytest.fixture
def rng():
    return np.random.default_rng(0)


# ##################################################################
# desk anchors fixture
# 128x128 image, strides 8/16/32, nine shapes per cell
@pytest.fixture(scope="session")
def desk_anchors():
    return generate_anchors(AnchorGridConfig.desk())


# ##################################################################
# toy grid
# one 32x32 level with a single square anchor per cell
def toy_grid() -> AnchorGridConfig:
    return AnchorGridConfig(
        levels=[LevelSpec(stride=8, base_size=16)],
        octave_scales=[1.0],
        aspect_ratios=[1.0],
        image_width=32,
        image_height=32,
    )


def toy_scene(*boxes: tuple[float, float, float, float], class_ids=None, seed: int = 7, scene_id: int = 0) -> Scene:
    class_ids = class_ids or [0] * len(boxes)
    return Scene(
        id=scene_id,
        split="train",
        image_width=32,
        image_height=32,
        seed=seed,
        objects=[GroundTruthObject(class_id=c, box=Box(*b)) for c, b in zip(class_ids, boxes)],
    )


@pytest.fixture
def toy_train_config():
    return TrainConfig(
        iterations=40,
        batch_size=1,
        lr=0.01,
        warmup_iters=0,
        bag_size=4,
        hidden_dim=8,
        anchors=toy_grid(),
        render=RenderConfig(noise_channels=0),
    )


# ##################################################################
# tiny dataset fixture
# ten small-image scenes, generated once per session
@pytest.fixture(scope="session")
def tiny_dataset():
    return generate_dataset(
        DatasetConfig(
            scene_count=10,
            class_count=2,
            min_objects=1,
            max_objects=2,
            min_size=10,
            max_size=24,
            max_aspect=6,
            image_width=64,
            image_height=64,
            seed=3,
        )
    )
