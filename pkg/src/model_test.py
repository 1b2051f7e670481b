import numpy as np
import pytest

from .config import AnchorGridConfig, DatasetConfig, LossConfig, RenderConfig, TrainConfig
from .conftest import toy_grid, toy_scene
from .errors import CheckpointError, ShapeError, TrainingError
from .geometry import generate_anchors
from .losses import LossTargets, detection_loss
from .model import (
    CHECKPOINT_MAGIC,
    FeatureMap,
    OptimizerState,
    ScorerParams,
    backward,
    feature_channels,
    finite_difference_check,
    forward,
    learning_rate,
    load_checkpoint,
    render_features,
    save_checkpoint,
    sgd_step,
)
from .scenes import generate_dataset

PLAIN = RenderConfig(noise_channels=0)


def _toy_features(*boxes, render: RenderConfig = PLAIN) -> FeatureMap:
    return render_features(toy_scene(*boxes), toy_grid(), render, num_classes=1)


def _toy_params(seed: int = 0, hidden_dim: int = 8) -> ScorerParams:
    return ScorerParams.init(np.random.default_rng(seed), feature_channels(1, PLAIN), hidden_dim, 1, 1)


# ##################################################################
# test render shapes
# one (K + 4 + noise, H, W) array per level
def test_render_shapes():
    grid = AnchorGridConfig.desk()
    features = render_features(toy_scene((4, 4, 20, 20)), grid, RenderConfig(), num_classes=3)
    assert [level.shape for level in features.levels] == [(9, 16, 16), (9, 8, 8), (9, 4, 4)]


def test_empty_scene_renders_zeros():
    features = _toy_features()
    assert all(not np.any(level) for level in features.levels)


def test_presence_peaks_at_object_centre():
    level = _toy_features((4, 4, 20, 20)).levels[0]
    presence = level[0]
    assert np.unravel_index(np.argmax(presence), presence.shape) == (1, 1)
    assert presence[3, 3] == 0.0


# ##################################################################
# test render determinism
# same scene and seed give identical noise; another seed does not
def test_render_noise_is_seeded():
    render = RenderConfig(noise_channels=2)
    grid = toy_grid()
    a = render_features(toy_scene((4, 4, 20, 20), seed=1), grid, render, 1, noise_level=0.1)
    b = render_features(toy_scene((4, 4, 20, 20), seed=1), grid, render, 1, noise_level=0.1)
    c = render_features(toy_scene((4, 4, 20, 20), seed=2), grid, render, 1, noise_level=0.1)
    np.testing.assert_array_equal(a.levels[0], b.levels[0])
    assert not np.array_equal(a.levels[0], c.levels[0])


def test_dataset_noise_changes_rendered_features():
    render = RenderConfig(noise_channels=2)
    cfg = DatasetConfig(
        scene_count=2, max_objects=1, min_size=10, max_size=16, max_aspect=2, image_width=32, image_height=32, seed=1
    )
    quiet = generate_dataset(cfg.model_copy(update={"noise_level": 0.0}))
    noisy = generate_dataset(cfg.model_copy(update={"noise_level": 0.5}))
    assert quiet.scenes == noisy.scenes
    scene = quiet.scenes[0]
    clean = render_features(scene, toy_grid(), render, quiet.class_count, quiet.noise_level)
    dirty = render_features(scene, toy_grid(), render, noisy.class_count, noisy.noise_level)
    assert np.all(clean.levels[0][-2:] == 0.0)
    assert np.abs(dirty.levels[0] - clean.levels[0]).max() > 0.1


def test_zero_params_give_half_probability_and_zero_deltas():
    features = _toy_features((4, 4, 20, 20))
    params = ScorerParams.zeros(feature_channels(1, PLAIN), 8, 1, 1)
    predictions, _ = forward(features, params)
    assert predictions.probs.shape == (16, 1)
    np.testing.assert_allclose(predictions.probs, 0.5)
    np.testing.assert_array_equal(predictions.deltas, np.zeros((16, 4)))


# ##################################################################
# test forward count and order
# one row per anchor, in generate_anchors order
def test_forward_rows_match_anchor_count():
    grid = AnchorGridConfig.desk()
    render = RenderConfig()
    features = render_features(toy_scene((4, 4, 20, 20)), grid, render, num_classes=2)
    params = ScorerParams.init(np.random.default_rng(0), feature_channels(2, render), 16, grid.anchors_per_cell, 2)
    predictions, _ = forward(features, params)
    assert predictions.probs.shape == (len(generate_anchors(grid)), 2)
    assert predictions.deltas.shape == (len(generate_anchors(grid)), 4)


def test_forward_is_deterministic():
    features = _toy_features((4, 4, 20, 20))
    params = _toy_params()
    first, _ = forward(features, params)
    second, _ = forward(features, params)
    np.testing.assert_array_equal(first.probs, second.probs)
    np.testing.assert_array_equal(first.deltas, second.deltas)


def test_regression_head_does_not_touch_probabilities():
    features = _toy_features((4, 4, 20, 20))
    params = _toy_params()
    before, _ = forward(features, params)
    params.w_reg += 1.0
    after, _ = forward(features, params)
    np.testing.assert_array_equal(before.probs, after.probs)
    assert not np.array_equal(before.deltas, after.deltas)


def test_forward_rejects_wrong_channel_count():
    features = FeatureMap((np.zeros((3, 4, 4)),))
    with pytest.raises(ShapeError):
        forward(features, _toy_params())


def test_backward_without_cache_fails():
    with pytest.raises(ShapeError):
        backward(np.zeros((16, 1)), np.zeros((16, 4)), None, _toy_params())


def test_backward_of_zero_upstream_is_zero():
    params = _toy_params()
    _, cache = forward(_toy_features((4, 4, 20, 20)), params)
    grads = backward(np.zeros((16, 1)), np.zeros((16, 4)), cache, params)
    assert all(not np.any(value) for _, value in grads.items())


# ##################################################################
# test backward is linear in the upstream gradients
# backward(g1 + g2) equals backward(g1) + backward(g2)
def test_backward_is_additive(rng):
    params = _toy_params()
    _, cache = forward(_toy_features((4, 4, 20, 20)), params)
    g1 = (rng.normal(size=(16, 1)), rng.normal(size=(16, 4)))
    g2 = (rng.normal(size=(16, 1)), rng.normal(size=(16, 4)))
    together = backward(g1[0] + g2[0], g1[1] + g2[1], cache, params)
    apart = backward(*g1, cache, params).add_(backward(*g2, cache, params))
    for name, value in together.items():
        np.testing.assert_allclose(value, getattr(apart, name), atol=1e-12)


# ##################################################################
# test backward against finite differences
# a random linear functional of probs and deltas over every parameter entry
def test_backward_matches_finite_differences(rng):
    features = _toy_features((4, 4, 20, 20), (14, 2, 30, 12))
    params = _toy_params(seed=3)
    weights_p = rng.normal(size=(16, 1))
    weights_d = rng.normal(size=(16, 4))

    def loss_fn(p: ScorerParams) -> float:
        predictions, _ = forward(features, p)
        return float(np.sum(weights_p * predictions.probs) + np.sum(weights_d * predictions.deltas))

    _, cache = forward(features, params)
    analytic = backward(weights_p, weights_d, cache, params)
    worst = finite_difference_check(loss_fn, params, analytic, eps=1e-5, floor=1e-3)
    assert set(worst) == {"w_hidden", "b_hidden", "w_cls", "b_cls", "w_reg", "b_reg"}
    assert max(worst.values()) < 1e-4


# ##################################################################
# test end-to-end gradient through the detection loss
# sampled entries of every group agree with central differences
def test_detection_loss_backward_matches_finite_differences():
    features = _toy_features((4, 4, 20, 20))
    params = _toy_params(seed=5)
    targets = LossTargets(
        pos_anchors=np.array([5]),
        pos_classes=np.array([0]),
        pos_deltas=np.array([[0.05, -0.02, 0.1, 0.0]]),
        neg_anchors=np.array([0, 3, 12, 15]),
    )

    def loss_fn(p: ScorerParams) -> float:
        predictions, _ = forward(features, p)
        return detection_loss(predictions.probs, predictions.deltas, targets)[0].total

    predictions, cache = forward(features, params)
    _, g_probs, g_deltas = detection_loss(predictions.probs, predictions.deltas, targets)
    analytic = backward(g_probs, g_deltas, cache, params)
    worst = finite_difference_check(loss_fn, params, analytic, max_entries=20, floor=1e-3)
    assert max(worst.values()) < 1e-4


# ##################################################################
# test detection loss gradient over random instances
# 100 seeded scenes, params and targets; smooth-l1 offsets stay clear of the
# kink and probabilities stay clear of the clamp
def test_detection_loss_backward_on_random_instances():
    for seed in range(100):
        rng = np.random.default_rng(seed)
        num_classes = int(rng.integers(1, 3))
        boxes = []
        for _ in range(int(rng.integers(1, 3))):
            x1, y1 = rng.uniform(0, 18, size=2)
            w, h = rng.uniform(6, 14, size=2)
            boxes.append((x1, y1, x1 + w, y1 + h))
        classes = [int(c) for c in rng.integers(0, num_classes, size=len(boxes))]
        scene = toy_scene(*boxes, class_ids=classes, seed=seed)
        features = render_features(scene, toy_grid(), PLAIN, num_classes)
        params = ScorerParams.init(
            rng,
            feature_channels(num_classes, PLAIN),
            int(rng.integers(2, 9)),
            1,
            num_classes,
            std=0.2,
            prior_prob=float(rng.uniform(0.2, 0.5)),
        )
        params.b_hidden[...] = rng.normal(size=params.b_hidden.shape)
        params.b_reg[...] = rng.normal(scale=0.2, size=params.b_reg.shape)
        cfg = LossConfig(beta=float(rng.uniform(0.25, 1.0)))

        predictions, cache = forward(features, params)
        assert np.all((predictions.probs > 1e-5) & (predictions.probs < 1 - 1e-5))
        order = rng.permutation(16)
        pos = order[: int(rng.integers(1, 4))]
        offsets = rng.uniform(0.02, 0.06, size=(len(pos), 4))
        far = rng.random(size=offsets.shape) < 0.5
        offsets[far] += 0.15
        offsets *= rng.choice([-1.0, 1.0], size=offsets.shape)
        targets = LossTargets(
            pos_anchors=pos,
            pos_classes=rng.integers(0, num_classes, size=len(pos)),
            pos_deltas=predictions.deltas[pos] - offsets,
            neg_anchors=order[len(pos) : len(pos) + int(rng.integers(1, 12))],
        )

        def loss_fn(p: ScorerParams) -> float:
            out, _ = forward(features, p)
            return detection_loss(out.probs, out.deltas, targets, cfg)[0].total

        _, g_probs, g_deltas = detection_loss(predictions.probs, predictions.deltas, targets, cfg)
        analytic = backward(g_probs, g_deltas, cache, params)
        worst = finite_difference_check(loss_fn, params, analytic, eps=1e-5, floor=1e-3)
        assert max(worst.values()) < 1e-4, f"instance {seed}: {worst}"


# ##################################################################
# test momentum trace
# constant unit gradient, lr 0.1, momentum 0.9: 1.0 -> 0.9 -> 0.71
def test_sgd_momentum_trace():
    params = ScorerParams.zeros(2, 2, 1, 1).map(lambda v: np.ones_like(v))
    grads = params.map(np.ones_like)
    state = OptimizerState()
    params, state = sgd_step(params, grads, state, lr=0.1, momentum=0.9, weight_decay=0.0)
    np.testing.assert_allclose(params.w_hidden, 0.9)
    params, state = sgd_step(params, grads, state, lr=0.1, momentum=0.9, weight_decay=0.0)
    np.testing.assert_allclose(params.w_hidden, 0.71)
    assert state.steps == 2


def test_sgd_weight_decay_shrinks_params():
    params = ScorerParams.zeros(2, 2, 1, 1).map(lambda v: np.full_like(v, 2.0))
    new, _ = sgd_step(params, params.zeros_like(), OptimizerState(), lr=0.5, momentum=0.0, weight_decay=0.1)
    np.testing.assert_allclose(new.b_reg, 1.9)


def test_sgd_rejects_non_finite_gradients():
    params = ScorerParams.zeros(2, 2, 1, 1)
    grads = params.zeros_like()
    grads.b_cls[0] = np.nan
    with pytest.raises(TrainingError, match="b_cls"):
        sgd_step(params, grads, OptimizerState(), lr=0.1, momentum=0.9, weight_decay=0.0)


# ##################################################################
# test learning rate schedule
# warmup is capped at a tenth of the run, then x0.1 at 2/3 and 8/9
def test_learning_rate_schedule():
    cfg = TrainConfig(iterations=900, warmup_iters=500, lr=0.01)
    assert learning_rate(0, cfg) == pytest.approx(0.01 / 90)
    assert learning_rate(89, cfg) == pytest.approx(0.01)
    assert learning_rate(300, cfg) == pytest.approx(0.01)
    assert learning_rate(599, cfg) == pytest.approx(0.01)
    assert learning_rate(601, cfg) == pytest.approx(0.001)
    assert learning_rate(799, cfg) == pytest.approx(0.001)
    assert learning_rate(801, cfg) == pytest.approx(0.0001)


def test_learning_rate_without_warmup():
    assert learning_rate(0, TrainConfig(iterations=100, warmup_iters=0, lr=0.02)) == pytest.approx(0.02)


# ##################################################################
# test optimization sanity
# plain sgd on one scene with fixed targets drives the loss under 0.01 in 500 steps
def test_fixed_targets_loss_goes_down():
    features = _toy_features((4, 4, 20, 20))
    params = _toy_params(seed=1)
    targets = LossTargets(
        pos_anchors=np.array([5]),
        pos_classes=np.array([0]),
        pos_deltas=np.zeros((1, 4)),
        neg_anchors=np.array([i for i in range(16) if i != 5]),
    )
    state = OptimizerState()
    losses = []
    for _ in range(500):
        predictions, cache = forward(features, params)
        breakdown, g_probs, g_deltas = detection_loss(predictions.probs, predictions.deltas, targets)
        losses.append(breakdown.total)
        grads = backward(g_probs, g_deltas, cache, params)
        params, state = sgd_step(params, grads, state, lr=0.01, momentum=0.9, weight_decay=1e-4)
    assert losses[-1] < 0.01
    assert losses[-1] < losses[0]
    final, _ = forward(features, params)
    assert final.probs[5, 0] > 0.1


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    params = _toy_params(seed=9)
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, params, {"method": "mal", "iterations": 3})
    loaded, meta = load_checkpoint(path)
    for name, value in params.items():
        assert getattr(loaded, name).tobytes() == value.tobytes()
    assert meta == {"method": "mal", "iterations": 3}


def test_checkpoint_bytes_are_deterministic(tmp_path):
    params = _toy_params(seed=9)
    save_checkpoint(tmp_path / "a.ckpt", params, {"seed": 1})
    save_checkpoint(tmp_path / "b.ckpt", params.copy(), {"seed": 1})
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    assert (tmp_path / "a.ckpt").read_bytes().startswith(CHECKPOINT_MAGIC)


def test_truncated_checkpoint_is_rejected(tmp_path):
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, _toy_params(), {})
    path.write_bytes(path.read_bytes()[:-9])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(path)


def test_checkpoint_with_trailing_bytes_is_rejected(tmp_path):
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, _toy_params(), {})
    path.write_bytes(path.read_bytes() + b"\x00" * 8)
    with pytest.raises(CheckpointError, match="trailing"):
        load_checkpoint(path)


def test_checkpoint_with_wrong_magic_is_rejected(tmp_path):
    path = tmp_path / "model.ckpt"
    path.write_bytes(b"NOTACKPT\n{}\n")
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_missing_checkpoint_is_a_checkpoint_error(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "absent.ckpt")


def test_checkpoint_with_empty_header_is_rejected(tmp_path):
    path = tmp_path / "model.ckpt"
    path.write_bytes(CHECKPOINT_MAGIC + b"{}\n")
    with pytest.raises(CheckpointError, match="MALCKPT version 1"):
        load_checkpoint(path)


def test_checkpoint_group_without_shape_is_rejected(tmp_path):
    header = b'{"format": "MALCKPT", "version": 1, "groups": [{"name": "w_hidden"}], "meta": {}}'
    path = tmp_path / "model.ckpt"
    path.write_bytes(CHECKPOINT_MAGIC + header + b"\n")
    with pytest.raises(CheckpointError, match="w_hidden"):
        load_checkpoint(path)


def test_checkpoint_header_that_is_not_an_object_is_rejected(tmp_path):
    path = tmp_path / "model.ckpt"
    path.write_bytes(CHECKPOINT_MAGIC + b"[1, 2]\n")
    with pytest.raises(CheckpointError, match="not a json object"):
        load_checkpoint(path)
