import numpy as np
import pytest

from .errors import GeometryError
from .geometry import iou_matrix
from .matching import IGNORE, NEGATIVE, assign_baseline, build_bags, mal_negatives


def _boxes(*rows) -> np.ndarray:
    return np.array(rows, dtype=np.float64).reshape(-1, 4)


# ##################################################################
# anchor row with a given iou against the unit reference box
# shifts a 10x10 box horizontally so the overlap hits the target iou
def _box_with_iou(target: float) -> list[float]:
    # overlap width w over a 10x10 pair: iou = 10w / (200 - 10w)
    w = 200 * target / (10 * (1 + target))
    return [10 - w, 0, 20 - w, 10]


REFERENCE = [0, 0, 10, 10]


def test_identical_anchor_is_positive():
    assignment = assign_baseline(_boxes(REFERENCE, [50, 50, 60, 60]), _boxes(REFERENCE), 0.5, 0.4)
    assert assignment.labels[0] == 0


def test_low_iou_anchor_is_negative():
    anchors = _boxes(REFERENCE, _box_with_iou(0.2))
    assignment = assign_baseline(anchors, _boxes(REFERENCE), 0.5, 0.4)
    assert iou_matrix(anchors[1], _boxes(REFERENCE))[0, 0] == pytest.approx(0.2)
    assert assignment.labels[1] == NEGATIVE


# ##################################################################
# test ignore band
# max iou 0.45 falls in [0.4, 0.5) and is ignored
def test_mid_iou_anchor_is_ignored():
    anchors = _boxes(REFERENCE, _box_with_iou(0.45))
    assignment = assign_baseline(anchors, _boxes(REFERENCE), 0.5, 0.4)
    assert assignment.labels[1] == IGNORE


# ##################################################################
# test low-quality rescue
# an object whose best anchor is below threshold still claims it
def test_low_quality_rescue():
    anchors = _boxes(_box_with_iou(0.3), _box_with_iou(0.1))
    assignment = assign_baseline(anchors, _boxes(REFERENCE), 0.5, 0.4)
    assert assignment.labels.tolist() == [0, NEGATIVE]


def test_rescue_ties_take_lower_anchor_index():
    anchors = _boxes(_box_with_iou(0.3), _box_with_iou(0.3))
    assignment = assign_baseline(anchors, _boxes(REFERENCE), 0.5, 0.4)
    assert assignment.labels.tolist() == [0, NEGATIVE]


def test_empty_ground_truth_makes_everything_negative():
    assignment = assign_baseline(_boxes(REFERENCE, [5, 5, 9, 9]), _boxes(), 0.5, 0.4)
    assert assignment.labels.tolist() == [NEGATIVE, NEGATIVE]


def test_assign_rejects_inverted_thresholds():
    with pytest.raises(GeometryError):
        assign_baseline(_boxes(REFERENCE), _boxes(REFERENCE), 0.4, 0.5)


# ##################################################################
# test baseline labels partition the anchors
# positives, negatives and ignores are disjoint and cover every anchor
def test_baseline_partition(desk_anchors, rng):
    gt = _boxes([10, 10, 40, 30], [60, 20, 70, 90], [90, 90, 126, 120])
    assignment = assign_baseline(desk_anchors.boxes, gt, 0.5, 0.4)
    pos, neg, ign = assignment.positives(), assignment.negatives(), assignment.ignored()
    assert len(pos) + len(neg) + len(ign) == len(desk_anchors)
    assert len(set(pos) | set(neg) | set(ign)) == len(desk_anchors)
    assert set(assignment.labels[pos].tolist()) == {0, 1, 2}


def _overlap_anchors(count: int) -> np.ndarray:
    return np.stack([[i * 0.1, 0.0, 10.0 + i * 0.1, 10.0] for i in range(count)])


# ##################################################################
# test bag truncation
# an object overlapped by 120 anchors yields exactly k of them
def test_bag_truncates_to_k():
    bags = build_bags(_overlap_anchors(120), _boxes(REFERENCE), 50)
    assert len(bags[0]) == 50


def test_bag_keeps_fewer_than_k():
    anchors = np.concatenate([_overlap_anchors(7), _boxes([100, 100, 110, 110])])
    bags = build_bags(anchors, _boxes(REFERENCE), 50)
    assert len(bags[0]) == 7


def test_identical_objects_get_identical_bags():
    bags = build_bags(_overlap_anchors(30), _boxes(REFERENCE, REFERENCE), 10)
    np.testing.assert_array_equal(bags[0].anchor_indices, bags[1].anchor_indices)


def test_object_without_overlap_gets_empty_bag(caplog):
    bags = build_bags(_overlap_anchors(5), _boxes([200, 200, 210, 210]), 10)
    assert bags[0].empty
    assert "empty" in caplog.text


def test_bag_ties_prefer_lower_anchor_index():
    anchors = _boxes([0, 0, 10, 10], [5, 0, 15, 10], [-5, 0, 5, 10])
    bags = build_bags(anchors, _boxes(REFERENCE), 2)
    assert bags[0].anchor_indices.tolist() == [0, 1]


# ##################################################################
# test bags against exhaustive sort
# listed ious equal the k largest ious of the object over all anchors
def test_bags_match_exhaustive_sort(desk_anchors, rng):
    for _ in range(10):
        x1, y1 = rng.uniform(0, 90, size=2)
        w, h = rng.uniform(8, 40, size=2)
        gt = _boxes([x1, y1, x1 + w, y1 + h], [y1, x1, y1 + h, x1 + w])
        bags = build_bags(desk_anchors.boxes, gt, 50)
        ious = iou_matrix(desk_anchors.boxes, gt)
        for bag in bags:
            column = ious[:, bag.object_index]
            expected = sorted(((-v, i) for i, v in enumerate(column) if v > 0))[:50]
            assert bag.anchor_indices.tolist() == [i for _, i in expected]
            np.testing.assert_array_equal(bag.ious, column[bag.anchor_indices])
            assert np.all(np.diff(bag.ious) <= 0)
            assert np.all(bag.ious > 0)


def test_mal_negatives_without_objects():
    assert mal_negatives(_overlap_anchors(4), _boxes(), 0.4).tolist() == [0, 1, 2, 3]


def test_mal_negatives_thresholds():
    anchors = _boxes(_box_with_iou(0.6), _box_with_iou(0.39), _box_with_iou(0.41))
    assert mal_negatives(anchors, _boxes(REFERENCE), 0.4).tolist() == [1]


# ##################################################################
# test negatives never touch confident bag members
# no negative is a bag anchor with iou >= 0.5
def test_negatives_disjoint_from_confident_bag_members(desk_anchors):
    gt = _boxes([10, 10, 40, 30], [60, 20, 70, 90])
    negatives = set(mal_negatives(desk_anchors.boxes, gt, 0.4).tolist())
    for bag in build_bags(desk_anchors.boxes, gt, 50):
        confident = set(bag.anchor_indices[bag.ious >= 0.5].tolist())
        assert not confident & negatives
