# ##################################################################
# losses
# focal and smooth-l1 losses, the joint confidence f + beta * g and the
# detection loss with analytic gradients; exact outside the probability clamp

import logging
from dataclasses import dataclass

import numpy as np

from .config import LossConfig
from .errors import LossError
from .geometry import Box, iou, iou_matrix

logger = logging.getLogger(__name__)


def _checked_probabilities(p, clamp: float) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if np.any(~np.isfinite(p)) or np.any(p < 0.0) or np.any(p > 1.0):
        raise LossError("probabilities must lie in [0, 1]")
    return np.clip(p, clamp, 1.0 - clamp)


def _checked_labels(y) -> np.ndarray:
    y = np.asarray(y)
    if np.any((y != 0) & (y != 1)):
        raise LossError("focal loss labels must be 0 or 1")
    return y.astype(bool)


# ##################################################################
# focal loss
# -alpha_t (1 - p_t)^gamma ln p_t, elementwise
def focal_loss(p, y, cfg: LossConfig = LossConfig()):
    p = _checked_probabilities(p, cfg.prob_clamp)
    y = _checked_labels(y)
    p_t = np.where(y, p, 1.0 - p)
    alpha_t = np.where(y, cfg.alpha_focal, 1.0 - cfg.alpha_focal)
    loss = -alpha_t * (1.0 - p_t) ** cfg.gamma_focal * np.log(p_t)
    return float(loss) if loss.ndim == 0 else loss


# ##################################################################
# focal loss grad
# d focal / d p, evaluated at the clamped probability
def focal_loss_grad(p, y, cfg: LossConfig = LossConfig()):
    p = _checked_probabilities(p, cfg.prob_clamp)
    y = _checked_labels(y)
    gamma = cfg.gamma_focal
    p_t = np.where(y, p, 1.0 - p)
    alpha_t = np.where(y, cfg.alpha_focal, 1.0 - cfg.alpha_focal)
    one_minus = 1.0 - p_t
    if gamma == 0.0:
        d_pt = -alpha_t / p_t
    else:
        d_pt = alpha_t * (gamma * one_minus ** (gamma - 1.0) * np.log(p_t) - one_minus**gamma / p_t)
    grad = np.where(y, d_pt, -d_pt)
    return float(grad) if grad.ndim == 0 else grad


# ##################################################################
# smooth l1
# summed over the last axis: 0.5 d^2 / delta inside the band, |d| - delta/2 out
def smooth_l1(pred, target, delta: float = 1.0 / 9.0):
    d = np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    if not np.all(np.isfinite(d)):
        raise LossError("smooth l1 needs finite inputs")
    ad = np.abs(d)
    loss = np.where(ad < delta, 0.5 * d * d / delta, ad - 0.5 * delta).sum(axis=-1)
    return float(loss) if loss.ndim == 0 else loss


def smooth_l1_grad(pred, target, delta: float = 1.0 / 9.0) -> np.ndarray:
    d = np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    return np.where(np.abs(d) < delta, d / delta, np.sign(d))


def combine_confidence(f, g, beta: float):
    return f + beta * g


# ##################################################################
# joint confidence
# F = f + beta * g with g the iou of the decoded box against the object
def joint_confidence(prob: float, pred_box: Box, gt_box: Box, beta: float = 0.75) -> float:
    if not 0.0 <= prob <= 1.0:
        raise LossError(f"class probability must be in [0, 1], got {prob}")
    return float(combine_confidence(prob, iou(pred_box, gt_box), beta))


def joint_confidences(probs: np.ndarray, pred_boxes: np.ndarray, gt_box: np.ndarray, beta: float) -> np.ndarray:
    g = iou_matrix(pred_boxes, gt_box)[:, 0]
    return combine_confidence(np.asarray(probs, dtype=np.float64), g, beta)


# ##################################################################
# loss targets
# supervision for one scene: positive (anchor, class, deltas) pairs and the
# negative anchors. an anchor may appear in several positive pairs
@dataclass(frozen=True)
class LossTargets:
    pos_anchors: np.ndarray
    pos_classes: np.ndarray
    pos_deltas: np.ndarray
    neg_anchors: np.ndarray

    @property
    def num_pos(self) -> int:
        return len(self.pos_anchors)


@dataclass(frozen=True)
class LossBreakdown:
    total: float
    cls_pos: float
    cls_neg: float
    reg: float
    num_pos: int
    no_positive_warning: bool = False


# ##################################################################
# detection loss
# positive focal + beta * smooth l1 over selected pairs, focal over
# negatives, all normalized by max(1, #pairs). returns the breakdown and
# gradients w.r.t. probabilities (n, k) and deltas (n, 4)
def detection_loss(
    probs: np.ndarray,
    deltas: np.ndarray,
    targets: LossTargets,
    cfg: LossConfig = LossConfig(),
    num_objects: int = 0,
) -> tuple[LossBreakdown, np.ndarray, np.ndarray]:
    probs = np.asarray(probs, dtype=np.float64)
    deltas = np.asarray(deltas, dtype=np.float64)
    num_pos = targets.num_pos
    norm = float(max(1, num_pos))
    grad_probs = np.zeros_like(probs)
    grad_deltas = np.zeros_like(deltas)

    cls_pos = 0.0
    reg = 0.0
    positive_rows = np.unique(targets.pos_anchors)
    if num_pos:
        a, c = targets.pos_anchors, targets.pos_classes
        p = probs[a, c]
        cls_pos += float(np.sum(focal_loss(p, np.ones_like(c), cfg)))
        np.add.at(grad_probs, (a, c), focal_loss_grad(p, np.ones_like(c), cfg))

        # classes a positive anchor is not a positive of are supervised as y=0
        claimed = np.zeros(probs.shape, dtype=bool)
        claimed[a, c] = True
        rows = probs[positive_rows]
        others = ~claimed[positive_rows]
        if np.any(others):
            zeros = np.zeros(rows.shape, dtype=np.int64)
            cls_pos += float(np.sum(focal_loss(rows, zeros, cfg)[others]))
            grad_probs[positive_rows] += np.where(others, focal_loss_grad(rows, zeros, cfg), 0.0)

        pred = deltas[a]
        reg = cfg.beta * float(np.sum(smooth_l1(pred, targets.pos_deltas, cfg.smooth_l1_delta)))
        np.add.at(grad_deltas, a, cfg.beta * smooth_l1_grad(pred, targets.pos_deltas, cfg.smooth_l1_delta))

    cls_neg = 0.0
    negatives = np.setdiff1d(targets.neg_anchors, positive_rows)
    if len(negatives):
        rows = probs[negatives]
        zeros = np.zeros(rows.shape, dtype=np.int64)
        cls_neg = float(np.sum(focal_loss(rows, zeros, cfg)))
        grad_probs[negatives] += focal_loss_grad(rows, zeros, cfg)

    warning = num_objects > 0 and num_pos == 0
    if warning:
        logger.warning("scene has %d objects but no selected positive; loss uses negatives only", num_objects)

    grad_probs /= norm
    grad_deltas /= norm
    breakdown = LossBreakdown(
        total=(cls_pos + cls_neg + reg) / norm,
        cls_pos=cls_pos / norm,
        cls_neg=cls_neg / norm,
        reg=reg / norm,
        num_pos=num_pos,
        no_positive_warning=warning,
    )
    return breakdown, grad_probs, grad_deltas
