"""Uncertainty calibration: IoU targets, bipartite matching, focal-style loss.

The loss pulls each prediction's squashed class score toward its box's IoU
with the matched ground truth, so classification confidence tracks
localization quality. The gradient is analytic and checked against central
finite differences.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import DimensionError, NumericError

log = logging.getLogger(__name__)

UNMATCHED = -1


@dataclass(frozen=True)
class GroundTruth:
    boxes: np.ndarray    # (G, 4) normalized (cx, cy, w, h)
    labels: np.ndarray   # (G,) category indices

    def __post_init__(self):
        boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if boxes.shape[0] != labels.shape[0]:
            raise DimensionError("one label per ground-truth box required")
        if boxes.shape[0] and ((boxes[:, 2] <= 0) | (boxes[:, 3] <= 0)).any():
            raise DimensionError("ground-truth boxes need positive width/height")
        if (labels < 0).any():
            raise DimensionError("labels must be non-negative")
        object.__setattr__(self, "boxes", boxes)
        object.__setattr__(self, "labels", labels)

    @property
    def count(self):
        return self.boxes.shape[0]


@dataclass(frozen=True)
class CalibrationConfig:
    alpha: float = 0.25
    gamma: float = 2.0
    unmatched_target: float = 0.0

    def __post_init__(self):
        if self.alpha <= 0:
            raise DimensionError("alpha must be positive")
        if self.gamma < 0:
            raise DimensionError("gamma must be non-negative")


def cxcywh_to_xyxy(box):
    cx, cy, w, h = box
    return (cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)


def iou_xyxy(a, b):
    """Intersection over union of two corner-format boxes."""
    ax0, ay0, ax1, ay1 = a
    bx0, by0, bx1, by1 = b
    area_a = max(0.0, ax1 - ax0) * max(0.0, ay1 - ay0)
    area_b = max(0.0, bx1 - bx0) * max(0.0, by1 - by0)
    if area_a == 0.0 or area_b == 0.0:
        log.debug("degenerate zero-area box in IoU: %s vs %s", a, b)
        return 0.0
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    return inter / (area_a + area_b - inter)


def box_iou(a, b):
    """IoU of two (cx, cy, w, h) boxes."""
    return iou_xyxy(cxcywh_to_xyxy(a), cxcywh_to_xyxy(b))


def match(pred_boxes, pred_scores, gt: GroundTruth):
    """Optimal one-to-one assignment of predictions to ground truth.

    Cost of pairing prediction i with truth j is
    ``-IoU(box_i, y_j) - score[i, label_j]``. Returns an array with the
    matched ground-truth index per prediction, or UNMATCHED.
    """
    boxes = np.asarray(pred_boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(pred_scores, dtype=np.float64)
    n = boxes.shape[0]
    assignment = np.full(n, UNMATCHED, dtype=np.int64)
    if gt.count == 0 or n == 0:
        return assignment
    if scores.shape[0] != n:
        raise DimensionError("one score row per prediction required")
    if int(gt.labels.max()) >= scores.shape[1]:
        raise DimensionError("ground-truth label outside the score matrix")
    cost = np.zeros((n, gt.count))
    for i in range(n):
        for j in range(gt.count):
            cost[i, j] = -box_iou(boxes[i], gt.boxes[j]) - scores[i, gt.labels[j]]
    rows, cols = linear_sum_assignment(cost)
    assignment[rows] = cols
    return assignment


def phi_t(sigma, j, t):
    """Probability assigned to the decision implied by target class t."""
    if not 0.0 < sigma < 1.0:
        raise NumericError(f"squashed score must lie in (0, 1), got {sigma}")
    return sigma if j == t else 1.0 - sigma


def calibration_loss(scores, pred_boxes, assignment, gt: GroundTruth,
                     cfg: CalibrationConfig):
    """Focal-style calibration loss and its analytic gradient.

    ``scores`` is the (N, C) class-score matrix squashed into (0, 1). For a
    matched prediction the target on its label's class is the IoU with the
    matched box; everywhere else the target is ``cfg.unmatched_target``. Each
    term is ``-alpha * |target - phi|^gamma * log(phi)`` with ``phi`` the
    probability assigned to the class decision; the absolute value keeps the
    modulation defined for any gamma. Total is the mean over all N*C terms.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2:
        raise DimensionError("scores must be an (N, C) matrix")
    if ((scores <= 0.0) | (scores >= 1.0)).any():
        raise NumericError("scores must lie strictly inside (0, 1)")
    boxes = np.asarray(pred_boxes, dtype=np.float64).reshape(-1, 4)
    assignment = np.asarray(assignment, dtype=np.int64)
    n, c = scores.shape
    if boxes.shape[0] != n or assignment.shape[0] != n:
        raise DimensionError("boxes/assignment must cover every prediction")

    target = np.full((n, c), cfg.unmatched_target, dtype=np.float64)
    on_label = np.zeros((n, c), dtype=bool)
    for i in range(n):
        j = assignment[i]
        if j != UNMATCHED:
            t = gt.labels[j]
            on_label[i, t] = True
            target[i, t] = box_iou(boxes[i], gt.boxes[j])

    phi = np.where(on_label, scores, 1.0 - scores)
    dphi_dscore = np.where(on_label, 1.0, -1.0)
    m = np.abs(target - phi)
    if cfg.gamma == 0.0:
        mod = np.ones_like(m)
        dmod_dphi = np.zeros_like(m)
    else:
        mod = m ** cfg.gamma
        dmod_dphi = np.where(
            m > 0.0,
            cfg.gamma * m ** (cfg.gamma - 1.0) * np.sign(phi - target),
            0.0,
        )
    neg_log = -np.log(phi)
    terms = cfg.alpha * mod * neg_log
    loss = float(terms.mean())

    dterm_dphi = cfg.alpha * (dmod_dphi * neg_log - mod / phi)
    grad = dterm_dphi * dphi_dscore / (n * c)
    return loss, grad
